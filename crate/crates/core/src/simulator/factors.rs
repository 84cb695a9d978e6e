use super::SimulatorParams;
use crate::error::{Error, Result};

/// `out = M^T h` for a row-major `d x p` matrix `M`.
pub(crate) fn project(m: &[f64], h: &[f64], p: usize, out: &mut [f64]) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &hk) in h.iter().enumerate() {
        let row = &m[k * p..(k + 1) * p];
        for (o, &w) in out.iter_mut().zip(row) {
            *o += hk * w;
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check_dim(params: &SimulatorParams, h: &[f64]) -> Result<()> {
    if h.len() != params.embed_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.embed_dim(),
            actual: h.len(),
        });
    }
    Ok(())
}

/// Projected test-side vectors, reused across all examples of a batch.
struct TestSide {
    lags: Vec<Vec<f64>>,
    add: Vec<f64>,
}

impl TestSide {
    fn new(params: &SimulatorParams, h_test: &[f64]) -> Self {
        let p = params.proj_dim();
        let lags = (0..params.order())
            .map(|j| {
                let mut v = vec![0.0; p];
                project(params.u(j), h_test, p, &mut v);
                v
            })
            .collect();
        let mut add = vec![0.0; p];
        project(params.u_add(), h_test, p, &mut add);
        TestSide { lags, add }
    }

    fn factors(&self, params: &SimulatorParams, h_train: &[f64], scratch: &mut [f64]) -> (Vec<f64>, f64) {
        let p = params.proj_dim();
        let a = (0..params.order())
            .map(|j| {
                project(params.w(j), h_train, p, scratch);
                dot(scratch, &self.lags[j])
            })
            .collect();
        project(params.w_add(), h_train, p, scratch);
        (a, dot(scratch, &self.add))
    }
}

/// Per-example influence factors: `A[j]` for each lag and the additive `B`.
pub fn influence_factors(
    params: &SimulatorParams,
    h_train: &[f64],
    h_test: &[f64],
) -> Result<(Vec<f64>, f64)> {
    check_dim(params, h_train)?;
    check_dim(params, h_test)?;
    let side = TestSide::new(params, h_test);
    let mut scratch = vec![0.0; params.proj_dim()];
    Ok(side.factors(params, h_train, &mut scratch))
}

/// Sums factors over a batch. Each component is accumulated left to right
/// over its values sorted by `f64::total_cmp`, so the result does not depend
/// on the order of `batch`.
pub fn step_factors(
    params: &SimulatorParams,
    batch: &[&[f64]],
    h_test: &[f64],
) -> Result<(Vec<f64>, f64)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("step_factors: empty batch".into()));
    }
    check_dim(params, h_test)?;
    let side = TestSide::new(params, h_test);
    let mut scratch = vec![0.0; params.proj_dim()];
    let n = params.order();
    let mut per_lag: Vec<Vec<f64>> = vec![Vec::with_capacity(batch.len()); n];
    let mut adds = Vec::with_capacity(batch.len());
    for h in batch {
        check_dim(params, h)?;
        let (a, b) = side.factors(params, h, &mut scratch);
        for (lag, v) in per_lag.iter_mut().zip(a) {
            lag.push(v);
        }
        adds.push(b);
    }
    let ordered_sum = |mut v: Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v.into_iter().fold(0.0, |acc, x| acc + x)
    };
    let alpha = per_lag.into_iter().map(ordered_sum).collect();
    Ok((alpha, ordered_sum(adds)))
}

/// `sum_j alpha[j] * history[j] + beta`, history ordered most recent first.
pub fn predict_step(alpha: &[f64], beta: f64, history: &[f64]) -> Result<f64> {
    if history.len() != alpha.len() {
        return Err(Error::InvalidArgument(format!(
            "history has {} values, model order is {}",
            history.len(),
            alpha.len()
        )));
    }
    let mut y = 0.0;
    for (a, h) in alpha.iter().zip(history) {
        y += a * h;
    }
    Ok(y + beta)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::simulator::SimulatorConfig;

    fn cfg(n: usize, d: usize, p: usize) -> SimulatorConfig {
        SimulatorConfig {
            order: n,
            embed_dim: d,
            proj_dim: p,
            ..Default::default()
        }
    }

    fn random_params(n: usize, d: usize, p: usize, seed: u64) -> SimulatorParams {
        let mut c = cfg(n, d, p);
        c.seed = seed;
        SimulatorParams::init(c).unwrap()
    }

    fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    // Independent double loop: <M^T x, N^T y> = sum_q sum_k sum_l x_k M_kq y_l N_lq.
    fn frobenius_oracle(m: &[f64], n: &[f64], x: &[f64], y: &[f64], p: usize) -> f64 {
        let d = x.len();
        let mut total = 0.0;
        for q in 0..p {
            for k in 0..d {
                for l in 0..d {
                    total += x[k] * m[k * p + q] * y[l] * n[l * p + q];
                }
            }
        }
        total
    }

    #[test]
    fn hand_computed_factor() {
        let params = SimulatorParams::from_parts(
            cfg(1, 2, 1),
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let (a, b) = influence_factors(&params, &[2.0, 5.0], &[3.0, 4.0]).unwrap();
        assert_eq!(a, vec![8.0]);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn orthogonal_inputs_give_zero() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let params = SimulatorParams::from_parts(cfg(1, 2, 2), vec![eye.clone()], vec![eye.clone()], eye.clone(), eye).unwrap();
        let (a, b) = influence_factors(&params, &[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert_eq!(a, vec![0.0]);
        assert_eq!(b, 0.0);
    }

    #[test]
    fn matches_frobenius_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..20 {
            let (n, d, p) = (1 + trial % 3, 3 + trial % 5, 1 + trial % 4);
            let params = random_params(n, d, p, trial as u64);
            let x = random_vec(&mut rng, d);
            let y = random_vec(&mut rng, d);
            let (a, b) = influence_factors(&params, &x, &y).unwrap();
            for (j, got) in a.iter().enumerate() {
                let want = frobenius_oracle(params.w(j), params.u(j), &x, &y, p);
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
            let want = frobenius_oracle(params.w_add(), params.u_add(), &x, &y, p);
            assert!((b - want).abs() <= 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn dimension_mismatch() {
        let params = random_params(1, 3, 2, 0);
        assert!(matches!(
            influence_factors(&params, &[1.0, 0.0], &[1.0, 0.0, 0.0]),
            Err(Error::DimensionMismatch { expected: 3, actual: 2 })
        ));
    }

    #[test]
    fn singleton_batch_equals_factors() {
        let params = random_params(2, 4, 3, 5);
        let x = [0.1, -0.4, 0.3, 0.9];
        let y = [0.5, 0.5, -0.5, 0.5];
        let (a, b) = influence_factors(&params, &x, &y).unwrap();
        let (alpha, beta) = step_factors(&params, &[&x], &y).unwrap();
        assert_eq!(a, alpha);
        assert_eq!(b, beta);
    }

    #[test]
    fn batch_sum_of_two() {
        // A-values 8 and -3 via the hand-built weights of `hand_computed_factor`.
        let params = SimulatorParams::from_parts(
            cfg(1, 2, 1),
            vec![vec![1.0, 0.0]],
            vec![vec![0.0, 1.0]],
            vec![0.0, 0.0],
            vec![0.0, 0.0],
        )
        .unwrap();
        let (alpha, _) = step_factors(&params, &[&[2.0, 5.0], &[-0.75, 1.0]], &[3.0, 4.0]).unwrap();
        assert_eq!(alpha, vec![5.0]);
    }

    #[test]
    fn empty_batch_rejected() {
        let params = random_params(1, 2, 1, 0);
        assert!(step_factors(&params, &[], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn batch_of_eight_equals_fixed_order_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = random_params(2, 6, 4, 9);
        let batch: Vec<Vec<f64>> = (0..8).map(|_| random_vec(&mut rng, 6)).collect();
        let h = random_vec(&mut rng, 6);
        let refs: Vec<&[f64]> = batch.iter().map(|v| v.as_slice()).collect();
        let (alpha, beta) = step_factors(&params, &refs, &h).unwrap();
        // fixed-order oracle: compute each factor alone, sort, sum left to right
        let mut per_lag = vec![Vec::new(); 2];
        let mut adds = Vec::new();
        for x in &batch {
            let (a, b) = influence_factors(&params, x, &h).unwrap();
            per_lag[0].push(a[0]);
            per_lag[1].push(a[1]);
            adds.push(b);
        }
        for (j, mut v) in per_lag.into_iter().enumerate() {
            v.sort_by(f64::total_cmp);
            let mut s = 0.0;
            for x in v {
                s += x;
            }
            assert_eq!(alpha[j].to_bits(), s.to_bits());
        }
        adds.sort_by(f64::total_cmp);
        let mut s = 0.0;
        for x in adds {
            s += x;
        }
        assert_eq!(beta.to_bits(), s.to_bits());
    }

    #[test]
    fn predict_step_examples() {
        assert_eq!(predict_step(&[0.5, 0.25], 1.0, &[4.0, 8.0]).unwrap(), 5.0);
        assert_eq!(predict_step(&[1.0], 0.0, &[3.25]).unwrap(), 3.25);
        assert_eq!(predict_step(&[0.0], 7.0, &[123.0]).unwrap(), 7.0);
        assert!(predict_step(&[1.0], 0.0, &[1.0, 2.0]).is_err());
    }

    proptest! {
        #[test]
        fn step_factors_permutation_invariant(seed in any::<u64>(), perm_seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(2, 5, 3, seed);
            let batch: Vec<Vec<f64>> = (0..6).map(|_| random_vec(&mut rng, 5)).collect();
            let h = random_vec(&mut rng, 5);
            let mut refs: Vec<&[f64]> = batch.iter().map(|v| v.as_slice()).collect();
            let base = step_factors(&params, &refs, &h).unwrap();
            refs.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let shuffled = step_factors(&params, &refs, &h).unwrap();
            prop_assert_eq!(base, shuffled);
        }

        #[test]
        fn duplicating_batch_doubles_factors(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let params = random_params(2, 4, 2, seed ^ 1);
            let batch: Vec<Vec<f64>> = (0..3).map(|_| random_vec(&mut rng, 4)).collect();
            let h = random_vec(&mut rng, 4);
            let once: Vec<&[f64]> = batch.iter().map(|v| v.as_slice()).collect();
            let twice: Vec<&[f64]> = once.iter().chain(once.iter()).copied().collect();
            let (a1, b1) = step_factors(&params, &once, &h).unwrap();
            let (a2, b2) = step_factors(&params, &twice, &h).unwrap();
            for (x, y) in a1.iter().zip(&a2) {
                prop_assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1.0));
            }
            prop_assert!((2.0 * b1 - b2).abs() <= 1e-12 * b2.abs().max(1.0));
        }

        #[test]
        fn predict_step_is_linear(a in prop::collection::vec(-2.0f64..2.0, 3), h1 in prop::collection::vec(-5.0f64..5.0, 3),
                                  h2 in prop::collection::vec(-5.0f64..5.0, 3), c in -3.0f64..3.0) {
            let sum: Vec<f64> = h1.iter().zip(&h2).map(|(x, y)| x + c * y).collect();
            let lhs = predict_step(&a, 0.0, &sum).unwrap();
            let rhs = predict_step(&a, 0.0, &h1).unwrap() + c * predict_step(&a, 0.0, &h2).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-9);
        }
    }
}
