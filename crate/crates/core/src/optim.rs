//! AdamW over a flat parameter buffer, with a linear warmup/decay schedule.

use std::ops::Range;

#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(len: usize) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update. Entries inside `frozen` are left untouched.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, frozen: Option<Range<usize>>) {
        debug_assert_eq!(params.len(), grads.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            if frozen.as_ref().is_some_and(|r| r.contains(&i)) {
                continue;
            }
            let g = grads[i];
            if self.weight_decay != 0.0 {
                params[i] -= lr * self.weight_decay * params[i];
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Linear ramp to `peak` over `warmup` updates, then linear decay to zero at
/// `total` updates.
#[derive(Clone, Copy, Debug)]
pub struct LinearSchedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl LinearSchedule {
    /// Learning rate for the 0-based update index `step`.
    pub fn lr(&self, step: usize) -> f64 {
        let warmup = self.warmup.min(self.total);
        if step < warmup {
            return self.peak * (step + 1) as f64 / warmup as f64;
        }
        let remaining = self.total.saturating_sub(step) as f64;
        let span = (self.total - warmup).max(1) as f64;
        self.peak * (remaining / span).clamp(0.0, 1.0)
    }
}
