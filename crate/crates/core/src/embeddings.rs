//! Frozen example embeddings, stored unit-normalized.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::ExampleId;
use crate::error::{Error, Result};

// Vectors whose norm is already within this of 1 are stored verbatim, which
// keeps save/load an exact round trip.
const UNIT_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    ids: Vec<ExampleId>,
    index: HashMap<ExampleId, usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    id: ExampleId,
    vec: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("embedding dimension must be positive"));
        }
        Ok(EmbeddingTable {
            dim,
            ids: Vec::new(),
            index: HashMap::new(),
            data: Vec::new(),
        })
    }

    /// Adds an entry, L2-normalizing it. Zero, non-finite, ragged and
    /// duplicate entries are rejected.
    pub fn insert(&mut self, id: ExampleId, vec: &[f64]) -> Result<()> {
        if vec.len() != self.dim {
            return Err(Error::validation(format!(
                "embedding '{id}' has {} components, table dimension is {}",
                vec.len(),
                self.dim
            )));
        }
        if vec.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation(format!("embedding '{id}' has non-finite components")));
        }
        let norm = vec.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::validation(format!("zero-norm embedding for '{id}'")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::validation(format!("duplicate embedding id '{id}'")));
        }
        if (norm - 1.0).abs() <= UNIT_TOLERANCE {
            self.data.extend_from_slice(vec);
        } else {
            self.data.extend(vec.iter().map(|v| v / norm));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        Ok(())
    }

    pub fn from_entries<'a>(
        dim: usize,
        entries: impl IntoIterator<Item = (ExampleId, &'a [f64])>,
    ) -> Result<Self> {
        let mut table = EmbeddingTable::new(dim)?;
        for (id, v) in entries {
            table.insert(id, v)?;
        }
        Ok(table)
    }

    /// Orthonormal basis vectors, one coordinate per id in the given order.
    pub fn one_hot<'a>(ids: impl IntoIterator<Item = &'a ExampleId>) -> Result<Self> {
        let ids: Vec<ExampleId> = ids.into_iter().cloned().collect();
        let dim = ids.len();
        let mut table = EmbeddingTable::new(dim)?;
        let mut v = vec![0.0; dim];
        for (i, id) in ids.into_iter().enumerate() {
            v[i] = 1.0;
            table.insert(id, &v)?;
            v[i] = 0.0;
        }
        Ok(table)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[ExampleId] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.row(i))
    }

    pub fn require(&self, id: &str) -> Result<&[f64]> {
        self.get(id).ok_or_else(|| Error::MissingEmbedding(id.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ExampleId, &[f64])> {
        self.ids.iter().enumerate().map(|(i, id)| (id, self.row(i)))
    }
}

pub fn read_embeddings(reader: impl BufRead, source: &str) -> Result<EmbeddingTable> {
    let mut table: Option<EmbeddingTable> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(source, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let location = format!("{source}:{}", i + 1);
        let parse_err = |e: serde_json::Error| Error::Parse {
            location: location.clone(),
            message: e.to_string(),
        };
        match table.as_mut() {
            None => {
                let header: Header = serde_json::from_str(&line).map_err(|e| Error::Parse {
                    location: location.clone(),
                    message: format!("expected {{\"dim\": d}} header: {e}"),
                })?;
                table = Some(EmbeddingTable::new(header.dim)?);
            }
            Some(t) => {
                let entry: Entry = serde_json::from_str(&line).map_err(parse_err)?;
                t.insert(entry.id, &entry.vec)
                    .map_err(|e| Error::validation(format!("{location}: {e}")))?;
            }
        }
    }
    table.ok_or_else(|| Error::Parse {
        location: source.to_string(),
        message: "missing {\"dim\": d} header".into(),
    })
}

pub fn write_embeddings(table: &EmbeddingTable, mut w: impl Write) -> std::io::Result<()> {
    serde_json::to_writer(&mut w, &Header { dim: table.dim })?;
    w.write_all(b"\n")?;
    for (id, v) in table.iter() {
        serde_json::to_writer(
            &mut w,
            &Entry {
                id: id.clone(),
                vec: v.to_vec(),
            },
        )?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_embeddings(BufReader::new(file), &path.display().to_string())
}

pub fn save_embeddings(table: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_embeddings(table, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::dynamics::id;

    #[test]
    fn three_four_five() {
        let t = read_embeddings("{\"dim\":2}\n{\"id\":\"a\",\"vec\":[3,4]}\n".as_bytes(), "mem").unwrap();
        assert_eq!(t.get("a").unwrap(), &[0.6, 0.8]);
    }

    #[test]
    fn zero_vector_rejected() {
        let err = read_embeddings("{\"dim\":2}\n{\"id\":\"a\",\"vec\":[0,0]}\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("zero-norm embedding"));
    }

    #[test]
    fn ragged_and_header_errors() {
        let err = read_embeddings("{\"dim\":3}\n{\"id\":\"a\",\"vec\":[1,2]}\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("dimension is 3"));
        let err = read_embeddings("{\"id\":\"a\",\"vec\":[1,2]}\n".as_bytes(), "mem").unwrap_err();
        assert!(err.to_string().contains("header"));
        assert!(read_embeddings("".as_bytes(), "mem").is_err());
        assert!(read_embeddings("{\"dim\":0}\n".as_bytes(), "mem").is_err());
    }

    #[test]
    fn one_hot_is_orthonormal() {
        let ids = [id("x"), id("y"), id("z")];
        let t = EmbeddingTable::one_hot(&ids).unwrap();
        assert_eq!(t.get("y").unwrap(), &[0.0, 1.0, 0.0]);
        assert_eq!(t.dim(), 3);
    }

    proptest! {
        #[test]
        fn save_load_is_identity(rows in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 5), 1..30)) {
            let mut table = EmbeddingTable::new(5).unwrap();
            for (i, r) in rows.iter().enumerate() {
                prop_assume!(r.iter().any(|v| v.abs() > 1e-3));
                table.insert(id(&format!("e{i}")), r).unwrap();
            }
            for (_, v) in table.iter() {
                let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                prop_assert!((n - 1.0).abs() < 1e-12);
            }
            let mut buf = Vec::new();
            write_embeddings(&table, &mut buf).unwrap();
            let back = read_embeddings(buf.as_slice(), "mem").unwrap();
            prop_assert_eq!(&back, &table);
            let mut buf2 = Vec::new();
            write_embeddings(&back, &mut buf2).unwrap();
            prop_assert_eq!(buf, buf2);
        }
    }
}
