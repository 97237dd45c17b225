//! Token-to-vector table in the word2vec text interchange format, with
//! cosine nearest-neighbor queries.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kernels;
use crate::numerics::EPS_NORM;

#[derive(Debug, Clone)]
pub struct EmbeddingStore {
    dim: usize,
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Vec<f64>,
    norms: Vec<f64>,
}

impl EmbeddingStore {
    pub fn new(dim: usize) -> Self {
        EmbeddingStore {
            dim,
            tokens: Vec::new(),
            index: HashMap::new(),
            vectors: Vec::new(),
            norms: Vec::new(),
        }
    }

    pub fn insert(&mut self, token: &str, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "embedding for {token:?} has {} entries, store dimension is {}",
                vector.len(),
                self.dim
            )));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!("embedding for {token:?} is not finite")));
        }
        if self.index.contains_key(token) {
            return Err(Error::DuplicateToken(token.to_string()));
        }
        self.index.insert(token.to_string(), self.tokens.len());
        self.tokens.push(token.to_string());
        self.vectors.extend_from_slice(vector);
        self.norms
            .push(vector.iter().map(|v| v * v).sum::<f64>().sqrt());
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token_index(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, i: usize) -> &str {
        &self.tokens[i]
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get(&self, token: &str) -> Option<&[f64]> {
        self.token_index(token).map(|i| self.vector(i))
    }

    /// Vocabulary indices ranked by descending cosine similarity to `query`,
    /// ties broken by ascending index. `k` is clamped to the vocabulary size.
    /// Store rows with a near-zero norm rank last.
    pub fn nearest(&self, query: &[f64], k: usize) -> Result<Vec<usize>> {
        if query.len() != self.dim {
            return Err(Error::DimensionMismatch(format!(
                "query has {} entries, store dimension is {}",
                query.len(),
                self.dim
            )));
        }
        let qnorm = query.iter().map(|v| v * v).sum::<f64>().sqrt();
        if qnorm < EPS_NORM {
            return Err(Error::ZeroVector);
        }
        let mut sims = vec![0.0; self.len()];
        kernels::cosine_scan(&mut sims, query, qnorm, &self.vectors, &self.norms, self.dim, EPS_NORM);
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_unstable_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .expect("similarities are never NaN")
                .then(a.cmp(&b))
        });
        order.truncate(k.min(self.len()));
        Ok(order)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{} {}", self.len(), self.dim)?;
        for i in 0..self.len() {
            write!(out, "{}", self.tokens[i])?;
            for v in self.vector(i) {
                write!(out, " {}", v)?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Reads the word2vec text format: a `<count> <dim>` header, then one
/// `token v1 .. vdim` line per entry.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingStore> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();

    let header = lines
        .next()
        .ok_or_else(|| Error::MalformedHeader(format!("{}: empty file", path.display())))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 2 {
        return Err(Error::MalformedHeader(format!(
            "{}: expected `count dim`, got {:?}",
            path.display(),
            header
        )));
    }
    let count: usize = fields[0]
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("{}: bad count {:?}", path.display(), fields[0])))?;
    let dim: usize = fields[1]
        .parse()
        .map_err(|_| Error::MalformedHeader(format!("{}: bad dimension {:?}", path.display(), fields[1])))?;
    if dim == 0 {
        return Err(Error::MalformedHeader(format!("{}: dimension 0", path.display())));
    }

    let mut store = EmbeddingStore::new(dim);
    let mut seen = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split_whitespace();
        let token = parts
            .next()
            .expect("non-empty line has a first field")
            .to_string();
        let values: Vec<f64> = parts
            .map(|p| {
                p.parse::<f64>().map_err(|_| {
                    Error::Format(format!(
                        "{}:{}: bad value {:?}",
                        path.display(),
                        lineno + 2,
                        p
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if values.len() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{}:{}: {} values for dimension {}",
                path.display(),
                lineno + 2,
                values.len(),
                dim
            )));
        }
        store.insert(&token, &values)?;
        seen += 1;
    }
    if seen != count {
        return Err(Error::MalformedHeader(format!(
            "{}: header promises {} entries, file holds {}",
            path.display(),
            count,
            seen
        )));
    }
    Ok(store)
}
