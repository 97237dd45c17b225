//! Documents, the TSV container, and dataset splitting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Class index for classification corpora, hashtag token for the regression
/// corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Class(usize),
    Token(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: usize,
    pub label: Label,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelKind {
    ClassIndex,
    HashtagToken,
}

#[derive(Debug)]
pub struct LoadedDocs {
    pub docs: Vec<Document>,
    /// Lines skipped because the text column was empty.
    pub dropped: usize,
}

/// One record per line, UTF-8, `label<TAB>text`. Ids are assigned in file
/// order over the kept records.
pub fn load_tsv(path: &Path, kind: LabelKind) -> Result<LoadedDocs> {
    let reader = BufReader::new(File::open(path)?);
    let mut docs = Vec::new();
    let mut dropped = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let (label_str, text) = line.split_once('\t').ok_or_else(|| {
            Error::Format(format!("{}:{}: missing tab separator", path.display(), lineno + 1))
        })?;
        if text.trim().is_empty() {
            dropped += 1;
            continue;
        }
        let label = match kind {
            LabelKind::ClassIndex => Label::Class(label_str.trim().parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: label {:?} is not a class index",
                    path.display(),
                    lineno + 1,
                    label_str
                ))
            })?),
            LabelKind::HashtagToken => Label::Token(label_str.trim().to_string()),
        };
        docs.push(Document {
            id: docs.len(),
            label,
            text: text.to_string(),
        });
    }
    Ok(LoadedDocs { docs, dropped })
}

pub fn save_tsv(path: &Path, docs: &[Document]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for d in docs {
        match &d.label {
            Label::Class(c) => writeln!(out, "{}\t{}", c, d.text)?,
            Label::Token(t) => writeln!(out, "{}\t{}", t, d.text)?,
        }
    }
    out.flush()?;
    Ok(())
}

/// Seeded shuffle followed by a contiguous partition. Validation and test
/// take their floor allocations; the remainder goes to train. Document ids
/// are reassigned per split so they stay dense.
pub fn split_dataset(
    mut docs: Vec<Document>,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(Vec<Document>, Vec<Document>, Vec<Document>)> {
    let (rt, rv, rte) = ratios;
    for r in [rt, rv, rte] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::BadRatios(format!("ratio {r} outside [0, 1]")));
        }
    }
    let sum = rt + rv + rte;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::BadRatios(format!("ratios sum to {sum}, expected 1")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    docs.shuffle(&mut rng);

    let n = docs.len();
    let n_valid = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rte).floor() as usize;
    let n_train = n - n_valid - n_test;

    let mut docs = docs.into_iter();
    let mut take = |count: usize| -> Vec<Document> {
        let mut v: Vec<Document> = docs.by_ref().take(count).collect();
        for (i, d) in v.iter_mut().enumerate() {
            d.id = i;
        }
        v
    };
    let train = take(n_train);
    let valid = take(n_valid);
    let test = take(n_test);
    Ok((train, valid, test))
}
