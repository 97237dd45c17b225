//! Supervision derived mechanically from the documents themselves: next-word
//! regression targets, next-character classification targets, missing-word
//! completion, and cosine-space decoding of predicted vectors.

use std::collections::HashSet;

use rand::Rng;

use crate::corpus::EmbeddingStore;
use crate::error::{Error, Result};

/// Placeholder token standing in for a removed word.
pub const UNK_TOKEN: &str = "UNK";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Classification,
    VectorRegression,
    WordLm,
    CharLm,
    MissingWord,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SupervisionPoint {
    PerStep,
    FinalStep,
}

/// One supervised stream: what it predicts, how it is scored, and where in
/// the sequence it reads the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    pub name: String,
    pub kind: TaskKind,
    pub output_size: usize,
    pub loss: LossKind,
    pub supervision: SupervisionPoint,
}

impl TaskSpec {
    /// Checks the kind/loss/supervision pairing. Prefer the named
    /// constructors, which cannot build an invalid spec.
    pub fn new(
        name: &str,
        kind: TaskKind,
        output_size: usize,
        loss: LossKind,
        supervision: SupervisionPoint,
    ) -> Result<Self> {
        let want = match kind {
            TaskKind::Classification => (LossKind::CrossEntropy, SupervisionPoint::FinalStep),
            TaskKind::VectorRegression => (LossKind::Mse, SupervisionPoint::FinalStep),
            TaskKind::WordLm => (LossKind::Mse, SupervisionPoint::PerStep),
            TaskKind::CharLm => (LossKind::CrossEntropy, SupervisionPoint::PerStep),
            TaskKind::MissingWord => (LossKind::Mse, SupervisionPoint::FinalStep),
        };
        if (loss, supervision) != want {
            return Err(Error::SpecMismatch(format!(
                "task {name:?}: {kind:?} requires loss {:?} supervised {:?}",
                want.0, want.1
            )));
        }
        if output_size == 0 {
            return Err(Error::SpecMismatch(format!("task {name:?}: zero output size")));
        }
        Ok(TaskSpec {
            name: name.to_string(),
            kind,
            output_size,
            loss,
            supervision,
        })
    }

    pub fn classification(name: &str, classes: usize) -> Self {
        TaskSpec::new(name, TaskKind::Classification, classes, LossKind::CrossEntropy, SupervisionPoint::FinalStep)
            .expect("valid by construction")
    }

    pub fn vector_regression(name: &str, dim: usize) -> Self {
        TaskSpec::new(name, TaskKind::VectorRegression, dim, LossKind::Mse, SupervisionPoint::FinalStep)
            .expect("valid by construction")
    }

    pub fn word_lm(dim: usize) -> Self {
        TaskSpec::new("next_word", TaskKind::WordLm, dim, LossKind::Mse, SupervisionPoint::PerStep)
            .expect("valid by construction")
    }

    pub fn char_lm(charset_size: usize) -> Self {
        TaskSpec::new("next_char", TaskKind::CharLm, charset_size, LossKind::CrossEntropy, SupervisionPoint::PerStep)
            .expect("valid by construction")
    }

    pub fn missing_word(dim: usize) -> Self {
        TaskSpec::new("missing_word", TaskKind::MissingWord, dim, LossKind::Mse, SupervisionPoint::FinalStep)
            .expect("valid by construction")
    }

    /// Accuracy is reported for classification-style outputs only.
    pub fn has_accuracy(&self) -> bool {
        matches!(
            self.kind,
            TaskKind::Classification | TaskKind::CharLm | TaskKind::VectorRegression
        )
    }
}

/// Per-step targets for a language-model stream.
#[derive(Debug, Clone, PartialEq)]
pub enum StepTargets {
    Classes(Vec<usize>),
    Vectors(Vec<Vec<f64>>),
}

impl StepTargets {
    pub fn len(&self) -> usize {
        match self {
            StepTargets::Classes(v) => v.len(),
            StepTargets::Vectors(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One derived training example: inputs, aligned per-step targets, and a
/// validity mask. Masked steps contribute zero loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AutoExample {
    pub inputs: Vec<Vec<f64>>,
    pub targets: StepTargets,
    pub mask: Vec<f64>,
}

/// Shift-by-one word prediction: input step t is token t's embedding, the
/// target is token t+1's embedding. The document's final token only appears
/// as a target. Out-of-vocabulary inputs become zero vectors;
/// out-of-vocabulary targets are masked out.
pub fn next_word_targets(tokens: &[String], store: &EmbeddingStore) -> Result<AutoExample> {
    if tokens.len() < 2 {
        return Err(Error::TooShort { len: tokens.len(), min: 2 });
    }
    let steps = tokens.len() - 1;
    let mut inputs = Vec::with_capacity(steps);
    let mut targets = Vec::with_capacity(steps);
    let mut mask = Vec::with_capacity(steps);
    for t in 0..steps {
        inputs.push(
            store
                .get(&tokens[t])
                .map(|v| v.to_vec())
                .unwrap_or_else(|| vec![0.0; store.dim()]),
        );
        match store.get(&tokens[t + 1]) {
            Some(v) => {
                targets.push(v.to_vec());
                mask.push(1.0);
            }
            None => {
                targets.push(vec![0.0; store.dim()]);
                mask.push(0.0);
            }
        }
    }
    if mask.iter().all(|&m| m == 0.0) {
        return Err(Error::AllOov);
    }
    Ok(AutoExample {
        inputs,
        targets: StepTargets::Vectors(targets),
        mask,
    })
}

/// Shift-by-one character prediction over charset ids: one-hot input at step
/// t, class target id at t+1.
pub fn next_char_targets(chars: &[usize], charset_size: usize) -> Result<AutoExample> {
    if chars.len() < 2 {
        return Err(Error::TooShort { len: chars.len(), min: 2 });
    }
    for &c in chars {
        if c >= charset_size {
            return Err(Error::CharOutOfCharset { id: c, size: charset_size });
        }
    }
    let steps = chars.len() - 1;
    let mut inputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut one_hot = vec![0.0; charset_size];
        one_hot[chars[t]] = 1.0;
        inputs.push(one_hot);
    }
    Ok(AutoExample {
        inputs,
        targets: StepTargets::Classes(chars[1..].to_vec()),
        mask: vec![1.0; steps],
    })
}

/// A document with exactly one token replaced by [`UNK_TOKEN`], plus the
/// removed word and its embedding as the regression target.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDoc {
    pub tokens: Vec<String>,
    pub removed_token: String,
    pub removed_index: usize,
    pub target_vector: Vec<f64>,
}

/// Replaces one uniformly chosen in-vocabulary non-stop-word with the UNK
/// placeholder. Deterministic given the rng state.
pub fn missing_word_example<R: Rng>(
    tokens: &[String],
    stopwords: &HashSet<String>,
    store: &EmbeddingStore,
    rng: &mut R,
) -> Result<MaskedDoc> {
    let eligible: Vec<usize> = tokens
        .iter()
        .enumerate()
        .filter(|(_, t)| store.contains(t) && !stopwords.contains(*t))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(Error::NoEligibleToken);
    }
    let removed_index = eligible[rng.gen_range(0..eligible.len())];
    let removed_token = tokens[removed_index].clone();
    let target_vector = store
        .get(&removed_token)
        .expect("eligible token is in vocabulary")
        .to_vec();
    let mut masked = tokens.to_vec();
    masked[removed_index] = UNK_TOKEN.to_string();
    Ok(MaskedDoc {
        tokens: masked,
        removed_token,
        removed_index,
        target_vector,
    })
}

/// Vocabulary indices ranked by cosine similarity to `v`, descending, ties
/// by ascending index; at most `k` entries.
pub fn decode_nearest(v: &[f64], store: &EmbeddingStore, k: usize) -> Result<Vec<usize>> {
    store.nearest(v, k)
}

/// True when `target_label` falls inside the top `ceil(fraction * |V|)`
/// (at least 1) tokens closest to `pred`.
pub fn topk_match(
    pred: &[f64],
    target_label: &str,
    store: &EmbeddingStore,
    fraction: f64,
) -> Result<bool> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("top-k fraction {fraction} outside (0, 1]")));
    }
    let target = store
        .token_index(target_label)
        .ok_or_else(|| Error::UnknownLabel(target_label.to_string()))?;
    let k = top_fraction_k(store.len(), fraction);
    Ok(decode_nearest(pred, store, k)?.contains(&target))
}

/// `max(1, ceil(fraction * vocab))`.
pub fn top_fraction_k(vocab: usize, fraction: f64) -> usize {
    ((fraction * vocab as f64).ceil() as usize).max(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(3);
        s.insert("a", &[1.0, 0.0, 0.0]).unwrap();
        s.insert("b", &[0.0, 1.0, 0.0]).unwrap();
        s.insert("c", &[0.0, 0.0, 1.0]).unwrap();
        s.insert("the", &[0.5, 0.5, 0.0]).unwrap();
        s.insert("cat", &[0.1, 0.2, 0.9]).unwrap();
        s
    }

    fn toks(words: &[&str]) -> Vec<String> {
        words.iter().map(|w| w.to_string()).collect()
    }

    #[test]
    fn next_word_shifts_by_one() {
        let s = store();
        let ex = next_word_targets(&toks(&["a", "b", "c"]), &s).unwrap();
        assert_eq!(ex.inputs.len(), 2);
        assert_eq!(ex.inputs[0], s.get("a").unwrap());
        assert_eq!(ex.inputs[1], s.get("b").unwrap());
        match &ex.targets {
            StepTargets::Vectors(v) => {
                assert_eq!(v[0], s.get("b").unwrap());
                assert_eq!(v[1], s.get("c").unwrap());
            }
            _ => panic!("expected vector targets"),
        }
        assert_eq!(ex.mask, vec![1.0, 1.0]);
    }

    #[test]
    fn next_word_minimal_and_repeated() {
        let s = store();
        let ex = next_word_targets(&toks(&["a", "b"]), &s).unwrap();
        assert_eq!(ex.inputs.len(), 1);

        let ex2 = next_word_targets(&toks(&["a", "a"]), &s).unwrap();
        match &ex2.targets {
            StepTargets::Vectors(v) => assert_eq!(v[0], ex2.inputs[0]),
            _ => panic!(),
        }

        assert!(matches!(
            next_word_targets(&toks(&["a"]), &s),
            Err(Error::TooShort { .. })
        ));
        assert!(matches!(
            next_word_targets(&toks(&["zz", "qq"]), &s),
            Err(Error::AllOov)
        ));
    }

    #[test]
    fn next_word_masks_oov_targets() {
        let s = store();
        let ex = next_word_targets(&toks(&["a", "zz", "b"]), &s).unwrap();
        assert_eq!(ex.mask, vec![0.0, 1.0]);
        assert_eq!(ex.inputs[1], vec![0.0; 3]);
    }

    #[test]
    fn next_char_shifts_and_validates() {
        let ex = next_char_targets(&[0, 1], 66).unwrap();
        assert_eq!(ex.inputs.len(), 1);
        assert_eq!(ex.inputs[0][0], 1.0);
        assert_eq!(ex.targets, StepTargets::Classes(vec![1]));

        let ex2 = next_char_targets(&[3, 3, 3], 66).unwrap();
        assert_eq!(ex2.targets, StepTargets::Classes(vec![3, 3]));

        assert!(matches!(
            next_char_targets(&[0], 66),
            Err(Error::TooShort { .. })
        ));
        assert!(matches!(
            next_char_targets(&[0, 70], 66),
            Err(Error::CharOutOfCharset { id: 70, size: 66 })
        ));
    }

    #[test]
    fn missing_word_masks_single_eligible_token() {
        let s = store();
        let stop: HashSet<String> = ["the".to_string()].into_iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let md = missing_word_example(&toks(&["the", "cat"]), &stop, &s, &mut rng).unwrap();
        assert_eq!(md.tokens, toks(&["the", "UNK"]));
        assert_eq!(md.removed_token, "cat");
        assert_eq!(md.removed_index, 1);
        assert_eq!(md.target_vector, s.get("cat").unwrap());

        let only_stop = missing_word_example(&toks(&["the", "the"]), &stop, &s, &mut rng);
        assert!(matches!(only_stop, Err(Error::NoEligibleToken)));
    }

    #[test]
    fn missing_word_choice_is_roughly_uniform() {
        let s = store();
        let stop: HashSet<String> = HashSet::new();
        let tokens = toks(&["a", "b", "c", "cat"]);
        let draws = 10_000;
        let mut counts = [0usize; 4];
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..draws {
            let md = missing_word_example(&tokens, &stop, &s, &mut rng).unwrap();
            counts[md.removed_index] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.05 * 0.25 + 0.02, "freq {freq}");
        }
    }

    #[test]
    fn decode_nearest_round_trips_and_clamps() {
        let s = store();
        for i in 0..s.len() {
            let ranked = decode_nearest(s.vector(i), &s, 1).unwrap();
            assert_eq!(ranked, vec![i]);
        }
        let all = decode_nearest(&[1.0, 0.0, 0.0], &s, 100).unwrap();
        assert_eq!(all.len(), s.len());
    }

    #[test]
    fn topk_match_arithmetic_and_monotonicity() {
        assert_eq!(top_fraction_k(71, 0.05), 4);
        assert_eq!(top_fraction_k(3, 0.01), 1);

        let s = store();
        assert!(topk_match(s.get("cat").unwrap(), "cat", &s, 0.01).unwrap());
        assert!(topk_match(&[1.0, 0.0, 0.0], "cat", &s, 1.0).unwrap());
        assert!(matches!(
            topk_match(&[1.0, 0.0, 0.0], "missing", &s, 0.5),
            Err(Error::UnknownLabel(_))
        ));

        // Monotone in the fraction.
        let pred = [0.3, 0.2, 0.5];
        let mut prev = false;
        for f in [0.2, 0.4, 0.6, 0.8, 1.0] {
            let m = topk_match(&pred, "b", &s, f).unwrap();
            assert!(m || !prev, "match flipped off as fraction grew");
            prev = m;
        }
    }

    #[test]
    fn task_spec_invariants_enforced() {
        assert!(TaskSpec::new(
            "bad",
            TaskKind::Classification,
            2,
            LossKind::Mse,
            SupervisionPoint::FinalStep
        )
        .is_err());
        let t = TaskSpec::char_lm(66);
        assert_eq!(t.loss, LossKind::CrossEntropy);
        assert_eq!(t.supervision, SupervisionPoint::PerStep);
    }
}
