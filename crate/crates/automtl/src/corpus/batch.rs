//! Batch assembly: shuffling, truncation, padding, and per-task target
//! generation.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::corpus::charset::Charset;
use crate::corpus::clean::{tokenize_chars, tokenize_words};
use crate::corpus::data::{Document, Label};
use crate::corpus::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::tasks::{
    missing_word_example, next_char_targets, next_word_targets, StepTargets, TaskKind, TaskSpec,
    UNK_TOKEN,
};

#[derive(Debug, Clone, Copy)]
pub enum InputMode<'a> {
    Words(&'a EmbeddingStore),
    Chars(&'a Charset),
}

impl InputMode<'_> {
    pub fn input_size(&self) -> usize {
        match self {
            InputMode::Words(s) => s.dim(),
            InputMode::Chars(c) => c.len(),
        }
    }
}

/// Everything the batcher needs to turn documents into training batches.
pub struct BatchPlan<'a> {
    pub mode: InputMode<'a>,
    pub primary: &'a TaskSpec,
    pub automated: &'a [TaskSpec],
    /// Vectors for hashtag labels when the primary task is regression.
    pub label_store: Option<&'a EmbeddingStore>,
    /// Required when a missing-word task is active.
    pub stopwords: Option<&'a HashSet<String>>,
    pub batch_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub enum PrimaryTarget {
    Classes(Vec<usize>),
    Vector(Tensor),
}

#[derive(Debug, Clone)]
pub enum AutoTarget {
    /// Per-step class ids, `ids[t][row]`, with a matching validity mask.
    StepClasses { ids: Vec<Vec<usize>>, mask: Vec<Vec<f64>> },
    /// Per-step target vectors, one [rows x dim] tensor per step.
    StepVectors { targets: Vec<Tensor>, mask: Vec<Vec<f64>> },
    /// Final-step regression target with a per-row validity mask.
    FinalVector { target: Tensor, mask: Vec<f64> },
}

/// One padded batch. `steps[t]` holds every row's input at step t; rows past
/// their length are zero and never read, because heads gather at
/// `lengths[row] - 1` and the per-step masks are zero there.
#[derive(Debug, Clone)]
pub struct Batch {
    pub rows: usize,
    pub input_size: usize,
    pub steps: Vec<Tensor>,
    pub lengths: Vec<usize>,
    pub primary: PrimaryTarget,
    pub auto: Vec<AutoTarget>,
    pub doc_ids: Vec<usize>,
    /// Hashtag label tokens when the primary target is a vector; used by
    /// evaluation for the top-k match rule.
    pub label_tokens: Vec<String>,
}

enum PreparedLabel {
    Class(usize),
    Vector(Vec<f64>, String),
}

enum PreparedAuto {
    StepClasses { ids: Vec<usize>, mask: Vec<f64> },
    StepVectors { targets: Vec<Vec<f64>>, mask: Vec<f64> },
    FinalVector { target: Vec<f64>, valid: bool },
}

struct PreparedDoc {
    id: usize,
    steps: Vec<Vec<f64>>,
    label: PreparedLabel,
    auto: Vec<PreparedAuto>,
}

fn doc_rng(seed: u64, doc_id: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ doc_id as u64)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn prepare_doc(doc: &Document, plan: &BatchPlan) -> Result<PreparedDoc> {
    let label = match (&doc.label, plan.primary.kind) {
        (Label::Class(c), TaskKind::Classification) => {
            if *c >= plan.primary.output_size {
                return Err(Error::LabelOutOfRange {
                    label: *c,
                    classes: plan.primary.output_size,
                });
            }
            PreparedLabel::Class(*c)
        }
        (Label::Token(t), TaskKind::VectorRegression) => {
            let store = plan
                .label_store
                .ok_or_else(|| Error::MissingTarget(plan.primary.name.clone()))?;
            let v = store
                .get(t)
                .ok_or_else(|| Error::UnknownLabel(t.clone()))?;
            PreparedLabel::Vector(v.to_vec(), t.clone())
        }
        _ => {
            return Err(Error::SpecMismatch(format!(
                "label {:?} does not fit primary task {:?}",
                doc.label, plan.primary.kind
            )))
        }
    };

    match plan.mode {
        InputMode::Words(store) => {
            let mut tokens = tokenize_words(&doc.text);
            tokens.truncate(plan.max_len);
            if tokens.is_empty() {
                return Err(Error::TooShort { len: 0, min: 1 });
            }

            let mut auto_targets = Vec::with_capacity(plan.automated.len());
            // Masking rewrites the shared input stream, so resolve the
            // missing-word task before embedding lookup.
            for task in plan.automated {
                if task.kind != TaskKind::MissingWord {
                    continue;
                }
                let stopwords = plan
                    .stopwords
                    .ok_or_else(|| Error::MissingTarget(task.name.clone()))?;
                let mut rng = doc_rng(plan.seed, doc.id);
                match missing_word_example(&tokens, stopwords, store, &mut rng) {
                    Ok(md) => {
                        tokens = md.tokens;
                        auto_targets.push((
                            task,
                            PreparedAuto::FinalVector { target: md.target_vector, valid: true },
                        ));
                    }
                    Err(Error::NoEligibleToken) => {
                        auto_targets.push((
                            task,
                            PreparedAuto::FinalVector {
                                target: vec![0.0; store.dim()],
                                valid: false,
                            },
                        ));
                    }
                    Err(e) => return Err(e),
                }
            }

            for task in plan.automated {
                if task.kind != TaskKind::WordLm {
                    continue;
                }
                let prepared = match next_word_targets(&tokens, store) {
                    Ok(ex) => match ex.targets {
                        StepTargets::Vectors(targets) => {
                            PreparedAuto::StepVectors { targets, mask: ex.mask }
                        }
                        StepTargets::Classes(_) => unreachable!("word LM targets are vectors"),
                    },
                    // Too short or fully out of vocabulary: the document
                    // still trains the primary task, just without LM loss.
                    Err(Error::TooShort { .. }) | Err(Error::AllOov) => {
                        PreparedAuto::StepVectors { targets: Vec::new(), mask: Vec::new() }
                    }
                    Err(e) => return Err(e),
                };
                auto_targets.push((task, prepared));
            }

            let steps: Vec<Vec<f64>> = tokens
                .iter()
                .map(|t| {
                    if t == UNK_TOKEN {
                        vec![0.0; store.dim()]
                    } else {
                        store
                            .get(t)
                            .map(|v| v.to_vec())
                            .unwrap_or_else(|| vec![0.0; store.dim()])
                    }
                })
                .collect();

            let auto = order_auto(plan.automated, auto_targets)?;
            Ok(PreparedDoc { id: doc.id, steps, label, auto })
        }
        InputMode::Chars(charset) => {
            let mut ids = tokenize_chars(&doc.text, charset);
            ids.truncate(plan.max_len);
            if ids.is_empty() {
                return Err(Error::TooShort { len: 0, min: 1 });
            }

            let mut auto_targets = Vec::with_capacity(plan.automated.len());
            for task in plan.automated {
                match task.kind {
                    TaskKind::CharLm => {
                        let prepared = match next_char_targets(&ids, charset.len()) {
                            Ok(ex) => match ex.targets {
                                StepTargets::Classes(t) => {
                                    PreparedAuto::StepClasses { ids: t, mask: ex.mask }
                                }
                                StepTargets::Vectors(_) => unreachable!("char LM targets are classes"),
                            },
                            Err(Error::TooShort { .. }) => {
                                PreparedAuto::StepClasses { ids: Vec::new(), mask: Vec::new() }
                            }
                            Err(e) => return Err(e),
                        };
                        auto_targets.push((task, prepared));
                    }
                    other => {
                        return Err(Error::SpecMismatch(format!(
                            "automated task {other:?} needs word-level input"
                        )))
                    }
                }
            }

            let steps: Vec<Vec<f64>> = ids
                .iter()
                .map(|&c| {
                    let mut one_hot = vec![0.0; charset.len()];
                    one_hot[c] = 1.0;
                    one_hot
                })
                .collect();

            let auto = order_auto(plan.automated, auto_targets)?;
            Ok(PreparedDoc { id: doc.id, steps, label, auto })
        }
    }
}

fn order_auto(
    specs: &[TaskSpec],
    mut prepared: Vec<(&TaskSpec, PreparedAuto)>,
) -> Result<Vec<PreparedAuto>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let pos = prepared
            .iter()
            .position(|(s, _)| s.name == spec.name)
            .ok_or_else(|| Error::MissingTarget(spec.name.clone()))?;
        out.push(prepared.remove(pos).1);
    }
    Ok(out)
}

fn assemble(prepared: Vec<PreparedDoc>, plan: &BatchPlan) -> Result<Batch> {
    let rows = prepared.len();
    let input_size = plan.mode.input_size();
    let max_t = prepared.iter().map(|d| d.steps.len()).max().unwrap_or(0);

    let mut steps = Vec::with_capacity(max_t);
    for t in 0..max_t {
        let mut m = Tensor::zeros(rows, input_size);
        for (i, doc) in prepared.iter().enumerate() {
            if t < doc.steps.len() {
                m.row_mut(i).copy_from_slice(&doc.steps[t]);
            }
        }
        steps.push(m);
    }

    let lengths: Vec<usize> = prepared.iter().map(|d| d.steps.len()).collect();

    let mut label_tokens = Vec::new();
    let primary = match plan.primary.kind {
        TaskKind::Classification => PrimaryTarget::Classes(
            prepared
                .iter()
                .map(|d| match &d.label {
                    PreparedLabel::Class(c) => *c,
                    _ => unreachable!("label kind checked in prepare_doc"),
                })
                .collect(),
        ),
        TaskKind::VectorRegression => {
            let dim = plan.primary.output_size;
            let mut m = Tensor::zeros(rows, dim);
            for (i, doc) in prepared.iter().enumerate() {
                match &doc.label {
                    PreparedLabel::Vector(v, tok) => {
                        m.row_mut(i).copy_from_slice(v);
                        label_tokens.push(tok.clone());
                    }
                    _ => unreachable!("label kind checked in prepare_doc"),
                }
            }
            PrimaryTarget::Vector(m)
        }
        other => {
            return Err(Error::SpecMismatch(format!(
                "{other:?} cannot be a primary task"
            )))
        }
    };

    let mut auto = Vec::with_capacity(plan.automated.len());
    for (ti, spec) in plan.automated.iter().enumerate() {
        match spec.kind {
            TaskKind::WordLm => {
                let dim = spec.output_size;
                let mut targets = Vec::with_capacity(max_t);
                let mut mask = Vec::with_capacity(max_t);
                for t in 0..max_t {
                    let mut m = Tensor::zeros(rows, dim);
                    let mut mk = vec![0.0; rows];
                    for (i, doc) in prepared.iter().enumerate() {
                        if let PreparedAuto::StepVectors { targets: tg, mask: dm } = &doc.auto[ti] {
                            if t < tg.len() {
                                m.row_mut(i).copy_from_slice(&tg[t]);
                                mk[i] = dm[t];
                            }
                        }
                    }
                    targets.push(m);
                    mask.push(mk);
                }
                auto.push(AutoTarget::StepVectors { targets, mask });
            }
            TaskKind::CharLm => {
                let mut ids = Vec::with_capacity(max_t);
                let mut mask = Vec::with_capacity(max_t);
                for t in 0..max_t {
                    let mut row_ids = vec![0usize; rows];
                    let mut mk = vec![0.0; rows];
                    for (i, doc) in prepared.iter().enumerate() {
                        if let PreparedAuto::StepClasses { ids: tg, mask: dm } = &doc.auto[ti] {
                            if t < tg.len() {
                                row_ids[i] = tg[t];
                                mk[i] = dm[t];
                            }
                        }
                    }
                    ids.push(row_ids);
                    mask.push(mk);
                }
                auto.push(AutoTarget::StepClasses { ids, mask });
            }
            TaskKind::MissingWord => {
                let dim = spec.output_size;
                let mut m = Tensor::zeros(rows, dim);
                let mut mk = vec![0.0; rows];
                for (i, doc) in prepared.iter().enumerate() {
                    if let PreparedAuto::FinalVector { target, valid } = &doc.auto[ti] {
                        m.row_mut(i).copy_from_slice(target);
                        mk[i] = if *valid { 1.0 } else { 0.0 };
                    }
                }
                auto.push(AutoTarget::FinalVector { target: m, mask: mk });
            }
            other => {
                return Err(Error::SpecMismatch(format!(
                    "{other:?} cannot be an automated task"
                )))
            }
        }
    }

    Ok(Batch {
        rows,
        input_size,
        steps,
        lengths,
        primary,
        auto,
        doc_ids: prepared.iter().map(|d| d.id).collect(),
        label_tokens,
    })
}

fn prepare_many(docs: &[&Document], plan: &BatchPlan) -> Result<Vec<PreparedDoc>> {
    #[cfg(feature = "parallel")]
    if crate::kernels::parallel_enabled() && docs.len() > 1 {
        return docs.par_iter().map(|d| prepare_doc(d, plan)).collect();
    }
    docs.iter().map(|d| prepare_doc(d, plan)).collect()
}

/// Lazy batch stream over one epoch: seeded shuffle, truncation to
/// `max_len`, per-batch padding, and automated-task target generation. The
/// final partial batch is emitted.
pub struct Batches<'a> {
    docs: &'a [Document],
    plan: &'a BatchPlan<'a>,
    order: Vec<usize>,
    pos: usize,
}

impl<'a> Iterator for Batches<'a> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.plan.batch_size).min(self.order.len());
        let chunk: Vec<&Document> = self.order[self.pos..end]
            .iter()
            .map(|&i| &self.docs[i])
            .collect();
        self.pos = end;
        Some(prepare_many(&chunk, self.plan).and_then(|p| assemble(p, self.plan)))
    }
}

fn validate_plan(plan: &BatchPlan) -> Result<()> {
    if plan.batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    if plan.max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    for task in plan.automated {
        match (task.kind, &plan.mode) {
            (TaskKind::WordLm | TaskKind::MissingWord, InputMode::Chars(_)) => {
                return Err(Error::SpecMismatch(format!(
                    "task {} needs word-level input",
                    task.name
                )))
            }
            (TaskKind::CharLm, InputMode::Words(_)) => {
                return Err(Error::SpecMismatch(format!(
                    "task {} needs character-level input",
                    task.name
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Shuffled batches for one training epoch. The order is a pure function of
/// `(plan.seed, epoch)`.
pub fn make_batches<'a>(
    docs: &'a [Document],
    plan: &'a BatchPlan<'a>,
    epoch: usize,
) -> Result<Batches<'a>> {
    if docs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    validate_plan(plan)?;
    let mut order: Vec<usize> = (0..docs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(plan.seed, epoch));
    order.shuffle(&mut rng);
    Ok(Batches { docs, plan, order, pos: 0 })
}

/// File-order batches, for evaluation.
pub fn ordered_batches<'a>(docs: &'a [Document], plan: &'a BatchPlan<'a>) -> Result<Batches<'a>> {
    if docs.is_empty() {
        return Err(Error::EmptySplit);
    }
    validate_plan(plan)?;
    Ok(Batches {
        docs,
        plan,
        order: (0..docs.len()).collect(),
        pos: 0,
    })
}

/// In-vocabulary tokens map to their vectors; out-of-vocabulary tokens map
/// to the zero vector and are flagged false for LM target masking.
pub fn map_tokens_to_embeddings(
    tokens: &[String],
    store: &EmbeddingStore,
) -> (Vec<Vec<f64>>, Vec<bool>) {
    let mut vecs = Vec::with_capacity(tokens.len());
    let mut in_vocab = Vec::with_capacity(tokens.len());
    for t in tokens {
        match store.get(t) {
            Some(v) => {
                vecs.push(v.to_vec());
                in_vocab.push(true);
            }
            None => {
                vecs.push(vec![0.0; store.dim()]);
                in_vocab.push(false);
            }
        }
    }
    (vecs, in_vocab)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn word_store() -> EmbeddingStore {
        let mut s = EmbeddingStore::new(2);
        for (i, tok) in ["alpha", "beta", "gamma", "delta"].iter().enumerate() {
            let mut v = vec![0.0; 2];
            v[i % 2] = 1.0 + i as f64;
            s.insert(tok, &v).unwrap();
        }
        s
    }

    fn docs(n: usize) -> Vec<Document> {
        (0..n)
            .map(|i| Document {
                id: i,
                label: Label::Class(i % 2),
                text: "alpha beta gamma".into(),
            })
            .collect()
    }

    #[test]
    fn batch_sizes_follow_arithmetic() {
        let store = word_store();
        let primary = TaskSpec::classification("topic", 2);
        let plan = BatchPlan {
            mode: InputMode::Words(&store),
            primary: &primary,
            automated: &[],
            label_store: None,
            stopwords: None,
            batch_size: 128,
            max_len: 16,
            seed: 5,
        };
        let d = docs(300);
        let sizes: Vec<usize> = make_batches(&d, &plan, 0)
            .unwrap()
            .map(|b| b.unwrap().rows)
            .collect();
        assert_eq!(sizes, vec![128, 128, 44]);
    }

    #[test]
    fn epoch_order_is_deterministic_and_a_permutation() {
        let store = word_store();
        let primary = TaskSpec::classification("topic", 2);
        let plan = BatchPlan {
            mode: InputMode::Words(&store),
            primary: &primary,
            automated: &[],
            label_store: None,
            stopwords: None,
            batch_size: 7,
            max_len: 16,
            seed: 11,
        };
        let d = docs(20);
        let collect_ids = |epoch: usize| -> Vec<usize> {
            make_batches(&d, &plan, epoch)
                .unwrap()
                .flat_map(|b| b.unwrap().doc_ids)
                .collect()
        };
        let a = collect_ids(3);
        let b = collect_ids(3);
        assert_eq!(a, b);
        let c = collect_ids(4);
        assert_ne!(a, c);

        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn word_lm_targets_shift_by_one_in_batch() {
        let store = word_store();
        let primary = TaskSpec::classification("topic", 2);
        let automated = [TaskSpec::word_lm(2)];
        let plan = BatchPlan {
            mode: InputMode::Words(&store),
            primary: &primary,
            automated: &automated,
            label_store: None,
            stopwords: None,
            batch_size: 4,
            max_len: 16,
            seed: 0,
        };
        let d = docs(2);
        let batch = make_batches(&d, &plan, 0).unwrap().next().unwrap().unwrap();
        assert_eq!(batch.steps.len(), 3);
        match &batch.auto[0] {
            AutoTarget::StepVectors { targets, mask } => {
                assert_eq!(targets.len(), 3);
                for row in 0..batch.rows {
                    // target at step t equals input at step t+1
                    for t in 0..2 {
                        assert_eq!(mask[t][row], 1.0);
                        assert_eq!(targets[t].row(row), batch.steps[t + 1].row(row));
                    }
                    assert_eq!(mask[2][row], 0.0);
                }
            }
            _ => panic!("expected step vectors"),
        }
    }

    #[test]
    fn missing_word_rewrites_input_and_sets_target() {
        let store = word_store();
        let stop: HashSet<String> = ["alpha".to_string()].into_iter().collect();
        let primary = TaskSpec::classification("topic", 2);
        let automated = [TaskSpec::missing_word(2)];
        let plan = BatchPlan {
            mode: InputMode::Words(&store),
            primary: &primary,
            automated: &automated,
            label_store: None,
            stopwords: Some(&stop),
            batch_size: 4,
            max_len: 16,
            seed: 3,
        };
        let d = vec![Document { id: 0, label: Label::Class(0), text: "alpha beta".into() }];
        let batch = make_batches(&d, &plan, 0).unwrap().next().unwrap().unwrap();
        match &batch.auto[0] {
            AutoTarget::FinalVector { target, mask } => {
                assert_eq!(mask, &vec![1.0]);
                assert_eq!(target.row(0), store.get("beta").unwrap());
            }
            _ => panic!("expected final vector"),
        }
        // beta was the only eligible token, so its input position is zeroed.
        assert_eq!(batch.steps[1].row(0), &[0.0, 0.0]);
        assert_eq!(batch.steps[0].row(0), store.get("alpha").unwrap());
    }

    #[test]
    fn char_mode_rejects_word_tasks() {
        let charset = Charset::default_66();
        let primary = TaskSpec::classification("topic", 2);
        let automated = [TaskSpec::word_lm(2)];
        let plan = BatchPlan {
            mode: InputMode::Chars(&charset),
            primary: &primary,
            automated: &automated,
            label_store: None,
            stopwords: None,
            batch_size: 4,
            max_len: 16,
            seed: 0,
        };
        let d = docs(2);
        assert!(matches!(
            make_batches(&d, &plan, 0),
            Err(Error::SpecMismatch(_))
        ));
    }

    #[test]
    fn oov_tokens_map_to_zero_and_flag() {
        let store = word_store();
        let tokens: Vec<String> = vec!["alpha".into(), "nope".into()];
        let (vecs, flags) = map_tokens_to_embeddings(&tokens, &store);
        assert_eq!(vecs[0], store.get("alpha").unwrap());
        assert_eq!(vecs[1], vec![0.0, 0.0]);
        assert_eq!(flags, vec![true, false]);
        let (empty, eflags) = map_tokens_to_embeddings(&[], &store);
        assert!(empty.is_empty() && eflags.is_empty());
    }

    #[test]
    fn empty_dataset_rejected() {
        let store = word_store();
        let primary = TaskSpec::classification("topic", 2);
        let plan = BatchPlan {
            mode: InputMode::Words(&store),
            primary: &primary,
            automated: &[],
            label_store: None,
            stopwords: None,
            batch_size: 4,
            max_len: 16,
            seed: 0,
        };
        assert!(matches!(
            make_batches(&[], &plan, 0),
            Err(Error::EmptyDataset)
        ));
    }
}
