//! Multi-task sequence classification with automatically derived auxiliary
//! tasks.
//!
//! The crate trains LSTM classifiers jointly with auxiliary objectives that
//! need no extra labels: next-word prediction, next-character prediction, and
//! missing-word completion. Two multi-task topologies are provided alongside
//! a plain two-layer baseline:
//!
//! - **MRNN** — tasks share the first LSTM layer, then branch into per-task
//!   second layers and heads. The primary stream has exactly the baseline's
//!   parameter count.
//! - **CRNN** — the first LSTM layer is supervised by the auxiliary task and
//!   its hidden state is concatenated onto the primary stream's input.
//!
//! A linear learning-rate split moves training emphasis from the auxiliary
//! task to the primary task over the run, with a single rate hyperparameter.
//! Everything runs on a small define-by-run autodiff tape in `f64`, verified
//! against central finite differences.

pub mod corpus;
pub mod error;
pub mod kernels;
pub mod layers;
pub mod numerics;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
