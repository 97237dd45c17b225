//! Gradient verification against central finite differences.

use crate::error::Result;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::tensor::Tensor;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Leaves with more entries than this are checked on a strided sample.
pub const SAMPLE_LIMIT: usize = 64;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub pass: bool,
    /// Set when the graph under test failed to build or differentiate.
    pub detail: Option<String>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub results: Vec<CheckResult>,
}

impl GradCheckReport {
    pub fn new(tolerance: f64) -> Self {
        GradCheckReport {
            tolerance,
            results: Vec::new(),
        }
    }

    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn push(&mut self, result: CheckResult) {
        self.results.push(result);
    }
}

fn loss_value<F>(build: &F, leaves: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
    let loss = build(&mut tape, &vars)?;
    Ok(tape.value_scalar(loss))
}

fn sampled_entries(numel: usize) -> Vec<usize> {
    if numel <= SAMPLE_LIMIT {
        (0..numel).collect()
    } else {
        let stride = numel.div_ceil(SAMPLE_LIMIT);
        (0..numel).step_by(stride).collect()
    }
}

/// Compares the tape's gradients for every leaf against central finite
/// differences of the rebuilt graph. `build` must be deterministic in the
/// leaf values. Build errors are reported as failed checks, not returned.
pub fn check_gradients<F>(name: &str, leaves: &[Tensor], tolerance: f64, build: F) -> CheckResult
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let leaves: Vec<Tensor> = leaves.iter().map(|t| t.clone().with_grad()).collect();

    let analytic = (|| -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t)).collect();
        let loss = build(&mut tape, &vars)?;
        tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(&leaves)
            .map(|(&v, t)| {
                tape.grad(v)
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![0.0; t.numel()])
            })
            .collect())
    })();

    let analytic = match analytic {
        Ok(g) => g,
        Err(e) => {
            return CheckResult {
                name: name.to_string(),
                max_rel_err: f64::INFINITY,
                entries_checked: 0,
                pass: false,
                detail: Some(e.to_string()),
            }
        }
    };

    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    for (li, leaf) in leaves.iter().enumerate() {
        for e in sampled_entries(leaf.numel()) {
            let mut plus = leaves.clone();
            plus[li].data_mut()[e] += FD_STEP;
            let mut minus = leaves.clone();
            minus[li].data_mut()[e] -= FD_STEP;
            let (lp, lm) = match (loss_value(&build, &plus), loss_value(&build, &minus)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(err), _) | (_, Err(err)) => {
                    return CheckResult {
                        name: name.to_string(),
                        max_rel_err: f64::INFINITY,
                        entries_checked: checked,
                        pass: false,
                        detail: Some(err.to_string()),
                    }
                }
            };
            let fd = (lp - lm) / (2.0 * FD_STEP);
            let a = analytic[li][e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            max_rel = max_rel.max(rel);
            checked += 1;
        }
    }

    CheckResult {
        name: name.to_string(),
        max_rel_err: max_rel,
        entries_checked: checked,
        pass: max_rel <= tolerance,
        detail: None,
    }
}
