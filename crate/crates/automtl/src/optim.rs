//! Adam, global-norm gradient clipping, and the learning-rate modulation
//! schedule that shifts emphasis from the automated tasks to the primary task
//! over the course of a run.

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Linear schedule over a run of `total_epochs`. Epochs are 0-based so the
/// first epoch trains purely on the automated tasks.
#[derive(Debug, Clone, Copy)]
pub struct ScheduleState {
    pub lr_actual: f64,
    pub total_epochs: usize,
    pub epoch: usize,
}

impl ScheduleState {
    pub fn new(lr_actual: f64, total_epochs: usize, epoch: usize) -> Self {
        ScheduleState {
            lr_actual,
            total_epochs,
            epoch,
        }
    }
}

/// Splits `lr_actual` into a primary and an automated rate.
///
/// The primary rate climbs linearly from 0 to `lr_actual`; the automated rate
/// is the remainder. Whichever rate is at least `lr_actual / 2` is computed
/// from the epoch ratio and the other by subtraction; that subtraction is
/// exact (Sterbenz), so `lr_prim + lr_auto == lr_actual` holds bit-exactly at
/// every integer epoch, endpoints included.
pub fn lr_schedule(s: &ScheduleState) -> Result<(f64, f64)> {
    if s.epoch > s.total_epochs {
        return Err(Error::EpochOutOfRange {
            epoch: s.epoch,
            total: s.total_epochs,
        });
    }
    let (epoch, total) = (s.epoch, s.total_epochs);
    if 2 * epoch >= total {
        let lr_prim = s.lr_actual * (epoch as f64 / total as f64);
        Ok((lr_prim, s.lr_actual - lr_prim))
    } else {
        let lr_auto = s.lr_actual * ((total - epoch) as f64 / total as f64);
        Ok((s.lr_actual - lr_auto, lr_auto))
    }
}

/// Rescales all gradients jointly so their concatenated Euclidean norm does
/// not exceed `max_norm`. Returns the applied scale (1.0 when untouched).
/// Parameters without a gradient buffer contribute nothing.
pub fn clip_global_norm(params: &mut [(String, &mut Tensor)], max_norm: f64) -> Result<f64> {
    let mut sum_sq = 0.0;
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            for v in g {
                if !v.is_finite() {
                    return Err(Error::NonFiniteGradient(name.clone()));
                }
                sum_sq += v * v;
            }
        }
    }
    let norm = sum_sq.sqrt();
    if norm <= max_norm || norm == 0.0 {
        return Ok(1.0);
    }
    let scale = max_norm / norm;
    for (_, t) in params.iter_mut() {
        if let Some(g) = t.grad_mut() {
            for v in g {
                *v *= scale;
            }
        }
    }
    Ok(scale)
}

/// Global gradient norm over a parameter set, for in-loop assertions.
pub fn global_grad_norm(params: &[(String, &mut Tensor)]) -> f64 {
    let mut sum_sq = 0.0;
    for (_, t) in params {
        if let Some(g) = t.grad() {
            for v in g {
                sum_sq += v * v;
            }
        }
    }
    sum_sq.sqrt()
}

/// Adam with bias correction. Moment buffers mirror the parameter list they
/// were created for, by position.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step_count: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, param_sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(lr: f64, params: &[(String, &mut Tensor)]) -> Self {
        let sizes: Vec<usize> = params.iter().map(|(_, t)| t.numel()).collect();
        AdamState::new(lr, &sizes)
    }

    /// One update over every parameter, reading each tensor's gradient
    /// buffer. Parameters without gradients are treated as zero-gradient
    /// (moments still decay).
    pub fn step(&mut self, params: &mut [(String, &mut Tensor)]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "adam: {} parameters vs {} moment buffers",
                params.len(),
                self.m.len()
            )));
        }
        self.step_count += 1;
        let t = self.step_count;
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);

        for (idx, (name, tensor)) in params.iter_mut().enumerate() {
            if tensor.numel() != self.m[idx].len() {
                return Err(Error::DimensionMismatch(format!(
                    "adam: parameter {} has {} entries, moment buffer {}",
                    name,
                    tensor.numel(),
                    self.m[idx].len()
                )));
            }
            let zero = vec![0.0; tensor.numel()];
            let grad: Vec<f64> = tensor.grad().map(|g| g.to_vec()).unwrap_or(zero);
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// How per-task losses combine into the single optimized scalar.
#[derive(Debug, Clone, Copy)]
pub enum WeightMode {
    /// Coefficients `lr_prim / lr_actual` and `lr_auto / lr_actual` from the
    /// schedule, driving one optimizer at `lr_actual`.
    Scheduled(ScheduleState),
    /// Primary and automated losses summed at weight 1 each.
    Fixed,
}

impl WeightMode {
    /// (primary weight, automated weight).
    pub fn weights(&self) -> Result<(f64, f64)> {
        match self {
            WeightMode::Scheduled(s) => {
                let (lr_prim, lr_auto) = lr_schedule(s)?;
                Ok((lr_prim / s.lr_actual, lr_auto / s.lr_actual))
            }
            WeightMode::Fixed => Ok((1.0, 1.0)),
        }
    }
}

/// `w_p * primary + w_a * sum(automated)` on the tape.
pub fn apply_task_weights(
    tape: &mut Tape,
    primary: Option<Var>,
    automated: &[Var],
    mode: WeightMode,
) -> Result<Var> {
    if primary.is_none() && automated.is_empty() {
        return Err(Error::NoLoss);
    }
    let (w_p, w_a) = mode.weights()?;
    let mut combined: Option<Var> = primary.map(|p| tape.scale(p, w_p));
    for &a in automated {
        let wa = tape.scale(a, w_a);
        combined = Some(match combined {
            Some(c) => tape.add(c, wa)?,
            None => wa,
        });
    }
    Ok(combined.expect("at least one loss present"))
}
