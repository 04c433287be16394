use serde::{Deserialize, Serialize};

use super::{Result, TrainError};
use crate::tensor::{Tape, Tensor, Var};

/// Time gate of the unipolarity penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ramp {
    /// `HV(step − N)`: 0 before step `N`, 1 from step `N` on.
    #[default]
    Heaviside,
    /// `relu(step − N)`: grows linearly after step `N`.
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstraintConfig {
    #[serde(default = "default_alpha_c")]
    pub alpha_c: f64,
    /// Threshold below which constrained weights are penalized.
    #[serde(default)]
    pub w_t: f64,
    /// Step `N` at which the penalty switches on; `None` means 30% of the
    /// step budget.
    #[serde(default)]
    pub start_step: Option<usize>,
    #[serde(default)]
    pub ramp: Ramp,
}

fn default_alpha_c() -> f64 {
    1.0
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        Self {
            alpha_c: 1.0,
            w_t: 0.0,
            start_step: None,
            ramp: Ramp::Heaviside,
        }
    }
}

impl ConstraintConfig {
    /// The step `N` for a run of `budget` steps.
    pub fn start(&self, budget: usize) -> usize {
        self.start_step
            .unwrap_or_else(|| (0.3 * budget as f64).round() as usize)
    }

    pub fn gate(&self, step: usize, start: usize) -> f64 {
        match self.ramp {
            Ramp::Heaviside => {
                if step >= start {
                    1.0
                } else {
                    0.0
                }
            }
            Ramp::Relu => step.saturating_sub(start) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    #[serde(default)]
    pub l1: f64,
    #[serde(default)]
    pub l2: f64,
    #[serde(default)]
    pub constraint: ConstraintConfig,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("l1", self.l1), ("l2", self.l2), ("alpha_c", self.constraint.alpha_c)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        Ok(())
    }
}

/// A weight tensor and how many of its leading output channels (last
/// axis) must stay non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConstrainedWeight {
    pub var: Var,
    pub constrained_channels: usize,
}

fn channel_mask(shape: &[usize], constrained: usize) -> Tensor {
    let f = *shape.last().unwrap_or(&1);
    let mut m = Tensor::zeros(shape);
    for (i, v) in m.data_mut().iter_mut().enumerate() {
        if i % f < constrained {
            *v = 1.0;
        }
    }
    m
}

/// Scalar value of the unipolarity penalty
/// `α_C · Σ_masked max(W_T − w, 0) · gate(step)`.
pub fn constraint_loss_value(weights: &[(&Tensor, usize)], cfg: &ConstraintConfig, step: usize, start: usize) -> f64 {
    let gate = cfg.gate(step, start);
    if gate == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (w, m) in weights {
        let f = *w.shape().last().unwrap_or(&1);
        for (i, v) in w.data().iter().enumerate() {
            if i % f < *m {
                sum += (cfg.w_t - v).max(0.0);
            }
        }
    }
    cfg.alpha_c * sum * gate
}

/// Records the unipolarity penalty. Returns `None` when the gate is closed
/// or nothing is constrained, so no gradient reaches the weights.
pub fn constraint_loss(
    tape: &mut Tape,
    weights: &[ConstrainedWeight],
    cfg: &ConstraintConfig,
    step: usize,
    start: usize,
) -> Result<Option<Var>> {
    let gate = cfg.gate(step, start);
    if gate == 0.0 || cfg.alpha_c == 0.0 {
        return Ok(None);
    }
    let threshold = tape.constant(Tensor::scalar(cfg.w_t));
    let mut total: Option<Var> = None;
    for cw in weights.iter().filter(|c| c.constrained_channels > 0) {
        let shape = tape.value(cw.var).shape().to_vec();
        let mask = tape.constant(channel_mask(&shape, cw.constrained_channels));
        let d = tape.sub(threshold, cw.var)?;
        let h = tape.max0(d);
        let hm = tape.mul(h, mask)?;
        let s = tape.sum(hm);
        total = Some(match total {
            Some(t) => tape.add(t, s)?,
            None => s,
        });
    }
    Ok(total.map(|t| tape.scale(t, cfg.alpha_c * gate)))
}

/// The individual terms of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Option<Var>,
    pub l2: Option<Var>,
    pub constraint: Option<Var>,
}

/// `L_F = L + l2·Σw² + l1·Σ|w| + constraint`.
pub fn total_loss(
    tape: &mut Tape,
    task: Var,
    weights: &[ConstrainedWeight],
    cfg: &LossConfig,
    step: usize,
    start: usize,
) -> Result<LossTerms> {
    let mut total = task;
    let mut l2 = None;
    let mut l1 = None;
    if cfg.l2 != 0.0 {
        let mut acc: Option<Var> = None;
        for cw in weights {
            let sq = tape.mul(cw.var, cw.var)?;
            let s = tape.sum(sq);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        if let Some(a) = acc {
            let term = tape.scale(a, cfg.l2);
            total = tape.add(total, term)?;
            l2 = Some(term);
        }
    }
    if cfg.l1 != 0.0 {
        let mut acc: Option<Var> = None;
        for cw in weights {
            let ab = tape.abs(cw.var);
            let s = tape.sum(ab);
            acc = Some(match acc {
                Some(a) => tape.add(a, s)?,
                None => s,
            });
        }
        if let Some(a) = acc {
            let term = tape.scale(a, cfg.l1);
            total = tape.add(total, term)?;
            l1 = Some(term);
        }
    }
    let constraint = constraint_loss(tape, weights, &cfg.constraint, step, start)?;
    if let Some(c) = constraint {
        total = tape.add(total, c)?;
    }
    Ok(LossTerms {
        total,
        l1,
        l2,
        constraint,
    })
}
