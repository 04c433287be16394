use serde::{Deserialize, Serialize};

use super::{QuantError, Range, Result};
use crate::tensor::Tensor;

/// Smallest width a tracked range may collapse to.
const MIN_WIDTH: f64 = 1e-6;

/// The shared value sets of every hidden layer: inputs, outputs, weights,
/// biases, plus the activation-search variables and the quantization gates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalVariableSet {
    pub x_g: Range,
    pub y_g: Range,
    pub w_g: Range,
    pub b_g: Range,
    /// Logits `(a_0, a_1)` of the relu / shifted-tanh mixture.
    pub act_logits: [f64; 2],
    pub th_g: f64,
    pub do_q: bool,
    pub alpha: f64,
    /// Pins `w_g.min` at zero.
    #[serde(default)]
    pub unipolar_weights: bool,
}

impl GlobalVariableSet {
    pub fn new(weight_bits: u8, activation_bits: u8, bias_bits: u8) -> Self {
        Self {
            x_g: Range::new(-1.0, 1.0, activation_bits),
            y_g: Range::new(-1.0, 1.0, activation_bits),
            w_g: Range::new(-0.5, 0.5, weight_bits),
            b_g: Range::new(-0.5, 0.5, bias_bits),
            act_logits: [0.0, 0.0],
            th_g: 0.0,
            do_q: true,
            alpha: 1.0,
            unipolar_weights: false,
        }
    }

    pub fn with_unipolar_weights(mut self) -> Self {
        self.unipolar_weights = true;
        self.w_g.min = 0.0;
        if self.w_g.max <= 0.0 {
            self.w_g.max = 1.0;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for r in [&self.x_g, &self.y_g, &self.w_g, &self.b_g] {
            r.validate()?;
        }
        if self.unipolar_weights && self.w_g.min != 0.0 {
            return Err(QuantError::Range(format!(
                "unipolar weight range must start at 0, got {}",
                self.w_g.min
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(QuantError::Argument(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if !(self.th_g.is_finite() && self.act_logits.iter().all(|v| v.is_finite())) {
            return Err(QuantError::Argument("non-finite activation variables".into()));
        }
        Ok(())
    }

    pub fn range(&self, role: RangeRole) -> &Range {
        match role {
            RangeRole::Input => &self.x_g,
            RangeRole::Weight => &self.w_g,
            RangeRole::Bias => &self.b_g,
            RangeRole::Activation => &self.y_g,
        }
    }

    pub fn range_mut(&mut self, role: RangeRole) -> &mut Range {
        match role {
            RangeRole::Input => &mut self.x_g,
            RangeRole::Weight => &mut self.w_g,
            RangeRole::Bias => &mut self.b_g,
            RangeRole::Activation => &mut self.y_g,
        }
    }
}

/// Which value set a range governs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RangeRole {
    Input,
    Weight,
    Bias,
    Activation,
}

impl RangeRole {
    pub const ALL: [RangeRole; 4] = [
        RangeRole::Input,
        RangeRole::Weight,
        RangeRole::Bias,
        RangeRole::Activation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RangeRole::Input => "x",
            RangeRole::Weight => "w",
            RangeRole::Bias => "b",
            RangeRole::Activation => "y",
        }
    }
}

/// An independent set of ranges, used by the output layer and by the
/// per-layer baseline. `None` leaves that value set unquantized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSet {
    pub x: Range,
    pub w: Range,
    #[serde(default)]
    pub b: Option<Range>,
    #[serde(default)]
    pub y: Option<Range>,
    #[serde(default)]
    pub unipolar_weights: bool,
}

impl RangeSet {
    pub fn range(&self, role: RangeRole) -> Option<&Range> {
        match role {
            RangeRole::Input => Some(&self.x),
            RangeRole::Weight => Some(&self.w),
            RangeRole::Bias => self.b.as_ref(),
            RangeRole::Activation => self.y.as_ref(),
        }
    }

    pub fn range_mut(&mut self, role: RangeRole) -> Option<&mut Range> {
        match role {
            RangeRole::Input => Some(&mut self.x),
            RangeRole::Weight => Some(&mut self.w),
            RangeRole::Bias => self.b.as_mut(),
            RangeRole::Activation => self.y.as_mut(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.x.validate()?;
        self.w.validate()?;
        if let Some(b) = &self.b {
            b.validate()?;
        }
        if let Some(y) = &self.y {
            y.validate()?;
        }
        if self.unipolar_weights && self.w.min != 0.0 {
            return Err(QuantError::Range(
                "unipolar weight range must start at 0".into(),
            ));
        }
        Ok(())
    }
}

/// Summary statistics of one tensor observed during a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub std: f64,
}

impl LayerStats {
    pub fn of(t: &Tensor) -> Self {
        let n = t.numel().max(1) as f64;
        let mean = t.sum() / n;
        let var = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self {
            min: t.min(),
            max: t.max(),
            mean,
            std: var.sqrt(),
        }
    }

    pub fn envelope(stats: &[LayerStats]) -> Option<(f64, f64)> {
        if stats.is_empty() {
            return None;
        }
        let lo = stats.iter().map(|s| s.min).fold(f64::INFINITY, f64::min);
        let hi = stats.iter().map(|s| s.max).fold(f64::NEG_INFINITY, f64::max);
        Some((lo, hi))
    }
}

/// How non-differentiable range variables follow the observed values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "lowercase")]
pub enum RangePolicy {
    /// `new = decay·old + (1−decay)·envelope` over every bound layer.
    Ema { decay: f64 },
    /// Ranges are trainable scalars owned by the optimizer.
    Gradient,
    /// Ranges never move after initialization.
    Fixed,
}

impl Default for RangePolicy {
    fn default() -> Self {
        RangePolicy::Ema { decay: 0.99 }
    }
}

/// Moves one range toward the envelope of `stats`.
///
/// `pin_zero_min` keeps the lower bound at zero (unipolar weights).
pub fn ema_range(range: &Range, stats: &[LayerStats], decay: f64, pin_zero_min: bool) -> Result<Range> {
    if !(0.0..=1.0).contains(&decay) {
        return Err(QuantError::Argument(format!("decay {decay} outside [0, 1]")));
    }
    let (lo, hi) = LayerStats::envelope(stats)
        .ok_or_else(|| QuantError::Argument("no layer statistics".into()))?;
    let mut out = *range;
    out.min = decay * range.min + (1.0 - decay) * lo;
    out.max = decay * range.max + (1.0 - decay) * hi;
    if pin_zero_min {
        out.min = 0.0;
    }
    if out.max - out.min < MIN_WIDTH {
        out.max = out.min + MIN_WIDTH;
    }
    Ok(out)
}

/// Statistics of one bound layer for every value set it touches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundLayerStats {
    pub input: LayerStats,
    pub weight: LayerStats,
    pub bias: LayerStats,
    pub activation: LayerStats,
}

impl BoundLayerStats {
    pub fn get(&self, role: RangeRole) -> LayerStats {
        match role {
            RangeRole::Input => self.input,
            RangeRole::Weight => self.weight,
            RangeRole::Bias => self.bias,
            RangeRole::Activation => self.activation,
        }
    }
}

/// Recomputes the non-differentiable members of the shared set from the
/// statistics gathered over every bound layer during the current step.
///
/// Under [`RangePolicy::Gradient`] and [`RangePolicy::Fixed`] the set is
/// returned unchanged. Ranges flagged `trainable` are never touched here.
pub fn update_global_ranges(
    set: &GlobalVariableSet,
    layer_stats: &[BoundLayerStats],
    policy: RangePolicy,
) -> Result<GlobalVariableSet> {
    if layer_stats.is_empty() {
        return Err(QuantError::Argument("empty layer statistics".into()));
    }
    let decay = match policy {
        RangePolicy::Ema { decay } => decay,
        RangePolicy::Gradient | RangePolicy::Fixed => return Ok(set.clone()),
    };
    let mut out = set.clone();
    for role in RangeRole::ALL {
        let current = set.range(role);
        if current.trainable {
            continue;
        }
        let stats: Vec<LayerStats> = layer_stats.iter().map(|s| s.get(role)).collect();
        let pin = role == RangeRole::Weight && set.unipolar_weights;
        *out.range_mut(role) = ema_range(current, &stats, decay, pin)?;
    }
    Ok(out)
}
