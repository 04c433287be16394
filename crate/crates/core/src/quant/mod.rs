//! Uniform fake quantization with zero-point nudging and straight-through
//! gradients, plus the globally shared range variables.

mod globals;

pub use globals::{
    ema_range, update_global_ranges, BoundLayerStats, GlobalVariableSet, LayerStats, RangePolicy, RangeRole, RangeSet,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("range error: {0}")]
    Range(String),
    #[error("argument error: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, QuantError>;

pub const MIN_BITS: u8 = 2;
pub const MAX_BITS: u8 = 8;

/// A quantization range variable: bounds, bit-width, and whether the
/// optimizer owns the bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f64,
    pub max: f64,
    pub bits: u8,
    #[serde(default)]
    pub trainable: bool,
}

impl Range {
    pub fn new(min: f64, max: f64, bits: u8) -> Self {
        Self {
            min,
            max,
            bits,
            trainable: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) {
            return Err(QuantError::Range(format!(
                "non-finite bounds [{}, {}]",
                self.min, self.max
            )));
        }
        if self.min >= self.max {
            return Err(QuantError::Range(format!(
                "degenerate range [{}, {}]",
                self.min, self.max
            )));
        }
        if !(MIN_BITS..=MAX_BITS).contains(&self.bits) {
            return Err(QuantError::Range(format!(
                "{} bits outside [{MIN_BITS}, {MAX_BITS}]",
                self.bits
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> Result<QuantGrid> {
        QuantGrid::new(self)
    }
}

/// A uniform grid of `2^bits` levels that contains zero exactly.
///
/// Level `k` has value `(k − z)·s`; the zero point `z` is an integer so the
/// value `0` is always level `z`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantGrid {
    pub nudged_min: f64,
    pub nudged_max: f64,
    pub scale: f64,
    pub zero_point: i64,
    pub levels: u32,
    pub bits: u8,
}

impl QuantGrid {
    pub fn new(range: &Range) -> Result<Self> {
        range.validate()?;
        let levels = 1u32 << range.bits;
        let top = f64::from(levels - 1);
        let scale = (range.max - range.min) / top;
        // −min/s evaluated as −min·(n−1)/(max−min) to avoid an extra rounding
        let z = (-range.min * top / (range.max - range.min))
            .round_ties_even()
            .clamp(0.0, top) as i64;
        Ok(Self {
            nudged_min: -(z as f64) * scale,
            nudged_max: ((levels as i64 - 1 - z) as f64) * scale,
            scale,
            zero_point: z,
            levels,
            bits: range.bits,
        })
    }

    pub fn top_code(&self) -> i64 {
        i64::from(self.levels) - 1
    }

    /// Value of level `k`, computed as `(k − z)·s` with a single rounding.
    #[inline]
    pub fn level(&self, k: i64) -> f64 {
        ((k - self.zero_point) as f64) * self.scale
    }

    /// Nearest level index after clamping (ties to even).
    #[inline]
    pub fn code(&self, t: f64) -> i64 {
        let c = t.clamp(self.nudged_min, self.nudged_max);
        let k = ((c - self.nudged_min) / self.scale).round_ties_even() as i64;
        k.clamp(0, self.top_code())
    }

    /// Signed integer `k − z` of a value that already lies on the grid.
    #[inline]
    pub fn signed_code(&self, v: f64) -> i64 {
        (v / self.scale).round_ties_even() as i64
    }

    #[inline]
    pub fn quantize(&self, t: f64) -> f64 {
        self.level(self.code(t))
    }

    /// Whether the straight-through estimator passes gradient at `t`.
    #[inline]
    pub fn passes(&self, t: f64) -> bool {
        t >= self.nudged_min && t <= self.nudged_max
    }

    pub fn values(&self) -> Vec<f64> {
        (0..i64::from(self.levels)).map(|k| self.level(k)).collect()
    }

    pub fn contains_value(&self, v: f64) -> bool {
        let k = self.signed_code(v) + self.zero_point;
        (0..=self.top_code()).contains(&k) && self.level(k) == v
    }
}

/// Builds the grid for a range; the one entry point named by the operation
/// catalogue.
pub fn make_grid(range: &Range) -> Result<QuantGrid> {
    QuantGrid::new(range)
}

/// Forward value of the fake-quant node (no tape).
pub fn fake_quant(t: &Tensor, grid: &QuantGrid) -> Tensor {
    t.map(|v| grid.quantize(v))
}

/// Records a fake-quant node: clamp, round to the nearest level, and pass
/// gradients straight through inside `[nudged_min, nudged_max]`.
pub fn fake_quant_ste(tape: &mut Tape, t: Var, grid: &QuantGrid) -> Var {
    tape.fake_quant(t, *grid)
}

/// Records `alpha·q(t) + (1−alpha)·t` with the matching blended gradient.
pub fn alpha_blend_quant(tape: &mut Tape, t: Var, grid: &QuantGrid, alpha: f64) -> Result<Var> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(QuantError::Argument(format!(
            "alpha {alpha} outside [0, 1]"
        )));
    }
    Ok(tape.alpha_blend(t, *grid, alpha))
}
