//! Mapping of quantized networks onto fixed-size NVM crossbar tiles and
//! inference through the simulated analog path.
//!
//! Inputs are encoded as row voltages by a DAC, weights as conductances, and
//! every bitline sums `Σ v·g` plus an injected bias current. The decoder
//! inverts the affine chain DAC gain × conductance map per column, so the
//! ideal device reproduces the digital integer accumulator exactly.

mod deploy;

pub use deploy::{
    crossbar_infer, AdcConfig, ColumnGroup, CrossbarDeployment, DacConfig, DeploymentConfig, DeploymentManifest, Gain,
    LayerDeployment, LayerManifest,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::ModelError;
use crate::quant::{QuantError, Range};
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum DeploymentError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("mapping error: {0}")]
    Mapping(String),
    #[error("deployment does not match: {0}")]
    Mismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DeploymentError>;

/// Programmable conductance cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceModel {
    /// OFF-state conductance in siemens.
    pub g_off: f64,
    /// ON-state conductance in siemens.
    pub g_on: f64,
    /// Programmable levels per cell are `2^conductance_bits`.
    pub conductance_bits: u8,
    /// Relative standard deviation of the programming noise.
    pub noise_sigma: f64,
}

impl Default for DeviceModel {
    fn default() -> Self {
        Self {
            g_off: 0.0,
            g_on: 100e-6,
            conductance_bits: 8,
            noise_sigma: 0.0,
        }
    }
}

impl DeviceModel {
    pub fn validate(&self) -> Result<()> {
        if !(self.g_off >= 0.0 && self.g_off < self.g_on && self.g_on.is_finite()) {
            return Err(DeploymentError::Argument(format!(
                "conductance bounds must satisfy 0 <= g_off < g_on, got [{}, {}]",
                self.g_off, self.g_on
            )));
        }
        if !(2..=8).contains(&self.conductance_bits) {
            return Err(DeploymentError::Argument(format!(
                "{} conductance bits outside [2, 8]",
                self.conductance_bits
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(DeploymentError::Argument(format!(
                "noise sigma {} must be finite and non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    /// Highest programmable level index.
    pub fn top_level(&self) -> u32 {
        (1u32 << self.conductance_bits) - 1
    }

    /// Conductance step between adjacent levels.
    pub fn g_lsb(&self) -> f64 {
        (self.g_on - self.g_off) / f64::from(self.top_level())
    }

    /// Conductance of level `k`.
    pub fn level(&self, k: f64) -> f64 {
        self.g_off + k * self.g_lsb()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnScheme {
    /// One column per output; every weight has the same sign.
    Unipolar,
    /// Adjacent (positive, negative) column pairs joined by a current
    /// subtractor.
    BipolarPaired,
}

impl ColumnScheme {
    /// Physical columns per logical output.
    pub fn width(self) -> usize {
        match self {
            ColumnScheme::Unipolar => 1,
            ColumnScheme::BipolarPaired => 2,
        }
    }
}

/// Conductance assigned to one weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Conductance {
    Unipolar(f64),
    /// `(g⁺, g⁻)`.
    Bipolar(f64, f64),
}

/// One crossbar block.
#[derive(Debug, Clone, PartialEq)]
pub struct Tile {
    pub rows: usize,
    pub cols: usize,
    pub scheme: ColumnScheme,
    /// `rows × cols` conductances, row-major.
    pub g: Vec<f64>,
    /// Current injected into every bitline.
    pub bias: Vec<f64>,
    /// Ordinal of the trainable layer this tile belongs to.
    pub layer: usize,
    /// `(row block, column block)` inside the layer's column group.
    pub block: (usize, usize),
    /// Rows and physical columns that hold weights; the rest are padding.
    pub used_rows: usize,
    pub used_cols: usize,
}

impl Tile {
    pub fn new(rows: usize, cols: usize, scheme: ColumnScheme, g_off: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(DeploymentError::Argument(format!("tile shape {rows}x{cols} must be positive")));
        }
        if scheme == ColumnScheme::BipolarPaired && cols % 2 != 0 {
            return Err(DeploymentError::Argument(format!(
                "bipolar tiles need an even column count, got {cols}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            scheme,
            g: vec![g_off; rows * cols],
            bias: vec![0.0; cols],
            layer: 0,
            block: (0, 0),
            used_rows: 0,
            used_cols: 0,
        })
    }

    /// Logical outputs the tile produces per read.
    pub fn outputs(&self) -> usize {
        self.cols / self.scheme.width()
    }

    /// Outputs that carry weights.
    pub fn used_outputs(&self) -> usize {
        self.used_cols / self.scheme.width()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.g[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, g: f64) {
        self.g[r * self.cols + c] = g;
    }

    /// Net bias current seen by logical output `j` after the subtractor.
    pub fn output_bias(&self, j: usize) -> f64 {
        match self.scheme {
            ColumnScheme::Unipolar => self.bias[j],
            ColumnScheme::BipolarPaired => self.bias[2 * j] - self.bias[2 * j + 1],
        }
    }
}

/// Bitline currents `i_b = Σ_a v_a·g_ab + bias_b`; paired tiles return
/// `i⁺ − i⁻` per pair.
pub fn tile_mac(tile: &Tile, v: &[f64]) -> Result<Vec<f64>> {
    if v.len() != tile.rows {
        return Err(DeploymentError::Mismatch(format!(
            "{} voltages for a tile with {} rows",
            v.len(),
            tile.rows
        )));
    }
    let mut i = tile.bias.clone();
    for (row, &va) in tile.g.chunks_exact(tile.cols).zip(v) {
        if va == 0.0 {
            continue;
        }
        for (acc, &g) in i.iter_mut().zip(row) {
            *acc += va * g;
        }
    }
    Ok(match tile.scheme {
        ColumnScheme::Unipolar => i,
        ColumnScheme::BipolarPaired => i.chunks_exact(2).map(|p| p[0] - p[1]).collect(),
    })
}

/// Maps one quantized weight to a conductance on the device grid.
///
/// A unipolar column maps `[0, w₁]` linearly onto `[g_off, g_on]` with
/// `w₁ = range.max`; a bipolar pair maps `|w|` with the reference magnitude
/// `max(|range.min|, range.max)` onto the column of its sign and leaves the
/// other at `g_off`. The result is snapped to the nearest conductance level.
pub fn weight_to_conductance(w: f64, range: &Range, dev: &DeviceModel, scheme: ColumnScheme) -> Result<Conductance> {
    dev.validate()?;
    let grid = range.grid()?;
    let lo = range.min.min(grid.nudged_min);
    let hi = range.max.max(grid.nudged_max);
    let tol = 1e-12 * (hi - lo);
    if !(w >= lo - tol && w <= hi + tol) {
        return Err(DeploymentError::Mapping(format!(
            "weight {w} outside range [{}, {}]",
            range.min, range.max
        )));
    }
    let top = f64::from(dev.top_level());
    let map = |m: f64, reference: f64| dev.level((m / reference * top).round().clamp(0.0, top));
    match scheme {
        ColumnScheme::Unipolar => {
            if w < -tol {
                return Err(DeploymentError::Mapping(format!(
                    "negative weight {w} in a unipolar column"
                )));
            }
            if range.max <= 0.0 {
                return Err(DeploymentError::Mapping("unipolar range without positive span".into()));
            }
            Ok(Conductance::Unipolar(map(w.max(0.0), range.max)))
        }
        ColumnScheme::BipolarPaired => {
            let reference = range.min.abs().max(range.max);
            Ok(if w >= 0.0 {
                Conductance::Bipolar(map(w, reference), dev.g_off)
            } else {
                Conductance::Bipolar(dev.g_off, map(-w, reference))
            })
        }
    }
}

/// Row voltage for an activation: the value is quantized on the input grid
/// and its level index mapped linearly onto `[0, v_max]`.
pub fn dac_encode(x: f64, range: &Range, bits: u8, v_max: f64) -> Result<f64> {
    let grid = Range { bits, ..*range }.grid()?;
    Ok(grid.code(x) as f64 / grid.top_code() as f64 * v_max)
}

/// Tile blocks needed to cover a `rows × outputs` weight matrix.
pub fn tile_count(rows: usize, outputs: usize, tile_rows: usize, tile_cols: usize, scheme: ColumnScheme) -> usize {
    rows.div_ceil(tile_rows) * (outputs * scheme.width()).div_ceil(tile_cols)
}

/// Splits a `rows × outputs` matrix of conductance pairs into tiles.
///
/// `cell(r, j)` gives the conductance of weight `(r, j)`; unipolar cells
/// use `Conductance::Unipolar`, paired cells `Conductance::Bipolar`. Partial
/// tiles are padded with `g_off`.
pub fn partition_layer(
    rows: usize,
    outputs: usize,
    tile_shape: (usize, usize),
    scheme: ColumnScheme,
    dev: &DeviceModel,
    layer: usize,
    cell: impl Fn(usize, usize) -> Result<Conductance>,
) -> Result<Vec<Tile>> {
    let (tr, tc) = tile_shape;
    if tr == 0 || tc == 0 {
        return Err(DeploymentError::Argument(format!("tile shape {tr}x{tc} must be positive")));
    }
    let width = scheme.width();
    let per_tile = tc / width;
    if per_tile == 0 {
        return Err(DeploymentError::Argument(format!(
            "tile with {tc} columns cannot hold a {scheme:?} output"
        )));
    }
    let row_blocks = rows.div_ceil(tr);
    let col_blocks = outputs.div_ceil(per_tile);
    let mut tiles = Vec::with_capacity(row_blocks * col_blocks);
    for rb in 0..row_blocks {
        for cb in 0..col_blocks {
            let mut t = Tile::new(tr, tc, scheme, dev.g_off)?;
            t.layer = layer;
            t.block = (rb, cb);
            let r0 = rb * tr;
            let j0 = cb * per_tile;
            t.used_rows = tr.min(rows - r0);
            let used_outputs = per_tile.min(outputs - j0);
            t.used_cols = used_outputs * width;
            for r in 0..t.used_rows {
                for j in 0..used_outputs {
                    match (scheme, cell(r0 + r, j0 + j)?) {
                        (ColumnScheme::Unipolar, Conductance::Unipolar(g)) => t.set(r, j, g),
                        (ColumnScheme::BipolarPaired, Conductance::Bipolar(p, n)) => {
                            t.set(r, 2 * j, p);
                            t.set(r, 2 * j + 1, n);
                        }
                        (s, c) => {
                            return Err(DeploymentError::Mapping(format!(
                                "{c:?} does not fit a {s:?} tile"
                            )))
                        }
                    }
                }
            }
            tiles.push(t);
        }
    }
    Ok(tiles)
}
