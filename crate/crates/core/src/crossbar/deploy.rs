use std::ops::Range as Span;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{partition_layer, tile_mac, ColumnScheme, Conductance, DeploymentError, DeviceModel, Result, Tile};
use crate::model::{activation_scalar, bias_name, weight_name, ActivationKind, LinearOp, LinearStage, NetworkGraph, Stage};
use crate::quant::{GlobalVariableSet, QuantGrid, Range};
use crate::tensor::{dequantize_accumulator, im2col, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeploymentConfig {
    #[serde(default)]
    pub device: DeviceModel,
    #[serde(default = "default_tile")]
    pub tile_rows: usize,
    #[serde(default = "default_tile")]
    pub tile_cols: usize,
    /// Full-scale DAC output voltage.
    #[serde(default = "default_v_max")]
    pub v_max: f64,
    /// Seed of the frozen programming noise.
    #[serde(default)]
    pub seed: u64,
}

fn default_tile() -> usize {
    128
}

fn default_v_max() -> f64 {
    1.0
}

impl Default for DeploymentConfig {
    fn default() -> Self {
        Self {
            device: DeviceModel::default(),
            tile_rows: default_tile(),
            tile_cols: default_tile(),
            v_max: default_v_max(),
            seed: 0,
        }
    }
}

impl DeploymentConfig {
    pub fn validate(&self) -> Result<()> {
        self.device.validate()?;
        if self.tile_rows == 0 || self.tile_cols < 2 || self.tile_cols % 2 != 0 {
            return Err(DeploymentError::Argument(format!(
                "tile shape {}x{} needs positive rows and an even column count",
                self.tile_rows, self.tile_cols
            )));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(DeploymentError::Argument(format!("v_max {} must be positive", self.v_max)));
        }
        Ok(())
    }
}

/// Input converter of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacConfig {
    pub bits: u8,
    pub range: Range,
}

/// Output converter of one layer. The output layer has no output range:
/// its readout is full custom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdcConfig {
    pub bits: Option<u8>,
    pub range: Option<Range>,
    pub activation: ActivationKind,
}

/// Conductance levels per unit of signed weight code.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gain {
    /// Every weight code maps to an integer number of levels; lossless.
    Integer(u32),
    /// The conductance grid is coarser than the weight grid; lossy.
    Fractional(f64),
}

impl Gain {
    fn for_magnitude(dev: &DeviceModel, max_code: i64) -> Self {
        let top = dev.top_level();
        let m = max_code.max(1) as u32;
        match top / m {
            0 => Gain::Fractional(f64::from(top) / f64::from(m)),
            r => Gain::Integer(r),
        }
    }

    pub fn factor(self) -> f64 {
        match self {
            Gain::Integer(r) => f64::from(r),
            Gain::Fractional(f) => f,
        }
    }

    pub fn is_exact(self) -> bool {
        matches!(self, Gain::Integer(_))
    }

    /// Conductance level of a signed weight code's magnitude.
    fn level(self, code: i64) -> f64 {
        match self {
            Gain::Integer(r) => (code.unsigned_abs() * u64::from(r)) as f64,
            Gain::Fractional(f) => (code.unsigned_abs() as f64 * f).round(),
        }
    }
}

/// Output channels of one layer that share a column scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnGroup {
    pub scheme: ColumnScheme,
    pub channels: Span<usize>,
    pub gain: Gain,
    pub tiles: Vec<Tile>,
}

/// One trainable layer mapped onto tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDeployment {
    pub stage: LinearStage,
    pub dac: DacConfig,
    pub adc: AdcConfig,
    pub groups: Vec<ColumnGroup>,
    x_grid: QuantGrid,
    w_grid: QuantGrid,
    y_grid: Option<QuantGrid>,
    /// Digital bias added after decoding.
    bias: Vec<f64>,
    /// Σ over rows of the signed weight codes, per output.
    colsum: Vec<i64>,
}

impl LayerDeployment {
    pub fn tiles(&self) -> impl Iterator<Item = &Tile> {
        self.groups.iter().flat_map(|g| g.tiles.iter())
    }

    pub fn subtractors(&self) -> usize {
        self.tiles()
            .filter(|t| t.scheme == ColumnScheme::BipolarPaired)
            .map(Tile::used_outputs)
            .sum()
    }

    pub fn physical_columns(&self) -> usize {
        self.tiles().map(|t| t.used_cols).sum()
    }

    /// Accumulator units per ideal conductance level per DAC step.
    fn unit_current(&self, cfg: &DeploymentConfig) -> f64 {
        self.v_lsb(cfg) * cfg.device.g_lsb()
    }

    fn v_lsb(&self, cfg: &DeploymentConfig) -> f64 {
        cfg.v_max / self.x_grid.top_code() as f64
    }

    /// Decodes one input vector of DAC codes into the layer's outputs.
    fn read(&self, codes: &[i64], cfg: &DeploymentConfig, globals: &GlobalVariableSet, out: &mut [f64]) -> Result<()> {
        let (tr, tc) = (cfg.tile_rows, cfg.tile_cols);
        let v_lsb = self.v_lsb(cfg);
        let unit = self.unit_current(cfg);
        let volts: Vec<f64> = codes.iter().map(|&k| k as f64 * v_lsb).collect();
        let mut block = vec![0.0; tr];
        for group in &self.groups {
            let per_tile = tc / group.scheme.width();
            let mut units = vec![0i64; group.channels.len()];
            for tile in &group.tiles {
                let r0 = tile.block.0 * tr;
                block.fill(0.0);
                block[..tile.used_rows].copy_from_slice(&volts[r0..r0 + tile.used_rows]);
                let currents = tile_mac(tile, &block)?;
                let baseline = match group.scheme {
                    ColumnScheme::Unipolar => cfg.device.g_off * block.iter().sum::<f64>(),
                    ColumnScheme::BipolarPaired => 0.0,
                };
                for (j, &i) in currents.iter().take(tile.used_outputs()).enumerate() {
                    let net = i - tile.output_bias(j) - baseline;
                    units[tile.block.1 * per_tile + j] += (net / unit).round() as i64;
                }
            }
            let zx = self.x_grid.zero_point;
            for (local, ch) in group.channels.clone().enumerate() {
                let acc = units[local] as f64 / group.gain.factor() - (zx * self.colsum[ch]) as f64;
                let pre = dequantize_accumulator(acc, self.x_grid.scale, self.w_grid.scale) + self.bias[ch];
                let act = activation_scalar(self.adc.activation, pre, globals);
                out[ch] = self.y_grid.map_or(act, |g| g.quantize(act));
            }
        }
        Ok(())
    }

    /// Runs the layer on `n` samples laid out back to back.
    fn run(&self, input: &[f64], n: usize, cfg: &DeploymentConfig, globals: &GlobalVariableSet) -> Result<Vec<f64>> {
        let rows = self.stage.op.rows();
        let f = self.stage.op.outputs();
        let pos = self.stage.op.positions();
        let in_len = input.len() / n;
        let mut out = vec![0.0; n * pos * f];
        let mut codes = vec![0i64; rows];
        for s in 0..n {
            let sample = &input[s * in_len..(s + 1) * in_len];
            match self.stage.op {
                LinearOp::Dense { .. } => {
                    for (c, &v) in codes.iter_mut().zip(sample) {
                        *c = self.x_grid.code(v);
                    }
                    self.read(&codes, cfg, globals, &mut out[s * f..(s + 1) * f])?;
                }
                LinearOp::Conv(g) => {
                    let cols = im2col(sample, &g);
                    for p in 0..pos {
                        for (r, c) in codes.iter_mut().enumerate() {
                            *c = self.x_grid.code(cols[r * pos + p]);
                        }
                        let o = (s * pos + p) * f;
                        self.read(&codes, cfg, globals, &mut out[o..o + f])?;
                    }
                }
            }
        }
        Ok(out)
    }
}

/// A network mapped onto crossbar tiles, in interconnect order.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossbarDeployment {
    pub config: DeploymentConfig,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub stages: Vec<Stage>,
    pub layers: Vec<LayerDeployment>,
    /// Activation parameters shared by every ADC.
    pub globals: GlobalVariableSet,
    pub reconfigurable: bool,
}

impl CrossbarDeployment {
    /// Maps an exported quantized network.
    ///
    /// Weights are read through their quantization grids; channels of a
    /// unipolar column group must hold non-negative codes.
    pub fn build(net: &NetworkGraph, cfg: &DeploymentConfig) -> Result<Self> {
        cfg.validate()?;
        net.validate()?;
        if !net.globals.do_q || net.globals.alpha != 1.0 {
            return Err(DeploymentError::Argument(
                "only fully quantized networks (do_q set, alpha = 1) can be mapped".into(),
            ));
        }
        let stages = net.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut layers = Vec::new();
        for st in stages.iter().filter_map(Stage::as_linear) {
            let mut layer = map_layer(net, st, cfg)?;
            if cfg.device.noise_sigma > 0.0 {
                perturb(&mut layer, &cfg.device, &mut rng)?;
            }
            layers.push(layer);
        }
        let hidden: Vec<&LayerDeployment> = layers.iter().filter(|l| !l.stage.is_output()).collect();
        let reconfigurable = hidden
            .windows(2)
            .all(|w| w[0].dac == w[1].dac && w[0].adc == w[1].adc);
        Ok(Self {
            config: *cfg,
            input_shape: net.input_shape.clone(),
            num_classes: net.num_classes()?,
            stages,
            layers,
            globals: net.globals.clone(),
            reconfigurable,
        })
    }

    pub fn tiles(&self) -> impl Iterator<Item = &Tile> {
        self.layers.iter().flat_map(LayerDeployment::tiles)
    }

    pub fn tile_count(&self) -> usize {
        self.tiles().count()
    }

    /// Conductance cells that hold a weight.
    pub fn used_cells(&self) -> usize {
        self.tiles().map(|t| t.used_rows * t.used_cols).sum()
    }

    pub fn subtractors(&self) -> usize {
        self.layers.iter().map(LayerDeployment::subtractors).sum()
    }

    /// Whether the ideal device path reproduces the digital accumulator
    /// exactly: no programming noise and an integer gain in every group.
    pub fn is_lossless(&self) -> bool {
        self.config.device.noise_sigma == 0.0
            && self.layers.iter().flat_map(|l| &l.groups).all(|g| g.gain.is_exact())
    }

    pub fn manifest(&self) -> DeploymentManifest {
        let layers: Vec<LayerManifest> = self
            .layers
            .iter()
            .map(|l| {
                let count = |s| l.tiles().filter(|t| t.scheme == s).count();
                let outputs = |s| {
                    l.groups
                        .iter()
                        .filter(|g| g.scheme == s)
                        .map(|g| g.channels.len())
                        .sum()
                };
                LayerManifest {
                    name: l.stage.name.clone(),
                    kind: match l.stage.op {
                        LinearOp::Dense { .. } => "dense".into(),
                        LinearOp::Conv(_) => "conv2d".into(),
                    },
                    rows: l.stage.op.rows(),
                    outputs: l.stage.op.outputs(),
                    positions: l.stage.op.positions(),
                    unipolar_outputs: outputs(ColumnScheme::Unipolar),
                    bipolar_outputs: outputs(ColumnScheme::BipolarPaired),
                    unipolar_tiles: count(ColumnScheme::Unipolar),
                    bipolar_tiles: count(ColumnScheme::BipolarPaired),
                    physical_columns: l.physical_columns(),
                    subtractors: l.subtractors(),
                    gains: l.groups.iter().map(|g| g.gain).collect(),
                    dac: l.dac,
                    adc: l.adc,
                }
            })
            .collect();
        DeploymentManifest {
            tile_rows: self.config.tile_rows,
            tile_cols: self.config.tile_cols,
            device: self.config.device,
            v_max: self.config.v_max,
            reconfigurable: self.reconfigurable,
            lossless: self.is_lossless(),
            tiles: self.tile_count(),
            used_cells: self.used_cells(),
            subtractors: self.subtractors(),
            layers,
        }
    }
}

/// Text-serializable summary of a deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentManifest {
    pub tile_rows: usize,
    pub tile_cols: usize,
    pub device: DeviceModel,
    pub v_max: f64,
    pub reconfigurable: bool,
    pub lossless: bool,
    pub tiles: usize,
    pub used_cells: usize,
    pub subtractors: usize,
    pub layers: Vec<LayerManifest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerManifest {
    pub name: String,
    pub kind: String,
    pub rows: usize,
    pub outputs: usize,
    pub positions: usize,
    pub unipolar_outputs: usize,
    pub bipolar_outputs: usize,
    pub unipolar_tiles: usize,
    pub bipolar_tiles: usize,
    pub physical_columns: usize,
    pub subtractors: usize,
    pub gains: Vec<Gain>,
    pub dac: DacConfig,
    pub adc: AdcConfig,
}

fn map_layer(net: &NetworkGraph, st: &LinearStage, cfg: &DeploymentConfig) -> Result<LayerDeployment> {
    let ranges = net.stage_ranges(st);
    let x_grid = ranges.x.grid()?;
    let w_grid = ranges.w.grid()?;
    let y_grid = ranges.y.as_ref().map(Range::grid).transpose()?;
    let (rows, f) = (st.op.rows(), st.op.outputs());
    let w = net.params.get(&weight_name(&st.name))?;
    let codes: Vec<i64> = w
        .data()
        .iter()
        .map(|&v| w_grid.signed_code(w_grid.quantize(v)))
        .collect();
    let mut colsum = vec![0i64; f];
    for row in codes.chunks_exact(f) {
        for (s, &c) in colsum.iter_mut().zip(row) {
            *s += c;
        }
    }
    let b = net.params.get(&bias_name(&st.name))?;
    let bias: Vec<f64> = match &ranges.b {
        Some(r) => {
            let g = r.grid()?;
            b.data().iter().map(|&v| g.quantize(v)).collect()
        }
        None => b.data().to_vec(),
    };

    let m = st.polarity.constrained_channels(f);
    let top = w_grid.top_code();
    let z = w_grid.zero_point;
    let mut groups = Vec::new();
    for (scheme, channels, max_code) in [
        (ColumnScheme::Unipolar, 0..m, top - z),
        (ColumnScheme::BipolarPaired, m..f, z.max(top - z)),
    ] {
        if channels.is_empty() {
            continue;
        }
        if scheme == ColumnScheme::Unipolar {
            if let Some(i) = (0..rows * f).find(|i| i % f < m && codes[*i] < 0) {
                return Err(DeploymentError::Mapping(format!(
                    "layer {}: negative weight in unipolar channel {} (row {})",
                    st.name,
                    i % f,
                    i / f
                )));
            }
        }
        let gain = Gain::for_magnitude(&cfg.device, max_code);
        let start = channels.start;
        let dev = cfg.device;
        let mut tiles = partition_layer(
            rows,
            channels.len(),
            (cfg.tile_rows, cfg.tile_cols),
            scheme,
            &dev,
            st.ordinal,
            |r, j| {
                let c = codes[r * f + start + j];
                let g = dev.level(gain.level(c));
                Ok(match scheme {
                    ColumnScheme::Unipolar => Conductance::Unipolar(g),
                    ColumnScheme::BipolarPaired if c >= 0 => Conductance::Bipolar(g, dev.g_off),
                    ColumnScheme::BipolarPaired => Conductance::Bipolar(dev.g_off, g),
                })
            },
        )?;
        // The bias enters as a current on the first row block and is
        // removed again by the decoder, which adds the exact digital bias.
        let unit = cfg.v_max / x_grid.top_code() as f64 * dev.g_lsb();
        let per_tile = cfg.tile_cols / scheme.width();
        for t in tiles.iter_mut().filter(|t| t.block.0 == 0) {
            for j in 0..t.used_outputs() {
                let ch = start + t.block.1 * per_tile + j;
                let current = bias[ch] / (x_grid.scale * w_grid.scale) * gain.factor() * unit;
                t.bias[j * scheme.width()] = current;
            }
        }
        groups.push(ColumnGroup {
            scheme,
            channels,
            gain,
            tiles,
        });
    }
    Ok(LayerDeployment {
        stage: st.clone(),
        dac: DacConfig {
            bits: ranges.x.bits,
            range: ranges.x,
        },
        adc: AdcConfig {
            bits: ranges.y.map(|r| r.bits),
            range: ranges.y,
            activation: st.activation,
        },
        groups,
        x_grid,
        w_grid,
        y_grid,
        bias,
        colsum,
    })
}

/// Freezes multiplicative Gaussian programming noise into the used cells.
fn perturb(layer: &mut LayerDeployment, dev: &DeviceModel, rng: &mut ChaCha8Rng) -> Result<()> {
    let normal = Normal::new(0.0, dev.noise_sigma).map_err(|e| DeploymentError::Argument(e.to_string()))?;
    for group in &mut layer.groups {
        for t in &mut group.tiles {
            for r in 0..t.used_rows {
                for c in 0..t.used_cols {
                    let g = t.get(r, c) * (1.0 + normal.sample(rng));
                    t.set(r, c, g.clamp(dev.g_off, dev.g_on));
                }
            }
        }
    }
    Ok(())
}

fn maxpool(h: Vec<f64>, n: usize, shape: &[usize]) -> Result<(Vec<f64>, Vec<usize>)> {
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(full, h)?);
    let y = tape.maxpool2(x)?;
    let out = tape.value(y).clone();
    let s = out.shape()[1..].to_vec();
    Ok((out.into_data(), s))
}

/// Logits of `x[N×input_shape]` computed through the crossbar tiles.
///
/// Every layer encodes its inputs with the DAC, reads all tiles, sums the
/// partial results of the row blocks digitally, and decodes them through
/// the ADC: inverse gain, bias, activation, and output quantization.
pub fn crossbar_infer(dep: &CrossbarDeployment, x: &Tensor) -> Result<Tensor> {
    if x.rank() != dep.input_shape.len() + 1 || x.shape()[1..] != dep.input_shape[..] {
        return Err(DeploymentError::Mismatch(format!(
            "input of shape {:?} for a deployment expecting per-sample shape {:?}",
            x.shape(),
            dep.input_shape
        )));
    }
    let n = x.shape()[0];
    let mut h = x.data().to_vec();
    let mut shape = dep.input_shape.clone();
    let mut layers = dep.layers.iter();
    for stage in &dep.stages {
        match stage {
            Stage::MaxPool { .. } => (h, shape) = maxpool(h, n, &shape)?,
            Stage::Flatten { .. } => shape = vec![shape.iter().product()],
            Stage::Linear(st) => {
                let layer = layers
                    .next()
                    .ok_or_else(|| DeploymentError::Mismatch(format!("no tiles for layer {}", st.name)))?;
                h = layer.run(&h, n, &dep.config, &dep.globals)?;
                shape = st.output_shape.clone();
            }
        }
    }
    Ok(Tensor::new(vec![n, dep.num_classes], h)?)
}
