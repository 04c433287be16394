//! Layer specifications, the parameter store, and network graphs.
//!
//! A [`NetworkGraph`] is an ordered list of [`LayerSpec`]s. Activation layers
//! are not separate crossbar stages: each one is fused into the ADC stage of
//! the trainable layer right before it, which is why [`NetworkGraph::plan`]
//! resolves the layer list into [`Stage`]s first.

mod description;
mod forward;
mod reference;

pub use description::NetworkDescription;
pub use forward::{
    activation_mix, activation_mix_scalar, activation_scalar, forward, forward_traced, ForwardTrace, GlobalVars, LayerObservation,
    Mode, RangeScope,
};
pub use reference::{
    build_reference, ReferenceNet, ReferenceOptions, CIFAR_CLASSES, HAR_CHANNELS, HAR_CLASSES, HAR_WINDOW,
};

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{GlobalVariableSet, QuantError, Range, RangeSet};
use crate::tensor::{ConvGeometry, Padding, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("argument error: {0}")]
    Argument(String),
    #[error("non-finite values in layer `{layer}`")]
    NonFinite { layer: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    /// `tanh(x − th_g)`.
    ShiftedTanh,
    /// `a_0·relu(x) + a_1·tanh(x − th_g)` with `(a_0, a_1) = softmax(A_g)`.
    Mix,
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default = "same")]
        padding: Padding,
    },
    Dense {
        units: usize,
    },
    /// 2×2 max pooling with stride 2.
    MaxPool,
    Flatten,
    Activation {
        function: ActivationKind,
    },
    /// The classifier head: a dense layer without activation.
    Output {
        units: usize,
    },
}

fn one() -> usize {
    1
}

fn same() -> Padding {
    Padding::Same
}

impl LayerKind {
    pub fn is_trainable(&self) -> bool {
        matches!(self, LayerKind::Conv2d { .. } | LayerKind::Dense { .. } | LayerKind::Output { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantBinding {
    /// Quantized on the shared global grids.
    #[default]
    Global,
    /// Quantized on the output layer's own ranges.
    Output,
}

/// Sign constraint of a layer's weights.
///
/// `Fractional(p)` constrains the first `round(p·F)` output channels to be
/// non-negative and leaves the rest bipolar.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Polarity {
    #[default]
    Bipolar,
    Unipolar,
    Fractional(f64),
}

impl Polarity {
    pub fn validate(&self) -> Result<()> {
        if let Polarity::Fractional(p) = self {
            if !(0.0..=1.0).contains(p) {
                return Err(ModelError::Argument(format!(
                    "unipolar fraction {p} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    /// Number of leading output channels constrained to be non-negative.
    pub fn constrained_channels(&self, channels: usize) -> usize {
        match *self {
            Polarity::Bipolar => 0,
            Polarity::Unipolar => channels,
            Polarity::Fractional(p) => ((p * channels as f64).round() as usize).min(channels),
        }
    }

    /// Fraction of unipolar channels.
    pub fn fraction(&self) -> f64 {
        match *self {
            Polarity::Bipolar => 0.0,
            Polarity::Unipolar => 1.0,
            Polarity::Fractional(p) => p,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Polarity::Bipolar => write!(f, "bipolar"),
            Polarity::Unipolar => write!(f, "unipolar"),
            Polarity::Fractional(p) => write!(f, "fractional({p})"),
        }
    }
}

impl FromStr for Polarity {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let p = match s {
            "bipolar" => Polarity::Bipolar,
            "unipolar" => Polarity::Unipolar,
            _ => {
                let inner = s
                    .strip_prefix("fractional(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| ModelError::Argument(format!("unknown polarity `{s}`")))?;
                let p: f64 = inner
                    .trim()
                    .parse()
                    .map_err(|_| ModelError::Argument(format!("bad unipolar fraction `{inner}`")))?;
                Polarity::Fractional(p)
            }
        };
        p.validate()?;
        Ok(p)
    }
}

impl Serialize for Polarity {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Polarity {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    #[serde(default)]
    pub quant_binding: QuantBinding,
    #[serde(default)]
    pub polarity: Polarity,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        let quant_binding = match kind {
            LayerKind::Output { .. } => QuantBinding::Output,
            _ => QuantBinding::Global,
        };
        Self {
            name: name.into(),
            kind,
            quant_binding,
            polarity: Polarity::Bipolar,
        }
    }

    pub fn with_polarity(mut self, polarity: Polarity) -> Self {
        self.polarity = polarity;
        self
    }
}

/// Named weight and bias tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    tensors: IndexMap<String, Tensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(ModelError::Argument(format!(
                "parameter `{name}` registered twice"
            )));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| ModelError::Argument(format!("no parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| ModelError::Argument(format!("no parameter `{name}`")))
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set(&mut self, name: &str, t: Tensor) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.shape() != t.shape() {
            return Err(ModelError::Dimension(format!(
                "parameter `{name}` has shape {:?}, got {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable access to every parameter's values; shapes stay fixed.
    pub fn values_mut(&mut self) -> impl Iterator<Item = (&str, &mut [f64])> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v.data_mut()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

pub fn weight_name(layer: &str) -> String {
    format!("{layer}.weight")
}

pub fn bias_name(layer: &str) -> String {
    format!("{layer}.bias")
}

/// The matrix product a trainable layer performs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearOp {
    Dense { inputs: usize, units: usize },
    Conv(ConvGeometry),
}

impl LinearOp {
    /// Rows of the weight matrix (crossbar rows).
    pub fn rows(&self) -> usize {
        match self {
            LinearOp::Dense { inputs, .. } => *inputs,
            LinearOp::Conv(g) => g.patch_len(),
        }
    }

    /// Output channels (logical crossbar columns).
    pub fn outputs(&self) -> usize {
        match self {
            LinearOp::Dense { units, .. } => *units,
            LinearOp::Conv(g) => g.filters,
        }
    }

    /// Number of input vectors applied per sample.
    pub fn positions(&self) -> usize {
        match self {
            LinearOp::Dense { .. } => 1,
            LinearOp::Conv(g) => g.positions(),
        }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        match self {
            LinearOp::Dense { inputs, units } => vec![*inputs, *units],
            LinearOp::Conv(g) => vec![g.kh, g.kw, g.in_c, g.filters],
        }
    }

    pub fn param_count(&self) -> usize {
        self.rows() * self.outputs() + self.outputs()
    }
}

/// One trainable layer with its fused activation.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearStage {
    /// Index of the layer in [`NetworkGraph::layers`].
    pub layer: usize,
    pub name: String,
    pub op: LinearOp,
    pub activation: ActivationKind,
    pub binding: QuantBinding,
    pub polarity: Polarity,
    /// Position among all trainable layers.
    pub ordinal: usize,
    /// Position among hidden trainable layers, `None` for the last one.
    pub hidden: Option<usize>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

impl LinearStage {
    pub fn is_output(&self) -> bool {
        self.hidden.is_none()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Linear(LinearStage),
    MaxPool { input_shape: Vec<usize> },
    Flatten { input_shape: Vec<usize> },
}

/// How hidden layers obtain their quantization ranges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeSharing {
    /// One shared set of ranges for every hidden layer.
    #[default]
    Global,
    /// Independent ranges per layer; the biases stay unquantized.
    PerLayer,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    /// Per-sample input shape, `[H, W, C]` or `[features…]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
    pub params: ParameterStore,
    pub globals: GlobalVariableSet,
    pub output_ranges: RangeSet,
    /// Present only when ranges are not shared; indexed by hidden ordinal.
    #[serde(default)]
    pub per_layer_ranges: Option<Vec<RangeSet>>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

fn default_output_ranges(weight_bits: u8, activation_bits: u8, bias_bits: u8) -> RangeSet {
    RangeSet {
        x: Range::new(-1.0, 1.0, activation_bits),
        w: Range::new(-0.5, 0.5, weight_bits),
        b: Some(Range::new(-0.5, 0.5, bias_bits)),
        y: None,
        unipolar_weights: false,
    }
}

impl NetworkGraph {
    /// Builds a graph and initializes every parameter from `seed`.
    pub fn new(input_shape: Vec<usize>, layers: Vec<LayerSpec>, globals: GlobalVariableSet, seed: u64) -> Result<Self> {
        let output_ranges = default_output_ranges(globals.w_g.bits, globals.x_g.bits, globals.b_g.bits);
        let mut net = Self {
            input_shape,
            layers,
            params: ParameterStore::new(),
            globals,
            output_ranges,
            per_layer_ranges: None,
        };
        let stages = net.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for st in stages.iter().filter_map(Stage::as_linear) {
            let shape = st.op.weight_shape();
            let (fan_in, fan_out) = match st.op {
                LinearOp::Dense { inputs, units } => (inputs, units),
                LinearOp::Conv(g) => (g.patch_len(), g.kh * g.kw * g.filters),
            };
            net.params
                .register(weight_name(&st.name), glorot(&mut rng, &shape, fan_in, fan_out))?;
            net.params
                .register(bias_name(&st.name), Tensor::zeros(&[st.op.outputs()]))?;
        }
        net.validate()?;
        Ok(net)
    }

    /// Resolves the layer list into stages, checking that shapes compose.
    pub fn plan(&self) -> Result<Vec<Stage>> {
        let trainable: Vec<usize> = self
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_trainable())
            .map(|(i, _)| i)
            .collect();
        let last = *trainable
            .last()
            .ok_or_else(|| ModelError::Argument("network has no trainable layer".into()))?;
        let mut shape = self.input_shape.clone();
        if shape.is_empty() || shape.contains(&0) {
            return Err(ModelError::Dimension(format!("invalid input shape {shape:?}")));
        }
        let mut stages: Vec<Stage> = Vec::new();
        let mut ordinal = 0;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.polarity.validate()?;
            if layer.quant_binding == QuantBinding::Output && i != last {
                return Err(ModelError::Argument(format!(
                    "layer `{}`: only the last trainable layer may bind to the output ranges",
                    layer.name
                )));
            }
            match &layer.kind {
                LayerKind::Conv2d {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 {
                        return Err(ModelError::Dimension(format!(
                            "layer `{}` expects an H×W×C input, got {shape:?}",
                            layer.name
                        )));
                    }
                    let g = ConvGeometry::new([shape[0], shape[1], shape[2]], *kernel, *filters, *stride, *padding)?;
                    let out = vec![g.out_h, g.out_w, g.filters];
                    stages.push(Stage::Linear(self.linear_stage(i, LinearOp::Conv(g), ordinal, last, &shape, &out)));
                    ordinal += 1;
                    shape = out;
                }
                LayerKind::Dense { units } | LayerKind::Output { units } => {
                    if shape.len() != 1 {
                        return Err(ModelError::Dimension(format!(
                            "layer `{}` expects a flat input, got {shape:?}",
                            layer.name
                        )));
                    }
                    if *units == 0 {
                        return Err(ModelError::Argument(format!("layer `{}` has zero units", layer.name)));
                    }
                    let op = LinearOp::Dense {
                        inputs: shape[0],
                        units: *units,
                    };
                    let out = vec![*units];
                    stages.push(Stage::Linear(self.linear_stage(i, op, ordinal, last, &shape, &out)));
                    ordinal += 1;
                    shape = out;
                }
                LayerKind::MaxPool => {
                    if shape.len() != 3 || shape[0] < 2 || shape[1] < 2 {
                        return Err(ModelError::Dimension(format!(
                            "layer `{}` cannot pool {shape:?}",
                            layer.name
                        )));
                    }
                    stages.push(Stage::MaxPool {
                        input_shape: shape.clone(),
                    });
                    shape = vec![shape[0] / 2, shape[1] / 2, shape[2]];
                }
                LayerKind::Flatten => {
                    stages.push(Stage::Flatten {
                        input_shape: shape.clone(),
                    });
                    shape = vec![shape.iter().product()];
                }
                LayerKind::Activation { function } => {
                    let prev = match stages.last_mut() {
                        Some(Stage::Linear(st)) if st.layer + 1 == i => st,
                        _ => {
                            return Err(ModelError::Argument(format!(
                                "activation `{}` must directly follow a conv2d or dense layer",
                                layer.name
                            )))
                        }
                    };
                    if prev.is_output() {
                        return Err(ModelError::Argument(format!(
                            "activation `{}` follows the output layer, which emits logits",
                            layer.name
                        )));
                    }
                    prev.activation = *function;
                }
            }
        }
        Ok(stages)
    }

    fn linear_stage(
        &self,
        i: usize,
        op: LinearOp,
        ordinal: usize,
        last: usize,
        input: &[usize],
        output: &[usize],
    ) -> LinearStage {
        let layer = &self.layers[i];
        LinearStage {
            layer: i,
            name: layer.name.clone(),
            op,
            activation: ActivationKind::Identity,
            binding: layer.quant_binding,
            polarity: layer.polarity,
            ordinal,
            hidden: (i != last).then_some(ordinal),
            input_shape: input.to_vec(),
            output_shape: output.to_vec(),
        }
    }

    pub fn linear_stages(&self) -> Result<Vec<LinearStage>> {
        Ok(self.plan()?.into_iter().filter_map(Stage::into_linear).collect())
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let stages = self.linear_stages()?;
        Ok(stages.last().expect("at least one trainable layer").output_shape.clone())
    }

    pub fn num_classes(&self) -> Result<usize> {
        Ok(self.output_shape()?.iter().product())
    }

    /// Checks shapes, parameter registration and range consistency.
    pub fn validate(&self) -> Result<()> {
        let stages = self.linear_stages()?;
        let mut expected = 0;
        for st in &stages {
            let w = self.params.get(&weight_name(&st.name))?;
            if w.shape() != st.op.weight_shape() {
                return Err(ModelError::Dimension(format!(
                    "`{}` weight has shape {:?}, expected {:?}",
                    st.name,
                    w.shape(),
                    st.op.weight_shape()
                )));
            }
            let b = self.params.get(&bias_name(&st.name))?;
            if b.shape() != [st.op.outputs()] {
                return Err(ModelError::Dimension(format!(
                    "`{}` bias has shape {:?}",
                    st.name,
                    b.shape()
                )));
            }
            expected += 2;
        }
        if expected != self.params.len() {
            return Err(ModelError::Argument(format!(
                "{} parameters registered for {} expected",
                self.params.len(),
                expected
            )));
        }
        self.globals.validate()?;
        self.output_ranges.validate()?;
        if let Some(per) = &self.per_layer_ranges {
            let hidden = stages.iter().filter(|s| !s.is_output()).count();
            if per.len() != hidden {
                return Err(ModelError::Argument(format!(
                    "{} per-layer range sets for {hidden} hidden layers",
                    per.len()
                )));
            }
            for r in per {
                r.validate()?;
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn range_sharing(&self) -> RangeSharing {
        if self.per_layer_ranges.is_some() {
            RangeSharing::PerLayer
        } else {
            RangeSharing::Global
        }
    }

    /// Switches to independent per-layer ranges, seeded from the globals.
    pub fn use_per_layer_ranges(&mut self) -> Result<()> {
        let hidden = self.linear_stages()?.iter().filter(|s| !s.is_output()).count();
        let g = &self.globals;
        let set = RangeSet {
            x: g.x_g,
            w: g.w_g,
            b: None,
            y: Some(g.y_g),
            unipolar_weights: g.unipolar_weights,
        };
        self.per_layer_ranges = Some(vec![set; hidden]);
        Ok(())
    }

    /// Ranges a stage is quantized with.
    pub fn stage_ranges(&self, st: &LinearStage) -> RangeSet {
        match (st.binding, st.hidden, &self.per_layer_ranges) {
            (QuantBinding::Output, _, _) => self.output_ranges.clone(),
            (QuantBinding::Global, Some(h), Some(per)) => per[h].clone(),
            (QuantBinding::Global, _, _) => {
                let g = &self.globals;
                RangeSet {
                    x: g.x_g,
                    w: g.w_g,
                    b: Some(g.b_g),
                    y: st.hidden.map(|_| g.y_g),
                    unipolar_weights: g.unipolar_weights,
                }
            }
        }
    }

    /// Applies a polarity to the network. `Unipolar` and `Bipolar` cover
    /// every trainable layer. `Fractional` constrains the conv layers, or the
    /// hidden dense layers of a network without convolutions; the remaining
    /// layers stay bipolar. Unipolar weight ranges are pinned to start at
    /// zero when every channel is constrained.
    pub fn set_polarity(&mut self, polarity: Polarity) -> Result<()> {
        polarity.validate()?;
        let has_conv = self.layers.iter().any(|l| matches!(l.kind, LayerKind::Conv2d { .. }));
        for l in self.layers.iter_mut().filter(|l| l.kind.is_trainable()) {
            l.polarity = match (polarity, &l.kind) {
                (Polarity::Fractional(_), LayerKind::Conv2d { .. }) => polarity,
                (Polarity::Fractional(_), LayerKind::Dense { .. }) if !has_conv => polarity,
                (Polarity::Fractional(_), _) => Polarity::Bipolar,
                _ => polarity,
            };
        }
        let unipolar = polarity == Polarity::Unipolar;
        if unipolar {
            self.globals = self.globals.clone().with_unipolar_weights();
            self.output_ranges.unipolar_weights = true;
            self.output_ranges.w.min = 0.0;
        } else {
            self.globals.unipolar_weights = false;
            self.output_ranges.unipolar_weights = false;
        }
        Ok(())
    }

    /// Sets every weight bit-width, including the output layer's.
    pub fn set_weight_bits(&mut self, bits: u8) {
        self.globals.w_g.bits = bits;
        self.output_ranges.w.bits = bits;
        if let Some(per) = &mut self.per_layer_ranges {
            per.iter_mut().for_each(|r| r.w.bits = bits);
        }
    }

    /// Sets every input / activation bit-width.
    pub fn set_activation_bits(&mut self, bits: u8) {
        self.globals.x_g.bits = bits;
        self.globals.y_g.bits = bits;
        self.output_ranges.x.bits = bits;
        if let Some(per) = &mut self.per_layer_ranges {
            for r in per.iter_mut() {
                r.x.bits = bits;
                if let Some(y) = &mut r.y {
                    y.bits = bits;
                }
            }
        }
    }
}

impl Stage {
    pub fn as_linear(&self) -> Option<&LinearStage> {
        match self {
            Stage::Linear(s) => Some(s),
            _ => None,
        }
    }

    pub fn into_linear(self) -> Option<LinearStage> {
        match self {
            Stage::Linear(s) => Some(s),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> NetworkGraph {
        let layers = vec![
            LayerSpec::new("c1", LayerKind::Conv2d { filters: 2, kernel: [2, 2], stride: 1, padding: Padding::Valid }),
            LayerSpec::new("a1", LayerKind::Activation { function: ActivationKind::Relu }),
            LayerSpec::new("p1", LayerKind::MaxPool),
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::new("out", LayerKind::Output { units: 3 }),
        ];
        NetworkGraph::new(vec![5, 5, 1], layers, GlobalVariableSet::new(4, 4, 8), 1).unwrap()
    }

    #[test]
    fn plan_fuses_activation_and_composes_shapes() {
        let net = tiny();
        let st = net.linear_stages().unwrap();
        assert_eq!(st.len(), 2);
        assert_eq!(st[0].activation, ActivationKind::Relu);
        assert_eq!(st[0].output_shape, vec![4, 4, 2]);
        assert_eq!(st[1].op, LinearOp::Dense { inputs: 8, units: 3 });
        assert!(st[1].is_output());
        // conv: 2·2·1·2 + 2, dense: 8·3 + 3
        assert_eq!(net.param_count(), 10 + 27);
    }

    #[test]
    fn activation_must_follow_trainable_layer() {
        let layers = vec![
            LayerSpec::new("f", LayerKind::Flatten),
            LayerSpec::new("a", LayerKind::Activation { function: ActivationKind::Relu }),
            LayerSpec::new("out", LayerKind::Output { units: 2 }),
        ];
        assert!(NetworkGraph::new(vec![2], layers, GlobalVariableSet::new(4, 4, 8), 0).is_err());
    }

    #[test]
    fn only_last_layer_binds_to_output() {
        let mut d1 = LayerSpec::new("d1", LayerKind::Dense { units: 3 });
        d1.quant_binding = QuantBinding::Output;
        let layers = vec![d1, LayerSpec::new("out", LayerKind::Output { units: 2 })];
        assert!(NetworkGraph::new(vec![2], layers, GlobalVariableSet::new(4, 4, 8), 0).is_err());
    }

    #[test]
    fn dense_needs_flat_input() {
        let layers = vec![LayerSpec::new("out", LayerKind::Output { units: 2 })];
        let err = NetworkGraph::new(vec![2, 2, 1], layers, GlobalVariableSet::new(4, 4, 8), 0).unwrap_err();
        assert!(matches!(err, ModelError::Dimension(_)));
    }

    #[test]
    fn duplicate_parameter_rejected() {
        let mut store = ParameterStore::new();
        store.register("a", Tensor::zeros(&[1])).unwrap();
        assert!(store.register("a", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn polarity_text_round_trip() {
        for p in [Polarity::Bipolar, Polarity::Unipolar, Polarity::Fractional(0.25)] {
            assert_eq!(p.to_string().parse::<Polarity>().unwrap(), p);
        }
        assert!("fractional(1.5)".parse::<Polarity>().is_err());
        assert_eq!(Polarity::Fractional(0.5).constrained_channels(145), 73);
        assert_eq!(Polarity::Fractional(0.25).constrained_channels(32), 8);
    }

    #[test]
    fn hidden_layers_share_global_ranges() {
        let net = tiny();
        let st = net.linear_stages().unwrap();
        let r0 = net.stage_ranges(&st[0]);
        assert_eq!(r0.w, net.globals.w_g);
        assert_eq!(r0.y, Some(net.globals.y_g));
        let r1 = net.stage_ranges(&st[1]);
        assert_eq!(r1, net.output_ranges);
    }
}
