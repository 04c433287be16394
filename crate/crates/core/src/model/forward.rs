use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use super::{bias_name, weight_name, ActivationKind, LinearOp, ModelError, NetworkGraph, QuantBinding, Result, Stage};
use crate::quant::{BoundLayerStats, GlobalVariableSet, LayerStats, QuantGrid, Range, RangeRole};
use crate::tensor::{softmax_slice, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Float,
    /// Fake-quant nodes active, gated by `do_Q`.
    Quantized,
}

/// Where a range variable lives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum RangeScope {
    Global,
    Output,
    /// Per-layer baseline, indexed by hidden ordinal.
    Layer(usize),
}

/// Tape handles of the differentiable global variables.
#[derive(Debug, Clone, Default)]
pub struct GlobalVars {
    pub act_logits: Option<Var>,
    pub th: Option<Var>,
    /// `(scope, role) → (min, max)` for trainable ranges.
    pub ranges: IndexMap<(RangeScope, RangeRole), (Var, Var)>,
}

/// Values observed at one trainable layer during a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerObservation {
    pub name: String,
    pub hidden: Option<usize>,
    /// Input before input quantization, raw weights and biases, and the
    /// activation output before output quantization.
    pub stats: BoundLayerStats,
}

/// A recorded forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub tape: Tape,
    pub logits: Var,
    /// Parameter name → leaf.
    pub params: IndexMap<String, Var>,
    pub globals: GlobalVars,
    pub observations: Vec<LayerObservation>,
    /// Output of every trainable layer, by layer name.
    pub layer_outputs: Vec<(String, Var)>,
    /// Effective (quantized or blended) weights, by layer name.
    pub effective_weights: Vec<(String, Var)>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Name of the first layer whose output contains NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.layer_outputs
            .iter()
            .find(|(_, v)| !self.tape.value(*v).all_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// `a_0·relu(x) + a_1·tanh(x − th)` with `(a_0, a_1) = softmax(logits)`.
///
/// Evaluated with exactly the same operation order as the recorded graph so
/// the crossbar path reproduces it bit for bit.
pub fn activation_mix_scalar(x: f64, act_logits: [f64; 2], th: f64) -> f64 {
    let a = softmax_slice(&act_logits);
    let r = if x > 0.0 { x } else { 0.0 };
    let t = (x - th).tanh();
    r * a[0] + t * a[1]
}

/// Records `a_0·relu(x) + a_1·tanh(x − th)` with `(a_0, a_1) = softmax(logits)`;
/// gradients reach `x`, the two logits and `th`.
pub fn activation_mix(tape: &mut Tape, x: Var, logits: Var, th: Var) -> Result<Var> {
    let a = tape.softmax(logits)?;
    let a0 = tape.select(a, 0)?;
    let a1 = tape.select(a, 1)?;
    let r = tape.relu(x);
    let ra = tape.mul(r, a0)?;
    let s = tape.sub(x, th)?;
    let t = tape.tanh(s);
    let ta = tape.mul(t, a1)?;
    Ok(tape.add(ra, ta)?)
}

/// Scalar twin of the activation stage of the quantized graph.
pub fn activation_scalar(kind: ActivationKind, x: f64, globals: &GlobalVariableSet) -> f64 {
    match kind {
        ActivationKind::Relu => {
            if x > 0.0 {
                x
            } else {
                0.0
            }
        }
        ActivationKind::ShiftedTanh => (x - globals.th_g).tanh(),
        ActivationKind::Mix => activation_mix_scalar(x, globals.act_logits, globals.th_g),
        ActivationKind::Identity => x,
    }
}

struct Builder<'a> {
    net: &'a NetworkGraph,
    tape: Tape,
    grad: bool,
    globals: GlobalVars,
}

impl Builder<'_> {
    fn range_vars(&mut self, scope: RangeScope, role: RangeRole, range: &Range) -> (Var, Var) {
        if let Some(v) = self.globals.ranges.get(&(scope, role)) {
            return *v;
        }
        let lo = self.tape.leaf(Tensor::scalar(range.min), self.grad);
        let hi = self.tape.leaf(Tensor::scalar(range.max), self.grad);
        self.globals.ranges.insert((scope, role), (lo, hi));
        (lo, hi)
    }

    fn quantize(&mut self, v: Var, range: &Range, scope: RangeScope, role: RangeRole) -> Result<(Var, QuantGrid)> {
        let grid = range.grid()?;
        if range.trainable {
            let (lo, hi) = self.range_vars(scope, role, range);
            Ok((self.tape.fake_quant_vars(v, lo, hi, range.bits)?, grid))
        } else {
            Ok((self.tape.fake_quant(v, grid), grid))
        }
    }

    fn quantize_weight(&mut self, w: Var, range: &Range, scope: RangeScope, alpha: f64) -> Result<(Var, QuantGrid)> {
        if alpha == 1.0 {
            return self.quantize(w, range, scope, RangeRole::Weight);
        }
        let grid = range.grid()?;
        if range.trainable {
            let (q, _) = self.quantize(w, range, scope, RangeRole::Weight)?;
            let qa = self.tape.scale(q, alpha);
            let wa = self.tape.scale(w, 1.0 - alpha);
            Ok((self.tape.add(qa, wa)?, grid))
        } else {
            Ok((crate::quant::alpha_blend_quant(&mut self.tape, w, &grid, alpha)?, grid))
        }
    }

    fn th(&mut self) -> Var {
        if let Some(th) = self.globals.th {
            return th;
        }
        let th = self.tape.leaf(Tensor::scalar(self.net.globals.th_g), self.grad);
        self.globals.th = Some(th);
        th
    }

    fn act_logits(&mut self) -> Result<Var> {
        if let Some(l) = self.globals.act_logits {
            return Ok(l);
        }
        let logits = Tensor::new(vec![2], self.net.globals.act_logits.to_vec())?;
        let l = self.tape.leaf(logits, self.grad);
        self.globals.act_logits = Some(l);
        Ok(l)
    }

    fn activation(&mut self, pre: Var, kind: ActivationKind) -> Result<Var> {
        Ok(match kind {
            ActivationKind::Identity => pre,
            ActivationKind::Relu => self.tape.relu(pre),
            ActivationKind::ShiftedTanh => {
                let th = self.th();
                let s = self.tape.sub(pre, th)?;
                self.tape.tanh(s)
            }
            ActivationKind::Mix => {
                let logits = self.act_logits()?;
                let th = self.th();
                activation_mix(&mut self.tape, pre, logits, th)?
            }
        })
    }
}

/// Records a forward pass of `x[N×input_shape]`.
///
/// With `grad` set, parameters and differentiable globals become trainable
/// leaves; otherwise they are constants.
pub fn forward_traced(net: &NetworkGraph, x: &Tensor, mode: Mode, grad: bool) -> Result<ForwardTrace> {
    if x.rank() != net.input_shape.len() + 1 || x.shape()[1..] != net.input_shape[..] {
        return Err(ModelError::Dimension(format!(
            "input of shape {:?} does not match per-sample shape {:?}",
            x.shape(),
            net.input_shape
        )));
    }
    let n = x.shape()[0];
    let quant = mode == Mode::Quantized && net.globals.do_q;
    let alpha = net.globals.alpha;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ModelError::Argument(format!("alpha {alpha} outside [0, 1]")));
    }
    let mut b = Builder {
        net,
        tape: Tape::new(),
        grad,
        globals: GlobalVars::default(),
    };
    let mut params = IndexMap::new();
    let mut observations = Vec::new();
    let mut layer_outputs = Vec::new();
    let mut effective_weights = Vec::new();
    let mut h = b.tape.constant(x.clone());

    for stage in net.plan()? {
        match stage {
            Stage::MaxPool { .. } => h = b.tape.maxpool2(h)?,
            Stage::Flatten { input_shape } => {
                let flat: usize = input_shape.iter().product();
                h = b.tape.reshape(h, &[n, flat])?;
            }
            Stage::Linear(st) => {
                let ranges = net.stage_ranges(&st);
                let scope = match (st.binding, st.hidden, &net.per_layer_ranges) {
                    (QuantBinding::Output, _, _) => RangeScope::Output,
                    (_, Some(i), Some(_)) => RangeScope::Layer(i),
                    _ => RangeScope::Global,
                };
                let wt = net.params.get(&weight_name(&st.name))?.clone();
                let bt = net.params.get(&bias_name(&st.name))?.clone();
                let input_stats = LayerStats::of(b.tape.value(h));
                let weight_stats = LayerStats::of(&wt);
                let bias_stats = LayerStats::of(&bt);
                let w = b.tape.leaf(wt, grad);
                let bias = b.tape.leaf(bt, grad);
                params.insert(weight_name(&st.name), w);
                params.insert(bias_name(&st.name), bias);

                let (xin, win, bin, scales) = if quant {
                    let (xq, xg) = b.quantize(h, &ranges.x, scope, RangeRole::Input)?;
                    let (wq, wg) = b.quantize_weight(w, &ranges.w, scope, alpha)?;
                    let bq = match &ranges.b {
                        Some(r) => b.quantize(bias, r, scope, RangeRole::Bias)?.0,
                        None => bias,
                    };
                    let scales = (alpha == 1.0).then_some((xg.scale, wg.scale));
                    (xq, wq, bq, scales)
                } else {
                    (h, w, bias, None)
                };
                effective_weights.push((st.name.clone(), win));
                let lin = match (st.op, scales) {
                    (LinearOp::Dense { .. }, None) => b.tape.matmul(xin, win)?,
                    (LinearOp::Dense { .. }, Some((sx, sw))) => b.tape.matmul_exact(xin, win, sx, sw)?,
                    (LinearOp::Conv(g), None) => b.tape.conv2d(xin, win, g.stride, padding_of(net, st.layer))?,
                    (LinearOp::Conv(g), Some((sx, sw))) => {
                        b.tape.conv2d_exact(xin, win, g.stride, padding_of(net, st.layer), sx, sw)?
                    }
                };
                let pre = b.tape.add_bias(lin, bin)?;
                let act = b.activation(pre, st.activation)?;
                let activation_stats = LayerStats::of(b.tape.value(act));
                h = match (&ranges.y, quant) {
                    (Some(r), true) => b.quantize(act, r, scope, RangeRole::Activation)?.0,
                    _ => act,
                };
                layer_outputs.push((st.name.clone(), h));
                observations.push(LayerObservation {
                    name: st.name.clone(),
                    hidden: st.hidden,
                    stats: BoundLayerStats {
                        input: input_stats,
                        weight: weight_stats,
                        bias: bias_stats,
                        activation: activation_stats,
                    },
                });
            }
        }
    }
    let shape = b.tape.value(h).shape().to_vec();
    if shape.len() != 2 {
        let flat = shape[1..].iter().product();
        h = b.tape.reshape(h, &[n, flat])?;
    }
    Ok(ForwardTrace {
        tape: b.tape,
        logits: h,
        params,
        globals: b.globals,
        observations,
        layer_outputs,
        effective_weights,
    })
}

fn padding_of(net: &NetworkGraph, layer: usize) -> crate::tensor::Padding {
    match net.layers[layer].kind {
        super::LayerKind::Conv2d { padding, .. } => padding,
        _ => unreachable!("conv stage always comes from a conv2d layer"),
    }
}

/// Logits of `x[N×input_shape]`.
pub fn forward(net: &NetworkGraph, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let trace = forward_traced(net, x, mode, false)?;
    Ok(trace.logits().clone())
}
