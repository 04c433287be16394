use super::kernels::{col2im, im2col, matmul_nn, matmul_nt, matmul_tn, ConvGeometry, Padding};
use super::{Result, Tensor, TensorError};
use crate::quant::{QuantGrid, Range};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeometry,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    Abs(Var),
    Sum(Var),
    Softmax(Var),
    Select(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    FakeQuant {
        x: Var,
        grid: QuantGrid,
    },
    FakeQuantVars {
        x: Var,
        min: Var,
        max: Var,
        grid: QuantGrid,
    },
    AlphaBlend {
        x: Var,
        grid: QuantGrid,
        alpha: f64,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Elementwise operators available through [`Tape::elementwise`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Elementwise {
    Relu,
    Tanh,
    Add,
    Mul,
    Sub,
    /// `max(x, 0)`; the hinge used by constraint penalties.
    Max0,
}

/// Records a forward pass so it can be differentiated in reverse.
///
/// Nodes are appended in evaluation order, so the tape is always in
/// topological order and the backward sweep visits each node once.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar output with respect to every node on the tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

fn to_codes(values: &[f64], scale: f64) -> Vec<f64> {
    values
        .iter()
        .map(|&v| (v / scale).round_ties_even())
        .collect()
}

/// Value of an exact integer accumulator over two grids with scales
/// `scale_a` and `scale_b`. Shared by the digital quantized path and the
/// crossbar decoder so both produce identical bits.
#[inline]
pub fn dequantize_accumulator(acc: f64, scale_a: f64, scale_b: f64) -> f64 {
    (scale_a * scale_b) * acc
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, exact: Option<(f64, f64)>) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::Dimension(format!(
                "matmul of {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        match exact {
            None => matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n),
            Some((scale_a, scale_b)) => {
                let ca = to_codes(self.value(a).data(), scale_a);
                let cb = to_codes(self.value(b).data(), scale_b);
                matmul_nn(&ca, &cb, &mut out, m, k, n);
                for v in &mut out {
                    *v = dequantize_accumulator(*v, scale_a, scale_b);
                }
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `c[i][j] = Σ_k a[i][k]·b[k][j]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, None)
    }

    /// Matrix product of two operands that lie on uniform grids with scales
    /// `scale_a` and `scale_b`. The sum runs over integer codes, so the
    /// result is independent of summation order; gradients are those of
    /// the ordinary product.
    pub fn matmul_exact(&mut self, a: Var, b: Var, scale_a: f64, scale_b: f64) -> Result<Var> {
        self.matmul_impl(a, b, Some((scale_a, scale_b)))
    }

    fn conv_impl(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: Padding,
        exact: Option<(f64, f64)>,
    ) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[3] != ks[2] {
            return Err(TensorError::Dimension(format!(
                "conv2d input {xs:?} with kernel {ks:?}"
            )));
        }
        let geom = ConvGeometry::new([xs[1], xs[2], xs[3]], [ks[0], ks[1]], ks[3], stride, padding)?;
        let n = xs[0];
        let (rows, pos, f) = (geom.patch_len(), geom.positions(), geom.filters);
        let kernel = match exact {
            None => self.value(k).data().to_vec(),
            Some((_, sk)) => to_codes(self.value(k).data(), sk),
        };
        let mut out = vec![0.0; n * geom.output_len()];
        let xdata = self.value(x).data();
        for s in 0..n {
            let sample = &xdata[s * geom.input_len()..(s + 1) * geom.input_len()];
            let mut cols = im2col(sample, &geom);
            if let Some((sx, _)) = exact {
                cols = to_codes(&cols, sx);
            }
            let dst = &mut out[s * pos * f..(s + 1) * pos * f];
            matmul_tn(&cols, &kernel, dst, rows, pos, f);
        }
        if let Some((sx, sk)) = exact {
            for v in &mut out {
                *v = dequantize_accumulator(*v, sx, sk);
            }
        }
        let value = Tensor::new(vec![n, geom.out_h, geom.out_w, f], out)?;
        let rg = self.rg(&[x, k]);
        Ok(self.push(value, Op::Conv2d { x, k, geom }, rg))
    }

    /// Cross-correlation of `x[N×H×W×C]` with `k[kh×kw×C×F]`, via [`im2col`].
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, padding: Padding) -> Result<Var> {
        self.conv_impl(x, k, stride, padding, None)
    }

    /// [`Tape::conv2d`] over grid-valued operands, summed over integer codes.
    pub fn conv2d_exact(
        &mut self,
        x: Var,
        k: Var,
        stride: usize,
        padding: Padding,
        scale_x: f64,
        scale_k: f64,
    ) -> Result<Var> {
        self.conv_impl(x, k, stride, padding, Some((scale_x, scale_k)))
    }

    /// Adds `b[F]` along the last axis of `x[…×F]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let f = *self.value(x).shape().last().unwrap_or(&0);
        if self.value(b).shape() != [f] {
            return Err(TensorError::Dimension(format!(
                "bias {:?} does not match last axis {f}",
                self.value(b).shape()
            )));
        }
        let bias = self.value(b).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(f) {
            for (v, bv) in row.iter_mut().zip(&bias) {
                *v += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(ta.shape().to_vec(), data);
        }
        if tb.numel() == 1 {
            let y = tb.data()[0];
            return Ok(ta.map(|x| f(x, y)));
        }
        if ta.numel() == 1 {
            let x = ta.data()[0];
            return Ok(tb.map(|y| f(x, y)));
        }
        Err(TensorError::Dimension(format!(
            "incompatible shapes {:?} and {:?}",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push(v, Op::Scale(a, c), rg)
    }

    /// `max(x, 0)` with subgradient 0 at 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let rg = self.rg(&[a]);
        self.push(v, Op::Relu(a), rg)
    }

    pub fn max0(&mut self, a: Var) -> Var {
        self.relu(a)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        let rg = self.rg(&[a]);
        self.push(v, Op::Tanh(a), rg)
    }

    /// `|x|` with subgradient 0 at 0.
    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(v, Op::Abs(a), rg)
    }

    pub fn elementwise(&mut self, op: Elementwise, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Elementwise::Add | Elementwise::Mul | Elementwise::Sub => 2,
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(TensorError::Argument(format!(
                "{op:?} takes {arity} operand(s), got {}",
                inputs.len()
            )));
        }
        Ok(match op {
            Elementwise::Relu | Elementwise::Max0 => self.relu(inputs[0]),
            Elementwise::Tanh => self.tanh(inputs[0]),
            Elementwise::Add => self.add(inputs[0], inputs[1])?,
            Elementwise::Mul => self.mul(inputs[0], inputs[1])?,
            Elementwise::Sub => self.sub(inputs[0], inputs[1])?,
        })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Softmax of a rank-1 tensor.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        if self.value(a).rank() != 1 {
            return Err(TensorError::Dimension("softmax expects a vector".into()));
        }
        let p = softmax_slice(self.value(a).data());
        let n = p.len();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(vec![n], p)?, Op::Softmax(a), rg))
    }

    /// Element `i` of a rank-1 tensor, as a scalar.
    pub fn select(&mut self, a: Var, i: usize) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 1 || i >= t.numel() {
            return Err(TensorError::Argument(format!(
                "select {i} from {:?}",
                t.shape()
            )));
        }
        let v = t.data()[i];
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(v), Op::Select(a, i), rg))
    }

    /// Mean over the batch of `−log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() || labels.is_empty() {
            return Err(TensorError::Dimension(format!(
                "logits {:?} with {} labels",
                t.shape(),
                labels.len()
            )));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(TensorError::Argument(format!(
                "label {bad} outside [0, {k})"
            )));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = 0.0;
        for (row, &label) in t.data().chunks(k).zip(labels) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= labels.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Fake quantization with a straight-through gradient.
    pub fn fake_quant(&mut self, x: Var, grid: QuantGrid) -> Var {
        let v = self.value(x).map(|t| grid.quantize(t));
        let rg = self.rg(&[x]);
        self.push(v, Op::FakeQuant { x, grid }, rg)
    }

    /// Fake quantization whose bounds are scalar nodes on the tape.
    ///
    /// The gradient to the bounds is the exact derivative of the forward
    /// value with the level index and zero point held fixed:
    /// `∂q/∂max = (k − z)/(n − 1)`, `∂q/∂min = −(k − z)/(n − 1)`.
    pub fn fake_quant_vars(&mut self, x: Var, min: Var, max: Var, bits: u8) -> Result<Var> {
        let lo = self.value(min).item();
        let hi = self.value(max).item();
        let grid = QuantGrid::new(&Range::new(lo, hi, bits))
            .map_err(|e| TensorError::Argument(e.to_string()))?;
        let v = self.value(x).map(|t| grid.quantize(t));
        let rg = self.rg(&[x, min, max]);
        Ok(self.push(v, Op::FakeQuantVars { x, min, max, grid }, rg))
    }

    /// `alpha·q(x) + (1−alpha)·x`.
    pub fn alpha_blend(&mut self, x: Var, grid: QuantGrid, alpha: f64) -> Var {
        let v = self
            .value(x)
            .map(|t| alpha * grid.quantize(t) + (1.0 - alpha) * t);
        let rg = self.rg(&[x]);
        self.push(v, Op::AlphaBlend { x, grid, alpha }, rg)
    }

    /// 2×2 max pooling with stride 2 over `N×H×W×C`; odd edges are dropped.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if s.len() != 4 || s[1] < 2 || s[2] < 2 {
            return Err(TensorError::Dimension(format!("maxpool over {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let data = t.data();
        let mut out = Vec::with_capacity(n * oh * ow * c);
        let mut argmax = Vec::with_capacity(n * oh * ow * c);
        for b in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = usize::MAX;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
                                if best == usize::MAX || data[idx] > data[best] {
                                    best = idx;
                                }
                            }
                        }
                        out.push(data[best]);
                        argmax.push(best);
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaxPool { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::Reshape(x), rg))
    }

    /// Reverse sweep from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::full(self.value(output).shape(), 1.0));
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn send(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if self.nodes[v.0].requires_grad {
            accumulate(&mut grads[v.0], delta);
        }
    }

    /// Reduces an elementwise gradient onto an operand that may have been
    /// broadcast from a scalar.
    fn unbroadcast(&self, v: Var, g: Tensor) -> Tensor {
        let target = self.value(v);
        if target.shape() == g.shape() {
            g
        } else {
            Tensor::new(target.shape().to_vec(), vec![g.sum()]).expect("scalar operand")
        }
    }

    fn zip_grad(&self, g: &Tensor, v: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let x = self.value(v);
        let data = g.data().iter().zip(x.data()).map(|(&gi, &xi)| f(gi, xi)).collect();
        Tensor::new(g.shape().to_vec(), data).expect("same shape")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let mut da = vec![0.0; m * k];
                    matmul_nt(g.data(), tb.data(), &mut da, m, n, k);
                    self.send(grads, *a, Tensor::new(vec![m, k], da).unwrap());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![0.0; k * n];
                    matmul_tn(ta.data(), g.data(), &mut db, m, k, n);
                    self.send(grads, *b, Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Conv2d { x, k, geom } => {
                let tx = self.value(*x);
                let tk = self.value(*k);
                let n = tx.shape()[0];
                let (rows, pos, f) = (geom.patch_len(), geom.positions(), geom.filters);
                let mut dk = vec![0.0; rows * f];
                let mut dx = vec![0.0; tx.numel()];
                let mut dcols = vec![0.0; rows * pos];
                for s in 0..n {
                    let gs = &g.data()[s * pos * f..(s + 1) * pos * f];
                    if self.requires_grad(*k) {
                        let sample = &tx.data()[s * geom.input_len()..(s + 1) * geom.input_len()];
                        let cols = im2col(sample, geom);
                        matmul_nn(&cols, gs, &mut dk, rows, pos, f);
                    }
                    if self.requires_grad(*x) {
                        dcols.iter_mut().for_each(|v| *v = 0.0);
                        matmul_nt(tk.data(), gs, &mut dcols, rows, f, pos);
                        let dst = &mut dx[s * geom.input_len()..(s + 1) * geom.input_len()];
                        col2im(&dcols, geom, dst);
                    }
                }
                if self.requires_grad(*k) {
                    self.send(grads, *k, Tensor::new(tk.shape().to_vec(), dk).unwrap());
                }
                if self.requires_grad(*x) {
                    self.send(grads, *x, Tensor::new(tx.shape().to_vec(), dx).unwrap());
                }
            }
            Op::AddBias { x, b } => {
                if self.requires_grad(*b) {
                    let f = self.value(*b).numel();
                    let mut db = vec![0.0; f];
                    for row in g.data().chunks(f) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *b, Tensor::new(vec![f], db).unwrap());
                }
                self.send(grads, *x, g.clone());
            }
            Op::Add(a, b) => {
                self.send(grads, *a, self.unbroadcast(*a, g.clone()));
                self.send(grads, *b, self.unbroadcast(*b, g.clone()));
            }
            Op::Sub(a, b) => {
                self.send(grads, *a, self.unbroadcast(*a, g.clone()));
                self.send(grads, *b, self.unbroadcast(*b, g.map(|v| -v)));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let other = |t: &Tensor, i: usize| if t.numel() == 1 { t.data()[0] } else { t.data()[i] };
                if self.requires_grad(*a) {
                    let da: Vec<f64> = g.data().iter().enumerate().map(|(i, gv)| gv * other(tb, i)).collect();
                    let da = Tensor::new(g.shape().to_vec(), da).unwrap();
                    self.send(grads, *a, self.unbroadcast(*a, da));
                }
                if self.requires_grad(*b) {
                    let db: Vec<f64> = g.data().iter().enumerate().map(|(i, gv)| gv * other(ta, i)).collect();
                    let db = Tensor::new(g.shape().to_vec(), db).unwrap();
                    self.send(grads, *b, self.unbroadcast(*b, db));
                }
            }
            Op::Scale(a, c) => self.send(grads, *a, g.map(|v| c * v)),
            Op::Relu(a) => {
                let d = self.zip_grad(g, *a, |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.send(grads, *a, d);
            }
            Op::Tanh(_) => {
                let Op::Tanh(a) = node.op else { unreachable!() };
                let y = &node.value;
                let data = g.data().iter().zip(y.data()).map(|(gv, yv)| gv * (1.0 - yv * yv)).collect();
                self.send(grads, a, Tensor::new(g.shape().to_vec(), data).unwrap());
            }
            Op::Abs(a) => {
                let d = self.zip_grad(g, *a, |gv, x| {
                    if x > 0.0 {
                        gv
                    } else if x < 0.0 {
                        -gv
                    } else {
                        0.0
                    }
                });
                self.send(grads, *a, d);
            }
            Op::Sum(a) => {
                let gv = g.item();
                self.send(grads, *a, Tensor::full(self.value(*a).shape(), gv));
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let dot: f64 = p.iter().zip(g.data()).map(|(pi, gi)| pi * gi).sum();
                let data = p.iter().zip(g.data()).map(|(pi, gi)| pi * (gi - dot)).collect();
                self.send(grads, *a, Tensor::new(vec![p.len()], data).unwrap());
            }
            Op::Select(a, i) => {
                let mut d = Tensor::zeros(self.value(*a).shape());
                d.data_mut()[*i] = g.item();
                self.send(grads, *a, d);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.value(*logits).shape().to_vec();
                let k = shape[1];
                let scale = g.item() / labels.len() as f64;
                let mut d = probs.clone();
                for (row, &label) in d.chunks_mut(k).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                self.send(grads, *logits, Tensor::new(shape, d).unwrap());
            }
            Op::FakeQuant { x, grid } => {
                let d = self.zip_grad(g, *x, |gv, t| if grid.passes(t) { gv } else { 0.0 });
                self.send(grads, *x, d);
            }
            Op::FakeQuantVars { x, min, max, grid } => {
                if self.requires_grad(*x) {
                    let d = self.zip_grad(g, *x, |gv, t| if grid.passes(t) { gv } else { 0.0 });
                    self.send(grads, *x, d);
                }
                let top = f64::from(grid.levels - 1);
                let mut dmax = 0.0;
                for (gv, &t) in g.data().iter().zip(self.value(*x).data()) {
                    dmax += gv * ((grid.code(t) - grid.zero_point) as f64) / top;
                }
                self.send(grads, *max, Tensor::new(self.value(*max).shape().to_vec(), vec![dmax]).unwrap());
                self.send(grads, *min, Tensor::new(self.value(*min).shape().to_vec(), vec![-dmax]).unwrap());
            }
            Op::AlphaBlend { x, grid, alpha } => {
                let d = self.zip_grad(g, *x, |gv, t| {
                    let ste = if grid.passes(t) { 1.0 } else { 0.0 };
                    gv * (alpha * ste + (1.0 - alpha))
                });
                self.send(grads, *x, d);
            }
            Op::MaxPool { x, argmax } => {
                let mut d = Tensor::zeros(self.value(*x).shape());
                for (gv, &src) in g.data().iter().zip(argmax) {
                    d.data_mut()[src] += gv;
                }
                self.send(grads, *x, d);
            }
            Op::Reshape(x) => {
                let d = g.reshape(self.value(*x).shape()).unwrap();
                self.send(grads, *x, d);
            }
        }
    }
}

/// Numerically stable softmax.
pub fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[vec![1.0, 0.0], vec![0.0, 1.0]]));
        let m = tape.constant(t(&[vec![0.3, -2.0], vec![5.0, 7.5]]));
        let out = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(out), tape.value(m));

        let a = tape.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = tape.constant(t(&[vec![1.0], vec![1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn conv_identity_kernel_and_box_sum() {
        let mut tape = Tape::new();
        let x = Tensor::new(vec![1, 3, 3, 1], (0..9).map(f64::from).collect()).unwrap();
        let xv = tape.constant(x.clone());
        let k = tape.constant(Tensor::full(&[1, 1, 1, 1], 1.0));
        let y = tape.conv2d(xv, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y).data(), x.data());

        let ones = tape.constant(Tensor::full(&[1, 4, 4, 1], 1.0));
        let k2 = tape.constant(Tensor::full(&[2, 2, 1, 1], 1.0));
        let y2 = tape.conv2d(ones, k2, 1, Padding::Valid).unwrap();
        assert_eq!(tape.value(y2).shape(), &[1, 3, 3, 1]);
        assert!(tape.value(y2).data().iter().all(|&v| v == 4.0));
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 1]));
        let k = tape.constant(Tensor::zeros(&[3, 3, 1, 1]));
        assert!(matches!(
            tape.conv2d(x, k, 1, Padding::Valid),
            Err(TensorError::Dimension(_))
        ));
    }

    #[test]
    fn elementwise_values() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(-3.0));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).item(), 0.0);
        let one = tape.constant(Tensor::scalar(1.0));
        let th = tape.tanh(one);
        assert!((tape.value(th).item() - 0.761_594_155_955_764_9).abs() < 1e-15);
    }

    #[test]
    fn tanh_derivative_at_zero_is_one() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.tanh(x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 1.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.relu(x);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 0.0);
    }

    #[test]
    fn incompatible_shapes_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.elementwise(Elementwise::Relu, &[a, b]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(&[3, 10]));
        let l = tape.softmax_cross_entropy(logits, &[0, 4, 9]).unwrap();
        assert!((tape.value(l).item() - 10f64.ln()).abs() < 1e-12);

        let logits = tape.constant(t(&[vec![10.0, 0.0]]));
        let l = tape.softmax_cross_entropy(logits, &[0]).unwrap();
        assert!((tape.value(l).item() - 4.539_889_921_686_465e-5).abs() < 1e-15);

        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[2]),
            Err(TensorError::Argument(_))
        ));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x·x + x → dy/dx = 2x + 1
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(1.5));
        let sq = tape.mul(x, x).unwrap();
        let y = tape.add(sq, x).unwrap();
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap().item(), 4.0);
    }

    #[test]
    fn matmul_gradient_is_column_sums() {
        let mut tape = Tape::new();
        let a = tape.param(t(&[vec![0.5, -1.0, 2.0], vec![1.0, 0.0, 3.0]]));
        let bm = t(&[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.25, 4.0]]);
        let b = tape.constant(bm.clone());
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s);
        let ga = g.get(a).unwrap();
        // each row of dA equals the row sums of B, i.e. Σ_j b[k][j]
        for i in 0..2 {
            for k in 0..3 {
                let expected: f64 = bm.data()[k * 2..k * 2 + 2].iter().sum();
                assert_eq!(ga.data()[i * 3 + k], expected);
            }
        }
    }

    #[test]
    fn exact_matmul_is_order_independent() {
        let grid_scale = 0.1_f64 / 3.0;
        let codes_a = [3.0, -7.0, 12.0, 1.0];
        let codes_b = [5.0, -2.0, 9.0, 4.0];
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![1, 4], codes_a.iter().map(|c| c * grid_scale).collect()).unwrap());
        let b = tape.constant(Tensor::new(vec![4, 1], codes_b.iter().map(|c| c * 0.25).collect()).unwrap());
        let c = tape.matmul_exact(a, b, grid_scale, 0.25).unwrap();
        let acc: f64 = codes_a.iter().zip(codes_b).map(|(x, y)| x * y).sum();
        assert_eq!(tape.value(c).item(), dequantize_accumulator(acc, grid_scale, 0.25));
    }

    #[test]
    fn ste_blocks_clipped_region() {
        let grid = QuantGrid::new(&Range::new(-1.0, 1.0, 4)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2], vec![5.0, 0.2]).unwrap());
        let q = tape.fake_quant(x, grid);
        let s = tape.sum(q);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn alpha_blend_endpoints() {
        let grid = QuantGrid::new(&Range::new(-1.0, 1.0, 4)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![3], vec![0.26, -0.7, 3.0]).unwrap());
        let b0 = tape.alpha_blend(x, grid, 0.0);
        assert_eq!(tape.value(b0), tape.value(x));
        let b1 = tape.alpha_blend(x, grid, 1.0);
        let q = tape.fake_quant(x, grid);
        assert_eq!(tape.value(b1), tape.value(q));
        let half = tape.alpha_blend(x, grid, 0.5);
        assert!((tape.value(half).data()[0] - 0.263_333_333_333_333_3).abs() < 1e-12);

        let s = tape.sum(b0);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_gradient_to_argmax() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![1, 2, 2, 1], vec![1.0, 4.0, 3.0, 2.0]).unwrap());
        let p = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(p).data(), &[4.0]);
        let g = tape.backward(p);
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }
}
