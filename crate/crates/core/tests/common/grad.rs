//! Finite-difference oracles for the tape.
//!
//! Every case draws inputs uniformly in [−2, 2], rejects draws that sit
//! within a margin of a kink, clip bound or rounding midpoint, reduces the
//! op output to a scalar with fixed random weights, and compares the
//! reverse-mode gradient of every input element with a central difference
//! (h = 1e-5).

use cimtrain::model::{forward_traced, Mode, NetworkGraph};
use cimtrain::quant::{QuantGrid, Range};
use cimtrain::tensor::{Elementwise, Padding, Tape, Tensor, Var};
use cimtrain::train::{total_loss, ConstrainedWeight, LossConfig};
use rand::Rng;

pub const H: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients that are zero
/// analytically are compared in absolute terms.
pub const FLOOR: f64 = 1e-3;
pub const OP_TOL: f64 = 1e-4;
pub const COMPOSITE_TOL: f64 = 1e-3;
const MARGIN: f64 = 1e-2;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
type Value = Box<dyn Fn(&[Tensor]) -> Tensor>;
type Valid = Box<dyn Fn(&[Tensor]) -> bool>;

/// One differentiable operation under test.
pub struct OpCase {
    pub name: &'static str,
    shapes: Vec<Vec<usize>>,
    /// Which inputs are differentiated; the others are constants.
    differentiable: Vec<bool>,
    build: Build,
    /// Function whose finite differences the backward rule must match;
    /// `None` means the forward value of `build` itself. Straight-through
    /// operations name their clamp surrogate here.
    surrogate: Option<Value>,
    valid: Valid,
    /// Overrides the uniform [−2, 2] draw for some inputs.
    sampler: Option<Box<dyn Fn(&mut dyn rand::RngCore) -> Vec<Tensor>>>,
}

fn uniform(rng: &mut dyn rand::RngCore, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn away_from_zero(ts: &[Tensor]) -> bool {
    ts.iter().all(|t| t.data().iter().all(|v| v.abs() > MARGIN))
}

fn always(_: &[Tensor]) -> bool {
    true
}

fn grid() -> QuantGrid {
    Range::new(-1.3, 1.1, 4).grid().unwrap()
}

fn inside_clip(t: &Tensor, g: &QuantGrid) -> bool {
    t.data()
        .iter()
        .all(|&v| (v - g.nudged_min).abs() > MARGIN && (v - g.nudged_max).abs() > MARGIN)
}

fn forward_value(build: &Build, inputs: &[Tensor]) -> Tensor {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).clone()
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    build: impl Fn(&mut Tape, &[Var]) -> Var + 'static,
    valid: impl Fn(&[Tensor]) -> bool + 'static,
) -> OpCase {
    OpCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        differentiable: vec![true; shapes.len()],
        build: Box::new(build),
        surrogate: None,
        valid: Box::new(valid),
        sampler: None,
    }
}

fn clamp_surrogate(g: QuantGrid, alpha: f64) -> Value {
    Box::new(move |ins: &[Tensor]| ins[0].map(|v| alpha * v.clamp(g.nudged_min, g.nudged_max) + (1.0 - alpha) * v))
}

/// Every differentiable operation of the tape and of the model layer.
pub fn op_cases() -> Vec<OpCase> {
    let mut cases = vec![
        case("matmul", &[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]).unwrap(), always),
        case(
            "conv2d valid stride 1",
            &[&[2, 5, 5, 2], &[3, 3, 2, 3]],
            |t, v| t.conv2d(v[0], v[1], 1, Padding::Valid).unwrap(),
            always,
        ),
        case(
            "conv2d same stride 2",
            &[&[1, 5, 4, 2], &[3, 2, 2, 2]],
            |t, v| t.conv2d(v[0], v[1], 2, Padding::Same).unwrap(),
            always,
        ),
        case("add_bias", &[&[3, 4], &[4]], |t, v| t.add_bias(v[0], v[1]).unwrap(), always),
        case("add", &[&[2, 3], &[2, 3]], |t, v| t.add(v[0], v[1]).unwrap(), always),
        case("sub", &[&[2, 3], &[2, 3]], |t, v| t.sub(v[0], v[1]).unwrap(), always),
        case("mul", &[&[2, 3], &[2, 3]], |t, v| t.mul(v[0], v[1]).unwrap(), always),
        case("scale", &[&[2, 3]], |t, v| t.scale(v[0], -0.7), always),
        case("relu", &[&[3, 4]], |t, v| t.relu(v[0]), away_from_zero),
        case("max0", &[&[3, 4]], |t, v| t.max0(v[0]), away_from_zero),
        case("tanh", &[&[3, 4]], |t, v| t.tanh(v[0]), always),
        case("abs", &[&[3, 4]], |t, v| t.abs(v[0]), away_from_zero),
        case("sum", &[&[3, 4]], |t, v| t.sum(v[0]), always),
        case("softmax", &[&[5]], |t, v| t.softmax(v[0]).unwrap(), always),
        case("select", &[&[4]], |t, v| t.select(v[0], 2).unwrap(), always),
        case("reshape", &[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]).unwrap(), always),
        case(
            "softmax_cross_entropy",
            &[&[4, 3]],
            |t, v| t.softmax_cross_entropy(v[0], &[0, 2, 1, 2]).unwrap(),
            always,
        ),
        case(
            "maxpool2",
            &[&[2, 4, 5, 2]],
            |t, v| t.maxpool2(v[0]).unwrap(),
            |ins: &[Tensor]| {
                let (s, d) = (ins[0].shape(), ins[0].data());
                let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
                (0..n).all(|b| {
                    (0..h / 2).all(|oy| {
                        (0..w / 2).all(|ox| {
                            (0..c).all(|ch| {
                                let mut win: Vec<f64> = (0..4)
                                    .map(|k| d[((b * h + 2 * oy + k / 2) * w + 2 * ox + k % 2) * c + ch])
                                    .collect();
                                win.sort_by(|a, b| b.partial_cmp(a).unwrap());
                                win[0] - win[1] > MARGIN
                            })
                        })
                    })
                })
            },
        ),
        case(
            "activation_mix",
            &[&[3, 4], &[2], &[]],
            |t, v| cimtrain::model::activation_mix(t, v[0], v[1], v[2]).unwrap(),
            |ins: &[Tensor]| away_from_zero(&ins[..1]),
        ),
    ];
    for (name, op, arity, kinked) in [
        ("elementwise relu", Elementwise::Relu, 1, true),
        ("elementwise tanh", Elementwise::Tanh, 1, false),
        ("elementwise max0", Elementwise::Max0, 1, true),
        ("elementwise add", Elementwise::Add, 2, false),
        ("elementwise sub", Elementwise::Sub, 2, false),
        ("elementwise mul", Elementwise::Mul, 2, false),
    ] {
        let shapes: Vec<&[usize]> = vec![&[2, 3]; arity];
        cases.push(case(
            name,
            &shapes,
            move |t, v| t.elementwise(op, v).unwrap(),
            move |ins: &[Tensor]| !kinked || away_from_zero(ins),
        ));
    }

    // straight-through operations, checked against their clamp surrogate
    let g = grid();
    let mut fq = case("fake_quant (straight-through)", &[&[3, 4]], move |t, v| t.fake_quant(v[0], g), move |ins: &[Tensor]| inside_clip(&ins[0], &g));
    fq.surrogate = Some(clamp_surrogate(g, 1.0));
    cases.push(fq);
    for (alpha, name) in [
        (0.0, "alpha_blend_quant alpha=0"),
        (0.35, "alpha_blend_quant alpha=0.35"),
        (0.8, "alpha_blend_quant alpha=0.8"),
        (1.0, "alpha_blend_quant alpha=1"),
    ] {
        let mut ab = case(
            name,
            &[&[3, 4]],
            move |t, v| cimtrain::quant::alpha_blend_quant(t, v[0], &g, alpha).unwrap(),
            move |ins: &[Tensor]| inside_clip(&ins[0], &g),
        );
        ab.surrogate = Some(clamp_surrogate(g, alpha));
        cases.push(ab);
    }
    let mut mm = case("matmul_exact", &[&[3, 4], &[4, 2]], |t, v| t.matmul_exact(v[0], v[1], 0.1, 0.05).unwrap(), always);
    mm.surrogate = Some(Box::new(|ins: &[Tensor]| {
        let mut t = Tape::new();
        let (a, b) = (t.leaf(ins[0].clone(), false), t.leaf(ins[1].clone(), false));
        let out = t.matmul(a, b).unwrap();
        t.value(out).clone()
    }));
    cases.push(mm);
    let mut cv = case(
        "conv2d_exact",
        &[&[1, 4, 4, 2], &[2, 2, 2, 3]],
        |t, v| t.conv2d_exact(v[0], v[1], 1, Padding::Same, 0.1, 0.05).unwrap(),
        always,
    );
    cv.surrogate = Some(Box::new(|ins: &[Tensor]| {
        let mut t = Tape::new();
        let (a, b) = (t.leaf(ins[0].clone(), false), t.leaf(ins[1].clone(), false));
        let out = t.conv2d(a, b, 1, Padding::Same).unwrap();
        t.value(out).clone()
    }));
    cases.push(cv);

    // range bounds of a trainable quantizer: the level index and zero point
    // stay fixed under a small perturbation, so plain differences apply
    let mut fqv = case(
        "fake_quant_vars (range bounds)",
        &[&[3, 4], &[], &[]],
        |t, v| t.fake_quant_vars(v[0], v[1], v[2], 3).unwrap(),
        |ins: &[Tensor]| {
            let (lo, hi) = (ins[1].item(), ins[2].item());
            let g = Range::new(lo, hi, 3).grid().unwrap();
            let top = f64::from(g.levels - 1);
            let zf = -lo * top / (hi - lo);
            let frac_ok = |u: f64| (u - u.floor() - 0.5).abs() > MARGIN;
            frac_ok(zf)
                && inside_clip(&ins[0], &g)
                && ins[0].data().iter().all(|&v| frac_ok((v - g.nudged_min) / g.scale))
        },
    );
    fqv.differentiable = vec![false, true, true];
    fqv.sampler = Some(Box::new(|rng: &mut dyn rand::RngCore| {
        vec![
            uniform(rng, &[3, 4]),
            Tensor::scalar(-rng.random_range(0.1..2.0)),
            Tensor::scalar(rng.random_range(0.1..2.0)),
        ]
    }));
    cases.push(fqv);
    cases
}

/// Largest relative error of `case` over `points` random draws.
pub fn check_op(case: &OpCase, rng: &mut dyn rand::RngCore, points: usize) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..points {
        let mut inputs;
        let mut tries = 0;
        loop {
            inputs = match &case.sampler {
                Some(s) => s(rng),
                None => case.shapes.iter().map(|s| uniform(rng, s)).collect(),
            };
            if (case.valid)(&inputs) {
                break;
            }
            tries += 1;
            assert!(tries < 10_000, "{}: no valid draw", case.name);
        }
        let value = |ins: &[Tensor]| match &case.surrogate {
            Some(s) => s(ins),
            None => forward_value(&case.build, ins),
        };
        let out_shape = value(&inputs).shape().to_vec();
        let weights = uniform(rng, &out_shape).map(|v| 1.0 + 0.25 * v);
        let objective = |ins: &[Tensor]| -> f64 {
            value(ins).data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .zip(&case.differentiable)
            .map(|(t, &d)| tape.leaf(t.clone(), d))
            .collect();
        let out = (case.build)(&mut tape, &vars);
        let w = tape.constant(weights.clone());
        let prod = tape.mul(out, w).unwrap();
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);

        for (i, &d) in case.differentiable.iter().enumerate() {
            if !d {
                continue;
            }
            let g = grads.get_or_zeros(vars[i], inputs[i].shape());
            for e in 0..inputs[i].numel() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[e] += H;
                let mut minus = inputs.clone();
                minus[i].data_mut()[e] -= H;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * H);
                worst = worst.max(rel_err(g.data()[e], fd));
            }
        }
    }
    worst
}

/// Gradient check of the complete training objective (cross-entropy plus
/// L1, L2 and the unipolarity penalty) of `net` in float mode, with respect
/// to every parameter, the activation logits and the tanh shift.
///
/// Elements whose central differences at `h` and `2h` disagree lie on a
/// kink and are skipped; returns `(worst error, checked, skipped)`.
pub fn check_composite(net: &NetworkGraph, x: &Tensor, labels: &[usize], loss: &LossConfig) -> (f64, usize, usize) {
    let stages = net.linear_stages().unwrap();
    let eval = |net: &NetworkGraph, grad: bool| {
        let mut trace = forward_traced(net, x, Mode::Float, grad).unwrap();
        let task = trace.tape.softmax_cross_entropy(trace.logits, labels).unwrap();
        let weights: Vec<ConstrainedWeight> = stages
            .iter()
            .map(|st| ConstrainedWeight {
                var: trace.params[&cimtrain::model::weight_name(&st.name)],
                constrained_channels: st.polarity.constrained_channels(st.op.outputs()),
            })
            .collect();
        let terms = total_loss(&mut trace.tape, task, &weights, loss, 1, 0).unwrap();
        (trace, terms.total)
    };
    let (trace, total) = eval(net, true);
    let grads = trace.tape.backward(total);
    let f = |n: &NetworkGraph| {
        let (t, v) = eval(n, false);
        t.tape.value(v).item()
    };

    // (accessor into a network copy, analytic gradient)
    let mut probes: Vec<(Box<dyn Fn(&mut NetworkGraph) -> &mut f64>, f64)> = Vec::new();
    for (name, &var) in &trace.params {
        let g = grads.get_or_zeros(var, trace.tape.value(var).shape());
        for e in 0..g.numel() {
            let name = name.clone();
            probes.push((
                Box::new(move |n: &mut NetworkGraph| &mut n.params.get_mut(&name).unwrap().data_mut()[e]),
                g.data()[e],
            ));
        }
    }
    if let Some(l) = trace.globals.act_logits {
        let g = grads.get_or_zeros(l, &[2]);
        for e in 0..2 {
            probes.push((Box::new(move |n: &mut NetworkGraph| &mut n.globals.act_logits[e]), g.data()[e]));
        }
    }
    if let Some(th) = trace.globals.th {
        let g = grads.get_or_zeros(th, &[]).item();
        probes.push((Box::new(|n: &mut NetworkGraph| &mut n.globals.th_g), g));
    }

    let (mut worst, mut checked, mut skipped) = (0.0f64, 0, 0);
    for (slot, g) in &probes {
        let diff = |h: f64| {
            let mut p = net.clone();
            *slot(&mut p) += h;
            let mut m = net.clone();
            *slot(&mut m) -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        };
        let (d1, d2) = (diff(H), diff(2.0 * H));
        if rel_err(d1, d2) > 1e-5 {
            skipped += 1;
            continue;
        }
        checked += 1;
        worst = worst.max(rel_err(*g, d1));
    }
    (worst, checked, skipped)
}

/// A small float network exercising conv, pooling, dense, the learnable
/// activation mix and partially constrained weights, with a batch.
pub fn composite_net<R: Rng>(rng: &mut R) -> (NetworkGraph, Tensor, Vec<usize>) {
    use cimtrain::model::{ActivationKind, LayerKind, LayerSpec, Polarity};
    use cimtrain::quant::GlobalVariableSet;
    let mix = || LayerKind::Activation {
        function: ActivationKind::Mix,
    };
    let layers = vec![
        LayerSpec::new(
            "c1",
            LayerKind::Conv2d {
                filters: 3,
                kernel: [3, 3],
                stride: 1,
                padding: Padding::Same,
            },
        ),
        LayerSpec::new("a1", mix()),
        LayerSpec::new("p1", LayerKind::MaxPool),
        LayerSpec::new("f1", LayerKind::Flatten),
        LayerSpec::new("d2", LayerKind::Dense { units: 5 }),
        LayerSpec::new("a2", mix()),
        LayerSpec::new("out", LayerKind::Output { units: 3 }),
    ];
    let mut globals = GlobalVariableSet::new(4, 4, 8);
    globals.act_logits = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    globals.th_g = rng.random_range(-0.5..0.5);
    let mut net = NetworkGraph::new(vec![4, 4, 2], layers, globals, rng.random()).unwrap();
    net.set_polarity(Polarity::Fractional(0.5)).unwrap();
    for (_, p) in net.params.values_mut() {
        for v in p {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    let n = 3;
    let x = Tensor::new(vec![n, 4, 4, 2], (0..n * 32).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
    let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
    (net, x, labels)
}

/// Loss configuration with every term switched on and the unipolarity
/// penalty active.
pub fn composite_loss() -> LossConfig {
    let mut cfg = LossConfig {
        l1: 0.01,
        l2: 0.02,
        ..LossConfig::default()
    };
    cfg.constraint.alpha_c = 0.5;
    cfg.constraint.w_t = 0.05;
    cfg.constraint.start_step = Some(0);
    cfg
}
