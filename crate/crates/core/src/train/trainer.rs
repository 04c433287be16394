use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{total_loss, ConstrainedWeight, LossConfig};
use super::optim::{Optimizer, OptimizerConfig};
use super::{alpha_at, select_activation, Result, TrainError};
use crate::harness::Dataset;
use crate::model::{
    bias_name, forward, forward_traced, weight_name, ActivationKind, LayerKind, LayerObservation, Mode,
    NetworkGraph, RangeScope,
};
use crate::quant::{
    ema_range, update_global_ranges, BoundLayerStats, LayerStats, Range, RangePolicy, RangeRole, RangeSet,
};
use crate::tensor::{softmax_slice, Tensor};

/// Smallest width a trainable range may shrink to.
const MIN_RANGE_WIDTH: f64 = 1e-6;
/// Samples per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub range_policy: RangePolicy,
    #[serde(default = "default_mode")]
    pub mode: Mode,
    /// Anneal weights from float to quantized with alpha-blending.
    #[serde(default = "yes")]
    pub alpha_blend: bool,
    /// Fraction of the run over which alpha ramps from 0 to 1.
    #[serde(default = "default_warmup")]
    pub alpha_warmup: f64,
    /// Train the activation-mix logits and the tanh shift.
    #[serde(default = "yes")]
    pub activation_search: bool,
    /// Learning rate of the activation-search variables. It is larger than
    /// the weight rate so the mix can commit to one branch within the run.
    #[serde(default = "default_search_lr")]
    pub search_lr: f64,
    /// Fraction of the run after which the activation mix is replaced by
    /// its selected branch; the remaining steps fine-tune the exported
    /// architecture. `1.0` defers the selection to export.
    #[serde(default = "default_harden_at")]
    pub harden_at: f64,
    #[serde(default)]
    pub seed: u64,
    /// Validation accuracy is measured every this many steps and at the end.
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Training samples used to initialize the ranges.
    #[serde(default = "default_calibration")]
    pub calibration_samples: usize,
}

fn default_batch() -> usize {
    32
}

fn default_mode() -> Mode {
    Mode::Quantized
}

fn yes() -> bool {
    true
}

fn default_warmup() -> f64 {
    0.6
}

fn default_eval_every() -> usize {
    100
}

fn default_calibration() -> usize {
    256
}

fn default_search_lr() -> f64 {
    1e-2
}

fn default_harden_at() -> f64 {
    0.8
}

impl TrainConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            batch_size: default_batch(),
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            range_policy: RangePolicy::default(),
            mode: default_mode(),
            alpha_blend: true,
            alpha_warmup: default_warmup(),
            activation_search: true,
            seed: 0,
            eval_every: default_eval_every(),
            calibration_samples: default_calibration(),
            search_lr: default_search_lr(),
            harden_at: default_harden_at(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.calibration_samples == 0 {
            return Err(TrainError::Config(
                "batch_size, eval_every and calibration_samples must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.alpha_warmup) {
            return Err(TrainError::Config(format!(
                "alpha_warmup {} outside [0, 1]",
                self.alpha_warmup
            )));
        }
        if !(0.0..=1.0).contains(&self.harden_at) {
            return Err(TrainError::Config(format!("harden_at {} outside [0, 1]", self.harden_at)));
        }
        if let RangePolicy::Ema { decay } = self.range_policy {
            if !(0.0..=1.0).contains(&decay) {
                return Err(TrainError::Config(format!("EMA decay {decay} outside [0, 1]")));
            }
        }
        self.optimizer.validate()?;
        self.optimizer.with_lr(self.search_lr).validate()?;
        self.loss.validate()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub task_loss: f64,
    pub l1: f64,
    pub l2: f64,
    pub constraint: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub w_min: f64,
    pub w_max: f64,
    pub alpha: f64,
    pub a0: f64,
    pub a1: f64,
    pub th_g: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The exported network: activation selected, constrained weights
    /// projected, parameters quantized.
    pub net: NetworkGraph,
    pub metrics: Vec<MetricsRow>,
    /// Validation accuracy of the exported network, when a validation split
    /// exists.
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| TrainError::Metrics(e.to_string()))?;
    }
    w.flush().map_err(|e| TrainError::Metrics(e.to_string()))
}

/// Fraction of correctly classified samples among `indices`.
pub fn evaluate(net: &NetworkGraph, data: &Dataset, indices: &[usize], mode: Mode) -> Result<f64> {
    if indices.is_empty() {
        return Err(TrainError::Config("cannot evaluate on an empty split".into()));
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, y) = data.batch(chunk)?;
        let logits = forward(net, &x, mode)?;
        correct += logits
            .argmax_rows()
            .iter()
            .zip(&y)
            .filter(|(p, l)| p == l)
            .count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

fn ema_into(range: &mut Range, stats: LayerStats, decay: f64, pin: bool) -> Result<()> {
    if !range.trainable {
        *range = ema_range(range, &[stats], decay, pin)?;
    }
    Ok(())
}

fn ema_set(set: &mut RangeSet, stats: &BoundLayerStats, decay: f64) -> Result<()> {
    ema_into(&mut set.x, stats.input, decay, false)?;
    ema_into(&mut set.w, stats.weight, decay, set.unipolar_weights)?;
    if let Some(b) = &mut set.b {
        ema_into(b, stats.bias, decay, false)?;
    }
    if let Some(y) = &mut set.y {
        ema_into(y, stats.activation, decay, false)?;
    }
    Ok(())
}

/// Moves every non-trainable range toward the values observed in `obs`.
fn update_ranges(net: &mut NetworkGraph, obs: &[LayerObservation], policy: RangePolicy) -> Result<()> {
    let RangePolicy::Ema { decay } = policy else {
        return Ok(());
    };
    let hidden: Vec<&LayerObservation> = obs.iter().filter(|o| o.hidden.is_some()).collect();
    match &mut net.per_layer_ranges {
        Some(per) => {
            for o in &hidden {
                ema_set(&mut per[o.hidden.expect("hidden")], &o.stats, decay)?;
            }
        }
        None if !hidden.is_empty() => {
            let stats: Vec<BoundLayerStats> = hidden.iter().map(|o| o.stats).collect();
            net.globals = update_global_ranges(&net.globals, &stats, policy)?;
        }
        None => {}
    }
    if let Some(o) = obs.iter().find(|o| o.hidden.is_none()) {
        ema_set(&mut net.output_ranges, &o.stats, decay)?;
    }
    Ok(())
}

/// Symmetric bias range spanning the larger of the bias and weight
/// magnitudes, so zero-initialized biases are not pinned to a collapsed
/// grid.
fn bias_span(stats: &BoundLayerStats, range: &mut Range) {
    let m = [stats.bias.min, stats.bias.max, stats.weight.min, stats.weight.max]
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    range.min = -m;
    range.max = m;
}

/// Initializes every range from one float forward pass over `x`.
pub fn calibrate_ranges(net: &mut NetworkGraph, x: &Tensor) -> Result<()> {
    let trace = forward_traced(net, x, Mode::Float, false)?;
    let obs = trace.observations;
    update_ranges(net, &obs, RangePolicy::Ema { decay: 0.0 })?;
    let hidden: Vec<BoundLayerStats> = obs.iter().filter(|o| o.hidden.is_some()).map(|o| o.stats).collect();
    if net.per_layer_ranges.is_none() {
        let mut merged = hidden.first().copied();
        for s in hidden.iter().skip(1) {
            let m = merged.as_mut().expect("non-empty");
            for (dst, src) in [(&mut m.bias, s.bias), (&mut m.weight, s.weight)] {
                dst.min = dst.min.min(src.min);
                dst.max = dst.max.max(src.max);
            }
        }
        if let Some(m) = merged {
            bias_span(&m, &mut net.globals.b_g);
        }
    }
    if let (Some(o), Some(b)) = (obs.iter().find(|o| o.hidden.is_none()), net.output_ranges.b.as_mut()) {
        bias_span(&o.stats, b);
    }
    net.validate()?;
    Ok(())
}

fn mark_trainable(net: &mut NetworkGraph) {
    for role in RangeRole::ALL {
        net.globals.range_mut(role).trainable = true;
        if let Some(r) = net.output_ranges.range_mut(role) {
            r.trainable = true;
        }
        if let Some(per) = &mut net.per_layer_ranges {
            for set in per.iter_mut() {
                if let Some(r) = set.range_mut(role) {
                    r.trainable = true;
                }
            }
        }
    }
}

fn range_slot<'a>(net: &'a mut NetworkGraph, scope: RangeScope, role: RangeRole) -> Option<(&'a mut Range, bool)> {
    match scope {
        RangeScope::Global => {
            let pin = net.globals.unipolar_weights;
            Some((net.globals.range_mut(role), pin))
        }
        RangeScope::Output => {
            let pin = net.output_ranges.unipolar_weights;
            net.output_ranges.range_mut(role).map(|r| (r, pin))
        }
        RangeScope::Layer(h) => {
            let set = net.per_layer_ranges.as_mut()?.get_mut(h)?;
            let pin = set.unipolar_weights;
            set.range_mut(role).map(|r| (r, pin))
        }
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

fn hidden_weight_extent(net: &NetworkGraph) -> Result<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for st in net.linear_stages()?.iter().filter(|s| !s.is_output()) {
        let w = net.params.get(&weight_name(&st.name))?;
        lo = lo.min(w.min());
        hi = hi.max(w.max());
    }
    Ok((lo, hi))
}

/// Runs the training loop on the training split of `data`.
///
/// Every step performs, in order: the forward pass, the composite loss,
/// the backward pass, the optimizer update of weights and trainable
/// globals, the range update of the non-differentiable globals, and the
/// advance of the alpha schedule.
pub fn train(net: &NetworkGraph, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    net.validate()?;
    data.validate_splits()?;
    if data.splits.train.is_empty() {
        return Err(TrainError::Config("empty training split".into()));
    }
    if data.sample_shape() != net.input_shape.as_slice() {
        return Err(TrainError::Config(format!(
            "dataset samples {:?} do not fit network input {:?}",
            data.sample_shape(),
            net.input_shape
        )));
    }
    if data.classes != net.num_classes()? {
        return Err(TrainError::Config(format!(
            "dataset has {} classes, network emits {}",
            data.classes,
            net.num_classes()?
        )));
    }
    let mut net = net.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order = data.splits.train.clone();
    order.shuffle(&mut rng);

    if cfg.mode == Mode::Quantized {
        let n = cfg.calibration_samples.min(order.len());
        let (x, _) = data.batch(&order[..n])?;
        calibrate_ranges(&mut net, &x)?;
        if cfg.range_policy == RangePolicy::Gradient {
            mark_trainable(&mut net);
        }
    }

    let stages = net.linear_stages()?;
    let start = cfg.loss.constraint.start(cfg.steps);
    let harden_step = (cfg.harden_at * cfg.steps as f64).round() as usize;
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut search_opt = Optimizer::new(cfg.optimizer.with_lr(cfg.search_lr))?;
    let mut cursor = 0usize;
    let mut val_acc = f64::NAN;
    let mut metrics = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        if step == harden_step && harden_step < cfg.steps {
            harden_activations(&mut net);
        }
        net.globals.alpha = if cfg.alpha_blend && cfg.mode == Mode::Quantized {
            alpha_at(step, cfg.steps, cfg.alpha_warmup)
        } else {
            1.0
        };
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(order.len()) {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let (xb, yb) = data.batch(&batch)?;

        // (1) forward
        let mut trace = forward_traced(&net, &xb, cfg.mode, true)?;
        // (2) loss
        let task = trace.tape.softmax_cross_entropy(trace.logits, &yb)?;
        let weights: Vec<ConstrainedWeight> = stages
            .iter()
            .map(|st| ConstrainedWeight {
                var: trace.params[&weight_name(&st.name)],
                constrained_channels: st.polarity.constrained_channels(st.op.outputs()),
            })
            .collect();
        let terms = total_loss(&mut trace.tape, task, &weights, &cfg.loss, step, start)?;
        let total = trace.tape.value(terms.total).item();
        if !total.is_finite() {
            let layer = trace.first_non_finite().unwrap_or("loss").to_string();
            return Err(TrainError::NonFinite { step, layer });
        }
        // (3) backward
        let grads = trace.tape.backward(terms.total);
        // (4) optimizer
        opt.begin_step();
        search_opt.begin_step();
        for (name, var) in &trace.params {
            if let Some(g) = grads.get(*var) {
                let p = net.params.get_mut(name)?;
                opt.update(name, p.data_mut(), g.data());
            }
        }
        if cfg.activation_search {
            if let Some(g) = trace.globals.act_logits.and_then(|v| grads.get(v)) {
                search_opt.update("globals.act_logits", &mut net.globals.act_logits, g.data());
            }
            if let Some(g) = trace.globals.th.and_then(|v| grads.get(v)) {
                let mut th = [net.globals.th_g];
                search_opt.update("globals.th_g", &mut th, g.data());
                net.globals.th_g = th[0];
            }
        }
        for (&(scope, role), &(lo, hi)) in &trace.globals.ranges {
            let g = [
                grads.get(lo).map_or(0.0, Tensor::item),
                grads.get(hi).map_or(0.0, Tensor::item),
            ];
            if let Some((range, pin)) = range_slot(&mut net, scope, role) {
                let mut v = [range.min, range.max];
                opt.update(&format!("range.{scope:?}.{}", role.name()), &mut v, &g);
                range.min = if pin && role == RangeRole::Weight { 0.0 } else { v[0] };
                range.max = v[1].max(range.min + MIN_RANGE_WIDTH);
            }
        }
        // (5) non-differentiable globals
        update_ranges(&mut net, &trace.observations, cfg.range_policy)?;
        // (6) the alpha schedule advances with the step counter

        if (step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps {
            if !data.splits.val.is_empty() {
                val_acc = evaluate(&net, data, &data.splits.val, cfg.mode)?;
            }
        }
        let (w_min, w_max) = hidden_weight_extent(&net)?;
        let a = softmax_slice(&net.globals.act_logits);
        let term = |v: Option<crate::tensor::Var>| v.map_or(0.0, |v| trace.tape.value(v).item());
        metrics.push(MetricsRow {
            step,
            task_loss: trace.tape.value(task).item(),
            l1: term(terms.l1),
            l2: term(terms.l2),
            constraint: term(terms.constraint),
            train_acc: accuracy(trace.logits(), &yb),
            val_acc,
            w_min,
            w_max,
            alpha: net.globals.alpha,
            a0: a[0],
            a1: a[1],
            th_g: net.globals.th_g,
        });
        log::debug!("step {step}: loss {total:.5}");
    }

    let exported = export(&net, cfg.mode)?;
    let val_accuracy = match data.splits.val.is_empty() {
        true => None,
        false => Some(evaluate(&exported, data, &data.splits.val, cfg.mode)?),
    };
    let test_accuracy = match data.splits.test.is_empty() {
        true => None,
        false => Some(evaluate(&exported, data, &data.splits.test, cfg.mode)?),
    };
    Ok(TrainOutcome {
        net: exported,
        metrics,
        val_accuracy,
        test_accuracy,
    })
}

/// Replaces every activation mix by the branch `select_activation` picks.
pub fn harden_activations(net: &mut NetworkGraph) {
    let chosen = select_activation(net.globals.act_logits);
    for layer in &mut net.layers {
        if let LayerKind::Activation { function } = &mut layer.kind {
            if *function == ActivationKind::Mix {
                *function = chosen;
            }
        }
    }
}

/// Hardens a trained network for deployment.
///
/// The activation mixture is replaced by the selected branch, constrained
/// channels are clamped to `[0, w_1]`, and in quantized mode every weight
/// and bias is replaced by its quantized value with alpha fixed at 1.
pub fn export(net: &NetworkGraph, mode: Mode) -> Result<NetworkGraph> {
    let mut out = net.clone();
    harden_activations(&mut out);
    out.globals.alpha = 1.0;
    let quantize = mode == Mode::Quantized && out.globals.do_q;
    for st in out.linear_stages()? {
        let ranges = out.stage_ranges(&st);
        let f = st.op.outputs();
        let m = st.polarity.constrained_channels(f);
        let w = out.params.get_mut(&weight_name(&st.name))?;
        if m > 0 {
            let w1 = ranges.w.max.max(0.0);
            for (i, v) in w.data_mut().iter_mut().enumerate() {
                if i % f < m {
                    *v = v.clamp(0.0, w1);
                }
            }
        }
        if quantize {
            let grid = ranges.w.grid()?;
            *w = crate::quant::fake_quant(w, &grid);
            if let Some(br) = &ranges.b {
                let b = out.params.get_mut(&bias_name(&st.name))?;
                *b = crate::quant::fake_quant(b, &br.grid()?);
            }
        }
    }
    out.validate()?;
    Ok(out)
}
