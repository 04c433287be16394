mod common;

use cimtrain::harness::synth_har;
use cimtrain::model::{Mode, Polarity, HAR_CLASSES};
use cimtrain::train::{train, write_metrics_csv, OptimizerConfig, TrainError};
use common::experiments::{
    constrained_weights, distinct_hidden_weights, har_chain, hidden_weight_grids, quick_config,
};

fn small_data() -> cimtrain::harness::Dataset {
    synth_har(4, 600, HAR_CLASSES, 2.0).unwrap()
}

#[test]
fn shared_global_grid_bounds_distinct_hidden_weights() {
    let data = small_data();
    let net = har_chain(3, 24, 4, 1);
    let out = train(&net, &data, &quick_config(120, 1)).unwrap();
    assert!(distinct_hidden_weights(&out.net) <= 16);
    let grids = hidden_weight_grids(&out.net);
    assert_eq!(grids.len(), 3);
    assert!(grids.windows(2).all(|g| g[0] == g[1]));
}

#[test]
fn per_layer_ranges_let_distinct_weights_grow_with_depth() {
    let data = small_data();
    let mut counts = Vec::new();
    for hidden in 1..=3 {
        let mut net = har_chain(hidden, 24, 4, 1);
        net.use_per_layer_ranges().unwrap();
        let mut cfg = quick_config(120, 1);
        cfg.alpha_blend = false;
        let out = train(&net, &data, &cfg).unwrap();
        counts.push(distinct_hidden_weights(&out.net));
    }
    assert!(counts.windows(2).all(|c| c[1] > c[0]), "{counts:?}");
    assert!(counts[2] > 16);
}

#[test]
fn constrained_weights_are_non_negative_after_export() {
    let data = small_data();
    for polarity in [Polarity::Unipolar, Polarity::Fractional(0.5)] {
        let mut net = har_chain(1, 16, 3, 2);
        net.set_polarity(polarity).unwrap();
        let out = train(&net, &data, &quick_config(80, 2)).unwrap();
        let w = constrained_weights(&out.net);
        assert!(!w.is_empty());
        assert!(w.iter().all(|&v| v >= 0.0), "{polarity}");
    }
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = small_data();
    let net = har_chain(1, 16, 4, 3);
    let a = train(&net, &data, &quick_config(40, 9)).unwrap();
    let b = train(&net, &data, &quick_config(40, 9)).unwrap();
    assert_eq!(a.net, b.net);
    let csv = |m: &[cimtrain::train::MetricsRow]| {
        let mut out = Vec::new();
        write_metrics_csv(m, &mut out).unwrap();
        out
    };
    assert_eq!(csv(&a.metrics), csv(&b.metrics));
    let c = train(&net, &data, &quick_config(40, 10)).unwrap();
    assert_ne!(a.net, c.net);
}

#[test]
fn metrics_log_every_step_and_validate_periodically() {
    let data = small_data();
    let net = har_chain(1, 16, 4, 3);
    let mut cfg = quick_config(60, 0);
    cfg.eval_every = 20;
    let out = train(&net, &data, &cfg).unwrap();
    assert_eq!(out.metrics.len(), 60);
    for (i, m) in out.metrics.iter().enumerate() {
        assert_eq!(m.step, i);
        // validation accuracy is unknown before the first evaluation and
        // carried forward between evaluations
        assert_eq!(m.val_acc.is_finite(), i >= 19, "step {i}");
        if i > 19 && (i + 1) % 20 != 0 {
            assert_eq!(m.val_acc, out.metrics[i - 1].val_acc);
        }
    }
    assert_eq!(out.metrics.last().unwrap().alpha, 1.0);
    assert!(out.metrics.windows(2).all(|m| m[0].alpha <= m[1].alpha));
    let mut csv = Vec::new();
    write_metrics_csv(&out.metrics, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(
        text.lines().next().unwrap(),
        "step,task_loss,l1,l2,constraint,train_acc,val_acc,w_min,w_max,alpha,a0,a1,th_g"
    );
    assert_eq!(text.lines().count(), 61);
}

#[test]
fn float_training_learns() {
    let data = small_data();
    let net = har_chain(1, 32, 4, 5);
    let mut cfg = quick_config(200, 5);
    cfg.mode = Mode::Float;
    cfg.eval_every = 20;
    let out = train(&net, &data, &cfg).unwrap();
    let (first, last) = (&out.metrics[0], out.metrics.last().unwrap());
    assert!(last.task_loss < first.task_loss);
    assert!(out.val_accuracy.unwrap() > 0.5);
}

#[test]
fn divergence_reports_the_step_and_layer() {
    let data = small_data();
    let net = har_chain(2, 16, 4, 5);
    let mut cfg = quick_config(50, 5);
    cfg.mode = Mode::Float;
    cfg.optimizer = OptimizerConfig::adam(1e200);
    match train(&net, &data, &cfg) {
        Err(TrainError::NonFinite { step, layer }) => {
            assert!(step < 50);
            assert!(!layer.is_empty());
        }
        other => panic!("expected a non-finite error, got {:?}", other.map(|o| o.metrics.len())),
    }
}

#[test]
fn invalid_configuration_is_rejected_before_training() {
    let data = small_data();
    let net = har_chain(1, 8, 4, 5);
    let mut cfg = quick_config(10, 0);
    cfg.batch_size = 0;
    assert!(matches!(train(&net, &data, &cfg), Err(TrainError::Config(_))));
    let mut cfg = quick_config(10, 0);
    cfg.alpha_warmup = 1.5;
    assert!(matches!(train(&net, &data, &cfg), Err(TrainError::Config(_))));
}

#[test]
fn hardened_activation_is_what_gets_exported() {
    let data = small_data();
    let mut cfg = quick_config(60, 4);
    cfg.harden_at = 0.5;
    let net = har_chain(1, 16, 4, 4);
    let out = train(&net, &data, &cfg).unwrap();
    // after hardening the in-loop validation runs the exported architecture
    let last = out.metrics.last().unwrap().val_acc;
    assert_eq!(Some(last), out.val_accuracy);
    // the mix logits stop moving once the branch is fixed
    let logits: Vec<_> = out.metrics[30..].iter().map(|m| m.a0).collect();
    assert!(logits.windows(2).all(|w| w[0] == w[1]));
    assert!(out.metrics[..30].windows(2).any(|w| w[0].a0 != w[1].a0));

    cfg.harden_at = 1.5;
    assert!(matches!(train(&net, &data, &cfg), Err(TrainError::Config(_))));
}
