//! Small training experiments shared by the integration and acceptance
//! tests.

use cimtrain::harness::{synth_har, Dataset};
use cimtrain::model::{
    build_reference, weight_name, ActivationKind, LayerKind, LayerSpec, Mode, NetworkGraph, Polarity, ReferenceNet,
    ReferenceOptions, HAR_CLASSES,
};
use cimtrain::quant::{GlobalVariableSet, QuantGrid};
use cimtrain::train::{train, TrainConfig, TrainOutcome};

/// A flatten → `hidden` × (dense, mix) → head network for HAR windows.
pub fn har_chain(hidden: usize, width: usize, weight_bits: u8, seed: u64) -> NetworkGraph {
    let mut layers = vec![LayerSpec::new("flat", LayerKind::Flatten)];
    for i in 0..hidden {
        layers.push(LayerSpec::new(format!("d{i}"), LayerKind::Dense { units: width }));
        layers.push(LayerSpec::new(
            format!("a{i}"),
            LayerKind::Activation {
                function: ActivationKind::Mix,
            },
        ));
    }
    layers.push(LayerSpec::new("out", LayerKind::Output { units: HAR_CLASSES }));
    NetworkGraph::new(vec![9, 100], layers, GlobalVariableSet::new(weight_bits, 4, 8), seed).unwrap()
}

/// Distinct values across the weights of all hidden layers.
pub fn distinct_hidden_weights(net: &NetworkGraph) -> usize {
    let mut bits: Vec<u64> = net
        .linear_stages()
        .unwrap()
        .iter()
        .filter(|st| !st.is_output())
        .flat_map(|st| {
            net.params
                .get(&weight_name(&st.name))
                .unwrap()
                .data()
                .iter()
                .map(|v| (v + 0.0).to_bits())
                .collect::<Vec<_>>()
        })
        .collect();
    bits.sort_unstable();
    bits.dedup();
    bits.len()
}

/// Weight grid of every hidden layer.
pub fn hidden_weight_grids(net: &NetworkGraph) -> Vec<QuantGrid> {
    net.linear_stages()
        .unwrap()
        .iter()
        .filter(|st| !st.is_output())
        .map(|st| net.stage_ranges(st).w.grid().unwrap())
        .collect()
}

pub fn quick_config(steps: usize, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(steps);
    cfg.seed = seed;
    cfg.eval_every = steps.max(1);
    cfg
}

/// The HAR reference net trained on the synthetic HAR set.
pub fn train_har(data: &Dataset, polarity: Polarity, weight_bits: u8, mode: Mode, steps: usize) -> TrainOutcome {
    let opts = ReferenceOptions {
        polarity,
        weight_bits,
        activation: ActivationKind::Mix,
        ..ReferenceOptions::default()
    };
    let net = build_reference(&ReferenceNet::Har, &opts).unwrap();
    let mut cfg = quick_config(steps, 0);
    cfg.mode = mode;
    train(&net, data, &cfg).unwrap()
}

/// The seed-fixed synthetic HAR set used by the desk-scale experiments.
pub fn har_data() -> Dataset {
    synth_har(1, 2000, HAR_CLASSES, 2.0).unwrap()
}

/// Weights of constrained channels, which must all be non-negative.
pub fn constrained_weights(net: &NetworkGraph) -> Vec<f64> {
    let mut out = Vec::new();
    for st in net.linear_stages().unwrap() {
        let f = st.op.outputs();
        let m = st.polarity.constrained_channels(f);
        let w = net.params.get(&weight_name(&st.name)).unwrap();
        out.extend(w.data().iter().enumerate().filter(|(i, _)| i % f < m).map(|(_, v)| *v));
    }
    out
}
