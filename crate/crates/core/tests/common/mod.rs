//! Shared generators for the integration and acceptance tests.
#![allow(dead_code)]

pub mod grad;
pub mod experiments;
pub mod ops;

use cimtrain::crossbar::DeploymentConfig;
use cimtrain::model::{ActivationKind, LayerKind, LayerSpec, Mode, NetworkGraph, Polarity};
use cimtrain::quant::{GlobalVariableSet, Range};
use cimtrain::tensor::{Padding, Tensor};
use cimtrain::train::export;
use rand::Rng;

const ACTIVATIONS: [ActivationKind; 4] = [
    ActivationKind::Relu,
    ActivationKind::ShiftedTanh,
    ActivationKind::Mix,
    ActivationKind::Identity,
];

fn random_range<R: Rng>(rng: &mut R, bits: u8) -> Range {
    let lo = if rng.random_bool(0.3) { 0.0 } else { -rng.random_range(0.05..2.0) };
    let hi = rng.random_range(0.05..2.0);
    Range::new(lo, hi, bits)
}

fn random_polarity<R: Rng>(rng: &mut R) -> Polarity {
    match rng.random_range(0..3) {
        0 => Polarity::Bipolar,
        1 => Polarity::Unipolar,
        _ => Polarity::Fractional(rng.random_range(1..4) as f64 / 4.0),
    }
}

/// A random exported quantized network with 1–4 trainable layers mixing
/// convolutions and dense layers, and a matching input batch.
pub fn random_quantized_net<R: Rng>(rng: &mut R) -> (NetworkGraph, Tensor) {
    let spatial = rng.random_bool(0.6);
    let input_shape = if spatial {
        vec![rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..4)]
    } else {
        vec![rng.random_range(1..24)]
    };
    let trainable = rng.random_range(1..=4);
    let mut layers = Vec::new();
    let mut shape = input_shape.clone();
    for i in 0..trainable - 1 {
        let name = format!("l{i}");
        if shape.len() == 3 && rng.random_bool(0.7) {
            let k = rng.random_range(1..=3usize.min(shape[0]).min(shape[1]));
            let stride = rng.random_range(1..=2);
            let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
            let filters = rng.random_range(1..6);
            layers.push(LayerSpec::new(
                name,
                LayerKind::Conv2d {
                    filters,
                    kernel: [k, k],
                    stride,
                    padding,
                },
            ));
            shape = match padding {
                Padding::Same => vec![shape[0].div_ceil(stride), shape[1].div_ceil(stride), filters],
                Padding::Valid => vec![(shape[0] - k) / stride + 1, (shape[1] - k) / stride + 1, filters],
            };
        } else {
            if shape.len() == 3 {
                layers.push(LayerSpec::new(format!("f{i}"), LayerKind::Flatten));
            }
            let units = rng.random_range(1..20);
            layers.push(LayerSpec::new(name, LayerKind::Dense { units }));
            shape = vec![units];
        }
        let function = ACTIVATIONS[rng.random_range(0..ACTIVATIONS.len())];
        layers.push(LayerSpec::new(format!("a{i}"), LayerKind::Activation { function }));
        if shape.len() == 3 && shape[0] >= 2 && shape[1] >= 2 && rng.random_bool(0.3) {
            layers.push(LayerSpec::new(format!("p{i}"), LayerKind::MaxPool));
            shape = vec![shape[0] / 2, shape[1] / 2, shape[2]];
        }
    }
    if shape.len() == 3 {
        layers.push(LayerSpec::new("flat", LayerKind::Flatten));
    }
    layers.push(LayerSpec::new("out", LayerKind::Output { units: rng.random_range(1..8) }));

    let (wb, ab, bb) = (rng.random_range(2..=8), rng.random_range(2..=8), rng.random_range(2..=8));
    let mut globals = GlobalVariableSet::new(wb, ab, bb);
    globals.x_g = random_range(rng, ab);
    globals.w_g = random_range(rng, wb);
    globals.b_g = random_range(rng, bb);
    globals.y_g = random_range(rng, ab);
    globals.act_logits = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
    globals.th_g = rng.random_range(-0.5..0.5);
    let mut net = NetworkGraph::new(input_shape.clone(), layers, globals, rng.random()).expect("valid random net");
    net.output_ranges.x = random_range(rng, ab);
    net.output_ranges.w = random_range(rng, wb);
    if let Some(b) = &mut net.output_ranges.b {
        *b = random_range(rng, bb);
    }
    net.set_polarity(random_polarity(rng)).expect("valid polarity");
    if rng.random_bool(0.25) && net.linear_stages().unwrap().len() > 1 {
        net.use_per_layer_ranges().unwrap();
        let pinned = net.globals.unipolar_weights;
        for set in net.per_layer_ranges.as_mut().unwrap() {
            set.x = random_range(rng, ab);
            set.w = random_range(rng, wb);
            if pinned {
                set.w.min = 0.0;
            }
            set.y = Some(random_range(rng, ab));
        }
    }
    for (_, p) in net.params.values_mut() {
        for v in p {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    let keep_mix = rng.random_bool(0.5);
    let mut net = export(&net, Mode::Quantized).expect("export");
    if keep_mix {
        for l in &mut net.layers {
            if let LayerKind::Activation { function } = &mut l.kind {
                if rng.random_bool(0.5) {
                    *function = ActivationKind::Mix;
                }
            }
        }
    }
    let n = rng.random_range(1..4);
    let numel = n * input_shape.iter().product::<usize>();
    let x = Tensor::new(
        [vec![n], input_shape].concat(),
        (0..numel).map(|_| rng.random_range(-2.5..2.5)).collect(),
    )
    .unwrap();
    (net, x)
}

/// Ideal devices on a random small tile shape.
pub fn random_ideal_config<R: Rng>(rng: &mut R) -> DeploymentConfig {
    let mut cfg = DeploymentConfig::default();
    cfg.tile_rows = rng.random_range(1..20);
    cfg.tile_cols = 2 * rng.random_range(1..10);
    cfg.device.g_off = if rng.random_bool(0.5) { 0.0 } else { 1e-6 };
    cfg
}
