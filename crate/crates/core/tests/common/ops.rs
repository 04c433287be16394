//! Brute-force operation counting by explicit MAC enumeration.

use cimtrain::cost::OpCounts;
use cimtrain::model::{LayerKind, NetworkGraph, Polarity};
use cimtrain::tensor::Padding;

fn constrained(scheme: Polarity, f: usize) -> usize {
    match scheme {
        Polarity::Bipolar => 0,
        Polarity::Unipolar => f,
        Polarity::Fractional(p) => ((p * f as f64).round() as usize).min(f),
    }
}

/// Walks the layer list, tracking shapes by hand, and visits every
/// multiplication of every output element. Each multiplication reads one
/// positive-column cell, plus one negative-column cell when its output
/// channel is bipolar. Every layer input element is converted once and
/// every output element digitized once.
pub fn brute_force_ops(net: &NetworkGraph, scheme: Polarity) -> OpCounts {
    let mut c = OpCounts::default();
    let mut shape = net.input_shape.clone();
    for layer in &net.layers {
        match &layer.kind {
            LayerKind::Conv2d {
                filters,
                kernel,
                stride,
                padding,
            } => {
                let (h, w, ch) = (shape[0], shape[1], shape[2]);
                let (oh, ow) = match padding {
                    Padding::Same => (h.div_ceil(*stride), w.div_ceil(*stride)),
                    Padding::Valid => ((h - kernel[0]) / stride + 1, (w - kernel[1]) / stride + 1),
                };
                let m = constrained(scheme, *filters);
                c.dac_ops += (h * w * ch) as u64;
                for _oy in 0..oh {
                    for _ox in 0..ow {
                        for f in 0..*filters {
                            c.adc_ops += 1;
                            for _dy in 0..kernel[0] {
                                for _dx in 0..kernel[1] {
                                    for _c in 0..ch {
                                        c.nvm_reads_pos += 1;
                                        if f >= m {
                                            c.nvm_reads_neg += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                shape = vec![oh, ow, *filters];
            }
            LayerKind::Dense { units } | LayerKind::Output { units } => {
                let x: usize = shape.iter().product();
                let m = constrained(scheme, *units);
                c.dac_ops += x as u64;
                for y in 0..*units {
                    c.adc_ops += 1;
                    for _ in 0..x {
                        c.nvm_reads_pos += 1;
                        if y >= m {
                            c.nvm_reads_neg += 1;
                        }
                    }
                }
                shape = vec![*units];
            }
            LayerKind::MaxPool => shape = vec![shape[0] / 2, shape[1] / 2, shape[2]],
            LayerKind::Flatten => shape = vec![shape.iter().product()],
            LayerKind::Activation { .. } => {}
        }
    }
    c
}
