use std::str::FromStr;

use super::{ActivationKind, LayerKind, LayerSpec, ModelError, NetworkDescription, NetworkGraph, Polarity, Result};
use crate::quant::GlobalVariableSet;
use crate::tensor::Padding;

pub const HAR_CHANNELS: usize = 9;
pub const HAR_WINDOW: usize = 100;
pub const HAR_CLASSES: usize = 12;
pub const CIFAR_CLASSES: usize = 10;

/// The two reference networks, or a user-supplied description.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceNet {
    Cifar10,
    Har,
    Custom(Box<NetworkDescription>),
}

impl FromStr for ReferenceNet {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar" => Ok(ReferenceNet::Cifar10),
            "har" => Ok(ReferenceNet::Har),
            other => Err(ModelError::Argument(format!("unknown reference network `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceOptions {
    pub weight_bits: u8,
    pub activation_bits: u8,
    pub bias_bits: u8,
    /// Activation of every hidden layer.
    pub activation: ActivationKind,
    pub polarity: Polarity,
    pub seed: u64,
    /// Side of the square CIFAR-10 input; 32 for full resolution.
    pub cifar_input: usize,
    /// Width of the HAR hidden layer.
    pub har_hidden: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            weight_bits: 4,
            activation_bits: 4,
            bias_bits: 8,
            activation: ActivationKind::Mix,
            polarity: Polarity::Bipolar,
            seed: 0,
            cifar_input: 32,
            har_hidden: 145,
        }
    }
}

fn conv(name: &str, filters: usize) -> LayerSpec {
    LayerSpec::new(
        name,
        LayerKind::Conv2d {
            filters,
            kernel: [3, 3],
            stride: 1,
            padding: Padding::Same,
        },
    )
}

fn act(name: &str, function: ActivationKind) -> LayerSpec {
    LayerSpec::new(name, LayerKind::Activation { function })
}

/// VGG-style stack: three blocks of two 3×3 convolutions and a 2×2 pool,
/// followed by the classifier. 307,498 parameters at 32×32 input.
fn cifar_layers(activation: ActivationKind) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for (block, filters) in [32usize, 64, 128].into_iter().enumerate() {
        for j in 0..2 {
            let name = format!("conv{}_{}", block + 1, j + 1);
            layers.push(conv(&name, filters));
            layers.push(act(&format!("{name}_act"), activation));
        }
        layers.push(LayerSpec::new(format!("pool{}", block + 1), LayerKind::MaxPool));
    }
    layers.push(LayerSpec::new("flatten", LayerKind::Flatten));
    layers.push(LayerSpec::new("output", LayerKind::Output { units: CIFAR_CLASSES }));
    layers
}

/// Flattened `9×100` window, one hidden layer, 12 classes.
fn har_layers(hidden: usize, activation: ActivationKind) -> Vec<LayerSpec> {
    vec![
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::new("hidden", LayerKind::Dense { units: hidden }),
        act("hidden_act", activation),
        LayerSpec::new("output", LayerKind::Output { units: HAR_CLASSES }),
    ]
}

/// Builds a reference network with freshly initialized parameters.
pub fn build_reference(which: &ReferenceNet, opts: &ReferenceOptions) -> Result<NetworkGraph> {
    let globals = GlobalVariableSet::new(opts.weight_bits, opts.activation_bits, opts.bias_bits);
    let mut net = match which {
        ReferenceNet::Cifar10 => {
            if opts.cifar_input < 8 {
                return Err(ModelError::Argument(format!(
                    "CIFAR-10 input side {} is below the 8 pixels three pools need",
                    opts.cifar_input
                )));
            }
            NetworkGraph::new(
                vec![opts.cifar_input, opts.cifar_input, 3],
                cifar_layers(opts.activation),
                globals,
                opts.seed,
            )?
        }
        ReferenceNet::Har => NetworkGraph::new(
            vec![HAR_CHANNELS, HAR_WINDOW],
            har_layers(opts.har_hidden, opts.activation),
            globals,
            opts.seed,
        )?,
        ReferenceNet::Custom(desc) => return desc.build(opts.seed),
    };
    net.set_polarity(opts.polarity)?;
    Ok(net)
}
