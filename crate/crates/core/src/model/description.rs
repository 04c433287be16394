use serde::{Deserialize, Serialize};

use super::{LayerSpec, ModelError, NetworkGraph, Result};
use crate::quant::{GlobalVariableSet, RangeSet};

/// Parameter-free description of a network: layers, polarity and every
/// quantization range. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescription {
    pub input_shape: Vec<usize>,
    pub globals: GlobalVariableSet,
    pub output_ranges: RangeSet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_layer_ranges: Option<Vec<RangeSet>>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkDescription {
    pub fn of(net: &NetworkGraph) -> Self {
        Self {
            input_shape: net.input_shape.clone(),
            globals: net.globals.clone(),
            output_ranges: net.output_ranges.clone(),
            per_layer_ranges: net.per_layer_ranges.clone(),
            layers: net.layers.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| ModelError::Argument(format!("cannot encode description: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| ModelError::Argument(format!("invalid network description: {e}")))
    }

    /// Instantiates the description with parameters drawn from `seed`.
    pub fn build(&self, seed: u64) -> Result<NetworkGraph> {
        let mut net = NetworkGraph::new(self.input_shape.clone(), self.layers.clone(), self.globals.clone(), seed)?;
        net.output_ranges = self.output_ranges.clone();
        net.per_layer_ranges = self.per_layer_ranges.clone();
        net.validate()?;
        Ok(net)
    }
}
