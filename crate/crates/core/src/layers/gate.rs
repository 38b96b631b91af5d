use serde::{Deserialize, Serialize};

use super::{Builder, Norm, NormKind};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GateSpec {
    /// Input channels before the split; must be even.
    pub channels: usize,
    /// Normalization applied to the tanh (gate) half.
    pub gate_norm: NormKind,
    /// Normalization applied to the sigmoid (feature) half.
    pub feature_norm: NormKind,
    /// Sigmoid on the gate half and tanh on the features instead.
    #[serde(default)]
    pub swap_activations: bool,
}

impl GateSpec {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            gate_norm: NormKind::Batch,
            feature_norm: NormKind::Layer,
            swap_activations: false,
        }
    }

    pub fn param_count(&self) -> usize {
        let half = self.channels / 2;
        [self.gate_norm, self.feature_norm]
            .iter()
            .filter(|k| **k != NormKind::None)
            .count()
            * 2
            * half
    }
}

/// Splits the channel axis in two halves `(gate, features)` and returns
/// `norm(tanh(gate)) ⊙ norm(sigmoid(features))`, halving the channel count.
#[derive(Clone, Debug)]
pub struct Gate {
    spec: GateSpec,
    gate_norm: Norm,
    feature_norm: Norm,
}

impl Gate {
    pub fn new(b: &mut Builder, name: &str, spec: GateSpec) -> Result<Self> {
        if spec.channels == 0 || !spec.channels.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "gate needs an even channel count for its two-part split, got {}",
                spec.channels
            )));
        }
        let half = spec.channels / 2;
        Ok(Self {
            gate_norm: Norm::new(b, &format!("{name}.gate_norm"), half, spec.gate_norm)?,
            feature_norm: Norm::new(b, &format!("{name}.feature_norm"), half, spec.feature_norm)?,
            spec,
        })
    }

    pub fn spec(&self) -> &GateSpec {
        &self.spec
    }

    pub fn norms(&self) -> [&Norm; 2] {
        [&self.gate_norm, &self.feature_norm]
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = self.gate_norm.params();
        p.extend(self.feature_norm.params());
        p
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xs = g.shape(x).to_vec();
        if xs.len() < 2 || !xs[1].is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "gate input {xs:?} cannot be split into two equal channel halves"
            )));
        }
        if xs[1] != self.spec.channels {
            return Err(Error::shape("gate", &xs, &[self.spec.channels]));
        }
        let half = xs[1] / 2;
        let parts = g.split(x, 1, &[half, half])?;
        let (gate, features) = if self.spec.swap_activations {
            (g.sigmoid(parts[0]), g.tanh(parts[1]))
        } else {
            (g.tanh(parts[0]), g.sigmoid(parts[1]))
        };
        let gate = self.gate_norm.forward(g, gate)?;
        let features = self.feature_norm.forward(g, features)?;
        g.mul(gate, features)
    }
}
