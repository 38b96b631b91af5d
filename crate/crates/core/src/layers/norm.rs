use serde::{Deserialize, Serialize};

use super::Builder;
use crate::error::{Error, Result};
use crate::tensor::{Buffer, Graph, Mode, Param, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Per-channel statistics over batch and spatial axes; running
    /// statistics in eval mode.
    Batch,
    /// Per-sample statistics over all non-batch axes.
    Layer,
    /// No normalization.
    None,
}

/// A normalization layer with per-channel affine `gamma·x̂ + beta`.
#[derive(Clone, Debug)]
pub struct Norm {
    kind: NormKind,
    gamma: Param,
    beta: Param,
    running_mean: Buffer,
    running_var: Buffer,
    pub epsilon: f64,
    /// Weight of the current batch in the running-statistic update.
    pub momentum: f64,
}

impl Norm {
    pub fn new(b: &mut Builder, name: &str, channels: usize, kind: NormKind) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config(
                "normalization needs at least one channel".into(),
            ));
        }
        Ok(Self {
            kind,
            gamma: b.constant(&format!("{name}.gamma"), &[channels], 1.0)?,
            beta: b.constant(&format!("{name}.beta"), &[channels], 0.0)?,
            running_mean: b.store.buffer(&format!("{name}.running_mean"), || {
                Tensor::zeros(&[channels])
            }),
            running_var: b
                .store
                .buffer(&format!("{name}.running_var"), || Tensor::ones(&[channels])),
            epsilon: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn gamma(&self) -> &Param {
        &self.gamma
    }

    pub fn beta(&self) -> &Param {
        &self.beta
    }

    pub fn running_mean(&self) -> &Buffer {
        &self.running_mean
    }

    pub fn running_var(&self) -> &Buffer {
        &self.running_var
    }

    /// Trainable parameters; empty for `NormKind::None`.
    pub fn params(&self) -> Vec<Param> {
        match self.kind {
            NormKind::None => Vec::new(),
            _ => vec![self.gamma.clone(), self.beta.clone()],
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        match self.kind {
            NormKind::None => Ok(x),
            NormKind::Layer => {
                let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
                g.layer_norm(x, gm, bt, self.epsilon)
            }
            NormKind::Batch => {
                let (gm, bt) = (g.param(&self.gamma), g.param(&self.beta));
                if g.mode() == Mode::Train {
                    let (y, stats) = g.batch_norm(x, gm, bt, self.epsilon)?;
                    let unbias = stats.count as f64 / (stats.count - 1) as f64;
                    let m = self.momentum;
                    let mut rm = self.running_mean.get_mut();
                    let mut rv = self.running_var.get_mut();
                    for (r, v) in rm.data_mut().iter_mut().zip(&stats.mean) {
                        *r = (1.0 - m) * *r + m * v;
                    }
                    for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                        *r = (1.0 - m) * *r + m * v * unbias;
                    }
                    Ok(y)
                } else {
                    let mean = self.running_mean.get().data().to_vec();
                    let var = self.running_var.get().data().to_vec();
                    g.frozen_norm(x, gm, bt, &mean, &var, self.epsilon)
                }
            }
        }
    }
}
