//! Layer zoo: convolutions (standard, pointwise, depthwise separable), max
//! pooling, batch/layer normalization, dense, dropout, LSTM/BLSTM and the
//! two-way channel-split gate.

mod conv;
mod dense;
mod gate;
mod lstm;
mod norm;

pub use conv::{Conv2d, ConvSpec, MaxPool2d};
pub use dense::Dense;
pub use gate::{Gate, GateSpec};
pub use lstm::{Blstm, Lstm};
pub use norm::{Norm, NormKind};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Param, ParamStore, Tensor};

/// Parameter factory used while constructing layers: registers tensors in a
/// store under share ids and draws initial values from a seeded generator.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`.
    pub fn he_uniform(&mut self, id: &str, shape: &[usize], fan_in: usize) -> Result<Param> {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        self.uniform(id, shape, bound)
    }

    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(
        &mut self,
        id: &str,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
    ) -> Result<Param> {
        let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
        self.uniform(id, shape, bound)
    }

    fn uniform(&mut self, id: &str, shape: &[usize], bound: f64) -> Result<Param> {
        let rng = &mut self.rng;
        self.store.get_or_init(id, shape, || {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::from_parts(shape.to_vec(), data)
        })
    }

    pub fn constant(&mut self, id: &str, shape: &[usize], value: f64) -> Result<Param> {
        self.store
            .get_or_init(id, shape, || Tensor::full(shape, value))
    }

    pub fn from_fn(
        &mut self,
        id: &str,
        shape: &[usize],
        init: impl FnOnce() -> Tensor,
    ) -> Result<Param> {
        self.store.get_or_init(id, shape, init)
    }
}
