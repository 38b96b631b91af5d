use super::Builder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Param, Var};

/// Affine map `x·W + b` on `(batch, in)` inputs.
#[derive(Clone, Debug)]
pub struct Dense {
    weight: Param,
    bias: Option<Param>,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    pub fn new(
        b: &mut Builder,
        name: &str,
        inputs: usize,
        outputs: usize,
        bias: bool,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("dense layer extents must be positive".into()));
        }
        let weight = b.glorot_uniform(
            &format!("{name}.weight"),
            &[inputs, outputs],
            inputs,
            outputs,
        )?;
        let bias = if bias {
            Some(b.constant(&format!("{name}.bias"), &[outputs], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    /// Zero weights and bias: the layer starts out emitting zeros whatever
    /// its input.
    pub fn zeroed(b: &mut Builder, name: &str, inputs: usize, outputs: usize) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::Config("dense layer extents must be positive".into()));
        }
        Ok(Self {
            weight: b.constant(&format!("{name}.weight"), &[inputs, outputs], 0.0)?,
            bias: Some(b.constant(&format!("{name}.bias"), &[outputs], 0.0)?),
            inputs,
            outputs,
        })
    }

    pub fn inputs(&self) -> usize {
        self.inputs
    }

    pub fn outputs(&self) -> usize {
        self.outputs
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + if self.bias.is_some() { self.outputs } else { 0 }
    }

    pub fn params(&self) -> Vec<Param> {
        let mut p = vec![self.weight.clone()];
        p.extend(self.bias.clone());
        p
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let w = g.param(&self.weight);
        let y = g.matmul(x, w)?;
        match &self.bias {
            Some(b) => {
                let bv = g.param(b);
                g.add_bias(y, bv, 1)
            }
            None => Ok(y),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Mode, ParamStore, Tensor};

    #[test]
    fn ten_to_five_has_55_parameters() {
        let mut store = ParamStore::new();
        let d = Dense::new(&mut Builder::new(&mut store, 0), "d", 10, 5, true).unwrap();
        assert_eq!(d.param_count(), 55);
        assert_eq!(store.num_scalars(), 55);
    }

    #[test]
    fn affine() {
        let mut store = ParamStore::new();
        let d = Dense::new(&mut Builder::new(&mut store, 0), "d", 2, 1, true).unwrap();
        store
            .get("d.weight")
            .unwrap()
            .set_value(Tensor::from_slice(&[2, 1], &[2.0, -1.0]))
            .unwrap();
        store
            .get("d.bias")
            .unwrap()
            .set_value(Tensor::scalar(0.5))
            .unwrap();
        let mut g = Graph::new(Mode::Eval, 0);
        let x = g.input(Tensor::from_slice(&[2, 2], &[1.0, 1.0, 3.0, 4.0]));
        let y = d.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).data(), &[1.5, 2.5]);
    }
}
