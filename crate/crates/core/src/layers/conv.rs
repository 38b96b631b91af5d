use serde::{Deserialize, Serialize};

use super::Builder;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Padding, Param, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    /// Depthwise stage (one `kh×kw` filter per input channel, no bias)
    /// followed by a `1×1` pointwise stage carrying the optional bias.
    pub separable: bool,
    pub bias: bool,
    pub share_id: Option<String>,
}

impl ConvSpec {
    /// 3×3, stride 1, same padding, biased, standard.
    pub fn new(in_channels: usize, out_channels: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (3, 3),
            stride: (1, 1),
            padding: Padding::Same,
            separable: false,
            bias: true,
            share_id: None,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self {
            kernel: (1, 1),
            ..Self::new(in_channels, out_channels)
        }
    }

    pub fn kernel(mut self, kh: usize, kw: usize) -> Self {
        self.kernel = (kh, kw);
        self
    }

    pub fn separable(mut self, yes: bool) -> Self {
        self.separable = yes;
        self
    }

    pub fn bias(mut self, yes: bool) -> Self {
        self.bias = yes;
        self
    }

    pub fn padding(mut self, padding: Padding) -> Self {
        self.padding = padding;
        self
    }

    pub fn stride(mut self, sh: usize, sw: usize) -> Self {
        self.stride = (sh, sw);
        self
    }

    pub fn shared(mut self, id: impl Into<String>) -> Self {
        self.share_id = Some(id.into());
        self
    }

    pub fn param_count(&self) -> usize {
        let (kh, kw) = self.kernel;
        let (c, o) = (self.in_channels, self.out_channels);
        let weights = if self.separable {
            kh * kw * c + c * o
        } else {
            kh * kw * c * o
        };
        weights + if self.bias { o } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if kh == 0 || kw == 0 || self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::Config(
                "kernel and stride extents must be at least 1".into(),
            ));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(
                "convolution channel counts must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Weights {
    Standard { weight: Param },
    Separable { depthwise: Param, pointwise: Param },
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    spec: ConvSpec,
    weights: Weights,
    bias: Option<Param>,
}

impl Conv2d {
    /// Registers the layer's parameters under `spec.share_id`, or under
    /// `name` when the layer is not shared.
    pub fn new(b: &mut Builder, name: &str, spec: ConvSpec) -> Result<Self> {
        spec.validate()?;
        let id = spec.share_id.clone().unwrap_or_else(|| name.to_string());
        let (kh, kw) = spec.kernel;
        let (c, o) = (spec.in_channels, spec.out_channels);
        let weights = if spec.separable {
            Weights::Separable {
                depthwise: b.he_uniform(&format!("{id}.depthwise"), &[c, 1, kh, kw], kh * kw)?,
                pointwise: b.he_uniform(&format!("{id}.pointwise"), &[o, c, 1, 1], c)?,
            }
        } else {
            Weights::Standard {
                weight: b.he_uniform(&format!("{id}.weight"), &[o, c, kh, kw], c * kh * kw)?,
            }
        };
        let bias = if spec.bias {
            Some(b.constant(&format!("{id}.bias"), &[o], 0.0)?)
        } else {
            None
        };
        let layer = Self {
            spec,
            weights,
            bias,
        };
        let actual: usize = layer.params().iter().map(Param::len).sum();
        assert_eq!(
            actual,
            layer.spec.param_count(),
            "parameter-count formula violated"
        );
        Ok(layer)
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn params(&self) -> Vec<Param> {
        let mut out = match &self.weights {
            Weights::Standard { weight } => vec![weight.clone()],
            Weights::Separable {
                depthwise,
                pointwise,
            } => vec![depthwise.clone(), pointwise.clone()],
        };
        out.extend(self.bias.clone());
        out
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let xs = g.shape(x);
        if xs.len() != 4 || xs[1] != self.spec.in_channels {
            return Err(Error::shape("conv2d input", xs, &[self.spec.in_channels]));
        }
        let y = match &self.weights {
            Weights::Standard { weight } => {
                let w = g.param(weight);
                g.conv2d(x, w, self.spec.stride, self.spec.padding)?
            }
            Weights::Separable {
                depthwise,
                pointwise,
            } => {
                let dw = g.param(depthwise);
                let pw = g.param(pointwise);
                let d = g.depthwise_conv2d(x, dw, self.spec.stride, self.spec.padding)?;
                g.conv2d(d, pw, (1, 1), Padding::Same)?
            }
        };
        match &self.bias {
            Some(b) => {
                let bv = g.param(b);
                g.add_bias(y, bv, 1)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaxPool2d {
    pub window: (usize, usize),
    pub stride: (usize, usize),
}

impl Default for MaxPool2d {
    fn default() -> Self {
        Self {
            window: (2, 2),
            stride: (2, 2),
        }
    }
}

impl MaxPool2d {
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.maxpool2d(x, self.window, self.stride)
    }
}
