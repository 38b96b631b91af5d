//! Config-driven construction of the baseline, CNN+Dense and gated
//! convolutional variants, ablations of the latter, and parameter accounting.

mod arch;
mod network;

pub use arch::{ArchDefaults, ArchFile, LayerDecl, Size, CANONICAL, GATEBLOCK_SHARE, SMOKE};
pub use network::{build_model, count_params, parameter_table, LayerSummary, Model, ModelSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::NormKind;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    CnnDense,
    Gcnn,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Baseline, Variant::CnnDense, Variant::Gcnn];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::CnnDense => "cnn_dense",
            Variant::Gcnn => "gcnn",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// Every depthwise separable convolution becomes a standard one.
    A1,
    /// Pooling moves back to after every second convolution.
    A2,
    /// Every shared-weight use gets its own parameters.
    A3,
    /// Each GateBlock gets a second shared separable convolution.
    A4,
    /// GateBlocks are removed.
    A5,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::A1,
        Ablation::A2,
        Ablation::A3,
        Ablation::A4,
        Ablation::A5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::A1 => "a1",
            Ablation::A2 => "a2",
            Ablation::A3 => "a3",
            Ablation::A4 => "a4",
            Ablation::A5 => "a5",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        std::iter::once(Ablation::None)
            .chain(Self::ALL)
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Declarative model description. Unset sizes fall back to the
/// architecture file's `[defaults]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    #[serde(default)]
    pub ablation: Ablation,
    /// Number of symbols `n`; the output layer has `n + 1` units. Training
    /// fills in 0 from the data.
    #[serde(default)]
    pub vocab_size: usize,
    /// `canonical`, `smoke`, or a path to an architecture file.
    #[serde(default = "canonical")]
    pub arch: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blstm_units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gcnn_max_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_blocks: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_norm: Option<NormKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_norm: Option<NormKind>,
    #[serde(default)]
    pub swap_activations: bool,
    /// Seed for parameter initialization.
    #[serde(default)]
    pub init_seed: u64,
}

fn canonical() -> String {
    "canonical".into()
}

impl ModelConfig {
    pub fn new(variant: Variant, vocab_size: usize) -> Self {
        Self {
            variant,
            ablation: Ablation::None,
            vocab_size,
            arch: canonical(),
            blstm_units: None,
            gcnn_max_channels: None,
            gate_blocks: None,
            dropout: None,
            gate_norm: None,
            feature_norm: None,
            swap_activations: false,
            init_seed: 0,
        }
    }

    pub fn smoke(variant: Variant, vocab_size: usize) -> Self {
        Self {
            arch: "smoke".into(),
            ..Self::new(variant, vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 {
            return Err(Error::Config(
                "vocabulary must have at least one symbol".into(),
            ));
        }
        if self.ablation != Ablation::None && self.variant != Variant::Gcnn {
            return Err(Error::Config(format!(
                "ablation {} only applies to the gcnn variant, not {}",
                self.ablation.name(),
                self.variant.name()
            )));
        }
        if let Some(d) = self.dropout {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("dropout {d} outside [0, 1)")));
            }
        }
        if self.blstm_units == Some(0) || self.gcnn_max_channels == Some(0) {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Returns `cfg` with `which` selected; only gated models can be ablated.
pub fn apply_ablation(cfg: &ModelConfig, which: Ablation) -> Result<ModelConfig> {
    let out = ModelConfig {
        ablation: which,
        ..cfg.clone()
    };
    out.validate()?;
    Ok(out)
}

/// Rewrites a layer list according to `which`.
pub fn ablate_layers(layers: &[LayerDecl], which: Ablation) -> Vec<LayerDecl> {
    let mut out = layers.to_vec();
    match which {
        Ablation::None => {}
        Ablation::A1 => {
            for l in &mut out {
                match l {
                    LayerDecl::Conv { separable, .. } | LayerDecl::GateBlock { separable, .. } => {
                        *separable = false
                    }
                    _ => {}
                }
            }
        }
        Ablation::A2 => {
            out.retain(|l| !matches!(l, LayerDecl::Pool { .. }));
            let mut moved = Vec::with_capacity(out.len() + 4);
            let mut convs = 0;
            for l in out {
                let is_conv = matches!(l, LayerDecl::Conv { .. });
                moved.push(l);
                if is_conv {
                    convs += 1;
                    if convs % 2 == 0 && convs <= 8 {
                        moved.push(LayerDecl::Pool { size: 2 });
                    }
                }
            }
            out = moved;
        }
        Ablation::A3 => {
            for l in &mut out {
                match l {
                    LayerDecl::Conv { share, .. } | LayerDecl::GateBlock { share, .. } => {
                        *share = None
                    }
                    _ => {}
                }
            }
        }
        Ablation::A4 => {
            for l in &mut out {
                if let LayerDecl::GateBlock { double, .. } = l {
                    *double = true;
                }
            }
        }
        Ablation::A5 => out.retain(|l| !matches!(l, LayerDecl::GateBlock { .. })),
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_needs_gcnn() {
        let base = ModelConfig::new(Variant::Baseline, 10);
        assert!(apply_ablation(&base, Ablation::A1).is_err());
        let g = ModelConfig::new(Variant::Gcnn, 10);
        assert_eq!(
            apply_ablation(&g, Ablation::A3).unwrap().ablation,
            Ablation::A3
        );
    }

    #[test]
    fn a2_moves_pools_after_conv_pairs() {
        let layers = ArchFile::canonical().layers(Variant::Gcnn).to_vec();
        let moved = ablate_layers(&layers, Ablation::A2);
        let pools = |ls: &[LayerDecl]| {
            ls.iter()
                .filter(|l| matches!(l, LayerDecl::Pool { .. }))
                .count()
        };
        assert_eq!(pools(&moved), pools(&layers));
        let mut convs = 0;
        for w in moved.windows(2) {
            if matches!(w[0], LayerDecl::Conv { .. }) {
                convs += 1;
                assert_eq!(
                    matches!(w[1], LayerDecl::Pool { .. }),
                    convs % 2 == 0 && convs <= 8
                );
            }
        }
    }

    #[test]
    fn names_parse() {
        assert_eq!("cnn_dense".parse::<Variant>().unwrap(), Variant::CnnDense);
        assert_eq!("a4".parse::<Ablation>().unwrap(), Ablation::A4);
        assert!("a6".parse::<Ablation>().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let mut cfg = ModelConfig::smoke(Variant::Gcnn, 7);
        cfg.gate_blocks = Some(1);
        cfg.feature_norm = Some(NormKind::None);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(toml::from_str::<ModelConfig>(&text).unwrap(), cfg);
    }
}
