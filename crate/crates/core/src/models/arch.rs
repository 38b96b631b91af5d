//! Architecture files: TOML with a `[defaults]` table and one layer list per
//! variant, each layer written in a small line grammar.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::Variant;
use crate::error::{Error, Result};
use crate::layers::NormKind;

pub const CANONICAL: &str = include_str!("../../arch/canonical.toml");
pub const SMOKE: &str = include_str!("../../arch/smoke.toml");

/// Default shared-parameter group of the separable conv inside every GateBlock.
pub const GATEBLOCK_SHARE: &str = "gateblock";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchDefaults {
    pub blstm_units: usize,
    pub gcnn_max_channels: usize,
    pub gate_blocks: usize,
    pub dropout: f64,
    pub gate_norm: NormKind,
    pub feature_norm: NormKind,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawArch {
    defaults: ArchDefaults,
    variants: BTreeMap<String, Vec<String>>,
}

/// A channel or unit count, literal or named.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Size {
    Fixed(usize),
    Var(String),
}

impl fmt::Display for Size {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Size::Fixed(n) => write!(f, "{n}"),
            Size::Var(v) => write!(f, "${v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerDecl {
    Conv {
        out: Size,
        kernel: usize,
        separable: bool,
        share: Option<String>,
        relu: bool,
        bias: bool,
    },
    Pool {
        size: usize,
    },
    Dropout {
        rate: Option<f64>,
    },
    Tap,
    Fuse {
        out: Size,
    },
    GateBlock {
        channels: Size,
        tap: bool,
        /// Inner convolutions are depthwise separable (standard when false).
        separable: bool,
        share: Option<String>,
        /// A second inner separable conv with its own shared group.
        double: bool,
    },
    Dense {
        units: Size,
        relu: bool,
    },
    Blstm {
        units: Size,
    },
    Output,
}

impl fmt::Display for LayerDecl {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerDecl::Conv {
                out,
                kernel,
                separable,
                share,
                relu,
                bias,
            } => {
                write!(f, "conv {out}")?;
                if *separable {
                    write!(f, " sep")?;
                }
                if !relu {
                    write!(f, " linear")?;
                }
                if !bias {
                    write!(f, " nobias")?;
                }
                if *kernel != 3 {
                    write!(f, " k={kernel}")?;
                }
                if let Some(s) = share {
                    write!(f, " share={s}")?;
                }
                Ok(())
            }
            LayerDecl::Pool { size } if *size == 2 => write!(f, "pool"),
            LayerDecl::Pool { size } => write!(f, "pool {size}"),
            LayerDecl::Dropout { rate: None } => write!(f, "dropout"),
            LayerDecl::Dropout { rate: Some(r) } => write!(f, "dropout {r}"),
            LayerDecl::Tap => write!(f, "tap"),
            LayerDecl::Fuse { out } => write!(f, "fuse {out}"),
            LayerDecl::GateBlock {
                channels,
                tap,
                separable,
                share,
                double,
            } => {
                write!(f, "gateblock {channels}")?;
                if *tap {
                    write!(f, " tap")?;
                }
                if !separable {
                    write!(f, " standard")?;
                }
                if *double {
                    write!(f, " double")?;
                }
                match share.as_deref() {
                    Some(GATEBLOCK_SHARE) => Ok(()),
                    Some(s) => write!(f, " share={s}"),
                    None => write!(f, " unshared"),
                }
            }
            LayerDecl::Dense { units, relu } => {
                write!(f, "dense {units}")?;
                if !relu {
                    write!(f, " linear")?;
                }
                Ok(())
            }
            LayerDecl::Blstm { units } => write!(f, "blstm {units}"),
            LayerDecl::Output => write!(f, "output"),
        }
    }
}

fn bad(msg: impl Into<String>) -> Error {
    Error::format("architecture", msg)
}

fn parse_size(tok: Option<&str>, line: &str) -> Result<Size> {
    let tok = tok.ok_or_else(|| bad(format!("{line:?}: missing size")))?;
    if let Some(name) = tok.strip_prefix('$') {
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(bad(format!("{line:?}: bad variable name {tok:?}")));
        }
        return Ok(Size::Var(name.to_string()));
    }
    match tok.parse::<usize>() {
        Ok(n) if n > 0 => Ok(Size::Fixed(n)),
        _ => Err(bad(format!(
            "{line:?}: size {tok:?} is not a positive integer"
        ))),
    }
}

impl std::str::FromStr for LayerDecl {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut toks = line.split_whitespace();
        let op = toks.next().ok_or_else(|| bad("empty layer line"))?;
        let sized = matches!(op, "conv" | "fuse" | "gateblock" | "dense" | "blstm");
        let size = if sized {
            Some(parse_size(toks.next(), line)?)
        } else {
            None
        };
        let positional = if matches!(op, "pool" | "dropout") {
            toks.clone()
                .next()
                .filter(|t| !t.contains('='))
                .inspect(|_| {
                    toks.next();
                })
        } else {
            None
        };
        let mut flags = Vec::new();
        let mut kv = BTreeMap::new();
        for t in toks {
            match t.split_once('=') {
                Some((k, v)) if !k.is_empty() && !v.is_empty() => {
                    if kv.insert(k, v).is_some() {
                        return Err(bad(format!("{line:?}: key {k:?} repeated")));
                    }
                }
                Some(_) => return Err(bad(format!("{line:?}: malformed option {t:?}"))),
                None => flags.push(t),
            }
        }
        let allowed: (&[&str], &[&str]) = match op {
            "conv" => (&["sep", "linear", "nobias"], &["k", "share"]),
            "gateblock" => (&["tap", "standard", "double", "unshared"], &["share"]),
            "dense" => (&["linear"], &[]),
            _ => (&[], &[]),
        };
        if let Some(f) = flags.iter().find(|f| !allowed.0.contains(f)) {
            return Err(bad(format!("{line:?}: unknown flag {f:?}")));
        }
        if let Some(k) = kv.keys().find(|k| !allowed.1.contains(k)) {
            return Err(bad(format!("{line:?}: unknown option {k:?}")));
        }
        let has = |f: &str| flags.contains(&f);
        let share = kv.get("share").map(|s| s.to_string());
        Ok(match op {
            "conv" => {
                let kernel = match kv.get("k") {
                    Some(k) => k
                        .parse::<usize>()
                        .ok()
                        .filter(|k| (1..=15).contains(k))
                        .ok_or_else(|| bad(format!("{line:?}: bad kernel size {k:?}")))?,
                    None => 3,
                };
                LayerDecl::Conv {
                    out: size.expect("sized op"),
                    kernel,
                    separable: has("sep"),
                    share,
                    relu: !has("linear"),
                    bias: !has("nobias"),
                }
            }
            "gateblock" => {
                if has("unshared") && share.is_some() {
                    return Err(bad(format!("{line:?}: unshared conflicts with share=")));
                }
                LayerDecl::GateBlock {
                    channels: size.expect("sized op"),
                    tap: has("tap"),
                    separable: !has("standard"),
                    share: if has("unshared") {
                        None
                    } else {
                        Some(share.unwrap_or_else(|| GATEBLOCK_SHARE.to_string()))
                    },
                    double: has("double"),
                }
            }
            "fuse" => LayerDecl::Fuse {
                out: size.expect("sized op"),
            },
            "dense" => LayerDecl::Dense {
                units: size.expect("sized op"),
                relu: !has("linear"),
            },
            "blstm" => LayerDecl::Blstm {
                units: size.expect("sized op"),
            },
            "pool" => LayerDecl::Pool {
                size: match positional {
                    Some(p) => p
                        .parse::<usize>()
                        .ok()
                        .filter(|p| (2..=8).contains(p))
                        .ok_or_else(|| bad(format!("{line:?}: bad pool size {p:?}")))?,
                    None => 2,
                },
            },
            "dropout" => LayerDecl::Dropout {
                rate: match positional {
                    Some(p) => Some(
                        p.parse::<f64>()
                            .ok()
                            .filter(|r| (0.0..1.0).contains(r))
                            .ok_or_else(|| bad(format!("{line:?}: bad dropout rate {p:?}")))?,
                    ),
                    None => None,
                },
            },
            "tap" => LayerDecl::Tap,
            "output" => LayerDecl::Output,
            other => return Err(bad(format!("unknown layer op {other:?}"))),
        })
    }
}

/// A parsed architecture file.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchFile {
    pub defaults: ArchDefaults,
    pub variants: BTreeMap<String, Vec<LayerDecl>>,
    /// The source text, kept so checkpoints can embed it.
    pub text: String,
}

impl ArchFile {
    pub fn parse(text: &str) -> Result<Self> {
        let raw: RawArch = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
        let d = &raw.defaults;
        if !(0.0..1.0).contains(&d.dropout) {
            return Err(bad(format!("default dropout {} outside [0, 1)", d.dropout)));
        }
        if d.blstm_units == 0 || d.gcnn_max_channels == 0 {
            return Err(bad("default sizes must be positive"));
        }
        let mut variants = BTreeMap::new();
        for (name, lines) in raw.variants {
            let layers = lines
                .iter()
                .map(|l| l.parse())
                .collect::<Result<Vec<LayerDecl>>>()?;
            match layers.iter().position(|l| *l == LayerDecl::Output) {
                Some(i) if i + 1 == layers.len() => {}
                _ => {
                    return Err(bad(format!(
                        "variant {name:?} must end with a single output layer"
                    )))
                }
            }
            if layers.iter().filter(|l| **l == LayerDecl::Output).count() != 1 {
                return Err(bad(format!(
                    "variant {name:?} has more than one output layer"
                )));
            }
            variants.insert(name, layers);
        }
        for v in Variant::ALL {
            if !variants.contains_key(v.name()) {
                return Err(bad(format!("missing variant {:?}", v.name())));
            }
        }
        Ok(Self {
            defaults: raw.defaults,
            variants,
            text: text.to_string(),
        })
    }

    pub fn canonical() -> Self {
        Self::parse(CANONICAL).expect("bundled canonical architecture parses")
    }

    pub fn smoke() -> Self {
        Self::parse(SMOKE).expect("bundled smoke architecture parses")
    }

    /// `canonical`, `smoke`, or a path to an architecture file.
    pub fn resolve(name: &str) -> Result<Self> {
        match name {
            "canonical" => Ok(Self::canonical()),
            "smoke" => Ok(Self::smoke()),
            path => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                Self::parse(&text)
            }
        }
    }

    pub fn layers(&self, v: Variant) -> &[LayerDecl] {
        &self.variants[v.name()]
    }
}
