use std::collections::BTreeMap;
use std::io::Write;

use super::arch::{ArchFile, LayerDecl, Size};
use super::{ablate_layers, ModelConfig, Variant};
use crate::error::{Error, Result};
use crate::layers::{Blstm, Builder, Conv2d, ConvSpec, Dense, Gate, GateSpec, MaxPool2d};
use crate::preprocess::LINE_HEIGHT;
use crate::tensor::{Checkpoint, Graph, Mode, Param, ParamStore, Tensor, Var};

const META_MODEL: &str = "model";
const META_ARCH: &str = "arch";

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Layer {
    Conv {
        conv: Conv2d,
        relu: bool,
    },
    Pool(MaxPool2d),
    Dropout(f64),
    Tap,
    /// Pooling factor applied to each remembered map before concatenation.
    Fuse {
        conv: Conv2d,
        factors: Vec<usize>,
    },
    GateBlock {
        expand: Conv2d,
        gate_in: Gate,
        inner: Vec<Conv2d>,
        gate_out: Gate,
        tap: bool,
    },
    Dense {
        dense: Dense,
        relu: bool,
    },
    Blstm(Blstm),
    Output(Dense),
}

#[derive(Clone, Debug)]
struct Slot {
    layer: Layer,
    summary: LayerSummary,
}

/// Per-frame feature shape while building.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Map(usize, usize, usize),
    Flat(usize),
}

impl Shape {
    fn dims(self) -> Vec<usize> {
        match self {
            Shape::Map(c, h, w) => vec![c, h, w],
            Shape::Flat(d) => vec![d],
        }
    }

    fn flat(self) -> usize {
        self.dims().iter().product()
    }

    fn channels(self, what: &str) -> Result<usize> {
        match self {
            Shape::Map(c, _, _) => Ok(c),
            Shape::Flat(_) => Err(Error::Config(format!(
                "{what} cannot follow a dense or recurrent layer"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSummary {
    pub layer: String,
    pub kind: &'static str,
    /// Output shape for one frame, without the batch axis.
    pub shape: Vec<usize>,
    /// Parameters first introduced by this layer; reused shared groups add 0.
    pub params: usize,
    pub share_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelSummary {
    pub layers: Vec<LayerSummary>,
    /// Distinct trainable scalars, shared groups counted once.
    pub total_params: usize,
}

impl ModelSummary {
    pub fn params_of_kind(&self, kind: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.kind == kind)
            .map(|l| l.params)
            .sum()
    }

    pub fn count_of_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn recurrent_params(&self) -> usize {
        self.params_of_kind("blstm")
    }

    /// `layer,name,shape,params,share_id` rows.
    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let err = |e: csv::Error| Error::format("summary", e.to_string());
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["layer", "name", "shape", "params", "share_id"])
            .map_err(err)?;
        for l in &self.layers {
            let shape = l
                .shape
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join("x");
            w.write_record([
                &l.layer,
                l.kind,
                &shape,
                &l.params.to_string(),
                &l.share_ids.join(";"),
            ])
            .map_err(err)?;
        }
        w.write_record(["total", "", "", &self.total_params.to_string(), ""])
            .map_err(err)?;
        w.flush()
            .map_err(|e| Error::format("summary", e.to_string()))
    }
}

pub fn count_params(model: &Model) -> ModelSummary {
    ModelSummary {
        layers: model.layers.iter().map(|s| s.summary.clone()).collect(),
        total_params: model.store.num_scalars(),
    }
}

/// A built network mapping frame sequences `(T, 1, 32, 32)` to per-frame
/// class probabilities `(T, n + 1)`. The convolutional part runs on every
/// frame independently; recurrent layers run along the frame axis.
#[derive(Debug)]
pub struct Model {
    config: ModelConfig,
    arch: ArchFile,
    layers: Vec<Slot>,
    store: ParamStore,
}

struct Resolver<'a> {
    cfg: &'a ModelConfig,
    arch: &'a ArchFile,
}

impl Resolver<'_> {
    fn size(&self, s: &Size) -> Result<usize> {
        let d = &self.arch.defaults;
        match s {
            Size::Fixed(n) => Ok(*n),
            Size::Var(v) => match v.as_str() {
                "blstm_units" => Ok(self.cfg.blstm_units.unwrap_or(d.blstm_units)),
                "gcnn_max_channels" => {
                    Ok(self.cfg.gcnn_max_channels.unwrap_or(d.gcnn_max_channels))
                }
                other => Err(Error::Config(format!("unknown size variable ${other}"))),
            },
        }
    }

    fn gate(&self, channels: usize) -> GateSpec {
        let d = &self.arch.defaults;
        GateSpec {
            channels,
            gate_norm: self.cfg.gate_norm.unwrap_or(d.gate_norm),
            feature_norm: self.cfg.feature_norm.unwrap_or(d.feature_norm),
            swap_activations: self.cfg.swap_activations,
        }
    }
}

pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Model::build(cfg)
}

impl Model {
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let arch = ArchFile::resolve(&cfg.arch)?;
        Self::build_with_arch(cfg, arch)
    }

    pub fn build_with_arch(cfg: &ModelConfig, arch: ArchFile) -> Result<Self> {
        cfg.validate()?;
        let decls = layer_list(cfg, &arch)?;
        let r = Resolver { cfg, arch: &arch };
        let dropout = cfg.dropout.unwrap_or(arch.defaults.dropout);
        let mut store = ParamStore::new();
        let mut slots = Vec::with_capacity(decls.len());
        {
            let mut b = Builder::new(&mut store, cfg.init_seed);
            let mut shape = Shape::Map(1, LINE_HEIGHT, LINE_HEIGHT);
            let mut taps: Vec<Shape> = Vec::new();
            for (i, decl) in decls.iter().enumerate() {
                let name = format!("l{i:02}");
                let before = b.store.num_scalars();
                let mut shares = Vec::new();
                let (layer, kind) = match decl {
                    LayerDecl::Conv {
                        out,
                        kernel,
                        separable,
                        share,
                        relu,
                        bias,
                    } => {
                        let c = shape.channels("conv")?;
                        let o = r.size(out)?;
                        let mut spec = ConvSpec::new(c, o)
                            .kernel(*kernel, *kernel)
                            .separable(*separable)
                            .bias(*bias);
                        if let Some(s) = share {
                            spec = spec.shared(s.clone());
                            shares.push(s.clone());
                        }
                        let conv = Conv2d::new(&mut b, &name, spec)?;
                        if let Shape::Map(_, h, w) = shape {
                            shape = Shape::Map(o, h, w);
                        }
                        (
                            Layer::Conv { conv, relu: *relu },
                            if *separable { "sep_conv" } else { "conv" },
                        )
                    }
                    LayerDecl::Pool { size } => {
                        let Shape::Map(c, h, w) = shape else {
                            return Err(Error::Config(
                                "pool cannot follow a dense or recurrent layer".into(),
                            ));
                        };
                        if h < *size || w < *size {
                            return Err(Error::Config(format!(
                                "{name}: pooling a {h}x{w} map by {size}"
                            )));
                        }
                        shape = Shape::Map(c, h / size, w / size);
                        (
                            Layer::Pool(MaxPool2d {
                                window: (*size, *size),
                                stride: (*size, *size),
                            }),
                            "pool",
                        )
                    }
                    LayerDecl::Dropout { rate } => {
                        (Layer::Dropout(rate.unwrap_or(dropout)), "dropout")
                    }
                    LayerDecl::Tap => {
                        shape.channels("tap")?;
                        taps.push(shape);
                        (Layer::Tap, "tap")
                    }
                    LayerDecl::Fuse { out } => {
                        let Shape::Map(c, h, w) = shape else {
                            return Err(Error::Config(
                                "fuse cannot follow a dense or recurrent layer".into(),
                            ));
                        };
                        let mut total = c;
                        let mut factors = Vec::with_capacity(taps.len());
                        for t in taps.drain(..) {
                            let Shape::Map(tc, th, tw) = t else {
                                unreachable!("taps are maps")
                            };
                            if th % h != 0 || tw % w != 0 || th / h != tw / w {
                                return Err(Error::Config(format!(
                                    "{name}: cannot bring a {th}x{tw} tap down to {h}x{w}"
                                )));
                            }
                            factors.push(th / h);
                            total += tc;
                        }
                        let o = r.size(out)?;
                        let conv = Conv2d::new(&mut b, &name, ConvSpec::pointwise(total, o))?;
                        shape = Shape::Map(o, h, w);
                        (Layer::Fuse { conv, factors }, "fuse")
                    }
                    LayerDecl::GateBlock {
                        channels,
                        tap,
                        separable,
                        share,
                        double,
                    } => {
                        let c = shape.channels("gateblock")?;
                        let k = r.size(channels)?;
                        let expand = Conv2d::new(
                            &mut b,
                            &format!("{name}.expand"),
                            ConvSpec::new(c, 2 * k),
                        )?;
                        let gate_in = Gate::new(&mut b, &format!("{name}.gate_in"), r.gate(2 * k))?;
                        let mut inner_spec = ConvSpec::new(k, 2 * k).separable(*separable);
                        let mut second_spec = ConvSpec::new(2 * k, 2 * k).separable(*separable);
                        if let Some(s) = share {
                            inner_spec = inner_spec.shared(s.clone());
                            second_spec = second_spec.shared(format!("{s}2"));
                            shares.push(s.clone());
                            if *double {
                                shares.push(format!("{s}2"));
                            }
                        }
                        let mut inner =
                            vec![Conv2d::new(&mut b, &format!("{name}.inner"), inner_spec)?];
                        if *double {
                            inner.push(Conv2d::new(
                                &mut b,
                                &format!("{name}.inner2"),
                                second_spec,
                            )?);
                        }
                        let gate_out =
                            Gate::new(&mut b, &format!("{name}.gate_out"), r.gate(2 * k))?;
                        if let Shape::Map(_, h, w) = shape {
                            shape = Shape::Map(k, h, w);
                        }
                        if *tap {
                            taps.push(shape);
                        }
                        (
                            Layer::GateBlock {
                                expand,
                                gate_in,
                                inner,
                                gate_out,
                                tap: *tap,
                            },
                            "gateblock",
                        )
                    }
                    LayerDecl::Dense { units, relu } => {
                        let u = r.size(units)?;
                        let dense = Dense::new(&mut b, &name, shape.flat(), u, true)?;
                        shape = Shape::Flat(u);
                        (Layer::Dense { dense, relu: *relu }, "dense")
                    }
                    LayerDecl::Blstm { units } => {
                        let u = r.size(units)?;
                        let blstm = Blstm::new(&mut b, &name, shape.flat(), u)?;
                        shape = Shape::Flat(2 * u);
                        (Layer::Blstm(blstm), "blstm")
                    }
                    LayerDecl::Output => {
                        // starts from uniform class probabilities
                        let n = cfg.vocab_size + 1;
                        let dense = Dense::zeroed(&mut b, &name, shape.flat(), n)?;
                        shape = Shape::Flat(n);
                        (Layer::Output(dense), "output")
                    }
                };
                let summary = LayerSummary {
                    layer: name,
                    kind,
                    shape: shape.dims(),
                    params: b.store.num_scalars() - before,
                    share_ids: shares,
                };
                slots.push(Slot { layer, summary });
            }
            if !taps.is_empty() {
                return Err(Error::Config("tapped feature maps are never fused".into()));
            }
        }
        Ok(Self {
            config: cfg.clone(),
            arch,
            layers: slots,
            store,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> &ArchFile {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn params(&self) -> &[Param] {
        self.store.params()
    }

    pub fn num_classes(&self) -> usize {
        self.config.vocab_size + 1
    }

    pub fn summary(&self) -> ModelSummary {
        count_params(self)
    }

    /// Runs a batch of frame sequences and returns one `(T_i, n + 1)`
    /// probability node per sequence.
    pub fn forward(&self, g: &mut Graph, batch: &[&Tensor]) -> Result<Vec<Var>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut lengths = Vec::with_capacity(batch.len());
        for f in batch {
            let s = f.shape();
            if s.len() != 4 || s[1] != 1 || s[2] != LINE_HEIGHT || s[3] != LINE_HEIGHT {
                return Err(Error::shape(
                    "model input",
                    s,
                    &[0, 1, LINE_HEIGHT, LINE_HEIGHT],
                ));
            }
            lengths.push(s[0]);
        }
        let input = if batch.len() == 1 {
            batch[0].clone()
        } else {
            Tensor::concat(batch, 0)?
        };
        // ink-positive input: background pixels enter as 0
        let mut x = g.input(input.map(|p| 1.0 - p));
        let mut taps: Vec<Var> = Vec::new();
        for slot in &self.layers {
            x = match &slot.layer {
                Layer::Conv { conv, relu } => {
                    let y = conv.forward(g, x)?;
                    if *relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Pool(p) => p.forward(g, x)?,
                Layer::Dropout(rate) => g.dropout(x, *rate)?,
                Layer::Tap => {
                    taps.push(x);
                    x
                }
                Layer::Fuse { conv, factors } => {
                    let mut parts = Vec::with_capacity(taps.len() + 1);
                    for (t, &f) in taps.drain(..).zip(factors) {
                        parts.push(if f > 1 {
                            g.maxpool2d(t, (f, f), (f, f))?
                        } else {
                            t
                        });
                    }
                    parts.push(x);
                    let cat = g.concat(&parts, 1)?;
                    let y = conv.forward(g, cat)?;
                    g.relu(y)
                }
                Layer::GateBlock {
                    expand,
                    gate_in,
                    inner,
                    gate_out,
                    tap,
                } => {
                    let mut y = expand.forward(g, x)?;
                    y = gate_in.forward(g, y)?;
                    for conv in inner {
                        y = conv.forward(g, y)?;
                    }
                    y = gate_out.forward(g, y)?;
                    if *tap {
                        taps.push(y);
                    }
                    y
                }
                Layer::Dense { dense, relu } => {
                    let flat = flatten(g, x)?;
                    let y = dense.forward(g, flat)?;
                    if *relu {
                        g.relu(y)
                    } else {
                        y
                    }
                }
                Layer::Blstm(blstm) => {
                    let flat = flatten(g, x)?;
                    let d = g.shape(flat)[1];
                    let mut outs = Vec::with_capacity(lengths.len());
                    let mut offset = 0;
                    for &t in &lengths {
                        let seg = g.narrow(flat, 0, offset, t)?;
                        let seq = g.reshape(seg, &[t, 1, d])?;
                        let y = blstm.forward(g, seq)?;
                        outs.push(g.reshape(y, &[t, 2 * blstm.units()])?);
                        offset += t;
                    }
                    g.concat(&outs, 0)?
                }
                Layer::Output(dense) => {
                    let flat = flatten(g, x)?;
                    let logits = dense.forward(g, flat)?;
                    let probs = g.softmax(logits, 1)?;
                    let mut out = Vec::with_capacity(lengths.len());
                    let mut offset = 0;
                    for &t in &lengths {
                        out.push(g.narrow(probs, 0, offset, t)?);
                        offset += t;
                    }
                    return Ok(out);
                }
            };
        }
        Err(Error::Config("layer list has no output layer".into()))
    }

    /// Eval-mode probabilities for one frame sequence.
    pub fn predict(&self, frames: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(Mode::Eval, 0);
        let out = self.forward(&mut g, &[frames])?;
        Ok(g.value(out[0]).clone())
    }

    /// Parameters, normalization statistics, the model config and the
    /// architecture text.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::from_store(&self.store);
        let model = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        ckpt.meta.insert(META_MODEL.into(), model);
        ckpt.meta.insert(META_ARCH.into(), self.arch.text.clone());
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::Corrupt(format!("checkpoint lacks {k:?} metadata")))
        };
        let cfg: ModelConfig = toml::from_str(get(META_MODEL)?)
            .map_err(|e| Error::format("checkpoint", e.message().to_string()))?;
        let arch = ArchFile::parse(get(META_ARCH)?)?;
        let model = Self::build_with_arch(&cfg, arch)?;
        ckpt.apply_to(&model.store)?;
        Ok(model)
    }
}

fn flatten(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() == 2 {
        return Ok(x);
    }
    g.reshape(x, &[s[0], s[1..].iter().product()])
}

/// The variant's layer list after ablation and GateBlock truncation.
fn layer_list(cfg: &ModelConfig, arch: &ArchFile) -> Result<Vec<LayerDecl>> {
    let mut decls = ablate_layers(arch.layers(cfg.variant), cfg.ablation);
    let available = decls
        .iter()
        .filter(|d| matches!(d, LayerDecl::GateBlock { .. }))
        .count();
    let wanted = match cfg.gate_blocks {
        Some(n) if n > available => {
            return Err(Error::Config(format!(
                "{n} gate blocks requested but the {} layer list has {available}",
                cfg.variant.name()
            )))
        }
        Some(n) => n,
        None => arch.defaults.gate_blocks.min(available),
    };
    let mut seen = 0;
    decls.retain(|d| {
        if matches!(d, LayerDecl::GateBlock { .. }) {
            seen += 1;
            seen <= wanted
        } else {
            true
        }
    });
    Ok(decls)
}

/// Totals for every variant and ablation of an architecture, keyed by label.
pub fn parameter_table(arch: &ArchFile, vocab_size: usize) -> Result<BTreeMap<String, usize>> {
    let mut out = BTreeMap::new();
    for v in Variant::ALL {
        let cfg = ModelConfig::new(v, vocab_size);
        out.insert(
            v.name().to_string(),
            Model::build_with_arch(&cfg, arch.clone())?
                .summary()
                .total_params,
        );
    }
    for a in super::Ablation::ALL {
        let cfg = super::apply_ablation(&ModelConfig::new(Variant::Gcnn, vocab_size), a)?;
        out.insert(
            a.name().to_string(),
            Model::build_with_arch(&cfg, arch.clone())?
                .summary()
                .total_params,
        );
    }
    Ok(out)
}
