//! Adam, the CTC training loop, evaluation and dataset generation.

mod data;
mod optim;

pub use data::{
    check_coverage, load_samples, prepare, synth_samples, write_dataset, Prepared, SynthOptions,
};
pub use optim::{adam_step, OptimState};

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    derive_seed, expand_training_set, AugmentConfig, GridConfig, LabeledSample, Manifest,
};
use crate::ctc::{best_path_decode, ctc_loss_node, Vocabulary};
use crate::error::{Error, Result};
use crate::metrics::{corpus_cer, EpochRecord, RunRecord};
use crate::models::{Model, ModelConfig};
use crate::tensor::{Checkpoint, Graph, Mode, Var};

const META_VOCAB: &str = "vocab";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub train_manifest: PathBuf,
    /// Defaults to the training manifest.
    #[serde(default)]
    pub val_manifest: Option<PathBuf>,
    #[serde(default)]
    pub test_manifest: Option<PathBuf>,
    /// Explicit symbol list; by default the sorted symbols of all manifests.
    #[serde(default)]
    pub vocabulary: Option<String>,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub seed: u64,
    /// Materialize the seven-fold augmented training set before training.
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub augment_config: AugmentConfig,
    #[serde(default)]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this many epochs without a new best validation CER.
    #[serde(default)]
    pub patience: Option<usize>,
    /// Stop once validation CER (percent) drops below this value.
    #[serde(default)]
    pub target_cer: Option<f64>,
    #[serde(default)]
    pub optimizer: OptimState,
}

fn default_batch_size() -> usize {
    8
}

fn default_max_epochs() -> usize {
    100
}

impl TrainConfig {
    pub fn new(model: ModelConfig, train_manifest: impl Into<PathBuf>) -> Self {
        Self {
            model,
            train_manifest: train_manifest.into(),
            val_manifest: None,
            test_manifest: None,
            vocabulary: None,
            batch_size: default_batch_size(),
            max_epochs: default_max_epochs(),
            seed: 0,
            augment: false,
            augment_config: AugmentConfig::default(),
            grid: None,
            checkpoint_dir: None,
            patience: None,
            target_cer: None,
            optimizer: OptimState::default(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)
            .map_err(|e| Error::format("train config", e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a TOML file; relative paths inside it resolve against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        rebase(&mut cfg.train_manifest);
        cfg.val_manifest.as_mut().map(rebase);
        cfg.test_manifest.as_mut().map(rebase);
        cfg.checkpoint_dir.as_mut().map(rebase);
        if cfg.model.arch != "canonical" && cfg.model.arch != "smoke" {
            let mut arch = PathBuf::from(&cfg.model.arch);
            rebase(&mut arch);
            cfg.model.arch = arch.to_string_lossy().into_owned();
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if self.patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        if let Some(t) = self.target_cer {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::Config(format!("target_cer {t} must be positive")));
            }
        }
        self.optimizer.validate()?;
        self.augment_config.validate()?;
        if let Some(g) = &self.grid {
            g.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    Patience,
    TargetReached,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Model state after the last epoch.
    pub model: Model,
    pub vocab: Vocabulary,
    pub best_cer: f64,
    pub best_epoch: usize,
    pub stop: StopReason,
    /// Training samples per epoch, after augmentation.
    pub epoch_size: usize,
    /// Sample losses skipped because the label could not be aligned.
    pub skipped: usize,
    pub first_batch_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Percent.
    pub cer: f64,
    /// `(reference, hypothesis)` per line.
    pub lines: Vec<(String, String)>,
}

pub fn decode(model: &Model, vocab: &Vocabulary, sample: &Prepared) -> Result<String> {
    let probs = model.predict(&sample.frames)?;
    Ok(vocab.decode(&best_path_decode(&probs)))
}

pub fn evaluate(model: &Model, vocab: &Vocabulary, samples: &[Prepared]) -> Result<EvalReport> {
    if model.config().vocab_size != vocab.len() {
        return Err(Error::VocabularyMismatch(format!(
            "model has {} symbols, vocabulary {}",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let lines = samples
        .iter()
        .map(|s| Ok((s.text.clone(), decode(model, vocab, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        cer: corpus_cer(&lines)?,
        lines,
    })
}

pub fn save_checkpoint(model: &Model, vocab: &Vocabulary, path: impl AsRef<Path>) -> Result<()> {
    let mut ckpt = model.checkpoint()?;
    ckpt.meta.insert(META_VOCAB.into(), vocab.as_string());
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, Vocabulary)> {
    from_checkpoint(&Checkpoint::load(path)?)
}

pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, Vocabulary)> {
    let symbols = ckpt
        .meta
        .get(META_VOCAB)
        .ok_or_else(|| Error::Corrupt("checkpoint lacks a vocabulary".into()))?;
    let vocab = Vocabulary::new(symbols.chars())?;
    let model = Model::from_checkpoint(ckpt)?;
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Corrupt(
            "checkpoint vocabulary disagrees with its model".into(),
        ));
    }
    Ok((model, vocab))
}

/// Loads the manifests named by `cfg` and trains.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_m = Manifest::load(&cfg.train_manifest)?;
    let train_set = load_samples(&train_m)?;
    let val_set = match &cfg.val_manifest {
        Some(p) => load_samples(&Manifest::load(p)?)?,
        None => train_set.clone(),
    };
    train_on(cfg, &train_set, &val_set)
}

/// Builds the vocabulary for a run: explicit, or every symbol in `texts`.
pub fn run_vocabulary<'a>(
    cfg: &TrainConfig,
    texts: impl IntoIterator<Item = &'a str> + Clone,
) -> Result<Vocabulary> {
    let vocab = match &cfg.vocabulary {
        Some(s) => Vocabulary::new(s.chars())?,
        None => Vocabulary::from_texts(texts.clone()),
    };
    if vocab.is_empty() {
        return Err(Error::VocabularyMismatch(
            "no symbols in the training data".into(),
        ));
    }
    check_coverage(&vocab, texts)?;
    Ok(vocab)
}

/// Trains on in-memory samples; `val` is scored after every epoch.
pub fn train_on(
    cfg: &TrainConfig,
    train: &[LabeledSample],
    val: &[LabeledSample],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidArgument(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let texts = train.iter().chain(val).map(|s| s.text.as_str());
    let vocab = run_vocabulary(cfg, texts)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.vocab_size == 0 {
        model_cfg.vocab_size = vocab.len();
    } else if model_cfg.vocab_size != vocab.len() {
        return Err(Error::VocabularyMismatch(format!(
            "model expects {} symbols but the data has {}",
            model_cfg.vocab_size,
            vocab.len()
        )));
    }
    let model = Model::build(&model_cfg)?;

    let expanded;
    let train = if cfg.augment {
        expanded = expand_training_set(train, &cfg.augment_config)?;
        &expanded[..]
    } else {
        train
    };
    let train_set = prepare(train, &vocab, cfg.grid.as_ref())?;
    let val_set = prepare(val, &vocab, cfg.grid.as_ref())?;
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let mut optim = cfg.optimizer.clone();
    let mut record = RunRecord::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::INFINITY, 0usize);
    let mut skipped = 0;
    let mut first_batch_loss = f64::NAN;
    let mut history: Vec<f64> = Vec::new();
    let mut stop = StopReason::MaxEpochs;
    let start = Instant::now();

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            epoch as u64,
        )));
        let (mut loss_sum, mut loss_count) = (0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let graph_seed = derive_seed(cfg.seed ^ 0x5eed_0000, (epoch as u64) << 32 | b as u64);
            let mut g = Graph::new(Mode::Train, graph_seed);
            let batch: Vec<_> = chunk.iter().map(|&i| &train_set[i].frames).collect();
            let probs = model.forward(&mut g, &batch)?;
            let mut losses: Vec<Var> = Vec::with_capacity(chunk.len());
            for (&i, &p) in chunk.iter().zip(&probs) {
                match ctc_loss_node(&mut g, p, &train_set[i].label) {
                    Ok(l) => losses.push(l),
                    Err(Error::Unalignable {
                        required,
                        available,
                    }) => {
                        skipped += 1;
                        log::warn!(
                            "skipping {:?}: needs {required} frames, has {available}",
                            train_set[i].text
                        );
                    }
                    Err(e) => return Err(e),
                }
            }
            if losses.is_empty() {
                continue;
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = g.add(total, l)?;
            }
            let mean = g.scale(total, 1.0 / losses.len() as f64);
            let value = g.value(mean).item();
            history.push(value);
            if !value.is_finite() {
                let recent = &history[history.len().saturating_sub(10)..];
                return Err(Error::NonFinite(format!(
                    "training loss {value} at epoch {epoch}, batch {b}; recent batch losses {recent:?}"
                )));
            }
            if first_batch_loss.is_nan() {
                first_batch_loss = value;
            }
            g.backward(mean)?;
            adam_step(model.params(), &mut optim)?;
            loss_sum += value * losses.len() as f64;
            loss_count += losses.len();
        }
        if loss_count == 0 {
            return Err(Error::InvalidArgument(
                "no training sample can be aligned to its frames".into(),
            ));
        }
        let report = evaluate(&model, &vocab, &val_set)?;
        let mut secs = start.elapsed().as_secs_f64();
        if let Some(last) = record.epochs().last() {
            secs = secs.max(last.cum_seconds + 1e-9);
        }
        record.push(EpochRecord {
            epoch,
            cum_seconds: secs,
            train_loss: loss_sum / loss_count as f64,
            val_cer: report.cer,
        })?;
        log::info!(
            "epoch {epoch}: loss {:.4}, validation CER {:.2}%",
            loss_sum / loss_count as f64,
            report.cer
        );
        if report.cer < best.0 {
            best = (report.cer, epoch);
            if let Some(dir) = &cfg.checkpoint_dir {
                save_checkpoint(&model, &vocab, dir.join("best.ckpt"))?;
            }
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            record.save(dir.join("run.csv"))?;
        }
        if cfg.target_cer.is_some_and(|t| report.cer < t) {
            stop = StopReason::TargetReached;
            break;
        }
        if cfg.patience.is_some_and(|p| epoch - best.1 >= p) {
            stop = StopReason::Patience;
            break;
        }
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&model, &vocab, dir.join("last.ckpt"))?;
    }
    Ok(TrainOutcome {
        record,
        model,
        vocab,
        best_cer: best.0,
        best_epoch: best.1,
        stop,
        epoch_size: train_set.len(),
        skipped,
        first_batch_loss,
    })
}
