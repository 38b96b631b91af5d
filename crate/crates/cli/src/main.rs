use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use htr_core::augment::{
    add_grid_background, augment_sample, AugmentConfig, GridConfig, GridOrientation, LabeledSample,
    Manifest, Synthesizer, Transform,
};
use htr_core::ctc::Vocabulary;
use htr_core::models::{parameter_table, Ablation, ArchFile, Model, ModelConfig, Variant};
use htr_core::preprocess::{read_pgm, write_pgm};
use htr_core::train::{
    check_coverage, evaluate, load_checkpoint, load_samples, prepare, synth_samples, train,
    write_dataset, EvalReport, SynthOptions, TrainConfig,
};
use htr_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "htr",
    version,
    about = "Line-level handwriting recognition with CTC"
)]
struct Cli {
    /// Log verbosity when RUST_LOG is unset.
    #[arg(long, global = true, default_value = "info")]
    log_level: log::LevelFilter,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from manifests.
    Train(TrainArgs),
    /// Score a checkpoint on a manifest.
    Evaluate(EvaluateArgs),
    /// Export the per-layer parameter table of a model.
    Summarize(SummarizeArgs),
    /// Render a synthetic dataset of PGM files plus a manifest.
    SynthDataset(SynthArgs),
    /// Write every augmentation of one line image.
    AugmentPreview(PreviewArgs),
}

#[derive(Args, Clone, Default)]
struct GridArgs {
    /// Composite a ruled background under the ink.
    #[arg(long)]
    grid: bool,
    #[arg(long, requires = "grid")]
    grid_spacing: Option<usize>,
    #[arg(long, requires = "grid")]
    grid_intensity: Option<f64>,
    /// Add vertical rules as well.
    #[arg(long, requires = "grid")]
    grid_both: bool,
}

impl GridArgs {
    fn config(&self, base: Option<GridConfig>) -> Option<GridConfig> {
        if !self.grid {
            return base;
        }
        let mut g = base.unwrap_or_default();
        if let Some(s) = self.grid_spacing {
            g.line_spacing_px = s;
        }
        if let Some(i) = self.grid_intensity {
            g.line_intensity = i;
        }
        if self.grid_both {
            g.orientation = GridOrientation::Both;
        }
        Some(g)
    }
}

#[derive(Args)]
struct TrainArgs {
    /// TOML training config; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    val_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    ablation: Option<Ablation>,
    /// `canonical`, `smoke` or an architecture file.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    vocabulary: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    augment: bool,
    #[command(flatten)]
    grid: GridArgs,
    /// Defaults to `htr-run`.
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    #[arg(long)]
    patience: Option<usize>,
    /// Stop once validation CER (percent) falls below this.
    #[arg(long)]
    target_cer: Option<f64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    grid: GridArgs,
    /// Per-line hypotheses; defaults to `hypotheses.tsv` beside the checkpoint.
    #[arg(long)]
    hypotheses: Option<PathBuf>,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long, default_value = "gcnn")]
    variant: Variant,
    #[arg(long, default_value = "none")]
    ablation: Ablation,
    #[arg(long, default_value = "canonical")]
    arch: String,
    #[arg(long, default_value_t = 100)]
    vocab_size: usize,
    #[arg(long)]
    blstm_units: Option<usize>,
    #[arg(long)]
    gcnn_max_channels: Option<usize>,
    #[arg(long)]
    gate_blocks: Option<usize>,
    /// Totals for every variant and ablation instead of one layer table.
    #[arg(long)]
    all: bool,
    /// Output CSV; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    count: usize,
    /// Symbols to draw from.
    #[arg(long)]
    vocab: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 3)]
    min_len: usize,
    #[arg(long, default_value_t = 10)]
    max_len: usize,
    /// Write the seven-fold augmented set.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct PreviewArgs {
    /// Binary PGM line image.
    #[arg(long, conflicts_with = "text")]
    input: Option<PathBuf>,
    /// Render this text synthetically instead of reading an image.
    #[arg(long)]
    text: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    grid: GridArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("error[argument]: {}", e.kind());
            let _ = e.print();
            return ExitCode::from(exit_code("argument"));
        }
    };
    env_logger::Builder::new()
        .filter_level(cli.log_level)
        .parse_default_env()
        .format_timestamp(None)
        .init();
    let result = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Summarize(a) => cmd_summarize(a),
        Command::SynthDataset(a) => cmd_synth(a),
        Command::AugmentPreview(a) => cmd_preview(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(e.category()))
        }
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "argument" => 2,
        "config" => 3,
        "format" => 4,
        "io" => 5,
        "vocabulary" => 6,
        "unalignable" => 7,
        "numeric" => 8,
        "shape" => 9,
        "graph" => 10,
        "corrupt" => 11,
        _ => 1,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    Ok(BufWriter::new(
        File::create(path).map_err(|e| io_err(path, e))?,
    ))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::load(p)?,
        None => {
            let manifest = a.train_manifest.clone().ok_or_else(|| {
                Error::InvalidArgument("either --config or --train-manifest is required".into())
            })?;
            let variant = a.variant.ok_or_else(|| {
                Error::InvalidArgument("--variant is required without --config".into())
            })?;
            TrainConfig::new(ModelConfig::new(variant, 0), manifest)
        }
    };
    if let Some(p) = &a.train_manifest {
        cfg.train_manifest = p.clone();
    }
    if a.val_manifest.is_some() {
        cfg.val_manifest = a.val_manifest.clone();
    }
    if a.test_manifest.is_some() {
        cfg.test_manifest = a.test_manifest.clone();
    }
    if let Some(v) = a.variant {
        cfg.model.variant = v;
    }
    if let Some(ab) = a.ablation {
        cfg.model.ablation = ab;
    }
    if let Some(arch) = &a.arch {
        cfg.model.arch = arch.clone();
    }
    if a.vocabulary.is_some() {
        cfg.vocabulary = a.vocabulary.clone();
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(e) = a.max_epochs {
        cfg.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(lr) = a.lr {
        cfg.optimizer.lr = lr;
    }
    cfg.augment |= a.augment;
    cfg.grid = a.grid.config(cfg.grid.take());
    if a.checkpoint_dir.is_some() {
        cfg.checkpoint_dir = a.checkpoint_dir.clone();
    }
    if cfg.checkpoint_dir.is_none() {
        cfg.checkpoint_dir = Some(PathBuf::from("htr-run"));
    }
    if a.patience.is_some() {
        cfg.patience = a.patience;
    }
    if a.target_cer.is_some() {
        cfg.target_cer = a.target_cer;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a)?;
    let dir = cfg
        .checkpoint_dir
        .clone()
        .expect("checkpoint_dir is always set");
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let cfg_path = dir.join("config.toml");
    std::fs::write(&cfg_path, cfg.to_toml()?).map_err(|e| io_err(&cfg_path, e))?;

    let outcome = train(&cfg)?;
    println!("stop: {:?}", outcome.stop);
    println!("epochs: {}", outcome.record.epochs().len());
    println!("best_val_cer: {:.4}", outcome.best_cer);
    println!("best_epoch: {}", outcome.best_epoch);
    if let Some(t) = outcome.record.epochs().last() {
        println!("seconds: {:.3}", t.cum_seconds);
    }
    if outcome.skipped > 0 {
        println!("skipped_unalignable: {}", outcome.skipped);
    }
    println!("run_record: {}", dir.join("run.csv").display());

    if let Some(test) = &cfg.test_manifest {
        let (model, vocab) = load_checkpoint(dir.join("best.ckpt"))?;
        let manifest = Manifest::load(test)?;
        let report = score(&model, &vocab, &manifest, cfg.grid.as_ref())?;
        let hyp = dir.join("test_hypotheses.tsv");
        write_hypotheses(&hyp, &manifest, &report)?;
        println!("test_cer: {:.4}", report.cer);
        println!("hypotheses: {}", hyp.display());
    }
    Ok(())
}

fn score(
    model: &Model,
    vocab: &Vocabulary,
    manifest: &Manifest,
    grid: Option<&GridConfig>,
) -> Result<EvalReport> {
    check_coverage(vocab, manifest.texts())?;
    let samples = load_samples(manifest)?;
    let prepared = prepare(&samples, vocab, grid)?;
    evaluate(model, vocab, &prepared)
}

fn write_hypotheses(path: &Path, manifest: &Manifest, report: &EvalReport) -> Result<()> {
    let mut w = create(path)?;
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "path\treference\thypothesis")?;
        for (entry, (reference, hyp)) in manifest.entries.iter().zip(&report.lines) {
            writeln!(w, "{}\t{reference}\t{hyp}", entry.path.display())?;
        }
        w.flush()
    };
    emit().map_err(|e| io_err(path, e))
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let (model, vocab) = load_checkpoint(&a.checkpoint)?;
    let manifest = Manifest::load(&a.manifest)?;
    let report = score(&model, &vocab, &manifest, a.grid.config(None).as_ref())?;
    let hyp = a.hypotheses.unwrap_or_else(|| {
        a.checkpoint
            .parent()
            .unwrap_or(Path::new(""))
            .join("hypotheses.tsv")
    });
    write_hypotheses(&hyp, &manifest, &report)?;
    println!("cer: {:.4}", report.cer);
    println!("lines: {}", report.lines.len());
    println!("hypotheses: {}", hyp.display());
    Ok(())
}

fn cmd_summarize(a: SummarizeArgs) -> Result<()> {
    let arch = ArchFile::resolve(&a.arch)?;
    let mut out: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let target = a.out.clone().unwrap_or_else(|| PathBuf::from("<stdout>"));
    if a.all {
        let table = parameter_table(&arch, a.vocab_size)?;
        let mut emit = || -> std::io::Result<()> {
            writeln!(out, "model,params")?;
            for (name, total) in &table {
                writeln!(out, "{name},{total}")?;
            }
            out.flush()
        };
        return emit().map_err(|e| io_err(&target, e));
    }
    let cfg = ModelConfig {
        ablation: a.ablation,
        arch: a.arch.clone(),
        blstm_units: a.blstm_units,
        gcnn_max_channels: a.gcnn_max_channels,
        gate_blocks: a.gate_blocks,
        ..ModelConfig::new(a.variant, a.vocab_size)
    };
    let model = Model::build_with_arch(&cfg, arch)?;
    model.summary().write_csv(&mut out)?;
    out.flush().map_err(|e| io_err(&target, e))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let vocab = Vocabulary::new(a.vocab.chars())?;
    let opts = SynthOptions {
        count: a.count,
        min_len: a.min_len,
        max_len: a.max_len,
        seed: a.seed,
        augment: a.augment.then(|| AugmentConfig {
            seed: a.seed,
            ..AugmentConfig::default()
        }),
    };
    let samples = synth_samples(&vocab, &opts)?;
    let manifest = write_dataset(&samples, &a.out_dir)?;
    println!("samples: {}", manifest.len());
    println!("manifest: {}", a.out_dir.join("manifest.tsv").display());
    Ok(())
}

fn cmd_preview(a: PreviewArgs) -> Result<()> {
    let sample = match (&a.input, &a.text) {
        (Some(p), _) => LabeledSample {
            image: read_pgm(p)?,
            text: String::new(),
        },
        (None, Some(t)) => {
            let vocab = Vocabulary::from_texts([t.as_str()]);
            Synthesizer::new(vocab, a.seed)?.synth_line(t, a.seed)?
        }
        (None, None) => return Err(Error::InvalidArgument("pass --input or --text".into())),
    };
    std::fs::create_dir_all(&a.out_dir).map_err(|e| io_err(&a.out_dir, e))?;
    write_pgm(a.out_dir.join("original.pgm"), &sample.image)?;
    let cfg = AugmentConfig {
        seed: a.seed,
        ..AugmentConfig::default()
    };
    for t in Transform::ALL {
        let out = augment_sample(&sample, t, &cfg)?;
        write_pgm(
            a.out_dir.join(format!("{}_{}.pgm", t.id(), t.name())),
            &out.image,
        )?;
    }
    let grid = a.grid.config(None).unwrap_or_default();
    write_pgm(
        a.out_dir.join("grid.pgm"),
        &add_grid_background(&sample.image, &grid)?,
    )?;
    println!(
        "wrote {} images to {}",
        Transform::ALL.len() + 2,
        a.out_dir.display()
    );
    Ok(())
}
