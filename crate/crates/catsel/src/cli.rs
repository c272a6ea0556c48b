//! The `catsel` command line.

use std::ffi::OsString;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use catsel_core::chat::MaskStrategy;
use catsel_core::rollout::RolloutVariant;
use catsel_core::synth::SynthConfig;
use catsel_core::train::{Attachment, EpochLog};
use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Checkpoint};
use crate::config::{resolve_output, RunConfig};
use crate::dataset::{self, generate_dataset, LoadedDataset, Manifest};
use crate::error::{exit, Error, FormatError, Result};
use crate::orchestrate::{ablate, export_weights, refine_run, train_run, AblationResult, Axis, RefineResult, RunResult};

#[derive(Parser, Debug)]
#[command(name = "catsel", version, about = "Channel selection with aggregation-token transformers")]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with planted channels and write its 8:1:1 splits.
    Generate(GenerateArgs),
    /// Train over every configured seed and report mean ± std test accuracy.
    Train(RunArgs),
    /// Sweep one selector hyperparameter and emit a comparison table.
    Ablate(AblateArgs),
    /// Retrain on the top-k channels of a previous run and score the selection.
    Refine(RefineArgs),
    /// Export the channel-weight table and heat map of a checkpoint.
    ExportWeights(ExportArgs),
    /// Print the header of a dataset, manifest, checkpoint or result file.
    Inspect(InspectArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Output directory (relative paths resolve under $CATSEL_OUTPUT_ROOT).
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    planted: Option<usize>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    len: Option<usize>,
    #[arg(long)]
    fs: Option<u32>,
    /// Planted-channel SNR in dB, or "inf".
    #[arg(long)]
    snr_db: Option<f64>,
    #[arg(long)]
    per_class: Option<usize>,
    #[arg(long)]
    base_freq: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct RunArgs {
    /// TOML run config, or a result JSON whose embedded config is reused.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// "chat+classifier" or "classifier_only".
    #[arg(long)]
    attachment: Option<String>,
    /// aro_h, aro_avg or no_aro.
    #[arg(long)]
    variant: Option<String>,
    /// a, b or c.
    #[arg(long)]
    mask: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// Initialize the selector from this checkpoint.
    #[arg(long)]
    init_from: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_enum)]
    axis: Axis,
    /// Comma-separated axis values; the standard grid when omitted.
    #[arg(long, value_delimiter = ',')]
    values: Option<Vec<String>>,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct RefineArgs {
    /// result.json of a completed chat+classifier training run.
    #[arg(long)]
    prior: Option<PathBuf>,
    #[arg(long)]
    k: usize,
    /// Comma-separated reference channel ids; defaults to the planted set when it has k entries.
    #[arg(long, value_delimiter = ',')]
    reference: Option<Vec<usize>>,
    /// Retrain with the selector attached instead of the classifier alone.
    #[arg(long)]
    reattach: bool,
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Args, Debug)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value = "weights")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct InspectArgs {
    path: PathBuf,
}

/// Parses `argv` and runs the command; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { exit::USAGE } else { exit::OK };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => exit::OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(a) => cmd_generate(a),
        Command::Train(a) => cmd_train(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Refine(a) => cmd_refine(a),
        Command::ExportWeights(a) => cmd_export(a),
        Command::Inspect(a) => cmd_inspect(&a.path),
    }
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let d = SynthConfig::desk(a.seed);
    let cfg = SynthConfig {
        channels: a.channels.unwrap_or(d.channels),
        planted: a.planted.unwrap_or(d.planted),
        classes: a.classes.unwrap_or(d.classes),
        len: a.len.unwrap_or(d.len),
        fs: a.fs.unwrap_or(d.fs),
        snr_db: a.snr_db.unwrap_or(d.snr_db),
        samples_per_class: a.per_class.unwrap_or(d.samples_per_class),
        base_freq: a.base_freq.unwrap_or(d.base_freq),
        ..d
    };
    cfg.validate()?;
    let out = resolve_output(&a.out);
    let meta = generate_dataset(&out, &cfg)?;
    println!("wrote {} ({} segments, planted channels {:?})", out.display(), cfg.total(), meta.planted.unwrap_or_default());
    Ok(())
}

fn parse_attachment(s: &str) -> Result<Attachment> {
    Ok(Attachment::parse(s)?)
}

/// File values first, then flags; the result is resolved and validated.
fn build_config(a: &RunArgs, base: Option<RunConfig>) -> Result<RunConfig> {
    let mut cfg = match (&a.config, base) {
        (Some(p), _) => RunConfig::load(p)?,
        (None, Some(b)) => b,
        (None, None) => RunConfig::default(),
    };
    if let Some(d) = &a.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &a.out {
        cfg.output = Some(o.clone());
    }
    if let Some(s) = &a.seeds {
        cfg.seeds = s.clone();
    }
    if let Some(s) = &a.attachment {
        let att = parse_attachment(s)?;
        if att != cfg.attachment {
            cfg.attachment = att;
            if a.config.is_none() {
                cfg.optim = None;
            }
        }
    }
    if let Some(v) = &a.variant {
        cfg.variant = RolloutVariant::parse(v)?;
    }
    if let Some(m) = &a.mask {
        cfg.chat.mask_strategy = MaskStrategy::parse(m)?;
    }
    if a.epochs.is_some() || a.max_lr.is_some() || a.batch_size.is_some() {
        let mut o = cfg.effective_optim();
        o.epochs = a.epochs.unwrap_or(o.epochs);
        o.max_lr = a.max_lr.unwrap_or(o.max_lr);
        o.batch_size = a.batch_size.unwrap_or(o.batch_size);
        cfg.optim = Some(o);
    }
    if let Some(j) = a.jobs {
        cfg.jobs = j;
    }
    if let Some(p) = &a.init_from {
        cfg.init_from = Some(p.clone());
    }
    cfg.resolve()
}

fn epoch_logger(quiet: bool) -> impl Fn(&EpochLog) + Sync {
    move |e: &EpochLog| {
        if !quiet {
            eprintln!(
                "seed {} epoch {} loss {:.4} val {:.3} lr {:.2e}{}",
                e.seed,
                e.epoch,
                e.train_loss,
                e.val_accuracy,
                e.lr,
                if e.skipped_batches > 0 { format!(" skipped {}", e.skipped_batches) } else { String::new() }
            )
        }
    }
}

fn load_dataset(cfg: &RunConfig) -> Result<LoadedDataset> {
    LoadedDataset::open(cfg.dataset_dir()?)
}

fn cmd_train(a: RunArgs) -> Result<()> {
    let cfg = build_config(&a, None)?;
    let ds = load_dataset(&cfg)?;
    let out = cfg.output_dir("runs/train");
    let rep = train_run(&cfg, &ds, &out, "train", &epoch_logger(a.quiet))?;
    let agg = &rep.result.aggregate;
    println!("attachment {} variant {}", cfg.attachment.name(), cfg.variant.name());
    for o in &agg.outcomes {
        println!("seed {}: test {:.2}% (best val {:.2}% at epoch {})", o.seed, 100.0 * o.test_accuracy, 100.0 * o.best_val_accuracy, o.best_epoch);
    }
    for (s, e) in &agg.failed {
        println!("seed {s}: failed ({e})");
    }
    println!("accuracy {} over {}/{} seeds", agg.cell(), agg.completed(), agg.seeds.len());
    println!("results in {}", rep.out_dir.display());
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let cfg = build_config(&a.run, None)?;
    let values = a.values.clone().unwrap_or_else(|| a.axis.default_values());
    let ds = load_dataset(&cfg)?;
    let out = cfg.output_dir(&format!("runs/ablate_{}", a.axis.name()));
    let res: AblationResult = ablate(&cfg, &ds, a.axis, &values, &out, &epoch_logger(a.run.quiet))?;
    print!("{}", res.table());
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<()> {
    let prior_path = a.prior.as_ref().ok_or_else(|| Error::Core(catsel_core::Error::Workflow("refine needs --prior <result.json> from a chat+classifier run".into())))?;
    let prior = RunResult::load(prior_path)?;
    let mut base = prior.config.clone();
    base.output = None;
    if a.run.config.is_none() {
        base.optim = None;
        base.attachment = if a.reattach { Attachment::ChatClassifier } else { Attachment::ClassifierOnly };
    }
    let mut cfg = build_config(&a.run, Some(base))?;
    if a.reattach && cfg.attachment != Attachment::ChatClassifier {
        cfg.attachment = Attachment::ChatClassifier;
        cfg = cfg.resolve()?;
    }
    let ds = load_dataset(&cfg)?;
    let reference = match (&a.reference, &ds.manifest.planted) {
        (Some(r), _) => Some(r.clone()),
        (None, Some(p)) if p.len() == a.k => Some(p.clone()),
        _ => None,
    };
    let out = cfg.output_dir("runs/refine");
    let res: RefineResult = refine_run(&cfg, &prior, &ds, a.k, reference.as_deref(), &out, &epoch_logger(a.run.quiet))?;
    print!("{}", res.table());
    Ok(())
}

fn cmd_export(a: ExportArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ds = LoadedDataset::open(&a.dataset)?;
    let out = resolve_output(&a.out);
    let (w, scores) = export_weights(ck, &ds, &a.split, &out)?;
    println!("{} channels x {} pairs written to {}", w.channels, w.pairs(), out.display());
    let top = catsel_core::rollout::top_k(&scores, scores.len().min(10))?;
    println!("highest scores: {top:?}");
    Ok(())
}

fn describe_manifest(path: &Path, m: &Manifest) {
    let source = match &m.source {
        dataset::Source::Synthetic { config } => format!("synthetic (seed {}, snr {} dB)", config.seed, config.snr_db),
        dataset::Source::External { tag } => format!("external ({tag})"),
        dataset::Source::Reduced { channels, .. } => format!("reduced to channels {channels:?}"),
    };
    println!("{}: split {} v{}", path.display(), m.split, m.format_version);
    println!("  source: {source}");
    println!("  geometry: {} channels x {} samples at {} Hz, {} classes", m.channels, m.len, m.fs, m.classes);
    println!("  samples: {} (train/val/test {}/{}/{})", m.records.len(), m.split_counts.train, m.split_counts.val, m.split_counts.test);
    if let Some(p) = &m.planted {
        println!("  planted: {p:?}");
    }
}

fn cmd_inspect(path: &Path) -> Result<()> {
    if path.is_dir() {
        let mut found = false;
        for split in dataset::SPLITS {
            let mp = dataset::manifest_path(path, split);
            if mp.exists() {
                found = true;
                let r = dataset::SplitReader::open(&mp)?;
                describe_manifest(&mp, &r.manifest);
            }
        }
        if !found {
            return Err(Error::Config(format!("{} holds no split manifests", path.display())));
        }
        return Ok(());
    }
    let mut head = [0u8; 4];
    let n = fs::File::open(path).and_then(|mut f| f.read(&mut head)).map_err(Error::io(path))?;
    if n == 4 && head == checkpoint::MAGIC {
        let h = Checkpoint::read_header(path)?;
        println!("{}: checkpoint v{}", path.display(), checkpoint::VERSION);
        println!("  seed {} epoch {} variant {}", h.seed, h.epoch, h.variant.name());
        if let Some(c) = &h.chat {
            println!(
                "  selector: {} layers, {} heads, {} CATs, d = {}, mask {}, {} channels",
                c.config.n_layers,
                c.config.n_heads,
                c.config.n_cat,
                c.config.token_dim,
                c.config.mask_strategy.name(),
                c.channels
            );
        }
        if let Some(k) = &h.classifier {
            println!("  classifier: {} inputs, {} classes, {} features", k.in_channels, k.n_classes, k.features());
        }
        let numel: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        println!("  tensors: {} ({} values)", h.tensors.len(), numel);
        return Ok(());
    }
    if n == 4 && head == dataset::MAGIC {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        if bytes.len() < dataset::HEADER_LEN as usize {
            return Err(FormatError::Truncated { path: path.into(), what: "header".into(), needed: dataset::HEADER_LEN, available: bytes.len() as u64 }.into());
        }
        println!("{}: sample blob v{}, {} bytes", path.display(), u16::from_le_bytes([bytes[4], bytes[5]]), bytes.len());
        return Ok(());
    }
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    if let Ok(m) = serde_json::from_str::<Manifest>(&text) {
        describe_manifest(path, &m);
        return Ok(());
    }
    if let Ok(r) = serde_json::from_str::<RunResult>(&text) {
        println!("{}: {} result, attachment {}, variant {}", path.display(), r.kind, r.config.attachment.name(), r.config.variant.name());
        println!("  accuracy {} over {}/{} seeds, {:.1} s", r.aggregate.cell(), r.aggregate.completed(), r.aggregate.seeds.len(), r.wall_time_s);
        return Ok(());
    }
    if let Ok(r) = serde_json::from_str::<AblationResult>(&text) {
        println!("{}: ablation over {}", path.display(), r.axis.name());
        print!("{}", r.table());
        return Ok(());
    }
    if let Ok(r) = serde_json::from_str::<RefineResult>(&text) {
        println!("{}: refinement", path.display());
        print!("{}", r.table());
        return Ok(());
    }
    Err(FormatError::Malformed { path: path.into(), detail: "not a catsel dataset, checkpoint or result file".into() }.into())
}
