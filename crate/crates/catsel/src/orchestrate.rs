//! Multi-seed runs, ablation sweeps and refinement on top of the core training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use catsel_core::chat::{ChatModel, MaskStrategy};
use catsel_core::optim::OptimConfig;
use catsel_core::rollout::{ChannelWeightMatrix, RolloutVariant};
use catsel_core::train::{
    aggregate, evaluate, prepare, pretrain_autoencoder, refine, train_supervised, Aggregate, Attachment, EpochLog,
    RefineOutcome, SeedOutcome, TrainData,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{write_reduced, LoadedDataset};
use crate::error::{Error, Result};
use crate::export::{mean_weights, scores_of, weight_table, write_weight_heatmap};

/// Metrics of a multi-seed run together with the configuration that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub kind: String,
    pub config: RunConfig,
    pub aggregate: Aggregate,
    pub wall_time_s: f64,
}

impl RunResult {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: not a run result: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("run result serializes");
        fs::write(path, text).map_err(Error::io(path))
    }
}

pub fn snapshot(cfg: &RunConfig) -> String {
    serde_json::to_string(cfg).expect("run config serializes")
}

/// Output of one seed: metrics, the selected checkpoint, and the test-set
/// averaged channel weights (selector attached only).
pub struct SeedArtifacts {
    pub outcome: SeedOutcome,
    pub checkpoint: Checkpoint,
    pub mean_weights: Option<ChannelWeightMatrix>,
}

fn run_one(run: &RunConfig, data: &TrainData<'_>, seed: u64, init: Option<&ChatModel>, log: &(dyn Fn(&EpochLog) + Sync)) -> Result<SeedArtifacts> {
    let cfg = run.train_config();
    let trained = train_supervised(&cfg, data, seed, init, &mut |e| log(e))?;
    let mut models = trained.models;
    let mean = if models.chat.is_some() {
        let test = data.test.iter().map(prepare).collect::<catsel_core::Result<Vec<_>>>()?;
        let ev = evaluate(&mut models, &test, cfg.optim.batch_size)?;
        if ev.weights.is_empty() { None } else { Some(mean_weights(&ev.weights)?) }
    } else {
        None
    };
    let checkpoint = Checkpoint::new(run.clone(), seed, trained.outcome.best_epoch, models);
    Ok(SeedArtifacts { outcome: trained.outcome, checkpoint, mean_weights: mean })
}

/// Trains every seed, `run.jobs` at a time; results keep the seed order.
pub fn run_seeds(
    run: &RunConfig,
    data: &TrainData<'_>,
    init: Option<&ChatModel>,
    log: &(dyn Fn(&EpochLog) + Sync),
) -> Vec<(u64, Result<SeedArtifacts>)> {
    let seeds = &run.seeds;
    let slots: Vec<Mutex<Option<Result<SeedArtifacts>>>> = seeds.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        if i >= seeds.len() {
            break;
        }
        let r = run_one(run, data, seeds[i], init, log);
        *slots[i].lock().expect("slot lock") = Some(r);
    };
    let jobs = run.jobs.clamp(1, seeds.len().max(1));
    if jobs == 1 {
        worker();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(&worker);
            }
        });
    }
    seeds
        .iter()
        .zip(slots)
        .map(|(&s, slot)| (s, slot.into_inner().expect("slot lock").expect("every seed ran")))
        .collect()
}

/// What a finished `train` wrote.
pub struct TrainReport {
    pub result: RunResult,
    pub out_dir: PathBuf,
    pub mean_weights: Option<ChannelWeightMatrix>,
}

fn train_data(ds: &LoadedDataset) -> TrainData<'_> {
    TrainData { train: &ds.train, val: &ds.val, test: &ds.test, classes: ds.manifest.classes }
}

fn selector_init(run: &RunConfig, ds: &LoadedDataset, out_dir: &Path) -> Result<Option<ChatModel>> {
    if let Some(p) = &run.pretrain {
        let pad_to = if p.pad_to == 0 { ds.manifest.channels } else { p.pad_to };
        let optim = OptimConfig { epochs: p.epochs, max_lr: p.max_lr, ..run.effective_optim() };
        let seed = run.seeds[0];
        let (model, losses) = pretrain_autoencoder(&run.chat, &ds.train, pad_to, &optim, seed)?;
        eprintln!("pretraining loss per epoch: {losses:?}");
        let ck = Checkpoint::from_parts(run.clone(), seed, p.epochs, run.variant, Some(model.clone()), None);
        ck.save(&out_dir.join("pretrained.ckpt"))?;
        return Ok(Some(model));
    }
    if let Some(path) = &run.init_from {
        let ck = Checkpoint::load(path)?;
        return ck.chat.map(Some).ok_or_else(|| Error::Config(format!("{} holds no selector", path.display())));
    }
    Ok(None)
}

/// Multi-seed training. Writes `result.json`, one checkpoint per seed and, with
/// the selector attached, `channel_weights.csv` and `channel_weights.png`.
pub fn train_run(run: &RunConfig, ds: &LoadedDataset, out_dir: &Path, kind: &str, log: &(dyn Fn(&EpochLog) + Sync)) -> Result<TrainReport> {
    let start = Instant::now();
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let init = selector_init(run, ds, out_dir)?;
    let results = run_seeds(run, &train_data(ds), init.as_ref(), log);
    let mut weights = Vec::new();
    let mut outcomes = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(a) => {
                a.checkpoint.save(&out_dir.join(format!("seed{seed}.ckpt")))?;
                weights.extend(a.mean_weights);
                outcomes.push((seed, Ok(a.outcome)));
            }
            Err(Error::Core(e)) => outcomes.push((seed, Err(e))),
            Err(e) => return Err(e),
        }
    }
    let agg = aggregate(outcomes)?;
    let result = RunResult { kind: kind.into(), config: run.clone(), aggregate: agg, wall_time_s: start.elapsed().as_secs_f64() };
    result.save(&out_dir.join("result.json"))?;
    let mean = if weights.is_empty() { None } else { Some(mean_weights(&weights)?) };
    if let (Some(w), Some(scores)) = (&mean, &result.aggregate.channel_scores) {
        let snap = snapshot(run);
        let ids: Vec<usize> = (0..w.channels).collect();
        let table = weight_table(w, &scores.s, &ids, &snap)?;
        let path = out_dir.join("channel_weights.csv");
        fs::write(&path, table).map_err(Error::io(&path))?;
        write_weight_heatmap(&out_dir.join("channel_weights.png"), w, &snap)?;
    }
    Ok(TrainReport { result, out_dir: out_dir.to_path_buf(), mean_weights: mean })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    Layers,
    Heads,
    Cats,
    Dropout,
    Variants,
    Masks,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Layers => "layers",
            Axis::Heads => "heads",
            Axis::Cats => "cats",
            Axis::Dropout => "dropout",
            Axis::Variants => "variants",
            Axis::Masks => "masks",
        }
    }

    /// Grid used when no values are given.
    pub fn default_values(self) -> Vec<String> {
        let v: &[&str] = match self {
            Axis::Layers => &["2", "4", "6", "8"],
            Axis::Heads => &["2", "3", "5", "10"],
            Axis::Cats => &["1", "4", "8", "12", "16"],
            Axis::Dropout => &["0", "0.1", "0.2", "0.3", "0.4"],
            Axis::Variants => &["aro_h", "aro_avg", "no_aro"],
            Axis::Masks => &["a", "b", "c"],
        };
        v.iter().map(|s| s.to_string()).collect()
    }

    pub fn apply(self, run: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut r = run.clone();
        let bad = |what: &str| Error::Config(format!("axis {}: {value:?} is not {what}", self.name()));
        let int = || value.parse::<usize>().map_err(|_| bad("a positive integer"));
        match self {
            Axis::Layers => r.chat.n_layers = int()?,
            Axis::Heads => r.chat.n_heads = int()?,
            Axis::Cats => r.chat.n_cat = int()?,
            Axis::Dropout => r.chat.dropout_p = value.parse().map_err(|_| bad("a probability"))?,
            Axis::Variants => r.variant = RolloutVariant::parse(value)?,
            Axis::Masks => r.chat.mask_strategy = MaskStrategy::parse(value)?,
        }
        if r.attachment != Attachment::ChatClassifier {
            return Err(Error::Config("ablations vary the selector, set attachment = \"chat+classifier\"".into()));
        }
        r.resolve()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub value: String,
    pub config: RunConfig,
    pub aggregate: Aggregate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub axis: Axis,
    pub config: RunConfig,
    pub cells: Vec<AblationCell>,
    pub wall_time_s: f64,
}

impl AblationResult {
    /// One column per axis value, a single row of `mean ± std` accuracy cells.
    pub fn table(&self) -> String {
        let mut head = format!("| {} |", self.axis.name());
        let mut rule = String::from("|---|");
        let mut row = String::from("| accuracy (%) |");
        for c in &self.cells {
            head.push_str(&format!(" {} |", c.value));
            rule.push_str("---|");
            row.push_str(&format!(" {} |", c.aggregate.cell()));
        }
        let seeds = format!("| seeds |{}", self.cells.iter().map(|c| format!(" {}/{} |", c.aggregate.completed(), c.aggregate.seeds.len())).collect::<String>());
        format!("{head}\n{rule}\n{row}\n{seeds}\n")
    }
}

/// Sweeps one axis; every cell is a full multi-seed run on the same data.
pub fn ablate(run: &RunConfig, ds: &LoadedDataset, axis: Axis, values: &[String], out_dir: &Path, log: &(dyn Fn(&EpochLog) + Sync)) -> Result<AblationResult> {
    let start = Instant::now();
    // Validate the whole grid before any training starts.
    let cfgs = values.iter().map(|v| axis.apply(run, v)).collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(values.len());
    for (value, cfg) in values.iter().zip(cfgs) {
        let dir = out_dir.join(format!("{}_{}", axis.name(), value));
        let rep = train_run(&cfg, ds, &dir, "ablation-cell", log)?;
        cells.push(AblationCell { value: value.clone(), config: cfg, aggregate: rep.result.aggregate });
    }
    let res = AblationResult { axis, config: run.clone(), cells, wall_time_s: start.elapsed().as_secs_f64() };
    let json = serde_json::to_string_pretty(&res).expect("ablation serializes");
    let path = out_dir.join(format!("ablate_{}.json", axis.name()));
    fs::write(&path, json).map_err(Error::io(&path))?;
    let path = out_dir.join(format!("ablate_{}.md", axis.name()));
    fs::write(&path, format!("<!-- config: {} -->\n{}", snapshot(run), res.table())).map_err(Error::io(&path))?;
    Ok(res)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub config: RunConfig,
    pub prior_config: RunConfig,
    pub outcome: RefineOutcome,
    pub wall_time_s: f64,
}

impl RefineResult {
    /// Jaccard of the seed-averaged top-k against the reference, followed by each
    /// prior seed's own top-k Jaccard and the retrained accuracy.
    pub fn table(&self) -> String {
        let o = &self.outcome;
        let fmt_j = |j: Option<f64>| j.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
        let mut t = String::from("| selection | k | channels | Jaccard | accuracy (%) |\n|---|---|---|---|---|\n");
        t.push_str(&format!(
            "| aggregate | {} | {:?} | {} | {} |\n",
            o.k,
            o.selected,
            fmt_j(o.jaccard),
            o.retrained.cell()
        ));
        for (seed, j) in &o.jaccard_per_seed {
            t.push_str(&format!("| seed {seed} | {} | | {} | |\n", o.k, fmt_j(Some(*j))));
        }
        t
    }
}

/// Top-k reselection from a prior run, reduced-dataset export and retraining.
pub fn refine_run(
    run: &RunConfig,
    prior: &RunResult,
    ds: &LoadedDataset,
    k: usize,
    reference: Option<&[usize]>,
    out_dir: &Path,
    log: &(dyn Fn(&EpochLog) + Sync),
) -> Result<RefineResult> {
    let start = Instant::now();
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let cfg = run.train_config();
    let outcome = refine(&cfg, &train_data(ds), Some(&prior.aggregate), k, reference, &run.seeds, &mut |e| log(e))?;
    let mut keep = outcome.selected.clone();
    keep.sort_unstable();
    write_reduced(&out_dir.join("reduced"), ds, &keep)?;
    let res = RefineResult { config: run.clone(), prior_config: prior.config.clone(), outcome, wall_time_s: start.elapsed().as_secs_f64() };
    let path = out_dir.join("refine.json");
    fs::write(&path, serde_json::to_string_pretty(&res).expect("refine serializes")).map_err(Error::io(&path))?;
    let path = out_dir.join("refine.md");
    fs::write(&path, format!("<!-- config: {} -->\n{}", snapshot(run), res.table())).map_err(Error::io(&path))?;
    Ok(res)
}

/// Per-sample weights of a checkpoint over one split, averaged, written as a
/// table and heat map.
pub fn export_weights(ck: Checkpoint, ds: &LoadedDataset, split: &str, out_dir: &Path) -> Result<(ChannelWeightMatrix, Vec<f64>)> {
    let run = ck.header.run.clone();
    let mut models = ck.into_models()?;
    if models.chat.is_none() {
        return Err(Error::Config("checkpoint was trained without the selector, it has no channel weights".into()));
    }
    let segs = ds.split(split)?;
    let prepared = segs.iter().map(prepare).collect::<catsel_core::Result<Vec<_>>>()?;
    let ev = evaluate(&mut models, &prepared, 32)?;
    let w = mean_weights(&ev.weights)?;
    let scores = scores_of(&w)?;
    fs::create_dir_all(out_dir).map_err(Error::io(out_dir))?;
    let snap = snapshot(&run);
    let ids = match &ds.manifest.source {
        crate::dataset::Source::Reduced { channels, .. } => channels.clone(),
        _ => (0..w.channels).collect(),
    };
    let path = out_dir.join("weights.csv");
    fs::write(&path, weight_table(&w, &scores, &ids, &snap)?).map_err(Error::io(&path))?;
    write_weight_heatmap(&out_dir.join("weights.png"), &w, &snap)?;
    Ok((w, scores))
}
