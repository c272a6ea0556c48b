//! Supervised training of the selector + classifier (or the classifier alone),
//! channel-subset refinement, autoencoder pretraining and seed aggregation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::chat::{stack_segments, ChatConfig, ChatModel};
use crate::classifier::{Classifier, ClassifierSettings};
use crate::error::{Error, Result};
use crate::optim::{onecycle_lr, AdamW, OptimConfig};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::prep::{augment, downsample, zscore_per_channel, AugmentConfig, SeegSegment, TOKEN_FS, ZSCORE_EPS};
use crate::rollout::{
    channel_scores, extract_weights_graph, rollout_graph, top_k, topk_jaccard, ChannelScores, ChannelWeightMatrix,
    RolloutVariant,
};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Attachment {
    /// Selector output reweights the raw channels before the classifier.
    #[default]
    #[cfg_attr(feature = "serde", serde(rename = "chat+classifier"))]
    ChatClassifier,
    #[cfg_attr(feature = "serde", serde(rename = "classifier_only"))]
    ClassifierOnly,
}

impl Attachment {
    pub fn name(self) -> &'static str {
        match self {
            Attachment::ChatClassifier => "chat+classifier",
            Attachment::ClassifierOnly => "classifier_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "chat+classifier" | "chat" => Ok(Self::ChatClassifier),
            "classifier_only" | "classifier" => Ok(Self::ClassifierOnly),
            other => Err(Error::Config(format!("unknown attachment {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub attachment: Attachment,
    /// `token_dim` is overwritten from the data.
    pub chat: ChatConfig,
    pub classifier: ClassifierSettings,
    pub optim: OptimConfig,
    pub variant: RolloutVariant,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn new(attachment: Attachment) -> Self {
        let optim = match attachment {
            Attachment::ChatClassifier => OptimConfig::with_selector(),
            Attachment::ClassifierOnly => OptimConfig::standalone(),
        };
        Self {
            attachment,
            chat: ChatConfig::main(0),
            classifier: ClassifierSettings::default(),
            optim,
            variant: RolloutVariant::AroH,
            augment: AugmentConfig::default(),
        }
    }

    /// Single-core budget: a tenth of the epochs at twenty times the peak rate,
    /// keeping the 2:1 standalone / attached rate ratio.
    pub fn desk(attachment: Attachment) -> Self {
        let mut cfg = Self::new(attachment);
        cfg.optim.epochs = 20;
        cfg.optim.max_lr *= 20.0;
        cfg
    }
}

/// Train / validation / test segments at their original sampling rate.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub train: &'a [SeegSegment],
    pub val: &'a [SeegSegment],
    pub test: &'a [SeegSegment],
    pub classes: usize,
}

impl TrainData<'_> {
    fn shape(&self) -> Result<(usize, usize, u32)> {
        let first = self.train.first().ok_or_else(|| Error::Config("training split is empty".into()))?;
        if self.val.is_empty() || self.test.is_empty() {
            return Err(Error::Config("validation and test splits must be non-empty".into()));
        }
        let (c, l, fs) = (first.channels(), first.len(), first.fs);
        for s in self.train.iter().chain(self.val).chain(self.test) {
            if s.channels() != c || s.len() != l || s.fs != fs {
                return Err(Error::Dimension {
                    op: "TrainData",
                    detail: format!("segment {}x{} at {} Hz vs {c}x{l} at {fs} Hz", s.channels(), s.len(), s.fs),
                });
            }
            if s.label >= self.classes {
                return Err(Error::Label { label: s.label, classes: self.classes });
            }
        }
        Ok((c, l, fs))
    }
}

/// Model inputs derived from one segment.
#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    /// Downsampled, Z-scored `[C, d]` channel tokens.
    pub tokens: Tensor,
    /// Z-scored `[C, L]` signal at the original rate.
    pub raw: Tensor,
    pub label: usize,
}

pub fn prepare(seg: &SeegSegment) -> Result<Prepared> {
    let tokens = zscore_per_channel(&downsample(seg, TOKEN_FS)?, ZSCORE_EPS)?.data;
    let raw = zscore_per_channel(seg, ZSCORE_EPS)?.data;
    Ok(Prepared { tokens, raw, label: seg.label })
}

/// Token width the selector sees for segments of `len` samples at `fs`.
pub fn token_dim(len: usize, fs: u32) -> Result<usize> {
    if fs % TOKEN_FS != 0 || len % (fs / TOKEN_FS) as usize != 0 {
        return Err(Error::Ratio { fs, target_fs: TOKEN_FS, len });
    }
    Ok(len / (fs / TOKEN_FS) as usize)
}

fn stack(items: &[&Prepared], pick: impl Fn(&Prepared) -> &Tensor) -> Result<Tensor> {
    let first = pick(items[0]);
    let mut data = Vec::with_capacity(items.len() * first.numel());
    for p in items {
        data.extend_from_slice(pick(p).data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}

/// The selector (when attached) and the classifier.
#[derive(Clone, Debug)]
pub struct Models {
    pub chat: Option<ChatModel>,
    pub classifier: Classifier,
    pub variant: RolloutVariant,
}

/// Graph handles of one batched forward pass.
pub struct BatchOutput {
    pub logits: Var,
    /// `[B, N, C]` channel weights when the selector is attached.
    pub weights: Option<Var>,
    pub bounds: Vec<Bound>,
}

impl Models {
    pub fn build<R: Rng + ?Sized>(cfg: &TrainConfig, channels: usize, classes: usize, len: usize, fs: u32, rng: &mut R) -> Result<Self> {
        let chat = match cfg.attachment {
            Attachment::ChatClassifier => {
                let chat_cfg = ChatConfig { token_dim: token_dim(len, fs)?, ..cfg.chat.clone() };
                Some(ChatModel::new(chat_cfg, channels, rng)?)
            }
            Attachment::ClassifierOnly => None,
        };
        let n = match &chat {
            Some(m) => m.config().n_cat * cfg.variant.heads_out(m.config().n_heads),
            None => channels,
        };
        let classifier = Classifier::new(cfg.classifier.resolve(n, classes, len)?, rng)?;
        Ok(Self { chat, classifier, variant: cfg.variant })
    }

    pub fn stores(&self) -> Vec<&ParamStore> {
        let mut v = Vec::new();
        if let Some(c) = &self.chat {
            v.push(c.params());
        }
        v.push(self.classifier.params());
        v
    }

    pub fn stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = Vec::new();
        if let Some(c) = &mut self.chat {
            v.push(c.params_mut());
        }
        v.push(self.classifier.params_mut());
        v
    }

    /// `tokens` is `[B, C, d]`, `raw` is `[B, C, L]`.
    pub fn forward<R: Rng + ?Sized>(&mut self, g: &mut Graph, tokens: Tensor, raw: Tensor, mode: Mode, rng: &mut R) -> Result<BatchOutput> {
        let raw = g.constant(raw);
        match &mut self.chat {
            Some(chat) => {
                let pc = chat.params().bind(g);
                let pk = self.classifier.params().bind(g);
                let x = g.constant(tokens);
                let out = chat.forward(g, &pc, x, mode, rng)?;
                let r = rollout_graph(g, &out.maps, self.variant)?;
                let (n_cat, c) = (chat.config().n_cat, chat.channels());
                let w = extract_weights_graph(g, r, n_cat, c)?;
                let mixed = g.bmm(w, raw, false)?;
                let logits = self.classifier.forward(g, &pk, mixed, mode, rng)?;
                Ok(BatchOutput { logits, weights: Some(w), bounds: vec![pc, pk] })
            }
            None => {
                let pk = self.classifier.params().bind(g);
                let logits = self.classifier.forward(g, &pk, raw, mode, rng)?;
                Ok(BatchOutput { logits, weights: None, bounds: vec![pk] })
            }
        }
    }

    fn heads_out(&self) -> usize {
        self.chat.as_ref().map_or(1, |c| self.variant.heads_out(c.config().n_heads))
    }
}

/// Eval-mode predictions, plus per-sample channel weights when the selector is attached.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub accuracy: f64,
    pub predictions: Vec<Option<usize>>,
    pub weights: Vec<ChannelWeightMatrix>,
    /// Samples whose forward pass failed (degenerate CAT rows); counted as wrong.
    pub failed: usize,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

pub fn evaluate(models: &mut Models, data: &[Prepared], batch: usize) -> Result<Evaluation> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut ev = Evaluation::default();
    let mut correct = 0usize;
    for chunk in data.chunks(batch.max(1)) {
        let refs: Vec<&Prepared> = chunk.iter().collect();
        match eval_batch(models, &refs, &mut rng) {
            Ok((preds, ws)) => {
                correct += preds.iter().zip(chunk).filter(|(p, d)| **p == d.label).count();
                ev.predictions.extend(preds.into_iter().map(Some));
                ev.weights.extend(ws);
            }
            Err(Error::DegenerateCat { .. }) => {
                for item in &refs {
                    match eval_batch(models, core::slice::from_ref(item), &mut rng) {
                        Ok((p, ws)) => {
                            correct += usize::from(p[0] == item.label);
                            ev.predictions.push(Some(p[0]));
                            ev.weights.extend(ws);
                        }
                        Err(Error::DegenerateCat { .. }) => {
                            ev.failed += 1;
                            ev.predictions.push(None);
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
            Err(e) => return Err(e),
        }
    }
    ev.accuracy = correct as f64 / data.len().max(1) as f64;
    Ok(ev)
}

fn eval_batch(models: &mut Models, items: &[&Prepared], rng: &mut ChaCha8Rng) -> Result<(Vec<usize>, Vec<ChannelWeightMatrix>)> {
    let mut g = Graph::new();
    let tokens = stack(items, |p| &p.tokens)?;
    let raw = stack(items, |p| &p.raw)?;
    let out = models.forward(&mut g, tokens, raw, Mode::Eval, rng)?;
    let s = g.shape(out.logits)[1];
    let preds = g.value(out.logits).data().chunks(s).map(argmax).collect();
    let mut ws = Vec::new();
    if let (Some(w), Some(chat)) = (out.weights, &models.chat) {
        let (n_cat, heads, c) = (chat.config().n_cat, models.heads_out(), chat.channels());
        let per = n_cat * heads * c;
        for b in 0..items.len() {
            let w_eff = g.value(w).data()[b * per..(b + 1) * per].to_vec();
            ws.push(ChannelWeightMatrix { n_cat, heads, channels: c, w_eff });
        }
    }
    Ok((preds, ws))
}

/// Per-epoch progress record.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochLog {
    pub seed: u64,
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
    pub skipped_batches: usize,
}

/// Result of one seed.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SeedOutcome {
    pub seed: u64,
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub skipped_batches: usize,
    pub warnings: Vec<String>,
    /// Test-set averaged scores of the selected checkpoint (selector attached only).
    pub channel_scores: Option<ChannelScores>,
    pub history: Vec<EpochLog>,
}

pub struct Trained {
    pub outcome: SeedOutcome,
    /// Parameters of the best-validation checkpoint.
    pub models: Models,
}

/// One seed of supervised training with best-validation checkpoint selection.
///
/// `init` optionally provides pretrained selector parameters; same-named,
/// same-shaped tensors are copied.
pub fn train_supervised(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    seed: u64,
    init: Option<&ChatModel>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Trained> {
    cfg.optim.validate()?;
    let (c, l, fs) = data.shape()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut models = Models::build(cfg, c, data.classes, l, fs, &mut rng)?;
    let mut warnings = Vec::new();
    if let (Some(pre), Some(chat)) = (init, models.chat.as_mut()) {
        let skipped = chat.params_mut().load_matching(pre.params());
        if !skipped.is_empty() {
            warnings.push(format!("pretrained tensors with mismatched shapes left at init: {}", skipped.join(", ")));
        }
    }
    let prep_all = |segs: &[SeegSegment]| segs.iter().map(prepare).collect::<Result<Vec<_>>>();
    let train = prep_all(data.train)?;
    let val = prep_all(data.val)?;
    let test = prep_all(data.test)?;
    let augmenting = cfg.augment != AugmentConfig::default();

    let batch = cfg.optim.batch_size;
    let steps_per_epoch = train.len().div_ceil(batch);
    let total = steps_per_epoch * cfg.optim.epochs;
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best: Option<(f64, usize, Models)> = None;
    let mut history = Vec::with_capacity(cfg.optim.epochs);
    let mut skipped_total = 0;
    let mut step = 0;
    for epoch in 0..cfg.optim.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut loss_n, mut skipped) = (0.0, 0usize, 0usize);
        let mut lr = 0.0;
        for idx in order.chunks(batch) {
            lr = onecycle_lr(step, total, &cfg.optim)?;
            step += 1;
            let augmented: Vec<Prepared>;
            let items: Vec<&Prepared> = if augmenting {
                augmented = idx
                    .iter()
                    .map(|&i| prepare(&augment(&data.train[i], &cfg.augment, &mut rng)?))
                    .collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                idx.iter().map(|&i| &train[i]).collect()
            };
            let labels: Vec<usize> = items.iter().map(|p| p.label).collect();
            let mut g = Graph::new();
            let out = match models.forward(&mut g, stack(&items, |p| &p.tokens)?, stack(&items, |p| &p.raw)?, Mode::Train, &mut rng) {
                Ok(o) => o,
                Err(Error::DegenerateCat { pair, cat, head }) => {
                    skipped += 1;
                    warnings.push(format!("epoch {epoch}: batch skipped, CAT {cat} head {head} (pair {pair}) degenerate"));
                    continue;
                }
                Err(e) => return Err(e),
            };
            let loss = g.cross_entropy(out.logits, &labels)?;
            loss_sum += g.value(loss).data()[0];
            loss_n += 1;
            let grads = g.backward(loss)?;
            let per_store: Vec<Vec<Vec<f64>>> =
                models.stores().iter().zip(&out.bounds).map(|(s, b)| s.collect_grads(b, &grads)).collect();
            opt.step(&mut models.stores_mut(), &per_store, lr, &cfg.optim)?;
        }
        skipped_total += skipped;
        let val_acc = evaluate(&mut models, &val, batch)?.accuracy;
        let entry = EpochLog {
            seed,
            epoch,
            train_loss: if loss_n > 0 { loss_sum / loss_n as f64 } else { f64::NAN },
            val_accuracy: val_acc,
            lr,
            skipped_batches: skipped,
        };
        log(&entry);
        history.push(entry);
        if best.as_ref().is_none_or(|(acc, _, _)| val_acc > *acc) {
            best = Some((val_acc, epoch, models.clone()));
        }
    }
    let (best_val, best_epoch, mut models) = best.ok_or_else(|| Error::Config("no epochs were run".into()))?;
    let ev = evaluate(&mut models, &test, batch)?;
    if ev.failed > 0 {
        warnings.push(format!("{} test samples had degenerate CAT rows and were counted wrong", ev.failed));
    }
    let channel_scores = if models.chat.is_some() && !ev.weights.is_empty() { Some(channel_scores(&ev.weights)?) } else { None };
    let outcome = SeedOutcome {
        seed,
        test_accuracy: ev.accuracy,
        best_val_accuracy: best_val,
        best_epoch,
        epochs: cfg.optim.epochs,
        skipped_batches: skipped_total,
        warnings,
        channel_scores,
        history,
    };
    Ok(Trained { outcome, models })
}

/// Mean and population standard deviation over completed seeds.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Aggregate {
    pub seeds: Vec<u64>,
    pub outcomes: Vec<SeedOutcome>,
    pub failed: Vec<(u64, String)>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    /// Seed-averaged scores (selector attached only).
    pub channel_scores: Option<ChannelScores>,
}

impl Aggregate {
    pub fn completed(&self) -> usize {
        self.outcomes.len()
    }

    /// `"mean ± std"` in percent with two decimals.
    pub fn cell(&self) -> String {
        format!("{:.2} ± {:.2}", 100.0 * self.mean_accuracy, 100.0 * self.std_accuracy)
    }
}

pub fn aggregate(results: Vec<(u64, Result<SeedOutcome>)>) -> Result<Aggregate> {
    let seeds: Vec<u64> = results.iter().map(|r| r.0).collect();
    let mut outcomes = Vec::new();
    let mut failed = Vec::new();
    for (seed, r) in results {
        match r {
            Ok(o) => outcomes.push(o),
            Err(e) => failed.push((seed, e.to_string())),
        }
    }
    let accs: Vec<f64> = outcomes.iter().map(|o| o.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = if accs.is_empty() { (f64::NAN, f64::NAN) } else { crate::prep::mean_std(&accs) };
    let scores: Vec<ChannelScores> = outcomes.iter().filter_map(|o| o.channel_scores.clone()).collect();
    let channel_scores = if scores.is_empty() { None } else { Some(ChannelScores::average(&scores)?) };
    Ok(Aggregate { seeds, outcomes, failed, mean_accuracy, std_accuracy, channel_scores })
}

pub fn check_seeds(seeds: &[u64]) -> Result<()> {
    if seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let mut sorted = seeds.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::Config(format!("seed list {seeds:?} has duplicates")));
    }
    Ok(())
}

/// Runs every seed in order and aggregates.
pub fn multi_seed(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    seeds: &[u64],
    init: Option<&ChatModel>,
    log: &mut dyn FnMut(&EpochLog),
) -> Result<Aggregate> {
    check_seeds(seeds)?;
    let results = seeds.iter().map(|&s| (s, train_supervised(cfg, data, s, init, log).map(|t| t.outcome))).collect();
    aggregate(results)
}

/// Keeps the listed channels of every segment.
pub fn reduce_channels(segs: &[SeegSegment], channels: &[usize]) -> Result<Vec<SeegSegment>> {
    segs.iter().map(|s| s.select_channels(channels)).collect()
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RefineOutcome {
    pub k: usize,
    /// Selected channel ids, highest score first.
    pub selected: Vec<usize>,
    pub reference: Option<Vec<usize>>,
    /// Jaccard of the seed-averaged top-k against the reference.
    pub jaccard: Option<f64>,
    /// Jaccard of each prior seed's own top-k against the reference.
    pub jaccard_per_seed: Vec<(u64, f64)>,
    pub retrained: Aggregate,
}

/// Picks the top-`k` channels from `prior` scores, retrains on that subset and
/// scores the selection against `reference`.
pub fn refine(
    cfg: &TrainConfig,
    data: &TrainData<'_>,
    prior: Option<&Aggregate>,
    k: usize,
    reference: Option<&[usize]>,
    seeds: &[u64],
    log: &mut dyn FnMut(&EpochLog),
) -> Result<RefineOutcome> {
    let prior = prior.ok_or_else(|| Error::Workflow("refine needs a completed selector run".into()))?;
    let scores = prior
        .channel_scores
        .as_ref()
        .ok_or_else(|| Error::Workflow("prior run carries no channel scores".into()))?;
    if let Some(r) = reference {
        if r.len() != k {
            return Err(Error::Argument(format!("reference lists {} channels but k = {k}", r.len())));
        }
    }
    let selected = top_k(&scores.s, k)?;
    let (jaccard, jaccard_per_seed) = match reference {
        Some(r) => {
            let per = prior
                .outcomes
                .iter()
                .filter_map(|o| o.channel_scores.as_ref().map(|s| topk_jaccard(s, r, k).map(|j| (o.seed, j))))
                .collect::<Result<Vec<_>>>()?;
            (Some(topk_jaccard(scores, r, k)?), per)
        }
        None => (None, Vec::new()),
    };
    let mut keep = selected.clone();
    keep.sort_unstable();
    let train = reduce_channels(data.train, &keep)?;
    let val = reduce_channels(data.val, &keep)?;
    let test = reduce_channels(data.test, &keep)?;
    let reduced = TrainData { train: &train, val: &val, test: &test, classes: data.classes };
    let retrained = multi_seed(cfg, &reduced, seeds, None, log)?;
    Ok(RefineOutcome { k, selected, reference: reference.map(<[usize]>::to_vec), jaccard, jaccard_per_seed, retrained })
}

/// Reconstruction pretraining of the selector on unlabeled segments.
///
/// Inputs are zero-padded to `pad_to` channels; a linear per-token decoder
/// reconstructs each preprocessed channel token, and padded channels carry
/// zero loss weight. Returns the encoder and the mean loss of every epoch.
pub fn pretrain_autoencoder(
    chat: &ChatConfig,
    segs: &[SeegSegment],
    pad_to: usize,
    optim: &OptimConfig,
    seed: u64,
) -> Result<(ChatModel, Vec<f64>)> {
    optim.validate()?;
    let first = segs.first().ok_or_else(|| Error::Config("pretraining split is empty".into()))?;
    if let Some(s) = segs.iter().find(|s| s.channels() > pad_to) {
        return Err(Error::Padding { pad_to, channels: s.channels() });
    }
    let d = token_dim(first.len(), first.fs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ChatModel::new(ChatConfig { token_dim: d, ..chat.clone() }, pad_to, &mut rng)?;
    let mut dec = ParamStore::new();
    dec.add("dec.w", trunc_normal(&[d, d], model.config().init_std, &mut rng));
    dec.add("dec.b", Tensor::zeros(&[d]));
    let items: Vec<(SeegSegment, usize)> = segs
        .iter()
        .map(|s| {
            let tok = zscore_per_channel(&downsample(s, TOKEN_FS)?, ZSCORE_EPS)?;
            Ok((tok.pad_channels(pad_to)?, s.channels()))
        })
        .collect::<Result<_>>()?;
    let batch = optim.batch_size;
    let total = items.len().div_ceil(batch) * optim.epochs;
    let mut opt = AdamW::new();
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut losses = Vec::with_capacity(optim.epochs);
    let mut step = 0;
    let n_cat = model.config().n_cat;
    for _ in 0..optim.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut n) = (0.0, 0usize);
        for idx in order.chunks(batch) {
            let lr = onecycle_lr(step, total, optim)?;
            step += 1;
            let refs: Vec<&SeegSegment> = idx.iter().map(|&i| &items[i].0).collect();
            let target = stack_segments(&refs)?;
            let mask: Vec<f64> = idx
                .iter()
                .flat_map(|&i| {
                    let real = items[i].1;
                    (0..pad_to).flat_map(move |c| core::iter::repeat_n(if c < real { 1.0 } else { 0.0 }, d))
                })
                .collect();
            let b = idx.len();
            let mut g = Graph::new();
            let pc = model.params().bind(&mut g);
            let pd = dec.bind(&mut g);
            let x = g.constant(target.clone());
            let out = model.forward(&mut g, &pc, x, Mode::Train, &mut rng)?;
            let chans = g.narrow(out.tokens, 1, n_cat, pad_to)?;
            let flat = g.reshape(chans, &[b * pad_to, d])?;
            let rec = g.matmul(flat, pd.vars()[0])?;
            let rec = g.add_row_bias(rec, pd.vars()[1])?;
            let rec = g.reshape(rec, &[b, pad_to, d])?;
            let loss = g.masked_mse(rec, &target, &mask)?;
            sum += g.value(loss).data()[0];
            n += 1;
            let grads = g.backward(loss)?;
            let gs = vec![model.params().collect_grads(&pc, &grads), dec.collect_grads(&pd, &grads)];
            opt.step(&mut [model.params_mut(), &mut dec], &gs, lr, optim)?;
        }
        losses.push(sum / n.max(1) as f64);
    }
    Ok((model, losses))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, split, SynthConfig};

    fn tiny_data(snr_db: f64, seed: u64) -> (Vec<SeegSegment>, Vec<SeegSegment>, Vec<SeegSegment>, Vec<usize>) {
        let cfg = SynthConfig { channels: 6, planted: 2, len: 160, fs: 1000, samples_per_class: 30, snr_db, base_freq: 15.0, ..SynthConfig::desk(seed) };
        let ds = generate(&cfg).unwrap();
        let labels: Vec<usize> = ds.segments.iter().map(|s| s.label).collect();
        let sp = split(&labels, (8, 1, 1), seed).unwrap();
        let pick = |ix: &[usize]| ix.iter().map(|&i| ds.segments[i].clone()).collect::<Vec<_>>();
        (pick(&sp.train), pick(&sp.val), pick(&sp.test), ds.planted)
    }

    fn quick(attachment: Attachment) -> TrainConfig {
        let mut cfg = TrainConfig::new(attachment);
        cfg.optim.epochs = 3;
        cfg.optim.batch_size = 16;
        cfg.optim.max_lr = 2e-3;
        cfg.chat.n_cat = 2;
        cfg
    }

    #[test]
    fn attached_run_is_deterministic_and_reports_scores() {
        let (tr, va, te, _) = tiny_data(0.0, 1);
        let data = TrainData { train: &tr, val: &va, test: &te, classes: 4 };
        let cfg = quick(Attachment::ChatClassifier);
        let a = train_supervised(&cfg, &data, 7, None, &mut |_| {}).unwrap().outcome;
        let b = train_supervised(&cfg, &data, 7, None, &mut |_| {}).unwrap().outcome;
        assert_eq!(a, b);
        let s = a.channel_scores.unwrap();
        assert_eq!(s.s.len(), 6);
        assert!((s.s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(s.provenance.matrices, te.len());
        assert_eq!(a.history.len(), 3);
        assert!(a.history.iter().all(|h| h.train_loss.is_finite()));
    }

    #[test]
    fn gradients_reach_cat_tokens_through_rollout() {
        let (tr, _, _, _) = tiny_data(0.0, 2);
        let cfg = quick(Attachment::ChatClassifier);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Models::build(&cfg, 6, 4, 160, 1000, &mut rng).unwrap();
        let items: Vec<Prepared> = tr[..4].iter().map(|s| prepare(s).unwrap()).collect();
        let refs: Vec<&Prepared> = items.iter().collect();
        let mut g = Graph::new();
        let out = m.forward(&mut g, stack(&refs, |p| &p.tokens).unwrap(), stack(&refs, |p| &p.raw).unwrap(), Mode::Train, &mut rng).unwrap();
        let loss = g.cross_entropy(out.logits, &[0, 1, 2, 3]).unwrap();
        let grads = g.backward(loss).unwrap();
        let cat = m.chat.as_ref().unwrap().params().id_of("chat.cat").unwrap();
        let gc = grads.get(out.bounds[0][cat]).unwrap();
        assert!(gc.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn aggregate_uses_population_std() {
        let o = |seed, acc| SeedOutcome {
            seed,
            test_accuracy: acc,
            best_val_accuracy: 0.0,
            best_epoch: 0,
            epochs: 1,
            skipped_batches: 0,
            warnings: Vec::new(),
            channel_scores: None,
            history: Vec::new(),
        };
        let a = aggregate(vec![(1, Ok(o(1, 0.5)))]).unwrap();
        assert_eq!(a.std_accuracy, 0.0);
        let a = aggregate(vec![(1, Ok(o(1, 0.2))), (2, Ok(o(2, 0.4))), (3, Err(Error::PoisonedState { param: "w".into() }))]).unwrap();
        assert!((a.mean_accuracy - 0.3).abs() < 1e-12 && (a.std_accuracy - 0.1).abs() < 1e-12);
        assert_eq!(a.completed(), 2);
        assert_eq!(a.failed.len(), 1);
        assert_eq!(a.cell(), "30.00 ± 10.00");
        assert!(check_seeds(&[1, 2, 1]).is_err() && check_seeds(&[]).is_err());
    }

    #[test]
    fn refine_preconditions() {
        let (tr, va, te, planted) = tiny_data(0.0, 3);
        let data = TrainData { train: &tr, val: &va, test: &te, classes: 4 };
        let cfg = quick(Attachment::ClassifierOnly);
        let err = refine(&cfg, &data, None, 2, None, &[1], &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Workflow(_)));
        let prior = multi_seed(&quick(Attachment::ChatClassifier), &data, &[1, 2], None, &mut |_| {}).unwrap();
        let err = refine(&cfg, &data, Some(&prior), 3, Some(&planted), &[1], &mut |_| {}).unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
        let r = refine(&cfg, &data, Some(&prior), 2, Some(&planted), &[1], &mut |_| {}).unwrap();
        assert_eq!(r.selected.len(), 2);
        assert_eq!(r.jaccard_per_seed.len(), 2);
        assert!(r.jaccard.unwrap() >= 0.0);
    }

    #[test]
    fn pretraining_pads_and_masks() {
        let (tr, _, _, _) = tiny_data(0.0, 4);
        let chat = ChatConfig { n_cat: 2, dropout_p: 0.0, ..ChatConfig::main(0) };
        let optim = OptimConfig { epochs: 2, batch_size: 16, max_lr: 1e-3, ..OptimConfig::default() };
        assert!(matches!(pretrain_autoencoder(&chat, &tr, 5, &optim, 0), Err(Error::Padding { pad_to: 5, channels: 6 })));
        let (m, losses) = pretrain_autoencoder(&chat, &tr, 8, &optim, 0).unwrap();
        assert_eq!(m.channels(), 8);
        assert_eq!(losses.len(), 2);
        assert!(losses.iter().all(|l| l.is_finite()));
    }
}
