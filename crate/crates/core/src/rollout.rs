//! Attention rollout and channel-weight extraction.
//!
//! Every function here has two routes: a plain one over [`AttentionStack`]
//! values (analysis, export) and a graph one over attention [`Var`]s
//! (training, so that the classifier loss reaches the attention logits).
//! Both compose `rownorm(A + I)` factors with later layers on the left, so
//! `R[i, j]` reads as mass flowing from input token `j` to output token `i`.

use alloc::vec;
use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RolloutVariant {
    /// One rollout per head index, heads matched across layers.
    #[cfg_attr(feature = "serde", serde(rename = "aro_h"))]
    AroH,
    /// Heads averaged within each layer before the product.
    #[cfg_attr(feature = "serde", serde(rename = "aro_avg"))]
    AroAvg,
    /// Last layer only, heads averaged.
    #[cfg_attr(feature = "serde", serde(rename = "no_aro"))]
    NoAro,
}

impl RolloutVariant {
    pub const ALL: [RolloutVariant; 3] = [RolloutVariant::AroH, RolloutVariant::AroAvg, RolloutVariant::NoAro];

    pub fn name(self) -> &'static str {
        match self {
            RolloutVariant::AroH => "aro_h",
            RolloutVariant::AroAvg => "aro_avg",
            RolloutVariant::NoAro => "no_aro",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "aro_h" | "aro-h" => Ok(Self::AroH),
            "aro_avg" | "aro-avg" => Ok(Self::AroAvg),
            "no_aro" | "no-aro" => Ok(Self::NoAro),
            other => Err(Error::Config(alloc::format!("unknown rollout variant {other:?}"))),
        }
    }

    /// Number of head slices the rollout keeps.
    pub fn heads_out(self, n_heads: usize) -> usize {
        match self {
            RolloutVariant::AroH => n_heads,
            _ => 1,
        }
    }
}

/// All attention maps of one forward pass for one sample, `[layer][head][T][T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    pub n_layers: usize,
    pub n_heads: usize,
    pub tokens: usize,
    pub maps: Vec<f64>,
}

impl AttentionStack {
    pub fn new(n_layers: usize, n_heads: usize, tokens: usize, maps: Vec<f64>) -> Result<Self> {
        if maps.len() != n_layers * n_heads * tokens * tokens {
            return Err(Error::Dimension {
                op: "AttentionStack::new",
                detail: alloc::format!("{} values for {n_layers}x{n_heads}x{tokens}x{tokens}", maps.len()),
            });
        }
        Ok(Self { n_layers, n_heads, tokens, maps })
    }

    /// Every layer and head set to the identity.
    pub fn identity(n_layers: usize, n_heads: usize, tokens: usize) -> Self {
        let eye = Tensor::eye(tokens);
        let maps = (0..n_layers * n_heads).flat_map(|_| eye.data().iter().copied()).collect();
        Self { n_layers, n_heads, tokens, maps }
    }

    /// Extracts sample `b` from per-layer graph values of shape `[B, H, T, T]`.
    pub fn from_graph(g: &Graph, maps: &[Var], b: usize) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::Argument("no attention layers".into()))?;
        let shape = g.shape(*first);
        let (heads, t) = (shape[1], shape[2]);
        let per = heads * t * t;
        let mut data = Vec::with_capacity(maps.len() * per);
        for m in maps {
            data.extend_from_slice(&g.value(*m).data()[b * per..(b + 1) * per]);
        }
        Self::new(maps.len(), heads, t, data)
    }

    pub fn map(&self, layer: usize, head: usize) -> &[f64] {
        let tt = self.tokens * self.tokens;
        let start = (layer * self.n_heads + head) * tt;
        &self.maps[start..start + tt]
    }

    pub fn map_mut(&mut self, layer: usize, head: usize) -> &mut [f64] {
        let tt = self.tokens * self.tokens;
        let start = (layer * self.n_heads + head) * tt;
        &mut self.maps[start..start + tt]
    }
}

/// Rollout matrices, `[heads][T][T]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub variant: RolloutVariant,
    pub heads: usize,
    pub tokens: usize,
    pub r: Vec<f64>,
}

impl RolloutResult {
    pub fn head(&self, h: usize) -> &[f64] {
        let tt = self.tokens * self.tokens;
        &self.r[h * tt..(h + 1) * tt]
    }
}

fn rownorm_in_place(m: &mut [f64], t: usize) {
    for row in m.chunks_mut(t) {
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
}

fn square_matmul(a: &[f64], b: &[f64], t: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * t];
    crate::tensor::gemm(t, t, t, a, false, b, false, &mut out, 0.0);
    out
}

/// `rownorm(A + I)` for a row-stochastic, non-negative `T×T` map.
pub fn residual_normalize(a: &[f64], t: usize) -> Result<Vec<f64>> {
    if a.len() != t * t {
        return Err(Error::Dimension { op: "residual_normalize", detail: alloc::format!("{} values for {t}x{t}", a.len()) });
    }
    if let Some(v) = a.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::Domain(alloc::format!("attention entry {v} is negative or NaN")));
    }
    for (i, row) in a.chunks(t).enumerate() {
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-5 {
            return Err(Error::Domain(alloc::format!("attention row {i} sums to {s}")));
        }
    }
    let mut out = a.to_vec();
    for i in 0..t {
        out[i * t + i] += 1.0;
    }
    rownorm_in_place(&mut out, t);
    Ok(out)
}

/// Multiplies normalized factors, latest layer on the left, renormalizing after each product.
fn compose(factors: impl Iterator<Item = Result<Vec<f64>>>, t: usize) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for f in factors {
        let f = f?;
        acc = Some(match acc {
            None => f,
            Some(prev) => {
                let mut p = square_matmul(&f, &prev, t);
                rownorm_in_place(&mut p, t);
                p
            }
        });
    }
    acc.ok_or_else(|| Error::Argument("attention stack has no layers".into()))
}

fn head_average(stack: &AttentionStack, layer: usize) -> Vec<f64> {
    let tt = stack.tokens * stack.tokens;
    let mut avg = vec![0.0; tt];
    for h in 0..stack.n_heads {
        avg.iter_mut().zip(stack.map(layer, h)).for_each(|(a, v)| *a += v);
    }
    let inv = 1.0 / stack.n_heads as f64;
    avg.iter_mut().for_each(|v| *v *= inv);
    avg
}

pub fn rollout_per_head(stack: &AttentionStack) -> Result<RolloutResult> {
    let t = stack.tokens;
    let mut r = Vec::with_capacity(stack.n_heads * t * t);
    for h in 0..stack.n_heads {
        let factors = (0..stack.n_layers).map(|l| residual_normalize(stack.map(l, h), t));
        r.extend(compose(factors, t)?);
    }
    Ok(RolloutResult { variant: RolloutVariant::AroH, heads: stack.n_heads, tokens: t, r })
}

pub fn rollout_avg(stack: &AttentionStack) -> Result<RolloutResult> {
    let t = stack.tokens;
    let factors = (0..stack.n_layers).map(|l| residual_normalize(&head_average(stack, l), t));
    let r = compose(factors, t)?;
    Ok(RolloutResult { variant: RolloutVariant::AroAvg, heads: 1, tokens: t, r })
}

pub fn last_layer_attention(stack: &AttentionStack) -> Result<RolloutResult> {
    if stack.n_layers == 0 {
        return Err(Error::Argument("attention stack has no layers".into()));
    }
    let t = stack.tokens;
    let r = residual_normalize(&head_average(stack, stack.n_layers - 1), t)?;
    Ok(RolloutResult { variant: RolloutVariant::NoAro, heads: 1, tokens: t, r })
}

pub fn rollout(stack: &AttentionStack, variant: RolloutVariant) -> Result<RolloutResult> {
    match variant {
        RolloutVariant::AroH => rollout_per_head(stack),
        RolloutVariant::AroAvg => rollout_avg(stack),
        RolloutVariant::NoAro => last_layer_attention(stack),
    }
}

/// Per-(CAT, head) distributions over the original channels.
///
/// `w_eff` is `[N, C]` with `N = n_cat * heads` and pair index
/// `p = cat * heads + head`; the transposed `[C, N]` layout is [`Self::channel_major`].
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeightMatrix {
    pub n_cat: usize,
    pub heads: usize,
    pub channels: usize,
    pub w_eff: Vec<f64>,
}

impl ChannelWeightMatrix {
    pub fn pairs(&self) -> usize {
        self.n_cat * self.heads
    }

    pub fn row(&self, p: usize) -> &[f64] {
        &self.w_eff[p * self.channels..(p + 1) * self.channels]
    }

    /// `[C, N]` layout, one row per channel.
    pub fn channel_major(&self) -> Tensor {
        let (n, c) = (self.pairs(), self.channels);
        let mut out = vec![0.0; n * c];
        for p in 0..n {
            for ch in 0..c {
                out[ch * n + p] = self.w_eff[p * c + ch];
            }
        }
        Tensor::new(&[c, n], out).expect("sizes agree")
    }

    pub fn w_eff_tensor(&self) -> Tensor {
        Tensor::new(&[self.pairs(), self.channels], self.w_eff.clone()).expect("sizes agree")
    }
}

/// Reads CAT rows of each rollout slice restricted to channel columns and renormalizes them.
pub fn extract_weights(r: &RolloutResult, n_cat: usize, channels: usize) -> Result<ChannelWeightMatrix> {
    let t = r.tokens;
    if n_cat + channels != t || n_cat == 0 || channels == 0 {
        return Err(Error::Dimension {
            op: "extract_weights",
            detail: alloc::format!("{n_cat} CATs + {channels} channels vs {t} tokens"),
        });
    }
    let heads = r.heads;
    let mut w = vec![0.0; n_cat * heads * channels];
    for cat in 0..n_cat {
        for head in 0..heads {
            let p = cat * heads + head;
            let src = &r.head(head)[cat * t + n_cat..cat * t + t];
            let s: f64 = src.iter().sum();
            if !(s > 0.0) {
                return Err(Error::DegenerateCat { pair: p, cat, head });
            }
            for (dst, v) in w[p * channels..(p + 1) * channels].iter_mut().zip(src) {
                *dst = v / s;
            }
        }
    }
    Ok(ChannelWeightMatrix { n_cat, heads, channels, w_eff: w })
}

/// What an aggregate score was averaged over.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScoreProvenance {
    pub matrices: usize,
    pub pairs_per_matrix: usize,
    pub seeds: usize,
}

/// Aggregate channel importance, normalized to sum 1.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelScores {
    pub s: Vec<f64>,
    pub provenance: ScoreProvenance,
}

impl ChannelScores {
    /// Averages several score vectors (e.g. one per seed) and renormalizes.
    pub fn average(items: &[ChannelScores]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::Argument("no channel scores to average".into()))?;
        let c = first.s.len();
        if items.iter().any(|i| i.s.len() != c) {
            return Err(Error::Argument("channel score lengths differ".into()));
        }
        let mut s = vec![0.0; c];
        for it in items {
            s.iter_mut().zip(&it.s).for_each(|(a, v)| *a += v);
        }
        normalize(&mut s)?;
        let provenance = ScoreProvenance {
            matrices: items.iter().map(|i| i.provenance.matrices).sum(),
            pairs_per_matrix: first.provenance.pairs_per_matrix,
            seeds: items.iter().map(|i| i.provenance.seeds.max(1)).sum(),
        };
        Ok(Self { s, provenance })
    }
}

fn normalize(s: &mut [f64]) -> Result<()> {
    let total: f64 = s.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Domain("channel scores have no mass".into()));
    }
    s.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Normalized mean over every row of every weight matrix.
pub fn channel_scores(weights: &[ChannelWeightMatrix]) -> Result<ChannelScores> {
    let first = weights.first().ok_or_else(|| Error::Argument("no weight matrices".into()))?;
    let c = first.channels;
    if weights.iter().any(|w| w.channels != c) {
        return Err(Error::Argument("weight matrices disagree on channel count".into()));
    }
    let mut s = vec![0.0; c];
    let mut rows = 0usize;
    for w in weights {
        for p in 0..w.pairs() {
            s.iter_mut().zip(w.row(p)).for_each(|(a, v)| *a += v);
            rows += 1;
        }
    }
    s.iter_mut().for_each(|v| *v /= rows as f64);
    normalize(&mut s)?;
    Ok(ChannelScores {
        s,
        provenance: ScoreProvenance { matrices: weights.len(), pairs_per_matrix: first.pairs(), seeds: 1 },
    })
}

/// Indices of the `k` largest scores, ties broken towards the lower index.
pub fn top_k(s: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > s.len() {
        return Err(Error::Argument(alloc::format!("k = {k} exceeds {} channels", s.len())));
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Jaccard index between the top-`k` channels of `s` and a reference set of size `k`.
pub fn topk_jaccard(s: &ChannelScores, reference: &[usize], k: usize) -> Result<f64> {
    if reference.len() != k {
        return Err(Error::Argument(alloc::format!("reference has {} channels, k = {k}", reference.len())));
    }
    let top = top_k(&s.s, k)?;
    Ok(jaccard(&top, reference))
}

/// `|A ∩ B| / |A ∪ B|` of two channel-id sets (duplicates ignored).
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_unstable();
    a.dedup();
    b.sort_unstable();
    b.dedup();
    let inter = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        return 1.0;
    }
    inter as f64 / union as f64
}

/// Graph route of [`rollout`]: `maps` are per-layer `[B, H, T, T]`; returns `[B, H', T, T]`.
pub fn rollout_graph(g: &mut Graph, maps: &[Var], variant: RolloutVariant) -> Result<Var> {
    let last = *maps.last().ok_or_else(|| Error::Argument("attention stack has no layers".into()))?;
    let t = g.shape(last)[2];
    let eye = Tensor::eye(t);
    let factor = |g: &mut Graph, a: Var| -> Result<Var> {
        let a = match variant {
            RolloutVariant::AroH => a,
            _ => g.mean_axis(a, 1)?,
        };
        let a = g.add_const(a, &eye)?;
        g.rownorm(a)
    };
    if variant == RolloutVariant::NoAro {
        return factor(g, last);
    }
    let mut acc = factor(g, maps[0])?;
    for &m in &maps[1..] {
        let f = factor(g, m)?;
        let p = g.bmm(f, acc, false)?;
        acc = g.rownorm(p)?;
    }
    Ok(acc)
}

/// Graph route of [`extract_weights`]: `[B, H', T, T]` rollout to `[B, N, C]` weights.
pub fn extract_weights_graph(g: &mut Graph, r: Var, n_cat: usize, channels: usize) -> Result<Var> {
    let shape = g.shape(r).to_vec();
    if shape.len() != 4 || shape[2] != n_cat + channels || shape[3] != n_cat + channels {
        return Err(Error::Dimension {
            op: "extract_weights_graph",
            detail: alloc::format!("rollout {shape:?} for {n_cat} CATs + {channels} channels"),
        });
    }
    let (b, heads) = (shape[0], shape[1]);
    let rows = g.narrow(r, 2, 0, n_cat)?;
    let block = g.narrow(rows, 3, n_cat, channels)?;
    let cat_major = g.permute(block, &[0, 2, 1, 3])?;
    let flat = g.reshape(cat_major, &[b, n_cat * heads, channels])?;
    let pairs = n_cat * heads;
    g.rownorm(flat).map_err(|e| match e {
        Error::DegenerateRow { row, .. } => {
            let p = row % pairs;
            Error::DegenerateCat { pair: p, cat: p / heads, head: p % heads }
        }
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stochastic(t: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut m: Vec<f64> = (0..t * t).map(|_| rng.random_range(0.01..1.0)).collect();
        rownorm_in_place(&mut m, t);
        m
    }

    fn perm_matrix(p: &[usize]) -> Vec<f64> {
        let t = p.len();
        let mut m = vec![0.0; t * t];
        for (i, &j) in p.iter().enumerate() {
            m[i * t + j] = 1.0;
        }
        m
    }

    #[test]
    fn residual_normalize_examples() {
        let eye = Tensor::eye(3);
        assert_eq!(residual_normalize(eye.data(), 3).unwrap(), eye.data());

        let t = 4;
        let u = vec![1.0 / t as f64; t * t];
        let a = residual_normalize(&u, t).unwrap();
        for i in 0..t {
            for j in 0..t {
                let want = if i == j { (0.25 + 1.0) / 2.0 } else { 0.25 / 2.0 };
                assert!((a[i * t + j] - want).abs() < 1e-15);
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = residual_normalize(&stochastic(5, &mut rng), 5).unwrap();
        for row in a.chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        }
        let mut neg = Tensor::eye(2).into_data();
        neg[0] = 1.5;
        neg[1] = -0.5;
        assert!(matches!(residual_normalize(&neg, 2), Err(Error::Domain(_))));
    }

    #[test]
    fn rollout_identity_and_single_layer() {
        let id = AttentionStack::identity(3, 2, 4);
        for v in RolloutVariant::ALL {
            let r = rollout(&id, v).unwrap();
            for h in 0..r.heads {
                assert_eq!(r.head(h), Tensor::eye(4).data());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let maps: Vec<f64> = (0..2).flat_map(|_| stochastic(3, &mut rng)).collect();
        let one = AttentionStack::new(1, 2, 3, maps).unwrap();
        let r = rollout_per_head(&one).unwrap();
        for h in 0..2 {
            assert_eq!(r.head(h), residual_normalize(one.map(0, h), 3).unwrap().as_slice());
        }
    }

    /// Brute-force oracle: explicit index sums for a 2-layer product of 2×2 factors.
    #[test]
    fn two_layer_rollout_matches_hand_product() {
        let l1 = [0.9, 0.1, 0.3, 0.7];
        let l2 = [0.2, 0.8, 0.6, 0.4];
        let stack = AttentionStack::new(2, 1, 2, [l1, l2].concat()).unwrap();
        let norm = |a: [f64; 4]| {
            let m = [a[0] + 1.0, a[1], a[2], a[3] + 1.0];
            let (s0, s1) = (m[0] + m[1], m[2] + m[3]);
            [m[0] / s0, m[1] / s0, m[2] / s1, m[3] / s1]
        };
        let (a1, a2) = (norm(l1), norm(l2));
        let mut want = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    want[i * 2 + j] += a2[i * 2 + k] * a1[k * 2 + j];
                }
            }
        }
        let r = rollout_per_head(&stack).unwrap();
        for (x, y) in r.r.iter().zip(want) {
            assert!((x - y).abs() < 1e-15);
        }
        // hand values: a1 = [[0.95, 0.05], [0.15, 0.85]], a2 = [[0.6, 0.4], [0.3, 0.7]]
        assert!((r.r[0] - 0.63).abs() < 1e-12);
    }

    #[test]
    fn averaged_permutation_heads_differ_from_per_head() {
        let p = perm_matrix(&[1, 2, 0]);
        let pt = perm_matrix(&[2, 0, 1]);
        let stack = AttentionStack::new(2, 2, 3, [p.clone(), pt.clone(), p.clone(), pt].concat()).unwrap();
        let avg = head_average(&stack, 0);
        for i in 0..3 {
            let col: f64 = (0..3).map(|r| avg[r * 3 + i]).sum();
            let row: f64 = avg[i * 3..i * 3 + 3].iter().sum();
            assert!((col - 1.0).abs() < 1e-15 && (row - 1.0).abs() < 1e-15);
        }
        let a = rollout_avg(&stack).unwrap();
        let h = rollout_per_head(&stack).unwrap();
        assert!(a.r.iter().zip(h.head(0)).any(|(x, y)| (x - y).abs() > 1e-3));
        assert!(a.r.iter().zip(h.head(1)).any(|(x, y)| (x - y).abs() > 1e-3));
        // direct computation: avg map has 0 diagonal and 1/2 elsewhere, so rownorm(A + I) has
        // 1/2 on the diagonal and 1/4 elsewhere; its square has 3/8 and 5/16.
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 0.375 } else { 0.3125 };
                assert!((a.r[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn no_aro_ignores_earlier_layers() {
        let stack = AttentionStack::new(2, 1, 3, [perm_matrix(&[1, 2, 0]), Tensor::eye(3).into_data()].concat()).unwrap();
        let no = last_layer_attention(&stack).unwrap();
        assert_eq!(no.r, Tensor::eye(3).data());
        let aro = rollout_per_head(&stack).unwrap();
        assert_ne!(aro.r, Tensor::eye(3).data());
        let avg = rollout_avg(&stack).unwrap();
        assert_eq!(avg.r, aro.r);
    }

    #[test]
    fn extract_weights_shapes_and_degenerate_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = 5;
        let maps: Vec<f64> = (0..4).flat_map(|_| stochastic(t, &mut rng)).collect();
        let stack = AttentionStack::new(2, 2, t, maps).unwrap();
        let w = extract_weights(&rollout_per_head(&stack).unwrap(), 2, 3).unwrap();
        assert_eq!(w.channel_major().shape(), &[3, 4]);
        assert_eq!(w.w_eff_tensor().shape(), &[4, 3]);
        assert_eq!(w.channel_major(), w.w_eff_tensor().transpose2().unwrap());

        let id = rollout_per_head(&AttentionStack::identity(2, 2, t)).unwrap();
        assert_eq!(extract_weights(&id, 2, 3).unwrap_err(), Error::DegenerateCat { pair: 0, cat: 0, head: 0 });
    }

    #[test]
    fn channel_scores_examples() {
        let w = ChannelWeightMatrix { n_cat: 2, heads: 1, channels: 3, w_eff: vec![0.2, 0.3, 0.5, 0.2, 0.3, 0.5] };
        let s = channel_scores(&[w]).unwrap();
        for (a, b) in s.s.iter().zip([0.2, 0.3, 0.5]) {
            assert!((a - b).abs() < 1e-15);
        }
        let w = ChannelWeightMatrix { n_cat: 2, heads: 1, channels: 4, w_eff: vec![1., 0., 0., 0., 0., 1., 0., 0.] };
        let s = channel_scores(&[w]).unwrap();
        assert_eq!(s.s, vec![0.5, 0.5, 0.0, 0.0]);
        assert!((s.s.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(channel_scores(&[]).is_err());
    }

    #[test]
    fn jaccard_examples() {
        let scores = |v: Vec<f64>| ChannelScores { s: v, provenance: ScoreProvenance::default() };
        let s = scores((0..20).map(|i| 20.0 - i as f64).collect());
        let top: Vec<usize> = (0..10).collect();
        assert_eq!(topk_jaccard(&s, &top, 10).unwrap(), 1.0);
        let disjoint: Vec<usize> = (10..20).collect();
        assert_eq!(topk_jaccard(&s, &disjoint, 10).unwrap(), 0.0);
        let half: Vec<usize> = (5..15).collect();
        assert!((topk_jaccard(&s, &half, 10).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((topk_jaccard(&s, &half, 10).unwrap() - 0.3333).abs() < 1e-4);
        assert!(topk_jaccard(&s, &(0..21).collect::<Vec<_>>(), 21).is_err());
        assert!(topk_jaccard(&s, &top, 9).is_err());
        // ties favour lower indices
        assert_eq!(top_k(&[1.0, 2.0, 2.0, 2.0], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn graph_route_matches_plain_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, l, h, n_cat, c) = (2, 3, 2, 2, 4);
        let t = n_cat + c;
        let mut g = Graph::new();
        let mut maps = Vec::new();
        for _ in 0..l {
            let data: Vec<f64> = (0..b * h).flat_map(|_| stochastic(t, &mut rng)).collect();
            maps.push(g.constant(Tensor::new(&[b, h, t, t], data).unwrap()));
        }
        for v in RolloutVariant::ALL {
            let r = rollout_graph(&mut g, &maps, v).unwrap();
            let w = extract_weights_graph(&mut g, r, n_cat, c).unwrap();
            for s in 0..b {
                let stack = AttentionStack::from_graph(&g, &maps, s).unwrap();
                let plain = extract_weights(&rollout(&stack, v).unwrap(), n_cat, c).unwrap();
                let n = plain.pairs();
                let got = &g.value(w).data()[s * n * c..(s + 1) * n * c];
                for (x, y) in got.iter().zip(&plain.w_eff) {
                    assert!((x - y).abs() < 1e-12, "{v:?}");
                }
            }
        }
    }

    mod props {
        use super::super::*;
        use crate::chat::{build_mask, random_stack, MaskStrategy};
        use proptest::prelude::*;
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;

        fn permute_stack(s: &AttentionStack, n_cat: usize, perm: &[usize]) -> AttentionStack {
            let t = s.tokens;
            let idx = |i: usize| if i < n_cat { i } else { n_cat + perm[i - n_cat] };
            let mut out = s.clone();
            for l in 0..s.n_layers {
                for h in 0..s.n_heads {
                    let src = s.map(l, h).to_vec();
                    let dst = out.map_mut(l, h);
                    for i in 0..t {
                        for j in 0..t {
                            dst[i * t + j] = src[idx(i) * t + idx(j)];
                        }
                    }
                }
            }
            out
        }

        proptest! {
            #[test]
            fn variants_stay_row_stochastic(seed in any::<u64>(), layers in 1usize..4, heads in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = build_mask(MaskStrategy::C, 3, 5).unwrap();
                let stack = random_stack(&mask, layers, heads, &mut rng);
                for v in RolloutVariant::ALL {
                    let r = rollout(&stack, v).unwrap();
                    prop_assert_eq!(r.heads, v.heads_out(heads));
                    for row in r.r.chunks(8) {
                        prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                        prop_assert!(row.iter().all(|&x| x >= 0.0));
                    }
                    let w = extract_weights(&r, 3, 5).unwrap();
                    for p in 0..w.pairs() {
                        prop_assert!((w.row(p).iter().sum::<f64>() - 1.0).abs() < 1e-9);
                        prop_assert!(w.row(p).iter().all(|&x| x >= 0.0));
                    }
                }
            }

            #[test]
            fn single_head_variants_agree_bitwise(seed in any::<u64>(), layers in 1usize..4) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = build_mask(MaskStrategy::C, 2, 4).unwrap();
                let stack = random_stack(&mask, layers, 1, &mut rng);
                prop_assert_eq!(rollout_per_head(&stack).unwrap().r, rollout_avg(&stack).unwrap().r);
                if layers == 1 {
                    prop_assert_eq!(rollout_per_head(&stack).unwrap().r, last_layer_attention(&stack).unwrap().r);
                }
            }

            #[test]
            fn channel_permutation_permutes_weight_columns(
                seed in any::<u64>(),
                perm in Just((0..6).collect::<Vec<usize>>()).prop_shuffle(),
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mask = build_mask(MaskStrategy::C, 2, 6).unwrap();
                let stack = random_stack(&mask, 2, 2, &mut rng);
                let pstack = permute_stack(&stack, 2, &perm);
                for v in RolloutVariant::ALL {
                    let w = extract_weights(&rollout(&stack, v).unwrap(), 2, 6).unwrap();
                    let pw = extract_weights(&rollout(&pstack, v).unwrap(), 2, 6).unwrap();
                    for p in 0..w.pairs() {
                        for (j, &src) in perm.iter().enumerate() {
                            prop_assert!((pw.row(p)[j] - w.row(p)[src]).abs() < 1e-12);
                        }
                    }
                }
            }

            #[test]
            fn jaccard_symmetric_and_rank_invariant(
                s in proptest::collection::vec(0.0f64..1.0, 12),
                reference in Just((0..12).collect::<Vec<usize>>()).prop_shuffle(),
                k in 1usize..12,
            ) {
                let reference = &reference[..k];
                let top = top_k(&s, k).unwrap();
                prop_assert_eq!(jaccard(&top, reference), jaccard(reference, &top));
                let scores = ChannelScores { s: s.clone(), provenance: ScoreProvenance::default() };
                let warped = ChannelScores { s: s.iter().map(|v| 3.0 * v * v * v + 0.5).collect(), provenance: ScoreProvenance::default() };
                prop_assert_eq!(topk_jaccard(&scores, reference, k).unwrap(), topk_jaccard(&warped, reference, k).unwrap());
            }
        }
    }
}
