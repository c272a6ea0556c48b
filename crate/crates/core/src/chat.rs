//! Channel-token transformer with learnable channel-aggregation tokens (CATs).
//!
//! Each downsampled channel is one token of width `d` (its whole time course).
//! `n_cat` learnable tokens are prepended, a learnable positional table covers
//! all `n_cat + C` positions, and the stack of masked encoder layers records
//! the pre-dropout attention maps of every head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{BatchNormState, Graph, Mode, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::prep::{SeegSegment, TOKEN_FS};
use crate::rollout::{AttentionStack, ChannelWeightMatrix};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum MaskStrategy {
    /// No masking.
    A,
    /// CAT rows as in `C`, channel rows unmasked.
    B,
    /// CATs see themselves and all channels; channels see only channels.
    #[default]
    C,
}

impl MaskStrategy {
    pub const ALL: [MaskStrategy; 3] = [MaskStrategy::A, MaskStrategy::B, MaskStrategy::C];

    pub fn name(self) -> &'static str {
        match self {
            MaskStrategy::A => "a",
            MaskStrategy::B => "b",
            MaskStrategy::C => "c",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Self::A),
            "b" | "B" => Ok(Self::B),
            "c" | "C" => Ok(Self::C),
            other => Err(Error::Config(format!("unknown mask strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ChatConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_cat: usize,
    /// Token width `d`, equal to the downsampled segment length.
    pub token_dim: usize,
    pub dropout_p: f64,
    pub mask_strategy: MaskStrategy,
    /// FFN hidden width as a multiple of `token_dim`.
    pub ffn_mult: usize,
    /// Disabling the positional table makes the model channel-permutation equivariant.
    pub positional: bool,
    pub init_std: f64,
}

impl Default for ChatConfig {
    fn default() -> Self {
        Self::main(0)
    }
}

impl ChatConfig {
    /// 2 layers, 2 heads, 8 CATs, dropout 0.3.
    pub fn main(token_dim: usize) -> Self {
        Self {
            n_layers: 2,
            n_heads: 2,
            n_cat: 8,
            token_dim,
            dropout_p: 0.3,
            mask_strategy: MaskStrategy::C,
            ffn_mult: 2,
            positional: true,
            init_std: 0.02,
        }
    }

    /// 2 layers, 10 heads, 16 CATs, dropout 0.2.
    pub fn tuned(token_dim: usize) -> Self {
        Self { n_heads: 10, n_cat: 16, dropout_p: 0.2, ..Self::main(token_dim) }
    }

    pub fn preset(name: &str, token_dim: usize) -> Result<Self> {
        match name {
            "main" | "default" => Ok(Self::main(token_dim)),
            "tuned" => Ok(Self::tuned(token_dim)),
            other => Err(Error::Config(format!("unknown chat preset {other:?}"))),
        }
    }

    pub fn d_head(&self) -> usize {
        self.token_dim / self.n_heads.max(1)
    }

    pub fn pairs(&self) -> usize {
        self.n_cat * self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_layers == 0 || self.n_heads == 0 || self.n_cat == 0 || self.token_dim == 0 || self.ffn_mult == 0 {
            return bad(format!("layers, heads, CATs, token width and FFN multiple must be positive: {self:?}"));
        }
        if self.token_dim % self.n_heads != 0 {
            return bad(format!("token width {} is not divisible by {} heads", self.token_dim, self.n_heads));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        if !(self.init_std > 0.0) {
            return bad(format!("init_std {} must be positive", self.init_std));
        }
        Ok(())
    }
}

/// Additive attention mask over `n_cat + C` tokens with entries in `{0, -inf}`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    pub strategy: MaskStrategy,
    pub n_cat: usize,
    pub channels: usize,
    pub m: Tensor,
}

impl AttentionMask {
    pub fn tokens(&self) -> usize {
        self.n_cat + self.channels
    }

    pub fn is_masked(&self, i: usize, j: usize) -> bool {
        self.m.at2(i, j) == f64::NEG_INFINITY
    }
}

pub fn build_mask(strategy: MaskStrategy, n_cat: usize, channels: usize) -> Result<AttentionMask> {
    if n_cat == 0 || channels == 0 {
        return Err(Error::Config(format!("mask needs n_cat >= 1 and C >= 1, got {n_cat} and {channels}")));
    }
    let t = n_cat + channels;
    let mut m = vec![0.0; t * t];
    if strategy != MaskStrategy::A {
        for i in 0..t {
            for j in 0..n_cat {
                let masked = if i < n_cat { j != i } else { strategy == MaskStrategy::C };
                if masked {
                    m[i * t + j] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Ok(AttentionMask { strategy, n_cat, channels, m: Tensor::new(&[t, t], m)? })
}

/// Inverted dropout; identity in eval mode or at `p = 0`.
pub fn dropout<R: Rng + ?Sized>(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - p;
    let scale = 1.0 / keep;
    let n = g.value(x).numel();
    let factors = (0..n).map(|_| if rng.random::<f64>() < keep { scale } else { 0.0 }).collect();
    g.mul_const(x, factors)
}

/// Stacks preprocessed segments into a `[B, C, d]` token batch.
pub fn stack_segments(segs: &[&SeegSegment]) -> Result<Tensor> {
    let first = segs.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let shape = first.data.shape().to_vec();
    let mut data = Vec::with_capacity(segs.len() * first.data.numel());
    for s in segs {
        if s.data.shape() != shape.as_slice() {
            return Err(Error::Dimension { op: "stack_segments", detail: format!("{:?} vs {:?}", s.data.shape(), shape) });
        }
        data.extend_from_slice(s.data.data());
    }
    Tensor::new(&[segs.len(), shape[0], shape[1]], data)
}

#[derive(Clone, Copy, Debug)]
struct LayerIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    bn1_gamma: ParamId,
    bn1_beta: ParamId,
    bn2_gamma: ParamId,
    bn2_beta: ParamId,
}

/// Graph outputs of one forward pass.
pub struct ChatOutput {
    /// Final tokens `[B, T, d]`.
    pub tokens: Var,
    /// Per-layer pre-dropout attention `[B, H, T, T]`.
    pub maps: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct ChatModel {
    cfg: ChatConfig,
    channels: usize,
    mask: AttentionMask,
    params: ParamStore,
    cat: ParamId,
    pos: ParamId,
    layers: Vec<LayerIds>,
    bn: Vec<[BatchNormState; 2]>,
}

impl ChatModel {
    pub fn new<R: Rng + ?Sized>(cfg: ChatConfig, channels: usize, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mask = build_mask(cfg.mask_strategy, cfg.n_cat, channels)?;
        let d = cfg.token_dim;
        let hidden = cfg.ffn_mult * d;
        let std = cfg.init_std;
        let mut p = ParamStore::new();
        let cat = p.add("chat.cat", trunc_normal(&[cfg.n_cat, d], std, rng));
        let pos = p.add("chat.pos", Tensor::zeros(&[cfg.n_cat + channels, d]));
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let w = |name: &str, shape: &[usize], p: &mut ParamStore, rng: &mut R| {
                p.add(format!("chat.layer{l}.{name}"), trunc_normal(shape, std, rng))
            };
            let wq = w("wq", &[d, d], &mut p, rng);
            let wk = w("wk", &[d, d], &mut p, rng);
            let wv = w("wv", &[d, d], &mut p, rng);
            let wo = w("wo", &[d, d], &mut p, rng);
            let w1 = w("w1", &[d, hidden], &mut p, rng);
            let w2 = w("w2", &[hidden, d], &mut p, rng);
            let mut z = |name: &str, n: usize, v: f64| p.add(format!("chat.layer{l}.{name}"), Tensor::full(&[n], v));
            layers.push(LayerIds {
                wq,
                bq: z("bq", d, 0.0),
                wk,
                bk: z("bk", d, 0.0),
                wv,
                bv: z("bv", d, 0.0),
                wo,
                bo: z("bo", d, 0.0),
                w1,
                b1: z("b1", hidden, 0.0),
                w2,
                b2: z("b2", d, 0.0),
                bn1_gamma: z("bn1.gamma", d, 1.0),
                bn1_beta: z("bn1.beta", d, 0.0),
                bn2_gamma: z("bn2.gamma", d, 1.0),
                bn2_beta: z("bn2.beta", d, 0.0),
            });
        }
        let bn = (0..cfg.n_layers).map(|_| [BatchNormState::new(d), BatchNormState::new(d)]).collect();
        Ok(Self { cfg, channels, mask, params: p, cat, pos, layers, bn })
    }

    pub fn config(&self) -> &ChatConfig {
        &self.cfg
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn tokens(&self) -> usize {
        self.cfg.n_cat + self.channels
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    /// Replaces the attention mask; dimensions must match and no row may be fully masked.
    pub fn set_mask(&mut self, mask: AttentionMask) -> Result<()> {
        let t = self.tokens();
        if mask.n_cat != self.cfg.n_cat || mask.channels != self.channels || mask.m.shape() != [t, t] {
            return Err(Error::Dimension { op: "set_mask", detail: format!("mask {:?} for {t} tokens", mask.m.shape()) });
        }
        if let Some(row) = (0..t).find(|&i| (0..t).all(|j| mask.is_masked(i, j))) {
            return Err(Error::DegenerateRow { op: "set_mask", row });
        }
        self.mask = mask;
        Ok(())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn batchnorm_states(&self) -> &[[BatchNormState; 2]] {
        &self.bn
    }

    pub fn batchnorm_states_mut(&mut self) -> &mut [[BatchNormState; 2]] {
        &mut self.bn
    }

    /// Zeroes the attention output and FFN output projections of one layer.
    pub fn zero_sublayer_outputs(&mut self, layer: usize) {
        let ids = self.layers[layer];
        for id in [ids.wo, ids.bo, ids.w2, ids.b2] {
            self.params.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Prepends CATs to the `[B, C, d]` channel tokens and adds the positional table.
    pub fn embed_channels(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.channels || shape[2] != self.cfg.token_dim {
            return Err(Error::Dimension {
                op: "embed_channels",
                detail: format!("input {shape:?}, model expects [B, {}, {}]", self.channels, self.cfg.token_dim),
            });
        }
        let cats = g.repeat(p[self.cat], shape[0])?;
        let tokens = g.concat(cats, x, 1)?;
        if self.cfg.positional {
            g.add_broadcast(tokens, p[self.pos])
        } else {
            Ok(tokens)
        }
    }

    /// Multi-head masked attention over `[B, T, d]`; returns `[B·T, d]` and the `[B, H, T, T]` map.
    pub fn masked_mha<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        p: &Bound,
        layer: usize,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let ids = self.layers[layer];
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        if t != self.mask.tokens() {
            return Err(Error::Dimension { op: "masked_mha", detail: format!("{t} tokens for a {}-token mask", self.mask.tokens()) });
        }
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let flat = g.reshape(x, &[b * t, d])?;
        let heads = |g: &mut Graph, w: ParamId, bias: ParamId| -> Result<Var> {
            let y = g.matmul(flat, p[w])?;
            let y = g.add_row_bias(y, p[bias])?;
            let y = g.reshape(y, &[b, t, h, dh])?;
            g.permute(y, &[0, 2, 1, 3])
        };
        let q = heads(g, ids.wq, ids.bq)?;
        let k = heads(g, ids.wk, ids.bk)?;
        let v = heads(g, ids.wv, ids.bv)?;
        let scores = g.bmm(q, k, true)?;
        let scores = g.scale(scores, 1.0 / libm::sqrt(dh as f64))?;
        let scores = if self.mask.strategy == MaskStrategy::A { scores } else { g.add_const(scores, &self.mask.m)? };
        let attn = g.softmax(scores)?;
        let dropped = dropout(g, attn, self.cfg.dropout_p, mode, rng)?;
        let ctx = g.bmm(dropped, v, false)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * t, d])?;
        let out = g.matmul(ctx, p[ids.wo])?;
        let out = g.add_row_bias(out, p[ids.bo])?;
        Ok((out, attn))
    }

    /// `BN(x + MHA(x))` then `BN(. + FFN(.))`, statistics over batch and tokens.
    pub fn encoder_layer<R: Rng + ?Sized>(
        &mut self,
        g: &mut Graph,
        p: &Bound,
        layer: usize,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Var, Var)> {
        let ids = self.layers[layer];
        let shape = g.shape(x).to_vec();
        let (b, t, d) = (shape[0], shape[1], shape[2]);
        let pdrop = self.cfg.dropout_p;
        let (attn_out, map) = self.masked_mha(g, p, layer, x, mode, rng)?;
        let flat = g.reshape(x, &[b * t, d])?;
        let attn_out = dropout(g, attn_out, pdrop, mode, rng)?;
        let res = g.add(flat, attn_out)?;
        let [bn1, bn2] = &mut self.bn[layer];
        let h1 = g.batchnorm(res, p[ids.bn1_gamma], p[ids.bn1_beta], bn1, mode)?;
        let f = g.matmul(h1, p[ids.w1])?;
        let f = g.add_row_bias(f, p[ids.b1])?;
        let f = g.gelu(f)?;
        let f = dropout(g, f, pdrop, mode, rng)?;
        let f = g.matmul(f, p[ids.w2])?;
        let f = g.add_row_bias(f, p[ids.b2])?;
        let f = dropout(g, f, pdrop, mode, rng)?;
        let res = g.add(h1, f)?;
        let h2 = g.batchnorm(res, p[ids.bn2_gamma], p[ids.bn2_beta], bn2, mode)?;
        Ok((g.reshape(h2, &[b, t, d])?, map))
    }

    /// Full forward over a `[B, C, d]` batch of downsampled, Z-scored segments.
    pub fn forward<R: Rng + ?Sized>(&mut self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, rng: &mut R) -> Result<ChatOutput> {
        let mut tokens = self.embed_channels(g, p, x)?;
        let mut maps = Vec::with_capacity(self.cfg.n_layers);
        for l in 0..self.cfg.n_layers {
            let (next, map) = self.encoder_layer(g, p, l, tokens, mode, rng)?;
            tokens = next;
            maps.push(map);
        }
        Ok(ChatOutput { tokens, maps })
    }

    /// Attention stacks of a batch of preprocessed segments, one per segment.
    pub fn attention_stacks<R: Rng + ?Sized>(&mut self, segs: &[&SeegSegment], mode: Mode, rng: &mut R) -> Result<Vec<AttentionStack>> {
        for s in segs {
            if s.fs != TOKEN_FS {
                return Err(Error::Argument(format!("segment at {} Hz, tokens expect {TOKEN_FS} Hz", s.fs)));
            }
        }
        let x = stack_segments(segs)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let x = g.constant(x);
        let out = self.forward(&mut g, &p, x, mode, rng)?;
        (0..segs.len()).map(|b| AttentionStack::from_graph(&g, &out.maps, b)).collect()
    }
}

/// Stack whose maps are softmaxes of standard-normal logits under `mask`, for analysis tests.
pub fn random_stack<R: Rng + ?Sized>(mask: &AttentionMask, n_layers: usize, n_heads: usize, rng: &mut R) -> AttentionStack {
    use rand_distr::{Distribution, StandardNormal};
    let t = mask.tokens();
    let mut maps = Vec::with_capacity(n_layers * n_heads * t * t);
    for _ in 0..n_layers * n_heads {
        for i in 0..t {
            let row: Vec<f64> = (0..t).map(|j| { let z: f64 = StandardNormal.sample(rng); z } + mask.m.at2(i, j)).collect();
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| libm::exp(v - mx)).collect();
            let z: f64 = e.iter().sum();
            maps.extend(e.iter().map(|v| v / z));
        }
    }
    AttentionStack { n_layers, n_heads, tokens: t, maps }
}

/// Mixes the raw channels into `N` virtual channels: `W_eff · raw`, at the original rate.
pub fn reweight(raw: &SeegSegment, w: &ChannelWeightMatrix) -> Result<Tensor> {
    if w.channels != raw.channels() {
        return Err(Error::Dimension { op: "reweight", detail: format!("{} weight columns for {} channels", w.channels, raw.channels()) });
    }
    for p in 0..w.pairs() {
        let s: f64 = w.row(p).iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(Error::Domain(format!("weight row {p} sums to {s}")));
        }
    }
    w.w_eff_tensor().matmul(&raw.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rollout::{extract_weights, rollout_per_head};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    fn run(model: &mut ChatModel, x: &Tensor, mode: Mode, seed: u64) -> (Tensor, Vec<Tensor>) {
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let out = model.forward(&mut g, &p, xv, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        (g.value(out.tokens).clone(), out.maps.iter().map(|m| g.value(*m).clone()).collect())
    }

    #[test]
    fn presets_and_validation() {
        let m = ChatConfig::main(60);
        assert_eq!((m.n_layers, m.n_heads, m.n_cat, m.dropout_p), (2, 2, 8, 0.3));
        assert_eq!(m.pairs(), 16);
        let t = ChatConfig::tuned(60);
        assert_eq!((t.n_layers, t.n_heads, t.n_cat, t.dropout_p), (2, 10, 16, 0.2));
        assert_eq!(t.d_head(), 6);
        assert!(ChatConfig { n_heads: 7, ..m.clone() }.validate().is_err());
        assert!(ChatConfig { dropout_p: 1.0, ..m }.validate().is_err());
    }

    #[test]
    fn mask_examples() {
        let a = build_mask(MaskStrategy::A, 3, 4).unwrap();
        assert!(a.m.data().iter().all(|&v| v == 0.0));

        let c = build_mask(MaskStrategy::C, 2, 3).unwrap();
        assert!(!c.is_masked(0, 0) && c.is_masked(0, 1));
        assert!(c.is_masked(1, 0) && !c.is_masked(1, 1));
        for i in 2..5 {
            assert!(c.is_masked(i, 0) && c.is_masked(i, 1));
            assert!((2..5).all(|j| !c.is_masked(i, j)));
        }
        for i in 0..2 {
            assert!((2..5).all(|j| !c.is_masked(i, j)));
        }

        let b = build_mask(MaskStrategy::B, 2, 3).unwrap();
        assert!(b.is_masked(0, 1) && !b.is_masked(0, 0));
        assert!((2..5).all(|i| (0..5).all(|j| !b.is_masked(i, j))));

        for s in MaskStrategy::ALL {
            let m = build_mask(s, 8, 32).unwrap();
            for i in 0..40 {
                assert!((0..40).any(|j| !m.is_masked(i, j)), "{s:?} row {i}");
            }
        }
        assert!(build_mask(MaskStrategy::C, 0, 3).is_err());
        assert!(MaskStrategy::parse("d").is_err());
    }

    #[test]
    fn embed_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = ChatConfig { token_dim: 6, ..ChatConfig::main(6) };
        let mut model = ChatModel::new(cfg, 3, &mut rng).unwrap();
        model.params_mut().tensors_mut()[0] = Tensor::zeros(&[8, 6]);
        let x = random(&[2, 3, 6], &mut rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x.clone());
        let tok = model.embed_channels(&mut g, &p, xv).unwrap();
        assert_eq!(g.shape(tok), &[2, 11, 6]);
        let v = g.value(tok).data();
        for b in 0..2 {
            assert!(v[b * 66..b * 66 + 48].iter().all(|&z| z == 0.0));
            assert_eq!(&v[b * 66 + 48..(b + 1) * 66], &x.data()[b * 18..(b + 1) * 18]);
        }
        let wrong = g.constant(Tensor::zeros(&[2, 3, 5]));
        assert!(matches!(model.embed_channels(&mut g, &p, wrong), Err(Error::Dimension { .. })));
    }

    #[test]
    fn stack_shape_and_mask_zeros() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = ChatModel::new(ChatConfig::main(20), 32, &mut rng).unwrap();
        let x = random(&[2, 32, 20], &mut rng);
        let (_, maps) = run(&mut model, &x, Mode::Train, 3);
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].shape(), &[2, 2, 40, 40]);
        for m in &maps {
            for (r, row) in m.data().chunks(40).enumerate() {
                let i = r % 40;
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                if i >= 8 {
                    assert!(row[..8].iter().all(|&v| v == 0.0));
                } else {
                    assert!(row[..8].iter().enumerate().all(|(j, &v)| j == i || v == 0.0));
                }
            }
        }
    }

    #[test]
    fn diagonal_mask_gives_identity_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = ChatConfig { n_cat: 2, n_layers: 1, ..ChatConfig::main(4) };
        let mut model = ChatModel::new(cfg, 3, &mut rng).unwrap();
        let mut diag = build_mask(MaskStrategy::A, 2, 3).unwrap();
        for i in 0..5 {
            for j in (0..5).filter(|&j| j != i) {
                diag.m.data_mut()[i * 5 + j] = f64::NEG_INFINITY;
            }
        }
        diag.strategy = MaskStrategy::C;
        model.set_mask(diag).unwrap();
        let x = random(&[2, 3, 4], &mut rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x);
        let tok = model.embed_channels(&mut g, &p, xv).unwrap();
        let (out, map) = model.masked_mha(&mut g, &p, 0, tok, Mode::Eval, &mut rng).unwrap();
        for blk in g.value(map).data().chunks(25) {
            assert_eq!(blk, Tensor::eye(5).data());
        }
        // output is the value projection followed by the output projection
        let t = g.value(tok).clone().reshape(&[10, 4]).unwrap();
        let ps = model.params();
        let named = |n: &str| ps.get(ps.id_of(n).unwrap());
        let want = t.matmul(named("chat.layer0.wv")).unwrap().matmul(named("chat.layer0.wo")).unwrap();
        assert!(g.value(out).max_abs_diff(&want) < 1e-12);

        let mut full = build_mask(MaskStrategy::A, 2, 3).unwrap();
        full.m.data_mut()[..5].iter_mut().for_each(|v| *v = f64::NEG_INFINITY);
        assert!(matches!(model.set_mask(full), Err(Error::DegenerateRow { row: 0, .. })));
    }

    #[test]
    fn single_head_map_is_plain_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ChatConfig { n_heads: 1, n_layers: 1, mask_strategy: MaskStrategy::A, ..ChatConfig::main(6) };
        let model = ChatModel::new(cfg, 3, &mut rng).unwrap();
        let x = random(&[1, 3, 6], &mut rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x);
        let tok = model.embed_channels(&mut g, &p, xv).unwrap();
        let (_, map) = model.masked_mha(&mut g, &p, 0, tok, Mode::Eval, &mut rng).unwrap();
        // oracle: softmax(Q Kᵀ / sqrt(d)) computed with plain tensors
        let t = g.value(tok).clone().reshape(&[11, 6]).unwrap();
        let wq = &model.params().tensors()[2];
        let wk = &model.params().tensors()[3];
        let q = t.matmul(wq).unwrap();
        let k = t.matmul(wk).unwrap();
        let s = q.matmul(&k.transpose2().unwrap()).unwrap();
        for i in 0..11 {
            let row: Vec<f64> = (0..11).map(|j| s.at2(i, j) / libm::sqrt(6.0)).collect();
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = row.iter().map(|v| libm::exp(v - mx)).sum();
            for j in 0..11 {
                let want = libm::exp(row[j] - mx) / z;
                assert!((g.value(map).data()[i * 11 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_sublayers_pass_residual_through_batchnorm() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = ChatConfig { n_layers: 1, dropout_p: 0.0, ..ChatConfig::main(8) };
        let mut model = ChatModel::new(cfg, 5, &mut rng).unwrap();
        model.zero_sublayer_outputs(0);
        let x = random(&[4, 5, 8], &mut rng);
        let (out, _) = run(&mut model, &x, Mode::Train, 0);
        // oracle: the embedded tokens standardized twice per feature over batch x tokens
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x);
        let tok = model.embed_channels(&mut g, &p, xv).unwrap();
        let rows = g.value(tok).clone().reshape(&[4 * 13, 8]).unwrap();
        let standardize = |m: &Tensor| {
            let (n, f) = (m.shape()[0], m.shape()[1]);
            let mut o = m.clone();
            for c in 0..f {
                let col: Vec<f64> = (0..n).map(|r| m.at2(r, c)).collect();
                let (mean, std) = crate::prep::mean_std(&col);
                let inv = 1.0 / libm::sqrt(std * std + 1e-5);
                for r in 0..n {
                    o.data_mut()[r * f + c] = (col[r] - mean) * inv;
                }
            }
            o
        };
        let want = standardize(&standardize(&rows));
        assert!(out.reshape(&[52, 8]).unwrap().max_abs_diff(&want) < 1e-9);
    }

    #[test]
    fn eval_is_deterministic_and_batch_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut model = ChatModel::new(ChatConfig::main(10), 6, &mut rng).unwrap();
        let one = random(&[1, 6, 10], &mut rng);
        let x = Tensor::new(&[3, 6, 10], one.data().repeat(3)).unwrap();
        let (a, ma) = run(&mut model, &x, Mode::Eval, 1);
        let (b, mb) = run(&mut model, &x, Mode::Eval, 2);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        let per = 2 * 14 * 14;
        for m in &ma {
            assert_eq!(&m.data()[..per], &m.data()[per..2 * per]);
            assert_eq!(&m.data()[..per], &m.data()[2 * per..]);
        }
    }

    #[test]
    fn cat_gradient_is_nonzero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut model = ChatModel::new(ChatConfig { n_layers: 1, ..ChatConfig::main(8) }, 4, &mut rng).unwrap();
        let x = random(&[2, 4, 8], &mut rng);
        let mut g = Graph::new();
        let p = model.params().bind(&mut g);
        let xv = g.constant(x);
        let out = model.forward(&mut g, &p, xv, Mode::Train, &mut rng).unwrap();
        let sq = g.square(out.tokens).unwrap();
        let cats = g.narrow(sq, 1, 0, 8).unwrap();
        let loss = g.sum(cats).unwrap();
        let grads = g.backward(loss).unwrap();
        let gc = grads.get(p.vars()[0]).unwrap();
        assert!(gc.iter().map(|v| v * v).sum::<f64>() > 0.0);
    }

    #[test]
    fn channel_permutation_equivariance_without_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = ChatConfig { positional: false, ..ChatConfig::main(8) };
        let mut model = ChatModel::new(cfg, 5, &mut rng).unwrap();
        let x = random(&[2, 5, 8], &mut rng);
        let perm = [3usize, 0, 4, 1, 2];
        let mut px = Tensor::zeros(&[2, 5, 8]);
        for b in 0..2 {
            for (i, &src) in perm.iter().enumerate() {
                px.data_mut()[(b * 5 + i) * 8..(b * 5 + i + 1) * 8].copy_from_slice(&x.data()[(b * 5 + src) * 8..(b * 5 + src + 1) * 8]);
            }
        }
        let (_, ma) = run(&mut model, &x, Mode::Eval, 0);
        let (_, mb) = run(&mut model, &px, Mode::Eval, 0);
        let t = 13;
        let idx = |i: usize| if i < 8 { i } else { 8 + perm[i - 8] };
        for (a, b) in ma.iter().zip(&mb) {
            for blk in 0..4 {
                for i in 0..t {
                    for j in 0..t {
                        let got = b.data()[blk * t * t + i * t + j];
                        let want = a.data()[blk * t * t + idx(i) * t + idx(j)];
                        assert!((got - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn reweight_examples() {
        let raw = SeegSegment::new(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(), 2000, 0, "s").unwrap();
        let sel = ChannelWeightMatrix { n_cat: 2, heads: 1, channels: 3, w_eff: vec![0., 0., 1., 1., 0., 0.] };
        assert_eq!(reweight(&raw, &sel).unwrap().data(), &[5.0, 6.0, 1.0, 2.0]);
        let third = 1.0 / 3.0;
        let mean = ChannelWeightMatrix { n_cat: 1, heads: 1, channels: 3, w_eff: vec![third; 3] };
        let m = reweight(&raw, &mean).unwrap();
        assert!((m.data()[0] - 3.0).abs() < 1e-12 && (m.data()[1] - 4.0).abs() < 1e-12);
        let short = ChannelWeightMatrix { n_cat: 1, heads: 1, channels: 2, w_eff: vec![0.5; 2] };
        assert!(matches!(reweight(&raw, &short), Err(Error::Dimension { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = ChatModel::new(ChatConfig::main(4), 3, &mut rng).unwrap();
        let seg = SeegSegment::new(random(&[3, 4], &mut rng), TOKEN_FS, 0, "s").unwrap();
        let stacks = model.attention_stacks(&[&seg], Mode::Eval, &mut rng).unwrap();
        let w = extract_weights(&rollout_per_head(&stacks[0]).unwrap(), 8, 3).unwrap();
        assert_eq!(w.pairs(), 16);
        assert_eq!(reweight(&raw, &w).unwrap().shape(), &[16, 2]);
    }
}
