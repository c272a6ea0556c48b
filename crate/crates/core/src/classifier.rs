//! Small shallow convolutional classifier used downstream of channel selection.
//!
//! Pipeline: shared spatial filters across the `N` inputs, a bank of temporal
//! filters, squaring, average pooling over time bins, `log1p`, dropout and a
//! linear head. Spatial mixing and the bias-free temporal filtering are both
//! linear, so applying the spatial filters first gives the same function class
//! as temporal-then-spatial with shared spatial weights, at lower cost.

use alloc::format;
use alloc::string::String;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mode, Var};
use crate::chat::dropout;
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ClassifierConfig {
    /// Input rows `N`.
    pub in_channels: usize,
    pub n_classes: usize,
    /// Input length `L` in samples.
    pub in_len: usize,
    pub n_spatial: usize,
    pub n_filters: usize,
    pub kernel_len: usize,
    pub pool: usize,
    pub dropout_p: f64,
}

impl ClassifierConfig {
    /// Default sizes for an `N×L` input: 4 spatial and 4 temporal filters,
    /// a kernel of about a twentieth of the window and close to 8 time bins.
    pub fn for_input(in_channels: usize, n_classes: usize, in_len: usize) -> Self {
        let kernel_len = (in_len / 20).clamp(3, 25).min(in_len);
        let conv_len = in_len + 1 - kernel_len;
        let pool = (1..=conv_len)
            .filter(|p| conv_len % p == 0)
            .min_by_key(|p| (conv_len / p).abs_diff(8))
            .unwrap_or(1);
        Self { in_channels, n_classes, in_len, n_spatial: 4, n_filters: 4, kernel_len, pool, dropout_p: 0.25 }
    }

    pub fn conv_len(&self) -> usize {
        (self.in_len + 1).saturating_sub(self.kernel_len)
    }

    pub fn bins(&self) -> usize {
        self.conv_len() / self.pool.max(1)
    }

    pub fn features(&self) -> usize {
        self.n_spatial * self.n_filters * self.bins()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.n_spatial == 0 || self.n_filters == 0 || self.kernel_len == 0 || self.pool == 0 {
            return bad(format!("classifier sizes must be positive: {self:?}"));
        }
        if self.n_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.n_classes));
        }
        if self.kernel_len > self.in_len {
            return bad(format!("kernel {} longer than input {}", self.kernel_len, self.in_len));
        }
        if self.conv_len() % self.pool != 0 {
            return bad(format!("pool {} does not divide convolved length {}", self.pool, self.conv_len()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout_p));
        }
        Ok(())
    }
}

/// Size choices independent of the input shape; zero kernel or pool means automatic.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ClassifierSettings {
    pub n_spatial: usize,
    pub n_filters: usize,
    pub kernel_len: usize,
    pub pool: usize,
    pub dropout_p: f64,
}

impl Default for ClassifierSettings {
    fn default() -> Self {
        Self { n_spatial: 4, n_filters: 4, kernel_len: 0, pool: 0, dropout_p: 0.25 }
    }
}

impl ClassifierSettings {
    pub fn resolve(&self, in_channels: usize, n_classes: usize, in_len: usize) -> Result<ClassifierConfig> {
        let mut c = ClassifierConfig::for_input(in_channels, n_classes, in_len);
        c.n_spatial = self.n_spatial;
        c.n_filters = self.n_filters;
        c.dropout_p = self.dropout_p;
        if self.kernel_len > 0 {
            c.kernel_len = self.kernel_len;
            if self.pool == 0 {
                let conv_len = c.conv_len();
                c.pool = (1..=conv_len.max(1)).filter(|p| conv_len % p == 0).min_by_key(|p| (conv_len / p).abs_diff(8)).unwrap_or(1);
            }
        }
        if self.pool > 0 {
            c.pool = self.pool;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug)]
pub struct Classifier {
    cfg: ClassifierConfig,
    params: ParamStore,
    spatial: ParamId,
    conv_w: ParamId,
    conv_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Classifier {
    pub fn new<R: Rng + ?Sized>(cfg: ClassifierConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let inv_sqrt = |n: usize| 1.0 / libm::sqrt(n as f64);
        let mut p = ParamStore::new();
        let spatial = p.add("clf.spatial", trunc_normal(&[cfg.n_spatial, cfg.in_channels], inv_sqrt(cfg.in_channels), rng));
        let conv_w = p.add("clf.conv.w", trunc_normal(&[cfg.n_filters, cfg.kernel_len], inv_sqrt(cfg.kernel_len), rng));
        let conv_b = p.add("clf.conv.b", Tensor::zeros(&[cfg.n_filters]));
        let head_w = p.add("clf.head.w", trunc_normal(&[cfg.features(), cfg.n_classes], inv_sqrt(cfg.features()), rng));
        let head_b = p.add("clf.head.b", Tensor::zeros(&[cfg.n_classes]));
        Ok(Self { cfg, params: p, spatial, conv_w, conv_b, head_w, head_b })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Pooled log-power features `[B, G·F·bins]` of a `[B, N, L]` input.
    pub fn features(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let c = &self.cfg;
        if shape.len() != 3 || shape[1] != c.in_channels || shape[2] != c.in_len {
            return Err(Error::Dimension {
                op: "classify",
                detail: format!("input {shape:?}, classifier expects [B, {}, {}]", c.in_channels, c.in_len),
            });
        }
        let b = shape[0];
        let mixed = g.mix(p[self.spatial], x)?;
        let rows = g.reshape(mixed, &[b * c.n_spatial, c.in_len])?;
        let conv = g.conv1d(rows, p[self.conv_w], p[self.conv_b])?;
        let power = g.square(conv)?;
        let pooled = g.avgpool(power, c.pool)?;
        let logp = g.log1p(pooled)?;
        g.reshape(logp, &[b, c.features()])
    }

    /// Class logits `[B, S]`.
    pub fn forward<R: Rng + ?Sized>(&self, g: &mut Graph, p: &Bound, x: Var, mode: Mode, rng: &mut R) -> Result<Var> {
        let f = self.features(g, p, x)?;
        let f = dropout(g, f, self.cfg.dropout_p, mode, rng)?;
        let logits = g.matmul(f, p[self.head_w])?;
        g.add_row_bias(logits, p[self.head_b])
    }

    /// Eval-mode logits of one `N×L` input.
    pub fn classify(&self, x: &Tensor) -> Result<alloc::vec::Vec<f64>> {
        if !x.all_finite() {
            return Err(Error::Domain("classifier input is not finite".into()));
        }
        let mut g = Graph::new();
        let p = self.params.bind(&mut g);
        let shape = x.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Dimension { op: "classify", detail: format!("input {shape:?} is not N×L") });
        }
        let xv = g.constant(x.clone().reshape(&[1, shape[0], shape[1]])?);
        let out = self.forward(&mut g, &p, xv, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0))?;
        Ok(g.value(out).data().to_vec())
    }
}
