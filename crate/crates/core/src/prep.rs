//! Segment preprocessing: block-mean downsampling, per-channel Z-scoring,
//! and an optional noise + circular-shift augmentation.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Sampling rate the channel tokenizer expects.
pub const TOKEN_FS: u32 = 250;

/// Default denominator guard for [`zscore_per_channel`].
pub const ZSCORE_EPS: f64 = 1e-6;

/// One labelled multichannel recording window, `data` is `[C, L]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SeegSegment {
    pub data: Tensor,
    pub fs: u32,
    pub label: usize,
    pub subject_id: String,
}

impl SeegSegment {
    pub fn new(data: Tensor, fs: u32, label: usize, subject_id: impl Into<String>) -> Result<Self> {
        if data.rank() != 2 || data.shape()[0] == 0 || data.shape()[1] == 0 {
            return Err(Error::Argument(alloc::format!(
                "segment data must be a non-empty [C, L] matrix, got {:?}",
                data.shape()
            )));
        }
        if !data.all_finite() {
            return Err(Error::Domain("segment contains non-finite samples".into()));
        }
        Ok(Self { data, fs, label, subject_id: subject_id.into() })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.data.numel() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.row(c)
    }

    /// Keeps only the listed channels, in the given order.
    pub fn select_channels(&self, ids: &[usize]) -> Result<Self> {
        let l = self.len();
        let mut data = Vec::with_capacity(ids.len() * l);
        for &c in ids {
            if c >= self.channels() {
                return Err(Error::Argument(alloc::format!("channel {c} out of range")));
            }
            data.extend_from_slice(self.channel(c));
        }
        Ok(Self { data: Tensor::new(&[ids.len(), l], data)?, ..self.clone() })
    }

    /// Appends zero channels up to `target` channels.
    pub fn pad_channels(&self, target: usize) -> Result<Self> {
        if target < self.channels() {
            return Err(Error::Argument(alloc::format!(
                "cannot pad {} channels down to {target}",
                self.channels()
            )));
        }
        let mut data = self.data.data().to_vec();
        data.resize(target * self.len(), 0.0);
        Ok(Self { data: Tensor::new(&[target, self.len()], data)?, ..self.clone() })
    }
}

/// Replaces each channel by the means of non-overlapping blocks of `fs / target_fs` samples.
pub fn downsample(seg: &SeegSegment, target_fs: u32) -> Result<SeegSegment> {
    let len = seg.len();
    if target_fs == 0 || seg.fs % target_fs != 0 {
        return Err(Error::Ratio { fs: seg.fs, target_fs, len });
    }
    let factor = (seg.fs / target_fs) as usize;
    if len % factor != 0 {
        return Err(Error::Ratio { fs: seg.fs, target_fs, len });
    }
    let out_len = len / factor;
    let inv = 1.0 / factor as f64;
    let data: Vec<f64> = seg
        .data
        .data()
        .chunks(factor)
        .map(|block| block.iter().sum::<f64>() * inv)
        .collect();
    Ok(SeegSegment {
        data: Tensor::new(&[seg.channels(), out_len], data)?,
        fs: target_fs,
        label: seg.label,
        subject_id: seg.subject_id.clone(),
    })
}

/// Mean and population standard deviation of a slice.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, libm::sqrt(var))
}

/// Maps every channel to `(x - mean) / (std + eps)` using statistics of that channel only.
pub fn zscore_per_channel(seg: &SeegSegment, eps: f64) -> Result<SeegSegment> {
    if !(eps > 0.0) {
        return Err(Error::Argument("zscore eps must be positive".into()));
    }
    let mut out = seg.clone();
    let l = seg.len();
    for row in out.data.data_mut().chunks_mut(l) {
        let (mean, std) = mean_std(row);
        let inv = 1.0 / (std + eps);
        row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
    }
    Ok(out)
}

/// Noise and time-shift augmentation. Both zero means identity.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct AugmentConfig {
    /// Gaussian noise standard deviation relative to each channel's own std.
    pub noise_std: f64,
    /// Largest circular shift, in samples, drawn uniformly from `[-max_shift, max_shift]`.
    pub max_shift: usize,
}

pub fn augment<R: Rng + ?Sized>(seg: &SeegSegment, cfg: &AugmentConfig, rng: &mut R) -> Result<SeegSegment> {
    let l = seg.len();
    if cfg.max_shift >= l {
        return Err(Error::Shift { max_shift: cfg.max_shift, len: l });
    }
    if !(cfg.noise_std >= 0.0) {
        return Err(Error::Argument("noise_std must be non-negative".into()));
    }
    let mut out = seg.clone();
    if cfg.noise_std > 0.0 {
        for row in out.data.data_mut().chunks_mut(l) {
            let (_, std) = mean_std(row);
            let sigma = cfg.noise_std * std;
            for v in row.iter_mut() {
                let z: f64 = StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
    }
    if cfg.max_shift > 0 {
        let span = cfg.max_shift as i64;
        let shift = rng.random_range(-span..=span);
        let k = shift.rem_euclid(l as i64) as usize;
        for row in out.data.data_mut().chunks_mut(l) {
            row.rotate_right(k);
        }
    }
    Ok(out)
}
