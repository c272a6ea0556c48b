//! Synthetic multichannel benchmark with planted informative channels, and
//! deterministic stratified splitting.
//!
//! Every channel has unit variance. A planted channel of a class-`s` sample is
//! `a · env_s(t) · sin(2π f_s t / fs + φ) + σ · noise` with `f_s = f0 · (1 + s)`,
//! a per-channel, per-sample random phase `φ`, and a Gaussian envelope centred
//! at fraction `(s + 0.5) / S` of the window. The split between signal and noise
//! power follows `snr_db`. Other channels are white noise.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::prep::SeegSegment;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SynthConfig {
    pub channels: usize,
    pub planted: usize,
    pub classes: usize,
    pub len: usize,
    pub fs: u32,
    /// Signal-to-noise ratio of planted channels; `inf` gives noiseless planted channels.
    #[cfg_attr(feature = "serde", serde(with = "snr_repr"))]
    pub snr_db: f64,
    pub samples_per_class: usize,
    pub seed: u64,
    /// Frequency of class 0 in Hz.
    pub base_freq: f64,
    /// Envelope width as a fraction of the window.
    pub envelope_width: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

/// Infinite SNR is written as the string `"inf"` so it survives formats without infinities.
#[cfg(feature = "serde")]
mod snr_repr {
    use serde::de::Visitor;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if *v == f64::INFINITY {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*v)
        }
    }

    struct Snr;

    impl Visitor<'_> for Snr {
        type Value = f64;

        fn expecting(&self, f: &mut core::fmt::Formatter) -> core::fmt::Result {
            f.write_str("a number in dB or \"inf\"")
        }

        fn visit_f64<E: serde::de::Error>(self, v: f64) -> Result<f64, E> {
            Ok(v)
        }

        fn visit_i64<E: serde::de::Error>(self, v: i64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_u64<E: serde::de::Error>(self, v: u64) -> Result<f64, E> {
            Ok(v as f64)
        }

        fn visit_str<E: serde::de::Error>(self, v: &str) -> Result<f64, E> {
            match v {
                "inf" | "+inf" => Ok(f64::INFINITY),
                other => Err(E::custom(alloc::format!("bad snr_db {other:?}"))),
            }
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        d.deserialize_any(Snr)
    }
}

impl SynthConfig {
    /// 32 channels, 3 planted, 4 classes, 480 samples at 2 kHz, 0 dB, 1000 segments.
    pub fn desk(seed: u64) -> Self {
        Self {
            channels: 32,
            planted: 3,
            classes: 4,
            len: 480,
            fs: 2000,
            snr_db: 0.0,
            samples_per_class: 250,
            seed,
            base_freq: 12.0,
            envelope_width: 0.25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.planted == 0 || self.planted > self.channels {
            return bad(format!("need 1 <= planted ({}) <= channels ({})", self.planted, self.channels));
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.len == 0 || self.fs == 0 || self.samples_per_class == 0 {
            return bad("length, sampling rate and samples per class must be positive".into());
        }
        if self.snr_db.is_nan() {
            return bad("snr_db is NaN".into());
        }
        let top = self.base_freq * self.classes as f64;
        if !(self.base_freq > 0.0) || top >= self.fs as f64 / 2.0 {
            return bad(format!("class frequencies up to {top} Hz do not fit under Nyquist at {} Hz", self.fs));
        }
        if !(self.envelope_width > 0.0) {
            return bad("envelope width must be positive".into());
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.samples_per_class * self.classes
    }

    pub fn class_freq(&self, class: usize) -> f64 {
        self.base_freq * (1 + class) as f64
    }

    /// Signal and noise standard deviations of a planted channel, splitting unit variance.
    pub fn amplitudes(&self) -> (f64, f64) {
        if self.snr_db == f64::INFINITY {
            return (1.0, 0.0);
        }
        let r = libm::pow(10.0, self.snr_db / 10.0);
        (libm::sqrt(r / (1.0 + r)), libm::sqrt(1.0 / (1.0 + r)))
    }
}

/// In-memory generated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Sorted ids of the planted channels.
    pub planted: Vec<usize>,
    pub segments: Vec<SeegSegment>,
}

/// Uniform random `K`-subset of channel ids determined by the seed, sorted.
pub fn planted_channels(cfg: &SynthConfig) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = rand::seq::index::sample(&mut rng, cfg.channels, cfg.planted).into_vec();
    ids.sort_unstable();
    ids
}

fn envelope(cfg: &SynthConfig, class: usize) -> Vec<f64> {
    let centre = (class as f64 + 0.5) / cfg.classes as f64;
    let w = cfg.envelope_width;
    let raw: Vec<f64> = (0..cfg.len)
        .map(|t| {
            let u = (t as f64 + 0.5) / cfg.len as f64 - centre;
            libm::exp(-u * u / (2.0 * w * w))
        })
        .collect();
    // scale so that env * sin has unit mean power (sin^2 averages to 1/2)
    let power = raw.iter().map(|e| e * e).sum::<f64>() / cfg.len as f64 / 2.0;
    let k = 1.0 / libm::sqrt(power);
    raw.into_iter().map(|e| e * k).collect()
}

/// Deterministic dataset for `cfg`. Sample `i` has label `i % classes`.
pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let planted = planted_channels(cfg);
    let mut is_planted = alloc::vec![false; cfg.channels];
    planted.iter().for_each(|&c| is_planted[c] = true);
    let envelopes: Vec<Vec<f64>> = (0..cfg.classes).map(|s| envelope(cfg, s)).collect();
    let (sig, noise) = cfg.amplitudes();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_da7a);
    let two_pi = 2.0 * core::f64::consts::PI;
    let mut segments = Vec::with_capacity(cfg.total());
    for i in 0..cfg.total() {
        let label = i % cfg.classes;
        let omega = two_pi * cfg.class_freq(label) / cfg.fs as f64;
        let mut data = Vec::with_capacity(cfg.channels * cfg.len);
        for &planted_here in &is_planted {
            if planted_here {
                let phase = rng.random::<f64>() * two_pi;
                for (t, env) in envelopes[label].iter().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(sig * env * libm::sin(omega * t as f64 + phase) + noise * z);
                }
            } else {
                for _ in 0..cfg.len {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    data.push(z);
                }
            }
        }
        let seg = SeegSegment::new(Tensor::new(&[cfg.channels, cfg.len], data)?, cfg.fs, label, "synth")?;
        segments.push(seg);
    }
    Ok(SynthDataset { config: cfg.clone(), planted, segments })
}

/// Train / validation / test index lists.
#[derive(Clone, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Stratified split with ratio `train:val:test`.
///
/// Samples are grouped by class, shuffled within each class, laid out class
/// after class and dealt to splits by a repeating pattern of `train + val + test`
/// slots, so totals follow the ratio and each class deviates by at most one.
pub fn split(labels: &[usize], ratio: (usize, usize, usize), seed: u64) -> Result<Split> {
    let period = ratio.0 + ratio.1 + ratio.2;
    if period == 0 || ratio.0 == 0 || ratio.1 == 0 || ratio.2 == 0 {
        return Err(Error::Config(format!("split ratio {ratio:?} must be positive")));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(labels.len());
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        order.extend(idx);
    }
    let pattern: Vec<u8> = [(0u8, ratio.0), (1, ratio.1), (2, ratio.2)]
        .iter()
        .flat_map(|&(tag, n)| core::iter::repeat_n(tag, n))
        .collect();
    let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (k, i) in order.into_iter().enumerate() {
        match pattern[k % period] {
            0 => out.train.push(i),
            1 => out.val.push(i),
            _ => out.test.push(i),
        }
    }
    if out.train.is_empty() || out.val.is_empty() || out.test.is_empty() {
        return Err(Error::Config(format!(
            "split of {} samples leaves an empty part ({}/{}/{})",
            labels.len(),
            out.train.len(),
            out.val.len(),
            out.test.len()
        )));
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Independent checks that a dataset is solvable through the planted channels.
pub mod oracle {
    use super::*;

    /// Log power at each frequency (single DFT bin per frequency), averaged over `channels`.
    pub fn bandpower(seg: &SeegSegment, channels: &[usize], freqs: &[f64]) -> Vec<f64> {
        let two_pi = 2.0 * core::f64::consts::PI;
        freqs
            .iter()
            .map(|&f| {
                let w = two_pi * f / seg.fs as f64;
                let mut p = 0.0;
                for &c in channels {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (t, x) in seg.channel(c).iter().enumerate() {
                        re += x * libm::cos(w * t as f64);
                        im += x * libm::sin(w * t as f64);
                    }
                    p += (re * re + im * im) / seg.len() as f64;
                }
                libm::log(p / channels.len() as f64 + 1e-12)
            })
            .collect()
    }

    /// Fits class centroids on `train` feature rows and returns accuracy on `test`.
    pub fn nearest_centroid_accuracy(train: &[(Vec<f64>, usize)], test: &[(Vec<f64>, usize)], classes: usize) -> f64 {
        let dim = train.first().map_or(0, |t| t.0.len());
        let mut centroid = alloc::vec![alloc::vec![0.0; dim]; classes];
        let mut count = alloc::vec![0usize; classes];
        for (x, y) in train {
            centroid[*y].iter_mut().zip(x).for_each(|(c, v)| *c += v);
            count[*y] += 1;
        }
        for (c, n) in centroid.iter_mut().zip(&count) {
            c.iter_mut().for_each(|v| *v /= (*n).max(1) as f64);
        }
        let correct = test
            .iter()
            .filter(|(x, y)| {
                let dist = |c: &Vec<f64>| c.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
                let best = (0..classes).min_by(|&a, &b| dist(&centroid[a]).total_cmp(&dist(&centroid[b]))).unwrap();
                best == *y
            })
            .count();
        correct as f64 / test.len().max(1) as f64
    }
}
