//! On-disk dataset: per split, a JSON manifest plus a binary blob.
//!
//! The blob starts with the magic `CSEL` and a little-endian `u16` version,
//! followed by the samples as little-endian `f32`, each a row-major `C x L`
//! block at the offset recorded in the manifest.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::path::{Path, PathBuf};

use catsel_core::prep::SeegSegment;
use catsel_core::synth::{generate, split, SynthConfig};
use catsel_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"CSEL";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: u64 = 6;
pub const SPLITS: [&str; 3] = ["train", "val", "test"];

/// Where the samples came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Source {
    Synthetic { config: SynthConfig },
    External { tag: String },
    /// Channel subset of another dataset, ids refer to the parent.
    Reduced { parent: Box<Source>, channels: Vec<usize> },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub offset: u64,
    pub label: usize,
    pub subject_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u16,
    pub split: String,
    /// Blob file name, relative to the manifest.
    pub blob: String,
    pub source: Source,
    pub channels: usize,
    pub len: usize,
    pub fs: u32,
    pub classes: usize,
    pub split_counts: SplitCounts,
    /// Ground-truth informative channels, synthetic data only.
    pub planted: Option<Vec<usize>>,
    pub records: Vec<SampleRecord>,
}

impl Manifest {
    pub fn sample_bytes(&self) -> u64 {
        (self.channels * self.len * 4) as u64
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |detail: String| FormatError::Malformed { path: path.to_path_buf(), detail };
        if self.format_version != VERSION {
            return Err(FormatError::VersionMismatch { path: path.to_path_buf(), found: self.format_version, expected: VERSION }.into());
        }
        if self.channels == 0 || self.len == 0 || self.classes < 2 {
            return Err(bad(format!("empty geometry {}x{} with {} classes", self.channels, self.len, self.classes)).into());
        }
        let mut sorted: Vec<u64> = self.records.iter().map(|r| r.offset).collect();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[1] - w[0] < self.sample_bytes()) || sorted.first().is_some_and(|&o| o < HEADER_LEN) {
            return Err(bad("sample records overlap".into()).into());
        }
        if let Some(r) = self.records.iter().find(|r| r.label >= self.classes) {
            return Err(bad(format!("label {} outside {} classes", r.label, self.classes)).into());
        }
        Ok(())
    }
}

/// Metadata shared by the three splits of one dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub source: Source,
    pub classes: usize,
    pub planted: Option<Vec<usize>>,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn manifest_path(dir: &Path, split: &str) -> PathBuf {
    dir.join(format!("{split}.json"))
}

/// Writes one split. All segments must share geometry and sampling rate.
pub fn write_split(dir: &Path, split: &str, meta: &DatasetMeta, counts: SplitCounts, segs: &[SeegSegment]) -> Result<Manifest> {
    let first = segs.first().ok_or_else(|| Error::Config(format!("split {split} is empty")))?;
    let (c, l, fs) = (first.channels(), first.len(), first.fs);
    let blob_name = format!("{split}.bin");
    let mut blob = Vec::with_capacity(HEADER_LEN as usize + segs.len() * c * l * 4);
    blob.extend_from_slice(&MAGIC);
    blob.extend_from_slice(&VERSION.to_le_bytes());
    let mut records = Vec::with_capacity(segs.len());
    for s in segs {
        if s.channels() != c || s.len() != l || s.fs != fs {
            return Err(Error::Config(format!("split {split}: mixed segment geometry")));
        }
        records.push(SampleRecord { offset: blob.len() as u64, label: s.label, subject_id: s.subject_id.clone() });
        for v in s.data.data() {
            blob.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: VERSION,
        split: split.into(),
        blob: blob_name.clone(),
        source: meta.source.clone(),
        channels: c,
        len: l,
        fs,
        classes: meta.classes,
        split_counts: counts,
        planted: meta.planted.clone(),
        records,
    };
    fs::create_dir_all(dir).map_err(Error::io(dir))?;
    write_file(&dir.join(&blob_name), &blob)?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&manifest_path(dir, split), text.as_bytes())?;
    Ok(manifest)
}

/// Writes all three splits.
pub fn write_dataset(dir: &Path, meta: &DatasetMeta, splits: [&[SeegSegment]; 3]) -> Result<()> {
    let counts = SplitCounts { train: splits[0].len(), val: splits[1].len(), test: splits[2].len() };
    for (name, segs) in SPLITS.iter().zip(splits) {
        write_split(dir, name, meta, counts, segs)?;
    }
    Ok(())
}

/// Generates a synthetic dataset and writes its stratified 8:1:1 splits.
pub fn generate_dataset(dir: &Path, cfg: &SynthConfig) -> Result<DatasetMeta> {
    let ds = generate(cfg)?;
    let labels: Vec<usize> = ds.segments.iter().map(|s| s.label).collect();
    let sp = split(&labels, (8, 1, 1), cfg.seed)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| ds.segments[i].clone()).collect::<Vec<_>>();
    let meta = DatasetMeta { source: Source::Synthetic { config: cfg.clone() }, classes: cfg.classes, planted: Some(ds.planted.clone()) };
    write_dataset(dir, &meta, [&pick(&sp.train), &pick(&sp.val), &pick(&sp.test)])?;
    Ok(meta)
}

/// Random-access reader over one split.
#[derive(Debug)]
pub struct SplitReader {
    pub manifest: Manifest,
    blob_path: PathBuf,
    blob: File,
}

impl SplitReader {
    pub fn open(manifest_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(manifest_path).map_err(Error::io(manifest_path))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| FormatError::Malformed { path: manifest_path.to_path_buf(), detail: e.to_string() })?;
        manifest.check(manifest_path)?;
        let blob_path = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
        let mut blob = File::open(&blob_path).map_err(Error::io(&blob_path))?;
        let available = blob.metadata().map_err(Error::io(&blob_path))?.len();
        let mut header = [0u8; HEADER_LEN as usize];
        if available < HEADER_LEN {
            return Err(FormatError::Truncated { path: blob_path, what: "header".into(), needed: HEADER_LEN, available }.into());
        }
        blob.read_exact(&mut header).map_err(Error::io(&blob_path))?;
        if header[..4] != MAGIC {
            return Err(FormatError::BadMagic { path: blob_path, found: header[..4].to_vec(), expected: MAGIC.to_vec() }.into());
        }
        let version = u16::from_le_bytes([header[4], header[5]]);
        if version != VERSION {
            return Err(FormatError::VersionMismatch { path: blob_path, found: version, expected: VERSION }.into());
        }
        let needed = manifest.records.iter().map(|r| r.offset + manifest.sample_bytes()).max().unwrap_or(HEADER_LEN);
        if available < needed {
            return Err(FormatError::Truncated { path: blob_path, what: "sample payload".into(), needed, available }.into());
        }
        Ok(Self { manifest, blob_path, blob })
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    pub fn read_segment(&mut self, index: usize) -> Result<SeegSegment> {
        let m = &self.manifest;
        let rec = m.records.get(index).ok_or(FormatError::OutOfBounds { index, count: m.records.len() })?;
        let mut buf = vec![0u8; m.sample_bytes() as usize];
        self.blob.seek(SeekFrom::Start(rec.offset)).map_err(Error::io(&self.blob_path))?;
        self.blob.read_exact(&mut buf).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Format(FormatError::Truncated {
                path: self.blob_path.clone(),
                what: format!("sample {index}"),
                needed: rec.offset + m.sample_bytes(),
                available: self.blob.metadata().map(|md| md.len()).unwrap_or(0),
            }),
            _ => Error::Io { path: self.blob_path.clone(), source: e },
        })?;
        let data: Vec<f64> = buf.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let tensor = Tensor::new(&[m.channels, m.len], data)?;
        Ok(SeegSegment::new(tensor, m.fs, rec.label, rec.subject_id.clone())?)
    }

    pub fn read_all(&mut self) -> Result<Vec<SeegSegment>> {
        (0..self.len()).map(|i| self.read_segment(i)).collect()
    }
}

/// The three splits of a dataset directory, fully loaded.
#[derive(Clone, Debug)]
pub struct LoadedDataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<SeegSegment>,
    pub val: Vec<SeegSegment>,
    pub test: Vec<SeegSegment>,
}

impl LoadedDataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut parts = Vec::with_capacity(3);
        let mut first: Option<Manifest> = None;
        for name in SPLITS {
            let path = manifest_path(dir, name);
            let mut r = SplitReader::open(&path)?;
            if let Some(m) = &first {
                if (m.channels, m.len, m.fs, m.classes) != (r.manifest.channels, r.manifest.len, r.manifest.fs, r.manifest.classes) {
                    return Err(FormatError::Malformed { path, detail: "split geometry differs from train".into() }.into());
                }
            } else {
                first = Some(r.manifest.clone());
            }
            parts.push(r.read_all()?);
        }
        let test = parts.pop().unwrap_or_default();
        let val = parts.pop().unwrap_or_default();
        let train = parts.pop().unwrap_or_default();
        Ok(Self { dir: dir.to_path_buf(), manifest: first.expect("three splits read"), train, val, test })
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta { source: self.manifest.source.clone(), classes: self.manifest.classes, planted: self.manifest.planted.clone() }
    }

    pub fn split(&self, name: &str) -> Result<&[SeegSegment]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// Writes the listed channels of `ds` as a new dataset. Planted ids are
/// re-indexed into the subset; planted channels outside it are dropped.
pub fn write_reduced(dir: &Path, ds: &LoadedDataset, channels: &[usize]) -> Result<()> {
    let reduce = |segs: &[SeegSegment]| catsel_core::train::reduce_channels(segs, channels);
    let planted = ds
        .manifest
        .planted
        .as_ref()
        .map(|p| p.iter().filter_map(|c| channels.iter().position(|k| k == c)).collect::<Vec<_>>());
    let meta = DatasetMeta {
        source: Source::Reduced { parent: Box::new(ds.manifest.source.clone()), channels: channels.to_vec() },
        classes: ds.manifest.classes,
        planted,
    };
    write_dataset(dir, &meta, [&reduce(&ds.train)?, &reduce(&ds.val)?, &reduce(&ds.test)?])
}
