//! Model checkpoints.
//!
//! Layout: magic `CSCK`, `u16` version, `u64` header length (all little-endian),
//! a JSON header, then every tensor of the header's table as little-endian
//! `f64` in table order. Batch-norm running statistics are stored as tensors
//! so that they round-trip bit-exactly.

use std::fs;
use std::path::Path;

use catsel_core::chat::{ChatConfig, ChatModel};
use catsel_core::classifier::{Classifier, ClassifierConfig};
use catsel_core::params::ParamStore;
use catsel_core::rollout::RolloutVariant;
use catsel_core::train::Models;
use catsel_core::{BatchNormState, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, FormatError, Result};

pub const MAGIC: [u8; 4] = *b"CSCK";
pub const VERSION: u16 = 1;
const PREFIX: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatHeader {
    pub config: ChatConfig,
    pub channels: usize,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub run: RunConfig,
    pub seed: u64,
    pub epoch: usize,
    pub variant: RolloutVariant,
    pub chat: Option<ChatHeader>,
    pub classifier: Option<ClassifierConfig>,
    pub tensors: Vec<TensorEntry>,
}

/// A trained model, or a pretrained selector without a classifier.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub chat: Option<ChatModel>,
    pub classifier: Option<Classifier>,
}

fn bn_name(layer: usize, which: usize, stat: &str) -> String {
    format!("chat.layer{layer}.bn{}.{stat}", which + 1)
}

fn push_store(store: &ParamStore, entries: &mut Vec<TensorEntry>, payload: &mut Vec<u8>) {
    for (name, t) in store.iter() {
        entries.push(TensorEntry { name: name.into(), shape: t.shape().to_vec() });
        payload.extend(t.data().iter().flat_map(|v| v.to_le_bytes()));
    }
}

impl Checkpoint {
    pub fn new(run: RunConfig, seed: u64, epoch: usize, models: Models) -> Self {
        Self::from_parts(run, seed, epoch, models.variant, models.chat, Some(models.classifier))
    }

    pub fn from_parts(
        run: RunConfig,
        seed: u64,
        epoch: usize,
        variant: RolloutVariant,
        chat_model: Option<ChatModel>,
        classifier: Option<Classifier>,
    ) -> Self {
        let chat = chat_model.as_ref().map(|c| {
            let bn = &c.batchnorm_states()[0][0];
            ChatHeader { config: c.config().clone(), channels: c.channels(), bn_momentum: bn.momentum, bn_epsilon: bn.epsilon }
        });
        let header = CheckpointHeader {
            run,
            seed,
            epoch,
            variant,
            chat,
            classifier: classifier.as_ref().map(|k| k.config().clone()),
            tensors: Vec::new(),
        };
        Self { header, chat: chat_model, classifier }
    }

    pub fn into_models(self) -> Result<Models> {
        let classifier = self.classifier.ok_or_else(|| Error::Config("checkpoint holds no classifier".into()))?;
        Ok(Models { chat: self.chat, classifier, variant: self.header.variant })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut entries = Vec::new();
        let mut payload = Vec::new();
        if let Some(chat) = &self.chat {
            push_store(chat.params(), &mut entries, &mut payload);
            for (l, pair) in chat.batchnorm_states().iter().enumerate() {
                for (k, st) in pair.iter().enumerate() {
                    for (stat, vals) in [("running_mean", &st.running_mean), ("running_var", &st.running_var)] {
                        entries.push(TensorEntry { name: bn_name(l, k, stat), shape: vec![vals.len()] });
                        payload.extend(vals.iter().flat_map(|v| v.to_le_bytes()));
                    }
                }
            }
        }
        if let Some(k) = &self.classifier {
            push_store(k.params(), &mut entries, &mut payload);
        }
        let header = CheckpointHeader { tensors: entries, ..self.header.clone() };
        let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
        let mut out = Vec::with_capacity(PREFIX + json.len() + payload.len());
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(Error::io(path))
    }

    /// Header only; the payload is not decoded.
    pub fn read_header(path: &Path) -> Result<CheckpointHeader> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Ok(split_header(path, &bytes)?.0)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        let (header, payload) = split_header(path, bytes)?;
        let needed: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>() * 8).sum();
        if payload.len() < needed {
            return Err(FormatError::Truncated {
                path: path.into(),
                what: "tensor payload".into(),
                needed: (bytes.len() - payload.len() + needed) as u64,
                available: bytes.len() as u64,
            }
            .into());
        }
        if payload.len() > needed {
            return Err(malformed(path, format!("{} trailing payload bytes", payload.len() - needed)));
        }
        let mut tensors = std::collections::HashMap::new();
        let mut at = 0;
        for e in &header.tensors {
            let n: usize = e.shape.iter().product();
            let data = payload[at..at + 8 * n]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
                .collect();
            at += 8 * n;
            tensors.insert(e.name.clone(), Tensor::new(&e.shape, data)?);
        }
        let mut take = |name: &str| tensors.remove(name).ok_or_else(|| malformed(path, format!("missing tensor {name}")));
        // Initial values are overwritten below; the rng only satisfies the constructors.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let chat = match &header.chat {
            Some(ch) => {
                let mut model = ChatModel::new(ch.config.clone(), ch.channels, &mut rng)?;
                fill_store(model.params_mut(), &mut take)?;
                let layers = model.batchnorm_states().len();
                for l in 0..layers {
                    for k in 0..2 {
                        let running_mean = take(&bn_name(l, k, "running_mean"))?.into_data();
                        let running_var = take(&bn_name(l, k, "running_var"))?.into_data();
                        model.batchnorm_states_mut()[l][k] =
                            BatchNormState { running_mean, running_var, momentum: ch.bn_momentum, epsilon: ch.bn_epsilon };
                    }
                }
                Some(model)
            }
            None => None,
        };
        let classifier = match &header.classifier {
            Some(cfg) => {
                let mut k = Classifier::new(cfg.clone(), &mut rng)?;
                fill_store(k.params_mut(), &mut take)?;
                Some(k)
            }
            None => None,
        };
        if !tensors.is_empty() {
            let mut extra: Vec<_> = tensors.keys().cloned().collect();
            extra.sort();
            return Err(malformed(path, format!("unexpected tensors {extra:?}")));
        }
        Ok(Self { header: CheckpointHeader { tensors: Vec::new(), ..header }, chat, classifier })
    }
}

fn fill_store(store: &mut ParamStore, take: &mut impl FnMut(&str) -> Result<Tensor>) -> Result<()> {
    let names: Vec<String> = store.names().to_vec();
    for (name, slot) in names.iter().zip(store.tensors_mut()) {
        let t = take(name)?;
        if t.shape() != slot.shape() {
            return Err(Error::Format(FormatError::Malformed {
                path: Default::default(),
                detail: format!("{name}: stored shape {:?}, model expects {:?}", t.shape(), slot.shape()),
            }));
        }
        *slot = t;
    }
    Ok(())
}

fn malformed(path: &Path, detail: String) -> Error {
    FormatError::Malformed { path: path.into(), detail }.into()
}

fn split_header<'a>(path: &Path, bytes: &'a [u8]) -> Result<(CheckpointHeader, &'a [u8])> {
    let truncated = |what: &str, needed: usize| {
        Error::from(FormatError::Truncated { path: path.into(), what: what.into(), needed: needed as u64, available: bytes.len() as u64 })
    };
    if bytes.len() < 4 {
        return Err(truncated("magic", 4));
    }
    if bytes[..4] != MAGIC {
        return Err(FormatError::BadMagic { path: path.into(), found: bytes[..4].to_vec(), expected: MAGIC.to_vec() }.into());
    }
    if bytes.len() < PREFIX {
        return Err(truncated("prefix", PREFIX));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(FormatError::VersionMismatch { path: path.into(), found: version, expected: VERSION }.into());
    }
    let len = u64::from_le_bytes(bytes[6..14].try_into().expect("8 bytes")) as usize;
    let end = PREFIX.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| truncated("header", PREFIX.saturating_add(len)))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[PREFIX..end]).map_err(|e| malformed(path, e.to_string()))?;
    Ok((header, &bytes[end..]))
}
