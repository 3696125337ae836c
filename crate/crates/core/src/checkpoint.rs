//! Binary checkpoint: `DGNM`, a version byte, an 8-byte LE manifest length,
//! a JSON manifest, then the f32 LE payload.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TokenizerMode, Vocab};
use crate::error::{Error, Result};
use crate::growth::DepthGrowModel;
use crate::tensor::{Float, Tensor};
use crate::training::{Adam, AdamConfig, Moments};
use crate::transformer::ModelConfig;

pub const MAGIC: &[u8; 4] = b"DGNM";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub kind: EntryKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length in the payload.
    pub length: u64,
    pub trainable: bool,
    /// Hex sha256 of this entry's payload bytes.
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerMeta {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u8,
    pub model: ModelConfig,
    /// 1 for shallow, 2 for grown.
    pub stage: u8,
    pub step: u64,
    pub tokenizer: TokenizerMode,
    /// Content tokens in id order; absent when the checkpoint has no vocabulary.
    pub vocab: Option<Vec<String>>,
    /// Parameter name to content hash recorded at grow time.
    pub frozen_reference: BTreeMap<String, String>,
    pub optimizer: Option<OptimizerMeta>,
    pub entries: Vec<ManifestEntry>,
}

/// First and second Adam moments read so far for one parameter.
type MomentSlots<F> = (Option<Vec<F>>, Option<Vec<F>>);

/// A model with optional optimizer state and vocabulary.
#[derive(Clone, Debug)]
pub struct Checkpoint<F: Float> {
    pub model: DepthGrowModel<F>,
    pub adam: Option<Adam<F>>,
    pub vocab: Option<Vocab>,
    pub tokenizer: TokenizerMode,
}

fn push_f32<F: Float>(
    payload: &mut Vec<u8>,
    entries: &mut Vec<ManifestEntry>,
    name: &str,
    kind: EntryKind,
    shape: &[usize],
    values: &[F],
    trainable: bool,
) {
    let start = payload.len();
    for &v in values {
        payload.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    let bytes = &payload[start..];
    entries.push(ManifestEntry {
        name: name.to_string(),
        kind,
        shape: shape.to_vec(),
        dtype: "f32".into(),
        offset: start as u64,
        length: bytes.len() as u64,
        trainable,
        sha256: hex::encode(Sha256::digest(bytes)),
    });
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<F: Float> Checkpoint<F> {
    pub fn new(model: DepthGrowModel<F>) -> Self {
        Checkpoint {
            model,
            adam: None,
            vocab: None,
            tokenizer: TokenizerMode::default(),
        }
    }

    pub fn with_adam(mut self, adam: Adam<F>) -> Self {
        self.adam = Some(adam);
        self
    }

    pub fn with_vocab(mut self, vocab: Vocab, tokenizer: TokenizerMode) -> Self {
        self.vocab = Some(vocab);
        self.tokenizer = tokenizer;
        self
    }

    pub fn manifest_and_payload(&self) -> (Manifest, Vec<u8>) {
        let store = self.model.store();
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (_, p) in store.iter() {
            push_f32(
                &mut payload,
                &mut entries,
                &p.name,
                EntryKind::Param,
                p.tensor.shape(),
                p.tensor.data(),
                p.trainable,
            );
        }
        if let Some(adam) = &self.adam {
            for (&id, mom) in adam.state() {
                let p = store.get(id);
                for (kind, vals) in [(EntryKind::AdamM, &mom.m), (EntryKind::AdamV, &mom.v)] {
                    push_f32(
                        &mut payload,
                        &mut entries,
                        &p.name,
                        kind,
                        p.tensor.shape(),
                        vals,
                        p.trainable,
                    );
                }
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            model: self.model.config().clone(),
            stage: self.model.stage(),
            step: self.model.step,
            tokenizer: self.tokenizer,
            vocab: self.vocab.as_ref().map(|v| v.content_tokens().to_vec()),
            frozen_reference: self.model.frozen_reference().clone(),
            optimizer: self.adam.as_ref().map(|a| OptimizerMeta {
                step: a.step_count(),
                config: a.config(),
            }),
            entries,
        };
        (manifest, payload)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (manifest, payload) = self.manifest_and_payload();
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(13 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses the header and manifest without building a model.
    pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(ck("not a checkpoint (bad magic)"));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(ck(format!("unsupported checkpoint version {}", bytes[4])));
        }
        let len = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let body = &bytes[13..];
        if body.len() < len {
            return Err(ck("truncated manifest"));
        }
        let manifest: Manifest =
            serde_json::from_slice(&body[..len]).map_err(|e| ck(format!("manifest: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(ck("manifest version disagrees with header"));
        }
        Ok((manifest, &body[len..]))
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, payload) = Self::read_manifest(bytes)?;
        let mut next = 0u64;
        for e in &manifest.entries {
            if e.dtype != "f32" {
                return Err(ck(format!("`{}`: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != next {
                return Err(ck(format!(
                    "`{}`: offset {} out of order",
                    e.name, e.offset
                )));
            }
            let numel: usize = e.shape.iter().product();
            if e.length != 4 * numel as u64 {
                return Err(ck(format!("`{}`: length does not match shape", e.name)));
            }
            next += e.length;
        }
        if next != payload.len() as u64 {
            return Err(ck(format!(
                "payload is {} bytes, manifest covers {next}",
                payload.len()
            )));
        }

        let grown = match manifest.stage {
            1 => false,
            2 => true,
            s => return Err(ck(format!("unknown stage {s}"))),
        };
        let mut model = DepthGrowModel::<F>::skeleton(&manifest.model, grown)?;
        let mut seen = BTreeSet::new();
        let mut moments: BTreeMap<_, MomentSlots<F>> = BTreeMap::new();
        for e in &manifest.entries {
            let bytes = &payload[e.offset as usize..(e.offset + e.length) as usize];
            if hex::encode(Sha256::digest(bytes)) != e.sha256 {
                return Err(ck(format!("`{}`: content hash mismatch", e.name)));
            }
            let values: Vec<F> = bytes
                .chunks_exact(4)
                .map(|c| {
                    F::from_f64_lossy(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                })
                .collect();
            let id = model
                .store()
                .id(&e.name)
                .ok_or_else(|| ck(format!("unexpected tensor `{}`", e.name)))?;
            let p = model.store_mut().get_mut(id);
            if p.tensor.shape() != e.shape.as_slice() {
                return Err(ck(format!(
                    "`{}`: shape {:?} does not match model {:?}",
                    e.name,
                    e.shape,
                    p.tensor.shape()
                )));
            }
            match e.kind {
                EntryKind::Param => {
                    if !seen.insert(e.name.clone()) {
                        return Err(ck(format!("duplicate tensor `{}`", e.name)));
                    }
                    p.tensor = Tensor::new(e.shape.clone(), values)?;
                    p.trainable = e.trainable;
                }
                EntryKind::AdamM => moments.entry(id).or_default().0 = Some(values),
                EntryKind::AdamV => moments.entry(id).or_default().1 = Some(values),
            }
        }
        let missing: Vec<String> = model
            .store()
            .iter()
            .filter(|(_, p)| !seen.contains(&p.name))
            .map(|(_, p)| p.name.clone())
            .collect();
        if !missing.is_empty() {
            return Err(ck(format!("missing tensors: {}", missing.join(", "))));
        }
        model.step = manifest.step;
        model.set_frozen_reference(manifest.frozen_reference.clone());

        let adam = match manifest.optimizer {
            Some(meta) => {
                let mut state = BTreeMap::new();
                for (id, pair) in moments {
                    match pair {
                        (Some(m), Some(v)) => {
                            state.insert(id, Moments { m, v });
                        }
                        _ => {
                            let name = &model.store().get(id).name;
                            return Err(ck(format!("incomplete optimizer moments for `{name}`")));
                        }
                    }
                }
                Some(Adam::restore(meta.config, meta.step, state))
            }
            None if moments.is_empty() => None,
            None => return Err(ck("optimizer moments without optimizer metadata")),
        };
        let vocab = manifest.vocab.as_deref().map(Vocab::new).transpose()?;
        Ok(Checkpoint {
            model,
            adam,
            vocab,
            tokenizer: manifest.tokenizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
