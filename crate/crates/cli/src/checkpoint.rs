//! Checkpoint archive: `FCCK`, a little-endian `u32` version, a `u64`
//! manifest length, the JSON manifest, then every tensor as little-endian
//! `f64` in manifest order.

use std::fs;
use std::path::Path;

use fewseg_core::embeddings::{ClassVocabulary, ProviderSpec};
use fewseg_core::model::{ModelConfig, Phase, SegModel};
use fewseg_core::numerics::{tensor_checksum, Mat, ParameterRegistry, Stage};
use fewseg_core::{Error, Result};
use serde::{Deserialize, Serialize};

const MAGIC: &[u8; 4] = b"FCCK";
const VERSION: u32 = 1;
const HEADER: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub stage: Stage,
    pub trainable: bool,
    pub structural: bool,
    pub sha256: String,
}

/// Seeds of every phase applied to the model, oldest first.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub init_seed: u64,
    pub phase_seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub phase: Phase,
    pub stage: Stage,
    pub vocab: ClassVocabulary,
    pub config: ModelConfig,
    pub provider: ProviderSpec,
    pub rng: RngState,
    pub tensors: Vec<TensorRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: SegModel,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn manifest(&self) -> CheckpointManifest {
        let m = &self.model;
        CheckpointManifest {
            version: VERSION,
            phase: m.phase,
            stage: m.stage,
            vocab: m.vocab.clone(),
            config: m.config.clone(),
            provider: m.provider.clone(),
            rng: self.rng.clone(),
            tensors: m
                .registry
                .iter()
                .map(|(name, e)| TensorRecord {
                    name: name.clone(),
                    rows: e.value.rows(),
                    cols: e.value.cols(),
                    stage: e.stage,
                    trainable: e.trainable,
                    structural: e.structural,
                    sha256: tensor_checksum(&e.value),
                })
                .collect(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let mut out = Vec::with_capacity(HEADER + manifest.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, e) in self.model.registry.iter() {
            for v in e.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses an archive and verifies every tensor checksum.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER {
            return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = HEADER
            .checked_add(len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| Error::format(8, "manifest length exceeds file"))?;
        let manifest: CheckpointManifest = serde_json::from_slice(&bytes[HEADER..body])?;
        let mut registry = ParameterRegistry::new();
        let mut offset = body;
        for t in &manifest.tensors {
            let n = t.rows * t.cols;
            let end = offset + 8 * n;
            if end > bytes.len() {
                return Err(Error::format(offset as u64, format!("tensor `{}` is truncated", t.name)));
            }
            let data = bytes[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let value = Mat::from_vec(t.rows, t.cols, data)?;
            let sum = tensor_checksum(&value);
            if sum != t.sha256 {
                return Err(Error::Checksum(format!(
                    "tensor `{}`: manifest {} vs data {sum}",
                    t.name, t.sha256
                )));
            }
            if t.structural {
                registry.insert_structural(t.name.clone(), value, t.stage);
            } else {
                registry.insert(t.name.clone(), value, t.stage);
            }
            if t.trainable {
                registry.set_trainable(&t.name, true)?;
            }
            offset = end;
        }
        if offset != bytes.len() {
            return Err(Error::format(offset as u64, "trailing bytes after the last tensor"));
        }
        Ok(Self {
            model: SegModel {
                config: manifest.config,
                provider: manifest.provider,
                vocab: manifest.vocab,
                registry,
                phase: manifest.phase,
                stage: manifest.stage,
            },
            rng: manifest.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fewseg_core::embeddings::{ClassEntry, EmbeddingProvider, Split, ToyConfig, ToyEncoder};

    fn checkpoint() -> Checkpoint {
        let cfg = ToyConfig::tiny();
        let provider = EmbeddingProvider::Toy(ToyEncoder::new(cfg.clone()).unwrap());
        let vocab = ClassVocabulary::new(vec![
            ClassEntry::new(1, "cat", Split::Base),
            ClassEntry::new(4, "bus", Split::Novel),
        ])
        .unwrap();
        let model = SegModel::new(ModelConfig::default(), ProviderSpec::Toy(cfg), &provider, vocab, 9).unwrap();
        Checkpoint {
            model,
            rng: RngState {
                init_seed: 9,
                phase_seeds: vec![1, 2],
            },
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let c = checkpoint();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupted_tensor_fails_verification() {
        let mut bytes = checkpoint().to_bytes().unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checksum(_))));
    }

    #[test]
    fn header_errors() {
        let bytes = checkpoint().to_bytes().unwrap();
        assert!(matches!(Checkpoint::from_bytes(&bytes[..10]), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format { offset: 0, .. })));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2), Err(Error::UnsupportedVersion(2))));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    }
}
