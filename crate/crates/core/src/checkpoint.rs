//! Single-file checkpoints.
//!
//! Layout, all little-endian: magic `ATNF`, `u32` format version, `u64`
//! header length, the JSON header, then raw `f32` blobs in the order the
//! header lists them.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::tensor::Tensor;
use crate::text::Vocabulary;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 4] = b"ATNF";
pub const FORMAT_VERSION: u32 = 1;

/// Optimizer-side state needed to continue training bit-identically. The
/// training streams are counter-based, so `(config.seed, step)` is the whole
/// RNG state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub config: TrainConfig,
    pub step: u64,
    pub losses: Vec<f64>,
}

#[derive(Clone)]
pub struct Checkpoint {
    pub model: Denoiser,
    pub schedule: ScheduleConfig,
    pub vocabulary: Vocabulary,
    pub train: Option<TrainState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: Role,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    denoiser: DenoiserConfig,
    schedule: ScheduleConfig,
    vocabulary: Vocabulary,
    #[serde(default)]
    train: Option<TrainState>,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: Denoiser, schedule: ScheduleConfig) -> Self {
        Checkpoint {
            model,
            schedule,
            vocabulary: Vocabulary::default(),
            train: None,
        }
    }

    fn layout(&self, with_optimizer: bool) -> (Header, Vec<&Tensor>) {
        let params = self.model.params();
        let mut tensors = Vec::new();
        let mut blobs = Vec::new();
        for id in params.ids() {
            let v = params.value(id);
            tensors.push(TensorEntry {
                name: params.name(id).to_string(),
                role: Role::Param,
                shape: v.shape().to_vec(),
            });
            blobs.push(v);
        }
        if with_optimizer {
            for (role, pick) in [(Role::AdamM, 0), (Role::AdamV, 1)] {
                for id in params.ids() {
                    let (m, v) = params.moments(id);
                    let t = if pick == 0 { m } else { v };
                    tensors.push(TensorEntry {
                        name: params.name(id).to_string(),
                        role,
                        shape: t.shape().to_vec(),
                    });
                    blobs.push(t);
                }
            }
        }
        let header = Header {
            denoiser: self.model.config().clone(),
            schedule: self.schedule,
            vocabulary: self.vocabulary.clone(),
            train: if with_optimizer { self.train.clone() } else { None },
            tensors,
        };
        (header, blobs)
    }

    fn encode(&self, with_optimizer: bool) -> Vec<u8> {
        let (header, blobs) = self.layout(with_optimizer);
        let json = serde_json::to_vec(&header).expect("header serializes");
        let floats: usize = blobs.iter().map(|b| b.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * floats);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for b in blobs {
            for v in b.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode(self.train.is_some())
    }

    /// Hex SHA-256 over the inference-relevant content (configs, vocabulary,
    /// parameters), independent of optimizer state.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.encode(false));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Checkpoint> {
        let bad = |d: &str| Error::format(origin, d.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an ATNF checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if hlen > body.len() {
            return Err(bad("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])
            .map_err(|e| bad(&format!("header: {e}")))?;
        header.denoiser.validate()?;
        if header.vocabulary.len() != header.denoiser.vocab_size {
            return Err(bad("vocabulary size does not match the denoiser"));
        }
        let mut model = Denoiser::empty(header.denoiser.clone())?;
        let mut blob = &body[hlen..];
        let mut moments: Vec<(Option<Tensor>, Option<Tensor>)> =
            vec![(None, None); model.params().len()];
        for entry in &header.tensors {
            let id = model
                .params()
                .id(&entry.name)
                .ok_or_else(|| bad(&format!("unknown tensor {}", entry.name)))?;
            if model.params().value(id).shape() != entry.shape.as_slice() {
                return Err(bad(&format!("tensor {} has shape {:?}", entry.name, entry.shape)));
            }
            let n: usize = entry.shape.iter().product();
            if blob.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let data: Vec<f32> = blob[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            blob = &blob[4 * n..];
            let t = Tensor::from_vec(entry.shape.clone(), data)?;
            match entry.role {
                Role::Param => *model.params_mut().value_mut(id) = t,
                Role::AdamM => moments[id.0].0 = Some(t),
                Role::AdamV => moments[id.0].1 = Some(t),
            }
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after tensor data"));
        }
        let params_seen = header.tensors.iter().filter(|e| e.role == Role::Param).count();
        if params_seen != model.params().len() {
            return Err(bad("checkpoint does not hold every parameter"));
        }
        if let Some(train) = &header.train {
            let ids: Vec<_> = model.params().ids().collect();
            for id in ids {
                match std::mem::take(&mut moments[id.0]) {
                    (Some(m), Some(v)) => model.params_mut().set_moments(id, m, v)?,
                    _ => return Err(bad("training state without optimizer moments")),
                }
            }
            model.params_mut().set_step_count(train.step);
        }
        Ok(Checkpoint {
            model,
            schedule: header.schedule,
            vocabulary: header.vocabulary,
            train: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the stored network shape against `expected`.
    pub fn load_expecting(path: &Path, expected: &DenoiserConfig) -> Result<Checkpoint> {
        let ck = Self::load(path)?;
        if ck.model.config() != expected {
            return Err(Error::Config(format!(
                "{} holds a different network configuration",
                path.display()
            )));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Checkpoint {
        Checkpoint::new(
            Denoiser::new(DenoiserConfig::tiny(), 3).unwrap(),
            ScheduleConfig::default(),
        )
    }

    #[test]
    fn save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.atnf");
        let ck = tiny();
        ck.save(&p).unwrap();
        let back = Checkpoint::load(&p).unwrap();
        assert_eq!(back.to_bytes(), ck.to_bytes());
        assert_eq!(back.fingerprint(), ck.fingerprint());
    }

    #[test]
    fn loss_trace_round_trips_bit_exactly() {
        let mut ck = tiny();
        let losses = vec![0.9734383374452591, 0.9817008078098297, 0.9854211360216141, 1e-300];
        ck.train = Some(TrainState {
            config: crate::trainer::TrainConfig {
                model: DenoiserConfig::tiny(),
                ..Default::default()
            },
            step: losses.len() as u64,
            losses: losses.clone(),
        });
        let back = Checkpoint::from_bytes(&ck.to_bytes(), Path::new("mem")).unwrap();
        let got = back.train.unwrap().losses;
        assert!(got.iter().zip(&losses).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn version_and_magic_checked() {
        let mut bytes = tiny().to_bytes();
        bytes[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Version { found: 9, .. })
        ));
        bytes[0] = b'X';
        assert!(matches!(
            Checkpoint::from_bytes(&bytes, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn truncation_detected() {
        let bytes = tiny().to_bytes();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(
            Checkpoint::from_bytes(cut, Path::new("x")),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn mismatched_config_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.atnf");
        tiny().save(&p).unwrap();
        let r = Checkpoint::load_expecting(&p, &DenoiserConfig::default());
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = tiny();
        let mut b = a.clone();
        let id = b.model.params().ids().next().unwrap();
        b.model.params_mut().value_mut(id).data_mut()[0] += 1.0;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
