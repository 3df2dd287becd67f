//! Versioned binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "RLGNCKPT"
//! version    u32
//! manifest   u32 length + UTF-8 JSON
//! tensors    f64 blobs in manifest order (params, then m, then v)
//! checksum   32-byte SHA-256 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::{EncoderDims, EncoderParams, TENSOR_NAMES};
use crate::error::{Error, Result};
use crate::trainer::adamw::OptimizerState;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"RLGNCKPT";
pub const VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

/// Snapshot of a ChaCha stream position.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// `u128` word position, as a decimal string (JSON numbers are f64).
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub dims: EncoderDims,
    pub params: EncoderParams<f64>,
    pub optimizer: OptimizerState<f64>,
    /// Optimizer steps taken.
    pub step: u64,
    /// Micro-batches consumed.
    pub micro_step: u64,
    pub rng: RngState,
    pub config: TrainConfig,
    pub config_hash: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    dims: EncoderDims,
    step: u64,
    micro_step: u64,
    optimizer_t: u64,
    rng: RngState,
    config: TrainConfig,
    config_hash: String,
    tensors: Vec<TensorEntry>,
}

fn shapes(p: &EncoderParams<f64>) -> [[usize; 2]; 5] {
    [
        [p.token_table.rows(), p.token_table.cols()],
        [p.patch_projection.rows(), p.patch_projection.cols()],
        [p.position_table.rows(), p.position_table.cols()],
        [1, p.attention_query.len()],
        [p.output_projection.rows(), p.output_projection.cols()],
    ]
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let groups = [
            ("params", &self.params),
            ("adam_m", &self.optimizer.m),
            ("adam_v", &self.optimizer.v),
        ];
        let mut tensors = Vec::new();
        for (group, p) in groups {
            for (name, shape) in TENSOR_NAMES.iter().zip(shapes(p)) {
                tensors.push(TensorEntry {
                    group: group.into(),
                    name: (*name).into(),
                    shape,
                });
            }
        }
        let manifest = Manifest {
            format: "realign-checkpoint".into(),
            dims: self.dims,
            step: self.step,
            micro_step: self.micro_step,
            optimizer_t: self.optimizer.t,
            rng: self.rng.clone(),
            config: self.config.clone(),
            config_hash: self.config_hash.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(16 + json.len() + 8 * 3 * self.params.num_params() + 32);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, p) in groups {
            for t in p.tensors() {
                for x in t {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 || &bytes[..8] != MAGIC {
            return Err(Error::CheckpointFormat("bad magic".into()));
        }
        if bytes.len() < 16 + CHECKSUM_LEN {
            return Err(Error::CheckpointChecksum);
        }
        let (body, stored) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::CheckpointChecksum);
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersion {
                found: version,
                expected: VERSION,
            });
        }
        let mlen = u32::from_le_bytes(body[12..16].try_into().expect("4 bytes")) as usize;
        let json = body
            .get(16..16 + mlen)
            .ok_or_else(|| Error::CheckpointFormat("manifest overruns file".into()))?;
        let manifest: Manifest = serde_json::from_slice(json)?;
        let mut cursor = &body[16 + mlen..];

        let mut read_group = |group: &str| -> Result<EncoderParams<f64>> {
            let mut p = EncoderParams::<f64>::zeros(&manifest.dims);
            let expected = shapes(&p);
            for (i, t) in p.tensors_mut().into_iter().enumerate() {
                let entry = manifest
                    .tensors
                    .iter()
                    .find(|e| e.group == group && e.name == TENSOR_NAMES[i])
                    .ok_or_else(|| {
                        Error::CheckpointFormat(format!("missing tensor {group}/{}", TENSOR_NAMES[i]))
                    })?;
                if entry.shape != expected[i] {
                    return Err(Error::CheckpointFormat(format!(
                        "tensor {group}/{} has shape {:?}, expected {:?}",
                        entry.name, entry.shape, expected[i]
                    )));
                }
                let need = t.len() * 8;
                if cursor.len() < need {
                    return Err(Error::CheckpointFormat("tensor data truncated".into()));
                }
                for (x, chunk) in t.iter_mut().zip(cursor[..need].chunks_exact(8)) {
                    *x = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
                }
                cursor = &cursor[need..];
            }
            Ok(p)
        };
        let params = read_group("params")?;
        let m = read_group("adam_m")?;
        let v = read_group("adam_v")?;
        if !cursor.is_empty() {
            return Err(Error::CheckpointFormat("trailing bytes after tensors".into()));
        }
        Ok(Self {
            dims: manifest.dims,
            params,
            optimizer: OptimizerState {
                m,
                v,
                t: manifest.optimizer_t,
            },
            step: manifest.step,
            micro_step: manifest.micro_step,
            rng: manifest.rng,
            config: manifest.config,
            config_hash: manifest.config_hash,
        })
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_bytes()?)))
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, ckpt.to_bytes()?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
