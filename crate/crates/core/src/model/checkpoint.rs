//! Checkpoint files.
//!
//! All integers and floats are little-endian.
//!
//! ```text
//! "PTCK"            4 bytes
//! version           u32
//! dtype tag         u8      (0 = f32, 1 = f64)
//! config length     u32
//! config            JSON bytes
//! config hash       32 bytes, SHA-256 of the config bytes
//! step              u64
//! tensor count      u32
//! per tensor:       name length u16, name bytes, rank u8, dims u32 x rank, values
//! optimizer flag    u8; if 1: step counter u64, then first and second
//!                   moments in tensor-table order (values only)
//! rng flag          u8; if 1: seed 32 bytes, stream u64, word position u128
//! ```

use std::path::Path;

use rand::SeedableRng;
use sha2::{Digest, Sha256};

use super::{ModelError, PopT, PopTConfig};
use crate::engine::{DType, OptimizerState, Params, Real, Rng, Tensor};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PTCK";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint holds {found:?} values, {expected:?} requested")]
    DTypeMismatch { found: Option<DType>, expected: DType },
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Saved stream position of a ChaCha generator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<R> {
    pub model: PopT<R>,
    pub optimizer: Option<OptimizerState<R>>,
    pub rng: Option<RngState>,
    pub step: u64,
}

impl<R: Real> Checkpoint<R> {
    pub fn new(model: PopT<R>) -> Self {
        Checkpoint {
            model,
            optimizer: None,
            rng: None,
            step: 0,
        }
    }

    pub fn config_hash(&self) -> [u8; 32] {
        config_hash(&self.model.config)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(R::DTYPE.tag());
        let cfg = config_bytes(&self.model.config);
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(&cfg);
        out.extend_from_slice(&Sha256::digest(&cfg));
        out.extend_from_slice(&self.step.to_le_bytes());
        let params = &self.model.params;
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (_, name, t) in params.iter() {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &s in t.shape() {
                out.extend_from_slice(&(s as u32).to_le_bytes());
            }
            write_values(&mut out, t.data());
        }
        match &self.optimizer {
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.t.to_le_bytes());
                for t in st.m.iter().chain(&st.v) {
                    write_values(&mut out, t.data());
                }
            }
            None => out.push(0),
        }
        match &self.rng {
            Some(r) => {
                out.push(1);
                out.extend_from_slice(&r.seed);
                out.extend_from_slice(&r.stream.to_le_bytes());
                out.extend_from_slice(&r.word_pos.to_le_bytes());
            }
            None => out.push(0),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let tag = r.u8()?;
        if DType::from_tag(tag) != Some(R::DTYPE) {
            return Err(CheckpointError::DTypeMismatch {
                found: DType::from_tag(tag),
                expected: R::DTYPE,
            });
        }
        let cfg_len = r.u32()? as usize;
        let cfg = r.take(cfg_len)?;
        let stored_hash = r.take(32)?;
        if Sha256::digest(cfg).as_slice() != stored_hash {
            log::warn!("checkpoint config hash does not match its config block");
        }
        let config: PopTConfig =
            serde_json::from_slice(cfg).map_err(|e| CheckpointError::Corrupt(format!("config: {e}")))?;
        config.validate()?;
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = Params::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n = shape.iter().product();
            let values = r.values::<R>(n)?;
            if params.id(&name).is_some() {
                return Err(CheckpointError::Corrupt(format!("duplicate tensor `{name}`")));
            }
            params.add(name, Tensor::new(shape, values));
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let t = r.u64()?;
                let shapes: Vec<Vec<usize>> = params.iter().map(|(_, _, p)| p.shape().to_vec()).collect();
                let read = |r: &mut Reader| -> Result<Vec<Tensor<R>>, CheckpointError> {
                    shapes
                        .iter()
                        .map(|s| Ok(Tensor::new(s.clone(), r.values::<R>(s.iter().product())?)))
                        .collect()
                };
                let m = read(&mut r)?;
                let v = read(&mut r)?;
                Some(OptimizerState { m, v, t })
            }
            f => return Err(CheckpointError::Corrupt(format!("optimizer flag {f}"))),
        };
        let rng = match r.u8()? {
            0 => None,
            1 => {
                let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
                let stream = r.u64()?;
                let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
                Some(RngState { seed, stream, word_pos })
            }
            f => return Err(CheckpointError::Corrupt(format!("rng flag {f}"))),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let model = PopT::from_params(config, params)?;
        Ok(Checkpoint {
            model,
            optimizer,
            rng,
            step,
        })
    }

    /// Rebuilds a generator at the saved position, or seeds a fresh one.
    pub fn rng_or_seed(&self, seed: u64) -> Rng {
        self.rng.as_ref().map(RngState::restore).unwrap_or_else(|| Rng::seed_from_u64(seed))
    }
}

fn config_bytes(c: &PopTConfig) -> Vec<u8> {
    serde_json::to_vec(c).expect("config serialises")
}

/// SHA-256 of the serialised model config.
pub fn config_hash(c: &PopTConfig) -> [u8; 32] {
    Sha256::digest(config_bytes(c)).into()
}

fn write_values<R: Real>(out: &mut Vec<u8>, data: &[R]) {
    out.reserve(data.len() * R::DTYPE.size());
    for &x in data {
        x.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or(CheckpointError::Truncated(self.bytes.len()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn values<R: Real>(&mut self, n: usize) -> Result<Vec<R>, CheckpointError> {
        let size = R::DTYPE.size();
        let raw = self.take(n.checked_mul(size).ok_or(CheckpointError::Truncated(self.bytes.len()))?)?;
        Ok(raw.chunks_exact(size).map(R::read_le).collect())
    }
}

pub fn save_checkpoint<R: Real>(path: &Path, ckpt: &Checkpoint<R>) -> Result<(), CheckpointError> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_checkpoint<R: Real>(path: &Path) -> Result<Checkpoint<R>, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
