//! File-backed store of per-channel window embeddings.
//!
//! Binary layout, all little-endian:
//!
//! ```text
//! magic      4 bytes  "POPT"
//! version    u32      1
//! n_channels u32
//! d_emb      u32
//! stride_ms  u32
//! n_windows  u32
//! coords     n_channels x 3 x f64   (left, posterior, inferior)
//! embeddings n_channels x n_windows x d_emb x f32, row-major
//! ```
//!
//! Window `w` of every channel starts at `w * stride_ms`.

use std::path::Path;

use super::DataError;

pub const STORE_MAGIC: [u8; 4] = *b"POPT";
pub const STORE_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    stride_ms: u32,
    n_windows: usize,
    d_emb: usize,
    coords: Vec<[f64; 3]>,
    data: Vec<f32>,
}

impl EmbeddingStore {
    /// `data` is `[channel][window][dim]`.
    pub fn new(
        stride_ms: u32,
        n_windows: usize,
        d_emb: usize,
        coords: Vec<[f64; 3]>,
        data: Vec<f32>,
    ) -> Result<Self, DataError> {
        if stride_ms == 0 {
            return Err(DataError::DimensionMismatch("stride must be positive".into()));
        }
        if d_emb == 0 {
            return Err(DataError::DimensionMismatch("d_emb must be positive".into()));
        }
        let expected = coords.len() * n_windows * d_emb;
        if data.len() != expected {
            return Err(DataError::DimensionMismatch(format!(
                "{} channels x {n_windows} windows x {d_emb} dims needs {expected} values, got {}",
                coords.len(),
                data.len()
            )));
        }
        Ok(EmbeddingStore {
            stride_ms,
            n_windows,
            d_emb,
            coords,
            data,
        })
    }

    pub fn n_channels(&self) -> usize {
        self.coords.len()
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn d_emb(&self) -> usize {
        self.d_emb
    }

    pub fn stride_ms(&self) -> u32 {
        self.stride_ms
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn time_ms(&self, window: usize) -> u64 {
        window as u64 * self.stride_ms as u64
    }

    /// Window index starting exactly at `time_ms`, if any.
    pub fn window_at(&self, time_ms: u64) -> Option<usize> {
        let s = self.stride_ms as u64;
        (time_ms % s == 0 && time_ms / s < self.n_windows as u64).then(|| (time_ms / s) as usize)
    }

    pub fn embedding(&self, channel: usize, window: usize) -> &[f32] {
        assert!(channel < self.n_channels() && window < self.n_windows, "window out of range");
        let start = (channel * self.n_windows + window) * self.d_emb;
        &self.data[start..start + self.d_emb]
    }

    pub fn raw(&self) -> &[f32] {
        &self.data
    }
}

pub fn write_store(store: &EmbeddingStore, path: &Path) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(HEADER_LEN + store.coords.len() * 24 + store.data.len() * 4);
    buf.extend_from_slice(&STORE_MAGIC);
    for v in [
        STORE_VERSION,
        store.n_channels() as u32,
        store.d_emb as u32,
        store.stride_ms,
        store.n_windows as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for c in &store.coords {
        for x in c {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    for x in &store.data {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| DataError::io(path, e))
}

pub fn read_store(path: &Path) -> Result<EmbeddingStore, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    decode_store(&bytes)
}

fn u32_at(bytes: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(bytes[off..off + 4].try_into().expect("4 bytes"))
}

pub(crate) fn decode_store(bytes: &[u8]) -> Result<EmbeddingStore, DataError> {
    if bytes.len() < 4 || bytes[..4] != STORE_MAGIC {
        return Err(DataError::BadMagic {
            expected: STORE_MAGIC,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(DataError::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let version = u32_at(bytes, 4);
    if version != STORE_VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let n_channels = u32_at(bytes, 8) as usize;
    let d_emb = u32_at(bytes, 12) as usize;
    let stride_ms = u32_at(bytes, 16);
    let n_windows = u32_at(bytes, 20) as usize;
    let coord_len = n_channels * 24;
    let data_len = n_channels
        .checked_mul(n_windows)
        .and_then(|x| x.checked_mul(d_emb))
        .ok_or_else(|| DataError::DimensionMismatch("header dimensions overflow".into()))?;
    let expected = HEADER_LEN + coord_len + data_len * 4;
    if bytes.len() < expected {
        return Err(DataError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(DataError::DimensionMismatch(format!(
            "header describes {expected} bytes but file holds {}",
            bytes.len()
        )));
    }
    let mut off = HEADER_LEN;
    let mut coords = Vec::with_capacity(n_channels);
    for _ in 0..n_channels {
        let mut c = [0.0; 3];
        for x in &mut c {
            *x = f64::from_le_bytes(bytes[off..off + 8].try_into().expect("8 bytes"));
            off += 8;
        }
        coords.push(c);
    }
    let data = bytes[off..]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    EmbeddingStore::new(stride_ms, n_windows, d_emb, coords, data)
}
