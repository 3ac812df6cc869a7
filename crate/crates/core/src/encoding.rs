//! Model inputs: sinusoidal encodings of electrode coordinates and ensemble
//! membership, summed with (projected) channel embeddings.
//!
//! Coordinates are fed to the sinusoid raw, in millimetres. Each of the four
//! sub-encodings (left, posterior, inferior, ensemble) takes `d / 4` of the
//! model width.

use serde::{Deserialize, Serialize};

use crate::data::{ElectrodeLayout, EmbeddingStore};
use crate::engine::{Real, Tensor};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum EncodingError {
    #[error("sinusoid dimension {0} must be even")]
    OddDimension(usize),
    #[error("model width {0} must be divisible by 4")]
    WidthNotDivisibleBy4(usize),
    #[error("channel {channel} has no window at {time_ms} ms")]
    MissingWindow { channel: usize, time_ms: u64 },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

/// Interleaved `[sin(c w_0), cos(c w_0), sin(c w_1), ...]` with
/// `w_i = 10000^(-2i / dim)`.
pub fn sinusoid_encode(coordinate: f64, dim: usize) -> Result<Vec<f64>, EncodingError> {
    if dim % 2 != 0 {
        return Err(EncodingError::OddDimension(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-(2.0 * i as f64) / dim as f64);
        let a = coordinate * freq;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// `[e_left; e_posterior; e_inferior; e_ensemble]`, each block `d / 4` wide.
pub fn position_embedding(coords: [f64; 3], ensemble_id: u8, d: usize) -> Result<Vec<f64>, EncodingError> {
    if d % 4 != 0 {
        return Err(EncodingError::WidthNotDivisibleBy4(d));
    }
    let q = d / 4;
    let mut out = Vec::with_capacity(d);
    for c in coords {
        out.extend(sinusoid_encode(c, q)?);
    }
    out.extend(sinusoid_encode(ensemble_id as f64, q)?);
    Ok(out)
}

/// How channel positions enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PositionMode {
    /// Spatial coordinates and ensemble membership.
    #[default]
    Full,
    /// Spatial blocks zeroed; ensemble membership kept.
    NoSpatial,
}

/// One requested input row.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSpec {
    /// Channel whose position the row carries.
    pub channel: usize,
    /// Channel whose embedding fills the row; differs from `channel` after a swap.
    pub source_channel: usize,
    /// Start time of the window the embedding is read from.
    pub time_ms: u64,
    /// 0 or 1.
    pub ensemble: u8,
    /// Added to the coordinates before encoding (coordinate blur).
    pub jitter: [f64; 3],
}

impl TokenSpec {
    pub fn new(channel: usize, time_ms: u64, ensemble: u8) -> Self {
        TokenSpec {
            channel,
            source_channel: channel,
            time_ms,
            ensemble,
            jitter: [0.0; 3],
        }
    }
}

/// Row metadata of a [`TokenMatrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMeta {
    pub channel: usize,
    pub ensemble: u8,
    pub time_ms: u64,
}

/// Channel rows of one model input before projection. The CLS row is not
/// stored; it is prepended when the matrix is materialised.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix<R> {
    /// `[N, d_emb]` raw embeddings.
    pub embeddings: Tensor<R>,
    /// `[N, d]` position embeddings.
    pub positions: Tensor<R>,
    pub meta: Vec<TokenMeta>,
}

impl<R: Real> TokenMatrix<R> {
    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// `[N + 1, d]`: CLS row, then `project(B_i) + pos(i)` per channel.
    /// `projection` is `(weight [d_emb, d], bias [d])`; `None` is identity.
    pub fn materialize(
        &self,
        projection: Option<(&Tensor<R>, &Tensor<R>)>,
        cls: &Tensor<R>,
    ) -> Result<Tensor<R>, EncodingError> {
        let d = self.positions.cols();
        if cls.numel() != d {
            return Err(EncodingError::DimensionMismatch(format!("CLS has {} values, width is {d}", cls.numel())));
        }
        let projected = match projection {
            Some((w, b)) => {
                if w.rows() != self.embeddings.cols() || w.cols() != d || b.numel() != d {
                    return Err(EncodingError::DimensionMismatch("input projection shape".into()));
                }
                let mut p = self.embeddings.matmul(w);
                for r in 0..p.rows() {
                    for (x, &bb) in p.row_mut(r).iter_mut().zip(b.data()) {
                        *x += bb;
                    }
                }
                p
            }
            None => {
                if self.embeddings.cols() != d {
                    return Err(EncodingError::DimensionMismatch(format!(
                        "d_emb {} differs from width {d} without a projection",
                        self.embeddings.cols()
                    )));
                }
                self.embeddings.clone()
            }
        };
        let mut data = cls.data().to_vec();
        for (r, pos) in (0..projected.rows()).map(|r| (r, self.positions.row(r))) {
            data.extend(projected.row(r).iter().zip(pos).map(|(&a, &b)| a + b));
        }
        Ok(Tensor::matrix(self.len() + 1, d, data))
    }
}

/// Gathers embeddings and position embeddings for `tokens`.
pub fn assemble_tokens<R: Real>(
    store: &EmbeddingStore,
    layout: &ElectrodeLayout,
    tokens: &[TokenSpec],
    d: usize,
    mode: PositionMode,
) -> Result<TokenMatrix<R>, EncodingError> {
    if layout.len() != store.n_channels() {
        return Err(EncodingError::DimensionMismatch(format!(
            "layout has {} channels, store has {}",
            layout.len(),
            store.n_channels()
        )));
    }
    if d % 4 != 0 {
        return Err(EncodingError::WidthNotDivisibleBy4(d));
    }
    let q = d / 4;
    let mut emb = Vec::with_capacity(tokens.len() * store.d_emb());
    let mut pos = Vec::with_capacity(tokens.len() * d);
    let mut meta = Vec::with_capacity(tokens.len());
    for t in tokens {
        if t.channel >= layout.len() || t.source_channel >= layout.len() {
            return Err(EncodingError::DimensionMismatch(format!("channel {} out of range", t.channel)));
        }
        let window = store.window_at(t.time_ms).ok_or(EncodingError::MissingWindow {
            channel: t.source_channel,
            time_ms: t.time_ms,
        })?;
        emb.extend(store.embedding(t.source_channel, window).iter().map(|&x| R::from_f64(x as f64)));
        let c = layout.channels[t.channel].coords;
        let coords = [c[0] + t.jitter[0], c[1] + t.jitter[1], c[2] + t.jitter[2]];
        let mut p = position_embedding(coords, t.ensemble, d)?;
        if mode == PositionMode::NoSpatial {
            p[..3 * q].iter_mut().for_each(|x| *x = 0.0);
        }
        pos.extend(p.into_iter().map(R::from_f64));
        meta.push(TokenMeta {
            channel: t.channel,
            ensemble: t.ensemble,
            time_ms: t.time_ms,
        });
    }
    Ok(TokenMatrix {
        embeddings: Tensor::matrix(tokens.len(), store.d_emb(), emb),
        positions: Tensor::matrix(tokens.len(), d, pos),
        meta,
    })
}

/// [`assemble_tokens`] followed by [`TokenMatrix::materialize`].
#[allow(clippy::too_many_arguments)]
pub fn assemble_input<R: Real>(
    store: &EmbeddingStore,
    layout: &ElectrodeLayout,
    tokens: &[TokenSpec],
    d: usize,
    mode: PositionMode,
    projection: Option<(&Tensor<R>, &Tensor<R>)>,
    cls: &Tensor<R>,
) -> Result<Tensor<R>, EncodingError> {
    assemble_tokens(store, layout, tokens, d, mode)?.materialize(projection, cls)
}
