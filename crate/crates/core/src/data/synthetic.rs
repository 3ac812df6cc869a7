//! Synthetic subjects with planted block structure.
//!
//! A latent state `z(t) in R^k` follows a stationary order-1 autoregression
//! `z(t+1) = rho z(t) + sqrt(1 - rho^2) eps`. Channels are grouped in blocks;
//! every channel of block `b` emits `W_b z(t) + sigma * eta`, where `W_b`
//! only reads the latent components assigned to that block. Blocks sit at
//! well separated centres so same-block channels are spatial neighbours.
//!
//! With `shared_mixing` every block uses the same mixing pattern on its own
//! latent components, so block identity is only recoverable from position.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::layout::{Channel, ElectrodeLayout};
use super::store::EmbeddingStore;
use super::DataError;
use crate::engine::{Rng, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub size: usize,
    /// Latent components read by this block.
    pub latents: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Threshold {
    Zero,
    Median,
}

/// Label is `z_component(t) > threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelRule {
    pub component: usize,
    pub threshold: Threshold,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub subject: String,
    pub num_channels: usize,
    pub d_emb: usize,
    pub k: usize,
    pub blocks: Vec<BlockSpec>,
    pub shared_mixing: bool,
    pub rho: f64,
    pub sigma: f64,
    pub label: LabelRule,
    pub num_windows: usize,
    pub stride_ms: u32,
    pub block_spacing_mm: f64,
    pub block_spread_mm: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    /// Even split of channels and latent components over `n_blocks` blocks.
    pub fn blocks(num_channels: usize, d_emb: usize, k: usize, n_blocks: usize, seed: u64) -> Self {
        assert!(n_blocks > 0 && k % n_blocks == 0, "latent dimension must divide evenly over blocks");
        let per = k / n_blocks;
        let blocks = (0..n_blocks)
            .map(|b| BlockSpec {
                size: num_channels / n_blocks + usize::from(b < num_channels % n_blocks),
                latents: (b * per..(b + 1) * per).collect(),
            })
            .collect();
        SyntheticConfig {
            subject: format!("synthetic-{seed}"),
            num_channels,
            d_emb,
            k,
            blocks,
            shared_mixing: true,
            rho: 0.95,
            sigma: 0.3,
            label: LabelRule {
                component: 0,
                threshold: Threshold::Median,
            },
            num_windows: 2000,
            stride_ms: 500,
            block_spacing_mm: 40.0,
            block_spread_mm: 6.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidConfig(m));
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad(format!("rho {} outside (0, 1)", self.rho));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("sigma {} must be finite and non-negative", self.sigma));
        }
        if self.num_channels == 0 || self.d_emb == 0 || self.k == 0 || self.num_windows < 2 {
            return bad("channels, d_emb, k must be positive and num_windows >= 2".into());
        }
        if self.stride_ms == 0 {
            return bad("stride_ms must be positive".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one block required".into());
        }
        let covered: usize = self.blocks.iter().map(|b| b.size).sum();
        if covered != self.num_channels {
            return bad(format!("blocks cover {covered} channels, config has {}", self.num_channels));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if b.size == 0 || b.latents.is_empty() {
                return bad(format!("block {i} is empty"));
            }
            if b.latents.iter().any(|&c| c >= self.k) {
                return bad(format!("block {i} reads a latent component >= k={}", self.k));
            }
            if self.shared_mixing && b.latents.len() != self.blocks[0].latents.len() {
                return bad("shared mixing needs the same latent count in every block".into());
            }
        }
        if self.label.component >= self.k {
            return bad(format!("label component {} >= k={}", self.label.component, self.k));
        }
        Ok(())
    }
}

/// Output of [`generate_synthetic`].
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub layout: ElectrodeLayout,
    pub store: EmbeddingStore,
    /// One binary label per window.
    pub labels: Vec<u8>,
    /// `|<W_i, W_j>| / (|W_i| |W_j|)` over the noise-free mixing matrices.
    pub coupling: Tensor<f64>,
    /// `[n_windows, k]` latent path.
    pub latents: Tensor<f64>,
    pub block_of: Vec<usize>,
}

fn normal(rng: &mut Rng) -> f64 {
    rng.sample(StandardNormal)
}

pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset, DataError> {
    config.validate()?;
    let mut rng = Rng::seed_from_u64(config.seed);
    let (d, k, t_len) = (config.d_emb, config.k, config.num_windows);

    // Block mixing matrices, [d, k] row-major, zero outside the block's latents.
    let width = config.blocks[0].latents.len();
    let shared: Vec<f64> = (0..d * width).map(|_| normal(&mut rng)).collect();
    let mut mixing = Vec::with_capacity(config.blocks.len());
    for b in &config.blocks {
        let m = b.latents.len();
        let scale = 1.0 / (m as f64).sqrt();
        let mut w = vec![0.0; d * k];
        for r in 0..d {
            for (j, &c) in b.latents.iter().enumerate() {
                let v = if config.shared_mixing { shared[r * m + j] } else { normal(&mut rng) };
                w[r * k + c] = v * scale;
            }
        }
        mixing.push(w);
    }

    let mut block_of = Vec::with_capacity(config.num_channels);
    for (b, spec) in config.blocks.iter().enumerate() {
        block_of.extend(std::iter::repeat(b).take(spec.size));
    }

    let mut channels = Vec::with_capacity(config.num_channels);
    for (i, &b) in block_of.iter().enumerate() {
        let center = [b as f64 * config.block_spacing_mm, 0.0, 0.0];
        let mut coords = [0.0; 3];
        for (c, m) in coords.iter_mut().zip(center) {
            *c = m + config.block_spread_mm * normal(&mut rng);
        }
        channels.push(Channel {
            id: format!("ch{i:03}"),
            coords,
            region: Some(format!("block{b}")),
        });
    }
    let layout = ElectrodeLayout::new(config.subject.clone(), channels)?;

    let innovation = (1.0 - config.rho * config.rho).sqrt();
    let mut z = vec![0.0; t_len * k];
    for c in 0..k {
        z[c] = normal(&mut rng);
    }
    for t in 1..t_len {
        for c in 0..k {
            z[t * k + c] = config.rho * z[(t - 1) * k + c] + innovation * normal(&mut rng);
        }
    }

    let mut data = Vec::with_capacity(config.num_channels * t_len * d);
    for &b in &block_of {
        let w = &mixing[b];
        for t in 0..t_len {
            let zt = &z[t * k..(t + 1) * k];
            for r in 0..d {
                let clean: f64 = w[r * k..(r + 1) * k].iter().zip(zt).map(|(a, b)| a * b).sum();
                data.push((clean + config.sigma * normal(&mut rng)) as f32);
            }
        }
    }
    let coords = layout.channels.iter().map(|c| c.coords).collect();
    let store = EmbeddingStore::new(config.stride_ms, t_len, d, coords, data)?;

    let comp: Vec<f64> = (0..t_len).map(|t| z[t * k + config.label.component]).collect();
    let threshold = match config.label.threshold {
        Threshold::Zero => 0.0,
        Threshold::Median => {
            let mut sorted = comp.clone();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            if n % 2 == 1 {
                sorted[n / 2]
            } else {
                0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
            }
        }
    };
    let labels = comp.iter().map(|&v| u8::from(v > threshold)).collect();

    let n = config.num_channels;
    let norms: Vec<f64> = mixing.iter().map(|w| w.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut coupling = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            let (bi, bj) = (block_of[i], block_of[j]);
            let v = if i == j {
                1.0
            } else {
                let dot: f64 = mixing[bi].iter().zip(&mixing[bj]).map(|(a, b)| a * b).sum();
                dot.abs() / (norms[bi] * norms[bj])
            };
            coupling.data_mut()[i * n + j] = v;
        }
    }

    Ok(SyntheticDataset {
        layout,
        store,
        labels,
        coupling,
        latents: Tensor::new(vec![t_len, k], z),
        block_of,
    })
}
