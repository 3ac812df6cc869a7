//! Construction of self-supervised examples.

use std::ops::Range;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::PretrainError;
use crate::data::EmbeddingStore;
use crate::encoding::TokenSpec;
use crate::engine::Rng;

/// Inclusive bounds on the size of each channel subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeRange {
    pub min: usize,
    pub max: usize,
}

/// Where swapped-in activity comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SwapMode {
    /// Another channel at another time.
    #[default]
    OtherChannel,
    /// The same channel at another time.
    SelfRandomize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replacement {
    pub channel: usize,
    pub time_ms: u64,
}

/// Two disjoint channel subsets read at times `t_a` and `t_b`.
///
/// Tokens are ordered `S_A` then `S_B`; `replacements`, `y_tokens` follow the
/// same order.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainExample {
    pub set_a: Vec<usize>,
    pub set_b: Vec<usize>,
    pub t_a_ms: u64,
    pub t_b_ms: u64,
    pub replacements: Vec<Option<Replacement>>,
    pub y_cls: u8,
    pub y_tokens: Vec<u8>,
    /// Per-token coordinate offsets (coordinate blur).
    pub jitter: Vec<[f64; 3]>,
}

impl PretrainExample {
    pub fn num_tokens(&self) -> usize {
        self.set_a.len() + self.set_b.len()
    }

    /// `(channel, own time, ensemble id)` per token.
    pub fn slots(&self) -> impl Iterator<Item = (usize, u64, u8)> + '_ {
        let a = self.set_a.iter().map(|&c| (c, self.t_a_ms, 0u8));
        let b = self.set_b.iter().map(|&c| (c, self.t_b_ms, 1u8));
        a.chain(b)
    }

    /// Model input rows, with swaps and jitter applied.
    pub fn token_specs(&self) -> Vec<TokenSpec> {
        self.slots()
            .enumerate()
            .map(|(i, (channel, time_ms, ensemble))| {
                let mut spec = TokenSpec::new(channel, time_ms, ensemble);
                if let Some(r) = self.replacements[i] {
                    spec.source_channel = r.channel;
                    spec.time_ms = r.time_ms;
                }
                spec.jitter = self.jitter[i];
                spec
            })
            .collect()
    }

    /// Token indices whose content was replaced.
    pub fn swapped(&self) -> Vec<usize> {
        (0..self.num_tokens()).filter(|&i| self.replacements[i].is_some()).collect()
    }
}

/// Draws disjoint subsets and a time pair from `windows`.
///
/// Positives (probability 0.5) read `S_B` one stride after `S_A`; negatives
/// are at least two strides apart.
pub fn sample_ensemble_pair(
    store: &EmbeddingStore,
    windows: Range<usize>,
    sizes: SizeRange,
    rng: &mut Rng,
) -> Result<PretrainExample, PretrainError> {
    let n = store.n_channels();
    if sizes.min == 0 || sizes.min > sizes.max {
        return Err(PretrainError::InvalidConfig(format!("bad size range {}..={}", sizes.min, sizes.max)));
    }
    if 2 * sizes.max > n {
        return Err(PretrainError::EnsembleTooLarge { requested: 2 * sizes.max, channels: n });
    }
    if windows.len() < 3 || windows.end > store.n_windows() {
        return Err(PretrainError::InvalidConfig(format!("window range {windows:?} too short or out of bounds")));
    }
    let size_a = rng.gen_range(sizes.min..=sizes.max);
    let size_b = rng.gen_range(sizes.min..=sizes.max);
    let chosen = sample(rng, n, size_a + size_b).into_vec();
    let (set_a, set_b) = (chosen[..size_a].to_vec(), chosen[size_a..].to_vec());

    let positive = rng.gen_bool(0.5);
    let (wa, wb) = if positive {
        let w = rng.gen_range(windows.start..windows.end - 1);
        (w, w + 1)
    } else {
        loop {
            let a = rng.gen_range(windows.clone());
            let b = rng.gen_range(windows.clone());
            if a.abs_diff(b) >= 2 {
                break (a, b);
            }
        }
    };
    let total = size_a + size_b;
    Ok(PretrainExample {
        set_a,
        set_b,
        t_a_ms: store.time_ms(wa),
        t_b_ms: store.time_ms(wb),
        replacements: vec![None; total],
        y_cls: u8::from(positive),
        y_tokens: vec![0; total],
        jitter: vec![[0.0; 3]; total],
    })
}

/// Replaces `round(rate * tokens)` token contents with activity from
/// another time, drawn within `windows`.
pub fn apply_channel_swaps(
    example: &PretrainExample,
    store: &EmbeddingStore,
    windows: Range<usize>,
    rate: f64,
    mode: SwapMode,
    rng: &mut Rng,
) -> Result<PretrainExample, PretrainError> {
    if !(0.0..1.0).contains(&rate) {
        return Err(PretrainError::InvalidConfig(format!("swap rate {rate} outside [0, 1)")));
    }
    let n = store.n_channels();
    let total = example.num_tokens();
    let count = (rate * total as f64).round() as usize;
    let mut out = example.clone();
    if count == 0 {
        return Ok(out);
    }
    if windows.len() < 2 || (mode == SwapMode::OtherChannel && n < 2) {
        return Err(PretrainError::InvalidConfig("not enough windows or channels to swap".into()));
    }
    let slots: Vec<(usize, u64, u8)> = example.slots().collect();
    for i in sample(rng, total, count).into_vec() {
        let (channel, own_time, _) = slots[i];
        let source = match mode {
            SwapMode::SelfRandomize => channel,
            SwapMode::OtherChannel => {
                let c = rng.gen_range(0..n - 1);
                if c >= channel {
                    c + 1
                } else {
                    c
                }
            }
        };
        let own = store.window_at(own_time).expect("example time is a window");
        let w = loop {
            let w = rng.gen_range(windows.clone());
            if w != own {
                break w;
            }
        };
        out.replacements[i] = Some(Replacement {
            channel: source,
            time_ms: store.time_ms(w),
        });
        out.y_tokens[i] = 1;
    }
    Ok(out)
}

/// Adds independent `N(0, sigma^2)` offsets to every token coordinate.
pub fn blur_coordinates(example: &mut PretrainExample, sigma: f64, rng: &mut Rng) {
    let dist = Normal::new(0.0, sigma).expect("finite sigma");
    for j in &mut example.jitter {
        for c in j.iter_mut() {
            *c = dist.sample(rng);
        }
    }
}

/// Replaces every label with an independent fair coin (leakage control).
pub fn randomize_labels(example: &mut PretrainExample, rng: &mut Rng) {
    example.y_cls = u8::from(rng.gen_bool(0.5));
    for y in &mut example.y_tokens {
        *y = u8::from(rng.gen_bool(0.5));
    }
}
