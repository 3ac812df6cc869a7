//! Reading structure out of trained weights: channel-omission influence on
//! the swap-detection head, and attention rollout to the CLS row.

use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::data::{ElectrodeLayout, EmbeddingStore};
use crate::encoding::{EncodingError, TokenMatrix, TokenSpec};
use crate::engine::{Graph, Real, Rng, Tensor};
use crate::model::{ForwardOptions, ModelError, PopT};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum InterpretError {
    #[error("at least one sample window is required")]
    NoSamples,
    #[error("need at least two channels")]
    TooFewChannels,
    #[error("attention matrix {layer} is not square or has the wrong size")]
    NotSquare { layer: usize },
    #[error("attention matrix {layer} row {row} is not a distribution (sum {sum})")]
    NotStochastic { layer: usize, row: usize, sum: f64 },
    #[error("empty input")]
    Empty,
    #[error("region `{0}` has no channels")]
    EmptyRegion(String),
    #[error("auc {0} outside [0, 1]")]
    InvalidAuc(f64),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// `matrix[i][j]`: mean absolute change of channel `j`'s swap probability
/// when channel `i` is left out. The diagonal is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InfluenceMatrix {
    pub channels: Vec<usize>,
    pub matrix: Vec<Vec<f64>>,
}

impl InfluenceMatrix {
    /// `(M + M^T) / 2`.
    pub fn symmetrized(&self) -> Vec<Vec<f64>> {
        let n = self.channels.len();
        (0..n)
            .map(|i| (0..n).map(|j| 0.5 * (self.matrix[i][j] + self.matrix[j][i])).collect())
            .collect()
    }

    pub fn to_csv(&self, layout: &ElectrodeLayout) -> String {
        let ids: Vec<&str> = self.channels.iter().map(|&c| layout.channels[c].id.as_str()).collect();
        let mut out = format!("omitted,{}\n", ids.join(","));
        for (i, row) in self.matrix.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{},{}\n", ids[i], vals.join(",")));
        }
        out
    }
}

/// Channel-omission influence over `windows`, with all `channels` presented
/// as one ensemble.
pub fn channel_influence<R: Real>(
    model: &PopT<R>,
    store: &EmbeddingStore,
    layout: &ElectrodeLayout,
    channels: &[usize],
    windows: &[usize],
) -> Result<InfluenceMatrix, InterpretError> {
    channel_influence_with(model, store, layout, channels, windows, ForwardOptions::eval())
}

/// [`channel_influence`] with explicit forward switches.
pub fn channel_influence_with<R: Real>(
    model: &PopT<R>,
    store: &EmbeddingStore,
    layout: &ElectrodeLayout,
    channels: &[usize],
    windows: &[usize],
    opts: ForwardOptions,
) -> Result<InfluenceMatrix, InterpretError> {
    let n = channels.len();
    if windows.is_empty() {
        return Err(InterpretError::NoSamples);
    }
    if n < 2 {
        return Err(InterpretError::TooFewChannels);
    }
    let mut sum = vec![vec![0.0; n]; n];
    let mut rng = Rng::seed_from_u64(0);
    for &w in windows {
        let t = store.time_ms(w);
        let specs: Vec<TokenSpec> = channels.iter().map(|&c| TokenSpec::new(c, t, 0)).collect();
        let full: TokenMatrix<R> = model.tokens(store, layout, &specs)?;
        let mut batch = vec![full];
        for i in 0..n {
            let rest: Vec<TokenSpec> = specs.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, s)| s.clone()).collect();
            batch.push(model.tokens(store, layout, &rest)?);
        }
        let mut g = Graph::inference();
        let enc = model.encode(&mut g, &batch, opts, &mut rng)?;
        let tok = model.token_logits(&mut g, &enc);
        let p: Vec<f64> = g.value(tok).data().iter().map(|&z| crate::engine::ops::sigmoid(z).to_f64()).collect();
        let base = &p[..n];
        let mut off = n;
        for (i, row) in sum.iter_mut().enumerate() {
            let mut k = 0;
            for (j, acc) in row.iter_mut().enumerate() {
                if j == i {
                    continue;
                }
                *acc += (base[j] - p[off + k]).abs();
                k += 1;
            }
            off += n - 1;
        }
    }
    let inv = 1.0 / windows.len() as f64;
    let matrix = sum.into_iter().map(|row| row.into_iter().map(|v| v * inv).collect()).collect();
    Ok(InfluenceMatrix {
        channels: channels.to_vec(),
        matrix,
    })
}

/// Mean off-diagonal value within groups and across groups.
pub fn group_contrast(matrix: &[Vec<f64>], group: &[usize]) -> (f64, f64) {
    let (mut w, mut nw, mut a, mut na) = (0.0, 0usize, 0.0, 0usize);
    for (i, row) in matrix.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i == j {
                continue;
            }
            if group[i] == group[j] {
                w += v;
                nw += 1;
            } else {
                a += v;
                na += 1;
            }
        }
    }
    (w / nw.max(1) as f64, a / na.max(1) as f64)
}

/// Average ranks (1-based; ties share the mean of their positions).
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks; NaN if either side is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "spearman needs paired samples");
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
    }
    cov / (va * vb).sqrt()
}

/// Spearman correlation over the strict upper triangles of two matrices.
pub fn upper_triangle_spearman(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mut x = Vec::new();
    let mut y = Vec::new();
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            x.push(a[i][j]);
            y.push(b[i][j]);
        }
    }
    spearman(&x, &y)
}

fn check_stochastic(layer: usize, m: &Tensor<f64>, n: usize) -> Result<(), InterpretError> {
    if m.shape() != [n, n] {
        return Err(InterpretError::NotSquare { layer });
    }
    for r in 0..n {
        let row = m.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > 1e-5 || row.iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(InterpretError::NotStochastic { layer, row: r, sum });
        }
    }
    Ok(())
}

/// `A_hat_L ... A_hat_1` with `A_hat = (A + I) / 2`, rows renormalised.
pub fn attention_rollout(layers: &[Tensor<f64>]) -> Result<Tensor<f64>, InterpretError> {
    let first = layers.first().ok_or(InterpretError::Empty)?;
    let n = first.rows();
    let mut out: Option<Tensor<f64>> = None;
    for (l, a) in layers.iter().enumerate() {
        check_stochastic(l, a, n)?;
        let mut hat = a.clone();
        for r in 0..n {
            let row = hat.row_mut(r);
            row[r] += 1.0;
            row.iter_mut().for_each(|v| *v *= 0.5);
            let s: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= s);
        }
        out = Some(match out {
            None => hat,
            Some(acc) => hat.matmul(&acc),
        });
    }
    Ok(out.expect("non-empty"))
}

/// Rollout of one input through `model`, heads averaged per layer.
pub fn model_rollout<R: Real>(model: &PopT<R>, tokens: &TokenMatrix<R>) -> Result<Tensor<f64>, InterpretError> {
    let opts = ForwardOptions {
        record_attention: true,
        ..ForwardOptions::eval()
    };
    let out = model.forward(tokens, opts, &mut Rng::seed_from_u64(0))?;
    let layers: Vec<Tensor<f64>> = out
        .attention
        .expect("attention recorded")
        .iter()
        .map(|heads| {
            let mut m = Tensor::<f64>::zeros(heads[0].shape());
            for h in heads {
                m.add_assign(&h.cast());
            }
            m.map(|v| v / heads.len() as f64)
        })
        .collect();
    attention_rollout(&layers)
}

/// Linear-interpolation quantile of `values` (`q` in `[0, 1]`).
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionContribution {
    /// Rollout weight from each channel to CLS.
    pub raw: Vec<f64>,
    /// Min-max normalised `raw`; all zero when degenerate.
    pub normalized: Vec<f64>,
    /// `normalized * auc`.
    pub scaled: Vec<f64>,
    /// Set when every raw weight is equal.
    pub degenerate: bool,
    /// 0.75-quantile of `scaled` per region, sorted by name.
    pub regions: Vec<(String, f64)>,
}

/// Scores from the rollout row of `cls`, excluding the CLS column.
/// `regions`, if given, labels each channel column in order.
pub fn scaled_attention_weight(
    rollout: &Tensor<f64>,
    cls: usize,
    auc: f64,
    regions: Option<&[Option<String>]>,
) -> Result<AttentionContribution, InterpretError> {
    if !(0.0..=1.0).contains(&auc) {
        return Err(InterpretError::InvalidAuc(auc));
    }
    let n = rollout.rows();
    if n < 2 || rollout.cols() != n {
        return Err(InterpretError::NotSquare { layer: 0 });
    }
    let raw: Vec<f64> = (0..n).filter(|&j| j != cls).map(|j| rollout.at(cls, j)).collect();
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = hi == lo;
    let normalized: Vec<f64> = raw.iter().map(|&v| if degenerate { 0.0 } else { (v - lo) / (hi - lo) }).collect();
    let scaled: Vec<f64> = normalized.iter().map(|v| v * auc).collect();
    let mut out_regions = Vec::new();
    if let Some(labels) = regions {
        if labels.len() != raw.len() {
            return Err(InterpretError::NotSquare { layer: 0 });
        }
        let mut names: Vec<&String> = labels.iter().flatten().collect();
        names.sort();
        names.dedup();
        for name in names {
            let members: Vec<f64> = labels
                .iter()
                .zip(&scaled)
                .filter(|(l, _)| l.as_ref() == Some(name))
                .map(|(_, &s)| s)
                .collect();
            out_regions.push((name.clone(), region_quantile(name, &members)?));
        }
    }
    Ok(AttentionContribution {
        raw,
        normalized,
        scaled,
        degenerate,
        regions: out_regions,
    })
}

/// 0.75-quantile of a region's channel scores.
pub fn region_quantile(region: &str, scores: &[f64]) -> Result<f64, InterpretError> {
    if scores.is_empty() {
        return Err(InterpretError::EmptyRegion(region.to_string()));
    }
    Ok(quantile(scores, 0.75))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_and_spearman() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert!(spearman(&[1.0, 1.0], &[1.0, 2.0]).is_nan());
    }

    #[test]
    fn quantile_convention() {
        assert!((quantile(&[0.4, 0.1, 0.3, 0.2], 0.75) - 0.325).abs() < 1e-12);
        assert_eq!(quantile(&[5.0], 0.75), 5.0);
        assert_eq!(region_quantile("r", &[]), Err(InterpretError::EmptyRegion("r".into())));
    }

    #[test]
    fn rollout_examples() {
        let eye = Tensor::<f64>::eye(3);
        assert_eq!(attention_rollout(std::slice::from_ref(&eye)).unwrap(), eye);
        let u = Tensor::<f64>::full(&[4, 4], 0.25);
        let r = attention_rollout(&[u.clone(), u.clone(), u]).unwrap();
        // three augmented uniform layers: (1 - 1/8) U + (1/8) I
        for i in 0..4 {
            for j in 0..4 {
                let want = 0.875 * 0.25 + if i == j { 0.125 } else { 0.0 };
                assert!((r.at(i, j) - want).abs() < 1e-12);
            }
        }
        let bad = Tensor::matrix(2, 2, vec![0.5, 0.6, 0.5, 0.5]);
        assert!(matches!(attention_rollout(&[bad]), Err(InterpretError::NotStochastic { row: 0, .. })));
        assert!(matches!(
            attention_rollout(&[Tensor::<f64>::eye(2), Tensor::<f64>::eye(3)]),
            Err(InterpretError::NotSquare { layer: 1 })
        ));
    }

    #[test]
    fn scaled_weights() {
        let u = Tensor::<f64>::full(&[3, 3], 1.0 / 3.0);
        let c = scaled_attention_weight(&u, 0, 0.8, None).unwrap();
        assert!(c.degenerate);
        assert_eq!(c.normalized, vec![0.0, 0.0]);
        let m = Tensor::matrix(3, 3, vec![0.2, 0.5, 0.3, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let c = scaled_attention_weight(&m, 0, 0.0, None).unwrap();
        assert_eq!(c.scaled, vec![0.0, 0.0]);
        let c = scaled_attention_weight(&m, 0, 0.5, Some(&[Some("a".into()), Some("b".into())])).unwrap();
        assert_eq!(c.normalized, vec![1.0, 0.0]);
        assert_eq!(c.regions, vec![("a".to_string(), 0.5), ("b".to_string(), 0.0)]);
    }
}
