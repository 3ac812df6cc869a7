//! Ensemble-wise and channel-wise objectives.

use serde::{Deserialize, Serialize};

use super::sampling::PretrainExample;
use super::PretrainError;
use crate::data::{ElectrodeLayout, EmbeddingStore};
use crate::engine::ops::bce_with_logit;
use crate::engine::{Graph, Real, Rng, Tensor, Var};
use crate::model::{ForwardOptions, PopT};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PretrainLossReport {
    pub l_n: f64,
    pub l_c: f64,
    /// Sum of the active terms.
    pub l: f64,
    pub acc_cls: f64,
    pub acc_tok: f64,
}

impl PretrainLossReport {
    /// Unweighted mean over examples.
    pub fn mean(reports: &[PretrainLossReport]) -> PretrainLossReport {
        let n = reports.len().max(1) as f64;
        let mut m = PretrainLossReport::default();
        for r in reports {
            m.l_n += r.l_n / n;
            m.l_c += r.l_c / n;
            m.l += r.l / n;
            m.acc_cls += r.acc_cls / n;
            m.acc_tok += r.acc_tok / n;
        }
        m
    }
}

/// Losses of one example: `L_N = BCE(cls)`, `L_C` the token-mean BCE,
/// `L = L_N + L_C`.
pub fn pretrain_losses(cls_logit: f64, token_logits: &[f64], example: &PretrainExample) -> PretrainLossReport {
    assert_eq!(token_logits.len(), example.num_tokens(), "one logit per token");
    let y = example.y_cls as f64;
    let l_n = bce_with_logit(cls_logit, y);
    let n = token_logits.len().max(1) as f64;
    let mut l_c = 0.0;
    let mut hits = 0usize;
    for (&z, &t) in token_logits.iter().zip(&example.y_tokens) {
        l_c += bce_with_logit(z, t as f64);
        hits += usize::from((z > 0.0) == (t == 1));
    }
    l_c /= n;
    PretrainLossReport {
        l_n,
        l_c,
        l: l_n + l_c,
        acc_cls: f64::from(u8::from((cls_logit > 0.0) == (example.y_cls == 1))),
        acc_tok: hits as f64 / n,
    }
}

/// Mean absolute error over the rows flagged in `mask`; 0 if none are.
pub fn reconstruction_loss_l1<R: Real>(reconstructed: &Tensor<R>, originals: &Tensor<R>, mask: &[bool]) -> f64 {
    assert_eq!(reconstructed.shape(), originals.shape(), "shape mismatch");
    assert_eq!(mask.len(), reconstructed.rows(), "one mask entry per row");
    let mut sum = 0.0;
    let mut count = 0usize;
    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        for (a, b) in reconstructed.row(r).iter().zip(originals.row(r)) {
            sum += (a.to_f64() - b.to_f64()).abs();
        }
        count += reconstructed.cols();
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// Which terms are optimised.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossFlags {
    pub ensemble: bool,
    pub channel: bool,
    /// Replace both terms with L1 reconstruction of swapped tokens.
    pub reconstruction_only: bool,
}

impl Default for LossFlags {
    fn default() -> Self {
        LossFlags {
            ensemble: true,
            channel: true,
            reconstruction_only: false,
        }
    }
}

/// Graph loss of a batch plus batch-mean diagnostics.
pub struct BatchObjective {
    pub loss: Var,
    pub report: PretrainLossReport,
    /// L1 reconstruction value when that objective is active.
    pub reconstruction: Option<f64>,
}

/// Builds the training loss of `examples`: `L_N` is averaged over examples,
/// `L_C` over tokens within an example and then over examples.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_objective<R: Real>(
    model: &PopT<R>,
    g: &mut Graph<R>,
    store: &EmbeddingStore,
    layout: &ElectrodeLayout,
    examples: &[PretrainExample],
    flags: LossFlags,
    opts: ForwardOptions,
    rng: &mut Rng,
) -> Result<BatchObjective, PretrainError> {
    if !flags.reconstruction_only && !flags.ensemble && !flags.channel {
        return Err(PretrainError::InvalidConfig("every loss term disabled".into()));
    }
    let batch = examples
        .iter()
        .map(|ex| model.tokens(store, layout, &ex.token_specs()))
        .collect::<Result<Vec<_>, _>>()?;
    let enc = model.encode(g, &batch, opts, rng)?;
    let b = examples.len();
    let inv_b = R::from_f64(1.0 / b as f64);

    let cls = model.cls_logits(g, &enc, model.cls_head);
    let tok = model.token_logits(g, &enc);
    let cls_vals: Vec<f64> = g.value(cls).data().iter().map(|x| x.to_f64()).collect();
    let tok_vals: Vec<f64> = g.value(tok).data().iter().map(|x| x.to_f64()).collect();
    let mut reports = Vec::with_capacity(b);
    let mut off = 0;
    for (i, ex) in examples.iter().enumerate() {
        let n = ex.num_tokens();
        reports.push(pretrain_losses(cls_vals[i], &tok_vals[off..off + n], ex));
        off += n;
    }
    let mut report = PretrainLossReport::mean(&reports);

    if flags.reconstruction_only {
        let recon = model.reconstructions(g, &enc);
        let mut rows = Vec::new();
        let mut target = Vec::new();
        let mut off = 0;
        for ex in examples {
            for (i, (channel, time_ms, _)) in ex.slots().enumerate() {
                if ex.replacements[i].is_some() {
                    rows.push(off + i);
                    let w = store.window_at(time_ms).expect("example time is a window");
                    target.extend(store.embedding(channel, w).iter().map(|&x| R::from_f64(x as f64)));
                }
            }
            off += ex.num_tokens();
        }
        if rows.is_empty() {
            return Err(PretrainError::InvalidConfig("reconstruction batch has no swapped tokens".into()));
        }
        let target = Tensor::matrix(rows.len(), store.d_emb(), target);
        let loss = g.l1_rows(recon, rows, target);
        let value = g.value(loss).item().to_f64();
        report.l = value;
        return Ok(BatchObjective {
            loss,
            report,
            reconstruction: Some(value),
        });
    }

    let mut terms = Vec::new();
    if flags.ensemble {
        let targets = examples.iter().map(|e| R::from_f64(e.y_cls as f64)).collect();
        terms.push(g.bce_with_logits(cls, targets, vec![inv_b; b]));
    }
    if flags.channel {
        let mut targets = Vec::with_capacity(off);
        let mut weights = Vec::with_capacity(off);
        for ex in examples {
            let w = R::from_f64(1.0 / (b * ex.num_tokens()) as f64);
            targets.extend(ex.y_tokens.iter().map(|&y| R::from_f64(y as f64)));
            weights.extend(std::iter::repeat(w).take(ex.num_tokens()));
        }
        terms.push(g.bce_with_logits(tok, targets, weights));
    }
    let loss = if terms.len() == 2 { g.add(terms[0], terms[1]) } else { terms[0] };
    report.l = g.value(loss).item().to_f64();
    Ok(BatchObjective {
        loss,
        report,
        reconstruction: None,
    })
}
