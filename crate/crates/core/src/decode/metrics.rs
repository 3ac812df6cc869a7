//! Ranking and thresholded classification metrics.

use super::DecodeError;

fn class_counts(labels: &[u8]) -> Result<(u64, u64), DecodeError> {
    let pos = labels.iter().filter(|&&y| y == 1).count() as u64;
    let neg = labels.len() as u64 - pos;
    if labels.iter().any(|&y| y > 1) {
        return Err(DecodeError::NonBinaryLabels);
    }
    if pos == 0 || neg == 0 {
        return Err(DecodeError::SingleClass);
    }
    Ok((pos, neg))
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
///
/// The pair count is accumulated as an integer number of half-pairs, so the
/// result equals an exhaustive pairwise count exactly.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64, DecodeError> {
    assert_eq!(scores.len(), labels.len(), "one score per label");
    let (pos, neg) = class_counts(labels)?;
    if scores.iter().any(|s| s.is_nan()) {
        return Err(DecodeError::NonFiniteScore);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut half_pairs: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] == 1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        half_pairs += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    Ok(half_pairs as f64 / (2 * pos * neg) as f64)
}

/// Mean of the per-class recalls.
pub fn balanced_accuracy(preds: &[u8], labels: &[u8]) -> Result<f64, DecodeError> {
    assert_eq!(preds.len(), labels.len(), "one prediction per label");
    let (pos, neg) = class_counts(labels)?;
    let tp = preds.iter().zip(labels).filter(|(&p, &y)| p == 1 && y == 1).count() as f64;
    let tn = preds.iter().zip(labels).filter(|(&p, &y)| p == 0 && y == 0).count() as f64;
    Ok(0.5 * (tp / pos as f64 + tn / neg as f64))
}

/// Step of the first log entry whose metric is within `tolerance` of the
/// final entry's.
pub fn steps_to_convergence(log: &[(u64, f64)], tolerance: f64) -> u64 {
    let Some(&(_, last)) = log.last() else {
        return 0;
    };
    log.iter().find(|(_, v)| (v - last).abs() <= tolerance).map_or(0, |&(s, _)| s)
}

/// Mean and standard error (sample standard deviation over `sqrt(n)`).
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
