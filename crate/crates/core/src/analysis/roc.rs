use super::{AnalysisError, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(AnalysisError::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(AnalysisError::NonFinite);
    }
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(AnalysisError::SingleClass);
    }
    Ok((pos, neg))
}

/// Tie-corrected Mann-Whitney AUC: `(concordant + ties / 2) / (n_pos * n_neg)`.
///
/// Pair counts are accumulated as integers over runs of equal scores, so the
/// result is bit-identical to [`roc_auc_brute_force`].
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the concordant count plus the tie count
    let mut doubled: u64 = 0;
    let mut neg_below: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        doubled += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}

/// O(n²) pair enumeration, the reference for [`roc_auc`].
pub fn roc_auc_brute_force(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut doubled: u64 = 0;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            if si > sj {
                doubled += 2;
            } else if si == sj {
                doubled += 1;
            }
        }
    }
    Ok(doubled as f64 / (2 * pos * neg) as f64)
}
