use rand::Rng;

use crate::data::seeded_rng;
use crate::error::{Error, Result};
use crate::numerics::bce_loss;

/// Rank-based AUC with tied scores sharing their average rank.
pub fn auc(labels: &[u8], scores: &[f64]) -> Result<f64> {
    if labels.len() != scores.len() {
        return Err(Error::Dimension(format!(
            "{} labels for {} scores",
            labels.len(),
            scores.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both positive and negative labels".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j share their mean.
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        pos_rank_sum += avg * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean binary cross-entropy; the same routine as training.
pub fn log_loss(labels: &[u8], scores: &[f64]) -> Result<f64> {
    let y: Vec<f64> = labels.iter().map(|&l| f64::from(l)).collect();
    bce_loss(scores, &y)
}

/// `100 · (a − b) / b`.
pub fn rel_impr(auc_a: f64, auc_b: f64) -> Result<f64> {
    if auc_b == 0.0 {
        return Err(Error::Domain("relative improvement over a zero baseline".into()));
    }
    Ok(100.0 * (auc_a - auc_b) / auc_b)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BootstrapResult {
    /// AUC(a) − AUC(b) on the full set.
    pub diff: f64,
    /// Share of resamples where `a` did not beat `b`.
    pub p_value: f64,
    pub resamples: usize,
}

/// Paired bootstrap over test samples. Resamples that contain a single class
/// are redrawn.
pub fn paired_bootstrap(
    labels: &[u8],
    scores_a: &[f64],
    scores_b: &[f64],
    resamples: usize,
    seed: u64,
) -> Result<BootstrapResult> {
    if scores_a.len() != labels.len() || scores_b.len() != labels.len() {
        return Err(Error::Dimension("paired bootstrap needs equal lengths".into()));
    }
    let diff = auc(labels, scores_a)? - auc(labels, scores_b)?;
    let n = labels.len();
    let mut rng = seeded_rng(seed);
    let mut not_better = 0usize;
    let (mut l, mut a, mut b) = (vec![0u8; n], vec![0.0; n], vec![0.0; n]);
    let mut done = 0;
    while done < resamples {
        for i in 0..n {
            let k = rng.random_range(0..n);
            l[i] = labels[k];
            a[i] = scores_a[k];
            b[i] = scores_b[k];
        }
        let (Ok(x), Ok(y)) = (auc(&l, &a), auc(&l, &b)) else {
            continue;
        };
        if x - y <= 0.0 {
            not_better += 1;
        }
        done += 1;
    }
    Ok(BootstrapResult {
        diff,
        p_value: not_better as f64 / resamples.max(1) as f64,
        resamples,
    })
}
