//! Threshold-free detection metrics.
//!
//! Label `true` marks an outlier. Scores are "higher is more anomalous".

use serde::{Deserialize, Serialize};

use crate::error::{AodError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Auroc,
    AuprIn,
    AuprOut,
    Rpro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositiveClass {
    /// Inliers are the positives and low scores rank first.
    In,
    Out,
}

fn class_counts(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(AodError::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(AodError::Numeric(format!("score at index {i}")));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(AodError::Contract("both classes must be present".into()));
    }
    Ok((pos, neg))
}

/// Indices sorted by score with ties grouped: `(start, end)` ranges into the order.
fn tie_groups(scores: &[f64], descending: bool) -> (Vec<usize>, Vec<(usize, usize)>) {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        let o = scores[a].total_cmp(&scores[b]);
        if descending {
            o.reverse()
        } else {
            o
        }
    });
    let mut groups = Vec::new();
    let mut start = 0;
    for i in 1..=order.len() {
        if i == order.len() || scores[order[i]] != scores[order[start]] {
            groups.push((start, i));
            start = i;
        }
    }
    (order, groups)
}

/// Area under the ROC curve via the Mann-Whitney statistic with midranks,
/// i.e. `P(s_pos > s_neg) + P(tie) / 2`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    let (order, groups) = tie_groups(scores, false);
    let mut rank_sum = 0.0;
    for (start, end) in groups {
        let midrank = (start + end + 1) as f64 / 2.0;
        let positives = order[start..end].iter().filter(|&&i| labels[i]).count();
        rank_sum += midrank * positives as f64;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Average precision over the step precision-recall curve, with tied scores
/// entering at a single threshold.
pub fn aupr(scores: &[f64], labels: &[bool], positive: PositiveClass) -> Result<f64> {
    class_counts(scores, labels)?;
    let (scores, labels): (Vec<f64>, Vec<bool>) = match positive {
        PositiveClass::Out => (scores.to_vec(), labels.to_vec()),
        PositiveClass::In => (scores.iter().map(|s| -s).collect(), labels.iter().map(|l| !l).collect()),
    };
    let total_pos = labels.iter().filter(|&&l| l).count() as f64;
    let (order, groups) = tie_groups(&scores, true);
    let (mut tp, mut seen, mut area) = (0.0, 0.0, 0.0);
    for (start, end) in groups {
        let group_pos = order[start..end].iter().filter(|&&i| labels[i]).count() as f64;
        tp += group_pos;
        seen += (end - start) as f64;
        area += (tp / seen) * (group_pos / total_pos);
    }
    Ok(area)
}

/// Linear-interpolation quantile of already sorted values, `q` in `[0, 1]`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// 4-connected components of a row-major mask, as lists of pixel offsets.
pub fn connected_regions(mask: &[bool], height: usize, width: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut regions = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut region = Vec::new();
        let mut stack = vec![start];
        seen[start] = true;
        while let Some(p) = stack.pop() {
            region.push(p);
            let (y, x) = (p / width, p % width);
            let mut visit = |q: usize| {
                if mask[q] && !seen[q] {
                    seen[q] = true;
                    stack.push(q);
                }
            };
            if y > 0 {
                visit(p - width);
            }
            if y + 1 < height {
                visit(p + width);
            }
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < width {
                visit(p + 1);
            }
        }
        region.sort_unstable();
        regions.push(region);
    }
    regions
}

fn check_maps<T>(maps: &[Vec<T>], masks: &[Vec<bool>], height: usize, width: usize) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(AodError::Contract(format!("{} maps for {} masks", maps.len(), masks.len())));
    }
    for (i, (m, t)) in maps.iter().zip(masks).enumerate() {
        if m.len() != height * width || t.len() != height * width {
            return Err(AodError::Contract(format!("image {i} does not match {height}x{width}")));
        }
    }
    Ok(())
}

/// Mean over all ground-truth regions of `|prediction ∩ region| / |region|`.
pub fn region_overlap(predictions: &[Vec<bool>], truths: &[Vec<bool>], height: usize, width: usize) -> Result<f64> {
    check_maps(predictions, truths, height, width)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (pred, truth) in predictions.iter().zip(truths) {
        for region in connected_regions(truth, height, width) {
            let hit = region.iter().filter(|&&p| pred[p]).count();
            total += hit as f64 / region.len() as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Err(AodError::Contract("ground truth has no positive region".into()));
    }
    Ok(total / count as f64)
}

/// Relative per-region overlap averaged over `n_thresholds` score quantiles
/// at levels `(i + 0.5) / n_thresholds`; a pixel is predicted anomalous when
/// its score is at least the threshold.
pub fn rpro(maps: &[Vec<f64>], masks: &[Vec<bool>], height: usize, width: usize, n_thresholds: usize) -> Result<f64> {
    check_maps(maps, masks, height, width)?;
    if n_thresholds == 0 {
        return Err(AodError::Contract("need at least one threshold".into()));
    }
    if !masks.iter().flatten().any(|&m| m) {
        return Err(AodError::Contract("ground truth has no positive region".into()));
    }
    let mut sorted: Vec<f64> = maps.iter().flatten().copied().collect();
    if sorted.iter().any(|v| !v.is_finite()) {
        return Err(AodError::Numeric("pixel score".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let regions: Vec<Vec<Vec<usize>>> = masks.iter().map(|m| connected_regions(m, height, width)).collect();
    let n_regions: usize = regions.iter().map(Vec::len).sum();
    let mut acc = 0.0;
    for i in 0..n_thresholds {
        let t = quantile_sorted(&sorted, (i as f64 + 0.5) / n_thresholds as f64);
        let mut overlap = 0.0;
        for (map, regs) in maps.iter().zip(&regions) {
            for region in regs {
                let hit = region.iter().filter(|&&p| map[p] >= t).count();
                overlap += hit as f64 / region.len() as f64;
            }
        }
        acc += overlap / n_regions as f64;
    }
    Ok(acc / n_thresholds as f64)
}

/// AUROC over every pixel of every image.
pub fn pixel_auroc(maps: &[Vec<f64>], masks: &[Vec<bool>]) -> Result<f64> {
    let scores: Vec<f64> = maps.iter().flatten().copied().collect();
    let labels: Vec<bool> = masks.iter().flatten().copied().collect();
    auroc(&scores, &labels)
}

/// One `metric,value,n_pos,n_neg` CSV row.
pub fn csv_row(metric: &str, value: f64, labels: &[bool]) -> String {
    let pos = labels.iter().filter(|&&l| l).count();
    format!("{metric},{value},{pos},{}", labels.len() - pos)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_tied_auroc() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1], &[true, true, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn aupr_of_constant_scores_is_positive_fraction() {
        let labels = [true, false, false, false];
        assert!((aupr(&[1.0; 4], &labels, PositiveClass::Out).unwrap() - 0.25).abs() < 1e-15);
        assert!((aupr(&[1.0; 4], &labels, PositiveClass::In).unwrap() - 0.75).abs() < 1e-15);
        assert_eq!(aupr(&[0.9, 0.1, 0.2, 0.3], &labels, PositiveClass::Out).unwrap(), 1.0);
    }

    #[test]
    fn quantile_interpolates_between_order_statistics() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.9) - 9.1).abs() < 1e-12);
    }

    #[test]
    fn regions_use_four_connectivity() {
        // Diagonal neighbours are separate regions.
        let m = [true, false, false, true];
        assert_eq!(connected_regions(&m, 2, 2).len(), 2);
        let m = [true, true, false, true];
        assert_eq!(connected_regions(&m, 2, 2).len(), 1);
    }
}
