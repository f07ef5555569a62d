//! Rank n@tIoU=m and mean IoU.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::segment::MomentSegment;

pub fn temporal_iou(a: &MomentSegment, b: &MomentSegment) -> f64 {
    a.iou(b)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// Count a hit only when tIoU is strictly larger than the threshold.
    pub strict: bool,
    /// Number of ranked predictions kept per query.
    pub top_k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { strict: true, top_k: 5 }
    }
}

fn is_hit(iou: f64, m: f64, strict: bool) -> bool {
    if strict {
        iou > m
    } else {
        iou >= m
    }
}

fn check_counts(predictions: &[Vec<MomentSegment>], targets: &[MomentSegment]) -> Result<()> {
    if predictions.len() != targets.len() {
        return Err(dim_err(format!(
            "{} prediction lists for {} queries",
            predictions.len(),
            targets.len()
        )));
    }
    if let Some(i) = predictions.iter().position(|p| p.is_empty()) {
        log::warn!("query {i} has no predictions; counted as a miss");
    }
    Ok(())
}

/// Percentage of queries whose top `n` predictions contain one with tIoU
/// above `m`.
pub fn rank_n_at_iou(
    predictions: &[Vec<MomentSegment>],
    targets: &[MomentSegment],
    n: usize,
    m: f64,
    strict: bool,
) -> Result<f64> {
    check_counts(predictions, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(preds, target)| preds.iter().take(n).any(|p| is_hit(temporal_iou(p, target), m, strict)))
        .count();
    Ok(100.0 * hits as f64 / targets.len() as f64)
}

/// Mean tIoU of the rank-1 prediction, as a percentage.
pub fn mean_iou(predictions: &[Vec<MomentSegment>], targets: &[MomentSegment]) -> Result<f64> {
    check_counts(predictions, targets)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(preds, target)| preds.first().map_or(0.0, |p| temporal_iou(p, target)))
        .sum();
    Ok(100.0 * total / targets.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rank1_iou05: f64,
    pub rank1_iou07: f64,
    pub rank5_iou05: f64,
    pub rank5_iou07: f64,
    pub miou: f64,
}

impl MetricReport {
    pub const NAMES: [&'static str; 5] = ["rank1_iou05", "rank1_iou07", "rank5_iou05", "rank5_iou07", "miou"];

    pub fn values(&self) -> [f64; 5] {
        [
            self.rank1_iou05,
            self.rank1_iou07,
            self.rank5_iou05,
            self.rank5_iou07,
            self.miou,
        ]
    }

    pub fn from_values(v: [f64; 5]) -> Self {
        Self {
            rank1_iou05: v[0],
            rank1_iou07: v[1],
            rank5_iou05: v[2],
            rank5_iou07: v[3],
            miou: v[4],
        }
    }

    /// Element-wise mean of several reports.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        let mut acc = [0.0; 5];
        for r in reports {
            acc.iter_mut().zip(r.values()).for_each(|(a, v)| *a += v);
        }
        let n = reports.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }
}

pub fn evaluate(predictions: &[Vec<MomentSegment>], targets: &[MomentSegment], strict: bool) -> Result<MetricReport> {
    Ok(MetricReport {
        rank1_iou05: rank_n_at_iou(predictions, targets, 1, 0.5, strict)?,
        rank1_iou07: rank_n_at_iou(predictions, targets, 1, 0.7, strict)?,
        rank5_iou05: rank_n_at_iou(predictions, targets, 5, 0.5, strict)?,
        rank5_iou07: rank_n_at_iou(predictions, targets, 5, 0.7, strict)?,
        miou: mean_iou(predictions, targets)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(s: f64, e: f64) -> MomentSegment {
        MomentSegment::new(s, e).unwrap()
    }

    #[test]
    fn iou_examples() {
        assert!((temporal_iou(&seg(2.0, 6.0), &seg(4.0, 8.0)) - 2.0 / 6.0).abs() < 1e-15);
        assert_eq!(temporal_iou(&seg(1.0, 3.0), &seg(1.0, 3.0)), 1.0);
        assert_eq!(temporal_iou(&seg(1.0, 3.0), &seg(3.0, 5.0)), 0.0);
    }

    #[test]
    fn strict_threshold_excludes_equality() {
        // Targets [0,10); top-1 predictions with IoU 0.6, 0.4, 0.8, 0.5.
        let target = seg(0.0, 10.0);
        let preds = vec![
            vec![seg(0.0, 6.0)],
            vec![seg(0.0, 4.0)],
            vec![seg(0.0, 8.0)],
            vec![seg(0.0, 5.0)],
        ];
        let targets = vec![target; 4];
        assert_eq!(rank_n_at_iou(&preds, &targets, 1, 0.5, true).unwrap(), 50.0);
        assert_eq!(rank_n_at_iou(&preds, &targets, 1, 0.5, false).unwrap(), 75.0);
    }

    #[test]
    fn perfect_third_prediction() {
        let target = seg(2.0, 4.0);
        let preds = vec![vec![seg(10.0, 11.0), seg(12.0, 13.0), target, seg(0.0, 1.0)]; 3];
        let targets = vec![target; 3];
        assert_eq!(rank_n_at_iou(&preds, &targets, 5, 0.7, true).unwrap(), 100.0);
        assert_eq!(rank_n_at_iou(&preds, &targets, 1, 0.7, true).unwrap(), 0.0);
    }

    #[test]
    fn miou_extremes_and_empty_lists() {
        let targets = vec![seg(0.0, 2.0), seg(3.0, 5.0)];
        assert_eq!(
            mean_iou(&[vec![targets[0]], vec![targets[1]]], &targets).unwrap(),
            100.0
        );
        assert_eq!(
            mean_iou(&[vec![seg(5.0, 6.0)], vec![seg(0.0, 1.0)]], &targets).unwrap(),
            0.0
        );
        assert_eq!(mean_iou(&[vec![targets[0]], vec![]], &targets).unwrap(), 50.0);
        assert_eq!(rank_n_at_iou(&[vec![], vec![]], &targets, 1, 0.5, true).unwrap(), 0.0);
        assert!(mean_iou(&[vec![targets[0]]], &targets).is_err());
    }

    #[test]
    fn ground_truth_predictions_score_full_marks() {
        let targets = vec![seg(0.0, 2.0), seg(3.0, 5.0), seg(1.0, 9.0)];
        let preds: Vec<Vec<MomentSegment>> = targets.iter().map(|t| vec![*t]).collect();
        let r = evaluate(&preds, &targets, true).unwrap();
        assert_eq!(r.values(), [100.0; 5]);
    }
}
