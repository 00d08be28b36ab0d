//! Point-tracking benchmark metrics.
//!
//! Position accuracy, occlusion accuracy and average Jaccard follow the
//! TAP-Vid definitions and are computed in a 256x256 metric space; the
//! BADJA metrics compare against `0.2 * sqrt(area)` and a fixed 3px radius at
//! native resolution.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::Point2;

pub const THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];
pub const METRIC_SIZE: f64 = 256.0;

/// Maps an original-resolution point into the 256x256 metric space.
pub fn to_metric_space(p: Point2, width: usize, height: usize) -> Point2 {
    p.scale(METRIC_SIZE / width as f64, METRIC_SIZE / height as f64)
}

fn check_lengths(n: usize, others: &[usize]) -> Result<()> {
    if others.iter().any(|&m| m != n) {
        return Err(Error::shape("metric inputs must be aligned per (query, frame)"));
    }
    Ok(())
}

/// Fraction of gt-visible points within each threshold and their mean.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct PositionAccuracy {
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

pub fn position_accuracy(pred: &[Point2], gt: &[Point2], gt_visible: &[bool], thresholds: &[f64]) -> Result<Option<PositionAccuracy>> {
    check_lengths(pred.len(), &[gt.len(), gt_visible.len()])?;
    let visible: Vec<f64> = (0..pred.len()).filter(|&k| gt_visible[k]).map(|k| pred[k].dist(gt[k])).collect();
    if visible.is_empty() || thresholds.is_empty() {
        return Ok(None);
    }
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&x| visible.iter().filter(|&&d| d < x).count() as f64 / visible.len() as f64)
        .collect();
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(Some(PositionAccuracy { per_threshold, average }))
}

pub fn occlusion_accuracy(pred_visible: &[bool], gt_visible: &[bool]) -> Result<Option<f64>> {
    check_lengths(pred_visible.len(), &[gt_visible.len()])?;
    if pred_visible.is_empty() {
        return Ok(None);
    }
    let hits = pred_visible.iter().zip(gt_visible).filter(|(a, b)| a == b).count();
    Ok(Some(hits as f64 / pred_visible.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct JaccardReport {
    pub per_threshold: Vec<f64>,
    pub average: f64,
}

/// Jaccard per threshold `TP / (TP + FP + FN)` and their mean.
///
/// TP: gt-visible, predicted visible and within `x`. FP: predicted visible but
/// gt-occluded or farther than `x`. FN: gt-visible but predicted occluded or
/// farther than `x`. A visible-but-far prediction counts as both FP and FN.
pub fn average_jaccard(
    pred: &[Point2],
    pred_visible: &[bool],
    gt: &[Point2],
    gt_visible: &[bool],
    thresholds: &[f64],
) -> Result<Option<JaccardReport>> {
    check_lengths(pred.len(), &[pred_visible.len(), gt.len(), gt_visible.len()])?;
    let mut per_threshold = Vec::with_capacity(thresholds.len());
    for &x in thresholds {
        let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
        for k in 0..pred.len() {
            let within = gt_visible[k] && pred[k].dist(gt[k]) < x;
            match (pred_visible[k], gt_visible[k], within) {
                (true, true, true) => tp += 1,
                (true, true, false) => {
                    fp += 1;
                    fneg += 1;
                }
                (true, false, _) => fp += 1,
                (false, true, _) => fneg += 1,
                (false, false, _) => {}
            }
        }
        let denom = tp + fp + fneg;
        if denom == 0 {
            return Ok(None);
        }
        per_threshold.push(tp as f64 / denom as f64);
    }
    if per_threshold.is_empty() {
        return Ok(None);
    }
    let average = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(Some(JaccardReport { per_threshold, average }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BadjaScores {
    pub delta_seg: Option<f64>,
    pub delta_3px: Option<f64>,
}

/// `delta_seg`: within `0.2 sqrt(A)`; `delta_3px`: within 3px. Only annotated,
/// visible keypoints count; a missing area skips the point for `delta_seg` only.
pub fn badja_metrics(pred: &[Point2], gt: &[Point2], gt_visible: &[bool], area: &[Option<f64>]) -> Result<BadjaScores> {
    check_lengths(pred.len(), &[gt.len(), gt_visible.len(), area.len()])?;
    let (mut seg_hit, mut seg_n, mut px_hit, mut px_n) = (0usize, 0usize, 0usize, 0usize);
    for k in (0..pred.len()).filter(|&k| gt_visible[k]) {
        let d = pred[k].dist(gt[k]);
        px_n += 1;
        px_hit += usize::from(d <= 3.0);
        if let Some(a) = area[k] {
            seg_n += 1;
            seg_hit += usize::from(d <= 0.2 * libm::sqrt(a));
        }
    }
    let frac = |h: usize, n: usize| (n > 0).then(|| h as f64 / n as f64);
    Ok(BadjaScores { delta_seg: frac(seg_hit, seg_n), delta_3px: frac(px_hit, px_n) })
}

/// Query frames for one track: every `stride`-th of the frames on which it is
/// visible, starting from the first visible one.
pub fn strided_query_frames(visible: &[bool], stride: usize) -> Vec<usize> {
    (0..visible.len()).filter(|&t| visible[t]).step_by(stride.max(1)).collect()
}

/// The first visible frame, used once per keypoint in BADJA mode.
pub fn first_visible_frame(visible: &[bool]) -> Option<usize> {
    visible.iter().position(|&v| v)
}

/// Mean over a video's trajectories of their occluded-frame fraction.
pub fn video_occlusion_rate(tracks_visible: &[Vec<bool>]) -> f64 {
    let rates: Vec<f64> = tracks_visible
        .iter()
        .filter(|v| !v.is_empty())
        .map(|v| v.iter().filter(|&&x| !x).count() as f64 / v.len() as f64)
        .collect();
    crate::stats::mean(&rates).unwrap_or(0.0)
}

/// Splits video indices into three near-equal buckets by ascending rate
/// (ties by index); bucket sizes differ by at most one.
pub fn occlusion_buckets(rates: &[f64]) -> [Vec<usize>; 3] {
    let mut order: Vec<usize> = (0..rates.len()).collect();
    order.sort_by(|&a, &b| rates[a].total_cmp(&rates[b]).then(a.cmp(&b)));
    let n = order.len();
    let mut out = [Vec::new(), Vec::new(), Vec::new()];
    for (k, bucket) in out.iter_mut().enumerate() {
        *bucket = order[k * n / 3..(k + 1) * n / 3].to_vec();
    }
    out
}

/// Aggregate TAP-Vid and BADJA numbers for one video or a set of videos.
#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub label: alloc::string::String,
    pub delta: Option<Vec<f64>>,
    pub delta_avg: Option<f64>,
    pub occlusion_accuracy: Option<f64>,
    pub average_jaccard: Option<f64>,
    pub delta_seg: Option<f64>,
    pub delta_3px: Option<f64>,
}

impl MetricReport {
    /// Unweighted mean of each metric over the reports that define it.
    pub fn mean_of(label: &str, reports: &[MetricReport]) -> MetricReport {
        fn avg(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
            let xs: Vec<f64> = v.flatten().collect();
            crate::stats::mean(&xs)
        }
        let deltas: Vec<&Vec<f64>> = reports.iter().filter_map(|r| r.delta.as_ref()).collect();
        let delta = deltas.first().map(|first| {
            let mut acc = vec![0.0; first.len()];
            for d in &deltas {
                for (a, v) in acc.iter_mut().zip(d.iter()) {
                    *a += v;
                }
            }
            acc.into_iter().map(|a| a / deltas.len() as f64).collect()
        });
        MetricReport {
            label: label.into(),
            delta,
            delta_avg: avg(reports.iter().map(|r| r.delta_avg)),
            occlusion_accuracy: avg(reports.iter().map(|r| r.occlusion_accuracy)),
            average_jaccard: avg(reports.iter().map(|r| r.average_jaccard)),
            delta_seg: avg(reports.iter().map(|r| r.delta_seg)),
            delta_3px: avg(reports.iter().map(|r| r.delta_3px)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(x: f64, y: f64) -> Point2 {
        Point2::new(x, y)
    }

    #[test]
    fn exact_predictions_score_one() {
        let g = [p(1.0, 1.0), p(5.0, 2.0)];
        let acc = position_accuracy(&g, &g, &[true, true], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(acc.average, 1.0);
        let aj = average_jaccard(&g, &[true, true], &g, &[true, true], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(aj.average, 1.0);
    }

    #[test]
    fn distance_three_counts_from_four_up() {
        let acc = position_accuracy(&[p(3.0, 0.0)], &[p(0.0, 0.0)], &[true], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(acc.per_threshold, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((acc.average - 0.6).abs() < 1e-15);
        let far = position_accuracy(&[p(17.0, 0.0)], &[p(0.0, 0.0)], &[true], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(far.average, 0.0);
    }

    #[test]
    fn no_visible_points_is_absent() {
        assert!(position_accuracy(&[p(0.0, 0.0)], &[p(0.0, 0.0)], &[false], &THRESHOLDS).unwrap().is_none());
    }

    #[test]
    fn occlusion_accuracy_counts() {
        assert_eq!(occlusion_accuracy(&[true, false], &[true, false]).unwrap(), Some(1.0));
        assert_eq!(occlusion_accuracy(&[true, true], &[true, false]).unwrap(), Some(0.5));
        let gt: Vec<bool> = (0..10).map(|k| k >= 3).collect();
        assert_eq!(occlusion_accuracy(&[true; 10], &gt).unwrap(), Some(0.7));
    }

    #[test]
    fn jaccard_cases() {
        let g = [p(0.0, 0.0), p(9.0, 9.0)];
        let none = average_jaccard(&g, &[false, false], &g, &[true, true], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(none.average, 0.0);
        let half = average_jaccard(&g, &[true, true], &g, &[true, false], &THRESHOLDS).unwrap().unwrap();
        assert_eq!(half.average, 0.5);
    }

    #[test]
    fn badja_thresholds() {
        let gt = [p(0.0, 0.0); 3];
        let pred = [p(4.0, 0.0), p(2.0, 0.0), p(0.0, 0.0)];
        let s = badja_metrics(&pred, &gt, &[true; 3], &[Some(10000.0); 3]).unwrap();
        assert_eq!(s.delta_seg, Some(1.0));
        assert!((s.delta_3px.unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let s = badja_metrics(&pred[..1], &gt[..1], &[true], &[None]).unwrap();
        assert_eq!((s.delta_seg, s.delta_3px), (None, Some(0.0)));
    }

    #[test]
    fn strided_queries() {
        assert_eq!(strided_query_frames(&[true; 10], 5), vec![0, 5]);
        let mut only3 = vec![false; 10];
        only3[3] = true;
        assert_eq!(strided_query_frames(&only3, 5), vec![3]);
        assert_eq!(first_visible_frame(&only3), Some(3));
    }

    #[test]
    fn occlusion_rates_and_buckets() {
        assert_eq!(video_occlusion_rate(&[vec![true; 4]]), 0.0);
        assert_eq!(video_occlusion_rate(&[vec![true, false], vec![false, true, true, false]]), 0.5);
        let rates: Vec<f64> = (0..9).map(|k| (8 - k) as f64 / 10.0).collect();
        let b = occlusion_buckets(&rates);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3]);
        assert_eq!(b[0], vec![8, 7, 6]);
    }
}
