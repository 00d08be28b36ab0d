//! Benchmark harness: ground-truth loading, query sampling and per-video
//! metric reports.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use vidtrack_core::metrics::{
    average_jaccard, badja_metrics, first_visible_frame, occlusion_accuracy, occlusion_buckets, position_accuracy,
    strided_query_frames, to_metric_space, video_occlusion_rate, MetricReport, THRESHOLDS,
};
use vidtrack_core::Point2;

use crate::error::{Error, Result};
use crate::media::TrajectoryRecord;

/// One annotated point over every frame, at original resolution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthTrack {
    pub positions: Vec<Point2>,
    pub visible: Vec<bool>,
    /// Foreground area per frame in pixels², BADJA only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthVideo {
    pub video_id: String,
    pub height: usize,
    pub width: usize,
    pub tracks: Vec<GroundTruthTrack>,
}

impl GroundTruthVideo {
    pub fn frames(&self) -> usize {
        self.tracks.first().map_or(0, |t| t.positions.len())
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.frames();
        for (k, tr) in self.tracks.iter().enumerate() {
            let area_ok = tr.area.as_ref().is_none_or(|a| a.len() == t);
            if tr.positions.len() != t || tr.visible.len() != t || !area_ok {
                return Err(Error::input(format!("ground-truth track {k} does not cover all {t} frames")));
            }
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::input("ground-truth video size must be positive"));
        }
        Ok(())
    }

    pub fn occlusion_rate(&self) -> f64 {
        let v: Vec<Vec<bool>> = self.tracks.iter().map(|t| t.visible.clone()).collect();
        video_occlusion_rate(&v)
    }
}

/// TAP-Vid style record: `points[track][frame] = [x, y]`,
/// `occluded[track][frame]`.
#[derive(Serialize, Deserialize)]
struct TapVidRecord {
    video_id: String,
    height: usize,
    width: usize,
    points: Vec<Vec<[f64; 2]>>,
    occluded: Vec<Vec<bool>>,
}

/// BADJA style record: per keypoint a list of optional positions, and one
/// optional segmentation area per frame.
#[derive(Deserialize)]
struct BadjaRecord {
    video_id: String,
    height: usize,
    width: usize,
    keypoints: Vec<Vec<Option<[f64; 2]>>>,
    areas: Vec<Option<f64>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Decode { path: path.to_path_buf(), msg: e.to_string() })
}

pub fn load_tapvid(path: &Path) -> Result<GroundTruthVideo> {
    let r: TapVidRecord = read_json(path)?;
    if r.points.len() != r.occluded.len() {
        return Err(Error::input("points and occluded disagree on the track count"));
    }
    let tracks = r
        .points
        .into_iter()
        .zip(r.occluded)
        .map(|(p, o)| GroundTruthTrack {
            positions: p.into_iter().map(|[x, y]| Point2::new(x, y)).collect(),
            visible: o.into_iter().map(|o| !o).collect(),
            area: None,
        })
        .collect();
    let gt = GroundTruthVideo { video_id: r.video_id, height: r.height, width: r.width, tracks };
    gt.validate()?;
    Ok(gt)
}

pub fn write_tapvid(gt: &GroundTruthVideo, path: &Path) -> Result<()> {
    gt.validate()?;
    let r = TapVidRecord {
        video_id: gt.video_id.clone(),
        height: gt.height,
        width: gt.width,
        points: gt.tracks.iter().map(|t| t.positions.iter().map(|p| [p.x, p.y]).collect()).collect(),
        occluded: gt.tracks.iter().map(|t| t.visible.iter().map(|v| !v).collect()).collect(),
    };
    std::fs::write(path, serde_json::to_string(&r)?).map_err(|e| Error::io(path, e))
}

pub fn load_badja(path: &Path) -> Result<GroundTruthVideo> {
    let r: BadjaRecord = read_json(path)?;
    let tracks = r
        .keypoints
        .into_iter()
        .map(|k| GroundTruthTrack {
            visible: k.iter().map(Option::is_some).collect(),
            positions: k.iter().map(|p| p.map_or(Point2::default(), |[x, y]| Point2::new(x, y))).collect(),
            area: Some(r.areas.clone()),
        })
        .collect();
    let gt = GroundTruthVideo { video_id: r.video_id, height: r.height, width: r.width, tracks };
    gt.validate()?;
    Ok(gt)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryProtocol {
    /// Every `n`-th visible frame of each track.
    Strided(usize),
    /// Once per track at its first visible frame.
    FirstVisible,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalQuery {
    pub track: usize,
    pub frame: usize,
    /// Original resolution.
    pub point: Point2,
}

pub fn sample_queries(gt: &GroundTruthVideo, protocol: QueryProtocol) -> Vec<EvalQuery> {
    let mut out = Vec::new();
    for (k, tr) in gt.tracks.iter().enumerate() {
        let frames = match protocol {
            QueryProtocol::Strided(s) => strided_query_frames(&tr.visible, s),
            QueryProtocol::FirstVisible => first_visible_frame(&tr.visible).into_iter().collect(),
        };
        if frames.is_empty() {
            log::warn!("{}: track {k} is never visible; skipped", gt.video_id);
        }
        out.extend(frames.into_iter().map(|f| EvalQuery { track: k, frame: f, point: tr.positions[f] }));
    }
    out
}

/// Scores predictions whose `query_id` indexes `queries`. Positions are
/// compared in the 256x256 metric space; BADJA scores, when areas exist, at
/// native resolution.
pub fn evaluate_video(gt: &GroundTruthVideo, queries: &[EvalQuery], records: &[TrajectoryRecord]) -> Result<MetricReport> {
    gt.validate()?;
    let t = gt.frames();
    let mut by_query: BTreeMap<u32, Vec<&TrajectoryRecord>> = BTreeMap::new();
    for r in records {
        by_query.entry(r.query_id).or_default().push(r);
    }
    let (mut pred, mut pred_vis, mut gt_pos, mut gt_vis, mut area) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let (mut pred_native, mut gt_native) = (Vec::new(), Vec::new());
    let mut has_area = false;
    for (q, query) in queries.iter().enumerate() {
        let mut rows = by_query.remove(&(q as u32)).ok_or_else(|| Error::input(format!("no predictions for query {q}")))?;
        rows.sort_by_key(|r| r.frame);
        if rows.len() != t || rows.iter().enumerate().any(|(k, r)| r.frame as usize != k) {
            return Err(Error::input(format!("query {q} predictions must cover frames 0..{t} once each")));
        }
        let tr = &gt.tracks[query.track];
        for (k, r) in rows.iter().enumerate() {
            let p = Point2::new(r.x, r.y);
            pred_native.push(p);
            gt_native.push(tr.positions[k]);
            pred.push(to_metric_space(p, gt.width, gt.height));
            gt_pos.push(to_metric_space(tr.positions[k], gt.width, gt.height));
            pred_vis.push(r.visible);
            gt_vis.push(tr.visible[k]);
            let a = tr.area.as_ref().and_then(|a| a[k]);
            has_area |= tr.area.is_some();
            area.push(a);
        }
    }
    if !by_query.is_empty() {
        log::warn!("{}: {} prediction queries have no matching ground truth", gt.video_id, by_query.len());
    }
    let acc = position_accuracy(&pred, &gt_pos, &gt_vis, &THRESHOLDS)?;
    let aj = average_jaccard(&pred, &pred_vis, &gt_pos, &gt_vis, &THRESHOLDS)?;
    let badja = if has_area { Some(badja_metrics(&pred_native, &gt_native, &gt_vis, &area)?) } else { None };
    Ok(MetricReport {
        label: gt.video_id.clone(),
        delta: acc.as_ref().map(|a| a.per_threshold.clone()),
        delta_avg: acc.map(|a| a.average),
        occlusion_accuracy: occlusion_accuracy(&pred_vis, &gt_vis)?,
        average_jaccard: aj.map(|a| a.average),
        delta_seg: badja.and_then(|b| b.delta_seg),
        delta_3px: badja.and_then(|b| b.delta_3px),
    })
}

pub const BUCKET_LABELS: [&str; 3] = ["low occlusion", "medium occlusion", "high occlusion"];

/// Per-bucket mean reports for videos grouped by ground-truth occlusion rate.
pub fn group_by_occlusion(videos: &[GroundTruthVideo], reports: &[MetricReport]) -> Result<Vec<MetricReport>> {
    if videos.len() != reports.len() {
        return Err(Error::input("one report per video is required"));
    }
    let rates: Vec<f64> = videos.iter().map(GroundTruthVideo::occlusion_rate).collect();
    Ok(occlusion_buckets(&rates)
        .iter()
        .zip(BUCKET_LABELS)
        .map(|(ids, label)| {
            let sel: Vec<MetricReport> = ids.iter().map(|&i| reports[i].clone()).collect();
            MetricReport::mean_of(label, &sel)
        })
        .collect())
}

/// Plain-text rendering, metrics scaled by 100.
pub fn format_report(r: &MetricReport) -> String {
    let pct = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
    let mut s = format!("{}:", r.label);
    if let Some(d) = &r.delta {
        for (x, v) in THRESHOLDS.iter().zip(d) {
            s.push_str(&format!(" d{x}={:.1}", 100.0 * v));
        }
    }
    s.push_str(&format!(" d_avg={} OA={} AJ={}", pct(r.delta_avg), pct(r.occlusion_accuracy), pct(r.average_jaccard)));
    if r.delta_seg.is_some() || r.delta_3px.is_some() {
        s.push_str(&format!(" d_seg={} d_3px={}", pct(r.delta_seg), pct(r.delta_3px)));
    }
    s
}
