//! Visibility from trajectory agreement.
//!
//! A tracked point is considered visible on frame `t` when the trajectory
//! re-launched from its estimate `x^t` agrees with the query's own trajectory
//! on a set of high-similarity anchor frames, and its feature still resembles
//! the query feature.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::stats::lower_median;
use crate::tracking::{PointTracker, TrackRequest};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VisibilityConfig {
    pub anchor_sim_min: f64,
    pub gamma_occ: f64,
    pub max_anchors: usize,
}

impl Default for VisibilityConfig {
    fn default() -> Self {
        Self { anchor_sim_min: 0.7, gamma_occ: 0.6, max_anchors: 32 }
    }
}

impl VisibilityConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = -1.0..=1.0;
        if !unit.contains(&self.anchor_sim_min) || !unit.contains(&self.gamma_occ) || self.max_anchors < 2 {
            return Err(Error::input("visibility thresholds must lie in [-1, 1] and max_anchors >= 2"));
        }
        Ok(())
    }
}

/// Trajectory of one query over all frames.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryEstimate {
    pub query_frame: usize,
    pub query: Point2,
    pub positions: Vec<Point2>,
    /// Cosine similarity between the tracked feature on each frame and the
    /// query feature.
    pub similarities: Vec<f64>,
    pub visibility: Vec<bool>,
}

impl TrajectoryEstimate {
    pub fn new(query_frame: usize, query: Point2, positions: Vec<Point2>, similarities: Vec<f64>) -> Result<Self> {
        if positions.len() != similarities.len() || query_frame >= positions.len() {
            return Err(Error::shape("trajectory positions and similarities must cover the same frames"));
        }
        let n = positions.len();
        Ok(Self { query_frame, query, positions, similarities, visibility: alloc::vec![true; n] })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Frames whose tracked feature has similarity at least `anchor_sim_min` to
/// the query, in ascending order.
///
/// With fewer than two qualifying frames, falls back to the query frame plus
/// the most similar other frame. More than `max_anchors` candidates are
/// thinned uniformly along their similarity ranking.
pub fn select_anchors(traj: &TrajectoryEstimate, cfg: &VisibilityConfig) -> Vec<usize> {
    let mut anchors: Vec<usize> = (0..traj.len()).filter(|&k| traj.similarities[k] >= cfg.anchor_sim_min).collect();
    if anchors.len() < 2 {
        let best = (0..traj.len())
            .filter(|&k| k != traj.query_frame)
            .fold(None::<usize>, |b, k| match b {
                Some(b) if traj.similarities[b] >= traj.similarities[k] => Some(b),
                _ => Some(k),
            });
        anchors = core::iter::once(traj.query_frame).chain(best).collect();
        anchors.sort_unstable();
        return anchors;
    }
    if anchors.len() > cfg.max_anchors {
        anchors.sort_by(|&a, &b| traj.similarities[b].total_cmp(&traj.similarities[a]).then(a.cmp(&b)));
        let n = anchors.len();
        let cap = cfg.max_anchors;
        anchors = (0..cap).map(|k| anchors[(k * (n - 1) + (cap - 1) / 2) / (cap - 1)]).collect();
        anchors.sort_unstable();
    }
    anchors
}

/// Largest per-anchor median re-tracking error,
/// `e_q = max_k median_{k_i != k} |Pi(x^k, k_i) - x^{k_i}|`.
pub fn agreement_threshold<T: PointTracker + ?Sized>(
    traj: &TrajectoryEstimate,
    anchors: &[usize],
    tracker: &T,
) -> Result<f64> {
    if anchors.len() < 2 {
        return Err(Error::precondition("agreement needs at least two anchors"));
    }
    let mut requests = Vec::with_capacity(anchors.len() * (anchors.len() - 1));
    for &k in anchors {
        for &ki in anchors.iter().filter(|&&ki| ki != k) {
            requests.push(TrackRequest::new(traj.positions[k], k, ki));
        }
    }
    let answers = tracker.track(&requests)?;
    let per = anchors.len() - 1;
    let mut e_q = 0.0f64;
    for (a, &k) in anchors.iter().enumerate() {
        let errs: Vec<f64> = anchors
            .iter()
            .filter(|&&ki| ki != k)
            .zip(&answers[a * per..(a + 1) * per])
            .map(|(&ki, &p)| p.dist(traj.positions[ki]))
            .collect();
        e_q = e_q.max(lower_median(&errs).unwrap_or(0.0));
    }
    Ok(e_q)
}

/// Applies the visibility rule to one frame given its per-anchor
/// disagreements `d_k`.
pub fn visible_by_rule(disagreements: &[f64], e_q: f64, similarity: f64, gamma_occ: f64) -> bool {
    lower_median(disagreements).is_some_and(|m| m <= e_q) && similarity >= gamma_occ
}

/// Flags for every frame: visible iff `median_k |Pi(x_q, k) - Pi(x^t, k)| <= e_q`
/// and the tracked similarity is at least `gamma_occ`.
pub fn predict_visibility<T: PointTracker + ?Sized>(
    traj: &TrajectoryEstimate,
    e_q: f64,
    anchors: &[usize],
    tracker: &T,
    cfg: &VisibilityConfig,
) -> Result<Vec<bool>> {
    let mut requests = Vec::with_capacity(traj.len() * anchors.len());
    for t in 0..traj.len() {
        for &k in anchors {
            requests.push(TrackRequest::new(traj.positions[t], t, k));
        }
    }
    let answers = tracker.track(&requests)?;
    Ok((0..traj.len())
        .map(|t| {
            let d: Vec<f64> = anchors
                .iter()
                .zip(&answers[t * anchors.len()..(t + 1) * anchors.len()])
                .map(|(&k, &p)| traj.positions[k].dist(p))
                .collect();
            visible_by_rule(&d, e_q, traj.similarities[t], cfg.gamma_occ)
        })
        .collect())
}

/// Anchor selection, agreement threshold and per-frame flags in one pass;
/// fills `traj.visibility` and returns `e_q`.
pub fn estimate_visibility<T: PointTracker + ?Sized>(
    traj: &mut TrajectoryEstimate,
    tracker: &T,
    cfg: &VisibilityConfig,
) -> Result<f64> {
    let anchors = select_anchors(traj, cfg);
    if anchors.len() < 2 {
        // single-frame trajectory
        traj.visibility = alloc::vec![true; traj.len()];
        return Ok(0.0);
    }
    let e_q = agreement_threshold(traj, &anchors, tracker)?;
    traj.visibility = predict_visibility(traj, e_q, &anchors, tracker, cfg)?;
    Ok(e_q)
}
