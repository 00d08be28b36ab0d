use alloc::vec::Vec;

use crate::buddies::{cycle_pair, CyclePair};
use crate::error::Result;
use crate::geometry::Point2;

/// One evaluation of the tracker: where does `point` on frame `from` land on
/// frame `to`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackRequest {
    pub point: Point2,
    pub from: usize,
    pub to: usize,
}

impl TrackRequest {
    pub fn new(point: Point2, from: usize, to: usize) -> Self {
        Self { point, from, to }
    }
}

/// Read-only tracker `Pi(x, t)` evaluated in batches.
pub trait PointTracker {
    /// Answers are returned in request order, in working-resolution pixels.
    fn track(&self, requests: &[TrackRequest]) -> Result<Vec<Point2>>;

    fn track_one(&self, point: Point2, from: usize, to: usize) -> Result<Point2> {
        Ok(self.track(&[TrackRequest::new(point, from, to)])?[0])
    }
}

/// Runs each seed forward to its target frame and back again, keeping the
/// pairs whose cycle error is within `gamma_cc` pixels.
///
/// `seeds` holds `(frame_i, frame_j, x^i)`.
pub fn mine_cycle_pairs<T: PointTracker + ?Sized>(
    tracker: &T,
    seeds: &[(usize, usize, Point2)],
    gamma_cc: f64,
) -> Result<Vec<CyclePair>> {
    let fwd_req: Vec<_> = seeds.iter().map(|&(i, j, p)| TrackRequest::new(p, i, j)).collect();
    let fwd = tracker.track(&fwd_req)?;
    let back_req: Vec<_> = seeds.iter().zip(&fwd).map(|(&(i, j, _), &x)| TrackRequest::new(x, j, i)).collect();
    let back = tracker.track(&back_req)?;
    Ok(seeds
        .iter()
        .zip(fwd.iter().zip(&back))
        .filter_map(|(&(i, j, p), (&f, &b))| cycle_pair(i, j, p, f, b, gamma_cc))
        .collect())
}
