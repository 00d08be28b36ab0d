//! Trajectories with visibility flags for a set of queries.

use vidtrack_core::visibility::{estimate_visibility, TrajectoryEstimate, VisibilityConfig};
use vidtrack_core::Point2;

use crate::error::Result;
use crate::media::{FrameSequence, TrajectoryRecord};
use crate::tracker::Tracker;

/// A query at working resolution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Query {
    pub frame: usize,
    pub point: Point2,
}

/// Tracks every query over all frames; with `visibility` set the flags come
/// from trajectory agreement, otherwise every frame is marked visible.
pub fn track_queries(tracker: &Tracker<'_>, queries: &[Query], visibility: Option<&VisibilityConfig>) -> Result<Vec<TrajectoryEstimate>> {
    if let Some(cfg) = visibility {
        cfg.validate()?;
    }
    let mut out = Vec::with_capacity(queries.len());
    for q in queries {
        let mut traj = tracker.trajectory(q.frame, q.point)?;
        if let Some(cfg) = visibility {
            estimate_visibility(&mut traj, tracker, cfg)?;
        }
        out.push(traj);
    }
    Ok(out)
}

/// Flattens trajectories into records at original resolution.
pub fn to_records(seq: &FrameSequence, trajectories: &[TrajectoryEstimate]) -> Vec<TrajectoryRecord> {
    let mut out = Vec::with_capacity(trajectories.iter().map(TrajectoryEstimate::len).sum());
    for (q, traj) in trajectories.iter().enumerate() {
        for t in 0..traj.len() {
            let p = seq.to_original(traj.positions[t]);
            out.push(TrajectoryRecord {
                query_id: q as u32,
                query_frame: traj.query_frame as u32,
                frame: t as u32,
                x: p.x,
                y: p.y,
                visible: traj.visibility[t],
                similarity: traj.similarities[t],
            });
        }
    }
    out
}
