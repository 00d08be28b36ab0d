//! Short-term supervision from chained optical flow.
//!
//! Consecutive-frame flows are chained into tracklets that stop as soon as a
//! step fails the forward/backward cycle check; every pair of positions on a
//! tracklet is then verified against the direct flow between its two frames
//! when that gap is small enough to trust.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::geometry::Point2;
use crate::raster::FlowField;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChainConfig {
    /// Short-range cycle threshold in pixels.
    pub gamma_of: f64,
    /// Drift threshold against the direct flow, in pixels.
    pub gamma_of_lng: f64,
    /// Largest frame gap verified with a direct flow.
    pub k_max: usize,
    /// Spacing in pixels of the seed lattice.
    pub seed_stride: usize,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self { gamma_of: 1.5, gamma_of_lng: 2.0, k_max: 12, seed_stride: 4 }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma_of > 0.0 && self.gamma_of_lng > 0.0) || self.k_max == 0 || self.seed_stride == 0 {
            return Err(Error::input("flow chaining thresholds must be positive"));
        }
        Ok(())
    }
}

/// Positions of one chained point on consecutive frames `start, start+1, ...`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub start: usize,
    pub points: Vec<Point2>,
}

impl Tracklet {
    /// Last frame index covered (inclusive).
    pub fn end(&self) -> usize {
        self.start + self.points.len() - 1
    }

    pub fn covers(&self, frame: usize) -> bool {
        frame >= self.start && frame <= self.end()
    }

    pub fn at(&self, frame: usize) -> Point2 {
        self.points[frame - self.start]
    }
}

/// One supervised correspondence `x^source <-> x^target`, `source < target`.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowPair {
    pub source: u32,
    pub target: u32,
    pub from: [f32; 2],
    pub to: [f32; 2],
    pub foreground: bool,
}

impl FlowPair {
    pub fn new(source: usize, target: usize, from: Point2, to: Point2) -> Self {
        Self {
            source: source as u32,
            target: target as u32,
            from: [from.x as f32, from.y as f32],
            to: [to.x as f32, to.y as f32],
            foreground: false,
        }
    }

    pub fn from_point(&self) -> Point2 {
        Point2::new(self.from[0] as f64, self.from[1] as f64)
    }

    pub fn to_point(&self) -> Point2 {
        Point2::new(self.to[0] as f64, self.to[1] as f64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowCorrespondenceSet {
    pub pairs: Vec<FlowPair>,
}

impl FlowCorrespondenceSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Provider of direct flow fields `f_{source -> target}` for arbitrary pairs.
pub trait FlowSource {
    fn flow(&mut self, source: usize, target: usize) -> Result<Arc<FlowField>>;
}

/// Buckets live tracklet heads on a lattice so coverage queries stay local.
struct Coverage {
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<Point2>>,
}

impl Coverage {
    fn new(height: usize, width: usize, cell: f64) -> Self {
        let cols = (width as f64 / cell) as usize + 1;
        let rows = (height as f64 / cell) as usize + 1;
        Self { cell, cols, rows, buckets: vec![Vec::new(); cols * rows] }
    }

    fn bucket(&self, p: Point2) -> (usize, usize) {
        let c = ((p.x / self.cell) as usize).min(self.cols - 1);
        let r = ((p.y / self.cell) as usize).min(self.rows - 1);
        (r, c)
    }

    fn insert(&mut self, p: Point2) {
        let (r, c) = self.bucket(p);
        self.buckets[r * self.cols + c].push(p);
    }

    fn covered(&self, p: Point2, radius: f64) -> bool {
        let (r, c) = self.bucket(p);
        let reach = libm::ceil(radius / self.cell) as usize;
        for rr in r.saturating_sub(reach)..=(r + reach).min(self.rows - 1) {
            for cc in c.saturating_sub(reach)..=(c + reach).min(self.cols - 1) {
                if self.buckets[rr * self.cols + cc].iter().any(|q| q.dist(p) <= radius) {
                    return true;
                }
            }
        }
        false
    }
}

/// Chains consecutive flows into cycle-consistent tracklets.
///
/// `forward[t]` is `f_{t -> t+1}` and `backward[t]` is `f_{t+1 -> t}`. A
/// tracklet at `x^{t}` is extended to `x^{t+1} = x^t + f_{t->t+1}(x^t)` and
/// terminated at `t` when `|x^t - (x^{t+1} + f_{t+1->t}(x^{t+1}))| >= gamma_of`
/// or when the step leaves the image. New seeds are placed on a
/// `seed_stride` lattice in every frame wherever no live tracklet lies within
/// `seed_stride / 2` pixels. Single-frame tracklets are discarded.
pub fn chain_tracklets(forward: &[FlowField], backward: &[FlowField], cfg: &ChainConfig) -> Result<Vec<Tracklet>> {
    cfg.validate()?;
    if forward.len() != backward.len() {
        return Err(Error::precondition("forward and backward flow lists differ in length"));
    }
    let frames = forward.len() + 1;
    let Some(first) = forward.first() else {
        return Ok(Vec::new());
    };
    let (height, width) = (first.height, first.width);
    if forward.iter().chain(backward).any(|f| f.height != height || f.width != width) {
        return Err(Error::shape("all flow fields must share one resolution"));
    }

    let radius = cfg.seed_stride as f64 / 2.0;
    // (creation order, tracklet)
    let mut live: Vec<(usize, Tracklet)> = Vec::new();
    let mut done: Vec<(usize, Tracklet)> = Vec::new();
    let mut next_id = 0usize;

    for t in 0..frames {
        if t > 0 {
            let (fwd, bwd) = (&forward[t - 1], &backward[t - 1]);
            let mut still = Vec::with_capacity(live.len());
            for (id, mut tr) in live.drain(..) {
                let prev = *tr.points.last().expect("tracklets are never empty");
                let next = fwd.advect(prev).filter(|p| fwd.contains(*p));
                let consistent = next.and_then(|n| bwd.advect(n).map(|back| (n, prev.dist(back))));
                match consistent {
                    Some((n, err)) if err < cfg.gamma_of => {
                        tr.points.push(n);
                        still.push((id, tr));
                    }
                    _ => done.push((id, tr)),
                }
            }
            live = still;
        }

        let mut coverage = Coverage::new(height, width, cfg.seed_stride as f64);
        for (_, tr) in &live {
            coverage.insert(*tr.points.last().unwrap());
        }
        for y in (0..height).step_by(cfg.seed_stride) {
            for x in (0..width).step_by(cfg.seed_stride) {
                let p = Point2::new(x as f64, y as f64);
                if !coverage.covered(p, radius) {
                    live.push((next_id, Tracklet { start: t, points: vec![p] }));
                    next_id += 1;
                }
            }
        }
    }
    done.append(&mut live);
    done.retain(|(_, tr)| tr.points.len() >= 2);
    done.sort_by_key(|(id, _)| *id);
    Ok(done.into_iter().map(|(_, tr)| tr).collect())
}

/// Decides whether the chained correspondence `x_i -> x_j` must be dropped
/// given direct flows `f_{i->j}` and `f_{j->i}`.
///
/// The pair is dropped iff it drifted at least `gamma_of_lng` from the direct
/// prediction and the direct prediction itself passes the cycle check.
pub fn drifted(x_i: Point2, x_j: Point2, fwd: &FlowField, bwd: &FlowField, cfg: &ChainConfig) -> bool {
    let Some(direct) = fwd.advect(x_i) else {
        return false;
    };
    if x_j.dist(direct) < cfg.gamma_of_lng {
        return false;
    }
    match bwd.advect(direct) {
        Some(back) => x_i.dist(back) <= cfg.gamma_of,
        None => false,
    }
}

/// Expands tracklets into all within-tracklet pairs, dropping pairs with gap
/// `<= k_max` that disagree with a reliable direct flow.
pub fn filter_long_range<S: FlowSource + ?Sized>(
    tracklets: &[Tracklet],
    flows: &mut S,
    cfg: &ChainConfig,
) -> Result<FlowCorrespondenceSet> {
    cfg.validate()?;
    let frames = tracklets.iter().map(|t| t.end() + 1).max().unwrap_or(0);
    // dropped[k][(a, b)] for tracklet k with local offsets a < b.
    let mut dropped: Vec<Vec<bool>> = tracklets
        .iter()
        .map(|t| vec![false; t.points.len() * t.points.len()])
        .collect();

    for i in 0..frames {
        for j in (i + 1)..frames.min(i + cfg.k_max + 1) {
            let members: Vec<usize> = (0..tracklets.len())
                .filter(|&k| tracklets[k].covers(i) && tracklets[k].covers(j))
                .collect();
            if members.is_empty() {
                continue;
            }
            let fwd = flows.flow(i, j)?;
            let bwd = flows.flow(j, i)?;
            for k in members {
                let tr = &tracklets[k];
                if drifted(tr.at(i), tr.at(j), &fwd, &bwd, cfg) {
                    let n = tr.points.len();
                    dropped[k][(i - tr.start) * n + (j - tr.start)] = true;
                }
            }
        }
    }

    let mut out = FlowCorrespondenceSet::default();
    for (tr, drop) in tracklets.iter().zip(&dropped) {
        let n = tr.points.len();
        for a in 0..n {
            for b in (a + 1)..n {
                if !drop[a * n + b] {
                    out.pairs.push(FlowPair::new(tr.start + a, tr.start + b, tr.points[a], tr.points[b]));
                }
            }
        }
    }
    Ok(out)
}
