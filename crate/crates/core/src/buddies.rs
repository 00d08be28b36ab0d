//! Best-buddy (mutual nearest neighbour) mining over feature grids and the
//! confidence weights attached to mined pairs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::flow::FlowCorrespondenceSet;
use crate::geometry::{PatchGrid, Point2};
use crate::raster::FeatureGrid;

/// Mutual nearest neighbours between two grids, by cell index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BuddyMatch {
    pub cell_a: usize,
    pub cell_b: usize,
    pub similarity: f64,
}

/// A mined pair between frames `i` and `j` with its loss weight.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BuddyPair {
    pub frame_i: u32,
    pub frame_j: u32,
    pub cell_i: u32,
    pub cell_j: u32,
    pub similarity: f32,
    pub weight: f32,
    pub foreground: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum SigmoidSign {
    /// `sigmoid(a * (1 - r) + b)`: ambiguous matches are gated toward zero.
    #[default]
    Gating,
    /// `sigmoid(a * (1 - r) - b)` with `b` taken literally.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MinerConfig {
    pub a: f64,
    pub b: f64,
    pub sign: SigmoidSign,
    /// Side of the square NMS box around each cell center, in pixels.
    pub nms_box: f64,
    pub nms_iou: f64,
    /// Cycle-consistency threshold for refined cycle pairs, in pixels.
    pub gamma_cc: f64,
}

impl Default for MinerConfig {
    fn default() -> Self {
        Self { a: 27.0, b: -5.7, sign: SigmoidSign::Gating, nms_box: 60.0, nms_iou: 0.2, gamma_cc: 4.0 }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_box > 0.0) || !(self.nms_iou > 0.0 && self.nms_iou < 1.0) || !(self.gamma_cc > 0.0) {
            return Err(Error::input("miner config: nms_box > 0, 0 < nms_iou < 1 and gamma_cc > 0 required"));
        }
        Ok(())
    }
}

fn norms(g: &FeatureGrid) -> Vec<f64> {
    g.cells()
        .map(|c| libm::sqrt(c.iter().map(|&v| v as f64 * v as f64).sum::<f64>()))
        .collect()
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

/// Cosine similarity in double precision; zero vectors have similarity 0.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let na = libm::sqrt(dot(a, a));
    let nb = libm::sqrt(dot(b, b));
    cosine_with_norms(a, b, na, nb)
}

fn cosine_with_norms(a: &[f32], b: &[f32], na: f64, nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Cosine similarity of `query` against every cell of `grid`.
pub fn similarity_map(query: &[f32], grid: &FeatureGrid) -> Vec<f64> {
    let nq = libm::sqrt(dot(query, query));
    grid.cells().zip(norms(grid)).map(|(c, n)| cosine_with_norms(query, c, nq, n)).collect()
}

/// All mutual nearest neighbours under cosine similarity.
///
/// Nearest-neighbour ties resolve to the lowest row-major index. The full
/// similarity table is never materialised: one pass over `a x b` tracks the
/// running best partner of every row and every column.
pub fn mine_best_buddies(a: &FeatureGrid, b: &FeatureGrid) -> Result<Vec<BuddyMatch>> {
    if a.dim != b.dim {
        return Err(Error::shape("feature grids differ in channel count"));
    }
    let (na, nb) = (norms(a), norms(b));
    let mut row_best = vec![(usize::MAX, f64::NEG_INFINITY); a.len()];
    let mut col_best = vec![(usize::MAX, f64::NEG_INFINITY); b.len()];
    for (ia, ca) in a.cells().enumerate() {
        for (ib, cb) in b.cells().enumerate() {
            let s = cosine_with_norms(ca, cb, na[ia], nb[ib]);
            if s > row_best[ia].1 {
                row_best[ia] = (ib, s);
            }
            if s > col_best[ib].1 {
                col_best[ib] = (ia, s);
            }
        }
    }
    Ok(row_best
        .iter()
        .enumerate()
        .filter(|&(ia, &(ib, _))| ib != usize::MAX && col_best[ib].0 == ia)
        .map(|(ia, &(ib, s))| BuddyMatch { cell_a: ia, cell_b: ib, similarity: s })
        .collect())
}

fn box_iou(p: Point2, q: Point2, side: f64) -> f64 {
    let ix = (side - libm::fabs(p.x - q.x)).max(0.0);
    let iy = (side - libm::fabs(p.y - q.y)).max(0.0);
    let inter = ix * iy;
    inter / (2.0 * side * side - inter)
}

/// Two strongest peaks surviving greedy NMS over equal-size boxes centred on
/// each cell. Returns `(s1, Some(s2))` or `(s1, None)` for a single peak.
pub fn top_two_peaks(sims: &[f64], grid: &PatchGrid, cfg: &MinerConfig) -> Result<(f64, Option<f64>)> {
    if sims.is_empty() || sims.len() != grid.len() {
        return Err(Error::precondition("similarity map is empty or does not match its grid"));
    }
    let mut first = 0;
    for (k, &s) in sims.iter().enumerate() {
        if s > sims[first] {
            first = k;
        }
    }
    let top = grid.center(first);
    let mut second: Option<usize> = None;
    for (k, &s) in sims.iter().enumerate() {
        if k == first || box_iou(top, grid.center(k), cfg.nms_box) > cfg.nms_iou {
            continue;
        }
        if second.is_none_or(|b| s > sims[b]) {
            second = Some(k);
        }
    }
    Ok((sims[first], second.map(|k| sims[k])))
}

/// Peak ratio `s2 / s1` clamped to `[0, 1]`; a single peak yields 0.
pub fn peak_ratio(sims: &[f64], grid: &PatchGrid, cfg: &MinerConfig) -> Result<f64> {
    let (s1, s2) = top_two_peaks(sims, grid, cfg)?;
    Ok(match s2 {
        None => 0.0,
        Some(_) if s1 <= 0.0 => 1.0,
        Some(s2) => (s2 / s1).clamp(0.0, 1.0),
    })
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// Confidence of a DINO best-buddy pair from the peak ratio of each
/// direction's similarity map and the pair similarity.
pub fn confidence_from_ratios(r_ij: f64, r_ji: f64, s_ij: f64, cfg: &MinerConfig) -> f64 {
    let r = r_ij.max(r_ji);
    let logit = match cfg.sign {
        SigmoidSign::Gating => cfg.a * (1.0 - r) + cfg.b,
        SigmoidSign::Literal => cfg.a * (1.0 - r) - cfg.b,
    };
    let s = s_ij.max(0.0);
    sigmoid(logit) * 2.0 * s * s * s
}

/// `forward` is the similarity of `p^i` over frame `j`'s grid, `backward` that
/// of `p^j` over frame `i`'s grid.
pub fn buddy_confidence(
    forward: &[f64],
    grid_j: &PatchGrid,
    s_ij: f64,
    backward: &[f64],
    grid_i: &PatchGrid,
    cfg: &MinerConfig,
) -> Result<f64> {
    let r_ij = peak_ratio(forward, grid_j, cfg)?;
    let r_ji = peak_ratio(backward, grid_i, cfg)?;
    Ok(confidence_from_ratios(r_ij, r_ji, s_ij, cfg))
}

/// Weight of a refined best-buddy pair, `2 s^3` for `s >= 0`.
pub fn refined_weight(s: f64) -> f64 {
    let s = s.max(0.0);
    2.0 * s * s * s
}

/// Mines DINO best buddies between frames `i` and `j` with confidence weights.
pub fn mine_weighted_buddies(
    frame_i: usize,
    frame_j: usize,
    feats_i: &FeatureGrid,
    grid_i: &PatchGrid,
    feats_j: &FeatureGrid,
    grid_j: &PatchGrid,
    cfg: &MinerConfig,
) -> Result<Vec<BuddyPair>> {
    let matches = mine_best_buddies(feats_i, feats_j)?;
    let mut out = Vec::with_capacity(matches.len());
    for m in matches {
        let fwd = similarity_map(feats_i.cell(m.cell_a), feats_j);
        let bwd = similarity_map(feats_j.cell(m.cell_b), feats_i);
        let w = buddy_confidence(&fwd, grid_j, m.similarity, &bwd, grid_i, cfg)?;
        out.push(BuddyPair {
            frame_i: frame_i as u32,
            frame_j: frame_j as u32,
            cell_i: m.cell_a as u32,
            cell_j: m.cell_b as u32,
            similarity: m.similarity as f32,
            weight: w as f32,
            foreground: false,
        });
    }
    Ok(out)
}

/// Mines refined best buddies with weight `2 s^3`.
pub fn mine_refined_buddies(
    frame_i: usize,
    frame_j: usize,
    feats_i: &FeatureGrid,
    feats_j: &FeatureGrid,
) -> Result<Vec<BuddyPair>> {
    Ok(mine_best_buddies(feats_i, feats_j)?
        .into_iter()
        .map(|m| BuddyPair {
            frame_i: frame_i as u32,
            frame_j: frame_j as u32,
            cell_i: m.cell_a as u32,
            cell_j: m.cell_b as u32,
            similarity: m.similarity as f32,
            weight: refined_weight(m.similarity) as f32,
            foreground: false,
        })
        .collect())
}

/// Drops buddy pairs already supervised by flow: a pair goes iff some flow
/// pair between the same two frames lies within `stride / 2` pixels of both
/// endpoints.
pub fn exclude_flow_covered(buddies: Vec<BuddyPair>, flow: &FlowCorrespondenceSet, grid: &PatchGrid) -> Vec<BuddyPair> {
    if flow.is_empty() {
        return buddies;
    }
    let radius = grid.stride as f64 / 2.0;
    let mut by_frames: alloc::collections::BTreeMap<(u32, u32), Vec<(Point2, Point2)>> = Default::default();
    for p in &flow.pairs {
        by_frames.entry((p.source, p.target)).or_default().push((p.from_point(), p.to_point()));
    }
    buddies
        .into_iter()
        .filter(|b| {
            let (lo, hi, a, c) = if b.frame_i <= b.frame_j {
                (b.frame_i, b.frame_j, grid.center(b.cell_i as usize), grid.center(b.cell_j as usize))
            } else {
                (b.frame_j, b.frame_i, grid.center(b.cell_j as usize), grid.center(b.cell_i as usize))
            };
            let Some(pairs) = by_frames.get(&(lo, hi)) else {
                return true;
            };
            !pairs.iter().any(|(x, y)| x.dist(a) <= radius && y.dist(c) <= radius)
        })
        .collect()
}

/// A refined cycle-consistent correspondence with weight `0.8^e_cyc`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CyclePair {
    pub frame_i: usize,
    pub frame_j: usize,
    pub from: Point2,
    pub to: Point2,
    pub cycle_error: f64,
    pub weight: f64,
    pub foreground: bool,
}

pub fn cycle_weight(error_px: f64) -> f64 {
    libm::pow(0.8, error_px)
}

/// Keeps seed `x^i` with forward estimate `x^j` and backward re-estimate
/// `x^{j->i}` when the cycle error is at most `gamma_cc`.
pub fn cycle_pair(frame_i: usize, frame_j: usize, seed: Point2, forward: Point2, back: Point2, gamma_cc: f64) -> Option<CyclePair> {
    let e = seed.dist(back);
    (e <= gamma_cc).then(|| CyclePair {
        frame_i,
        frame_j,
        from: seed,
        to: forward,
        cycle_error: e,
        weight: cycle_weight(e),
        foreground: false,
    })
}
