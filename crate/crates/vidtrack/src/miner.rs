//! Best-buddy mining over whole videos and training batches, using dense
//! similarity matrices.

use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use vidtrack_core::buddies::{buddy_confidence, refined_weight, BuddyMatch, BuddyPair, MinerConfig};
use vidtrack_core::flow::FlowCorrespondenceSet;
use vidtrack_core::{FeatureGrid, PatchGrid};

use crate::backbone::{FeatureMap, ForegroundMask};
use crate::error::{Error, Result};
use crate::tracker::l2_normalize;

const ROW_CHUNK: usize = 1024;

fn grid_tensor(g: &FeatureGrid) -> Result<Tensor> {
    let t = Tensor::from_vec(g.data.clone(), (g.len(), g.dim), &Device::Cpu)?.to_dtype(DType::F64)?;
    l2_normalize(&t)
}

/// Mutual nearest neighbours under cosine similarity between the rows of two
/// `(N, C)` tensors; ties go to the lowest index.
pub fn mutual_nearest(a: &Tensor, b: &Tensor) -> Result<Vec<BuddyMatch>> {
    let a = l2_normalize(&a.to_dtype(DType::F64)?)?;
    let b = l2_normalize(&b.to_dtype(DType::F64)?)?;
    let (na, nb) = (a.dim(0)?, b.dim(0)?);
    if na == 0 || nb == 0 {
        return Ok(Vec::new());
    }
    let bt = b.t()?;
    let mut row_best = vec![(0usize, f64::NEG_INFINITY); na];
    let mut col_best = vec![(0usize, f64::NEG_INFINITY); nb];
    for start in (0..na).step_by(ROW_CHUNK) {
        let len = ROW_CHUNK.min(na - start);
        let sims: Vec<Vec<f64>> = a.narrow(0, start, len)?.matmul(&bt)?.to_vec2()?;
        for (r, row) in sims.iter().enumerate() {
            let i = start + r;
            for (j, &s) in row.iter().enumerate() {
                if s > row_best[i].1 {
                    row_best[i] = (j, s);
                }
                if s > col_best[j].1 {
                    col_best[j] = (i, s);
                }
            }
        }
    }
    Ok(row_best
        .iter()
        .enumerate()
        .filter(|(i, (j, _))| col_best[*j].0 == *i)
        .map(|(i, &(j, s))| BuddyMatch { cell_a: i, cell_b: j, similarity: s })
        .collect())
}

/// Confidence-weighted buddies between two backbone maps.
pub fn weighted_buddies(a: &FeatureMap, b: &FeatureMap, cfg: &MinerConfig) -> Result<Vec<BuddyPair>> {
    let ta = grid_tensor(&a.features)?;
    let tb = grid_tensor(&b.features)?;
    let matches = mutual_nearest(&ta, &tb)?;
    if matches.is_empty() {
        return Ok(Vec::new());
    }
    let ids = |f: fn(&BuddyMatch) -> usize| -> Result<Tensor> {
        let v: Vec<u32> = matches.iter().map(|m| f(m) as u32).collect();
        Ok(Tensor::from_vec(v, matches.len(), &Device::Cpu)?)
    };
    let fwd: Vec<Vec<f64>> = ta.index_select(&ids(|m| m.cell_a)?, 0)?.matmul(&tb.t()?)?.to_vec2()?;
    let bwd: Vec<Vec<f64>> = tb.index_select(&ids(|m| m.cell_b)?, 0)?.matmul(&ta.t()?)?.to_vec2()?;
    matches
        .iter()
        .zip(fwd.iter().zip(&bwd))
        .map(|(m, (f, r))| {
            let w = buddy_confidence(f, &b.grid, m.similarity, r, &a.grid, cfg)?;
            Ok(BuddyPair {
                frame_i: a.frame_index as u32,
                frame_j: b.frame_index as u32,
                cell_i: m.cell_a as u32,
                cell_j: m.cell_b as u32,
                similarity: m.similarity as f32,
                weight: w as f32,
                foreground: false,
            })
        })
        .collect()
}

/// Backbone best buddies over every pair of `frames` (ascending), with
/// foreground flags from the first endpoint and flow-covered pairs removed.
pub fn mine_dino_buddies(
    maps: &[FeatureMap],
    frames: &[usize],
    masks: &[ForegroundMask],
    flow: &FlowCorrespondenceSet,
    grid: &PatchGrid,
    cfg: &MinerConfig,
) -> Result<Vec<BuddyPair>> {
    cfg.validate()?;
    if masks.len() != maps.len() {
        return Err(Error::input("one foreground mask per frame is required"));
    }
    let pairs: Vec<(usize, usize)> = frames
        .iter()
        .enumerate()
        .flat_map(|(k, &i)| frames[k + 1..].iter().map(move |&j| (i, j)))
        .collect();
    let mined: Vec<Vec<BuddyPair>> =
        pairs.par_iter().map(|&(i, j)| weighted_buddies(&maps[i], &maps[j], cfg)).collect::<Result<_>>()?;
    let mut all: Vec<BuddyPair> = mined.into_iter().flatten().collect();
    for b in &mut all {
        b.foreground = masks[b.frame_i as usize].get(b.cell_i as usize);
    }
    let before = all.len();
    let kept = vidtrack_core::buddies::exclude_flow_covered(all, flow, grid);
    log::info!("backbone best buddies: {} mined, {} after removing flow-covered pairs", before, kept.len());
    Ok(kept)
}

/// Refined best buddies between rows `i` and `j` of a `(B, N, C)` feature
/// batch, with weight `2 s^3`. Frame indices in the result are the given
/// video indices.
pub fn refined_buddies(feats: &Tensor, local: (usize, usize), frames: (usize, usize)) -> Result<Vec<BuddyPair>> {
    let a = feats.get(local.0)?.detach();
    let b = feats.get(local.1)?.detach();
    Ok(mutual_nearest(&a, &b)?
        .into_iter()
        .map(|m| BuddyPair {
            frame_i: frames.0 as u32,
            frame_j: frames.1 as u32,
            cell_i: m.cell_a as u32,
            cell_j: m.cell_b as u32,
            similarity: m.similarity as f32,
            weight: refined_weight(m.similarity) as f32,
            foreground: false,
        })
        .collect())
}
