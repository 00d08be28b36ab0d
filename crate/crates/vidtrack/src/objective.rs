//! Differentiable loss terms over tracker outputs and refined features.

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};
use vidtrack_core::losses::{LossTerms, LossWeights};

use crate::error::Result;
use crate::nn::{constant, index_tensor};
use crate::tracker::{grouped_products, l2_normalize};

/// Per-axis factors taking pixel differences to normalized `[-1, 1]`
/// differences, `2 / (D - 1)`, as a `(1, 2)` tensor in `(x, y)` order.
pub fn normalization_scale(height: usize, width: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let sx = 2.0 / (width.max(2) - 1) as f64;
    let sy = 2.0 / (height.max(2) - 1) as f64;
    constant(vec![sx, sy], (1, 2), dtype, device)
}

/// Huber penalty of the Euclidean distance between matching rows of two
/// `(P, 2)` pixel tensors, measured in normalized coordinates. Written
/// without branches: `0.5 min(r^2, d^2) + d (sqrt(max(r^2, d^2)) - d)`.
pub fn huber_rows(a: &Tensor, b: &Tensor, scale: &Tensor, delta: f64) -> Result<Tensor> {
    let diff = (a - b)?.broadcast_mul(scale)?;
    let r2 = diff.sqr()?.sum(1)?;
    let d2 = Tensor::full(delta * delta, r2.shape(), r2.device())?.to_dtype(r2.dtype())?;
    let quad = (r2.minimum(&d2)? * 0.5)?;
    let lin = ((r2.maximum(&d2)?.sqrt()? - delta)? * delta)?;
    Ok((quad + lin)?)
}

fn zero(dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::zeros((), dtype, device)?)
}

/// Mean over pairs of `H(fwd_pred, fwd_target) + H(bwd_pred, bwd_target)`.
pub fn flow_loss(
    fwd_pred: &Tensor,
    fwd_target: &Tensor,
    bwd_pred: &Tensor,
    bwd_target: &Tensor,
    scale: &Tensor,
    delta: f64,
) -> Result<Tensor> {
    if fwd_pred.dim(0)? == 0 {
        return zero(fwd_pred.dtype(), fwd_pred.device());
    }
    let per = (huber_rows(fwd_pred, fwd_target, scale, delta)? + huber_rows(bwd_pred, bwd_target, scale, delta)?)?;
    Ok(per.mean(0)?)
}

/// Mean over pairs of `0.5 w (H(fwd) + H(bwd))`.
#[allow(clippy::too_many_arguments)]
pub fn cycle_loss(
    fwd_pred: &Tensor,
    fwd_target: &Tensor,
    bwd_pred: &Tensor,
    bwd_target: &Tensor,
    weights: &Tensor,
    scale: &Tensor,
    delta: f64,
) -> Result<Tensor> {
    if fwd_pred.dim(0)? == 0 {
        return zero(fwd_pred.dtype(), fwd_pred.device());
    }
    let per = (huber_rows(fwd_pred, fwd_target, scale, delta)? + huber_rows(bwd_pred, bwd_target, scale, delta)?)?;
    Ok(((per * weights)? * 0.5)?.mean(0)?)
}

/// Contrastive loss per anchor row: `-log softmax(cos(anchor, target_p) / tau)`
/// at the positive cell, with the softmax over every cell of the anchor's
/// target frame. `feats` is `(B, N, C)`; returns `(P)`.
pub fn contrastive_rows(anchors: &Tensor, feats: &Tensor, targets: &[usize], positives: &[usize], tau: f64) -> Result<Tensor> {
    let logits = (grouped_products(&l2_normalize(anchors)?, &l2_normalize(feats)?, targets)? / tau)?;
    let m = logits.max_keepdim(D::Minus1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(D::Minus1)?.log()? + &m)?;
    let pos = logits.gather(&index_tensor(positives, feats.device())?.unsqueeze(1)?, 1)?;
    Ok((lse - pos)?.squeeze(1)?)
}

/// A best-buddy pair on local batch frames.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellPair {
    pub frame_i: usize,
    pub cell_i: usize,
    pub frame_j: usize,
    pub cell_j: usize,
    pub weight: f64,
}

/// Weighted symmetrized contrastive loss,
/// `mean_pairs 0.5 w (l(phi_i, phi_j) + l(phi_j, phi_i))`.
pub fn buddy_loss(feats: &Tensor, pairs: &[CellPair], tau: f64) -> Result<Tensor> {
    if pairs.is_empty() {
        return zero(feats.dtype(), feats.device());
    }
    let (b, n, c) = feats.dims3()?;
    let flat = feats.reshape((b * n, c))?;
    let dev = feats.device();
    let rows_i: Vec<usize> = pairs.iter().map(|p| p.frame_i * n + p.cell_i).collect();
    let rows_j: Vec<usize> = pairs.iter().map(|p| p.frame_j * n + p.cell_j).collect();
    let phi_i = flat.index_select(&index_tensor(&rows_i, dev)?, 0)?;
    let phi_j = flat.index_select(&index_tensor(&rows_j, dev)?, 0)?;
    let fi: Vec<usize> = pairs.iter().map(|p| p.frame_i).collect();
    let fj: Vec<usize> = pairs.iter().map(|p| p.frame_j).collect();
    let ci: Vec<usize> = pairs.iter().map(|p| p.cell_i).collect();
    let cj: Vec<usize> = pairs.iter().map(|p| p.cell_j).collect();
    let l_ij = contrastive_rows(&phi_i, feats, &fj, &cj, tau)?;
    let l_ji = contrastive_rows(&phi_j, feats, &fi, &ci, tau)?;
    let w = constant(pairs.iter().map(|p| p.weight).collect(), pairs.len(), feats.dtype(), dev)?;
    Ok((((l_ij + l_ji)? * w)? * 0.5)?.mean(0)?)
}

/// Mean over cells of `|1 - |phi|/|phi0|| + |1 - cos(phi, phi0)|`; cells whose
/// frozen feature has zero norm are excluded. Returns the loss and the number
/// of contributing cells.
pub fn prior_loss(refined: &Tensor, frozen: &Tensor) -> Result<(Tensor, usize)> {
    let c = refined.dim(D::Minus1)?;
    let r = refined.reshape(((), c))?;
    let f = frozen.reshape(((), c))?;
    let fnorm = f.sqr()?.sum(1)?.sqrt()?;
    let keep: Vec<usize> = fnorm
        .to_dtype(DType::F64)?
        .to_vec1::<f64>()?
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > 0.0)
        .map(|(k, _)| k)
        .collect();
    let total = fnorm.dim(0)?;
    if keep.len() < total {
        log::warn!("{} frozen cells have zero norm and are excluded from the prior loss", total - keep.len());
    }
    if keep.is_empty() {
        return Ok((zero(refined.dtype(), refined.device())?, 0));
    }
    let ids = index_tensor(&keep, refined.device())?;
    let (r, f, fnorm) = (r.index_select(&ids, 0)?, f.index_select(&ids, 0)?, fnorm.index_select(&ids, 0)?);
    let rnorm = (r.sqr()?.sum(1)? + 1e-20)?.sqrt()?;
    let norm_term = ((rnorm.clone() / &fnorm)? - 1.0)?.abs()?;
    let cos = ((r * f)?.sum(1)? / (rnorm * fnorm)?)?;
    let angle_term = (cos.affine(-1.0, 1.0))?.abs()?;
    Ok(((norm_term + angle_term)?.mean(0)?, keep.len()))
}

/// Number of pairs (or cells) behind each term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossCounts {
    pub flow: usize,
    pub dino_bb: usize,
    pub rfn_bb: usize,
    pub rfn_cc: usize,
    pub prior: usize,
}

/// Per-term values, their weighted total and contributing counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: u64,
    pub terms: LossTerms,
    pub total: f64,
    pub counts: LossCounts,
}

/// Differentiable values of the five terms.
pub struct LossTensors {
    pub flow: Tensor,
    pub dino_bb: Tensor,
    pub rfn_bb: Tensor,
    pub rfn_cc: Tensor,
    pub prior: Tensor,
}

impl LossTensors {
    /// `flow + l1 dino_bb + l2 rfn_bb + l3 rfn_cc + l4 prior`.
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        let t = (&self.flow + (&self.dino_bb * w.dino_bb)?)?;
        let t = (t + (&self.rfn_bb * w.rfn_bb)?)?;
        let t = (t + (&self.rfn_cc * w.rfn_cc)?)?;
        Ok((t + (&self.prior * w.prior)?)?)
    }

    pub fn values(&self) -> Result<LossTerms> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossTerms {
            flow: v(&self.flow)?,
            dino_bb: v(&self.dino_bb)?,
            rfn_bb: v(&self.rfn_bb)?,
            rfn_cc: v(&self.rfn_cc)?,
            prior: v(&self.prior)?,
        })
    }
}
