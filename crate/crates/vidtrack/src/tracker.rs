//! The tracker: refined features, cosine cost volumes, heatmap refinement
//! and radius-restricted soft-argmax.

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidtrack_core::tracking::{PointTracker, TrackRequest};
use vidtrack_core::visibility::TrajectoryEstimate;
use vidtrack_core::{PatchGrid, Point2};

use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::media::FrameSequence;
use crate::nn::{blur_downsample, constant, index_tensor, reflect_pad, BatchNorm, Conv, Group, NamedParam};

const NORM_EPS: f64 = 1e-20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackerConfig {
    /// Output channels of the first three adapter stages; the last stage
    /// outputs the backbone feature width.
    pub adapter_widths: [usize; 3],
    pub kernel: usize,
    pub refiner_hidden: usize,
    /// Soft-argmax radius around the heatmap maximum, in pixels.
    pub radius: f64,
    /// Seed for parameter initialisation.
    pub init_seed: u64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self { adapter_widths: [64, 128, 256], kernel: 5, refiner_hidden: 16, radius: 35.0, init_seed: 0 }
    }
}

/// How cost volumes become heatmaps.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapMode {
    /// Refiner CNN followed by a spatial softmax.
    #[default]
    Refined,
    /// Spatial softmax of the raw cost volume.
    Identity,
    /// The raw cost volume itself, clipped at zero, as weights.
    Raw,
}

#[derive(Debug)]
struct Stage {
    conv: Conv,
    bn: BatchNorm,
    pad: usize,
    downsample: bool,
}

/// Residual network on RGB frames.
#[derive(Debug)]
pub struct DeltaAdapter {
    stages: Vec<Stage>,
}

impl DeltaAdapter {
    fn new(rng: &mut ChaCha8Rng, cfg: &TrackerConfig, out_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        let k = cfg.kernel;
        let pad = k / 2;
        let chans = [3, cfg.adapter_widths[0], cfg.adapter_widths[1], cfg.adapter_widths[2], out_dim];
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let last = s == 3;
            let (p, d) = if last { (2 * pad, 2) } else { (pad, 1) };
            let conv = Conv::new(rng, chans[s], chans[s + 1], k, 0, d, dtype, device)?;
            let init = if last { 0.0 } else { 1.0 };
            let bn = BatchNorm::new(chans[s + 1], init, 0.0, dtype, device)?;
            stages.push(Stage { conv, bn, pad: p, downsample: !last });
        }
        Ok(Self { stages })
    }

    /// `(B, 3, H, W)` images to `(B, C, h, w)` residual maps.
    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let mut x = x.clone();
        for st in &self.stages {
            x = st.conv.forward(&reflect_pad(&x, st.pad)?)?;
            x = st.bn.forward(&x, train)?;
            if st.downsample {
                x = blur_downsample(&x.relu()?)?;
            }
        }
        Ok(x)
    }

    pub fn batch_norms(&self) -> impl Iterator<Item = &BatchNorm> {
        self.stages.iter().map(|s| &s.bn)
    }

    /// Last stage's normalisation affine parameters, zero at initialisation.
    pub fn output_norm(&self) -> &BatchNorm {
        &self.stages[3].bn
    }

    fn params(&self, out: &mut Vec<NamedParam>) {
        for (i, st) in self.stages.iter().enumerate() {
            st.conv.params(&format!("adapter.{i}.conv"), Group::Adapter, out);
            st.bn.params(&format!("adapter.{i}.bn"), Group::Adapter, out);
        }
    }
}

/// Two 3x3 convolutions with a ReLU between them, mapping cost volumes to
/// heatmap logits.
#[derive(Debug)]
pub struct HeatmapRefiner {
    conv1: Conv,
    conv2: Conv,
}

impl HeatmapRefiner {
    fn new(rng: &mut ChaCha8Rng, hidden: usize, dtype: DType, device: &Device) -> Result<Self> {
        Ok(Self {
            conv1: Conv::new(rng, 1, hidden, 3, 1, 1, dtype, device)?,
            conv2: Conv::new(rng, hidden, 1, 3, 1, 1, dtype, device)?,
        })
    }

    /// `(Q, 1, rows, cols)` to logits of the same shape.
    pub fn forward(&self, s: &Tensor) -> Result<Tensor> {
        // a single input channel makes (Q, 1, ..) and (1, Q, ..) the same layout
        let (q, _, rows, cols) = s.dims4()?;
        let x = s.reshape((1, q, rows, cols))?;
        let y = self.conv2.forward_channels_first(&self.conv1.forward_channels_first(&x)?.relu()?)?;
        Ok(y.reshape((q, 1, rows, cols))?)
    }

    fn params(&self, out: &mut Vec<NamedParam>) {
        self.conv1.params("refiner.conv1", Group::Refiner, out);
        self.conv2.params("refiner.conv2", Group::Refiner, out);
    }
}

/// Trainable tracker parameters.
#[derive(Debug)]
pub struct TrackerState {
    pub cfg: TrackerConfig,
    pub adapter: DeltaAdapter,
    pub refiner: HeatmapRefiner,
    pub feature_dim: usize,
    pub dtype: DType,
    pub device: Device,
}

impl TrackerState {
    pub fn new(cfg: TrackerConfig, feature_dim: usize, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.kernel % 2 == 0 || cfg.adapter_widths.contains(&0) || cfg.refiner_hidden == 0 || !(cfg.radius > 0.0) {
            return Err(Error::input("tracker needs an odd kernel, positive widths and a positive radius"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let adapter = DeltaAdapter::new(&mut rng, &cfg, feature_dim, dtype, device)?;
        let refiner = HeatmapRefiner::new(&mut rng, cfg.refiner_hidden, dtype, device)?;
        Ok(Self { cfg, adapter, refiner, feature_dim, dtype, device: device.clone() })
    }

    pub fn params(&self) -> Vec<NamedParam> {
        let mut out = Vec::new();
        self.adapter.params(&mut out);
        self.refiner.params(&mut out);
        out
    }

    pub fn param_count(&self, group: Option<Group>) -> usize {
        self.params()
            .iter()
            .filter(|p| group.is_none_or(|g| p.group == g))
            .map(|p| p.var.elem_count())
            .sum()
    }

    /// Running statistics of every normalisation layer, in stage order.
    pub fn running_stats(&self) -> Vec<(Tensor, Tensor)> {
        self.adapter.batch_norms().map(BatchNorm::running_stats).collect()
    }

    pub fn set_running_stats(&self, stats: Vec<(Tensor, Tensor)>) -> Result<()> {
        let bns: Vec<_> = self.adapter.batch_norms().collect();
        if bns.len() != stats.len() {
            return Err(Error::Format("running statistics do not match the adapter".into()));
        }
        for (bn, (m, v)) in bns.into_iter().zip(stats) {
            bn.set_running_stats(m, v);
        }
        Ok(())
    }
}

/// Per-video tensors shared by training and inference: frames, frozen
/// features and the patch-center geometry.
#[derive(Debug)]
pub struct VideoTensors {
    pub grid: PatchGrid,
    pub height: usize,
    pub width: usize,
    /// `(T, 3, H, W)`.
    pub images: Tensor,
    /// `(T, N, C)` frozen backbone features.
    pub frozen: Tensor,
    /// `(N, 2)` pixel centers `(x, y)` of the grid cells.
    pub centers: Tensor,
}

impl VideoTensors {
    pub fn new(seq: &FrameSequence, maps: &[FeatureMap], dtype: DType, device: &Device) -> Result<Self> {
        if maps.len() != seq.len() {
            return Err(Error::input("one feature map per frame is required"));
        }
        let grid = maps[0].grid;
        let dim = maps[0].features.dim;
        if maps.iter().any(|m| m.grid != grid || m.features.dim != dim) {
            return Err(vidtrack_core::Error::shape("feature maps differ in grid or width").into());
        }
        let (h, w) = seq.working_size;
        let mut chw = Vec::with_capacity(seq.len() * 3 * h * w);
        for f in &seq.frames {
            for c in 0..3 {
                chw.extend(f.data.iter().skip(c).step_by(3).copied());
            }
        }
        let images = Tensor::from_vec(chw, (seq.len(), 3, h, w), device)?.to_dtype(dtype)?;
        let feats: Vec<f32> = maps.iter().flat_map(|m| m.features.data.iter().copied()).collect();
        let frozen = Tensor::from_vec(feats, (seq.len(), grid.len(), dim), device)?.to_dtype(dtype)?;
        let centers: Vec<f64> = grid.centers().flat_map(|p| [p.x, p.y]).collect();
        let centers = constant(centers, (grid.len(), 2), dtype, device)?;
        Ok(Self { grid, height: h, width: w, images, frozen, centers })
    }

    pub fn frames(&self) -> usize {
        self.images.dim(0).unwrap_or(0)
    }
}

/// Bilinear sampling (half-pixel alignment, border clamp) of a `(B, C, h, w)`
/// map at the patch centers of an `H x W` frame; returns `(B, N, C)`.
pub fn sample_at_centers(residual: &Tensor, grid: &PatchGrid, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = residual.dims4()?;
    let axis = |pix: f64, full: usize, n: usize| -> (usize, usize, f64) {
        let u = ((pix + 0.5) * n as f64 / full as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let u0 = u.floor() as usize;
        (u0, (u0 + 1).min(n - 1), u - u0 as f64)
    };
    let n = grid.len();
    let mut idx = vec![Vec::with_capacity(n); 4];
    let mut wts = vec![Vec::with_capacity(n); 4];
    for p in grid.centers() {
        let (y0, y1, fy) = axis(p.y, height, h);
        let (x0, x1, fx) = axis(p.x, width, w);
        for (k, (yy, xx, wt)) in
            [(y0, x0, (1.0 - fy) * (1.0 - fx)), (y0, x1, (1.0 - fy) * fx), (y1, x0, fy * (1.0 - fx)), (y1, x1, fy * fx)]
                .into_iter()
                .enumerate()
        {
            idx[k].push(yy * w + xx);
            wts[k].push(wt);
        }
    }
    let flat = residual.reshape((b, c, h * w))?;
    let mut acc: Option<Tensor> = None;
    for k in 0..4 {
        let g = flat.index_select(&index_tensor(&idx[k], residual.device())?, 2)?;
        let wt = constant(wts[k].clone(), (1, 1, n), residual.dtype(), residual.device())?;
        let term = g.broadcast_mul(&wt)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.expect("four taps").transpose(1, 2)?.contiguous()?)
}

/// Refined features `frozen + residual` for the given frames, `(B, N, C)`.
pub fn refined_features(state: &TrackerState, video: &VideoTensors, frames: &[usize], train: bool) -> Result<Tensor> {
    let ids = index_tensor(frames, &state.device)?;
    let imgs = video.images.index_select(&ids, 0)?;
    let residual = state.adapter.forward(&imgs, train)?;
    let sampled = sample_at_centers(&residual, &video.grid, video.height, video.width)?;
    Ok((video.frozen.index_select(&ids, 0)? + sampled)?)
}

/// Unit-normalised rows along the last dimension; zero rows stay zero.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + NORM_EPS)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Query point on a local frame of a feature batch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrackQuery {
    pub from: usize,
    pub point: Point2,
    pub to: usize,
}

/// Bilinear feature samples at sub-pixel points, clamped to the grid hull.
/// `feats` is `(B, N, C)`; `points` are `(frame, pixel)`; returns `(Q, C)`.
pub fn sample_points(feats: &Tensor, grid: &PatchGrid, points: &[(usize, Point2)]) -> Result<Tensor> {
    let (b, n, c) = feats.dims3()?;
    let q = points.len();
    let mut idx = Vec::with_capacity(4 * q);
    let mut wts = Vec::with_capacity(4 * q);
    for &(f, p) in points {
        if f >= b {
            return Err(Error::input(format!("frame {f} outside a batch of {b}")));
        }
        let (r, col) = grid.pixel_to_cell(p);
        let r = r.clamp(0.0, (grid.rows - 1) as f64);
        let col = col.clamp(0.0, (grid.cols - 1) as f64);
        let (r0, c0) = (r.floor() as usize, col.floor() as usize);
        let (r1, c1) = ((r0 + 1).min(grid.rows - 1), (c0 + 1).min(grid.cols - 1));
        let (fr, fc) = (r - r0 as f64, col - c0 as f64);
        for (rr, cc, w) in [(r0, c0, (1.0 - fr) * (1.0 - fc)), (r0, c1, (1.0 - fr) * fc), (r1, c0, fr * (1.0 - fc)), (r1, c1, fr * fc)] {
            idx.push(f * n + grid.index(rr, cc));
            wts.push(w);
        }
    }
    let rows = feats.reshape((b * n, c))?.index_select(&index_tensor(&idx, feats.device())?, 0)?;
    let wts = constant(wts, (q, 4, 1), feats.dtype(), feats.device())?;
    Ok(rows.reshape((q, 4, c))?.broadcast_mul(&wts)?.sum(1)?)
}

/// Cosine similarity of each query row against every cell of its target
/// frame: `queries` is `(Q, C)`, `feats` `(B, N, C)`; returns `(Q, N)`.
pub fn cost_volume(queries: &Tensor, feats: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let qn = l2_normalize(queries)?;
    let fnorm = l2_normalize(feats)?;
    grouped_products(&qn, &fnorm, targets)
}

/// Row `q` of the result is `rows[q] . table[targets[q]]^T`, evaluated one
/// target frame at a time.
pub fn grouped_products(rows: &Tensor, table: &Tensor, targets: &[usize]) -> Result<Tensor> {
    let mut order: Vec<usize> = (0..targets.len()).collect();
    order.sort_by_key(|&q| (targets[q], q));
    let dev = rows.device();
    let mut parts = Vec::new();
    let mut start = 0;
    while start < order.len() {
        let t = targets[order[start]];
        let end = start + order[start..].iter().take_while(|&&q| targets[q] == t).count();
        let sel = rows.index_select(&index_tensor(&order[start..end], dev)?, 0)?;
        let tab = table.get(t)?;
        parts.push(sel.matmul(&tab.t()?)?);
        start = end;
    }
    let stacked = Tensor::cat(&parts, 0)?;
    let mut inverse = vec![0usize; order.len()];
    for (pos, &q) in order.iter().enumerate() {
        inverse[q] = pos;
    }
    Ok(stacked.index_select(&index_tensor(&inverse, dev)?, 0)?)
}

/// Softmax along the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Heatmaps `(Q, N)` from cost volumes `(Q, N)`.
pub fn heatmap(state: &TrackerState, cost: &Tensor, grid: &PatchGrid, mode: HeatmapMode) -> Result<Tensor> {
    match mode {
        HeatmapMode::Refined => {
            let q = cost.dim(0)?;
            let logits = state.refiner.forward(&cost.reshape((q, 1, grid.rows, grid.cols))?)?;
            softmax_last(&logits.reshape((q, grid.len()))?)
        }
        HeatmapMode::Identity => softmax_last(cost),
        HeatmapMode::Raw => Ok(cost.relu()?),
    }
}

/// Lowest-index argmax of each row.
pub fn row_argmax(h: &Tensor) -> Result<Vec<usize>> {
    let rows: Vec<Vec<f64>> = h.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .iter()
        .map(|r| {
            let mut best = 0;
            for (k, &v) in r.iter().enumerate() {
                if v > r[best] {
                    best = k;
                }
            }
            best
        })
        .collect())
}

/// Heatmap-weighted mean of cell centers within `radius` pixels of each
/// row's argmax. The argmax is a constant for differentiation. Returns the
/// `(Q, 2)` positions and the argmax cells.
pub fn soft_argmax(h: &Tensor, grid: &PatchGrid, centers: &Tensor, radius: f64) -> Result<(Tensor, Vec<usize>)> {
    let argmax = row_argmax(h)?;
    let n = grid.len();
    let pts: Vec<Point2> = grid.centers().collect();
    let mut mask = Vec::with_capacity(argmax.len() * n);
    for &a in &argmax {
        let c = pts[a];
        mask.extend(pts.iter().map(|p| if p.dist(c) <= radius { 1.0 } else { 0.0 }));
    }
    let mask = constant(mask, (argmax.len(), n), h.dtype(), h.device())?;
    let hm = (h * mask)?;
    let total = hm.sum_keepdim(1)?;
    // A row whose in-radius mass is zero (only possible for raw weights)
    // falls back to the argmax cell.
    let zero_rows: Vec<f64> = total.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let (hm, total) = if zero_rows.iter().any(|&t| t <= 0.0) {
        let mut fix = vec![0.0; argmax.len() * n];
        for (q, &t) in zero_rows.iter().enumerate() {
            if t <= 0.0 {
                fix[q * n + argmax[q]] = 1.0;
            }
        }
        let hm = (hm + constant(fix, (argmax.len(), n), h.dtype(), h.device())?)?;
        let total = hm.sum_keepdim(1)?;
        (hm, total)
    } else {
        (hm, total)
    };
    Ok((hm.matmul(centers)?.broadcast_div(&total)?, argmax))
}

/// Result of a batched tracker evaluation.
#[derive(Debug)]
pub struct TrackOutput {
    /// `(Q, 2)` pixel positions `(x, y)`.
    pub positions: Tensor,
    pub argmax: Vec<usize>,
    /// `(Q, C)` query features.
    pub query_features: Tensor,
}

/// Tracks queries between frames of a refined-feature batch `(B, N, C)`.
pub fn track_batch(
    state: &TrackerState,
    feats: &Tensor,
    grid: &PatchGrid,
    centers: &Tensor,
    queries: &[TrackQuery],
    mode: HeatmapMode,
) -> Result<TrackOutput> {
    let pts: Vec<(usize, Point2)> = queries.iter().map(|q| (q.from, q.point)).collect();
    let query_features = sample_points(feats, grid, &pts)?;
    let targets: Vec<usize> = queries.iter().map(|q| q.to).collect();
    let cost = cost_volume(&query_features, feats, &targets)?;
    let h = heatmap(state, &cost, grid, mode)?;
    let (positions, argmax) = soft_argmax(&h, grid, centers, state.cfg.radius)?;
    Ok(TrackOutput { positions, argmax, query_features })
}

pub fn positions_to_points(t: &Tensor) -> Result<Vec<Point2>> {
    let rows: Vec<Vec<f64>> = t.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows.into_iter().map(|r| Point2::new(r[0], r[1])).collect())
}

/// Read-only inference tracker over a whole video, with inference-mode
/// normalisation statistics.
pub struct Tracker<'a> {
    state: &'a TrackerState,
    features: Tensor,
    grid: PatchGrid,
    centers: Tensor,
    mode: HeatmapMode,
    chunk: usize,
}

impl<'a> Tracker<'a> {
    pub fn new(state: &'a TrackerState, video: &VideoTensors, mode: HeatmapMode) -> Result<Self> {
        let frames: Vec<usize> = (0..video.frames()).collect();
        let mut parts = Vec::new();
        for chunk in frames.chunks(8) {
            parts.push(refined_features(state, video, chunk, false)?.detach());
        }
        let features = Tensor::cat(&parts, 0)?;
        Ok(Self { state, features, grid: video.grid, centers: video.centers.clone(), mode, chunk: 1024 })
    }

    /// Tracker over explicit features `(T, N, C)`, e.g. raw backbone features.
    pub fn from_features(state: &'a TrackerState, features: Tensor, video: &VideoTensors, mode: HeatmapMode) -> Self {
        Self { state, features, grid: video.grid, centers: video.centers.clone(), mode, chunk: 1024 }
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn grid(&self) -> &PatchGrid {
        &self.grid
    }

    pub fn frames(&self) -> usize {
        self.features.dim(0).unwrap_or(0)
    }

    /// Answers with the argmax cell of each heatmap.
    pub fn track_detailed(&self, requests: &[TrackRequest]) -> Result<(Vec<Point2>, Vec<usize>)> {
        let t = self.frames();
        if let Some(r) = requests.iter().find(|r| r.from >= t || r.to >= t) {
            return Err(Error::input(format!("request {}->{} outside a {t}-frame video", r.from, r.to)));
        }
        let mut points = Vec::with_capacity(requests.len());
        let mut cells = Vec::with_capacity(requests.len());
        for chunk in requests.chunks(self.chunk) {
            let qs: Vec<TrackQuery> = chunk.iter().map(|r| TrackQuery { from: r.from, point: r.point, to: r.to }).collect();
            let out = track_batch(self.state, &self.features, &self.grid, &self.centers, &qs, self.mode)?;
            points.extend(positions_to_points(&out.positions)?);
            cells.extend(out.argmax);
        }
        Ok((points, cells))
    }

    /// Cosine similarity between features sampled at `(frame, point)` pairs
    /// and the paired reference features `(Q, C)`.
    pub fn similarities(&self, at: &[(usize, Point2)], reference: &Tensor) -> Result<Vec<f64>> {
        let f = l2_normalize(&sample_points(&self.features, &self.grid, at)?)?;
        let r = l2_normalize(reference)?;
        let s: Vec<f64> = (f * r)?.sum(1)?.to_dtype(DType::F64)?.to_vec1()?;
        Ok(s.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect())
    }

    /// Full trajectory of one query over every frame, with similarities to
    /// the query feature.
    pub fn trajectory(&self, query_frame: usize, query: Point2) -> Result<TrajectoryEstimate> {
        let t = self.frames();
        let reqs: Vec<TrackRequest> = (0..t).map(|k| TrackRequest::new(query, query_frame, k)).collect();
        let (positions, _) = self.track_detailed(&reqs)?;
        let qf = sample_points(&self.features, &self.grid, &[(query_frame, query)])?;
        let at: Vec<(usize, Point2)> = positions.iter().enumerate().map(|(k, &p)| (k, p)).collect();
        let sims = self.similarities(&at, &qf.broadcast_as((t, qf.dim(1)?))?.contiguous()?)?;
        Ok(TrajectoryEstimate::new(query_frame, query, positions, sims)?)
    }
}

impl PointTracker for Tracker<'_> {
    fn track(&self, requests: &[TrackRequest]) -> vidtrack_core::Result<Vec<Point2>> {
        self.track_detailed(requests)
            .map(|(p, _)| p)
            .map_err(|e| vidtrack_core::Error::Tracker(e.to_string()))
    }
}
