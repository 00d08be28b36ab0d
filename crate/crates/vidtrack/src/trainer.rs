//! Per-video optimisation: batch composition, Adam, schedules, checkpoints.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor, Var};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidtrack_core::buddies::{BuddyPair, MinerConfig};
use vidtrack_core::checksum::fnv1a;
use vidtrack_core::flow::{FlowCorrespondenceSet, FlowPair};
use vidtrack_core::losses::LossWeights;
use vidtrack_core::schedule::LrSchedule;
use vidtrack_core::tracking::mine_cycle_pairs;
use vidtrack_core::{PatchGrid, Point2};

use crate::backbone::ForegroundMask;
use crate::error::{Error, Result};
use crate::miner::refined_buddies;
use crate::nn::{constant, Group};
use crate::objective::{buddy_loss, cycle_loss, flow_loss, normalization_scale, prior_loss, CellPair, LossCounts, LossReport, LossTensors};
use crate::tracker::{refined_features, track_batch, HeatmapMode, TrackQuery, Tracker, TrackerConfig, TrackerState, VideoTensors};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub refiner_lr_decay: f64,
    pub refiner_decay_every: u64,
    pub iterations: u64,
    pub rfn_loss_start: u64,
    pub frames_per_batch: usize,
    pub flow_pairs: usize,
    pub max_bb_pairs: usize,
    pub max_cc_pairs: usize,
    pub bb_frame_pairs: usize,
    pub fg_ratio_flow: f64,
    pub fg_ratio_feat: f64,
    pub frame_subsample: usize,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Spacing of the uniform seed lattice for cycle pairs, in pixels.
    pub cc_seed_stride: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            refiner_lr_decay: 0.999,
            refiner_decay_every: 40,
            iterations: 10_000,
            rfn_loss_start: 5_000,
            frames_per_batch: 8,
            flow_pairs: 512,
            max_bb_pairs: 1024,
            max_cc_pairs: 1024,
            bb_frame_pairs: 4,
            fg_ratio_flow: 0.5,
            fg_ratio_feat: 0.7,
            frame_subsample: 1,
            seed: 0,
            checkpoint_every: 1000,
            cc_seed_stride: 16,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.frames_per_batch, self.flow_pairs, self.max_bb_pairs, self.max_cc_pairs, self.bb_frame_pairs, self.frame_subsample, self.cc_seed_stride];
        if counts.contains(&0) || self.refiner_decay_every == 0 {
            return Err(Error::input("training counts must be positive"));
        }
        if !(0.0..=1.0).contains(&self.fg_ratio_flow) || !(0.0..=1.0).contains(&self.fg_ratio_feat) {
            return Err(Error::input("foreground ratios must lie in [0, 1]"));
        }
        if !(self.lr > 0.0) || !(self.refiner_lr_decay > 0.0) {
            return Err(Error::input("learning rate and decay must be positive"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule { base: self.lr, decay: self.refiner_lr_decay, decay_every: self.refiner_decay_every }
    }

    /// Frames usable for supervision and batches: `0, k, 2k, ...`.
    pub fn training_frames(&self, total: usize) -> Vec<usize> {
        (0..total).step_by(self.frame_subsample.max(1)).collect()
    }
}

/// Precomputed supervision for one video.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Supervision {
    pub flow: FlowCorrespondenceSet,
    pub dino_bb: Vec<BuddyPair>,
    pub masks: Vec<ForegroundMask>,
}

/// Correspondences drawn for one iteration; frame indices are video indices.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub frames: Vec<usize>,
    pub frame_pairs: Vec<(usize, usize)>,
    pub flow: Vec<FlowPair>,
    pub dino_bb: Vec<BuddyPair>,
}

/// Draws up to `n` of `candidates` aiming for `ratio` from the foreground
/// stratum; a short stratum is topped up from the other one.
pub fn stratified_sample<T: Clone>(
    candidates: &[T],
    is_fg: impl Fn(&T) -> bool,
    n: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<T>, bool) {
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..candidates.len()).partition(|&k| is_fg(&candidates[k]));
    let n = n.min(candidates.len());
    let want_fg = ((n as f64) * ratio).round() as usize;
    let take_fg = want_fg.min(fg.len());
    let take_bg = (n - take_fg).min(bg.len());
    let take_fg = (n - take_bg).min(fg.len());
    let short = take_fg != want_fg;
    let mut out = Vec::with_capacity(n);
    for k in sample(rng, fg.len(), take_fg) {
        out.push(candidates[fg[k]].clone());
    }
    for k in sample(rng, bg.len(), take_bg) {
        out.push(candidates[bg[k]].clone());
    }
    (out, short)
}

/// Adam with per-group learning rates.
#[derive(Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &[(Var, Group)], cfg: &TrainConfig) -> Result<Self> {
        let zeros = |p: &Var| Tensor::zeros_like(p.as_tensor());
        Ok(Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            step: 0,
            m: params.iter().map(|(p, _)| zeros(p)).collect::<candle_core::Result<_>>()?,
            v: params.iter().map(|(p, _)| zeros(p)).collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn update(&mut self, params: &[(Var, Group)], grads: &candle_core::backprop::GradStore, lr: impl Fn(Group) -> f64) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, (var, group)) in params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // gradients carry their backward graph; keep the moments free of it
            let g = g.detach();
            self.m[k] = ((&self.m[k] * self.beta1)? + (&g * (1.0 - self.beta1))?)?.detach();
            self.v[k] = ((&self.v[k] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?.detach();
            let m_hat = (&self.m[k] / bc1)?;
            let v_hat = (&self.v[k] / bc2)?;
            let delta = ((m_hat / (v_hat.sqrt()? + self.eps)?)? * lr(*group))?;
            var.set(&(var.as_tensor() - delta)?)?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Ok(Self { shape: t.dims().to_vec(), data: t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()? })
    }

    pub fn to_tensor(&self, dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        constant(self.data.clone(), self.shape.as_slice(), dtype, device)
    }
}

const CHECKPOINT_MAGIC: [u8; 4] = *b"VTCK";
const CHECKPOINT_VERSION: u32 = 1;

/// Everything needed to resume training bit-exactly, or to run inference.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub magic: [u8; 4],
    pub version: u32,
    pub config_hash: String,
    pub iteration: u64,
    pub tracker: TrackerConfig,
    pub feature_dim: usize,
    pub double_precision: bool,
    pub params: Vec<(String, StoredTensor)>,
    pub running: Vec<(StoredTensor, StoredTensor)>,
    pub adam_step: u64,
    pub adam_m: Vec<StoredTensor>,
    pub adam_v: Vec<StoredTensor>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = bincode::serialize(self)?;
        let sum = fnv1a(&bytes);
        bytes.extend(sum.to_le_bytes());
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Format(format!("{} is truncated", path.display())));
        }
        let split = bytes.len() - 8;
        let sum = u64::from_le_bytes(bytes[split..].try_into().expect("8 bytes"));
        bytes.truncate(split);
        if fnv1a(&bytes) != sum {
            return Err(Error::Format(format!("checksum mismatch in {}", path.display())));
        }
        let ck: Checkpoint = bincode::deserialize(&bytes)?;
        if ck.magic != CHECKPOINT_MAGIC || ck.version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("{} is not a supported checkpoint", path.display())));
        }
        Ok(ck)
    }

    fn dtype(&self) -> DType {
        if self.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    /// Rebuilds the tracker parameters and normalisation statistics.
    pub fn tracker_state(&self, device: &candle_core::Device) -> Result<TrackerState> {
        let state = TrackerState::new(self.tracker.clone(), self.feature_dim, self.dtype(), device)?;
        let params = state.params();
        if params.len() != self.params.len() {
            return Err(Error::Format("checkpoint parameters do not match the tracker layout".into()));
        }
        for (p, (name, stored)) in params.iter().zip(&self.params) {
            if &p.name != name || p.var.dims() != stored.shape.as_slice() {
                return Err(Error::Format(format!("checkpoint parameter {name} does not match {}", p.name)));
            }
            p.var.set(&stored.to_tensor(self.dtype(), device)?)?;
        }
        let running = self
            .running
            .iter()
            .map(|(m, v)| Ok((m.to_tensor(self.dtype(), device)?, v.to_tensor(self.dtype(), device)?)))
            .collect::<Result<Vec<_>>>()?;
        state.set_running_stats(running)?;
        Ok(state)
    }
}

/// Runs the optimisation for one video.
pub struct Trainer<'a> {
    pub cfg: TrainConfig,
    pub weights: LossWeights,
    pub miner: MinerConfig,
    pub state: TrackerState,
    pub iteration: u64,
    pub config_hash: String,
    video: &'a VideoTensors,
    sup: &'a Supervision,
    adam: Adam,
    rng: ChaCha8Rng,
    frames: Vec<usize>,
    flow_index: HashMap<(u32, u32), Vec<u32>>,
    bb_index: HashMap<(u32, u32), Vec<u32>>,
    warned_short: bool,
}

impl<'a> Trainer<'a> {
    pub fn new(
        cfg: TrainConfig,
        weights: LossWeights,
        miner: MinerConfig,
        state: TrackerState,
        video: &'a VideoTensors,
        sup: &'a Supervision,
        config_hash: String,
    ) -> Result<Self> {
        cfg.validate()?;
        weights.validate()?;
        miner.validate()?;
        if sup.masks.len() != video.frames() {
            return Err(Error::input("one foreground mask per frame is required"));
        }
        let frames = cfg.training_frames(video.frames());
        let allowed: std::collections::HashSet<u32> = frames.iter().map(|&f| f as u32).collect();
        let mut flow_index: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (k, p) in sup.flow.pairs.iter().enumerate() {
            if allowed.contains(&p.source) && allowed.contains(&p.target) {
                flow_index.entry((p.source, p.target)).or_default().push(k as u32);
            }
        }
        let mut bb_index: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (k, b) in sup.dino_bb.iter().enumerate() {
            if allowed.contains(&b.frame_i) && allowed.contains(&b.frame_j) {
                let key = (b.frame_i.min(b.frame_j), b.frame_i.max(b.frame_j));
                bb_index.entry(key).or_default().push(k as u32);
            }
        }
        if flow_index.is_empty() && bb_index.is_empty() {
            return Err(Error::Training(format!(
                "no supervision on the {} training frames: {} flow pairs and {} best buddies overall",
                frames.len(),
                sup.flow.len(),
                sup.dino_bb.len()
            )));
        }
        let params = Self::param_list(&state);
        let adam = Adam::new(&params, &cfg)?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self {
            cfg,
            weights,
            miner,
            state,
            iteration: 0,
            config_hash,
            video,
            sup,
            adam,
            rng,
            frames,
            flow_index,
            bb_index,
            warned_short: false,
        })
    }

    fn param_list(state: &TrackerState) -> Vec<(Var, Group)> {
        state.params().into_iter().map(|p| (p.var, p.group)).collect()
    }

    fn warn_short(&mut self, what: &str) {
        if !self.warned_short {
            log::warn!("{what}: a stratum is short; filling from the other (reported once)");
            self.warned_short = true;
        }
    }

    /// Draws the frames and precomputed correspondences for one iteration.
    pub fn sample_batch(&mut self) -> Batch {
        let k = self.cfg.frames_per_batch.min(self.frames.len());
        let mut frames: Vec<usize> = sample(&mut self.rng, self.frames.len(), k).into_iter().map(|i| self.frames[i]).collect();
        frames.sort_unstable();
        let mut flow_cands = Vec::new();
        for (a, &fa) in frames.iter().enumerate() {
            for &fb in &frames[a + 1..] {
                if let Some(ix) = self.flow_index.get(&(fa as u32, fb as u32)) {
                    flow_cands.extend(ix.iter().map(|&k| self.sup.flow.pairs[k as usize]));
                }
            }
        }
        let (flow, short) = stratified_sample(&flow_cands, |p| p.foreground, self.cfg.flow_pairs, self.cfg.fg_ratio_flow, &mut self.rng);
        if short {
            self.warn_short("flow pairs");
        }
        let all_pairs: Vec<(usize, usize)> =
            frames.iter().enumerate().flat_map(|(a, &fa)| frames[a + 1..].iter().map(move |&fb| (fa, fb))).collect();
        let np = self.cfg.bb_frame_pairs.min(all_pairs.len());
        let mut frame_pairs: Vec<(usize, usize)> = sample(&mut self.rng, all_pairs.len(), np).into_iter().map(|i| all_pairs[i]).collect();
        frame_pairs.sort_unstable();
        let mut bb_cands = Vec::new();
        for &(a, b) in &frame_pairs {
            if let Some(ix) = self.bb_index.get(&(a as u32, b as u32)) {
                bb_cands.extend(ix.iter().map(|&k| self.sup.dino_bb[k as usize]));
            }
        }
        let (dino_bb, short) = stratified_sample(&bb_cands, |b| b.foreground, self.cfg.max_bb_pairs, self.cfg.fg_ratio_feat, &mut self.rng);
        if short {
            self.warn_short("backbone best buddies");
        }
        Batch { frames, frame_pairs, flow, dino_bb }
    }

    pub fn rfn_active(&self) -> bool {
        self.iteration >= self.cfg.rfn_loss_start
    }

    fn is_fg(&self, frame: usize, p: Point2) -> bool {
        self.sup.masks[frame].get(self.video.grid.nearest_cell(p))
    }

    fn cc_seeds(&self, grid: &PatchGrid, rfn: &[BuddyPair], pairs: &[(usize, usize)], local: &HashMap<usize, usize>) -> Vec<(usize, usize, Point2)> {
        let mut seeds = Vec::new();
        for b in rfn {
            seeds.push((local[&(b.frame_i as usize)], local[&(b.frame_j as usize)], grid.center(b.cell_i as usize)));
        }
        let s = self.cfg.cc_seed_stride;
        for &(i, j) in pairs {
            for y in (0..self.video.height).step_by(s) {
                for x in (0..self.video.width).step_by(s) {
                    seeds.push((local[&i], local[&j], Point2::new(x as f64, y as f64)));
                }
            }
        }
        seeds
    }

    /// Losses for a batch with gradients attached, plus counts.
    pub fn losses(&mut self, batch: &Batch) -> Result<(LossTensors, LossCounts)> {
        let video = self.video;
        let grid = video.grid;
        let local: HashMap<usize, usize> = batch.frames.iter().enumerate().map(|(k, &f)| (f, k)).collect();
        let feats = refined_features(&self.state, video, &batch.frames, true)?;
        let dtype = self.state.dtype;
        let dev = self.state.device.clone();
        let zero = Tensor::zeros((), dtype, &dev)?;

        let (mut rfn_pairs, mut cc_pairs) = (Vec::new(), Vec::new());
        if self.rfn_active() {
            let mut cands = Vec::new();
            for &(i, j) in &batch.frame_pairs {
                let mut mined = refined_buddies(&feats, (local[&i], local[&j]), (i, j))?;
                for b in &mut mined {
                    b.foreground = self.sup.masks[i].get(b.cell_i as usize);
                }
                cands.extend(mined);
            }
            let (s, short) = stratified_sample(&cands, |b| b.foreground, self.cfg.max_bb_pairs, self.cfg.fg_ratio_feat, &mut self.rng);
            if short {
                self.warn_short("refined best buddies");
            }
            rfn_pairs = s;
            let eval = refined_features(&self.state, video, &batch.frames, false)?.detach();
            let tracker = Tracker::from_features(&self.state, eval, video, HeatmapMode::Refined);
            let seeds = self.cc_seeds(&grid, &rfn_pairs, &batch.frame_pairs, &local);
            let mut mined = mine_cycle_pairs(&tracker, &seeds, self.miner.gamma_cc)?;
            for c in &mut mined {
                c.foreground = self.is_fg(batch.frames[c.frame_i], c.from);
            }
            let (s, short) = stratified_sample(&mined, |c| c.foreground, self.cfg.max_cc_pairs, self.cfg.fg_ratio_feat, &mut self.rng);
            if short {
                self.warn_short("cycle pairs");
            }
            cc_pairs = s;
        }

        let mut queries = Vec::with_capacity(2 * (batch.flow.len() + cc_pairs.len()));
        let mut targets = Vec::with_capacity(queries.capacity());
        for p in &batch.flow {
            let (s, t) = (local[&(p.source as usize)], local[&(p.target as usize)]);
            queries.push(TrackQuery { from: s, point: p.from_point(), to: t });
            targets.push(p.to_point());
            queries.push(TrackQuery { from: t, point: p.to_point(), to: s });
            targets.push(p.from_point());
        }
        for c in &cc_pairs {
            queries.push(TrackQuery { from: c.frame_i, point: c.from, to: c.frame_j });
            targets.push(c.to);
            queries.push(TrackQuery { from: c.frame_j, point: c.to, to: c.frame_i });
            targets.push(c.from);
        }
        let scale = normalization_scale(video.height, video.width, dtype, &dev)?;
        let delta = self.weights.huber_delta;
        let (flow, rfn_cc) = if queries.is_empty() {
            (zero.clone(), zero.clone())
        } else {
            let out = track_batch(&self.state, &feats, &grid, &video.centers, &queries, HeatmapMode::Refined)?;
            let tgt = constant(targets.iter().flat_map(|p| [p.x, p.y]).collect(), (targets.len(), 2), dtype, &dev)?;
            let split = |start: usize, n: usize| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
                let rows = |off: usize| -> Result<Tensor> {
                    let ids: Vec<usize> = (0..n).map(|k| start + 2 * k + off).collect();
                    Ok(crate::nn::index_tensor(&ids, &dev)?)
                };
                let (f, b) = (rows(0)?, rows(1)?);
                Ok((out.positions.index_select(&f, 0)?, tgt.index_select(&f, 0)?, out.positions.index_select(&b, 0)?, tgt.index_select(&b, 0)?))
            };
            let nf = batch.flow.len();
            let flow = if nf > 0 {
                let (fp, ft, bp, bt) = split(0, nf)?;
                flow_loss(&fp, &ft, &bp, &bt, &scale, delta)?
            } else {
                zero.clone()
            };
            let cc = if !cc_pairs.is_empty() {
                let (fp, ft, bp, bt) = split(2 * nf, cc_pairs.len())?;
                let w = constant(cc_pairs.iter().map(|c| c.weight).collect(), cc_pairs.len(), dtype, &dev)?;
                cycle_loss(&fp, &ft, &bp, &bt, &w, &scale, delta)?
            } else {
                zero.clone()
            };
            (flow, cc)
        };
        let cells = |v: &[BuddyPair]| -> Vec<CellPair> {
            v.iter()
                .map(|b| CellPair {
                    frame_i: local[&(b.frame_i as usize)],
                    cell_i: b.cell_i as usize,
                    frame_j: local[&(b.frame_j as usize)],
                    cell_j: b.cell_j as usize,
                    weight: b.weight as f64,
                })
                .collect()
        };
        let dino_bb = buddy_loss(&feats, &cells(&batch.dino_bb), self.weights.tau)?;
        let rfn_bb = buddy_loss(&feats, &cells(&rfn_pairs), self.weights.tau)?;
        let ids = crate::nn::index_tensor(&batch.frames, &dev)?;
        let (prior, prior_cells) = prior_loss(&feats, &video.frozen.index_select(&ids, 0)?)?;
        let counts = LossCounts {
            flow: batch.flow.len(),
            dino_bb: batch.dino_bb.len(),
            rfn_bb: rfn_pairs.len(),
            rfn_cc: cc_pairs.len(),
            prior: prior_cells,
        };
        Ok((LossTensors { flow, dino_bb, rfn_bb, rfn_cc, prior }, counts))
    }

    /// One optimisation step. A non-finite loss leaves the parameters
    /// untouched and returns a numerical error.
    pub fn step(&mut self) -> Result<LossReport> {
        let batch = self.sample_batch();
        let (terms, counts) = self.losses(&batch)?;
        let total = terms.total(&self.weights)?;
        let values = terms.values()?;
        let total_value = self.weights.total(&values);
        if !total_value.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {}: {values:?}", self.iteration)));
        }
        let grads = total.backward()?;
        let rates = self.cfg.schedule().at(self.iteration);
        let params = Self::param_list(&self.state);
        self.adam.update(&params, &grads, |g| match g {
            Group::Adapter => rates.adapter,
            Group::Refiner => rates.refiner,
        })?;
        let report = LossReport { iteration: self.iteration, terms: values, total: total_value, counts };
        self.iteration += 1;
        Ok(report)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            magic: CHECKPOINT_MAGIC,
            version: CHECKPOINT_VERSION,
            config_hash: self.config_hash.clone(),
            iteration: self.iteration,
            tracker: self.state.cfg.clone(),
            feature_dim: self.state.feature_dim,
            double_precision: self.state.dtype == DType::F64,
            params: self
                .state
                .params()
                .iter()
                .map(|p| Ok((p.name.clone(), StoredTensor::from_tensor(p.var.as_tensor())?)))
                .collect::<Result<_>>()?,
            running: self
                .state
                .running_stats()
                .iter()
                .map(|(m, v)| Ok((StoredTensor::from_tensor(m)?, StoredTensor::from_tensor(v)?)))
                .collect::<Result<_>>()?,
            adam_step: self.adam.step,
            adam_m: self.adam.m.iter().map(StoredTensor::from_tensor).collect::<Result<_>>()?,
            adam_v: self.adam.v.iter().map(StoredTensor::from_tensor).collect::<Result<_>>()?,
            rng: self.rng.clone(),
        })
    }

    /// Restores parameters, optimiser moments, iteration and random stream.
    pub fn restore(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.tracker != self.state.cfg || ck.feature_dim != self.state.feature_dim {
            return Err(Error::input("checkpoint was written for a different tracker configuration"));
        }
        if ck.config_hash != self.config_hash {
            log::warn!("checkpoint config hash {} differs from the current {}", ck.config_hash, self.config_hash);
        }
        let state = ck.tracker_state(&self.state.device)?;
        let dtype = self.state.dtype;
        for (dst, src) in self.state.params().iter().zip(state.params()) {
            dst.var.set(&src.var.as_tensor().to_dtype(dtype)?)?;
        }
        self.state.set_running_stats(state.running_stats())?;
        let dev = self.state.device.clone();
        self.adam.step = ck.adam_step;
        self.adam.m = ck.adam_m.iter().map(|t| t.to_tensor(dtype, &dev)).collect::<Result<_>>()?;
        self.adam.v = ck.adam_v.iter().map(|t| t.to_tensor(dtype, &dev)).collect::<Result<_>>()?;
        self.rng = ck.rng.clone();
        self.iteration = ck.iteration;
        Ok(())
    }

    /// Trains until `cfg.iterations`, appending loss records to `log_path`
    /// and writing checkpoints under `ckpt_dir` every `checkpoint_every`
    /// iterations and at the end. Returns the final checkpoint path.
    pub fn run(&mut self, ckpt_dir: &Path, log_path: Option<&Path>) -> Result<PathBuf> {
        let mut log = match log_path {
            Some(p) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                }
                let f = std::fs::OpenOptions::new().create(true).append(true).open(p).map_err(|e| Error::io(p, e))?;
                Some((p.to_path_buf(), std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let mut last_good: Option<PathBuf> = None;
        while self.iteration < self.cfg.iterations {
            let report = match self.step() {
                Ok(r) => r,
                Err(Error::Numerical(msg)) => {
                    let path = ckpt_dir.join("last_good.bin");
                    self.checkpoint()?.save(&path)?;
                    return Err(Error::Numerical(format!("{msg}; last good state saved to {}", path.display())));
                }
                Err(e) => return Err(e),
            };
            if let Some((p, w)) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&report)?).map_err(|e| Error::io(p.clone(), e))?;
            }
            if report.iteration % 100 == 0 {
                log::info!("iteration {} total {:.6} flow {:.6}", report.iteration, report.total, report.terms.flow);
            }
            if self.iteration % self.cfg.checkpoint_every == 0 && self.iteration < self.cfg.iterations {
                let path = ckpt_dir.join(format!("ckpt_{:06}.bin", self.iteration));
                self.checkpoint()?.save(&path)?;
                last_good = Some(path);
            }
        }
        if let Some((p, w)) = log.as_mut() {
            w.flush().map_err(|e| Error::io(p.clone(), e))?;
        }
        let path = ckpt_dir.join("final.bin");
        self.checkpoint()?.save(&path)?;
        let _ = last_good;
        Ok(path)
    }
}

/// Uniform random integer in `0..n`; exposed for deterministic helpers.
pub fn draw(rng: &mut ChaCha8Rng, n: usize) -> usize {
    rng.gen_range(0..n)
}
