//! Stage orchestration shared by the CLI and tests: preprocessing with
//! cached artifacts, training and tracking.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::Serialize;
use vidtrack_core::PatchGrid;

use crate::backbone::{compute_foreground_masks, extract_all, Backbone, FeatureMap, ForegroundMask, MockBackbone, VitBackbone, VitOptions};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flowsup::{build_flow_supervision, CachedFlows, FloDirectory, FlowEstimator, GlobalMotionFlow};
use crate::media::{config_hash, load_video, ArtifactCache, CacheKey, FrameSequence, TrajectoryRecord};
use crate::miner::mine_dino_buddies;
use crate::occlusion::{to_records, track_queries, Query};
use crate::tracker::{HeatmapMode, Tracker, TrackerState, VideoTensors};
use crate::trainer::{Checkpoint, Supervision, Trainer};

/// Outputs of preprocessing for one video.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub grid: PatchGrid,
    pub maps: Vec<FeatureMap>,
    pub supervision: Supervision,
    /// Hash over every input that shaped the supervision.
    pub key: String,
}

pub struct Pipeline {
    pub cfg: RunConfig,
    pub cache: ArtifactCache,
}

#[derive(Serialize)]
struct FeatureKey<'a> {
    backbone: &'a str,
    cfg: &'a crate::backbone::BackboneConfig,
    content: u64,
}

impl Pipeline {
    pub fn new(cfg: RunConfig) -> Self {
        let cache = match &cfg.cache_dir {
            Some(dir) => ArtifactCache::new(dir),
            None => ArtifactCache::from_env_or(cfg.output.join("cache")),
        };
        Self { cfg, cache }
    }

    pub fn dtype(&self) -> DType {
        if self.cfg.double_precision {
            DType::F64
        } else {
            DType::F32
        }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.cfg.output.join("checkpoints")
    }

    pub fn load_video(&self) -> Result<FrameSequence> {
        let path = self.cfg.video.as_ref().ok_or_else(|| Error::input("no video given; set `video` or pass --video"))?;
        load_video(path, self.cfg.working_height)
    }

    pub fn backbone(&self) -> Result<Box<dyn Backbone>> {
        if self.cfg.mock {
            return Ok(Box::new(MockBackbone::new(self.cfg.seed, self.cfg.mock_dim, self.cfg.backbone.patch_size)));
        }
        let weights = self.cfg.backbone_weights.clone().ok_or_else(|| {
            Error::Dependency("no backbone weights configured; set backbone_weights to a safetensors file or run with --mock".into())
        })?;
        Ok(Box::new(VitBackbone::load(&VitOptions { weights, heads: self.cfg.backbone_heads })?))
    }

    pub fn flow_estimator(&self, seq: &FrameSequence) -> Result<Box<dyn FlowEstimator>> {
        if let Some(dir) = &self.cfg.flow_dir {
            return Ok(Box::new(FloDirectory { dir: dir.clone() }));
        }
        if self.cfg.mock {
            log::warn!("no flow directory given; the mock run assumes a static scene");
            return Ok(Box::new(GlobalMotionFlow::constant_velocity(seq.len(), Default::default())));
        }
        Err(Error::Dependency(
            "no optical flow configured; set flow_dir to a directory of .flo files from a flow network or run with --mock".into(),
        ))
    }

    /// Features, masks, flow supervision and backbone best buddies, each
    /// cached under its own hash so a change only invalidates what depends
    /// on it.
    pub fn preprocess_with(&self, seq: &FrameSequence, backbone: &dyn Backbone, flow: &dyn FlowEstimator) -> Result<Preprocessed> {
        let cfg = &self.cfg;
        let video = seq.video_id();
        let grid = cfg.backbone.grid_for(seq.height(), seq.width())?;
        let content = seq.content_hash();
        let bid = backbone.id();
        let feature_key = config_hash(&FeatureKey { backbone: &bid, cfg: &cfg.backbone, content });
        let maps: Vec<FeatureMap> =
            self.cache.get_or_compute(&CacheKey::new(&video, "features", &feature_key), || extract_all(backbone, seq, &cfg.backbone))?;
        let mask_key = config_hash(&(&feature_key, &cfg.masks_dir));
        let masks: Vec<ForegroundMask> = self.cache.get_or_compute(&CacheKey::new(&video, "masks", &mask_key), || {
            compute_foreground_masks(seq, backbone, &cfg.backbone, cfg.masks_dir.as_deref())
        })?;
        let frames = cfg.train.training_frames(seq.len());
        let flow_key = config_hash(&(flow.id(), content, &cfg.chain, &frames, &mask_key, &grid));
        let flows = CachedFlows::new(seq, flow, Some(&self.cache));
        let flow_set = self.cache.get_or_compute(&CacheKey::new(&video, "flow_supervision", &flow_key), || {
            build_flow_supervision(&flows, &frames, &cfg.chain, Some((&masks, &grid)))
        })?;
        let bb_key = config_hash(&(&feature_key, &flow_key, &cfg.miner));
        let dino_bb = self.cache.get_or_compute(&CacheKey::new(&video, "dino_bb", &bb_key), || {
            mine_dino_buddies(&maps, &frames, &masks, &flow_set, &grid, &cfg.miner)
        })?;
        Ok(Preprocessed { grid, maps, supervision: Supervision { flow: flow_set, dino_bb, masks }, key: bb_key })
    }

    pub fn preprocess(&self) -> Result<(FrameSequence, Preprocessed)> {
        let seq = self.load_video()?;
        let backbone = self.backbone()?;
        let flow = self.flow_estimator(&seq)?;
        let pre = self.preprocess_with(&seq, backbone.as_ref(), flow.as_ref())?;
        Ok((seq, pre))
    }

    pub fn video_tensors(&self, seq: &FrameSequence, pre: &Preprocessed) -> Result<VideoTensors> {
        VideoTensors::new(seq, &pre.maps, self.dtype(), &Device::Cpu)
    }

    fn training_hash(&self, pre: &Preprocessed) -> String {
        let c = &self.cfg;
        config_hash(&(&pre.key, &c.tracker, &c.train, &c.losses, &c.miner, c.double_precision))
    }

    /// Latest periodic checkpoint in `dir`, by iteration.
    pub fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
        let mut found: Vec<PathBuf> = std::fs::read_dir(dir)
            .ok()?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("ckpt_") && n.ends_with(".bin")))
            .collect();
        found.sort();
        found.pop()
    }

    /// Trains and returns the final checkpoint path. With `resume`, picks up
    /// from the latest periodic checkpoint when there is one.
    pub fn train_with(&self, seq: &FrameSequence, pre: &Preprocessed, resume: bool) -> Result<PathBuf> {
        let video = self.video_tensors(seq, pre)?;
        let dim = pre.maps[0].features.dim;
        let state = TrackerState::new(self.cfg.tracker.clone(), dim, self.dtype(), &Device::Cpu)?;
        let mut trainer = Trainer::new(
            self.cfg.train.clone(),
            self.cfg.losses,
            self.cfg.miner,
            state,
            &video,
            &pre.supervision,
            self.training_hash(pre),
        )?;
        let dir = self.checkpoint_dir();
        if resume {
            if let Some(path) = Self::latest_checkpoint(&dir) {
                log::info!("resuming from {}", path.display());
                trainer.restore(&Checkpoint::load(&path)?)?;
            }
        }
        trainer.run(&dir, Some(&self.cfg.output.join("loss_log.ndjson")))
    }

    /// Tracks queries given at original resolution. Without a checkpoint the
    /// untrained tracker is used.
    pub fn track_with(
        &self,
        seq: &FrameSequence,
        pre: &Preprocessed,
        checkpoint: Option<&Path>,
        queries: &[Query],
        visibility: bool,
    ) -> Result<Vec<TrajectoryRecord>> {
        let video = self.video_tensors(seq, pre)?;
        let state = match checkpoint {
            Some(p) => Checkpoint::load(p)?.tracker_state(&Device::Cpu)?,
            None => TrackerState::new(self.cfg.tracker.clone(), pre.maps[0].features.dim, self.dtype(), &Device::Cpu)?,
        };
        let tracker = Tracker::new(&state, &video, HeatmapMode::Refined)?;
        for q in queries {
            if q.frame >= seq.len() {
                return Err(Error::input(format!("query frame {} outside a {}-frame video", q.frame, seq.len())));
            }
        }
        let working: Vec<Query> = queries.iter().map(|q| Query { frame: q.frame, point: seq.to_working(q.point) }).collect();
        let trajectories = track_queries(&tracker, &working, visibility.then_some(&self.cfg.visibility))?;
        Ok(to_records(seq, &trajectories))
    }
}
