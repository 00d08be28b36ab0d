//! Optical-flow estimators and construction of the flow correspondence set.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use vidtrack_core::flow::{chain_tracklets, filter_long_range, ChainConfig, FlowCorrespondenceSet, FlowSource};
use vidtrack_core::{FlowField, PatchGrid, Point2};

use crate::backbone::ForegroundMask;
use crate::error::{Error, Result};
use crate::media::{config_hash, ArtifactCache, CacheKey, FrameSequence};

/// External dense optical flow `f_{source -> target}` at working resolution.
pub trait FlowEstimator: Send + Sync {
    /// Identifies the estimator for cache keys.
    fn id(&self) -> String;

    fn estimate(&self, seq: &FrameSequence, source: usize, target: usize) -> Result<FlowField>;
}

fn check_pair(seq: &FrameSequence, source: usize, target: usize) -> Result<()> {
    if source >= seq.len() || target >= seq.len() || source == target {
        return Err(Error::input(format!("invalid flow pair {source}->{target} for {} frames", seq.len())));
    }
    Ok(())
}

/// Parametric mock: every frame is translated by a per-frame global offset,
/// so `f_{i->j}` is the constant `offset[j] - offset[i]`.
#[derive(Clone, Debug)]
pub struct GlobalMotionFlow {
    pub offsets: Vec<Point2>,
}

impl GlobalMotionFlow {
    /// Constant per-frame velocity.
    pub fn constant_velocity(frames: usize, velocity: Point2) -> Self {
        Self { offsets: (0..frames).map(|t| velocity * t as f64).collect() }
    }
}

impl FlowEstimator for GlobalMotionFlow {
    fn id(&self) -> String {
        let flat: Vec<[f64; 2]> = self.offsets.iter().map(|p| [p.x, p.y]).collect();
        format!("global-{}", config_hash(&flat))
    }

    fn estimate(&self, seq: &FrameSequence, source: usize, target: usize) -> Result<FlowField> {
        check_pair(seq, source, target)?;
        if self.offsets.len() < seq.len() {
            return Err(Error::input("global motion model covers fewer frames than the video"));
        }
        let d = self.offsets[target] - self.offsets[source];
        Ok(FlowField::constant(source, target, seq.height(), seq.width(), d))
    }
}

const FLO_MAGIC: f32 = 202021.25;

/// Writes a Middlebury `.flo` file.
pub fn write_flo(path: &Path, flow: &FlowField) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let mut bytes = Vec::with_capacity(12 + flow.data.len() * 4);
    bytes.extend(FLO_MAGIC.to_le_bytes());
    bytes.extend((flow.width as i32).to_le_bytes());
    bytes.extend((flow.height as i32).to_le_bytes());
    for v in &flow.data {
        bytes.extend(v.to_le_bytes());
    }
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads a Middlebury `.flo` file.
pub fn read_flo(path: &Path, source: usize, target: usize) -> Result<FlowField> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::Decode { path: path.to_path_buf(), msg: m.into() };
    if bytes.len() < 12 || f32::from_le_bytes(bytes[0..4].try_into().unwrap()) != FLO_MAGIC {
        return Err(bad("not a .flo file"));
    }
    let w = i32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let h = i32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if w <= 0 || h <= 0 || bytes.len() != 12 + (w as usize) * (h as usize) * 8 {
        return Err(bad("inconsistent .flo dimensions"));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(FlowField::new(source, target, h as usize, w as usize, data)?)
}

/// Adapter for a pretrained flow network run offline: reads
/// `<dir>/<source>_<target>.flo` (zero-padded to 5 digits) and rescales the
/// field to working resolution when needed.
#[derive(Clone, Debug)]
pub struct FloDirectory {
    pub dir: PathBuf,
}

impl FloDirectory {
    pub fn path_for(&self, source: usize, target: usize) -> PathBuf {
        self.dir.join(format!("{source:05}_{target:05}.flo"))
    }
}

/// Bilinear resize of a flow field, scaling the displacements with the axes.
pub fn resize_flow(f: &FlowField, height: usize, width: usize) -> FlowField {
    if (f.height, f.width) == (height, width) {
        return f.clone();
    }
    let sx = f.width as f64 / width as f64;
    let sy = f.height as f64 / height as f64;
    FlowField::from_fn(f.source, f.target, height, width, |x, y| {
        let p = Point2::new(
            ((x + 0.5) * sx - 0.5).clamp(0.0, (f.width - 1) as f64),
            ((y + 0.5) * sy - 0.5).clamp(0.0, (f.height - 1) as f64),
        );
        let d = f.sample(p).unwrap_or_default();
        Point2::new(d.x / sx, d.y / sy)
    })
}

impl FlowEstimator for FloDirectory {
    fn id(&self) -> String {
        format!("flo-{}", self.dir.display())
    }

    fn estimate(&self, seq: &FrameSequence, source: usize, target: usize) -> Result<FlowField> {
        check_pair(seq, source, target)?;
        let path = self.path_for(source, target);
        if !path.is_file() {
            return Err(Error::Dependency(format!(
                "flow {} is missing; export the flow network's output there or run with --mock",
                path.display()
            )));
        }
        Ok(resize_flow(&read_flo(&path, source, target)?, seq.height(), seq.width()))
    }
}

/// Fetches flows through the artifact cache when one is configured.
pub struct CachedFlows<'a> {
    pub seq: &'a FrameSequence,
    pub estimator: &'a dyn FlowEstimator,
    pub cache: Option<&'a ArtifactCache>,
    content: u64,
}

#[derive(Serialize)]
struct FlowKey<'a> {
    estimator: &'a str,
    content: u64,
    source: usize,
    target: usize,
}

#[derive(serde::Serialize, serde::Deserialize)]
struct StoredFlow {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl<'a> CachedFlows<'a> {
    pub fn new(seq: &'a FrameSequence, estimator: &'a dyn FlowEstimator, cache: Option<&'a ArtifactCache>) -> Self {
        Self { seq, estimator, cache, content: seq.content_hash() }
    }

    pub fn get(&self, source: usize, target: usize) -> Result<FlowField> {
        let Some(cache) = self.cache else {
            return self.estimator.estimate(self.seq, source, target);
        };
        let id = self.estimator.id();
        let key = CacheKey::new(
            self.seq.video_id(),
            "flow",
            config_hash(&FlowKey { estimator: &id, content: self.content, source, target }),
        );
        let stored = cache.get_or_compute(&key, || {
            let f = self.estimator.estimate(self.seq, source, target)?;
            Ok(StoredFlow { height: f.height, width: f.width, data: f.data })
        })?;
        Ok(FlowField::new(source, target, stored.height, stored.width, stored.data)?)
    }
}

/// Direct flows between local frame indices of a frame subset, fetched on
/// demand; each field is dropped as soon as the filter moves past it.
struct DirectFlows<'a, 'b> {
    flows: &'b CachedFlows<'a>,
    frames: &'b [usize],
    memo: HashMap<(usize, usize), Arc<FlowField>>,
    error: Option<Error>,
}

impl FlowSource for DirectFlows<'_, '_> {
    fn flow(&mut self, source: usize, target: usize) -> vidtrack_core::Result<Arc<FlowField>> {
        self.memo.retain(|&(s, t), _| s.min(t) >= source.min(target));
        if let Some(f) = self.memo.get(&(source, target)) {
            return Ok(f.clone());
        }
        let f = self.flows.get(self.frames[source], self.frames[target]).map_err(|e| {
            let msg = e.to_string();
            self.error = Some(e);
            vidtrack_core::Error::Precondition(msg)
        })?;
        let f = Arc::new(f);
        self.memo.insert((source, target), f.clone());
        Ok(f)
    }
}

/// Chains consecutive flows over `frames` (ascending video indices), filters
/// with direct flows and tags each pair as foreground by its source cell.
/// Frame indices in the result are video indices.
pub fn build_flow_supervision(
    flows: &CachedFlows<'_>,
    frames: &[usize],
    cfg: &ChainConfig,
    masks: Option<(&[ForegroundMask], &PatchGrid)>,
) -> Result<FlowCorrespondenceSet> {
    cfg.validate()?;
    if frames.len() < 2 {
        return Ok(FlowCorrespondenceSet::default());
    }
    let steps: Vec<(usize, usize)> = frames.windows(2).map(|w| (w[0], w[1])).collect();
    let forward = steps.par_iter().map(|&(a, b)| flows.get(a, b)).collect::<Result<Vec<_>>>()?;
    let backward = steps.par_iter().map(|&(a, b)| flows.get(b, a)).collect::<Result<Vec<_>>>()?;
    let tracklets = chain_tracklets(&forward, &backward, cfg)?;
    drop((forward, backward));
    let mut direct = DirectFlows { flows, frames, memo: HashMap::new(), error: None };
    let mut set = match filter_long_range(&tracklets, &mut direct, cfg) {
        Ok(s) => s,
        Err(e) => return Err(direct.error.take().unwrap_or(e.into())),
    };
    for p in &mut set.pairs {
        p.source = frames[p.source as usize] as u32;
        p.target = frames[p.target as usize] as u32;
        if let Some((masks, grid)) = masks {
            p.foreground = masks[p.source as usize].get(grid.nearest_cell(p.from_point()));
        }
    }
    log::info!("flow supervision: {} tracklets, {} pairs", tracklets.len(), set.len());
    Ok(set)
}
