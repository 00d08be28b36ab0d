//! Frozen backbone features on the patch grid and foreground masks.

mod vit;


use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use vidtrack_core::checksum::Fnv1a;
use vidtrack_core::stats::otsu_threshold;
use vidtrack_core::{FeatureGrid, Image, PatchGrid};

use crate::error::{Error, Result};
use crate::media::FrameSequence;

pub use vit::{write_random_vit, VitBackbone, VitOptions};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Facet {
    #[default]
    Tokens,
    Queries,
    Keys,
    Values,
}

impl std::str::FromStr for Facet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(Facet::Tokens),
            "queries" => Ok(Facet::Queries),
            "keys" => Ok(Facet::Keys),
            "values" => Ok(Facet::Values),
            _ => Err(Error::input(format!("unknown facet {s:?}; expected tokens, queries, keys or values"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// 1-based transformer block whose output is read.
    pub layer: usize,
    pub facet: Facet,
    pub stride: usize,
    pub patch_size: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { layer: 16, facet: Facet::Tokens, stride: 7, patch_size: 14 }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.patch_size == 0 || self.patch_size % self.stride != 0 {
            return Err(Error::input("stride must be positive and divide patch_size"));
        }
        if self.layer == 0 {
            return Err(Error::input("backbone layer is 1-based"));
        }
        Ok(())
    }

    pub fn grid_for(&self, height: usize, width: usize) -> Result<PatchGrid> {
        Ok(PatchGrid::for_image(height, width, self.stride, self.patch_size)?)
    }
}

/// Backbone descriptors for one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub frame_index: usize,
    pub grid: PatchGrid,
    pub features: FeatureGrid,
}

/// Frozen feature extractor.
pub trait Backbone: Send + Sync {
    /// Identifies weights and architecture for cache keys.
    fn id(&self) -> String;

    fn dim(&self) -> usize;

    fn extract(&self, frame: &Image, frame_index: usize, cfg: &BackboneConfig) -> Result<FeatureMap>;

    /// Per-cell saliency on the same grid as `extract`.
    fn saliency(&self, frame: &Image, cfg: &BackboneConfig) -> Result<Vec<f64>>;

    /// Checksum of all parameters; unchanged by every operation.
    fn parameter_checksum(&self) -> u64;
}

/// Seeded stand-in backbone: a fixed random projection of each centred
/// `patch_size x patch_size` RGB patch. Saliency is the patch's mean
/// brightness. Layer and facet are ignored.
#[derive(Clone, Debug)]
pub struct MockBackbone {
    seed: u64,
    dim: usize,
    patch_size: usize,
    projection: Vec<f32>,
}

impl MockBackbone {
    pub fn new(seed: u64, dim: usize, patch_size: usize) -> Self {
        let fan_in = patch_size * patch_size * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (fan_in as f64).sqrt();
        let projection = (0..dim * fan_in)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                (z * scale) as f32
            })
            .collect();
        Self { seed, dim, patch_size, projection }
    }

    fn check(&self, frame: &Image, cfg: &BackboneConfig) -> Result<PatchGrid> {
        cfg.validate()?;
        if cfg.patch_size != self.patch_size {
            return Err(Error::input(format!(
                "mock backbone was built for {}px patches, config asks for {}",
                self.patch_size, cfg.patch_size
            )));
        }
        if frame.channels != 3 {
            return Err(Error::input("backbone expects RGB frames"));
        }
        cfg.grid_for(frame.height, frame.width)
    }

    fn patch(&self, frame: &Image, grid: &PatchGrid, row: usize, col: usize, out: &mut Vec<f32>) {
        out.clear();
        let (y0, x0) = (row * grid.stride, col * grid.stride);
        for y in y0..y0 + self.patch_size {
            for x in x0..x0 + self.patch_size {
                out.extend(frame.pixel(y, x).iter().map(|v| v - 0.5));
            }
        }
    }
}

impl Backbone for MockBackbone {
    fn id(&self) -> String {
        format!("mock-{}-{}-{}", self.seed, self.dim, self.patch_size)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &Image, frame_index: usize, cfg: &BackboneConfig) -> Result<FeatureMap> {
        let grid = self.check(frame, cfg)?;
        let fan_in = self.patch_size * self.patch_size * 3;
        let rows: Vec<Vec<f32>> = (0..grid.rows)
            .into_par_iter()
            .map(|r| {
                let mut patch = Vec::with_capacity(fan_in);
                let mut out = Vec::with_capacity(grid.cols * self.dim);
                for c in 0..grid.cols {
                    self.patch(frame, &grid, r, c, &mut patch);
                    for w in self.projection.chunks_exact(fan_in) {
                        out.push(w.iter().zip(&patch).map(|(a, b)| a * b).sum());
                    }
                }
                out
            })
            .collect();
        let features = FeatureGrid::new(grid.rows, grid.cols, self.dim, rows.concat())?;
        Ok(FeatureMap { frame_index, grid, features })
    }

    fn saliency(&self, frame: &Image, cfg: &BackboneConfig) -> Result<Vec<f64>> {
        let grid = self.check(frame, cfg)?;
        let mut patch = Vec::new();
        Ok((0..grid.len())
            .map(|k| {
                let (r, c) = grid.row_col(k);
                self.patch(frame, &grid, r, c, &mut patch);
                patch.iter().map(|&v| v as f64 + 0.5).sum::<f64>() / patch.len() as f64
            })
            .collect())
    }

    fn parameter_checksum(&self) -> u64 {
        let mut h = Fnv1a::new();
        for v in &self.projection {
            h.update(&v.to_le_bytes());
        }
        h.finish()
    }
}

/// Extracts features for every frame (in parallel, deterministic).
pub fn extract_all(backbone: &dyn Backbone, seq: &FrameSequence, cfg: &BackboneConfig) -> Result<Vec<FeatureMap>> {
    seq.frames.par_iter().enumerate().map(|(k, f)| backbone.extract(f, k, cfg)).collect()
}

/// Boolean foreground flags on a feature grid.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForegroundMask {
    pub rows: usize,
    pub cols: usize,
    pub mask: Vec<bool>,
}

impl ForegroundMask {
    pub fn all(grid: &PatchGrid, value: bool) -> Self {
        Self { rows: grid.rows, cols: grid.cols, mask: vec![value; grid.len()] }
    }

    pub fn get(&self, cell: usize) -> bool {
        self.mask[cell]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Otsu-thresholded saliency; an empty or degenerate result becomes all-true.
pub fn mask_from_saliency(saliency: &[f64], grid: &PatchGrid) -> ForegroundMask {
    let mask: Vec<bool> = match otsu_threshold(saliency) {
        Some(t) => saliency.iter().map(|&s| s > t).collect(),
        None => vec![false; saliency.len()],
    };
    if !mask.iter().any(|&m| m) {
        log::warn!("saliency found no foreground; treating the whole frame as foreground");
        return ForegroundMask::all(grid, true);
    }
    ForegroundMask { rows: grid.rows, cols: grid.cols, mask }
}

/// Nearest-neighbour resampling of a binary mask image onto the grid.
pub fn mask_from_image(mask: &image::GrayImage, grid: &PatchGrid, height: usize, width: usize) -> ForegroundMask {
    let (mw, mh) = mask.dimensions();
    let flags = grid
        .centers()
        .map(|p| {
            let x = (((p.x + 0.5) * mw as f64 / width as f64) as u32).min(mw - 1);
            let y = (((p.y + 0.5) * mh as f64 / height as f64) as u32).min(mh - 1);
            mask.get_pixel(x, y).0[0] >= 128
        })
        .collect();
    ForegroundMask { rows: grid.rows, cols: grid.cols, mask: flags }
}

/// Per-frame masks: user-provided images from `user_dir` when given (one per
/// frame, sorted by name), otherwise backbone saliency.
pub fn compute_foreground_masks(
    seq: &FrameSequence,
    backbone: &dyn Backbone,
    cfg: &BackboneConfig,
    user_dir: Option<&Path>,
) -> Result<Vec<ForegroundMask>> {
    let grid = cfg.grid_for(seq.height(), seq.width())?;
    if let Some(dir) = user_dir {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        if files.len() != seq.len() {
            return Err(Error::input(format!(
                "mask directory {} holds {} files for {} frames",
                dir.display(),
                files.len(),
                seq.len()
            )));
        }
        return files
            .iter()
            .map(|f| {
                let im = image::open(f)
                    .map_err(|e| Error::Decode { path: f.clone(), msg: e.to_string() })?
                    .into_luma8();
                Ok(mask_from_image(&im, &grid, seq.height(), seq.width()))
            })
            .collect();
    }
    seq.frames
        .par_iter()
        .map(|f| Ok(mask_from_saliency(&backbone.saliency(f, cfg)?, &grid)))
        .collect()
}
