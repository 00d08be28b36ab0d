//! Procedural test videos with exact motion: a textured square sprite
//! translating over a static textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vidtrack_core::{FlowField, Image, Point2};

use crate::error::Result;
use crate::eval::{GroundTruthTrack, GroundTruthVideo};
use crate::flowsup::FlowEstimator;
use crate::media::{config_hash, FrameSequence};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub sprite_size: usize,
    /// Pixels per frame; integer so sprite coverage is exact.
    pub velocity: (i32, i32),
    /// Sprite top-left on frame 0.
    pub start: (i32, i32),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { frames: 24, height: 128, width: 128, sprite_size: 32, velocity: (3, 1), start: (12, 40), seed: 0 }
    }
}

/// Smooth value noise on a periodic lattice, three channels.
#[derive(Clone, Debug)]
struct ValueNoise {
    cell: f64,
    side: usize,
    lattice: Vec<[f32; 3]>,
    lo: f32,
    hi: f32,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cell: f64, side: usize, lo: f32, hi: f32) -> Self {
        let lattice = (0..side * side).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        Self { cell, side, lattice, lo, hi }
    }

    fn sample(&self, x: f64, y: f64) -> [f32; 3] {
        let (u, v) = (x / self.cell, y / self.cell);
        let (i, j) = (u.floor(), v.floor());
        let smooth = |f: f64| (f * f * (3.0 - 2.0 * f)) as f32;
        let (fx, fy) = (smooth(u - i), smooth(v - j));
        let wrap = |k: f64| k.rem_euclid(self.side as f64) as usize;
        let at = |di: f64, dj: f64| self.lattice[wrap(j + dj) * self.side + wrap(i + di)];
        let (a, b, c, d) = (at(0.0, 0.0), at(1.0, 0.0), at(0.0, 1.0), at(1.0, 1.0));
        let mut out = [0.0f32; 3];
        for k in 0..3 {
            let top = a[k] + (b[k] - a[k]) * fx;
            let bottom = c[k] + (d[k] - c[k]) * fx;
            out[k] = self.lo + (self.hi - self.lo) * (top + (bottom - top) * fy);
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub cfg: SceneConfig,
    background: [ValueNoise; 2],
    sprite: [ValueNoise; 2],
}

impl SyntheticScene {
    pub fn new(cfg: SceneConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let background = [ValueNoise::new(&mut rng, 11.0, 32, 0.05, 0.75), ValueNoise::new(&mut rng, 4.0, 64, 0.0, 0.25)];
        let sprite = [ValueNoise::new(&mut rng, 6.0, 16, 0.2, 0.9), ValueNoise::new(&mut rng, 2.5, 16, 0.0, 0.3)];
        Self { cfg, background, sprite }
    }

    pub fn sprite_origin(&self, t: usize) -> Point2 {
        let (vx, vy) = self.cfg.velocity;
        let (sx, sy) = self.cfg.start;
        Point2::new((sx + vx * t as i32) as f64, (sy + vy * t as i32) as f64)
    }

    pub fn velocity(&self) -> Point2 {
        Point2::new(self.cfg.velocity.0 as f64, self.cfg.velocity.1 as f64)
    }

    /// Whether the point lies on the sprite on frame `t`; a pixel `(x, y)`
    /// covers `[x - 0.5, x + 0.5)`.
    pub fn in_sprite(&self, t: usize, p: Point2) -> bool {
        let o = self.sprite_origin(t);
        let s = self.cfg.sprite_size as f64;
        p.x >= o.x - 0.5 && p.x < o.x + s - 0.5 && p.y >= o.y - 0.5 && p.y < o.y + s - 0.5
    }

    fn color(&self, t: usize, x: f64, y: f64) -> [f32; 3] {
        let layers = if self.in_sprite(t, Point2::new(x, y)) {
            let o = self.sprite_origin(t);
            (&self.sprite, x - o.x, y - o.y)
        } else {
            (&self.background, x, y)
        };
        let (a, b) = (layers.0[0].sample(layers.1, layers.2), layers.0[1].sample(layers.1, layers.2));
        [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
    }

    pub fn render(&self) -> Result<FrameSequence> {
        let (h, w) = (self.cfg.height, self.cfg.width);
        let frames = (0..self.cfg.frames)
            .map(|t| {
                let mut data = Vec::with_capacity(h * w * 3);
                for y in 0..h {
                    for x in 0..w {
                        data.extend(self.color(t, x as f64, y as f64));
                    }
                }
                Ok(Image::new(h, w, 3, data)?)
            })
            .collect::<Result<Vec<_>>>()?;
        FrameSequence::new(frames, format!("synthetic-{}", self.cfg.seed), (h, w))
    }

    /// Exact displacement of every pixel of `source` on `target`.
    pub fn flow(&self, source: usize, target: usize) -> FlowField {
        let d = self.velocity().scale((target as f64) - (source as f64), (target as f64) - (source as f64));
        FlowField::from_fn(source, target, self.cfg.height, self.cfg.width, |x, y| {
            if self.in_sprite(source, Point2::new(x, y)) {
                d
            } else {
                Point2::default()
            }
        })
    }

    /// `n_sprite` points riding the sprite and `n_background` static points,
    /// half of which lie on the sprite's path and are occluded part of the
    /// time. All points stay at least `margin` pixels inside the frame.
    pub fn ground_truth(&self, n_sprite: usize, n_background: usize, margin: f64, seed: u64) -> GroundTruthVideo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = self.cfg.frames;
        let s = self.cfg.sprite_size as f64;
        let v = self.velocity();
        let (w, h) = (self.cfg.width as f64, self.cfg.height as f64);
        let inside = |p: Point2| p.x >= margin && p.x <= w - 1.0 - margin && p.y >= margin && p.y <= h - 1.0 - margin;
        let mut tracks = Vec::new();
        while tracks.len() < n_sprite {
            let p0 = self.sprite_origin(0) + Point2::new(rng.gen_range(3.0..s - 4.0), rng.gen_range(3.0..s - 4.0));
            let positions: Vec<Point2> = (0..t).map(|k| p0 + v.scale(k as f64, k as f64)).collect();
            if positions.iter().all(|&p| inside(p)) {
                tracks.push(GroundTruthTrack { positions, visible: vec![true; t], area: None });
            }
        }
        let mut placed = 0;
        while placed < n_background {
            let p = if placed % 2 == 0 {
                let k = rng.gen_range(0..t);
                self.sprite_origin(k) + Point2::new(rng.gen_range(2.0..s - 3.0), rng.gen_range(2.0..s - 3.0))
            } else {
                Point2::new(rng.gen_range(margin..w - 1.0 - margin), rng.gen_range(margin..h - 1.0 - margin))
            };
            let visible: Vec<bool> = (0..t).map(|k| !self.in_sprite(k, p)).collect();
            let near_edge = (0..t).any(|k| {
                let o = self.sprite_origin(k);
                let dx = (p.x - (o.x - 0.5)).abs().min((p.x - (o.x + s - 0.5)).abs());
                let dy = (p.y - (o.y - 0.5)).abs().min((p.y - (o.y + s - 0.5)).abs());
                let within_x = p.x > o.x - 3.0 && p.x < o.x + s + 2.0;
                let within_y = p.y > o.y - 3.0 && p.y < o.y + s + 2.0;
                (within_y && dx < 1.0) || (within_x && dy < 1.0)
            });
            if inside(p) && visible.iter().filter(|&&b| b).count() >= 2 && !near_edge {
                tracks.push(GroundTruthTrack { positions: vec![p; t], visible, area: None });
                placed += 1;
            }
        }
        GroundTruthVideo { video_id: format!("synthetic-{}", self.cfg.seed), height: self.cfg.height, width: self.cfg.width, tracks }
    }
}

/// Flow oracle built from the scene's layer motion.
pub struct LayeredFlow {
    pub scene: SyntheticScene,
}

impl FlowEstimator for LayeredFlow {
    fn id(&self) -> String {
        format!("layered-{}", config_hash(&self.scene.cfg))
    }

    fn estimate(&self, _seq: &FrameSequence, source: usize, target: usize) -> Result<FlowField> {
        Ok(self.scene.flow(source, target))
    }
}
