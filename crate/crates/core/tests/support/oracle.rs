//! Brute-force reference implementations used as test oracles.
//!
//! These deliberately avoid the production code paths: no spatial hashing,
//! no single-pass neighbour bookkeeping, plain tuples instead of the crate's
//! geometry types. Floating-point operations are written in the same order
//! as the production formulas so results can be compared exactly.

#![allow(dead_code)]

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtrack_core::raster::{FeatureGrid, FlowField};

pub type P = (f64, f64);

fn dist(a: P, b: P) -> f64 {
    let (dx, dy) = (a.0 - b.0, a.1 - b.1);
    (dx * dx + dy * dy).sqrt()
}

/// Bilinear lookup of a two-channel field; `None` outside the pixel hull.
pub fn bilinear(f: &FlowField, p: P) -> Option<P> {
    let (w, h) = (f.width, f.height);
    if !(p.0.is_finite() && p.1.is_finite()) || p.0 < 0.0 || p.1 < 0.0 {
        return None;
    }
    if p.0 > (w - 1) as f64 || p.1 > (h - 1) as f64 {
        return None;
    }
    let (x0, y0) = (p.0.floor() as usize, p.1.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (p.0 - x0 as f64, p.1 - y0 as f64);
    let v = |r: usize, c: usize, k: usize| f.data[(r * w + c) * 2 + k] as f64;
    let mut out = [0.0; 2];
    for k in 0..2 {
        let top = (1.0 - fx) * v(y0, x0, k) + fx * v(y0, x1, k);
        let bot = (1.0 - fx) * v(y1, x0, k) + fx * v(y1, x1, k);
        out[k] = (1.0 - fy) * top + fy * bot;
    }
    Some((out[0], out[1]))
}

fn advect(f: &FlowField, p: P) -> Option<P> {
    bilinear(f, p).map(|d| (p.0 + d.0, p.1 + d.1))
}

fn inside(f: &FlowField, p: P) -> bool {
    p.0 >= 0.0 && p.1 >= 0.0 && p.0 <= (f.width - 1) as f64 && p.1 <= (f.height - 1) as f64
}

/// Reference tracklets as `(start, points)`, in creation order.
pub fn chain(fwd: &[FlowField], bwd: &[FlowField], gamma: f64, seed_stride: usize) -> Vec<(usize, Vec<P>)> {
    let frames = fwd.len() + 1;
    let (h, w) = (fwd[0].height, fwd[0].width);
    let mut all: Vec<(usize, Vec<P>, bool)> = Vec::new(); // (start, pts, alive)
    for t in 0..frames {
        if t > 0 {
            for tr in all.iter_mut().filter(|tr| tr.2) {
                let prev = *tr.1.last().unwrap();
                let step = advect(&fwd[t - 1], prev)
                    .filter(|n| inside(&fwd[t - 1], *n))
                    .and_then(|n| advect(&bwd[t - 1], n).map(|b| (n, dist(prev, b))));
                match step {
                    Some((n, e)) if e < gamma => tr.1.push(n),
                    _ => tr.2 = false,
                }
            }
        }
        let heads: Vec<P> = all.iter().filter(|tr| tr.2).map(|tr| *tr.1.last().unwrap()).collect();
        for y in (0..h).step_by(seed_stride) {
            for x in (0..w).step_by(seed_stride) {
                let p = (x as f64, y as f64);
                if !heads.iter().any(|q| dist(*q, p) <= seed_stride as f64 / 2.0) {
                    all.push((t, vec![p], true));
                }
            }
        }
    }
    all.into_iter().filter(|tr| tr.1.len() >= 2).map(|(s, p, _)| (s, p)).collect()
}

/// Reference long-range filtering: `(i, j, x_i, x_j)` in tracklet order.
pub fn pairs(
    tracklets: &[(usize, Vec<P>)],
    direct: &HashMap<(usize, usize), FlowField>,
    gamma_of: f64,
    gamma_lng: f64,
    k_max: usize,
) -> Vec<(usize, usize, P, P)> {
    let mut out = Vec::new();
    for (start, pts) in tracklets {
        for a in 0..pts.len() {
            for b in (a + 1)..pts.len() {
                let (i, j) = (start + a, start + b);
                let (xi, xj) = (pts[a], pts[b]);
                let mut drop = false;
                if j - i <= k_max {
                    if let Some(d) = advect(&direct[&(i, j)], xi) {
                        if dist(xj, d) >= gamma_lng {
                            if let Some(back) = advect(&direct[&(j, i)], d) {
                                drop = dist(xi, back) <= gamma_of;
                            }
                        }
                    }
                }
                if !drop {
                    out.push((i, j, xi, xj));
                }
            }
        }
    }
    out
}

/// Random smooth flow fields over `frames` frames: consecutive forward and
/// backward flows plus all direct flows with gap `<= k_max`. Backward and
/// direct flows carry independent perturbations so that some steps fail the
/// cycle check and some long-range pairs drift.
pub struct SyntheticFlows {
    pub forward: Vec<FlowField>,
    pub backward: Vec<FlowField>,
    pub direct: HashMap<(usize, usize), FlowField>,
}

fn smooth_field(rng: &mut ChaCha8Rng, s: usize, t: usize, h: usize, w: usize, base: (f64, f64), amp: f64) -> FlowField {
    let terms: Vec<[f64; 6]> = (0..3)
        .map(|_| {
            [
                rng.gen_range(-0.3..0.3),
                rng.gen_range(-0.3..0.3),
                rng.gen_range(0.0..6.3),
                rng.gen_range(-amp..=amp),
                rng.gen_range(-amp..=amp),
                0.0,
            ]
        })
        .collect();
    FlowField::from_fn(s, t, h, w, |x, y| {
        let mut d = (base.0, base.1);
        for k in &terms {
            let ph = (k[0] * x + k[1] * y + k[2]).sin();
            d.0 += k[3] * ph;
            d.1 += k[4] * ph;
        }
        vidtrack_core::Point2::new(d.0, d.1)
    })
}

impl SyntheticFlows {
    pub fn generate(seed: u64, frames: usize, h: usize, w: usize, k_max: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vel: Vec<(f64, f64)> = (0..frames).map(|_| (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
        let mut forward = Vec::new();
        let mut backward = Vec::new();
        for t in 0..frames - 1 {
            forward.push(smooth_field(&mut rng, t, t + 1, h, w, vel[t], 0.6));
            let noise = rng.gen_range(0.2..1.2);
            backward.push(smooth_field(&mut rng, t + 1, t, h, w, (-vel[t].0, -vel[t].1), noise));
        }
        let mut direct = HashMap::new();
        for i in 0..frames {
            for j in 0..frames {
                if i == j || i.abs_diff(j) > k_max {
                    continue;
                }
                let (lo, hi) = (i.min(j), i.max(j));
                let mut total = (0.0, 0.0);
                for v in &vel[lo..hi] {
                    total.0 += v.0;
                    total.1 += v.1;
                }
                let sign = if i < j { 1.0 } else { -1.0 };
                let amp = rng.gen_range(0.3..2.5);
                direct.insert((i, j), smooth_field(&mut rng, i, j, h, w, (sign * total.0, sign * total.1), amp));
            }
        }
        for t in 0..frames - 1 {
            direct.insert((t, t + 1), forward[t].clone());
            direct.insert((t + 1, t), backward[t].clone());
        }
        Self { forward, backward, direct }
    }
}

/// Reference best buddies by exhaustive search from both sides.
pub fn best_buddies(a: &FeatureGrid, b: &FeatureGrid) -> Vec<(usize, usize)> {
    fn norm(v: &[f32]) -> f64 {
        let mut s = 0.0f64;
        for &x in v {
            s += x as f64 * x as f64;
        }
        s.sqrt()
    }
    fn cos(u: &[f32], v: &[f32]) -> f64 {
        let (nu, nv) = (norm(u), norm(v));
        if nu == 0.0 || nv == 0.0 {
            return 0.0;
        }
        let mut d = 0.0f64;
        for (&x, &y) in u.iter().zip(v) {
            d += x as f64 * y as f64;
        }
        d / (nu * nv)
    }
    fn nn(q: &[f32], g: &FeatureGrid) -> usize {
        let mut best = 0;
        let mut bs = f64::NEG_INFINITY;
        for k in 0..g.len() {
            let s = cos(q, g.cell(k));
            if s > bs {
                bs = s;
                best = k;
            }
        }
        best
    }
    (0..a.len())
        .filter_map(|ia| {
            let ib = nn(a.cell(ia), b);
            (nn(b.cell(ib), a) == ia).then_some((ia, ib))
        })
        .collect()
}

/// Random grid pair where `b` is a noisy, partially shuffled copy of `a`.
pub fn random_grids(seed: u64) -> (FeatureGrid, FeatureGrid) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (ra, ca) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
    let (rb, cb) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
    let dim = rng.gen_range(2..=24);
    let a: Vec<f32> = (0..ra * ca * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut b = Vec::with_capacity(rb * cb * dim);
    for _ in 0..rb * cb {
        if rng.gen_bool(0.7) {
            let src = rng.gen_range(0..ra * ca);
            for k in 0..dim {
                b.push(a[src * dim + k] + rng.gen_range(-0.2..0.2));
            }
        } else {
            for _ in 0..dim {
                b.push(rng.gen_range(-1.0..1.0));
            }
        }
    }
    (FeatureGrid::new(ra, ca, dim, a).unwrap(), FeatureGrid::new(rb, cb, dim, b).unwrap())
}
