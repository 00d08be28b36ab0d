//! Pretrained ViT client (DINOv2-style architecture) running on candle.
//!
//! Weights are read from a safetensors file using the reference checkpoint
//! naming (`patch_embed.proj.*`, `cls_token`, `pos_embed`,
//! `blocks.{i}.{norm1,attn.qkv,attn.proj,ls1.gamma,norm2,mlp.fc1,mlp.fc2,ls2.gamma}`).
//! The patch projection runs at the configured stride, so overlapping patches
//! give a denser grid; positional embeddings are bilinearly resized to it.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use vidtrack_core::checksum::Fnv1a;
use vidtrack_core::{FeatureGrid, Image};

use super::{Backbone, BackboneConfig, Facet, FeatureMap};
use crate::error::{Error, Result};

const MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const STD: [f32; 3] = [0.229, 0.224, 0.225];
const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct VitOptions {
    pub weights: PathBuf,
    /// Attention heads; `None` uses 64-dimensional heads.
    pub heads: Option<usize>,
}

struct Block {
    norm1: (Tensor, Tensor),
    qkv: (Tensor, Tensor),
    proj: (Tensor, Tensor),
    ls1: Tensor,
    norm2: (Tensor, Tensor),
    fc1: (Tensor, Tensor),
    fc2: (Tensor, Tensor),
    ls2: Tensor,
}

pub struct VitBackbone {
    name: String,
    dim: usize,
    heads: usize,
    patch_size: usize,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    /// `(side, side, dim)` patch positional embeddings and the class one.
    pos_grid: Vec<f32>,
    pos_side: usize,
    pos_cls: Tensor,
    blocks: Vec<Block>,
    checksum: u64,
    device: Device,
}

fn take(map: &mut HashMap<String, Tensor>, key: &str) -> Result<Tensor> {
    map.remove(key)
        .ok_or_else(|| Error::Format(format!("backbone weights lack tensor {key:?}")))?
        .to_dtype(DType::F32)
        .map_err(Error::from)
}

fn layer_norm(x: &Tensor, (w, b): &(Tensor, Tensor)) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(w)?.broadcast_add(b)?)
}

fn linear(x: &Tensor, (w, b): &(Tensor, Tensor)) -> Result<Tensor> {
    Ok(x.broadcast_matmul(&w.t()?)?.broadcast_add(b)?)
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(D::Minus1)?;
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Bilinear (half-pixel) resize of a `(side, side, dim)` grid to `(rows, cols)`.
fn resize_grid(src: &[f32], side: usize, dim: usize, rows: usize, cols: usize) -> Vec<f32> {
    let coord = |i: usize, n: usize| -> (usize, usize, f32) {
        let x = ((i as f64 + 0.5) * side as f64 / n as f64 - 0.5).clamp(0.0, (side - 1) as f64);
        let x0 = x.floor() as usize;
        (x0, (x0 + 1).min(side - 1), (x - x0 as f64) as f32)
    };
    let mut out = vec![0.0f32; rows * cols * dim];
    for r in 0..rows {
        let (r0, r1, fr) = coord(r, rows);
        for c in 0..cols {
            let (c0, c1, fc) = coord(c, cols);
            let o = &mut out[(r * cols + c) * dim..(r * cols + c + 1) * dim];
            for (w, rr, cc) in [((1.0 - fr) * (1.0 - fc), r0, c0), ((1.0 - fr) * fc, r0, c1), (fr * (1.0 - fc), r1, c0), (fr * fc, r1, c1)] {
                let s = &src[(rr * side + cc) * dim..(rr * side + cc + 1) * dim];
                o.iter_mut().zip(s).for_each(|(a, b)| *a += w * b);
            }
        }
    }
    out
}

impl VitBackbone {
    pub fn load(opts: &VitOptions) -> Result<Self> {
        if !opts.weights.is_file() {
            return Err(Error::Dependency(format!(
                "backbone weights not found at {}; provide a safetensors checkpoint or run with --mock",
                opts.weights.display()
            )));
        }
        let device = Device::Cpu;
        let mut map = candle_core::safetensors::load(&opts.weights, &device)?;
        let mut names: Vec<&String> = map.keys().collect();
        names.sort();
        let mut h = Fnv1a::new();
        for n in names {
            h.update(n.as_bytes());
            let flat: Vec<f32> = map[n].to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for v in flat {
                h.update(&v.to_le_bytes());
            }
        }
        let checksum = h.finish();
        let patch_w = take(&mut map, "patch_embed.proj.weight")?;
        let (dim, _, patch_size, _) = patch_w.dims4()?;
        let patch_b = take(&mut map, "patch_embed.proj.bias")?;
        let cls = take(&mut map, "cls_token")?.reshape((1, 1, dim))?;
        let pos = take(&mut map, "pos_embed")?.reshape(((), dim))?;
        let n_pos = pos.dim(0)? - 1;
        let pos_side = (n_pos as f64).sqrt().round() as usize;
        if pos_side * pos_side != n_pos {
            return Err(Error::Format("positional embedding is not a square grid".into()));
        }
        let pos_cls = pos.narrow(0, 0, 1)?.reshape((1, 1, dim))?;
        let pos_grid: Vec<f32> = pos.narrow(0, 1, n_pos)?.flatten_all()?.to_vec1()?;
        let mut blocks = Vec::new();
        while map.contains_key(&format!("blocks.{}.norm1.weight", blocks.len())) {
            let p = |s: &str| format!("blocks.{}.{s}", blocks.len());
            let mut pair = |a: &str| -> Result<(Tensor, Tensor)> {
                Ok((take(&mut map, &p(&format!("{a}.weight")))?, take(&mut map, &p(&format!("{a}.bias")))?))
            };
            let norm1 = pair("norm1")?;
            let qkv = pair("attn.qkv")?;
            let proj = pair("attn.proj")?;
            let norm2 = pair("norm2")?;
            let fc1 = pair("mlp.fc1")?;
            let fc2 = pair("mlp.fc2")?;
            let ls1 = take(&mut map, &p("ls1.gamma"))?;
            let ls2 = take(&mut map, &p("ls2.gamma"))?;
            blocks.push(Block { norm1, qkv, proj, ls1, norm2, fc1, fc2, ls2 });
        }
        if blocks.is_empty() {
            return Err(Error::Format("backbone weights contain no transformer blocks".into()));
        }
        let heads = opts.heads.unwrap_or((dim / 64).max(1));
        if dim % heads != 0 {
            return Err(Error::input(format!("{heads} heads do not divide width {dim}")));
        }
        let name = format!(
            "vit-{}-{}x{}-{:016x}",
            opts.weights.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
            blocks.len(),
            dim,
            checksum
        );
        Ok(Self { name, dim, heads, patch_size, patch_w, patch_b, cls, pos_grid, pos_side, pos_cls, blocks, checksum, device })
    }

    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    fn embed(&self, frame: &Image, cfg: &BackboneConfig) -> Result<(Tensor, vidtrack_core::PatchGrid)> {
        cfg.validate()?;
        if cfg.patch_size != self.patch_size {
            return Err(Error::input(format!("weights use {}px patches, config asks for {}", self.patch_size, cfg.patch_size)));
        }
        if cfg.layer > self.blocks.len() {
            return Err(Error::input(format!("layer {} exceeds backbone depth {}", cfg.layer, self.blocks.len())));
        }
        let grid = cfg.grid_for(frame.height, frame.width)?;
        let (h, w) = (frame.height, frame.width);
        let mut chw = vec![0.0f32; 3 * h * w];
        for (k, px) in frame.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                chw[c * h * w + k] = (px[c] - MEAN[c]) / STD[c];
            }
        }
        let x = Tensor::from_vec(chw, (1, 3, h, w), &self.device)?;
        let x = x.conv2d(&self.patch_w, 0, cfg.stride, 1, 1)?.broadcast_add(&self.patch_b.reshape((1, self.dim, 1, 1))?)?;
        let tokens = x.flatten_from(2)?.transpose(1, 2)?;
        let pos = resize_grid(&self.pos_grid, self.pos_side, self.dim, grid.rows, grid.cols);
        let pos = Tensor::from_vec(pos, (1, grid.len(), self.dim), &self.device)?;
        let tokens = (tokens + pos)?;
        let cls = (&self.cls + &self.pos_cls)?;
        Ok((Tensor::cat(&[&cls, &tokens], 1)?, grid))
    }

    /// `(q, k, v)` as `(1, heads, n, head_dim)`.
    fn qkv(&self, block: &Block, x: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let n = x.dim(1)?;
        let hd = self.dim / self.heads;
        let qkv = linear(&layer_norm(x, &block.norm1)?, &block.qkv)?.reshape((1, n, 3, self.heads, hd))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        Ok((part(0)?, part(1)?, part(2)?))
    }

    /// Runs one block; also returns the attention probabilities.
    fn block(&self, block: &Block, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let n = x.dim(1)?;
        let hd = self.dim / self.heads;
        let (q, k, v) = self.qkv(block, x)?;
        let att = softmax_last(&(q.matmul(&k.t()?)? * (hd as f64).powf(-0.5))?)?;
        let y = att.matmul(&v)?.transpose(1, 2)?.reshape((1, n, self.dim))?;
        let y = linear(&y, &block.proj)?;
        let x = (x + y.broadcast_mul(&block.ls1)?)?;
        let hidden = linear(&layer_norm(&x, &block.norm2)?, &block.fc1)?.gelu_erf()?;
        let x = (&x + linear(&hidden, &block.fc2)?.broadcast_mul(&block.ls2)?)?;
        Ok((x, att))
    }
}

impl Backbone for VitBackbone {
    fn id(&self) -> String {
        self.name.clone()
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn extract(&self, frame: &Image, frame_index: usize, cfg: &BackboneConfig) -> Result<FeatureMap> {
        let (mut x, grid) = self.embed(frame, cfg)?;
        for block in &self.blocks[..cfg.layer - 1] {
            x = self.block(block, &x)?.0;
        }
        let last = &self.blocks[cfg.layer - 1];
        let out = match cfg.facet {
            Facet::Tokens => self.block(last, &x)?.0,
            facet => {
                let (q, k, v) = self.qkv(last, &x)?;
                let t = match facet {
                    Facet::Queries => q,
                    Facet::Keys => k,
                    _ => v,
                };
                t.transpose(1, 2)?.reshape((1, grid.len() + 1, self.dim))?
            }
        };
        let data: Vec<f32> = out.narrow(1, 1, grid.len())?.flatten_all()?.to_vec1()?;
        let features = FeatureGrid::new(grid.rows, grid.cols, self.dim, data)?;
        if !features.is_finite() {
            return Err(Error::Numerical(format!("backbone produced non-finite features on frame {frame_index}")));
        }
        Ok(FeatureMap { frame_index, grid, features })
    }

    /// Mean class-token attention to each patch in the last block.
    fn saliency(&self, frame: &Image, cfg: &BackboneConfig) -> Result<Vec<f64>> {
        let cfg = BackboneConfig { layer: self.blocks.len(), ..*cfg };
        let (mut x, grid) = self.embed(frame, &cfg)?;
        let mut att = None;
        for block in &self.blocks {
            let (y, a) = self.block(block, &x)?;
            x = y;
            att = Some(a);
        }
        let att = att.expect("at least one block");
        let cls_row = att.narrow(2, 0, 1)?.narrow(3, 1, grid.len())?.mean(1)?;
        let v: Vec<f32> = cls_row.flatten_all()?.to_vec1()?;
        Ok(v.into_iter().map(f64::from).collect())
    }

    fn parameter_checksum(&self) -> u64 {
        self.checksum
    }
}

/// Writes a randomly initialised checkpoint with the expected layout; used
/// by tests and to smoke-test the client without downloading weights.
pub fn write_random_vit(path: &Path, dim: usize, depth: usize, patch: usize, pos_side: usize, seed: u64) -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let dev = Device::Cpu;
    let mut t = |shape: &[usize], scale: f32| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        Ok(Tensor::from_vec(v, shape, &dev)?)
    };
    let mut m: HashMap<String, Tensor> = HashMap::new();
    m.insert("patch_embed.proj.weight".into(), t(&[dim, 3, patch, patch], 0.05)?);
    m.insert("patch_embed.proj.bias".into(), t(&[dim], 0.05)?);
    m.insert("cls_token".into(), t(&[1, 1, dim], 0.5)?);
    m.insert("pos_embed".into(), t(&[1, 1 + pos_side * pos_side, dim], 0.5)?);
    for b in 0..depth {
        let p = |s: &str| format!("blocks.{b}.{s}");
        m.insert(p("norm1.weight"), Tensor::ones(dim, DType::F32, &dev)?);
        m.insert(p("norm1.bias"), t(&[dim], 0.1)?);
        m.insert(p("attn.qkv.weight"), t(&[3 * dim, dim], 0.3)?);
        m.insert(p("attn.qkv.bias"), t(&[3 * dim], 0.1)?);
        m.insert(p("attn.proj.weight"), t(&[dim, dim], 0.3)?);
        m.insert(p("attn.proj.bias"), t(&[dim], 0.1)?);
        m.insert(p("ls1.gamma"), t(&[dim], 1.0)?);
        m.insert(p("norm2.weight"), Tensor::ones(dim, DType::F32, &dev)?);
        m.insert(p("norm2.bias"), t(&[dim], 0.1)?);
        m.insert(p("mlp.fc1.weight"), t(&[4 * dim, dim], 0.3)?);
        m.insert(p("mlp.fc1.bias"), t(&[4 * dim], 0.1)?);
        m.insert(p("mlp.fc2.weight"), t(&[dim, 4 * dim], 0.3)?);
        m.insert(p("mlp.fc2.bias"), t(&[dim], 0.1)?);
        m.insert(p("ls2.gamma"), t(&[dim], 1.0)?);
    }
    candle_core::safetensors::save(&m, path)?;
    Ok(())
}
