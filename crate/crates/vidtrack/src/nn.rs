//! Small differentiable layers on top of candle tensors.

use std::sync::RwLock;

use candle_core::{CpuStorage, CustomOp1, DType, Device, Layout, Shape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Parameter groups with separate learning-rate schedules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Group {
    Adapter,
    Refiner,
}

#[derive(Clone, Debug)]
pub struct NamedParam {
    pub name: String,
    pub var: Var,
    pub group: Group,
}

/// Builds a tensor of `dtype` from f64 values.
pub fn constant(values: Vec<f64>, shape: impl Into<Shape>, dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, shape, device)?.to_dtype(dtype)?)
}

pub fn index_tensor(idx: &[usize], device: &Device) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), device)?)
}

fn uniform(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// 2-D convolution with bias; `padding` here is zero padding applied by the
/// convolution itself.
#[derive(Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv {
    /// Fan-in scaled uniform initialisation, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for weights and bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        padding: usize,
        dilation: usize,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let fan_in = c_in * kernel * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = constant(uniform(rng, c_out * fan_in, bound), (c_out, c_in, kernel, kernel), dtype, device)?;
        let b = constant(uniform(rng, c_out, bound), c_out, dtype, device)?;
        Ok(Self { weight: Var::from_tensor(&w)?, bias: Var::from_tensor(&b)?, padding, dilation })
    }

    /// `(B, C, H, W)` to `(B, C_out, oh, ow)`, stride 1.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_channels_first(&x.transpose(0, 1)?.contiguous()?)?;
        Ok(y.transpose(0, 1)?.contiguous()?)
    }

    /// Same convolution on a channel-major `(C, B, H, W)` tensor, returning
    /// `(C_out, B, oh, ow)`. Narrowing layers contract channels first and add
    /// up shifted tap maps; the others multiply the weights into unfolded
    /// patches.
    pub fn forward_channels_first(&self, x: &Tensor) -> Result<Tensor> {
        let (c_out, c_in, k, _) = self.weight.dims4()?;
        let (c, b, h, w) = x.dims4()?;
        if c != c_in {
            return Err(crate::Error::input(format!("convolution expects {c_in} channels, got {c}")));
        }
        let geo = Taps::new(b, h, w, k, self.dilation, self.padding)?;
        let x = x.contiguous()?;
        let y = if c_out < c_in {
            let wm = self.weight.as_tensor().permute((0, 2, 3, 1))?.contiguous()?.reshape((c_out * k * k, c_in))?;
            let taps = wm.matmul(&x.reshape((c_in, b * h * w))?)?;
            taps.apply_op1(ShiftSum { maps: c_out, geo })?
        } else {
            let cols = x.apply_op1(Unfold { channels: c_in, geo })?;
            let wm = self.weight.as_tensor().reshape((c_out, c_in * k * k))?;
            wm.matmul(&cols)?.reshape((c_out, b, geo.out_h, geo.out_w))?
        };
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((c_out, 1, 1, 1))?)?)
    }

    pub fn params(&self, prefix: &str, group: Group, out: &mut Vec<NamedParam>) {
        out.push(NamedParam { name: format!("{prefix}.weight"), var: self.weight.clone(), group });
        out.push(NamedParam { name: format!("{prefix}.bias"), var: self.bias.clone(), group });
    }
}

/// Geometry of a zero-padded, dilated, stride-1 kernel sweep over a batch
/// of `H x W` planes.
#[derive(Clone, Copy, Debug)]
struct Taps {
    batch: usize,
    height: usize,
    width: usize,
    kernel: usize,
    dilation: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Taps {
    fn new(batch: usize, height: usize, width: usize, kernel: usize, dilation: usize, padding: usize) -> Result<Self> {
        let span = dilation * (kernel - 1);
        if height + 2 * padding <= span || width + 2 * padding <= span {
            return Err(crate::Error::input(format!("{kernel}x{kernel} kernel with dilation {dilation} exceeds a {height}x{width} input")));
        }
        let (out_h, out_w) = (height + 2 * padding - span, width + 2 * padding - span);
        Ok(Self { batch, height, width, kernel, dilation, padding, out_h, out_w })
    }

    fn plane(&self) -> usize {
        self.batch * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    /// For tap `(ky, kx)`, calls `f(input_offset, output_offset, len)` for
    /// every in-bounds run along a row; offsets are within one plane.
    fn runs(&self, ky: usize, kx: usize, mut f: impl FnMut(usize, usize, usize)) {
        let (d, p) = (self.dilation, self.padding);
        let dx = kx * d;
        let q_lo = p.saturating_sub(dx);
        let q_hi = (self.width + p).saturating_sub(dx).min(self.out_w);
        if q_lo >= q_hi {
            return;
        }
        for n in 0..self.batch {
            for r in 0..self.out_h {
                let row = r + ky * d;
                if row < p || row >= self.height + p {
                    continue;
                }
                let src = (n * self.height + row - p) * self.width + q_lo + dx - p;
                let dst = (n * self.out_h + r) * self.out_w + q_lo;
                f(src, dst, q_hi - q_lo);
            }
        }
    }
}

fn add_into<T: Copy + std::ops::AddAssign>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Patch extraction: channel-major `(C, B, H, W)` to the `(C K K, B oh ow)`
/// matrix whose rows are the kernel taps. The backward pass folds the
/// patches back with accumulation.
#[derive(Clone, Copy, Debug)]
struct Unfold {
    channels: usize,
    geo: Taps,
}

impl Unfold {
    fn unfold<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let g = &self.geo;
        let (k, plane, cols) = (g.kernel, g.plane(), g.out_plane());
        let mut out = vec![T::default(); self.channels * k * k * cols];
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((c * k + ky) * k + kx) * cols;
                    g.runs(ky, kx, |s, d, len| {
                        out[base + d..base + d + len].copy_from_slice(&src[c * plane + s..c * plane + s + len])
                    });
                }
            }
        }
        out
    }

    fn fold<T: Copy + Default + std::ops::AddAssign>(&self, cols_in: &[T]) -> Vec<T> {
        let g = &self.geo;
        let (k, plane, cols) = (g.kernel, g.plane(), g.out_plane());
        let mut out = vec![T::default(); self.channels * plane];
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((c * k + ky) * k + kx) * cols;
                    g.runs(ky, kx, |s, d, len| {
                        add_into(&mut out[c * plane + s..c * plane + s + len], &cols_in[base + d..base + d + len])
                    });
                }
            }
        }
        out
    }
}

/// `(M K K, B H W)` tap responses to `(M, B, oh, ow)`: each output sums its
/// kernel taps read at the shifted positions. The backward pass spreads
/// each output gradient back onto its taps.
#[derive(Clone, Copy, Debug)]
struct ShiftSum {
    maps: usize,
    geo: Taps,
}

impl ShiftSum {
    fn sum<T: Copy + Default + std::ops::AddAssign>(&self, taps: &[T]) -> Vec<T> {
        let g = &self.geo;
        let (k, plane, outs) = (g.kernel, g.plane(), g.out_plane());
        let mut out = vec![T::default(); self.maps * outs];
        for m in 0..self.maps {
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((m * k + ky) * k + kx) * plane;
                    g.runs(ky, kx, |s, d, len| {
                        add_into(&mut out[m * outs + d..m * outs + d + len], &taps[base + s..base + s + len])
                    });
                }
            }
        }
        out
    }

    fn spread<T: Copy + Default + std::ops::AddAssign>(&self, grad: &[T]) -> Vec<T> {
        let g = &self.geo;
        let (k, plane, outs) = (g.kernel, g.plane(), g.out_plane());
        let mut out = vec![T::default(); self.maps * k * k * plane];
        for m in 0..self.maps {
            for ky in 0..k {
                for kx in 0..k {
                    let base = ((m * k + ky) * k + kx) * plane;
                    g.runs(ky, kx, |s, d, len| {
                        out[base + s..base + s + len].copy_from_slice(&grad[m * outs + d..m * outs + d + len])
                    });
                }
            }
        }
        out
    }
}

fn contiguous<'a, T: candle_core::WithDType>(storage: &'a CpuStorage, layout: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = layout.contiguous_offsets().ok_or_else(|| candle_core::Error::Msg("custom op needs a contiguous input".into()))?;
    Ok(&storage.as_slice::<T>()?[a..b])
}

/// Runs `f` on the f32 or f64 contents of `storage`.
macro_rules! float_op {
    ($name:expr, $storage:expr, $layout:expr, $f:expr) => {
        match $storage {
            CpuStorage::F32(_) => CpuStorage::F32($f(contiguous::<f32>($storage, $layout)?)),
            CpuStorage::F64(_) => CpuStorage::F64($f(contiguous::<f64>($storage, $layout)?)),
            _ => return Err(candle_core::Error::Msg(format!("{} supports f32 and f64", $name))),
        }
    };
}

impl CustomOp1 for Unfold {
    fn name(&self) -> &'static str {
        "unfold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let k = self.geo.kernel;
        let shape = Shape::from((self.channels * k * k, self.geo.out_plane()));
        Ok((float_op!("unfold", storage, layout, |s| self.unfold(s)), shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Fold(*self))?))
    }
}

struct Fold(Unfold);

impl CustomOp1 for Fold {
    fn name(&self) -> &'static str {
        "fold"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0.geo;
        let shape = Shape::from((self.0.channels, g.batch, g.height, g.width));
        Ok((float_op!("fold", storage, layout, |s| self.0.fold(s)), shape))
    }
}

impl CustomOp1 for ShiftSum {
    fn name(&self) -> &'static str {
        "shift-sum"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.geo;
        let shape = Shape::from((self.maps, g.batch, g.out_h, g.out_w));
        Ok((float_op!("shift-sum", storage, layout, |s| self.sum(s)), shape))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&Spread(*self))?))
    }
}

struct Spread(ShiftSum);

impl CustomOp1 for Spread {
    fn name(&self) -> &'static str {
        "spread"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = &self.0.geo;
        let shape = Shape::from((self.0.maps * g.kernel * g.kernel, g.plane()));
        Ok((float_op!("spread", storage, layout, |s| self.0.spread(s)), shape))
    }
}

fn reflect_indices(n: usize, pad: usize) -> Vec<usize> {
    (0..n + 2 * pad)
        .map(|i| {
            let j = i as isize - pad as isize;
            let last = n as isize - 1;
            let r = if j < 0 {
                -j
            } else if j > last {
                2 * last - j
            } else {
                j
            };
            r as usize
        })
        .collect()
}

/// Reflection padding of the two trailing (spatial) dimensions.
pub fn reflect_pad(x: &Tensor, pad: usize) -> Result<Tensor> {
    if pad == 0 {
        return Ok(x.clone());
    }
    let (h, w) = (x.dim(2)?, x.dim(3)?);
    if pad >= h || pad >= w {
        return Err(crate::Error::input(format!("reflection pad {pad} needs spatial size above it, got {h}x{w}")));
    }
    let dev = x.device();
    let x = x.index_select(&index_tensor(&reflect_indices(w, pad), dev)?, 3)?;
    Ok(x.index_select(&index_tensor(&reflect_indices(h, pad), dev)?, 2)?)
}

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch normalisation over `(batch, height, width)` per channel. Training
/// mode uses batch statistics and updates the running estimates; inference
/// mode uses the running estimates.
#[derive(Debug)]
pub struct BatchNorm {
    pub gamma: Var,
    pub beta: Var,
    running: RwLock<(Tensor, Tensor)>,
}

impl BatchNorm {
    pub fn new(channels: usize, gamma: f64, beta: f64, dtype: DType, device: &Device) -> Result<Self> {
        let g = constant(vec![gamma; channels], channels, dtype, device)?;
        let b = constant(vec![beta; channels], channels, dtype, device)?;
        let rm = Tensor::zeros(channels, dtype, device)?;
        let rv = Tensor::ones(channels, dtype, device)?;
        Ok(Self { gamma: Var::from_tensor(&g)?, beta: Var::from_tensor(&b)?, running: RwLock::new((rm, rv)) })
    }

    pub fn running_stats(&self) -> (Tensor, Tensor) {
        self.running.read().expect("running stats lock").clone()
    }

    pub fn set_running_stats(&self, mean: Tensor, var: Tensor) {
        *self.running.write().expect("running stats lock") = (mean, var);
    }

    pub fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let c = x.dim(1)?;
        let shape = (1, c, 1, 1);
        let (mean, var) = if train {
            let flat = x.transpose(0, 1)?.flatten_from(1)?;
            let n = flat.dim(1)?;
            let mean = flat.mean_keepdim(1)?;
            let var = flat.broadcast_sub(&mean)?.sqr()?.mean_keepdim(1)?;
            {
                let mut guard = self.running.write().expect("running stats lock");
                let unbiased = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let m = mean.flatten_all()?.detach();
                let v = var.flatten_all()?.detach();
                let rm = ((&guard.0 * (1.0 - BN_MOMENTUM))? + (m * BN_MOMENTUM)?)?;
                let rv = ((&guard.1 * (1.0 - BN_MOMENTUM))? + (v * (BN_MOMENTUM * unbiased))?)?;
                *guard = (rm, rv);
            }
            (mean.reshape(shape)?, var.reshape(shape)?)
        } else {
            let (rm, rv) = self.running_stats();
            (rm.reshape(shape)?, rv.reshape(shape)?)
        };
        let normed = x.broadcast_sub(&mean)?.broadcast_div(&(var + BN_EPS)?.sqrt()?)?;
        let g = self.gamma.as_tensor().reshape(shape)?;
        let b = self.beta.as_tensor().reshape(shape)?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    pub fn params(&self, prefix: &str, group: Group, out: &mut Vec<NamedParam>) {
        out.push(NamedParam { name: format!("{prefix}.gamma"), var: self.gamma.clone(), group });
        out.push(NamedParam { name: format!("{prefix}.beta"), var: self.beta.clone(), group });
    }
}

/// Anti-aliased stride-2 downsampling: reflection pad 1, per-channel
/// `[1,2,1] x [1,2,1] / 16` blur, keep every second sample.
pub fn blur_downsample(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let y = reflect_pad(x, 1)?;
    let blur = |t: &Tensor, dim: usize, n: usize| -> Result<Tensor> {
        let sum = ((t.narrow(dim, 0, n)? + (t.narrow(dim, 1, n)? * 2.0)?)? + t.narrow(dim, 2, n)?)?;
        Ok((sum * 0.25)?)
    };
    let y = blur(&blur(&y, 2, h)?, 3, w)?;
    let even = |n: usize| -> Vec<usize> { (0..n).step_by(2).collect() };
    let dev = x.device();
    let y = y.index_select(&index_tensor(&even(h), dev)?, 2)?;
    Ok(y.index_select(&index_tensor(&even(w), dev)?, 3)?)
}
