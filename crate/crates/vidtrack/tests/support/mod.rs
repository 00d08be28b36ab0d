#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vidtrack::backbone::{extract_all, BackboneConfig, FeatureMap, MockBackbone};
use vidtrack::media::FrameSequence;
use vidtrack::synthetic::{SceneConfig, SyntheticScene};
use vidtrack::tracker::{TrackerConfig, TrackerState, VideoTensors};

/// A small moving-sprite clip.
pub fn small_scene(frames: usize, size: usize, seed: u64) -> SyntheticScene {
    SyntheticScene::new(SceneConfig {
        frames,
        height: size,
        width: size,
        sprite_size: size / 3,
        velocity: (2, 1),
        start: (size as i32 / 8, size as i32 / 4),
        seed,
    })
}

pub fn mock_features(seq: &FrameSequence, dim: usize, seed: u64) -> Vec<FeatureMap> {
    extract_all(&MockBackbone::new(seed, dim, 14), seq, &BackboneConfig::default()).unwrap()
}

pub fn tensors(seq: &FrameSequence, maps: &[FeatureMap], dtype: DType) -> VideoTensors {
    VideoTensors::new(seq, maps, dtype, &Device::Cpu).unwrap()
}

pub fn tiny_state(dim: usize, seed: u64) -> TrackerState {
    let cfg = TrackerConfig { adapter_widths: [2, 2, 2], init_seed: seed, ..Default::default() };
    TrackerState::new(cfg, dim, DType::F64, &Device::Cpu).unwrap()
}

/// Gives the residual branch a non-zero output scale so every adapter
/// parameter receives gradient.
pub fn randomize_output_scale(state: &TrackerState, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bn = state.adapter.output_norm();
    let n = bn.gamma.dims()[0];
    let g: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5) * if rng.gen() { 1.0 } else { -1.0 }).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-0.3..0.3)).collect();
    bn.gamma.set(&Tensor::new(g, &Device::Cpu).unwrap()).unwrap();
    bn.beta.set(&Tensor::new(b, &Device::Cpu).unwrap()).unwrap();
}

fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Relative error `|g_fd - g_an| / max(|g_fd|, |g_an|)` between the autograd
/// gradient of `f` and central differences over every parameter.
pub fn gradient_error(state: &TrackerState, h: f64, f: &dyn Fn() -> Tensor) -> (f64, f64, usize) {
    let params = state.params();
    let grads = f().backward().unwrap();
    let (mut an, mut fd) = (Vec::new(), Vec::new());
    for p in &params {
        let t = p.var.as_tensor();
        let n = t.elem_count();
        let g: Vec<f64> = match grads.get(t) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; n],
        };
        an.extend(g);
        let base: Vec<f64> = t.flatten_all().unwrap().to_vec1().unwrap();
        let shape = t.shape().clone();
        for k in 0..n {
            let mut v = base.clone();
            v[k] = base[k] + h;
            p.var.set(&Tensor::from_vec(v.clone(), shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let up = scalar(&f());
            v[k] = base[k] - h;
            p.var.set(&Tensor::from_vec(v, shape.clone(), &Device::Cpu).unwrap()).unwrap();
            let down = scalar(&f());
            fd.push((up - down) / (2.0 * h));
        }
        p.var.set(&Tensor::from_vec(base, shape, &Device::Cpu).unwrap()).unwrap();
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = an.iter().zip(&fd).map(|(a, b)| a - b).collect();
    let scale = norm(&an).max(norm(&fd));
    (norm(&diff) / scale, scale, an.len())
}
