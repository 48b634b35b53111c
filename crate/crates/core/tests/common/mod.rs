#![allow(dead_code)]

use alldepth::depthmap::{
    CameraIntrinsics, DepthMap, Image, Sample, SparseDepthMap, Tag, UncertaintyMap,
};
use alldepth::synth::{generate_samples, DatasetConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Dataset settings for `h x w` scenes with the default lidar pattern.
pub fn dataset_config(h: usize, w: usize) -> DatasetConfig {
    let mut cfg = DatasetConfig::default();
    cfg.scene.image_size = (h, w);
    cfg.scene.intrinsics = CameraIntrinsics::centered(h, w, 90.0);
    cfg
}

pub fn scenes(n: usize, h: usize, w: usize, seed: u64) -> Vec<Sample> {
    generate_samples(n, &dataset_config(h, w), seed)
        .unwrap()
        .into_iter()
        .map(|(s, _)| s)
        .collect()
}

pub fn random_depth(h: usize, w: usize, r: &mut ChaCha8Rng) -> DepthMap {
    DepthMap::dense(
        h,
        w,
        (0..h * w).map(|_| r.random_range(1.0..40.0)).collect(),
    )
    .unwrap()
}

pub fn random_sparse(h: usize, w: usize, density: f64, r: &mut ChaCha8Rng) -> SparseDepthMap {
    let v = (0..h * w)
        .map(|_| {
            if r.random_bool(density) {
                r.random_range(1.0..40.0)
            } else {
                0.0
            }
        })
        .collect();
    SparseDepthMap::new(h, w, v).unwrap()
}

pub fn random_sigma(h: usize, w: usize, r: &mut ChaCha8Rng) -> UncertaintyMap {
    UncertaintyMap::new(
        h,
        w,
        (0..h * w).map(|_| r.random_range(-3.0..3.0)).collect(),
    )
    .unwrap()
}

pub fn random_image(h: usize, w: usize, r: &mut ChaCha8Rng) -> Image {
    Image::new(
        h,
        w,
        (0..3 * h * w).map(|_| r.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn random_sample(h: usize, w: usize, r: &mut ChaCha8Rng) -> Sample {
    Sample::new(
        random_image(h, w, r),
        random_sparse(h, w, 0.3, r),
        random_depth(h, w, r),
        Tag::Day,
    )
    .unwrap()
}

/// `|a - b| / max(|a|, |b|)`, zero when both vanish.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

/// Central difference of `f` at `x` along coordinate `i`.
pub fn central_diff(f: &mut impl FnMut(&[f64]) -> f64, x: &[f64], i: usize, eps: f64) -> f64 {
    let mut p = x.to_vec();
    p[i] = x[i] + eps;
    let up = f(&p);
    p[i] = x[i] - eps;
    let down = f(&p);
    (up - down) / (2.0 * eps)
}
