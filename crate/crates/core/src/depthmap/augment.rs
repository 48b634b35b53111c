//! Training-time augmentation: color jitter, random resize and crop, and
//! horizontal flip.
//!
//! Geometric transforms are applied identically to the image, the sparse map
//! and the ground truth. Resizing by a factor `s` divides every depth by `s`,
//! which keeps the rasters consistent with the unchanged intrinsics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DepthMap, Image, Raster, Sample, SparseDepthMap};
use crate::error::{Error, Result};

/// Maximum relative change for each jitter component; `0` disables it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl ColorJitter {
    fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.contrast == 0.0 && self.saturation == 0.0
    }
}

/// The default configuration is the identity transform.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default)]
    pub jitter: ColorJitter,
    /// Uniform range of resize factors.
    #[serde(default)]
    pub resize_range: Option<[f64; 2]>,
    /// Random crop `(height, width)` applied after resizing.
    #[serde(default)]
    pub crop: Option<(usize, usize)>,
    #[serde(default)]
    pub flip_prob: f64,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!(
                "flip_prob {} outside [0, 1]",
                self.flip_prob
            )));
        }
        if let Some([lo, hi]) = self.resize_range {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("invalid resize range [{lo}, {hi}]")));
            }
        }
        let j = self.jitter;
        if [j.brightness, j.contrast, j.saturation]
            .iter()
            .any(|v| !(0.0..1.0).contains(v))
        {
            return Err(Error::Config("jitter strengths must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

impl AugmentConfig {
    /// Shrinks the crop so that it fits a `h x w` sample at the smallest
    /// resize factor. Crops sized for large datasets then also apply to
    /// smaller rasters.
    pub fn fitted_to(&self, h: usize, w: usize) -> AugmentConfig {
        let lo = self.resize_range.map_or(1.0, |[lo, _]| lo);
        let mut out = self.clone();
        out.crop = self
            .crop
            .map(|(ch, cw)| (ch.min(scaled_dim(h, lo)), cw.min(scaled_dim(w, lo))));
        out
    }
}

fn scaled_dim(size: usize, factor: f64) -> usize {
    ((size as f64 * factor).round() as usize).max(1)
}

fn source_index(dst: usize, factor: f64, size: usize) -> usize {
    (((dst as f64 + 0.5) / factor).floor() as usize).min(size - 1)
}

/// Bilinear resampling with pixel-center alignment.
pub fn resize_image(img: &Image, factor: f64) -> Image {
    let (h, w) = img.dims();
    let (nh, nw) = (scaled_dim(h, factor), scaled_dim(w, factor));
    let sy = h as f64 / nh as f64;
    let sx = w as f64 / nw as f64;
    let mut data = Vec::with_capacity(3 * nh * nw);
    for c in 0..Image::CHANNELS {
        let plane = img.channel(c);
        for y in 0..nh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let ty = fy - y0 as f64;
            for x in 0..nw {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let tx = fx - x0 as f64;
                let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
                let bot = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
                data.push((top * (1.0 - ty) + bot * ty).clamp(0.0, 1.0));
            }
        }
    }
    Image::new(nh, nw, data).expect("resampled image keeps its invariants")
}

/// Nearest-neighbour resampling with depth divided by `factor`.
pub fn resize_depth(d: &DepthMap, factor: f64) -> DepthMap {
    let (h, w) = d.dims();
    let (nh, nw) = (scaled_dim(h, factor), scaled_dim(w, factor));
    let mut values = Vec::with_capacity(nh * nw);
    let mut valid = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = source_index(y, nh as f64 / h as f64, h);
        for x in 0..nw {
            let sx = source_index(x, nw as f64 / w as f64, w);
            values.push(d.get(sy, sx) / factor);
            valid.push(d.is_valid(sy, sx));
        }
    }
    DepthMap::new(nh, nw, values, valid).expect("resampled depth keeps its invariants")
}

/// Scatters each measurement to its resized pixel, keeping the nearest on
/// collision, so the number of measurements never grows.
pub fn resize_sparse(z: &SparseDepthMap, factor: f64) -> SparseDepthMap {
    let (h, w) = z.dims();
    let (nh, nw) = (scaled_dim(h, factor), scaled_dim(w, factor));
    let (fy, fx) = (nh as f64 / h as f64, nw as f64 / w as f64);
    let mut values = vec![0.0; nh * nw];
    for y in 0..h {
        for x in 0..w {
            let v = z.get(y, x);
            if v <= 0.0 {
                continue;
            }
            let ty = (((y as f64 + 0.5) * fy).floor() as usize).min(nh - 1);
            let tx = (((x as f64 + 0.5) * fx).floor() as usize).min(nw - 1);
            let slot = &mut values[ty * nw + tx];
            let scaled = v / factor;
            if *slot == 0.0 || scaled < *slot {
                *slot = scaled;
            }
        }
    }
    SparseDepthMap::new(nh, nw, values).expect("resampled sparse map keeps its invariants")
}

fn jitter_image(img: &Image, j: &ColorJitter, rng: &mut impl Rng) -> Image {
    let mut draw = |strength: f64| {
        if strength > 0.0 {
            rng.random_range(1.0 - strength..=1.0 + strength)
        } else {
            1.0
        }
    };
    let brightness = draw(j.brightness);
    let contrast = draw(j.contrast);
    let saturation = draw(j.saturation);

    let (h, w) = img.dims();
    let p = h * w;
    let mut data: Vec<f64> = img
        .data()
        .iter()
        .map(|v| (v * brightness).clamp(0.0, 1.0))
        .collect();
    let mean = data.iter().sum::<f64>() / data.len() as f64;
    for v in &mut data {
        *v = ((*v - mean) * contrast + mean).clamp(0.0, 1.0);
    }
    for i in 0..p {
        let gray = 0.299 * data[i] + 0.587 * data[p + i] + 0.114 * data[2 * p + i];
        for c in 0..3 {
            let v = &mut data[c * p + i];
            *v = ((*v - gray) * saturation + gray).clamp(0.0, 1.0);
        }
    }
    Image::new(h, w, data).expect("jittered image stays in range")
}

/// Applies the configured augmentations, deterministically for a given seed.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, seed: u64) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = sample.clone();

    if !cfg.jitter.is_identity() {
        out.image = jitter_image(&out.image, &cfg.jitter, &mut rng);
    }
    if let Some([lo, hi]) = cfg.resize_range {
        let factor = if lo == hi {
            lo
        } else {
            rng.random_range(lo..=hi)
        };
        if factor != 1.0 {
            out = Sample {
                image: resize_image(&out.image, factor),
                sparse: resize_sparse(&out.sparse, factor),
                gt: resize_depth(&out.gt, factor),
                tag: out.tag,
            };
        }
    }
    if let Some((ch, cw)) = cfg.crop {
        let (h, w) = out.dims();
        if ch == 0 || cw == 0 || ch > h || cw > w {
            return Err(Error::Dimension(format!(
                "augmentation crop {ch}x{cw} exceeds resized sample {h}x{w}"
            )));
        }
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        out = out.window(top, left, ch, cw);
    }
    if cfg.flip_prob > 0.0 && rng.random_bool(cfg.flip_prob) {
        out = out.flip_horizontal();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depthmap::{bottom_crop, Tag};

    fn sample(h: usize, w: usize) -> Sample {
        let gt = DepthMap::dense(h, w, (0..h * w).map(|i| 5.0 + (i % 7) as f64).collect()).unwrap();
        let sparse_vals = (0..h * w)
            .map(|i| if i % 5 == 0 { gt.values()[i] } else { 0.0 })
            .collect();
        let image = Image::new(
            h,
            w,
            (0..3 * h * w).map(|i| (i % 11) as f64 / 10.0).collect(),
        )
        .unwrap();
        Sample::new(
            image,
            SparseDepthMap::new(h, w, sparse_vals).unwrap(),
            gt,
            Tag::Day,
        )
        .unwrap()
    }

    #[test]
    fn identity_config_is_a_no_op() {
        let s = sample(6, 8);
        let out = augment(&s, &AugmentConfig::default(), 7).unwrap();
        assert_eq!(out, s);
        assert_eq!(
            bottom_crop(&out.gt, 3, 4).unwrap(),
            bottom_crop(&s.gt, 3, 4).unwrap()
        );
    }

    #[test]
    fn flip_maps_columns_in_all_rasters() {
        let s = sample(4, 5);
        let cfg = AugmentConfig {
            flip_prob: 1.0,
            ..Default::default()
        };
        let out = augment(&s, &cfg, 0).unwrap();
        for y in 0..4 {
            for x in 0..5 {
                assert_eq!(out.gt.get(y, x), s.gt.get(y, 4 - x));
                assert_eq!(out.sparse.get(y, x), s.sparse.get(y, 4 - x));
                for c in 0..3 {
                    assert_eq!(out.image.get(c, y, x), s.image.get(c, y, 4 - x));
                }
            }
        }
    }

    #[test]
    fn doubling_size_halves_depth_on_a_plane() {
        // A fronto-parallel plane at 8 m seen through a pinhole: zooming the
        // image by 2 is equivalent to the plane sitting at 4 m.
        let (h, w) = (6, 8);
        let gt = DepthMap::constant(h, w, 8.0).unwrap();
        let mut sparse_vals = vec![0.0; h * w];
        sparse_vals[2 * w + 3] = 8.0;
        let s = Sample::new(
            Image::filled(h, w, 0.5).unwrap(),
            SparseDepthMap::new(h, w, sparse_vals).unwrap(),
            gt,
            Tag::Day,
        )
        .unwrap();
        let cfg = AugmentConfig {
            resize_range: Some([2.0, 2.0]),
            ..Default::default()
        };
        let out = augment(&s, &cfg, 1).unwrap();
        assert_eq!(out.dims(), (12, 16));
        assert!(out.gt.values().iter().all(|&v| v == 4.0));
        assert_eq!(out.sparse.measured_count(), 1);
        assert_eq!(out.sparse.get(5, 7), 4.0);
    }

    #[test]
    fn augmentation_is_deterministic_per_seed() {
        let s = sample(10, 12);
        let cfg = AugmentConfig {
            jitter: ColorJitter {
                brightness: 0.3,
                contrast: 0.3,
                saturation: 0.3,
            },
            resize_range: Some([1.0, 1.5]),
            crop: Some((8, 10)),
            flip_prob: 0.5,
        };
        assert_eq!(
            augment(&s, &cfg, 11).unwrap(),
            augment(&s, &cfg, 11).unwrap()
        );
        let out = augment(&s, &cfg, 11).unwrap();
        assert_eq!(out.dims(), (8, 10));
        // jitter never touches depth
        for (i, &v) in out.sparse.values().iter().enumerate() {
            if v > 0.0 {
                assert!(out.gt.valid()[i]);
            }
        }
    }

    #[test]
    fn crop_larger_than_resized_sample_fails() {
        let s = sample(4, 4);
        let cfg = AugmentConfig {
            crop: Some((5, 4)),
            ..Default::default()
        };
        assert!(matches!(augment(&s, &cfg, 0), Err(Error::Dimension(_))));
    }
}
