//! Procedural scenes with exact dense depth, LiDAR-like sparsification and
//! day/night renderings.
//!
//! Camera frame: X right, Y down, Z forward; depth is the Z coordinate of the
//! first surface hit. Scenes are a ground plane below the camera, axis-aligned
//! boxes and spheres resting on it, and a far backdrop at the maximum depth.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::depthmap::io::{self, Manifest, Record, Split};
use crate::depthmap::{CameraIntrinsics, DepthMap, Image, Sample, SparseDepthMap, Tag};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    pub num_primitives: usize,
    /// Placement range for primitives; the backdrop sits at the far end.
    pub depth_range: [f64; 2],
    pub ground_plane: bool,
    /// `(height, width)` in pixels.
    pub image_size: (usize, usize),
    pub intrinsics: CameraIntrinsics,
    /// Height of the camera above the ground plane, meters.
    pub camera_height: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let (h, w) = (64, 128);
        SceneConfig {
            num_primitives: 6,
            depth_range: [4.0, 40.0],
            ground_plane: true,
            image_size: (h, w),
            intrinsics: CameraIntrinsics::centered(h, w, 90.0),
            camera_height: 1.5,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.depth_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::Config(format!("invalid depth range [{lo}, {hi}]")));
        }
        self.intrinsics.validate()?;
        let (h, w) = self.image_size;
        if (self.intrinsics.height, self.intrinsics.width) != (h, w) {
            return Err(Error::Config(format!(
                "intrinsics describe {}x{} but image_size is {h}x{w}",
                self.intrinsics.height, self.intrinsics.width
            )));
        }
        if !(self.camera_height > 0.0) {
            return Err(Error::Config("camera_height must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LidarPattern {
    pub num_beams: usize,
    /// Beam elevations in degrees, positive up.
    pub vertical_fov: [f64; 2],
    pub azimuth_step: f64,
    pub dropout_prob: f64,
}

impl Default for LidarPattern {
    /// A 32-beam spinning sensor.
    fn default() -> Self {
        LidarPattern {
            num_beams: 32,
            vertical_fov: [-30.0, 10.0],
            azimuth_step: 0.2,
            dropout_prob: 0.0,
        }
    }
}

impl LidarPattern {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.vertical_fov;
        if self.num_beams == 0 || !(lo < hi) || !(self.azimuth_step > 0.0) {
            return Err(Error::Config(format!("invalid lidar pattern {self:?}")));
        }
        if !(0.0..=1.0).contains(&self.dropout_prob) {
            return Err(Error::Config("dropout_prob must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn elevations(&self) -> Vec<f64> {
        let [lo, hi] = self.vertical_fov;
        if self.num_beams == 1 {
            return vec![(lo + hi) / 2.0];
        }
        (0..self.num_beams)
            .map(|k| lo + (hi - lo) * k as f64 / (self.num_beams - 1) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    Cuboid {
        min: [f64; 3],
        max: [f64; 3],
        albedo: [f64; 3],
    },
}

/// An explicit scene description.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `Some(h)` places a ground plane `h` meters below the camera.
    pub ground: Option<f64>,
    pub primitives: Vec<Primitive>,
    /// Depth of the backdrop.
    pub far: f64,
    /// Unit vector towards the light.
    pub light: [f64; 3],
}

#[derive(Clone, Copy)]
struct Hit {
    t: f64,
    normal: [f64; 3],
    point: [f64; 3],
    surface: Surface,
}

#[derive(Clone, Copy)]
enum Surface {
    Ground,
    Object(usize),
    Backdrop,
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

impl Primitive {
    /// Ray parameter of the nearest hit with `t > 0` along `origin + t * dir`.
    fn intersect(&self, dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        match *self {
            Primitive::Sphere { center, radius, .. } => {
                // origin is the camera center
                let oc = [-center[0], -center[1], -center[2]];
                let a = dot(dir, dir);
                let b = 2.0 * dot(oc, dir);
                let c = dot(oc, oc) - radius * radius;
                let disc = b * b - 4.0 * a * c;
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)]
                    .into_iter()
                    .find(|&t| t > 1e-9)?;
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                let n = normalize([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                Some((t, n))
            }
            Primitive::Cuboid { min, max, .. } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for i in 0..3 {
                    if dir[i].abs() < 1e-12 {
                        if 0.0 < min[i] || 0.0 > max[i] {
                            return None;
                        }
                        continue;
                    }
                    let a = min[i] / dir[i];
                    let b = max[i] / dir[i];
                    let (near, far) = if a < b { (a, b) } else { (b, a) };
                    if near > t0 {
                        t0 = near;
                        axis = i;
                    }
                    t1 = t1.min(far);
                }
                if t0 > t1 || t0 <= 1e-9 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -dir[axis].signum();
                Some((t0, n))
            }
        }
    }

    fn albedo(&self) -> [f64; 3] {
        match *self {
            Primitive::Sphere { albedo, .. } | Primitive::Cuboid { albedo, .. } => albedo,
        }
    }
}

impl Scene {
    fn trace(&self, dir: [f64; 3]) -> Hit {
        // dir has unit Z component, so the ray parameter equals depth
        let mut best = Hit {
            t: self.far,
            normal: [0.0, 0.0, -1.0],
            point: [dir[0] * self.far, dir[1] * self.far, self.far],
            surface: Surface::Backdrop,
        };
        if let Some(h) = self.ground {
            if dir[1] > 0.0 {
                let t = h / dir[1];
                if t < best.t {
                    best = Hit {
                        t,
                        normal: [0.0, -1.0, 0.0],
                        point: [dir[0] * t, h, t],
                        surface: Surface::Ground,
                    };
                }
            }
        }
        for (i, p) in self.primitives.iter().enumerate() {
            if let Some((t, normal)) = p.intersect(dir) {
                if t < best.t {
                    best = Hit {
                        t,
                        normal,
                        point: [dir[0] * t, dir[1] * t, t],
                        surface: Surface::Object(i),
                    };
                }
            }
        }
        best
    }

    fn pixel_ray(k: &CameraIntrinsics, y: usize, x: usize) -> [f64; 3] {
        [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0]
    }

    /// Dense depth, valid at every pixel.
    pub fn render_depth(&self, k: &CameraIntrinsics) -> Result<DepthMap> {
        k.validate()?;
        let mut values = Vec::with_capacity(k.width * k.height);
        for y in 0..k.height {
            for x in 0..k.width {
                values.push(self.trace(Self::pixel_ray(k, y, x)).t);
            }
        }
        DepthMap::dense(k.height, k.width, values)
    }

    /// Lambertian shading of textured surfaces under a directional light.
    pub fn render_day(&self, k: &CameraIntrinsics) -> Result<Image> {
        k.validate()?;
        let p = k.width * k.height;
        let mut data = vec![0.0; 3 * p];
        let light = normalize(self.light);
        for y in 0..k.height {
            for x in 0..k.width {
                let hit = self.trace(Self::pixel_ray(k, y, x));
                let rgb = match hit.surface {
                    Surface::Backdrop => {
                        let s = 0.5 + 0.5 * (1.0 - y as f64 / k.height as f64);
                        [0.45 * s, 0.6 * s, 0.85 * s]
                    }
                    surface => {
                        let (albedo, pattern) = match surface {
                            Surface::Ground => {
                                let checker = ((hit.point[0].floor() + hit.point[2].floor()) as i64)
                                    .rem_euclid(2)
                                    as f64;
                                ([0.45, 0.42, 0.38], 0.75 + 0.25 * checker)
                            }
                            Surface::Object(i) => {
                                let stripe =
                                    ((hit.point[1] * 2.0).floor() as i64).rem_euclid(2) as f64;
                                (self.primitives[i].albedo(), 0.85 + 0.15 * stripe)
                            }
                            Surface::Backdrop => unreachable!(),
                        };
                        let shade = 0.35 + 0.65 * dot(hit.normal, light).max(0.0);
                        [
                            albedo[0] * pattern * shade,
                            albedo[1] * pattern * shade,
                            albedo[2] * pattern * shade,
                        ]
                    }
                };
                for c in 0..3 {
                    data[c * p + y * k.width + x] = rgb[c].clamp(0.0, 1.0);
                }
            }
        }
        Image::new(k.height, k.width, data)
    }
}

/// Low-light rendering: `day * gain + N(0, noise^2)`, clamped to `[0, 1]`.
pub fn darken(day: &Image, gain: f64, noise: f64, rng: &mut impl Rng) -> Image {
    let normal = Normal::new(0.0, noise).expect("noise std is finite and non-negative");
    let data = day
        .data()
        .iter()
        .map(|&v| (v * gain + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Image::new(day.height(), day.width(), data).expect("clamped image")
}

/// Samples a random scene from the configuration.
pub fn random_scene(cfg: &SceneConfig, rng: &mut impl Rng) -> Scene {
    let [near, far] = cfg.depth_range;
    let k = &cfg.intrinsics;
    let h = cfg.camera_height;
    let mut primitives = Vec::with_capacity(cfg.num_primitives);
    for _ in 0..cfg.num_primitives {
        let z = rng.random_range(near..far);
        let half_width = z * (k.width as f64 / 2.0) / k.fx;
        let x = rng.random_range(-0.9 * half_width..0.9 * half_width);
        let albedo = [
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
            rng.random_range(0.3..1.0),
        ];
        let floor = if cfg.ground_plane {
            h
        } else {
            rng.random_range(-2.0..h)
        };
        if rng.random_bool(0.5) {
            let radius = rng.random_range(0.4..1.8);
            primitives.push(Primitive::Sphere {
                center: [x, floor - radius, z],
                radius,
                albedo,
            });
        } else {
            let sx = rng.random_range(0.5..3.0);
            let sy = rng.random_range(0.6..3.5);
            let sz = rng.random_range(0.5..3.0);
            primitives.push(Primitive::Cuboid {
                min: [x - sx / 2.0, floor - sy, z],
                max: [x + sx / 2.0, floor, z + sz],
                albedo,
            });
        }
    }
    let az = rng.random_range(-0.8..0.8f64);
    Scene {
        ground: cfg.ground_plane.then_some(h),
        primitives,
        far,
        light: normalize([az.sin(), -1.2, -az.cos()]),
    }
}

/// Rendered scene: dense depth plus day and night images.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRender {
    pub gt: DepthMap,
    pub day: Image,
    pub night: Image,
}

pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<SceneRender> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = random_scene(cfg, &mut rng);
    let gt = scene.render_depth(&cfg.intrinsics)?;
    let day = scene.render_day(&cfg.intrinsics)?;
    let gain = rng.random_range(0.05..=0.2);
    let noise = rng.random_range(0.01..=0.05);
    let night = darken(&day, gain, noise, &mut rng);
    Ok(SceneRender { gt, day, night })
}

/// Samples `gt` along rings of LiDAR beams projected through `k`, dropping
/// each return independently with `dropout_prob`. Sampled pixels carry the
/// ground-truth value exactly.
pub fn sparsify(
    gt: &DepthMap,
    k: &CameraIntrinsics,
    pattern: &LidarPattern,
    seed: u64,
) -> Result<SparseDepthMap> {
    pattern.validate()?;
    k.validate()?;
    if (k.height, k.width) != (gt.height(), gt.width()) {
        return Err(Error::Dimension(format!(
            "intrinsics {}x{} vs depth {}x{}",
            k.height,
            k.width,
            gt.height(),
            gt.width()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; gt.values().len()];
    let az_lo = (-k.cx / k.fx).atan();
    let az_hi = ((k.width as f64 - 1.0 - k.cx) / k.fx).atan();
    let step = pattern.azimuth_step.to_radians();
    let steps = ((az_hi - az_lo) / step).floor() as usize;
    for elevation in pattern.elevations() {
        let tan_e = elevation.to_radians().tan();
        for i in 0..=steps {
            let az = az_lo + i as f64 * step;
            let u = (k.fx * az.tan() + k.cx).round();
            let v = (k.fy * (-tan_e / az.cos()) + k.cy).round();
            if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
                continue;
            }
            if pattern.dropout_prob > 0.0 && rng.random_bool(pattern.dropout_prob) {
                continue;
            }
            let idx = v as usize * k.width + u as usize;
            if gt.valid()[idx] {
                values[idx] = gt.values()[idx];
            }
        }
    }
    let out = SparseDepthMap::new(gt.height(), gt.width(), values)?;
    if out.measured_count() == 0 {
        log::warn!("lidar pattern produced no samples; returning an empty sparse map");
    }
    Ok(out)
}

/// Derives an independent per-item seed from a base seed.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut x = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub scene: SceneConfig,
    pub lidar: LidarPattern,
    /// Fraction of scenes tagged `day`.
    pub day_ratio: f64,
    /// Fraction of each tag held out for evaluation.
    pub test_fraction: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scene: SceneConfig::default(),
            lidar: LidarPattern {
                num_beams: 8,
                vertical_fov: [-25.0, 5.0],
                azimuth_step: 2.0,
                dropout_prob: 0.1,
            },
            day_ratio: 0.875,
            test_fraction: 0.2,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.lidar.validate()?;
        if !(0.0..=1.0).contains(&self.day_ratio) || !(0.0..1.0).contains(&self.test_fraction) {
            return Err(Error::Config(
                "day_ratio must lie in [0, 1] and test_fraction in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Tag and split assignment for `n` scenes: `round(n * (1 - day_ratio))`
/// night scenes chosen by a seeded shuffle, and a held-out fraction of each
/// tag chosen the same way.
pub fn assign_tags(n: usize, day_ratio: f64, test_fraction: f64, seed: u64) -> Vec<(Tag, Split)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let n_night = ((n as f64) * (1.0 - day_ratio)).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut out = vec![(Tag::Day, Split::Train); n];
    for &i in &order[..n_night.min(n)] {
        out[i].0 = Tag::Night;
    }
    for tag in [Tag::Day, Tag::Night] {
        let mut members: Vec<usize> = (0..n).filter(|&i| out[i].0 == tag).collect();
        members.shuffle(&mut rng);
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for &i in &members[..n_test] {
            out[i].1 = Split::Test;
        }
    }
    out
}

/// Generates `n` tagged samples in memory.
pub fn generate_samples(n: usize, cfg: &DatasetConfig, seed: u64) -> Result<Vec<(Sample, Split)>> {
    cfg.validate()?;
    assign_tags(n, cfg.day_ratio, cfg.test_fraction, seed)
        .into_iter()
        .enumerate()
        .map(|(i, (tag, split))| {
            let scene_seed = derive_seed(seed, i as u64);
            let render = generate_scene(&cfg.scene, scene_seed)?;
            let sparse = sparsify(
                &render.gt,
                &cfg.scene.intrinsics,
                &cfg.lidar,
                derive_seed(scene_seed, 1),
            )?;
            let image = match tag {
                Tag::Day => render.day,
                Tag::Night => render.night,
            };
            Ok((Sample::new(image, sparse, render.gt, tag)?, split))
        })
        .collect()
}

/// Writes `n` scenes as PNGs plus `manifest.json` under `out_dir` and returns
/// the manifest path.
pub fn write_dataset(
    n: usize,
    cfg: &DatasetConfig,
    out_dir: impl AsRef<Path>,
    seed: u64,
    config_digest: Option<String>,
) -> Result<PathBuf> {
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let samples = generate_samples(n, cfg, seed)?;
    let mut manifest = Manifest {
        config_digest,
        ..Default::default()
    };
    let mut content = Vec::new();
    for (i, (sample, split)) in samples.iter().enumerate() {
        let record = Record {
            image_path: format!("scene_{i:05}_image.png"),
            sparse_path: format!("scene_{i:05}_sparse.png"),
            gt_path: format!("scene_{i:05}_gt.png"),
            tag: sample.tag,
            split: *split,
        };
        io::write_rgb_png8(&sample.image, out_dir.join(&record.image_path))?;
        io::write_sparse_png16(&sample.sparse, out_dir.join(&record.sparse_path))?;
        io::write_depth_png16(&sample.gt, out_dir.join(&record.gt_path))?;
        for rel in [&record.image_path, &record.sparse_path, &record.gt_path] {
            let path = out_dir.join(rel);
            content.extend(std::fs::read(&path).map_err(|e| Error::io(&path, e))?);
        }
        manifest.records.push(record);
    }
    manifest.content_digest = Some(io::sha256_hex(&content));
    let path = out_dir.join("manifest.json");
    manifest.save(&path)?;
    Ok(path)
}
