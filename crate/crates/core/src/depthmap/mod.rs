//! Raster types shared across the pipeline, plus projection, cropping,
//! augmentation and on-disk formats.
//!
//! Depth is stored in meters throughout. A [`SparseDepthMap`] uses `0` to mean
//! "no measurement"; a [`DepthMap`] carries an explicit validity mask.

pub mod augment;
pub mod io;
pub mod projection;

use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::tensor::{Shape, Tensor};

pub use augment::{augment, AugmentConfig, ColorJitter};
pub use projection::project_points;

/// Bounds applied to every log-uncertainty value.
pub const LOG_SIGMA_MIN: f64 = -10.0;
pub const LOG_SIGMA_MAX: f64 = 10.0;

/// Common spatial operations over H×W-aligned rasters.
pub trait Raster: Sized {
    fn dims(&self) -> (usize, usize);

    /// The `h x w` window whose top-left corner is `(top, left)`.
    fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Self;

    fn flip_horizontal(&self) -> Self;
}

fn window_vec<T: Copy>(
    src: &[T],
    width: usize,
    planes: usize,
    plane_len: usize,
    (top, left, h, w): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = Vec::with_capacity(planes * h * w);
    for p in 0..planes {
        let plane = &src[p * plane_len..(p + 1) * plane_len];
        for y in top..top + h {
            out.extend_from_slice(&plane[y * width + left..y * width + left + w]);
        }
    }
    out
}

fn flip_vec<T: Copy>(src: &[T], width: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for row in out.chunks_mut(width) {
        row.reverse();
    }
    out
}

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::Dimension(format!(
            "raster must be non-empty, got {h}x{w}"
        )));
    }
    Ok(())
}

/// Dense depth in meters with a per-pixel validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width || valid.len() != values.len() {
            return Err(Error::Dimension(format!(
                "depth map {height}x{width} given {} values and {} mask entries",
                values.len(),
                valid.len()
            )));
        }
        for (&v, &ok) in values.iter().zip(&valid) {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Input(format!(
                    "depth value {v} is not a finite non-negative number"
                )));
            }
            if ok && v <= 0.0 {
                return Err(Error::Input("valid depth pixels must be positive".into()));
            }
        }
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    /// Validity inferred as `value > 0`.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Self::new(height, width, values, valid)
    }

    /// Builds a map valid at every pixel; all values must be positive.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = vec![true; values.len()];
        Self::new(height, width, values, valid)
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::dense(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Validity mask as `0/1` values.
    pub fn mask_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.valid.iter().map(|&v| f64::from(u8::from(v))).collect(),
        )
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.values.clone(),
        )
    }
}

impl Raster for DepthMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let r = (top, left, h, w);
        DepthMap {
            height: h,
            width: w,
            values: window_vec(&self.values, self.width, 1, self.values.len(), r),
            valid: window_vec(&self.valid, self.width, 1, self.valid.len(), r),
        }
    }

    fn flip_horizontal(&self) -> Self {
        DepthMap {
            height: self.height,
            width: self.width,
            values: flip_vec(&self.values, self.width),
            valid: flip_vec(&self.valid, self.width),
        }
    }
}

/// Per-pixel depth where measured and `0` elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl SparseDepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "sparse map {height}x{width} given {} values",
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Input(format!(
                "sparse depth value {v} is not a finite non-negative number"
            )));
        }
        Ok(SparseDepthMap {
            height,
            width,
            values,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(height, width, vec![0.0; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn is_measured(&self, y: usize, x: usize) -> bool {
        self.get(y, x) > 0.0
    }

    pub fn measured_count(&self) -> usize {
        self.values.iter().filter(|&&v| v > 0.0).count()
    }

    pub fn density(&self) -> f64 {
        self.measured_count() as f64 / self.values.len() as f64
    }

    pub fn to_depth_map(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.clone(),
            valid: self.values.iter().map(|&v| v > 0.0).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.values.clone(),
        )
    }
}

impl From<&DepthMap> for SparseDepthMap {
    /// Invalid pixels become zeros.
    fn from(d: &DepthMap) -> Self {
        SparseDepthMap {
            height: d.height,
            width: d.width,
            values: d
                .values
                .iter()
                .zip(&d.valid)
                .map(|(&v, &ok)| if ok { v } else { 0.0 })
                .collect(),
        }
    }
}

impl Raster for SparseDepthMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        SparseDepthMap {
            height: h,
            width: w,
            values: window_vec(
                &self.values,
                self.width,
                1,
                self.values.len(),
                (top, left, h, w),
            ),
        }
    }

    fn flip_horizontal(&self) -> Self {
        SparseDepthMap {
            height: self.height,
            width: self.width,
            values: flip_vec(&self.values, self.width),
        }
    }
}

/// Per-pixel log standard deviation of a depth prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl UncertaintyMap {
    /// Values are clamped to `[LOG_SIGMA_MIN, LOG_SIGMA_MAX]`; non-finite
    /// values are rejected.
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "uncertainty map {height}x{width} given {} values",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("log uncertainty must be finite".into()));
        }
        Ok(UncertaintyMap {
            height,
            width,
            values: values
                .into_iter()
                .map(|v| v.clamp(LOG_SIGMA_MIN, LOG_SIGMA_MAX))
                .collect(),
        })
    }

    pub fn constant(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.values.clone(),
        )
    }
}

impl Raster for UncertaintyMap {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        UncertaintyMap {
            height: h,
            width: w,
            values: window_vec(
                &self.values,
                self.width,
                1,
                self.values.len(),
                (top, left, h, w),
            ),
        }
    }

    fn flip_horizontal(&self) -> Self {
        UncertaintyMap {
            height: self.height,
            width: self.width,
            values: flip_vec(&self.values, self.width),
        }
    }
}

/// Planar RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    /// `data` holds three planes of `height * width` values each.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        check_dims(height, width)?;
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Dimension(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("image intensities must lie in [0, 1]".into()));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; Self::CHANNELS * height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, Self::CHANNELS, self.height, self.width),
            self.data.clone(),
        )
    }
}

impl Raster for Image {
    fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Self {
        let p = self.height * self.width;
        Image {
            height: h,
            width: w,
            data: window_vec(&self.data, self.width, Self::CHANNELS, p, (top, left, h, w)),
        }
    }

    fn flip_horizontal(&self) -> Self {
        Image {
            height: self.height,
            width: self.width,
            data: flip_vec(&self.data, self.width),
        }
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if !ok {
            return Err(Error::Config(format!("invalid camera intrinsics {self:?}")));
        }
        Ok(())
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view in degrees.
    pub fn centered(height: usize, width: usize, hfov_deg: f64) -> Self {
        let fx = (width as f64 / 2.0) / (hfov_deg.to_radians() / 2.0).tan();
        CameraIntrinsics {
            fx,
            fy: fx,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tag {
    Day,
    Night,
}

impl std::fmt::Display for Tag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Tag::Day => "day",
            Tag::Night => "night",
        })
    }
}

impl std::str::FromStr for Tag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "day" => Ok(Tag::Day),
            "night" => Ok(Tag::Night),
            other => Err(Error::Config(format!("unknown illumination tag {other:?}"))),
        }
    }
}

/// An image with its sparse depth, ground truth and illumination tag.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub sparse: SparseDepthMap,
    pub gt: DepthMap,
    pub tag: Tag,
}

impl Sample {
    pub fn new(image: Image, sparse: SparseDepthMap, gt: DepthMap, tag: Tag) -> Result<Self> {
        ensure_same_dims("sample image vs sparse", image.dims(), sparse.dims())?;
        ensure_same_dims("sample image vs ground truth", image.dims(), gt.dims())?;
        Ok(Sample {
            image,
            sparse,
            gt,
            tag,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.image.dims()
    }

    pub fn window(&self, top: usize, left: usize, h: usize, w: usize) -> Sample {
        Sample {
            image: self.image.window(top, left, h, w),
            sparse: self.sparse.window(top, left, h, w),
            gt: self.gt.window(top, left, h, w),
            tag: self.tag,
        }
    }

    pub fn flip_horizontal(&self) -> Sample {
        Sample {
            image: self.image.flip_horizontal(),
            sparse: self.sparse.flip_horizontal(),
            gt: self.gt.flip_horizontal(),
            tag: self.tag,
        }
    }

    pub fn bottom_crop(&self, crop_h: usize, crop_w: usize) -> Result<Sample> {
        let (top, left) = bottom_crop_origin(self.dims(), crop_h, crop_w)?;
        Ok(self.window(top, left, crop_h, crop_w))
    }
}

fn bottom_crop_origin(
    (h, w): (usize, usize),
    crop_h: usize,
    crop_w: usize,
) -> Result<(usize, usize)> {
    if crop_h == 0 || crop_w == 0 || crop_h > h || crop_w > w {
        return Err(Error::Dimension(format!(
            "cannot crop {crop_h}x{crop_w} from {h}x{w}"
        )));
    }
    Ok((h - crop_h, (w - crop_w) / 2))
}

/// Keeps the bottom `crop_h` rows and a horizontally centered band of `crop_w`
/// columns.
pub fn bottom_crop<R: Raster>(raster: &R, crop_h: usize, crop_w: usize) -> Result<R> {
    let (top, left) = bottom_crop_origin(raster.dims(), crop_h, crop_w)?;
    Ok(raster.window(top, left, crop_h, crop_w))
}
