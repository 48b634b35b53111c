//! Training objectives.
//!
//! Each loss exists as a graph function (for training) and as a map-level
//! wrapper returning a plain scalar. Reductions are means over pixels with
//! valid ground truth; pixels without ground truth never influence a loss.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::depthmap::{DepthMap, Image, UncertaintyMap, LOG_SIGMA_MAX, LOG_SIGMA_MIN};
use crate::error::{ensure_same_dims, Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PNorm {
    #[default]
    L1,
    L2,
}

impl TryFrom<u8> for PNorm {
    type Error = String;

    fn try_from(p: u8) -> Result<Self, String> {
        match p {
            1 => Ok(PNorm::L1),
            2 => Ok(PNorm::L2),
            other => Err(format!("p-norm must be 1 or 2, got {other}")),
        }
    }
}

impl From<PNorm> for u8 {
    fn from(p: PNorm) -> u8 {
        match p {
            PNorm::L1 => 1,
            PNorm::L2 => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub p_norm: PNorm,
    pub w_sup: f64,
    pub w_sm: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p_norm: PNorm::L1,
            w_sup: 1.0,
            w_sm: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("w_sup", self.w_sup), ("w_sm", self.w_sm)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {w}"
                )));
            }
        }
        Ok(())
    }
}

/// Ground truth for a batch: depth values and the `1/count`-scaled validity
/// mask used for masked means.
#[derive(Clone, Debug)]
pub struct Target {
    pub depth: Tensor,
    mask: Tensor,
    count: usize,
}

impl Target {
    pub fn new(gts: &[&DepthMap]) -> Result<Self> {
        let first = gts.first().ok_or(Error::Undefined("loss"))?;
        let (h, w) = (first.height(), first.width());
        let mut depth = Vec::with_capacity(gts.len() * h * w);
        let mut mask = Vec::with_capacity(gts.len() * h * w);
        for gt in gts {
            ensure_same_dims("batch ground truth", (gt.height(), gt.width()), (h, w))?;
            depth.extend_from_slice(gt.values());
            mask.extend(gt.valid().iter().map(|&v| f64::from(u8::from(v))));
        }
        let count = mask.iter().filter(|&&m| m > 0.0).count();
        if count == 0 {
            return Err(Error::Undefined("loss"));
        }
        let shape = Shape::new(gts.len(), 1, h, w);
        Ok(Target {
            depth: Tensor::from_vec(shape, depth),
            mask: Tensor::from_vec(shape, mask),
            count,
        })
    }

    pub fn shape(&self) -> Shape {
        self.depth.shape()
    }

    pub fn valid_count(&self) -> usize {
        self.count
    }

    fn residual(&self, g: &mut Graph, pred: Var) -> Result<Var> {
        if g.shape(pred) != self.shape() {
            return Err(Error::Dimension(format!(
                "prediction {} vs ground truth {}",
                g.shape(pred),
                self.shape()
            )));
        }
        let gt = g.constant(self.depth.clone());
        Ok(g.sub(pred, gt))
    }

    fn masked_mean(&self, g: &mut Graph, x: Var) -> Var {
        let total = g.weighted_sum(x, self.mask.clone());
        g.divide(total, self.count as f64)
    }
}

/// Mean of `(zhat - gt)^2` over valid pixels.
pub fn depth_l2(g: &mut Graph, zhat: Var, target: &Target) -> Result<Var> {
    let r = target.residual(g, zhat)?;
    let sq = g.square(r);
    Ok(target.masked_mean(g, sq))
}

/// Gaussian negative log-likelihood with log-standard-deviation `sigma`:
/// mean of `0.5 * ((zhat - gt) / exp(sigma))^2 + sigma` over valid pixels.
/// `sigma` is clamped to the log-uncertainty bounds before use.
pub fn log_uncertainty(g: &mut Graph, zhat: Var, sigma: Var, target: &Target) -> Result<Var> {
    if g.shape(sigma) != target.shape() {
        return Err(Error::Dimension(format!(
            "uncertainty {} vs ground truth {}",
            g.shape(sigma),
            target.shape()
        )));
    }
    let r = target.residual(g, zhat)?;
    let s = g.clamp(sigma, LOG_SIGMA_MIN, LOG_SIGMA_MAX);
    let neg = g.affine(s, -1.0, 0.0);
    let inv_std = g.exp(neg);
    let scaled = g.mul(r, inv_std);
    let sq = g.square(scaled);
    let half = g.affine(sq, 0.5, 0.0);
    let nll = g.add(half, s);
    Ok(target.masked_mean(g, nll))
}

/// Mean of `|d - gt|^p` over valid pixels for `p` in `{1, 2}`.
pub fn supervised(g: &mut Graph, d: Var, target: &Target, p: PNorm) -> Result<Var> {
    let r = target.residual(g, d)?;
    let e = match p {
        PNorm::L1 => g.abs(r),
        PNorm::L2 => g.square(r),
    };
    Ok(target.masked_mean(g, e))
}

/// Edge-aware weights `exp(-|∂I|)` for the smoothness term, with the image
/// gradient magnitude averaged over the three channels. Forward differences;
/// the last column (x) and last row (y) have zero gradient.
#[derive(Clone, Debug)]
pub struct EdgeWeights {
    pub x: Tensor,
    pub y: Tensor,
}

impl EdgeWeights {
    pub fn new(images: &[&Image]) -> Result<Self> {
        let first = images
            .first()
            .ok_or_else(|| Error::Input("no images".into()))?;
        let (h, w) = (first.height(), first.width());
        let shape = Shape::new(images.len(), 1, h, w);
        let mut wx = Vec::with_capacity(shape.len());
        let mut wy = Vec::with_capacity(shape.len());
        for img in images {
            ensure_same_dims("batch images", (img.height(), img.width()), (h, w))?;
            for y in 0..h {
                for x in 0..w {
                    let mut gx = 0.0;
                    let mut gy = 0.0;
                    for c in 0..3 {
                        let v = img.get(c, y, x);
                        if x + 1 < w {
                            gx += (img.get(c, y, x + 1) - v).abs();
                        }
                        if y + 1 < h {
                            gy += (img.get(c, y + 1, x) - v).abs();
                        }
                    }
                    wx.push((-gx / 3.0).exp());
                    wy.push((-gy / 3.0).exp());
                }
            }
        }
        Ok(EdgeWeights {
            x: Tensor::from_vec(shape, wx),
            y: Tensor::from_vec(shape, wy),
        })
    }
}

/// `(1/|Ω|) Σ I_X |∂_X d| + I_Y |∂_Y d|` over every pixel of the batch.
pub fn smoothness(g: &mut Graph, d: Var, weights: &EdgeWeights) -> Result<Var> {
    let s = g.shape(d);
    if s != weights.x.shape() {
        return Err(Error::Dimension(format!(
            "depth {} vs image weights {}",
            s,
            weights.x.shape()
        )));
    }
    if s.h < 2 || s.w < 2 {
        return Err(Error::Dimension(format!(
            "smoothness needs at least 2x2 pixels, got {s}"
        )));
    }
    let dx = g.diff_x(d);
    let dy = g.diff_y(d);
    let ax = g.abs(dx);
    let ay = g.abs(dy);
    let sx = g.weighted_sum(ax, weights.x.clone());
    let sy = g.weighted_sum(ay, weights.y.clone());
    let sum = g.add(sx, sy);
    Ok(g.divide(sum, s.len() as f64))
}

/// `w_sm * smoothness + w_sup * supervised`.
pub fn total(g: &mut Graph, sup: Var, sm: Var, cfg: &LossConfig) -> Var {
    let a = g.affine(sup, cfg.w_sup, 0.0);
    let b = g.affine(sm, cfg.w_sm, 0.0);
    g.add(a, b)
}

/// Scalar loss components for [`loss_total`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    pub supervised: f64,
    pub smoothness: f64,
}

fn eval(build: impl FnOnce(&mut Graph) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let out = build(&mut g)?;
    Ok(g.value(out).item())
}

pub fn loss_depth_l2(zhat: &DepthMap, gt: &DepthMap) -> Result<f64> {
    ensure_same_dims(
        "loss_depth_l2",
        (zhat.height(), zhat.width()),
        (gt.height(), gt.width()),
    )?;
    let target = Target::new(&[gt])?;
    eval(|g| {
        let z = g.constant(zhat.to_tensor());
        depth_l2(g, z, &target)
    })
}

pub fn loss_uncertainty(zhat: &DepthMap, sigma: &UncertaintyMap, gt: &DepthMap) -> Result<f64> {
    ensure_same_dims(
        "loss_uncertainty",
        (zhat.height(), zhat.width()),
        (gt.height(), gt.width()),
    )?;
    ensure_same_dims(
        "loss_uncertainty",
        (sigma.height(), sigma.width()),
        (gt.height(), gt.width()),
    )?;
    let target = Target::new(&[gt])?;
    eval(|g| {
        let z = g.constant(zhat.to_tensor());
        let s = g.constant(sigma.to_tensor());
        log_uncertainty(g, z, s, &target)
    })
}

pub fn loss_supervised(d: &DepthMap, gt: &DepthMap, p: PNorm) -> Result<f64> {
    ensure_same_dims(
        "loss_supervised",
        (d.height(), d.width()),
        (gt.height(), gt.width()),
    )?;
    let target = Target::new(&[gt])?;
    eval(|g| {
        let dv = g.constant(d.to_tensor());
        supervised(g, dv, &target, p)
    })
}

pub fn loss_smoothness(d: &DepthMap, image: &Image) -> Result<f64> {
    ensure_same_dims(
        "loss_smoothness",
        (d.height(), d.width()),
        (image.height(), image.width()),
    )?;
    let weights = EdgeWeights::new(&[image])?;
    eval(|g| {
        let dv = g.constant(d.to_tensor());
        smoothness(g, dv, &weights)
    })
}

pub fn loss_total(parts: LossParts, cfg: &LossConfig) -> f64 {
    cfg.w_sm * parts.smoothness + cfg.w_sup * parts.supervised
}
