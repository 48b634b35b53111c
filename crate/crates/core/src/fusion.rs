//! Combining sparse measurements with a dense prediction and its uncertainty.
//!
//! Two mechanisms live here:
//! - [`merge_plug_and_play`] densifies a sparse map with the prediction where
//!   the prediction is trusted, for backbones that only accept sparse depth.
//! - [`lambda_weight`] and [`fuse_residual`] blend the prediction with a
//!   refinement branch, giving the refinement more say where uncertainty is high.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::depthmap::{DepthMap, Raster, SparseDepthMap, UncertaintyMap};
use crate::error::{ensure_same_dims, Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    /// Predictions with log uncertainty at or above `tau` are discarded by the merge.
    pub tau: f64,
    /// Slope of the logistic weighting.
    pub alpha: f64,
    /// Log uncertainty at which the weighting equals one half.
    pub beta: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            tau: 5.0,
            alpha: 0.8,
            beta: 0.0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        if self.tau.is_nan() || !self.beta.is_finite() {
            return Err(Error::Config(
                "tau must not be NaN and beta must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Measured depth where available; otherwise the prediction if its log
/// uncertainty is strictly below `tau`; otherwise no depth.
pub fn merge_plug_and_play(
    z: &SparseDepthMap,
    zhat: &DepthMap,
    sigma: &UncertaintyMap,
    cfg: &FusionConfig,
) -> Result<SparseDepthMap> {
    ensure_same_dims("merge sparse vs prediction", z.dims(), zhat.dims())?;
    ensure_same_dims("merge sparse vs uncertainty", z.dims(), sigma.dims())?;
    let values = z
        .values()
        .iter()
        .zip(zhat.values())
        .zip(sigma.values())
        .map(|((&zv, &pred), &s)| {
            if zv > 0.0 {
                zv
            } else if s < cfg.tau {
                pred
            } else {
                0.0
            }
        })
        .collect();
    SparseDepthMap::new(z.height(), z.width(), values)
}

/// The three-channel refinement input `[z, zhat, sigma]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedInput {
    height: usize,
    width: usize,
    /// Channel-major: `z`, then `zhat`, then `sigma`.
    data: Vec<f64>,
}

impl PackedInput {
    pub const CHANNELS: usize = 3;

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.data[c * p..(c + 1) * p]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, Self::CHANNELS, self.height, self.width),
            self.data.clone(),
        )
    }

    /// Splits the channels back into their typed maps.
    pub fn unpack(&self) -> Result<(SparseDepthMap, DepthMap, UncertaintyMap)> {
        let (h, w) = self.dims();
        Ok((
            SparseDepthMap::new(h, w, self.channel(0).to_vec())?,
            DepthMap::dense(h, w, self.channel(1).to_vec())?,
            UncertaintyMap::new(h, w, self.channel(2).to_vec())?,
        ))
    }
}

pub fn pack_url_input(
    z: &SparseDepthMap,
    zhat: &DepthMap,
    sigma: &UncertaintyMap,
) -> Result<PackedInput> {
    ensure_same_dims("pack sparse vs prediction", z.dims(), zhat.dims())?;
    ensure_same_dims("pack sparse vs uncertainty", z.dims(), sigma.dims())?;
    if zhat.valid_count() != zhat.values().len() {
        return Err(Error::Input(
            "packed prediction must be valid everywhere".into(),
        ));
    }
    let mut data = Vec::with_capacity(3 * z.values().len());
    data.extend_from_slice(z.values());
    data.extend_from_slice(zhat.values());
    data.extend_from_slice(sigma.values());
    Ok(PackedInput {
        height: z.height(),
        width: z.width(),
        data,
    })
}

/// `1 / (1 + exp(alpha * (sigma - beta)))`.
pub fn lambda_scalar(sigma: f64, cfg: &FusionConfig) -> f64 {
    let t = cfg.alpha * (sigma - cfg.beta);
    if t >= 0.0 {
        let e = (-t).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + t.exp())
    }
}

/// Per-pixel weights in `(0, 1)`, decreasing in uncertainty.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl WeightMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Dimension(format!(
                "weight map {height}x{width} given {} values",
                values.len()
            )));
        }
        Ok(WeightMap {
            height,
            width,
            values,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(
            Shape::new(1, 1, self.height, self.width),
            self.values.clone(),
        )
    }
}

pub fn lambda_weight(sigma: &UncertaintyMap, cfg: &FusionConfig) -> WeightMap {
    WeightMap {
        height: sigma.height(),
        width: sigma.width(),
        values: sigma
            .values()
            .iter()
            .map(|&s| lambda_scalar(s, cfg))
            .collect(),
    }
}

/// `lam * zhat + (1 - lam) * dhat`, per pixel.
pub fn fuse_residual(zhat: &DepthMap, dhat: &DepthMap, lam: &WeightMap) -> Result<DepthMap> {
    ensure_same_dims("fuse prediction vs refinement", zhat.dims(), dhat.dims())?;
    ensure_same_dims("fuse prediction vs weights", zhat.dims(), lam.dims())?;
    if let Some(l) = lam.values().iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::Input(format!("fusion weight {l} outside [0, 1]")));
    }
    let values = zhat
        .values()
        .iter()
        .zip(dhat.values())
        .zip(lam.values())
        .map(|((&a, &b), &l)| l * a + (1.0 - l) * b)
        .collect();
    DepthMap::dense(zhat.height(), zhat.width(), values)
}

/// Graph form of [`fuse_residual`] with `zhat` and the weights held constant:
/// gradients reach `dhat` scaled by `1 - lam`.
pub fn fuse_residual_graph(g: &mut Graph, zhat: &Tensor, dhat: Var, lam: &Tensor) -> Var {
    let fixed = Tensor::from_vec(
        zhat.shape(),
        zhat.data()
            .iter()
            .zip(lam.data())
            .map(|(z, l)| z * l)
            .collect(),
    );
    let refine = g.mul_const(dhat, lam.map(|l| 1.0 - l));
    let fixed = g.constant(fixed);
    g.add(fixed, refine)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(v: f64) -> (SparseDepthMap, DepthMap, UncertaintyMap) {
        (
            SparseDepthMap::new(1, 1, vec![v]).unwrap(),
            DepthMap::constant(1, 1, 5.0).unwrap(),
            UncertaintyMap::constant(1, 1, 0.0).unwrap(),
        )
    }

    #[test]
    fn merge_keeps_measurements_and_thresholds_predictions() {
        let cfg = FusionConfig::default();
        let z = SparseDepthMap::new(1, 3, vec![2.0, 0.0, 0.0]).unwrap();
        let zhat = DepthMap::constant(1, 3, 5.0).unwrap();
        let sigma = UncertaintyMap::new(1, 3, vec![9.0, 4.9, 5.1]).unwrap();
        let m = merge_plug_and_play(&z, &zhat, &sigma, &cfg).unwrap();
        assert_eq!(m.values(), &[2.0, 5.0, 0.0]);
    }

    #[test]
    fn merge_filters_at_the_threshold() {
        let (z, zhat, _) = one(0.0);
        let s = UncertaintyMap::constant(1, 1, 5.0).unwrap();
        let m = merge_plug_and_play(&z, &zhat, &s, &FusionConfig::default()).unwrap();
        assert_eq!(m.values(), &[0.0]);
    }

    #[test]
    fn negative_infinite_threshold_returns_raw_sparse() {
        let z = SparseDepthMap::new(1, 3, vec![2.0, 0.0, 7.0]).unwrap();
        let zhat = DepthMap::constant(1, 3, 5.0).unwrap();
        let s = UncertaintyMap::constant(1, 3, -10.0).unwrap();
        let cfg = FusionConfig {
            tau: f64::NEG_INFINITY,
            ..Default::default()
        };
        assert_eq!(merge_plug_and_play(&z, &zhat, &s, &cfg).unwrap(), z);
    }

    #[test]
    fn shape_mismatch_is_a_dimension_error() {
        let z = SparseDepthMap::empty(2, 2).unwrap();
        let zhat = DepthMap::constant(2, 3, 1.0).unwrap();
        let s = UncertaintyMap::constant(2, 2, 0.0).unwrap();
        assert!(matches!(
            merge_plug_and_play(&z, &zhat, &s, &FusionConfig::default()),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            pack_url_input(&z, &zhat, &s),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn packing_preserves_channels_bit_exactly() {
        let z = SparseDepthMap::new(1, 2, vec![0.0, 3.25]).unwrap();
        let zhat = DepthMap::dense(1, 2, vec![1.5, 2.5]).unwrap();
        let s = UncertaintyMap::new(1, 2, vec![-0.1, 7.0]).unwrap();
        let p = pack_url_input(&z, &zhat, &s).unwrap();
        assert_eq!(p.channel(0), z.values());
        assert_eq!(p.channel(1), zhat.values());
        assert_eq!(p.channel(2), s.values());
        assert_eq!(p.unpack().unwrap(), (z, zhat, s));
    }

    #[test]
    fn lambda_reference_values() {
        let cfg = FusionConfig::default();
        assert_eq!(lambda_scalar(0.0, &cfg), 0.5);
        let expected = 1.0 / (1.0 + 8f64.exp());
        assert!((lambda_scalar(10.0, &cfg) - expected).abs() < 1e-15);
        assert!((lambda_scalar(-10.0, &cfg) - 0.999_664_649).abs() < 1e-9);
    }

    #[test]
    fn fuse_limits_and_midpoint() {
        let zhat = DepthMap::constant(1, 1, 4.0).unwrap();
        let dhat = DepthMap::constant(1, 1, 2.0).unwrap();
        let w = |v| WeightMap::new(1, 1, vec![v]).unwrap();
        assert_eq!(
            fuse_residual(&zhat, &dhat, &w(1.0)).unwrap().values(),
            &[4.0]
        );
        assert_eq!(
            fuse_residual(&zhat, &dhat, &w(0.0)).unwrap().values(),
            &[2.0]
        );
        assert_eq!(
            fuse_residual(&zhat, &dhat, &w(0.5)).unwrap().values(),
            &[3.0]
        );
        assert!(matches!(
            fuse_residual(&zhat, &dhat, &w(1.5)),
            Err(Error::Input(_))
        ));
    }
}
