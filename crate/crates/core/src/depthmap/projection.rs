use super::{CameraIntrinsics, SparseDepthMap};
use crate::error::Result;

/// Projects camera-frame points (meters, Z forward) into a sparse depth map.
///
/// Points with `Z <= 0` or landing outside the image are dropped. When several
/// points land on one pixel the nearest one is kept.
pub fn project_points(points: &[[f64; 3]], k: &CameraIntrinsics) -> Result<SparseDepthMap> {
    k.validate()?;
    let mut values = vec![0.0; k.width * k.height];
    for &[x, y, z] in points {
        if !(z > 0.0) || !x.is_finite() || !y.is_finite() || !z.is_finite() {
            continue;
        }
        let u = (k.fx * x / z + k.cx).round();
        let v = (k.fy * y / z + k.cy).round();
        if u < 0.0 || v < 0.0 || u >= k.width as f64 || v >= k.height as f64 {
            continue;
        }
        let slot = &mut values[v as usize * k.width + u as usize];
        if *slot == 0.0 || z < *slot {
            *slot = z;
        }
    }
    SparseDepthMap::new(k.height, k.width, values)
}
