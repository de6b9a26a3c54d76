//! Depth-based lift-and-splat transform kept as a frozen comparison
//! baseline. Nothing here is differentiable.

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, PolarGrid};
use crate::tensor::Tensor;

/// Where the lifting depth of each pixel comes from.
#[derive(Debug, Clone)]
pub enum DepthSource {
    /// One `[H, W]` camera-depth map per view at full image resolution.
    /// Non-finite or non-positive entries mean the ray hits nothing.
    PerPixel(Vec<Tensor>),
    /// `bins` depths spaced uniformly in `[near, far]`, each carrying an
    /// equal share of the pixel feature.
    Uniform { bins: usize, near: f64, far: f64 },
}

/// Lifts every feature pixel along its camera ray, splats the lifted points
/// into the polar cells that contain them, averages within each view and
/// sums the per-view averages. Returns `[d_rad, d_ang, C_f]` and the
/// `[K, cells]` flags of cells that received at least one point per view.
pub fn depth_transform(
    grid: &PolarGrid,
    rig: &CameraRig,
    features: &[Tensor],
    feature_stride: f64,
    source: &DepthSource,
) -> Result<(Tensor, Vec<bool>)> {
    if features.len() != rig.len() {
        return Err(Error::config(format!("{} feature maps for a {}-view rig", features.len(), rig.len())));
    }
    if !(feature_stride > 0.0) {
        return Err(Error::config("feature stride must be positive"));
    }
    match source {
        DepthSource::PerPixel(maps) if maps.len() != rig.len() => {
            return Err(Error::config(format!("{} depth maps for a {}-view rig", maps.len(), rig.len())));
        }
        DepthSource::Uniform { bins, near, far } if *bins == 0 || !(*near > 0.0 && near <= far) => {
            return Err(Error::config("uniform depth needs bins > 0 and 0 < near <= far"));
        }
        _ => {}
    }
    let n = grid.cells();
    let cf = features[0].shape()[0];
    let mut out = vec![0.0; n * cf];
    let mut hits = Vec::with_capacity(rig.len() * n);
    for (v, (cam, feat)) in rig.cameras.iter().zip(features).enumerate() {
        let fs = feat.shape();
        if fs.len() != 3 || fs[0] != cf {
            return Err(Error::dim("depth_transform", fs, &[cf]));
        }
        let (hf, wf) = (fs[1], fs[2]);
        let mut sum = vec![0.0; n * cf];
        let mut weight = vec![0.0; n];
        let fd = feat.data();
        for a in 0..hf {
            for b in 0..wf {
                let u = (b as f64 + 0.5) * feature_stride - 0.5;
                let vv = (a as f64 + 0.5) * feature_stride - 0.5;
                let depths: Vec<(f64, f64)> = match source {
                    DepthSource::PerPixel(maps) => {
                        let m = &maps[v];
                        let (mh, mw) = (m.shape()[0], m.shape()[1]);
                        let pu = (u.round().max(0.0) as usize).min(mw - 1);
                        let pv = (vv.round().max(0.0) as usize).min(mh - 1);
                        let d = m.data()[pv * mw + pu];
                        if d.is_finite() && d > 0.0 {
                            vec![(d, 1.0)]
                        } else {
                            vec![]
                        }
                    }
                    DepthSource::Uniform { bins, near, far } => {
                        let step = if *bins > 1 { (far - near) / (*bins - 1) as f64 } else { 0.0 };
                        (0..*bins).map(|i| (near + step * i as f64, 1.0 / *bins as f64)).collect()
                    }
                };
                for (d, w) in depths {
                    let p = cam.backproject(u, vv, d);
                    let Some((fr, fa)) = grid.fractional_index(p[0], p[1]) else { continue };
                    let j = fr.round().clamp(0.0, (grid.d_rad - 1) as f64) as usize;
                    let k = (fa.round() as isize).rem_euclid(grid.d_ang as isize) as usize;
                    let cell = j * grid.d_ang + k;
                    weight[cell] += w;
                    for c in 0..cf {
                        sum[cell * cf + c] += w * fd[(c * hf + a) * wf + b];
                    }
                }
            }
        }
        for cell in 0..n {
            let hit = weight[cell] > 0.0;
            if hit {
                for c in 0..cf {
                    out[cell * cf + c] += sum[cell * cf + c] / weight[cell];
                }
            }
            hits.push(hit);
        }
    }
    Ok((Tensor::new(&[grid.d_rad, grid.d_ang, cf], out)?, hits))
}
