use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{lift_homogeneous, PolarGrid};
use crate::error::{Error, Result};

/// Points closer to the image plane than this (metres) are invalid.
pub const EPS_DEPTH: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;

/// Pinhole camera. `extrinsics` maps homogeneous ego coordinates to camera
/// coordinates (`+Z` forward, `u` right, `v` down).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub name: String,
    pub intrinsics: [[f64; 3]; 3],
    pub extrinsics: [[f64; 4]; 3],
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub depth: f64,
    pub valid: bool,
}

impl CameraModel {
    /// Builds a camera from intrinsics, an ego→camera rotation and the
    /// camera position in the ego frame.
    pub fn from_pose(
        name: impl Into<String>,
        (fx, fy, cx, cy): (f64, f64, f64, f64),
        rotation: [[f64; 3]; 3],
        position: [f64; 3],
        width: usize,
        height: usize,
    ) -> Self {
        let mut ext = [[0.0; 4]; 3];
        for i in 0..3 {
            ext[i][..3].copy_from_slice(&rotation[i]);
            ext[i][3] = -(0..3).map(|k| rotation[i][k] * position[k]).sum::<f64>();
        }
        CameraModel {
            name: name.into(),
            intrinsics: [[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]],
            extrinsics: ext,
            width,
            height,
        }
    }

    pub fn fx(&self) -> f64 {
        self.intrinsics[0][0]
    }
    pub fn fy(&self) -> f64 {
        self.intrinsics[1][1]
    }
    pub fn cx(&self) -> f64 {
        self.intrinsics[0][2]
    }
    pub fn cy(&self) -> f64 {
        self.intrinsics[1][2]
    }

    fn rot(&self, i: usize, k: usize) -> f64 {
        self.extrinsics[i][k]
    }

    /// Camera centre in the ego frame, `−Rᵀ t`.
    pub fn position(&self) -> [f64; 3] {
        [0, 1, 2].map(|k| -(0..3).map(|i| self.rot(i, k) * self.extrinsics[i][3]).sum::<f64>())
    }

    /// `I · E`, the 3×4 projection matrix.
    pub fn projection_matrix(&self) -> [[f64; 4]; 3] {
        let mut p = [[0.0; 4]; 3];
        for (i, row) in p.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| self.intrinsics[i][k] * self.extrinsics[k][c]).sum();
            }
        }
        p
    }

    /// Checks the model invariants; `path` prefixes field names in errors.
    pub fn validate(&self, path: &str) -> Result<()> {
        let fail = |field: &str, msg: String| {
            Err(Error::Validation {
                path: format!("{path}.{field}"),
                msg,
            })
        };
        let k = &self.intrinsics;
        if !(k[0][0] > 0.0 && k[1][1] > 0.0) {
            return fail("intrinsics", format!("focal lengths must be positive, got fx={}, fy={}", k[0][0], k[1][1]));
        }
        if k[0][1] != 0.0 || k[1][0] != 0.0 || k[2] != [0.0, 0.0, 1.0] {
            return fail("intrinsics", "expected zero skew and last row [0, 0, 1]".into());
        }
        if self.width == 0 || self.height == 0 {
            return fail("width", "image extents must be positive".into());
        }
        let all = k.iter().flatten().chain(self.extrinsics.iter().flatten());
        if all.into_iter().any(|v| !v.is_finite()) {
            return fail("extrinsics", "non-finite calibration entry".into());
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|c| self.rot(i, c) * self.rot(j, c)).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > ORTHO_TOL {
                    return fail("extrinsics", format!("rotation block is not orthonormal (row {i}·row {j} = {dot})"));
                }
            }
        }
        let r = |i, j| self.rot(i, j);
        let det = r(0, 0) * (r(1, 1) * r(2, 2) - r(1, 2) * r(2, 1)) - r(0, 1) * (r(1, 0) * r(2, 2) - r(1, 2) * r(2, 0))
            + r(0, 2) * (r(1, 0) * r(2, 1) - r(1, 1) * r(2, 0));
        if (det - 1.0).abs() > ORTHO_TOL {
            return fail("extrinsics", format!("rotation determinant is {det}, expected +1"));
        }
        Ok(())
    }

    /// Ego-frame point on the ray through pixel `(u, v)` at camera depth
    /// `depth`.
    pub fn backproject(&self, u: f64, v: f64, depth: f64) -> [f64; 3] {
        let xc = [(u - self.cx()) / self.fx() * depth, (v - self.cy()) / self.fy() * depth, depth];
        let d = [0, 1, 2].map(|i| xc[i] - self.extrinsics[i][3]);
        [0, 1, 2].map(|k| (0..3).map(|i| self.rot(i, k) * d[i]).sum())
    }

    /// Unit-free ego-frame direction of the ray through pixel `(u, v)`, scaled
    /// so that its camera-frame depth component is 1.
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        let xc = [(u - self.cx()) / self.fx(), (v - self.cy()) / self.fy(), 1.0];
        [0, 1, 2].map(|k| (0..3).map(|i| self.rot(i, k) * xc[i]).sum())
    }

    pub fn in_image(&self, u: f64, v: f64) -> bool {
        (0.0..=(self.width - 1) as f64).contains(&u) && (0.0..=(self.height - 1) as f64).contains(&v)
    }
}

/// Projects a homogeneous ego point. Invalid results carry `u = v = NaN`.
pub fn project_to_view(w: [f64; 4], cam: &CameraModel) -> Projection {
    let p = cam.projection_matrix();
    let q = [0, 1, 2].map(|i| (0..4).map(|c| p[i][c] * w[c]).sum::<f64>());
    let depth = q[2];
    if depth > EPS_DEPTH {
        let (u, v) = (q[0] / depth, q[1] / depth);
        Projection {
            u,
            v,
            depth,
            valid: cam.in_image(u, v),
        }
    } else {
        Projection {
            u: f64::NAN,
            v: f64::NAN,
            depth,
            valid: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub cameras: Vec<CameraModel>,
}

impl CameraRig {
    pub fn new(cameras: Vec<CameraModel>) -> Result<Self> {
        let rig = CameraRig { cameras };
        rig.validate()?;
        Ok(rig)
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.cameras.is_empty() {
            return Err(Error::Validation {
                path: "cameras".into(),
                msg: "a rig needs at least one camera".into(),
            });
        }
        let mut names = HashSet::new();
        for (i, c) in self.cameras.iter().enumerate() {
            c.validate(&format!("cameras[{i}]"))?;
            if !names.insert(c.name.as_str()) {
                return Err(Error::Validation {
                    path: format!("cameras[{i}].name"),
                    msg: format!("duplicate camera name `{}`", c.name),
                });
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let rig: CameraRig = serde_json::from_slice(&text)?;
        rig.validate()?;
        Ok(rig)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Per-view affine coefficients of the homogeneous image point of every
    /// grid centre as a function of its height: `q = base + z · dir`.
    pub fn grid_coefficients(&self, grid: &PolarGrid) -> Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>)> {
        let centers = grid.centers_xy();
        self.cameras
            .iter()
            .map(|cam| {
                let p = cam.projection_matrix();
                let dir = [p[0][2], p[1][2], p[2][2]];
                let base = centers.iter().map(|&(x, y)| [0, 1, 2].map(|i| p[i][0] * x + p[i][1] * y + p[i][3])).collect();
                (base, vec![dir; centers.len()])
            })
            .collect()
    }
}

/// Pixel coordinates `[K, d_rad, d_ang, 2]` (flattened) and masks
/// `[K, d_rad, d_ang]`.
#[derive(Debug, Clone)]
pub struct GridProjection {
    pub views: usize,
    pub pixels: Vec<f64>,
    pub masks: Vec<bool>,
}

pub fn project_grid(grid: &PolarGrid, heights: &[f64], rig: &CameraRig) -> Result<GridProjection> {
    let n = grid.cells();
    if heights.len() != n {
        return Err(Error::dim("project_grid", &[grid.d_rad, grid.d_ang], &[heights.len()]));
    }
    let centers = grid.centers_xy();
    let mut pixels = Vec::with_capacity(rig.len() * n * 2);
    let mut masks = Vec::with_capacity(rig.len() * n);
    for cam in &rig.cameras {
        for (&(x, y), &z) in centers.iter().zip(heights) {
            let p = project_to_view(lift_homogeneous(x, y, z), cam);
            pixels.extend_from_slice(&[p.u, p.v]);
            masks.push(p.valid);
        }
    }
    Ok(GridProjection {
        views: rig.len(),
        pixels,
        masks,
    })
}
