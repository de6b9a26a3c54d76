//! Polar BEV grid and pinhole multi-camera geometry.
//!
//! The ego frame is right-handed with `z` up; the ground is `z = 0`. Polar
//! cells are stored radial-major: row `j` is the radial bin, column `k` the
//! angular bin, so a `[d_rad, d_ang]` array is the rearranged polar grid.

mod camera;

pub use camera::{project_grid, project_to_view, CameraModel, CameraRig, GridProjection, Projection, EPS_DEPTH};

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarGrid {
    pub r_max: f64,
    pub d_rad: usize,
    pub d_ang: usize,
}

pub fn build_polar_grid(r_max: f64, d_rad: usize, d_ang: usize) -> Result<PolarGrid> {
    if !(r_max > 0.0 && r_max.is_finite()) || d_rad == 0 || d_ang == 0 {
        return Err(Error::config(format!(
            "polar grid needs r_max > 0 and positive bin counts, got r_max={r_max}, d_rad={d_rad}, d_ang={d_ang}"
        )));
    }
    Ok(PolarGrid { r_max, d_rad, d_ang })
}

impl PolarGrid {
    pub fn dr(&self) -> f64 {
        self.r_max / self.d_rad as f64
    }

    pub fn dtheta(&self) -> f64 {
        2.0 * PI / self.d_ang as f64
    }

    pub fn cells(&self) -> usize {
        self.d_rad * self.d_ang
    }

    pub fn radius(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.dr()
    }

    pub fn angle(&self, k: usize) -> f64 {
        -PI + (k as f64 + 0.5) * self.dtheta()
    }

    pub fn center(&self, j: usize, k: usize) -> (f64, f64) {
        (self.radius(j), self.angle(k))
    }

    /// Cartesian centres of every cell, radial-major.
    pub fn centers_xy(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.cells());
        for j in 0..self.d_rad {
            let r = self.radius(j);
            for k in 0..self.d_ang {
                out.push(polar_to_cartesian(r, self.angle(k)));
            }
        }
        out
    }

    /// Area of a cell in radial bin `j`.
    pub fn cell_area(&self, j: usize) -> f64 {
        let dr = self.dr();
        let (r0, r1) = (j as f64 * dr, (j + 1) as f64 * dr);
        0.5 * self.dtheta() * (r1 * r1 - r0 * r0)
    }

    /// Fractional `(row, col)` index of an ego point, in the convention where
    /// integer values sit on cell centres. `None` beyond `r_max`.
    pub fn fractional_index(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let (r, th) = cartesian_to_polar(x, y);
        (r < self.r_max).then(|| (r / self.dr() - 0.5, (th + PI) / self.dtheta() - 0.5))
    }
}

pub fn polar_to_cartesian(r: f64, theta: f64) -> (f64, f64) {
    (r * theta.cos(), r * theta.sin())
}

/// Inverse of [`polar_to_cartesian`], with `θ ∈ [−π, π)`.
pub fn cartesian_to_polar(x: f64, y: f64) -> (f64, f64) {
    let th = y.atan2(x);
    (x.hypot(y), if th >= PI { th - 2.0 * PI } else { th })
}

pub fn lift_homogeneous(x: f64, y: f64, z: f64) -> [f64; 4] {
    [x, y, z, 1.0]
}
