use super::SceneSpec;
use crate::geometry::PolarGrid;
use crate::metrics::{EvalSetting, InstanceMap, Raster};

/// Standard deviation of the centerness Gaussian, in cells.
pub const CENTER_SIGMA_CELLS: f64 = 3.0;

/// Ground-truth rasters on a rect evaluation grid.
#[derive(Debug, Clone)]
pub struct GtRasters {
    pub seg: Raster<bool>,
    pub instances: InstanceMap,
    pub centerness: Raster<f64>,
    /// Δx and Δy from the cell centre to the owning box centre, metres;
    /// zero on background.
    pub offset: [Raster<f64>; 2],
    /// Box top height on foreground, 0 elsewhere.
    pub height: Raster<f64>,
}

/// Rasterizes box footprints. A cell belongs to a box when its centre lies
/// inside the footprint; when footprints overlap the later box wins.
pub fn rasterize_gt(scene: &SceneSpec, setting: &EvalSetting) -> GtRasters {
    let (rows, cols) = (setting.rows(), setting.cols());
    let n = rows * cols;
    let mut owner = vec![0u32; n];
    let mut center = vec![0.0; n];
    let mut off = [vec![0.0; n], vec![0.0; n]];
    let mut height = vec![0.0; n];
    let two_s2 = 2.0 * (CENTER_SIGMA_CELLS * setting.resolution).powi(2);
    for r in 0..rows {
        for c in 0..cols {
            let i = r * cols + c;
            let (x, y) = setting.cell_center(r, c);
            for (b_idx, b) in scene.boxes.iter().enumerate() {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                center[i] = f64::max(center[i], (-d2 / two_s2).exp());
                if b.contains(x, y) {
                    owner[i] = b_idx as u32 + 1;
                    off[0][i] = b.x - x;
                    off[1][i] = b.y - y;
                    height[i] = b.top;
                }
            }
        }
    }
    let instances = InstanceMap::canonical(Raster {
        rows,
        cols,
        data: owner,
    });
    GtRasters {
        seg: instances.foreground(),
        instances,
        centerness: Raster {
            rows,
            cols,
            data: center,
        },
        offset: off.map(|d| Raster { rows, cols, data: d }),
        height: Raster {
            rows,
            cols,
            data: height,
        },
    }
}

/// Foreground flags and box-top heights at the polar cell centres, in
/// radial-major order. Background cells carry height 0.
pub fn rasterize_polar_heights(scene: &SceneSpec, grid: &PolarGrid) -> (Vec<bool>, Vec<f64>) {
    let mut fg = vec![false; grid.cells()];
    let mut h = vec![0.0; grid.cells()];
    for (i, (x, y)) in grid.centers_xy().into_iter().enumerate() {
        for b in &scene.boxes {
            if b.contains(x, y) {
                fg[i] = true;
                h[i] = b.top;
            }
        }
    }
    (fg, h)
}
