use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::PolarGrid;
use crate::metrics::EvalSetting;
use crate::tensor::{GatherTable, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemapMode {
    Nearest,
    Bilinear,
}

/// Sparse map from the `d_rad × d_ang` polar cells to the rect cells of
/// `setting`. Each rect centre reads the polar array at fractional index
/// `(r/Δr − 0.5, (θ+π)/Δθ − 0.5)`, clamped radially and wrapped angularly;
/// centres at `r ≥ r_max` take `fill`.
pub fn remap_table(grid: &PolarGrid, setting: &EvalSetting, mode: RemapMode, fill: f64) -> Result<GatherTable> {
    setting.validate()?;
    let (nr, na) = (grid.d_rad, grid.d_ang);
    let mut t = GatherTable::new(nr * na);
    for row in 0..setting.rows() {
        for col in 0..setting.cols() {
            let (x, y) = setting.cell_center(row, col);
            let Some((fr, fa)) = grid.fractional_index(x, y) else {
                t.push(&[], fill);
                continue;
            };
            let fr = fr.clamp(0.0, (nr - 1) as f64);
            match mode {
                RemapMode::Nearest => {
                    let j = (fr.round() as usize).min(nr - 1);
                    let k = (fa.round() as isize).rem_euclid(na as isize) as usize;
                    t.push(&[(j * na + k, 1.0)], 0.0);
                }
                RemapMode::Bilinear => {
                    let j0 = (fr.floor() as usize).min(nr - 1);
                    let j1 = (j0 + 1).min(nr - 1);
                    let wr = fr - j0 as f64;
                    let a0 = fa.floor();
                    let wa = fa - a0;
                    let k0 = (a0 as isize).rem_euclid(na as isize) as usize;
                    let k1 = (k0 + 1) % na;
                    let taps = [
                        (j0 * na + k0, (1.0 - wr) * (1.0 - wa)),
                        (j0 * na + k1, (1.0 - wr) * wa),
                        (j1 * na + k0, wr * (1.0 - wa)),
                        (j1 * na + k1, wr * wa),
                    ];
                    let taps: Vec<_> = taps.into_iter().filter(|&(_, w)| w != 0.0).collect();
                    t.push(&taps, 0.0);
                }
            }
        }
    }
    Ok(t)
}

/// Remaps `[C, d_rad, d_ang]` polar data to `[C, rows, cols]`.
pub fn remap_polar_to_rect(
    polar: &Tensor,
    grid: &PolarGrid,
    setting: &EvalSetting,
    mode: RemapMode,
    fill: f64,
) -> Result<Tensor> {
    let s = polar.shape();
    if s.len() != 3 || s[1] != grid.d_rad || s[2] != grid.d_ang {
        return Err(Error::dim("remap_polar_to_rect", s, &[grid.d_rad, grid.d_ang]));
    }
    let table = remap_table(grid, setting, mode, fill)?;
    let out = table.apply(polar.data(), s[0]);
    Tensor::new(&[s[0], setting.rows(), setting.cols()], out)
}
