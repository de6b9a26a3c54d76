//! Stride-1 "same" cross-correlation with per-axis padding.
//!
//! Circular padding along the angular axis of the rearranged polar array and
//! zero padding along the radial axis gives ring convolution. The kernel is
//! evaluated as one GEMM per kernel tap over a padded copy of the input: the
//! output is computed on rows of the padded width and the trailing columns
//! are discarded, so no im2col buffer is ever materialised.

use serde::{Deserialize, Serialize};

use super::gemm::{gemm, Layout};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Zero,
    Circular,
}

struct Geometry {
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ph: usize,
    pw: usize,
    hp: usize,
    wp: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize]) -> Result<Self> {
        if input.len() != 3 || kernel.len() != 4 || input[0] != kernel[1] {
            return Err(Error::dim("conv2d", input, kernel));
        }
        let (kh, kw) = (kernel[2], kernel[3]);
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::config(format!(
                "conv2d kernel extents must be odd, got {kh}x{kw}"
            )));
        }
        let (ph, pw) = ((kh - 1) / 2, (kw - 1) / 2);
        let (h, w) = (input[1], input[2]);
        Ok(Geometry {
            cin: input[0],
            cout: kernel[0],
            h,
            w,
            kh,
            kw,
            ph,
            pw,
            hp: h + 2 * ph,
            wp: w + 2 * pw,
        })
    }

    fn plane(&self) -> usize {
        self.hp * self.wp
    }

    /// Padded buffer length; the slack covers the discarded wide-row columns
    /// of the last channel.
    fn padded_len(&self) -> usize {
        self.cin * self.plane() + 2 * self.pw
    }

    fn wide(&self) -> usize {
        self.h * self.wp
    }
}

/// Source index of padded coordinate `p` on an axis of extent `n` with
/// padding `pad`, or `None` when it falls in a zero pad.
fn source(p: usize, pad: usize, n: usize, mode: PadMode) -> Option<usize> {
    let s = p as isize - pad as isize;
    if (0..n as isize).contains(&s) {
        return Some(s as usize);
    }
    match mode {
        PadMode::Zero => None,
        PadMode::Circular => Some(s.rem_euclid(n as isize) as usize),
    }
}

fn pad_input<T: Scalar>(x: &[T], g: &Geometry, modes: [PadMode; 2]) -> Vec<T> {
    let mut p = vec![T::zero(); g.padded_len()];
    let rows: Vec<Option<usize>> = (0..g.hp).map(|py| source(py, g.ph, g.h, modes[0])).collect();
    let cols: Vec<Option<usize>> = (0..g.wp).map(|px| source(px, g.pw, g.w, modes[1])).collect();
    for c in 0..g.cin {
        let src = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dst = &mut p[c * g.plane()..(c + 1) * g.plane()];
        for (py, sy) in rows.iter().enumerate() {
            let Some(sy) = *sy else { continue };
            let srow = &src[sy * g.w..(sy + 1) * g.w];
            let drow = &mut dst[py * g.wp..(py + 1) * g.wp];
            drow[g.pw..g.pw + g.w].copy_from_slice(srow);
            for px in (0..g.pw).chain(g.pw + g.w..g.wp) {
                if let Some(sx) = cols[px] {
                    drow[px] = srow[sx];
                }
            }
        }
    }
    p
}

fn fold_padded<T: Scalar>(dp: &[T], g: &Geometry, modes: [PadMode; 2], dx: &mut [T]) {
    let rows: Vec<Option<usize>> = (0..g.hp).map(|py| source(py, g.ph, g.h, modes[0])).collect();
    let cols: Vec<Option<usize>> = (0..g.wp).map(|px| source(px, g.pw, g.w, modes[1])).collect();
    for c in 0..g.cin {
        let src = &dp[c * g.plane()..(c + 1) * g.plane()];
        let dst = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for (py, sy) in rows.iter().enumerate() {
            let Some(sy) = *sy else { continue };
            let srow = &src[py * g.wp..(py + 1) * g.wp];
            let drow = &mut dst[sy * g.w..(sy + 1) * g.w];
            for (px, sx) in cols.iter().enumerate() {
                if let Some(sx) = *sx {
                    drow[sx] += srow[px];
                }
            }
        }
    }
}

/// Forward cross-correlation. `input` is `[C_in, H, W]`, `kernel` is
/// `[C_out, C_in, k_h, k_w]`, `modes` gives the padding of the H and W axes.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    modes: [PadMode; 2],
) -> Result<Tensor<T>> {
    let g = Geometry::new(input.shape(), kernel.shape())?;
    let p = pad_input(input.data(), &g, modes);
    let kk = g.kh * g.kw;
    let mut wide = vec![T::zero(); g.cout * g.wide()];
    for ky in 0..g.kh {
        for kx in 0..g.kw {
            let tap = ky * g.kw + kx;
            gemm(
                g.cout,
                g.cin,
                g.wide(),
                T::one(),
                kernel.data(),
                Layout {
                    offset: tap,
                    rs: g.cin * kk,
                    cs: kk,
                },
                &p,
                Layout {
                    offset: ky * g.wp + kx,
                    rs: g.plane(),
                    cs: 1,
                },
                T::one(),
                &mut wide,
                Layout::row_major(0, g.wide()),
            );
        }
    }
    let mut out = Vec::with_capacity(g.cout * g.h * g.w);
    for row in wide.chunks_exact(g.wp) {
        out.extend_from_slice(&row[..g.w]);
    }
    Ok(Tensor::from_parts(vec![g.cout, g.h, g.w], out))
}

/// Gradients of [`conv2d_forward`] with respect to the input and the kernel.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    modes: [PadMode; 2],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    let g = Geometry::new(input.shape(), kernel.shape())?;
    let kk = g.kh * g.kw;
    let mut dwide = vec![T::zero(); g.cout * g.wide()];
    for (src, dst) in grad_out.chunks_exact(g.w).zip(dwide.chunks_exact_mut(g.wp)) {
        dst[..g.w].copy_from_slice(src);
    }
    let wide_layout = Layout::row_major(0, g.wide());

    let dkernel = want_kernel.then(|| {
        let p = pad_input(input.data(), &g, modes);
        let mut dk = vec![T::zero(); kernel.numel()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let tap = ky * g.kw + kx;
                // dK[:, :, tap] = dO · P_tapᵀ
                gemm(
                    g.cout,
                    g.wide(),
                    g.cin,
                    T::one(),
                    &dwide,
                    wide_layout,
                    &p,
                    Layout {
                        offset: ky * g.wp + kx,
                        rs: 1,
                        cs: g.plane(),
                    },
                    T::zero(),
                    &mut dk,
                    Layout {
                        offset: tap,
                        rs: g.cin * kk,
                        cs: kk,
                    },
                );
            }
        }
        dk
    });

    let dinput = want_input.then(|| {
        let mut dp = vec![T::zero(); g.padded_len()];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let tap = ky * g.kw + kx;
                // dP_tap += K_tapᵀ · dO
                gemm(
                    g.cin,
                    g.cout,
                    g.wide(),
                    T::one(),
                    kernel.data(),
                    Layout {
                        offset: tap,
                        rs: kk,
                        cs: g.cin * kk,
                    },
                    &dwide,
                    wide_layout,
                    T::one(),
                    &mut dp,
                    Layout {
                        offset: ky * g.wp + kx,
                        rs: g.plane(),
                        cs: 1,
                    },
                );
            }
        }
        let mut dx = vec![T::zero(); input.numel()];
        fold_padded(&dp, &g, modes, &mut dx);
        dx
    });
    Ok((dinput, dkernel))
}
