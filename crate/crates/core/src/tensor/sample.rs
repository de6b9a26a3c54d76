//! Bilinear sampling of feature maps and fixed sparse linear gathers.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Four-neighbour stencil of a clamped sample point.
#[derive(Debug, Clone, Copy)]
struct Stencil<T> {
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    fx: T,
    fy: T,
    /// Whether the coordinate was inside `[0, extent-1]`; clamped coordinates
    /// have zero derivative.
    free_x: bool,
    free_y: bool,
}

fn axis<T: Scalar>(c: T, n: usize) -> (usize, usize, T, bool) {
    let hi = T::of((n - 1) as f64);
    let free = c >= T::zero() && c <= hi;
    let c = c.max(T::zero()).min(hi);
    if n == 1 {
        return (0, 0, T::zero(), false);
    }
    let i0 = c.floor().to_usize().unwrap_or(0).min(n - 2);
    let f = c - T::of(i0 as f64);
    (i0, i0 + 1, f, free)
}

fn stencil<T: Scalar>(u: T, v: T, h: usize, w: usize) -> Stencil<T> {
    let (x0, x1, fx, free_x) = axis(u, w);
    let (y0, y1, fy, free_y) = axis(v, h);
    Stencil {
        x0,
        x1,
        y0,
        y1,
        fx,
        fy,
        free_x,
        free_y,
    }
}

fn check(feature: &[usize], points: &[usize]) -> Result<()> {
    if feature.len() != 3 || points.len() != 2 || points[1] != 2 {
        return Err(Error::dim("bilinear_sample", feature, points));
    }
    Ok(())
}

/// Samples `feature` (`[C, H, W]`) at `points` (`[N, 2]`, pixel units,
/// `(u, v)` with `u` along the width). Returns `[N, C]`. Coordinates outside
/// the pixel-centre range clamp to the edge.
pub fn bilinear_sample<T: Scalar>(feature: &Tensor<T>, points: &Tensor<T>) -> Result<Tensor<T>> {
    check(feature.shape(), points.shape())?;
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let n = points.shape()[0];
    let f = feature.data();
    let mut out = vec![T::zero(); n * c];
    for (i, p) in points.data().chunks_exact(2).enumerate() {
        let s = stencil(p[0], p[1], h, w);
        let one = T::one();
        let w00 = (one - s.fx) * (one - s.fy);
        let w01 = s.fx * (one - s.fy);
        let w10 = (one - s.fx) * s.fy;
        let w11 = s.fx * s.fy;
        let row = &mut out[i * c..(i + 1) * c];
        for (ch, o) in row.iter_mut().enumerate() {
            let base = ch * h * w;
            *o = w00 * f[base + s.y0 * w + s.x0]
                + w01 * f[base + s.y0 * w + s.x1]
                + w10 * f[base + s.y1 * w + s.x0]
                + w11 * f[base + s.y1 * w + s.x1];
        }
    }
    Ok(Tensor::from_parts(vec![n, c], out))
}

/// Backward of [`bilinear_sample`]: gradients for the feature map and for the
/// sample coordinates.
pub fn bilinear_sample_backward<T: Scalar>(
    feature: &Tensor<T>,
    points: &Tensor<T>,
    grad_out: &[T],
    want_feature: bool,
    want_points: bool,
) -> Result<(Option<Vec<T>>, Option<Vec<T>>)> {
    check(feature.shape(), points.shape())?;
    let (c, h, w) = (feature.shape()[0], feature.shape()[1], feature.shape()[2]);
    let f = feature.data();
    let mut df = want_feature.then(|| vec![T::zero(); feature.numel()]);
    let mut dp = want_points.then(|| vec![T::zero(); points.numel()]);
    let one = T::one();
    for (i, p) in points.data().chunks_exact(2).enumerate() {
        let s = stencil(p[0], p[1], h, w);
        let g = &grad_out[i * c..(i + 1) * c];
        if let Some(df) = df.as_mut() {
            let w00 = (one - s.fx) * (one - s.fy);
            let w01 = s.fx * (one - s.fy);
            let w10 = (one - s.fx) * s.fy;
            let w11 = s.fx * s.fy;
            for (ch, &gv) in g.iter().enumerate() {
                let base = ch * h * w;
                df[base + s.y0 * w + s.x0] += w00 * gv;
                df[base + s.y0 * w + s.x1] += w01 * gv;
                df[base + s.y1 * w + s.x0] += w10 * gv;
                df[base + s.y1 * w + s.x1] += w11 * gv;
            }
        }
        if let Some(dp) = dp.as_mut() {
            let (mut du, mut dv) = (T::zero(), T::zero());
            for (ch, &gv) in g.iter().enumerate() {
                let base = ch * h * w;
                let f00 = f[base + s.y0 * w + s.x0];
                let f01 = f[base + s.y0 * w + s.x1];
                let f10 = f[base + s.y1 * w + s.x0];
                let f11 = f[base + s.y1 * w + s.x1];
                du += gv * ((one - s.fy) * (f01 - f00) + s.fy * (f11 - f10));
                dv += gv * ((one - s.fx) * (f10 - f00) + s.fx * (f11 - f01));
            }
            if s.free_x {
                dp[2 * i] = du;
            }
            if s.free_y {
                dp[2 * i + 1] = dv;
            }
        }
    }
    Ok((df, dp))
}

/// A fixed sparse linear map from `n_src` source positions to `n_dst`
/// destinations: `dst[j] = fill[j] + Σ weight · src[index]`, applied per
/// channel. Used for polar to rectangular remapping.
#[derive(Debug, Clone)]
pub struct GatherTable {
    pub n_src: usize,
    offsets: Vec<usize>,
    indices: Vec<usize>,
    weights: Vec<f64>,
    fill: Vec<f64>,
}

impl GatherTable {
    pub fn new(n_src: usize) -> Self {
        GatherTable {
            n_src,
            offsets: vec![0],
            indices: Vec::new(),
            weights: Vec::new(),
            fill: Vec::new(),
        }
    }

    /// Appends a destination made of `(source index, weight)` pairs plus a
    /// constant.
    pub fn push(&mut self, taps: &[(usize, f64)], fill: f64) {
        for &(i, w) in taps {
            assert!(i < self.n_src, "gather tap out of range");
            self.indices.push(i);
            self.weights.push(w);
        }
        self.offsets.push(self.indices.len());
        self.fill.push(fill);
    }

    pub fn n_dst(&self) -> usize {
        self.fill.len()
    }

    pub fn taps(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let r = self.offsets[j]..self.offsets[j + 1];
        self.indices[r.clone()].iter().copied().zip(self.weights[r].iter().copied())
    }

    /// Applies the map to every row of a `[C, n_src]` buffer.
    pub fn apply<T: Scalar>(&self, src: &[T], channels: usize) -> Vec<T> {
        let nd = self.n_dst();
        let mut out = vec![T::zero(); channels * nd];
        for c in 0..channels {
            let s = &src[c * self.n_src..(c + 1) * self.n_src];
            let o = &mut out[c * nd..(c + 1) * nd];
            for (j, oj) in o.iter_mut().enumerate() {
                let mut acc = T::of(self.fill[j]);
                for (i, w) in self.taps(j) {
                    acc += T::of(w) * s[i];
                }
                *oj = acc;
            }
        }
        out
    }

    pub fn apply_transpose<T: Scalar>(&self, grad: &[T], channels: usize) -> Vec<T> {
        let nd = self.n_dst();
        let mut out = vec![T::zero(); channels * self.n_src];
        for c in 0..channels {
            let g = &grad[c * nd..(c + 1) * nd];
            let o = &mut out[c * self.n_src..(c + 1) * self.n_src];
            for (j, &gj) in g.iter().enumerate() {
                for (i, w) in self.taps(j) {
                    o[i] += T::of(w) * gj;
                }
            }
        }
        out
    }
}
