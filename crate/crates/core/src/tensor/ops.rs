//! Resampling kernels shared by the tape and by tape-free callers.

use super::{Scalar, Tensor};

/// 2×2 average pooling over the last two axes of `[C, H, W]`. Odd extents
/// produce a final partial window averaged over the cells it covers.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let d = x.data();
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let mut acc = T::zero();
                for y in ys.clone() {
                    for xx in xs.clone() {
                        acc += d[(ch * h + y) * w + xx];
                    }
                }
                out[(ch * ho + oy) * wo + ox] = acc / T::of((ys.len() * xs.len()) as f64);
            }
        }
    }
    Tensor::from_parts(vec![c, ho, wo], out)
}

pub(crate) fn avg_pool2_backward<T: Scalar>(in_shape: &[usize], grad: &[T]) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..ho {
            let ys = 2 * oy..(2 * oy + 2).min(h);
            for ox in 0..wo {
                let xs = 2 * ox..(2 * ox + 2).min(w);
                let g = grad[(ch * ho + oy) * wo + ox] / T::of((ys.len() * xs.len()) as f64);
                for y in ys.clone() {
                    for xx in xs.clone() {
                        dx[(ch * h + y) * w + xx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour ×2 upsampling of `[C, H, W]` onto `[C, out_h, out_w]`
/// (source index `i / 2`, clamped). Inverts the shape change of
/// [`avg_pool2`].
pub fn upsample_nearest<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Tensor<T> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let d = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let sy = (y / 2).min(h - 1);
            for xx in 0..out_w {
                out.push(d[(ch * h + sy) * w + (xx / 2).min(w - 1)]);
            }
        }
    }
    Tensor::from_parts(vec![c, out_h, out_w], out)
}

pub(crate) fn upsample_nearest_backward<T: Scalar>(in_shape: &[usize], out_h: usize, out_w: usize, grad: &[T]) -> Vec<T> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..out_h {
            let sy = (y / 2).min(h - 1);
            for xx in 0..out_w {
                dx[(ch * h + sy) * w + (xx / 2).min(w - 1)] += grad[(ch * out_h + y) * out_w + xx];
            }
        }
    }
    dx
}
