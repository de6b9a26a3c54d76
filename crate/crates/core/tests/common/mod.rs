//! Independent brute-force oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use polarbev::geometry::{CameraModel, CameraRig};
use polarbev::pipeline::{PipelineConfig, RectTargets};
use polarbev::synth::BoxSpec;
use polarbev::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Direct six-loop cross-correlation, wrapping along the last axis and
/// zero-padding along the first spatial axis.
pub fn ring_conv(x: &Tensor, k: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (o, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = Tensor::zeros(&[o, h, w]);
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for ic in 0..c {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let sy = y as isize + dy as isize - ph;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            let sx = (xx as isize + dx as isize - pw).rem_euclid(w as isize) as usize;
                            acc += k.get(&[oc, ic, dy, dx]) * x.get(&[ic, sy as usize, sx]);
                        }
                    }
                }
                out.set(&[oc, y, xx], acc);
            }
        }
    }
    out
}

/// Rotates every camera of `rig` about the ego vertical axis by `alpha`.
pub fn rotate_rig(rig: &CameraRig, alpha: f64) -> CameraRig {
    let (c, s) = (alpha.cos(), alpha.sin());
    let rz = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]];
    let cams = rig
        .cameras
        .iter()
        .map(|cam| {
            let mut e = cam.extrinsics;
            for i in 0..3 {
                for k in 0..3 {
                    e[i][k] = (0..3).map(|j| cam.extrinsics[i][j] * rz[k][j]).sum();
                }
            }
            CameraModel {
                extrinsics: e,
                ..cam.clone()
            }
        })
        .collect();
    CameraRig::new(cams).unwrap()
}

/// A random rotation from three Euler angles, returned as rows.
pub fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let (a, b, g) = (
        rng.random_range(-3.1..3.1),
        rng.random_range(-1.5..1.5),
        rng.random_range(-3.1..3.1),
    );
    let rz = |t: f64| [[t.cos(), -t.sin(), 0.0], [t.sin(), t.cos(), 0.0], [0.0, 0.0, 1.0]];
    let ry = |t: f64| [[t.cos(), 0.0, t.sin()], [0.0, 1.0, 0.0], [-t.sin(), 0.0, t.cos()]];
    let mul = |p: [[f64; 3]; 3], q: [[f64; 3]; 3]| {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                r[i][j] = (0..3).map(|k| p[i][k] * q[k][j]).sum();
            }
        }
        r
    };
    mul(mul(rz(a), ry(b)), rz(g))
}

pub fn random_camera(rng: &mut ChaCha8Rng) -> CameraModel {
    let (w, h) = (rng.random_range(16..200), rng.random_range(16..200));
    let f = rng.random_range(20.0..400.0);
    let fy = f * rng.random_range(0.8..1.2);
    let pos = [rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(0.0..4.0)];
    let c = (rng.random_range(0.0..w as f64), rng.random_range(0.0..h as f64));
    CameraModel::from_pose("c", (f, fy, c.0, c.1), random_rotation(rng), pos, w, h)
}

/// Random instance map with ids drawn from `0..=max_id` (0 = background),
/// in blobs grown from random seeds so segments are spatially coherent.
pub fn random_labels(rng: &mut ChaCha8Rng, rows: usize, cols: usize, max_id: u32) -> Vec<u32> {
    let mut v = vec![0u32; rows * cols];
    for id in 1..=max_id {
        let (r0, c0) = (rng.random_range(0..rows), rng.random_range(0..cols));
        let (hr, hc) = (rng.random_range(0..4), rng.random_range(0..4));
        for r in r0.saturating_sub(hr)..(r0 + hr + 1).min(rows) {
            for c in c0.saturating_sub(hc)..(c0 + hc + 1).min(cols) {
                if rng.random_bool(0.85) {
                    v[r * cols + c] = id;
                }
            }
        }
    }
    v
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BrutePq {
    pub rq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Panoptic quality by exhaustive pair enumeration: every (gt, pred)
/// segment pair is scored and kept when its IoU exceeds one half.
pub fn brute_pq(pred: &[u32], gt: &[u32]) -> BrutePq {
    let ids = |m: &[u32]| m.iter().copied().filter(|&x| x > 0).collect::<BTreeSet<u32>>();
    let (pi, gi) = (ids(pred), ids(gt));
    let mut matched_p = BTreeSet::new();
    let mut matched_g = BTreeSet::new();
    let mut iou_sum = 0.0;
    for &g in &gi {
        for &p in &pi {
            let inter = pred.iter().zip(gt).filter(|(&a, &b)| a == p && b == g).count();
            let union = pred.iter().zip(gt).filter(|(&a, &b)| a == p || b == g).count();
            let iou = inter as f64 / union as f64;
            if iou > 0.5 {
                assert!(matched_p.insert(p) && matched_g.insert(g), "matching must be unique");
                iou_sum += iou;
            }
        }
    }
    let tp = matched_g.len();
    let fp = pi.len() - matched_p.len();
    let fn_ = gi.len() - matched_g.len();
    if tp + fp + fn_ == 0 {
        return BrutePq {
            rq: 1.0,
            sq: 1.0,
            pq: 1.0,
            tp,
            fp,
            fn_,
        };
    }
    let sq = if tp == 0 { 0.0 } else { iou_sum / tp as f64 };
    let rq = tp as f64 / (tp as f64 + 0.5 * fp as f64 + 0.5 * fn_ as f64);
    BrutePq {
        rq,
        sq,
        pq: sq * rq,
        tp,
        fp,
        fn_,
    }
}

/// Closed-form intersection of the ray `o + t·d` with the plane `z = 0`.
pub fn ray_ground(o: [f64; 3], d: [f64; 3]) -> Option<[f64; 3]> {
    if d[2] >= 0.0 {
        return None;
    }
    let t = -o[2] / d[2];
    Some([o[0] + t * d[0], o[1] + t * d[1], 0.0])
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Segmentation cross-entropy, centerness MSE and masked offset L1 written
/// out element by element.
pub fn scalar_loss_oracle(seg: &[f64], cen: &[f64], off: &[f64], t: &RectTargets<f64>, cfg: &PipelineConfig) -> f64 {
    let n = t.rows * t.cols;
    let (mut ce, mut wsum) = (0.0, 0.0);
    for i in 0..n {
        let (l0, l1) = (seg[i], seg[n + i]);
        let m = l0.max(l1);
        let lse = m + ((l0 - m).exp() + (l1 - m).exp()).ln();
        let y = t.seg[i];
        let w = if y == 1 { cfg.pos_weight } else { 1.0 };
        ce += w * (lse - if y == 1 { l1 } else { l0 });
        wsum += w;
    }
    let mse = (0..n).map(|i| (cen[i] - t.center[i]).powi(2)).sum::<f64>() / n as f64;
    let mut l1 = 0.0;
    let mut count = 0;
    for i in 0..n {
        if t.mask[i] {
            count += 1;
            for k in 0..2 {
                l1 += (off[k * n + i] - t.offset[k * n + i]).abs();
            }
        }
    }
    let l1 = if count == 0 { 0.0 } else { l1 / (2 * count) as f64 };
    ce / wsum + cfg.lambda_center * mse + cfg.lambda_offset * l1
}

/// Footprint samples on a 5 cm lattice including the edges.
pub fn footprint_samples(b: &BoxSpec) -> Vec<(f64, f64)> {
    let (nl, nw) = ((b.length / 0.05).ceil() as usize, (b.width / 0.05).ceil() as usize);
    let (s, c) = b.yaw.sin_cos();
    let mut out = Vec::new();
    for i in 0..=nl {
        for j in 0..=nw {
            let a = -0.5 * b.length + b.length * i as f64 / nl as f64;
            let w = -0.5 * b.width + b.width * j as f64 / nw as f64;
            out.push((b.x + c * a - s * w, b.y + s * a + c * w));
        }
    }
    out
}
