//! Reverse-mode tape.
//!
//! Nodes are appended in evaluation order; a node only ever refers to earlier
//! nodes, so walking the list backwards is a valid topological order and the
//! backward pass is fully deterministic.

use std::sync::Arc;

use super::conv::{conv2d_backward, conv2d_forward, PadMode};
use super::gemm::{gemm, Layout};
use super::ops::{avg_pool2, avg_pool2_backward, upsample_nearest, upsample_nearest_backward};
use super::sample::{bilinear_sample, bilinear_sample_backward, GatherTable};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalisation statistics source for [`Tape::normalize_channels`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NormMode {
    /// Statistics of the tensor being normalised.
    Batch,
    /// Frozen statistics supplied by the caller (running averages).
    Frozen,
}

enum Op<T: Scalar> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Clamp(Var, T, T),
    Sum(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat(Vec<Var>),
    Conv2d {
        input: Var,
        kernel: Var,
        modes: [PadMode; 2],
    },
    ChannelAffine {
        x: Var,
        scale: Option<Var>,
        bias: Option<Var>,
    },
    AddBiasLast(Var, Var),
    BroadcastAdd {
        base: Var,
        rows: Var,
        cols: Var,
    },
    Normalize {
        x: Var,
        inv_std: Vec<T>,
        frozen: bool,
    },
    AvgPool2(Var),
    Upsample(Var),
    Perspective {
        z: Var,
        du: Vec<T>,
        dv: Vec<T>,
    },
    Bilinear {
        feature: Var,
        points: Var,
    },
    ScaleRows(Var, Vec<T>),
    Gather(Var, Arc<GatherTable>),
    CrossEntropy {
        logits: Var,
        targets: Arc<Vec<usize>>,
        class_weights: Vec<T>,
    },
    Mse(Var, Arc<Vec<T>>),
    MaskedL1 {
        pred: Var,
        target: Arc<Vec<T>>,
        mask: Arc<Vec<bool>>,
    },
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation. A tape is single
/// owner; parallel evaluation uses one tape per worker.
pub struct Tape<T: Scalar = f64> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Copies the gradient of `v` into `t.grad` (zeros when `v` was not
    /// reached from the loss).
    pub fn write_into<U: Scalar>(&self, v: Var, t: &mut Tensor<U>) {
        let g = match self.get(v) {
            Some(g) => g.iter().map(|x| U::of(x.f64())).collect(),
            None => vec![U::zero(); t.numel()],
        };
        t.grad = Some(g);
    }
}

/// Logistic function, evaluated without overflow for large `|x|`.
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that only evaluates: nothing is saved for backward.
    pub fn inference() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor; it participates in differentiation iff its
    /// `requires_grad` flag is set.
    pub fn leaf(&mut self, mut t: Tensor<T>) -> Var {
        let rg = t.requires_grad;
        t.grad = None;
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, mut t: Tensor<T>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Registers an `f64` parameter, casting to the tape precision.
    pub fn param(&mut self, t: &Tensor<f64>) -> Var {
        self.leaf(t.cast())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    }

    fn map(&self, a: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let x = self.value(a);
        Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&p| f(p)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |p, q| p + q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |p, q| p - q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |p, q| p * q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(v, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |p| p * s);
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let v = self.map(a, |p| p + s);
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(v, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |p| p.max(T::zero()));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Elementwise clamp to `[lo, hi]`; the gradient is zero where an
    /// element was clipped.
    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Var {
        let v = self.map(a, |p| p.max(lo).min(hi));
        let rg = self.rg(a);
        self.push(v, Op::Clamp(a, lo, hi), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            Layout::row_major(0, k),
            self.value(b).data(),
            Layout::row_major(0, n),
            T::zero(),
            &mut out,
            Layout::row_major(0, n),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (r, c) = (s[0], s[1]);
        let d = self.value(a).data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(v, Op::Reshape(a), rg))
    }

    /// Concatenation along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::config("concat of nothing"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(Error::dim("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec()), rg))
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, modes: [PadMode; 2]) -> Result<Var> {
        let v = conv2d_forward(self.value(input), self.value(kernel), modes)?;
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(v, Op::Conv2d { input, kernel, modes }, rg))
    }

    /// `y[c, ...] = x[c, ...] * scale[c] + bias[c]`.
    pub fn channel_affine(&mut self, x: Var, scale: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        for v in scale.iter().chain(bias.iter()) {
            if self.shape(*v) != [c] {
                return Err(Error::dim("channel_affine", &xs, self.shape(*v)));
            }
        }
        let inner = self.value(x).numel() / c;
        let mut out = self.value(x).data().to_vec();
        for ch in 0..c {
            let s = scale.map_or(T::one(), |s| self.value(s).data()[ch]);
            let b = bias.map_or(T::zero(), |b| self.value(b).data()[ch]);
            for o in &mut out[ch * inner..(ch + 1) * inner] {
                *o = *o * s + b;
            }
        }
        let rg = self.rg(x) || scale.is_some_and(|s| self.rg(s)) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_parts(xs, out), Op::ChannelAffine { x, scale, bias }, rg))
    }

    /// Adds a `[C]` bias to every row of an `[N, C]` matrix.
    pub fn add_bias_last(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xs, bs) = (self.shape(x), self.shape(bias));
        if xs.len() != 2 || bs != [xs[1]] {
            return Err(Error::dim("add_bias_last", xs, bs));
        }
        let c = xs[1];
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(c) {
            for (o, &bv) in row.iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let shape = xs.to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddBiasLast(x, bias), rg))
    }

    /// `out[r, a, :] = base[r, a, :] + rows[r, :] + cols[a, :]`.
    pub fn broadcast_add(&mut self, base: Var, rows: Var, cols: Var) -> Result<Var> {
        let bs = self.shape(base).to_vec();
        let (rs, cs) = (self.shape(rows).to_vec(), self.shape(cols).to_vec());
        if bs.len() != 3 || rs != [bs[0], bs[2]] {
            return Err(Error::dim("broadcast_add", &bs, &rs));
        }
        if cs != [bs[1], bs[2]] {
            return Err(Error::dim("broadcast_add", &bs, &cs));
        }
        let (nr, na, c) = (bs[0], bs[1], bs[2]);
        let (b, r, k) = (self.value(base).data(), self.value(rows).data(), self.value(cols).data());
        let mut out = vec![T::zero(); nr * na * c];
        for i in 0..nr {
            for j in 0..na {
                let o = (i * na + j) * c;
                for ch in 0..c {
                    out[o + ch] = b[o + ch] + r[i * c + ch] + k[j * c + ch];
                }
            }
        }
        let rg = self.rg(base) || self.rg(rows) || self.rg(cols);
        Ok(self.push(Tensor::from_parts(bs, out), Op::BroadcastAdd { base, rows, cols }, rg))
    }

    /// Per-channel standardisation of `[C, ...]` over all non-channel axes.
    /// Returns the output plus the channel means and variances used. With
    /// [`NormMode::Frozen`], `frozen` supplies `(mean, var)` and they are
    /// treated as constants.
    pub fn normalize_channels(
        &mut self,
        x: Var,
        eps: T,
        mode: NormMode,
        frozen: Option<(&[T], &[T])>,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        let m = self.value(x).numel() / c;
        let d = self.value(x).data();
        let (mean, var) = match (mode, frozen) {
            (NormMode::Batch, _) => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let s = &d[ch * m..(ch + 1) * m];
                    let mu = s.iter().copied().sum::<T>() / T::of(m as f64);
                    let v = s.iter().map(|&p| (p - mu) * (p - mu)).sum::<T>() / T::of(m as f64);
                    mean[ch] = mu;
                    var[ch] = v;
                }
                (mean, var)
            }
            (NormMode::Frozen, Some((mu, v))) if mu.len() == c && v.len() == c => (mu.to_vec(), v.to_vec()),
            (NormMode::Frozen, _) => return Err(Error::config("frozen normalisation needs per-channel statistics")),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut out = d.to_vec();
        for ch in 0..c {
            for o in &mut out[ch * m..(ch + 1) * m] {
                *o = (*o - mean[ch]) * inv_std[ch];
            }
        }
        let rg = self.rg(x);
        let frozen = mode == NormMode::Frozen;
        let v = self.push(Tensor::from_parts(xs, out), Op::Normalize { x, inv_std, frozen }, rg);
        Ok((v, mean, var))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 3 {
            return Err(Error::dim("avg_pool2", self.shape(x), &[3]));
        }
        let v = avg_pool2(self.value(x));
        let rg = self.rg(x);
        Ok(self.push(v, Op::AvgPool2(x), rg))
    }

    pub fn upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 3 || out_h.div_ceil(2) != s[1] || out_w.div_ceil(2) != s[2] {
            return Err(Error::dim("upsample", s, &[out_h, out_w]));
        }
        let v = upsample_nearest(self.value(x), out_h, out_w);
        let rg = self.rg(x);
        Ok(self.push(v, Op::Upsample(x), rg))
    }

    /// Pinhole projection of points whose height is a tape variable.
    ///
    /// For element `i`, the homogeneous image point is
    /// `q = base[i] + z[i] * dir[i]` (3-vectors from the camera matrix).
    /// Returns `[N, 2]` pixel coordinates `(q1/q3, q2/q3)` and the validity
    /// flag `q3 > eps`; invalid rows hold `(0, 0)` with zero derivative.
    pub fn perspective(&mut self, z: Var, base: &[[f64; 3]], dir: &[[f64; 3]], eps: f64) -> Result<(Var, Vec<bool>)> {
        let n = self.value(z).numel();
        if base.len() != n || dir.len() != n {
            return Err(Error::dim("perspective", &[n], &[base.len(), dir.len()]));
        }
        let zd = self.value(z).data();
        let mut pts = vec![T::zero(); 2 * n];
        let mut du = vec![T::zero(); n];
        let mut dv = vec![T::zero(); n];
        let mut valid = vec![false; n];
        for i in 0..n {
            let zi = zd[i].f64();
            let q = [0, 1, 2].map(|k| base[i][k] + zi * dir[i][k]);
            if q[2] > eps {
                let inv = 1.0 / q[2];
                pts[2 * i] = T::of(q[0] * inv);
                pts[2 * i + 1] = T::of(q[1] * inv);
                du[i] = T::of((dir[i][0] * q[2] - q[0] * dir[i][2]) * inv * inv);
                dv[i] = T::of((dir[i][1] * q[2] - q[1] * dir[i][2]) * inv * inv);
                valid[i] = true;
            }
        }
        let rg = self.rg(z);
        let v = self.push(Tensor::from_parts(vec![n, 2], pts), Op::Perspective { z, du, dv }, rg);
        Ok((v, valid))
    }

    pub fn bilinear_sample(&mut self, feature: Var, points: Var) -> Result<Var> {
        let v = bilinear_sample(self.value(feature), self.value(points))?;
        let rg = self.rg(feature) || self.rg(points);
        Ok(self.push(v, Op::Bilinear { feature, points }, rg))
    }

    /// Multiplies row `i` of `[N, ...]` by the constant `w[i]`.
    pub fn scale_rows(&mut self, x: Var, w: Vec<T>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s[0] != w.len() {
            return Err(Error::dim("scale_rows", &s, &[w.len()]));
        }
        let inner = self.value(x).numel() / s[0];
        let mut out = self.value(x).data().to_vec();
        for (row, &wi) in out.chunks_exact_mut(inner).zip(&w) {
            for o in row {
                *o *= wi;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(s, out), Op::ScaleRows(x, w), rg))
    }

    /// Applies a [`GatherTable`] to each channel of `[C, ...]` (flattened
    /// trailing axes), producing `[C, out_shape...]`.
    pub fn gather(&mut self, x: Var, table: Arc<GatherTable>, out_shape: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = s[0];
        let n: usize = s[1..].iter().product();
        if n != table.n_src || out_shape.iter().product::<usize>() != table.n_dst() {
            return Err(Error::dim("gather", &s, out_shape));
        }
        let out = table.apply(self.value(x).data(), c);
        let mut shape = vec![c];
        shape.extend_from_slice(out_shape);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gather(x, table), rg))
    }

    /// Mean (class-weighted) softmax cross-entropy of `[K, ...]` logits
    /// against per-cell class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<Vec<usize>>, class_weights: &[T]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let k = s[0];
        let n = self.value(logits).numel() / k;
        if targets.len() != n || class_weights.len() != k {
            return Err(Error::dim("cross_entropy", &s, &[targets.len()]));
        }
        let d = self.value(logits).data();
        let (mut total, mut wsum) = (T::zero(), T::zero());
        for (j, &t) in targets.iter().enumerate() {
            if t >= k {
                return Err(Error::config(format!("class index {t} out of range for {k} classes")));
            }
            let mx = (0..k).map(|c| d[c * n + j]).fold(T::neg_infinity(), T::max);
            let lse = mx + (0..k).map(|c| (d[c * n + j] - mx).exp()).sum::<T>().ln();
            total += class_weights[t] * (lse - d[t * n + j]);
            wsum += class_weights[t];
        }
        let rg = self.rg(logits);
        let v = Tensor::scalar(total / wsum);
        Ok(self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets,
                class_weights: class_weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Arc<Vec<T>>) -> Result<Var> {
        let p = self.value(pred);
        if p.numel() != target.len() {
            return Err(Error::dim("mse", p.shape(), &[target.len()]));
        }
        let s = p.data().iter().zip(target.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>();
        let v = Tensor::scalar(s / T::of(target.len() as f64));
        let rg = self.rg(pred);
        Ok(self.push(v, Op::Mse(pred, target), rg))
    }

    /// Mean absolute error of `[K, N]` predictions over the cells where
    /// `mask` is set; exactly zero when the mask is empty.
    pub fn masked_l1(&mut self, pred: Var, target: Arc<Vec<T>>, mask: Arc<Vec<bool>>) -> Result<Var> {
        let p = self.value(pred);
        let n = mask.len();
        if p.numel() != target.len() || n == 0 || p.numel() % n != 0 {
            return Err(Error::dim("masked_l1", p.shape(), &[target.len(), n]));
        }
        let k = p.numel() / n;
        let count = mask.iter().filter(|&&m| m).count();
        let mut s = T::zero();
        for c in 0..k {
            for j in (0..n).filter(|&j| mask[j]) {
                s += (p.data()[c * n + j] - target[c * n + j]).abs();
            }
        }
        let v = if count == 0 {
            T::zero()
        } else {
            s / T::of((count * k) as f64)
        };
        let rg = self.rg(pred);
        Ok(self.push(Tensor::scalar(v), Op::MaskedL1 { pred, target, mask }, rg))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.grad_enabled {
            return Err(Error::config("backward on an inference tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::dim("backward", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads)?;
            }
            // only leaf gradients are kept; intermediates are released as we go
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(g) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a).data(), val(*b).data());
                if self.rg(*a) {
                    self.acc(grads, *a, g.iter().zip(y).map(|(&gi, &yi)| gi * yi).collect());
                }
                if self.rg(*b) {
                    self.acc(grads, *b, g.iter().zip(x).map(|(&gi, &xi)| gi * xi).collect());
                }
            }
            Op::Scale(a, s) => self.acc(grads, *a, g.iter().map(|&x| x * *s).collect()),
            Op::AddScalar(a) | Op::Reshape(a) => self.acc(grads, *a, g.to_vec()),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.acc(grads, *a, g.iter().zip(y).map(|(&gi, &s)| gi * s * (T::one() - s)).collect());
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                let pass = |xi: T| xi >= *lo && xi <= *hi;
                self.acc(grads, *a, g.iter().zip(x).map(|(&gi, &xi)| if pass(xi) { gi } else { T::zero() }).collect());
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                self.acc(
                    grads,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                        .collect(),
                );
            }
            Op::Sum(a) => {
                let n = val(*a).numel();
                self.acc(grads, *a, vec![g[0]; n]);
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.rg(*a) {
                    let mut da = vec![T::zero(); m * k];
                    gemm(m, n, k, T::one(), g, Layout::row_major(0, n), bv.data(), Layout::row_major(0, n).t(), T::zero(), &mut da, Layout::row_major(0, k));
                    self.acc(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![T::zero(); k * n];
                    gemm(k, m, n, T::one(), av.data(), Layout::row_major(0, k).t(), g, Layout::row_major(0, n), T::zero(), &mut db, Layout::row_major(0, n));
                    self.acc(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut out = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = g[i * c + j];
                    }
                }
                self.acc(grads, *a, out);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = val(p).numel();
                    self.acc(grads, p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Conv2d { input, kernel, modes } => {
                let (di, dk) = conv2d_backward(val(*input), val(*kernel), *modes, g, self.rg(*input), self.rg(*kernel))?;
                if let Some(di) = di {
                    self.acc(grads, *input, di);
                }
                if let Some(dk) = dk {
                    self.acc(grads, *kernel, dk);
                }
            }
            Op::ChannelAffine { x, scale, bias } => {
                let xv = val(*x);
                let c = xv.shape()[0];
                let inner = xv.numel() / c;
                if self.rg(*x) {
                    let mut dx = g.to_vec();
                    if let Some(s) = scale {
                        let sv = val(*s).data();
                        for ch in 0..c {
                            for d in &mut dx[ch * inner..(ch + 1) * inner] {
                                *d *= sv[ch];
                            }
                        }
                    }
                    self.acc(grads, *x, dx);
                }
                if let Some(s) = scale.filter(|s| self.rg(*s)) {
                    let ds = (0..c)
                        .map(|ch| {
                            let r = ch * inner..(ch + 1) * inner;
                            g[r.clone()].iter().zip(&xv.data()[r]).map(|(&a, &b)| a * b).sum()
                        })
                        .collect();
                    self.acc(grads, s, ds);
                }
                if let Some(b) = bias.filter(|b| self.rg(*b)) {
                    let db = (0..c).map(|ch| g[ch * inner..(ch + 1) * inner].iter().copied().sum()).collect();
                    self.acc(grads, b, db);
                }
            }
            Op::AddBiasLast(x, b) => {
                self.acc(grads, *x, g.to_vec());
                if self.rg(*b) {
                    let c = val(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks_exact(c) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d += gi;
                        }
                    }
                    self.acc(grads, *b, db);
                }
            }
            Op::BroadcastAdd { base, rows, cols } => {
                let s = node.value.shape();
                let (nr, na, c) = (s[0], s[1], s[2]);
                self.acc(grads, *base, g.to_vec());
                if self.rg(*rows) || self.rg(*cols) {
                    let mut dr = vec![T::zero(); nr * c];
                    let mut dc = vec![T::zero(); na * c];
                    for i in 0..nr {
                        for j in 0..na {
                            let o = (i * na + j) * c;
                            for ch in 0..c {
                                dr[i * c + ch] += g[o + ch];
                                dc[j * c + ch] += g[o + ch];
                            }
                        }
                    }
                    self.acc(grads, *rows, dr);
                    self.acc(grads, *cols, dc);
                }
            }
            Op::Normalize { x, inv_std, frozen } => {
                let y = node.value.data();
                let c = inv_std.len();
                let m = y.len() / c;
                let mut dx = vec![T::zero(); y.len()];
                for ch in 0..c {
                    let r = ch * m..(ch + 1) * m;
                    let (gy, yy) = (&g[r.clone()], &y[r.clone()]);
                    if *frozen {
                        for (d, &gi) in dx[r].iter_mut().zip(gy) {
                            *d = gi * inv_std[ch];
                        }
                        continue;
                    }
                    let mf = T::of(m as f64);
                    let mg = gy.iter().copied().sum::<T>() / mf;
                    let mgy = gy.iter().zip(yy).map(|(&a, &b)| a * b).sum::<T>() / mf;
                    for ((d, &gi), &yi) in dx[r].iter_mut().zip(gy).zip(yy) {
                        *d = inv_std[ch] * (gi - mg - yi * mgy);
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::AvgPool2(x) => self.acc(grads, *x, avg_pool2_backward(val(*x).shape(), g)),
            Op::Upsample(x) => {
                let s = node.value.shape();
                self.acc(grads, *x, upsample_nearest_backward(val(*x).shape(), s[1], s[2], g));
            }
            Op::Perspective { z, du, dv } => {
                let dz = (0..du.len()).map(|i| g[2 * i] * du[i] + g[2 * i + 1] * dv[i]).collect();
                self.acc(grads, *z, dz);
            }
            Op::Bilinear { feature, points } => {
                let (df, dp) = bilinear_sample_backward(val(*feature), val(*points), g, self.rg(*feature), self.rg(*points))?;
                if let Some(df) = df {
                    self.acc(grads, *feature, df);
                }
                if let Some(dp) = dp {
                    self.acc(grads, *points, dp);
                }
            }
            Op::ScaleRows(x, w) => {
                let inner = g.len() / w.len();
                let mut dx = g.to_vec();
                for (row, &wi) in dx.chunks_exact_mut(inner).zip(w) {
                    for d in row {
                        *d *= wi;
                    }
                }
                self.acc(grads, *x, dx);
            }
            Op::Gather(x, table) => {
                let c = val(*x).shape()[0];
                self.acc(grads, *x, table.apply_transpose(g, c));
            }
            Op::CrossEntropy {
                logits,
                targets,
                class_weights,
            } => {
                let lv = val(*logits);
                let k = lv.shape()[0];
                let n = lv.numel() / k;
                let d = lv.data();
                let wsum: T = targets.iter().map(|&t| class_weights[t]).sum();
                let scale = g[0] / wsum;
                let mut dl = vec![T::zero(); k * n];
                for (j, &t) in targets.iter().enumerate() {
                    let mx = (0..k).map(|c| d[c * n + j]).fold(T::neg_infinity(), T::max);
                    let z: T = (0..k).map(|c| (d[c * n + j] - mx).exp()).sum();
                    let w = class_weights[t] * scale;
                    for c in 0..k {
                        let p = (d[c * n + j] - mx).exp() / z;
                        let ind = if c == t { T::one() } else { T::zero() };
                        dl[c * n + j] = w * (p - ind);
                    }
                }
                self.acc(grads, *logits, dl);
            }
            Op::Mse(pred, target) => {
                let p = val(*pred).data();
                let s = g[0] * T::of(2.0 / target.len() as f64);
                self.acc(grads, *pred, p.iter().zip(target.iter()).map(|(&a, &b)| s * (a - b)).collect());
            }
            Op::MaskedL1 { pred, target, mask } => {
                let p = val(*pred).data();
                let n = mask.len();
                let k = p.len() / n;
                let count = mask.iter().filter(|&&m| m).count();
                let mut dp = vec![T::zero(); p.len()];
                if count > 0 {
                    let s = g[0] / T::of((count * k) as f64);
                    for c in 0..k {
                        for j in (0..n).filter(|&j| mask[j]) {
                            let diff = p[c * n + j] - target[c * n + j];
                            dp[c * n + j] = if diff > T::zero() {
                                s
                            } else if diff < T::zero() {
                                -s
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
                self.acc(grads, *pred, dp);
            }
        }
        Ok(())
    }
}
