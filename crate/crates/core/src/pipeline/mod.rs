//! The polar BEV model: embedding decomposition, iterative height
//! estimation, height-based 2D→3D feature transform, ring-conv head and the
//! polar→rect remap used for losses and metrics.
//!
//! Every tape-level building block is generic over the tape precision; the
//! tensor-level functions in this module run them on an `f64` inference
//! tape.

mod baseline;
mod bench;
mod check;
mod config;
mod loss;
mod model;
mod params;
mod remap;
mod train;

pub use baseline::{depth_transform, DepthSource};
pub use bench::{bench_forward, BenchReport, BENCH_SCHEMA_VERSION};
pub use check::{mini_grad_check, MiniCheck, MINI_STEP, MINI_TOL};
pub use config::{
    DecodeSpec, EncoderSpec, HeadSpec, NormScheme, OptimizerSpec, PipelineConfig, TrainConfig, FEATURE_STRIDE,
};
pub use loss::{compute_loss, model_loss, rect_loss, LossParts, RectTargets};
pub use model::{run_model, BevOutput, Model, ModelOutput, StageTimes, ViewGeometry};
pub use params::{check_same_shapes, ParamStore};
pub use remap::{remap_polar_to_rect, remap_table, RemapMode};
pub use train::{empty_labels, evaluate_model, predict_rect, train_toy, SceneData, TraceEntry, TrainOutcome};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, PolarGrid, EPS_DEPTH};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Learnable radial and angular query tables.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarEmbedding {
    /// `[d_rad, C]`.
    pub q_rad: Tensor,
    /// `[d_ang, C]`.
    pub q_ang: Tensor,
}

/// `q[j, k, :] = q_rad[j, :] + q_ang[k, :]` as a `[d_rad, d_ang, C]` tape
/// variable.
pub fn compose_embedding_var<T: Scalar>(tape: &mut Tape<T>, q_rad: Var, q_ang: Var) -> Result<Var> {
    let (rs, cs) = (tape.shape(q_rad).to_vec(), tape.shape(q_ang).to_vec());
    if rs.len() != 2 || cs.len() != 2 || rs[1] != cs[1] {
        return Err(Error::dim("compose_embedding", &rs, &cs));
    }
    let zeros = tape.constant(Tensor::zeros(&[rs[0], cs[0], rs[1]]));
    tape.broadcast_add(zeros, q_rad, q_ang)
}

pub fn compose_embedding(e: &PolarEmbedding) -> Result<Tensor> {
    let mut tape = Tape::<f64>::inference();
    let (r, a) = (tape.constant(e.q_rad.clone()), tape.constant(e.q_ang.clone()));
    let q = compose_embedding_var(&mut tape, r, a)?;
    Ok(tape.value(q).clone())
}

/// Margin kept between the squashed height and 0 or 1, in units of machine
/// epsilon, so saturated sigmoids still land strictly inside the bounds.
const SQUASH_MARGIN: f64 = 4.0;

/// `z = σ(h)·(z_sup − z_inf) + z_inf`, with `σ(h)` kept a few ulps away
/// from 0 and 1.
pub fn height_to_z(h: f64, z_inf: f64, z_sup: f64) -> Result<f64> {
    if !(z_inf < z_sup) {
        return Err(Error::config(format!("z_inf ({z_inf}) must be below z_sup ({z_sup})")));
    }
    let m = SQUASH_MARGIN * f64::EPSILON;
    Ok(crate::tensor::sigmoid(h).clamp(m, 1.0 - m) * (z_sup - z_inf) + z_inf)
}

pub fn height_to_z_var<T: Scalar>(tape: &mut Tape<T>, h: Var, z_inf: f64, z_sup: f64) -> Var {
    let m = T::of(SQUASH_MARGIN) * T::epsilon();
    let s = tape.sigmoid(h);
    let s = tape.clamp(s, m, T::one() - m);
    let s = tape.scale(s, T::of(z_sup - z_inf));
    tape.add_scalar(s, T::of(z_inf))
}

/// Raw heights `h` and bounded heights `z`, both `[d_rad, d_ang]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeightField {
    pub h: Tensor,
    pub z: Tensor,
    pub z_inf: f64,
    pub z_sup: f64,
    pub h_hypo: f64,
}

impl HeightField {
    /// Every cell at the hypothetical height `h_hypo`.
    pub fn hypothetical(grid: &PolarGrid, z_inf: f64, z_sup: f64, h_hypo: f64) -> Result<Self> {
        let z = height_to_z(h_hypo, z_inf, z_sup)?;
        let shape = [grid.d_rad, grid.d_ang];
        Ok(HeightField {
            h: Tensor::full(&shape, h_hypo),
            z: Tensor::full(&shape, z),
            z_inf,
            z_sup,
            h_hypo,
        })
    }

    /// Sets `z` directly (inverting the squashing for `h`); heights must lie
    /// strictly inside the bounds.
    pub fn from_z(z: Tensor, z_inf: f64, z_sup: f64, h_hypo: f64) -> Result<Self> {
        let mut h = z.clone();
        for (hv, &zv) in h.data_mut().iter_mut().zip(z.data()) {
            if !(zv > z_inf && zv < z_sup) {
                return Err(Error::config(format!("height {zv} outside ({z_inf}, {z_sup})")));
            }
            let s = (zv - z_inf) / (z_sup - z_inf);
            *hv = (s / (1.0 - s)).ln();
        }
        Ok(HeightField {
            h,
            z,
            z_inf,
            z_sup,
            h_hypo,
        })
    }
}

/// A per-cell MLP: `relu` between layers, none after the last. Weights are
/// `[out, in]`, biases `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl Mlp {
    /// Reads the Θ of weight set `set` from a parameter store.
    pub fn from_store(store: &ParamStore, set: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for l in 0.. {
            let Ok(w) = store.get(&format!("theta{set}.w{l}")) else { break };
            layers.push((w.clone(), store.get(&format!("theta{set}.b{l}"))?.clone()));
        }
        Ok(Mlp { layers })
    }
}

/// Applies Θ to a `[C, N]` query matrix, producing `[1, N]`.
pub fn theta_var<T: Scalar>(tape: &mut Tape<T>, layers: &[(Var, Var)], q_cn: Var) -> Result<Var> {
    let mut x = q_cn;
    for (l, &(w, b)) in layers.iter().enumerate() {
        let in_w = tape.shape(w)[1];
        if tape.shape(x)[0] != in_w {
            return Err(Error::config(format!(
                "Θ layer {l} expects {in_w} input channels, got {}",
                tape.shape(x)[0]
            )));
        }
        x = tape.matmul(w, x)?;
        x = tape.channel_affine(x, None, Some(b))?;
        if l + 1 < layers.len() {
            x = tape.relu(x);
        }
    }
    if tape.shape(x)[0] != 1 {
        return Err(Error::config("Θ must end in a single output"));
    }
    Ok(x)
}

/// `h ← Θ(q) + h`, then `z` from the new `h`. `q` is `[d_rad, d_ang, C]`.
pub fn update_height(hf: &HeightField, q: &Tensor, theta: &Mlp) -> Result<HeightField> {
    let qs = q.shape();
    if qs.len() != 3 || hf.h.shape() != &qs[..2] {
        return Err(Error::dim("update_height", qs, hf.h.shape()));
    }
    let (n, c) = (qs[0] * qs[1], qs[2]);
    let mut tape = Tape::<f64>::inference();
    let qv = tape.constant(q.clone().reshape(&[n, c])?);
    let qv = tape.transpose(qv)?;
    let layers: Vec<(Var, Var)> = theta.layers.iter().map(|(w, b)| (tape.constant(w.clone()), tape.constant(b.clone()))).collect();
    let delta = theta_var(&mut tape, &layers, qv)?;
    let h = tape.constant(hf.h.clone().reshape(&[1, n])?);
    let h = tape.add(h, delta)?;
    let z = height_to_z_var(&mut tape, h, hf.z_inf, hf.z_sup);
    Ok(HeightField {
        h: tape.value(h).clone().reshape(&qs[..2])?,
        z: tape.value(z).clone().reshape(&qs[..2])?,
        z_inf: hf.z_inf,
        z_sup: hf.z_sup,
        h_hypo: hf.h_hypo,
    })
}

/// Height-based feature transform on a tape. `z` holds one height per grid
/// cell; `features[n]` is `[C_f, H_f, W_f]` for view `n` with the given
/// stride. Pixel `u` maps to feature coordinate `(u + 0.5)/stride − 0.5`.
/// Returns `[C_f, d_rad, d_ang]` plus the `[K, cells]` validity masks.
pub fn transform_var<T: Scalar>(
    tape: &mut Tape<T>,
    geom: &ViewGeometry,
    z: Var,
    features: &[Var],
    stride: f64,
) -> Result<(Var, Vec<bool>)> {
    if features.len() != geom.views() {
        return Err(Error::config(format!(
            "{} feature maps for a {}-view rig",
            features.len(),
            geom.views()
        )));
    }
    if !(stride > 0.0) {
        return Err(Error::config("feature stride must be positive"));
    }
    let n = geom.grid.cells();
    let cf = tape.shape(features[0])[0];
    let mut masks = Vec::with_capacity(geom.views() * n);
    let mut acc: Option<Var> = None;
    for (v, &feat) in features.iter().enumerate() {
        let (base, dir) = &geom.coeffs[v];
        let (pts, valid) = tape.perspective(z, base, dir, EPS_DEPTH)?;
        let (w, h) = geom.image_size[v];
        let p = tape.value(pts).data();
        let mask: Vec<bool> = (0..n)
            .map(|i| {
                let (u, vv) = (p[2 * i].f64(), p[2 * i + 1].f64());
                valid[i] && (0.0..=(w - 1) as f64).contains(&u) && (0.0..=(h - 1) as f64).contains(&vv)
            })
            .collect();
        let pf = tape.scale(pts, T::of(1.0 / stride));
        let pf = tape.add_scalar(pf, T::of(0.5 / stride - 0.5));
        let s = tape.bilinear_sample(feat, pf)?;
        let s = tape.scale_rows(s, mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect())?;
        acc = Some(match acc {
            None => s,
            Some(a) => tape.add(a, s)?,
        });
        masks.extend(mask);
    }
    let acc = acc.ok_or_else(|| Error::config("rig has no views"))?;
    let t = tape.transpose(acc)?;
    let out = tape.reshape(t, &[cf, geom.grid.d_rad, geom.grid.d_ang])?;
    Ok((out, masks))
}

/// Tensor-level transform: `[d_rad, d_ang, C_f]` features sampled at the
/// heights of `hf`, summed over views where the projection is valid.
pub fn transform_features(
    grid: &PolarGrid,
    hf: &HeightField,
    rig: &CameraRig,
    view_features: &[Tensor],
    feature_stride: f64,
) -> Result<Tensor> {
    if view_features.len() != rig.len() {
        return Err(Error::config(format!(
            "{} feature maps for a {}-view rig",
            view_features.len(),
            rig.len()
        )));
    }
    if hf.z.shape() != [grid.d_rad, grid.d_ang] {
        return Err(Error::dim("transform_features", hf.z.shape(), &[grid.d_rad, grid.d_ang]));
    }
    let geom = ViewGeometry::new(grid, rig);
    let mut tape = Tape::<f64>::inference();
    let z = tape.constant(hf.z.clone());
    let feats: Vec<Var> = view_features.iter().map(|f| tape.constant(f.clone())).collect();
    let (out, _) = transform_var(&mut tape, &geom, z, &feats, feature_stride)?;
    let cf = tape.shape(out)[0];
    let t = tape.reshape(out, &[cf, grid.cells()])?;
    let t = tape.transpose(t)?;
    Ok(tape.value(t).clone().reshape(&[grid.d_rad, grid.d_ang, cf])?)
}
