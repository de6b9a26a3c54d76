use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use super::config::{NormScheme, PipelineConfig, FEATURE_STRIDE};
use super::params::{theta_sets, ParamStore, BRANCHES};
use super::{compose_embedding_var, height_to_z_var, theta_var, transform_var};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, PolarGrid};
use crate::tensor::{NormMode, PadMode, Scalar, Tape, Tensor, Var};

const RING: [PadMode; 2] = [PadMode::Zero, PadMode::Circular];
const PLAIN: [PadMode; 2] = [PadMode::Zero, PadMode::Zero];

/// Per-view projection coefficients of the grid centres and image sizes,
/// computed once per (grid, rig) pair.
#[derive(Debug, Clone)]
pub struct ViewGeometry {
    pub grid: PolarGrid,
    pub coeffs: Vec<(Vec<[f64; 3]>, Vec<[f64; 3]>)>,
    /// `(width, height)` per view.
    pub image_size: Vec<(usize, usize)>,
}

impl ViewGeometry {
    pub fn new(grid: &PolarGrid, rig: &CameraRig) -> Self {
        ViewGeometry {
            grid: *grid,
            coeffs: rig.grid_coefficients(grid),
            image_size: rig.cameras.iter().map(|c| (c.width, c.height)).collect(),
        }
    }

    pub fn views(&self) -> usize {
        self.coeffs.len()
    }
}

/// Wall time per stage of one forward pass, seconds.
#[derive(Debug, Clone, Default, Serialize)]
pub struct StageTimes {
    pub encode: f64,
    /// Height update plus feature transform, per iteration.
    pub transform: Vec<f64>,
    pub fuse: Vec<f64>,
    pub head: f64,
}

/// Tape variables of one forward pass. `z_trace[0]` is the hypothetical
/// plane and `z_trace[t]` the height used by iteration `t`, each `[1, cells]`.
pub struct ModelOutput {
    pub seg_logits: Var,
    pub centerness: Var,
    pub offset: Var,
    pub z_trace: Vec<Var>,
    /// Per-channel sample statistics of every normalised block, for running
    /// averages.
    pub norm_stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

/// Concrete forward result.
#[derive(Debug, Clone)]
pub struct BevOutput {
    /// `[2, d_rad, d_ang]`.
    pub seg_logits: Tensor,
    /// `[1, d_rad, d_ang]`, in `[0, 1]`.
    pub centerness: Tensor,
    /// `[2, d_rad, d_ang]`, cartesian metres toward the instance centre.
    pub offset: Tensor,
    /// Heights `[d_rad, d_ang]` per iteration, starting with the
    /// hypothetical plane.
    pub heights: Vec<Tensor>,
}

pub struct Model {
    pub cfg: PipelineConfig,
    pub params: ParamStore,
}

struct Ctx<'a, T: Scalar> {
    cfg: &'a PipelineConfig,
    store: &'a ParamStore,
    vars: BTreeMap<String, Var>,
    train: bool,
    stats: Vec<(String, Vec<f64>, Vec<f64>)>,
    _t: std::marker::PhantomData<T>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn p(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    /// 3×3 conv → per-channel normalisation → affine → relu.
    fn block(&mut self, tape: &mut Tape<T>, name: &str, x: Var, modes: [PadMode; 2]) -> Result<Var> {
        let k = self.p(&format!("{name}.kernel"))?;
        let y = tape.conv2d(x, k, modes)?;
        let eps = T::of(self.cfg.norm_eps);
        let y = match self.cfg.norm {
            NormScheme::Running { .. } if !self.train => {
                let cast = |n: &str| -> Result<Vec<T>> {
                    Ok(self.store.get(&format!("{name}.{n}"))?.data().iter().map(|&v| T::of(v)).collect())
                };
                let (m, v) = (cast("running_mean")?, cast("running_var")?);
                tape.normalize_channels(y, eps, NormMode::Frozen, Some((&m, &v)))?.0
            }
            _ => {
                let (y, m, v) = tape.normalize_channels(y, eps, NormMode::Batch, None)?;
                if self.train {
                    self.stats.push((name.to_string(), m.iter().map(|x| x.f64()).collect(), v.iter().map(|x| x.f64()).collect()));
                }
                y
            }
        };
        let (g, b) = (self.p(&format!("{name}.gamma"))?, self.p(&format!("{name}.beta"))?);
        let y = tape.channel_affine(y, Some(g), Some(b))?;
        Ok(tape.relu(y))
    }

    fn branch(&mut self, tape: &mut Tape<T>, name: &str, x: Var) -> Result<Var> {
        let k = self.p(&format!("head.{name}.kernel"))?;
        let b = self.p(&format!("head.{name}.bias"))?;
        let y = tape.conv2d(x, k, PLAIN)?;
        tape.channel_affine(y, None, Some(b))
    }
}

fn since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

impl Model {
    pub fn new(cfg: PipelineConfig, params: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let fresh = ParamStore::init(&cfg, 0)?;
        for (name, t) in &fresh.params {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Validation {
                    path: format!("params.{name}"),
                    msg: format!("shape {:?} does not match config shape {:?}", got.shape(), t.shape()),
                });
            }
        }
        Ok(Model { cfg, params })
    }

    /// Registers every parameter on `tape`; trainable iff `grads`.
    pub fn bind<T: Scalar>(&self, tape: &mut Tape<T>, grads: bool) -> BTreeMap<String, Var> {
        self.params
            .params
            .iter()
            .map(|(name, t)| {
                let mut t: Tensor<T> = t.cast();
                t.requires_grad = grads;
                (name.clone(), tape.leaf(t))
            })
            .collect()
    }

    /// Records one forward pass. `images[n]` is `[C_in, H, W]` for view `n`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        vars: BTreeMap<String, Var>,
        geom: &ViewGeometry,
        images: &[Tensor<T>],
        train: bool,
        mut times: Option<&mut StageTimes>,
    ) -> Result<ModelOutput> {
        let cfg = &self.cfg;
        if images.len() != geom.views() {
            return Err(Error::config(format!("{} images for a {}-view rig", images.len(), geom.views())));
        }
        if geom.grid.d_rad != cfg.d_rad || geom.grid.d_ang != cfg.d_ang {
            return Err(Error::dim("forward", &[cfg.d_rad, cfg.d_ang], &[geom.grid.d_rad, geom.grid.d_ang]));
        }
        let mut cx = Ctx::<T> {
            cfg,
            store: &self.params,
            vars,
            train,
            stats: Vec::new(),
            _t: std::marker::PhantomData,
        };

        let t0 = Instant::now();
        let mut feats = Vec::with_capacity(images.len());
        for img in images {
            if img.rank() != 3 || img.shape()[0] != cfg.encoder.in_channels {
                return Err(Error::dim("encoder", img.shape(), &[cfg.encoder.in_channels]));
            }
            let mut x = tape.constant(img.clone());
            for i in 0..4 {
                if i < 3 {
                    x = tape.avg_pool2(x)?;
                }
                x = cx.block(tape, &format!("enc{i}"), x, PLAIN)?;
            }
            feats.push(x);
        }
        if let Some(t) = times.as_deref_mut() {
            t.encode = since(t0);
        }

        let (nr, na, c) = (cfg.d_rad, cfg.d_ang, cfg.channels);
        let n = nr * na;
        let q = compose_embedding_var(tape, cx.p("embed.q_rad")?, cx.p("embed.q_ang")?)?;
        let q = tape.reshape(q, &[n, c])?;
        let mut q_cn = tape.transpose(q)?;
        let mut h = tape.constant(Tensor::full(&[1, n], T::of(cfg.h_hypo)));
        let mut z_trace = vec![height_to_z_var(tape, h, cfg.z_inf, cfg.z_sup)];

        for t in 0..cfg.n_iters {
            let t1 = Instant::now();
            let set = t.min(theta_sets(cfg) - 1);
            let mut layers = Vec::new();
            for l in 0..=cfg.theta_hidden.len() {
                layers.push((cx.p(&format!("theta{set}.w{l}"))?, cx.p(&format!("theta{set}.b{l}"))?));
            }
            let delta = theta_var(tape, &layers, q_cn)?;
            h = tape.add(h, delta)?;
            let z = height_to_z_var(tape, h, cfg.z_inf, cfg.z_sup);
            z_trace.push(z);
            let (f, _) = transform_var(tape, geom, z, &feats, FEATURE_STRIDE as f64)?;
            if let Some(tm) = times.as_deref_mut() {
                tm.transform.push(since(t1));
            }
            let t2 = Instant::now();
            let q_img = tape.reshape(q_cn, &[c, nr, na])?;
            let mut parts = vec![q_img, f];
            if cfg.fuse_height {
                parts.push(tape.reshape(z, &[1, nr, na])?);
            }
            let cat = tape.concat(&parts)?;
            let fused = cx.block(tape, &format!("fuse{set}"), cat, RING)?;
            q_cn = tape.reshape(fused, &[c, n])?;
            if let Some(tm) = times.as_deref_mut() {
                tm.fuse.push(since(t2));
            }
        }

        let t3 = Instant::now();
        let q_img = tape.reshape(q_cn, &[c, nr, na])?;
        let d0 = cx.block(tape, "head.down0", q_img, RING)?;
        let p0 = tape.avg_pool2(d0)?;
        let d1 = cx.block(tape, "head.down1", p0, RING)?;
        let p1 = tape.avg_pool2(d1)?;
        let d2 = cx.block(tape, "head.down2", p1, RING)?;
        let (s1, s0) = (tape.shape(d1).to_vec(), tape.shape(d0).to_vec());
        let u1 = tape.upsample(d2, s1[1], s1[2])?;
        let u1 = tape.concat(&[u1, d1])?;
        let u1 = cx.block(tape, "head.up1", u1, RING)?;
        let u0 = tape.upsample(u1, s0[1], s0[2])?;
        let u0 = tape.concat(&[u0, d0])?;
        let u0 = cx.block(tape, "head.up0", u0, RING)?;
        let [seg, cen, off] = BRANCHES.map(|(b, _)| b);
        let seg_logits = cx.branch(tape, seg, u0)?;
        let cen = cx.branch(tape, cen, u0)?;
        let centerness = tape.sigmoid(cen);
        let offset = cx.branch(tape, off, u0)?;
        if let Some(tm) = times.as_deref_mut() {
            tm.head = since(t3);
        }
        Ok(ModelOutput {
            seg_logits,
            centerness,
            offset,
            z_trace,
            norm_stats: cx.stats,
        })
    }

    /// Inference forward pass in precision `T`.
    pub fn run<T: Scalar>(&self, geom: &ViewGeometry, images: &[Tensor], times: Option<&mut StageTimes>) -> Result<BevOutput> {
        let mut tape = Tape::<T>::inference();
        let vars = self.bind(&mut tape, false);
        let imgs: Vec<Tensor<T>> = images.iter().map(Tensor::cast).collect();
        let out = self.forward(&mut tape, vars, geom, &imgs, false, times)?;
        let shape = [self.cfg.d_rad, self.cfg.d_ang];
        Ok(BevOutput {
            seg_logits: tape.value(out.seg_logits).cast(),
            centerness: tape.value(out.centerness).cast(),
            offset: tape.value(out.offset).cast(),
            heights: out
                .z_trace
                .iter()
                .map(|&z| tape.value(z).cast::<f64>().reshape(&shape))
                .collect::<Result<_>>()?,
        })
    }

    /// Folds the sample statistics of a training pass into the running
    /// averages (no-op for [`NormScheme::Sample`]).
    pub fn update_running_stats(&mut self, stats: &[(String, Vec<f64>, Vec<f64>)]) {
        let NormScheme::Running { momentum } = self.cfg.norm else { return };
        for (name, m, v) in stats {
            for (key, src) in [("running_mean", m), ("running_var", v)] {
                if let Some(buf) = self.params.buffers.get_mut(&format!("{name}.{key}")) {
                    for (b, &s) in buf.data_mut().iter_mut().zip(src) {
                        *b = (1.0 - momentum) * *b + momentum * s;
                    }
                }
            }
        }
    }
}

/// Convenience wrapper: `f64` forward of a model on one scene.
pub fn run_model(images: &[Tensor], rig: &CameraRig, model: &Model) -> Result<BevOutput> {
    let geom = ViewGeometry::new(&model.cfg.grid()?, rig);
    model.run::<f64>(&geom, images, None)
}
