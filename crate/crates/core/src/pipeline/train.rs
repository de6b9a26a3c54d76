use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::config::{DecodeSpec, TrainConfig};
use super::loss::{model_loss, RectTargets};
use super::model::{BevOutput, Model, ViewGeometry};
use super::params::ParamStore;
use super::remap::{remap_table, RemapMode};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, PolarGrid};
use crate::metrics::{decode_instances, evaluate, EvalSetting, InstanceMap, MetricReport, Raster, RectLabels};
use crate::synth::{rasterize_gt, rasterize_polar_heights, render_views, GtRasters, RenderChannelPlan, SceneSpec};
use crate::tensor::{GatherTable, Scalar, Tape, Tensor};

/// One training or evaluation scene.
#[derive(Debug, Clone)]
pub struct SceneData {
    pub name: String,
    /// One `[C_in, H, W]` image per view.
    pub images: Vec<Tensor>,
    pub gt: GtRasters,
    /// Polar-grid foreground flags and box-top heights, when known.
    pub polar_height: Option<(Vec<bool>, Vec<f64>)>,
}

impl SceneData {
    /// Renders `scene` through `rig` and rasterizes its ground truth.
    pub fn render(
        name: impl Into<String>,
        scene: &SceneSpec,
        rig: &CameraRig,
        plan: &RenderChannelPlan,
        setting: &EvalSetting,
        grid: &PolarGrid,
    ) -> Self {
        SceneData {
            name: name.into(),
            images: render_views(scene, rig, plan).into_iter().map(|v| v.image).collect(),
            gt: rasterize_gt(scene, setting),
            polar_height: Some(rasterize_polar_heights(scene, grid)),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TraceEntry {
    pub step: usize,
    /// Mean training loss since the previous entry.
    pub loss: f64,
    pub lr: f64,
    pub iou: f64,
    pub pq: f64,
    /// Mean |z − true height| over foreground polar cells, per iteration
    /// (index 0 is the hypothetical plane).
    pub height_mae: Vec<f64>,
    pub elapsed_s: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    pub trace: Vec<TraceEntry>,
    pub report: MetricReport,
}

/// Remaps a polar forward result to `setting` and decodes instances.
pub fn predict_rect(out: &BevOutput, table: &GatherTable, setting: &EvalSetting, decode: &DecodeSpec) -> Result<RectLabels> {
    let (rows, cols) = (setting.rows(), setting.cols());
    let n = rows * cols;
    let seg = table.apply(out.seg_logits.data(), 2);
    let cen = table.apply(out.centerness.data(), 1);
    let off = table.apply(out.offset.data(), 2);
    let seg = Raster::new(rows, cols, (0..n).map(|i| seg[n + i] > seg[i]).collect())?;
    let cen = Raster::new(rows, cols, cen)?;
    let offset = [Raster::new(rows, cols, off[..n].to_vec())?, Raster::new(rows, cols, off[n..].to_vec())?];
    let instances = decode_instances(&cen, &offset, &seg, decode.center_thresh, decode.nms_radius, setting.resolution)?;
    Ok(RectLabels { seg, instances })
}

fn height_mae(out: &BevOutput, polar: &Option<(Vec<bool>, Vec<f64>)>) -> Vec<f64> {
    let Some((fg, h)) = polar else { return Vec::new() };
    let count = fg.iter().filter(|&&f| f).count().max(1) as f64;
    out.heights
        .iter()
        .map(|z| {
            z.data()
                .iter()
                .zip(fg.iter().zip(h))
                .filter(|(_, (&f, _))| f)
                .map(|(&zv, (_, &hv))| (zv - hv).abs())
                .sum::<f64>()
                / count
        })
        .collect()
}

/// Scores a model on `scenes`; also returns the mean height error per
/// iteration over scenes that carry polar heights.
pub fn evaluate_model(
    model: &Model,
    geom: &ViewGeometry,
    scenes: &[SceneData],
    table: &GatherTable,
    setting: &EvalSetting,
    decode: &DecodeSpec,
    f32_mode: bool,
) -> Result<(MetricReport, Vec<f64>)> {
    let per: Vec<(String, RectLabels, RectLabels, Vec<f64>)> = scenes
        .par_iter()
        .map(|s| {
            let out = if f32_mode {
                model.run::<f32>(geom, &s.images, None)?
            } else {
                model.run::<f64>(geom, &s.images, None)?
            };
            let pred = predict_rect(&out, table, setting, decode)?;
            let gt = RectLabels {
                seg: s.gt.seg.clone(),
                instances: s.gt.instances.clone(),
            };
            Ok((s.name.clone(), pred, gt, height_mae(&out, &s.polar_height)))
        })
        .collect::<Result<_>>()?;
    let mut mae = Vec::new();
    let with_h: Vec<&Vec<f64>> = per.iter().map(|p| &p.3).filter(|m| !m.is_empty()).collect();
    if let Some(first) = with_h.first() {
        mae = (0..first.len()).map(|t| with_h.iter().map(|m| m[t]).sum::<f64>() / with_h.len() as f64).collect();
    }
    let triples: Vec<(String, RectLabels, RectLabels)> = per.into_iter().map(|(n, p, g, _)| (n, p, g)).collect();
    Ok((evaluate(&triples, *setting)?, mae))
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| p.params.iter().map(|(k, t)| (k.clone(), vec![0.0; t.numel()])).collect();
        Adam {
            m: zeros(params),
            v: zeros(params),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Vec<f64>>, lr: f64, spec: &super::OptimizerSpec) {
        self.t += 1;
        let (b1, b2) = (spec.beta1, spec.beta2);
        let (c1, c2) = (1.0 - b1.powi(self.t), 1.0 - b2.powi(self.t));
        for (name, p) in params.params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = (self.m.get_mut(name).unwrap(), self.v.get_mut(name).unwrap());
            for (i, pv) in p.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let upd = (m[i] / c1) / ((v[i] / c2).sqrt() + spec.eps);
                *pv -= lr * (upd + spec.weight_decay * *pv);
            }
        }
    }
}

fn one_step<T: Scalar>(
    model: &Model,
    geom: &ViewGeometry,
    images: &[Tensor],
    table: &Arc<GatherTable>,
    targets: &RectTargets<T>,
) -> Result<(f64, BTreeMap<String, Vec<f64>>, Vec<(String, Vec<f64>, Vec<f64>)>)> {
    let mut tape = Tape::<T>::new();
    let vars = model.bind(&mut tape, true);
    let imgs: Vec<Tensor<T>> = images.iter().map(Tensor::cast).collect();
    let out = model.forward(&mut tape, vars.clone(), geom, &imgs, true, None)?;
    let (loss, parts) = model_loss(&mut tape, &out, table, targets, &model.cfg)?;
    if !parts.total.is_finite() {
        return Ok((parts.total, BTreeMap::new(), Vec::new()));
    }
    let g = tape.backward(loss)?;
    let grads = vars
        .iter()
        .map(|(name, &v)| {
            let gv = g.get(v).map_or_else(|| vec![0.0; tape.value(v).numel()], |s| s.iter().map(|x| x.f64()).collect());
            (name.clone(), gv)
        })
        .collect();
    Ok((parts.total, grads, out.norm_stats))
}

/// Adam training on the given scenes with a cosine learning-rate schedule.
/// Scenes are visited in a seeded shuffled order, one scene per step.
/// `on_eval` sees every trace entry as it is produced.
pub fn train_toy(
    scenes: &[SceneData],
    rig: &CameraRig,
    cfg: &TrainConfig,
    setting: &EvalSetting,
    mut on_eval: impl FnMut(&TraceEntry),
) -> Result<TrainOutcome> {
    if scenes.is_empty() {
        return Err(Error::config("training needs at least one scene"));
    }
    let opt = &cfg.optimizer;
    let grid = cfg.pipeline.grid()?;
    let mut model = Model::new(cfg.pipeline.clone(), ParamStore::init(&cfg.pipeline, opt.seed)?)?;
    let geom = ViewGeometry::new(&grid, rig);
    let table = Arc::new(remap_table(&grid, setting, RemapMode::Bilinear, 0.0)?);
    let t64: Vec<RectTargets<f64>> = scenes.iter().map(|s| RectTargets::from_gt(&s.gt)).collect();
    let t32: Vec<RectTargets<f32>> = scenes.iter().map(|s| RectTargets::from_gt(&s.gt)).collect();
    let mut adam = Adam::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(opt.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let start = std::time::Instant::now();
    let eval_every = opt.eval_every.max(1);

    let record = |model: &Model, step: usize, loss_sum: &mut f64, loss_n: &mut usize| -> Result<TraceEntry> {
        let (rep, mae) = evaluate_model(model, &geom, scenes, &table, setting, &cfg.decode, opt.f32)?;
        let e = TraceEntry {
            step,
            loss: if *loss_n == 0 { f64::NAN } else { *loss_sum / *loss_n as f64 },
            lr: opt.lr_at(step),
            iou: rep.aggregate.iou,
            pq: rep.aggregate.panoptic.pq,
            height_mae: mae,
            elapsed_s: start.elapsed().as_secs_f64(),
        };
        *loss_sum = 0.0;
        *loss_n = 0;
        Ok(e)
    };

    for step in 0..opt.steps {
        if step % eval_every == 0 {
            let e = record(&model, step, &mut loss_sum, &mut loss_n)?;
            on_eval(&e);
            trace.push(e);
        }
        if order.is_empty() {
            order = (0..scenes.len()).collect();
            order.shuffle(&mut rng);
            order.reverse();
        }
        let si = order.pop().expect("refilled above");
        let (loss, grads, stats) = if opt.f32 {
            one_step(&model, &geom, &scenes[si].images, &table, &t32[si])?
        } else {
            one_step(&model, &geom, &scenes[si].images, &table, &t64[si])?
        };
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        loss_sum += loss;
        loss_n += 1;
        adam.step(&mut model.params, &grads, opt.lr_at(step), opt);
        model.update_running_stats(&stats);
    }
    let e = record(&model, opt.steps, &mut loss_sum, &mut loss_n)?;
    on_eval(&e);
    trace.push(e);
    let (report, _) = evaluate_model(&model, &geom, scenes, &table, setting, &cfg.decode, opt.f32)?;
    Ok(TrainOutcome { model, trace, report })
}

/// An empty instance map on the setting's grid.
pub fn empty_labels(setting: &EvalSetting) -> RectLabels {
    RectLabels {
        seg: Raster::filled(setting.rows(), setting.cols(), false),
        instances: InstanceMap::empty(setting.rows(), setting.cols()),
    }
}
