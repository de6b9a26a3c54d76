//! End-to-end finite-difference check of the miniature model.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::PipelineConfig;
use super::loss::{model_loss, RectTargets};
use super::model::{Model, ViewGeometry};
use super::params::ParamStore;
use super::remap::{remap_table, RemapMode};
use crate::error::Result;
use crate::metrics::EvalSetting;
use crate::synth::make_ring_rig;
use crate::tensor::{grad_check, GradCheckReport, Tape, Tensor, Var};

pub const MINI_STEP: f64 = 1e-4;
pub const MINI_TOL: f64 = 1e-3;

/// Outcome of [`mini_grad_check`]: the report plus the name of the
/// parameter holding the worst element.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MiniCheck {
    pub report: GradCheckReport,
    pub worst_param: Option<String>,
}

/// Checks every parameter gradient of [`PipelineConfig::mini`] on one
/// 128×128 camera (16×16 features) against central differences, with
/// random images, random Θ and random rect targets on a 16 m × 16 m grid at
/// 1 m. Θ is randomised so that the height path moves the projection.
pub fn mini_grad_check(seed: u64) -> Result<MiniCheck> {
    let cfg = PipelineConfig::mini();
    let rig = make_ring_rig(1, 90.0, 128, 128, 2.5)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uniform = |shape: &[usize], s: f64| Tensor::from_fn(shape, |_| rng.random_range(-s..s));
    let images = vec![uniform(&[cfg.encoder.in_channels, 128, 128], 1.0)];
    let mut params = ParamStore::init(&cfg, seed)?;
    for (name, t) in params.params.iter_mut() {
        if name.starts_with("theta") {
            *t = uniform(t.shape(), 0.5);
        }
    }
    let grid = cfg.grid()?;
    let geom = ViewGeometry::new(&grid, &rig);
    let setting = EvalSetting::new(16.0, 16.0, 1.0)?;
    let table = Arc::new(remap_table(&grid, &setting, RemapMode::Bilinear, 0.0)?);
    let n = setting.rows() * setting.cols();
    let targets = RectTargets::<f64> {
        rows: setting.rows(),
        cols: setting.cols(),
        seg: Arc::new((0..n).map(|_| rng.random_range(0..2)).collect()),
        center: Arc::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect()),
        offset: Arc::new((0..2 * n).map(|_| rng.random_range(-2.0..2.0)).collect()),
        mask: Arc::new((0..n).map(|_| rng.random_bool(0.5)).collect()),
    };
    let names: Vec<String> = params.params.keys().cloned().collect();
    let leaves: Vec<Tensor> = params.params.values().cloned().collect();
    let model = Model::new(cfg.clone(), params)?;
    let f = |tape: &mut Tape, vars: &[Var]| {
        let map: BTreeMap<String, Var> = names.iter().cloned().zip(vars.iter().copied()).collect();
        let out = model.forward(tape, map, &geom, &images, true, None)?;
        Ok(model_loss(tape, &out, &table, &targets, &cfg)?.0)
    };
    let report = grad_check(f, &leaves, MINI_STEP, MINI_TOL)?;
    let worst_param = report.worst.map(|w| names[w.0].clone());
    Ok(MiniCheck { report, worst_param })
}
