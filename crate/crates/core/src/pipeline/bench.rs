use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::PipelineConfig;
use super::model::{Model, StageTimes, ViewGeometry};
use super::params::ParamStore;
use super::remap::{remap_table, RemapMode};
use crate::error::{Error, Result};
use crate::geometry::CameraRig;
use crate::metrics::EvalSetting;
use crate::tensor::Tensor;

pub const BENCH_SCHEMA_VERSION: u32 = 1;

/// Best-of-`repeat` stage times of an `f32` inference forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub d_rad: usize,
    pub d_ang: usize,
    pub channels: usize,
    pub n_iters: usize,
    pub views: usize,
    pub repeat: usize,
    pub encode_s: f64,
    /// Height update plus feature transform, per iteration.
    pub transform_s: Vec<f64>,
    pub fuse_s: Vec<f64>,
    pub head_s: f64,
    /// Polar→rect remap of the segmentation logits to the 100 m grid at
    /// 0.5 m.
    pub remap_s: f64,
    /// Fastest complete forward pass including the remap.
    pub total_s: f64,
    /// Polar cells per second of the fastest pass.
    pub cells_per_second: f64,
}

fn min_into(best: &mut f64, v: f64) {
    *best = best.min(v);
}

/// Times `repeat` forward passes of a freshly initialised model on random
/// images sized for `rig`.
pub fn bench_forward(cfg: &PipelineConfig, rig: &CameraRig, repeat: usize, seed: u64) -> Result<BenchReport> {
    if repeat == 0 {
        return Err(Error::config("bench needs at least one repetition"));
    }
    let model = Model::new(cfg.clone(), ParamStore::init(cfg, seed)?)?;
    let grid = cfg.grid()?;
    let geom = ViewGeometry::new(&grid, rig);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Vec<Tensor> = rig
        .cameras
        .iter()
        .map(|c| Tensor::from_fn(&[cfg.encoder.in_channels, c.height, c.width], |_| rng.random_range(0.0..1.0)))
        .collect();
    let setting = EvalSetting::SETTING_2;
    let table = remap_table(&grid, &setting, RemapMode::Bilinear, 0.0)?;
    let inf = f64::INFINITY;
    let mut rep = BenchReport {
        schema_version: BENCH_SCHEMA_VERSION,
        d_rad: cfg.d_rad,
        d_ang: cfg.d_ang,
        channels: cfg.channels,
        n_iters: cfg.n_iters,
        views: rig.len(),
        repeat,
        encode_s: inf,
        transform_s: vec![inf; cfg.n_iters],
        fuse_s: vec![inf; cfg.n_iters],
        head_s: inf,
        remap_s: inf,
        total_s: inf,
        cells_per_second: 0.0,
    };
    for _ in 0..repeat {
        let start = std::time::Instant::now();
        let mut t = StageTimes::default();
        let out = model.run::<f32>(&geom, &images, Some(&mut t))?;
        let r0 = std::time::Instant::now();
        std::hint::black_box(table.apply(out.seg_logits.data(), 2));
        min_into(&mut rep.remap_s, r0.elapsed().as_secs_f64());
        min_into(&mut rep.total_s, start.elapsed().as_secs_f64());
        min_into(&mut rep.encode_s, t.encode);
        min_into(&mut rep.head_s, t.head);
        for (b, v) in rep.transform_s.iter_mut().zip(&t.transform) {
            min_into(b, *v);
        }
        for (b, v) in rep.fuse_s.iter_mut().zip(&t.fuse) {
            min_into(b, *v);
        }
    }
    rep.cells_per_second = grid.cells() as f64 / rep.total_s;
    Ok(rep)
}
