mod common;

use std::f64::consts::PI;
use std::sync::Arc;

use polarbev::geometry::{build_polar_grid, CameraModel, CameraRig};
use polarbev::metrics::EvalSetting;
use polarbev::pipeline::*;
use polarbev::synth::{make_ring_rig, render_views, Hit, HitKind, RenderChannelPlan, Role, SceneSpec};
use polarbev::tensor::{Tape, Tensor};
use common::{rand_tensor, rotate_rig, scalar_loss_oracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mlp(rng: &mut ChaCha8Rng, c: usize, hidden: usize, scale: f64) -> Mlp {
    Mlp {
        layers: vec![
            (rand_tensor(rng, &[hidden, c], scale), rand_tensor(rng, &[hidden], scale)),
            (rand_tensor(rng, &[1, hidden], scale), rand_tensor(rng, &[1], scale)),
        ],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn embedding_is_the_per_cell_sum(seed in any::<u64>(), nr in 1usize..7, na in 1usize..9, c in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = PolarEmbedding { q_rad: rand_tensor(&mut rng, &[nr, c], 1.0), q_ang: rand_tensor(&mut rng, &[na, c], 1.0) };
        let q = compose_embedding(&e).unwrap();
        prop_assert_eq!(q.shape(), &[nr, na, c]);
        for j in 0..nr {
            for k in 0..na {
                for ch in 0..c {
                    prop_assert_eq!(q.get(&[j, k, ch]), e.q_rad.get(&[j, ch]) + e.q_ang.get(&[k, ch]));
                }
            }
        }
    }

    #[test]
    fn heights_stay_strictly_inside_bounds(seed in any::<u64>(), scale in 0.1f64..200.0, lo in -5.0f64..0.0, span in 0.5f64..6.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = build_polar_grid(10.0, 3, 4).unwrap();
        let hi = lo + span;
        let mut hf = HeightField::hypothetical(&grid, lo, hi, 0.0).unwrap();
        let q = rand_tensor(&mut rng, &[3, 4, 5], scale);
        for _ in 0..3 {
            hf = update_height(&hf, &q, &random_mlp(&mut rng, 5, 6, scale)).unwrap();
            for &z in hf.z.data() {
                prop_assert!(z > lo && z < hi, "z = {z} outside ({lo}, {hi})");
            }
        }
    }
}

#[test]
fn height_squashing_examples() {
    assert_eq!(height_to_z(0.0, -2.0, 2.0).unwrap(), 0.0);
    let s = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((height_to_z(1.0, -2.0, 2.0).unwrap() - (4.0 * s - 2.0)).abs() < 1e-15);
    assert!(height_to_z(1e6, -2.0, 2.0).unwrap() < 2.0);
    assert!(height_to_z(-1e6, -2.0, 2.0).unwrap() > -2.0);
    assert!(height_to_z(0.0, 1.0, 1.0).is_err());
}

#[test]
fn zero_theta_leaves_heights_and_features_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let grid = build_polar_grid(12.0, 6, 8).unwrap();
    let rig = make_ring_rig(2, 100.0, 32, 24, 2.0).unwrap();
    let feats: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[3, 6, 8], 1.0)).collect();
    let q = rand_tensor(&mut rng, &[6, 8, 4], 1.0);
    let zero = Mlp {
        layers: vec![(Tensor::zeros(&[5, 4]), Tensor::zeros(&[5])), (Tensor::zeros(&[1, 5]), Tensor::zeros(&[1]))],
    };
    let hf0 = HeightField::hypothetical(&grid, -2.0, 2.0, 0.3).unwrap();
    let f0 = transform_features(&grid, &hf0, &rig, &feats, 4.0).unwrap();
    let mut hf = hf0.clone();
    for _ in 0..3 {
        hf = update_height(&hf, &q, &zero).unwrap();
        assert_eq!(hf, hf0);
        assert_eq!(transform_features(&grid, &hf, &rig, &feats, 4.0).unwrap(), f0);
    }
}

#[test]
fn theta_adds_its_output_to_the_raw_height() {
    let grid = build_polar_grid(5.0, 2, 3).unwrap();
    let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.25).unwrap();
    // Θ(q) = 2·q₀ − 1 through a relu on a positive input
    let mlp = Mlp {
        layers: vec![
            (Tensor::new(&[1, 2], vec![1.0, 0.0]).unwrap(), Tensor::zeros(&[1])),
            (Tensor::new(&[1, 1], vec![2.0]).unwrap(), Tensor::full(&[1], -1.0)),
        ],
    };
    let q = Tensor::from_fn(&[2, 3, 2], |i| (i / 2) as f64 * 0.5);
    let out = update_height(&hf, &q, &mlp).unwrap();
    for j in 0..2 {
        for k in 0..3 {
            let q0 = q.get(&[j, k, 0]);
            let h = 0.25 + 2.0 * q0 - 1.0;
            assert!((out.h.get(&[j, k]) - h).abs() < 1e-15);
            assert!((out.z.get(&[j, k]) - height_to_z(h, -2.0, 2.0).unwrap()).abs() < 1e-15);
        }
    }
}

#[test]
fn angular_equivariance_of_the_transform() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let grid = build_polar_grid(20.0, 10, 36).unwrap();
    let rig = make_ring_rig(3, 120.0, 64, 40, 2.5).unwrap();
    let feats: Vec<Tensor> = (0..3).map(|_| rand_tensor(&mut rng, &[4, 10, 16], 1.0)).collect();
    let e = PolarEmbedding {
        q_rad: rand_tensor(&mut rng, &[10, 5], 1.0),
        q_ang: rand_tensor(&mut rng, &[36, 5], 1.0),
    };
    let mlp = random_mlp(&mut rng, 5, 8, 1.0);
    let run = |rig: &CameraRig, e: &PolarEmbedding| {
        let q = compose_embedding(e).unwrap();
        let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.0).unwrap();
        let hf = update_height(&hf, &q, &mlp).unwrap();
        transform_features(&grid, &hf, rig, &feats, 4.0).unwrap()
    };
    let base = run(&rig, &e);
    for m in [1isize, 5, -7, 36] {
        let rot = rotate_rig(&rig, m as f64 * grid.dtheta());
        let e2 = PolarEmbedding {
            q_rad: e.q_rad.clone(),
            q_ang: e.q_ang.roll(0, m),
        };
        let got = run(&rot, &e2);
        assert!(got.max_abs_diff(&base.roll(1, m)) < 1e-9, "shift {m}");
    }
}

#[test]
fn full_model_is_equivariant_to_pool_aligned_rotations() {
    let cfg = PipelineConfig {
        d_ang: 16,
        d_rad: 8,
        ..PipelineConfig::mini()
    };
    let mut params = ParamStore::init(&cfg, 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, t) in params.params.iter_mut() {
        if name.starts_with("theta") {
            *t = rand_tensor(&mut rng, t.shape(), 0.5);
        }
    }
    let rig = make_ring_rig(2, 120.0, 64, 40, 2.5).unwrap();
    let images: Vec<Tensor> = (0..2).map(|_| rand_tensor(&mut rng, &[2, 40, 64], 1.0)).collect();
    let grid = cfg.grid().unwrap();
    let model = Model::new(cfg.clone(), params.clone()).unwrap();
    let base = model.run::<f64>(&ViewGeometry::new(&grid, &rig), &images, None).unwrap();
    let m = 4isize;
    let q_ang = params.params["embed.q_ang"].roll(0, m);
    params.params.insert("embed.q_ang".into(), q_ang);
    let model = Model::new(cfg, params).unwrap();
    let rot = rotate_rig(&rig, m as f64 * grid.dtheta());
    let got = model.run::<f64>(&ViewGeometry::new(&grid, &rot), &images, None).unwrap();
    assert!(got.seg_logits.max_abs_diff(&base.seg_logits.roll(2, m)) < 1e-9);
    assert!(got.centerness.max_abs_diff(&base.centerness.roll(2, m)) < 1e-9);
    assert!(got.heights[2].max_abs_diff(&base.heights[2].roll(1, m)) < 1e-9);
}

#[test]
fn transform_of_constant_features_counts_valid_views() {
    let grid = build_polar_grid(30.0, 8, 24).unwrap();
    let rig = make_ring_rig(4, 100.0, 48, 32, 2.0).unwrap();
    let feats: Vec<Tensor> = (0..4).map(|_| Tensor::full(&[2, 4, 6], 1.5)).collect();
    let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.0).unwrap();
    let out = transform_features(&grid, &hf, &rig, &feats, 8.0).unwrap();
    let proj = polarbev::geometry::project_grid(&grid, hf.z.data(), &rig).unwrap();
    for cell in 0..grid.cells() {
        let views = (0..4).filter(|&v| proj.masks[v * grid.cells() + cell]).count() as f64;
        for c in 0..2 {
            assert!((out.data()[cell * 2 + c] - 1.5 * views).abs() < 1e-12);
        }
    }
}

#[test]
fn cells_seen_by_no_view_get_zero_features() {
    // a camera looking straight up never sees the ground plane
    let up = CameraModel::from_pose(
        "up",
        (20.0, 20.0, 15.5, 11.5),
        [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        [0.0, 0.0, 1.5],
        32,
        24,
    );
    let rig = CameraRig::new(vec![up]).unwrap();
    let grid = build_polar_grid(10.0, 4, 8).unwrap();
    let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.0).unwrap();
    let out = transform_features(&grid, &hf, &rig, &[Tensor::full(&[3, 3, 4], 7.0)], 8.0).unwrap();
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn transform_rejects_mismatched_inputs() {
    let grid = build_polar_grid(10.0, 4, 8).unwrap();
    let rig = make_ring_rig(2, 100.0, 32, 24, 2.0).unwrap();
    let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.0).unwrap();
    assert!(transform_features(&grid, &hf, &rig, &[Tensor::zeros(&[1, 3, 4])], 8.0).is_err());
    let bad = HeightField::hypothetical(&build_polar_grid(10.0, 3, 8).unwrap(), -2.0, 2.0, 0.0).unwrap();
    let feats = vec![Tensor::zeros(&[1, 3, 4]); 2];
    assert!(transform_features(&grid, &bad, &rig, &feats, 8.0).is_err());
}

#[test]
fn depth_baseline_agrees_on_a_flat_scene() {
    let grid = build_polar_grid(20.0, 10, 36).unwrap();
    let rig = make_ring_rig(6, 70.0, 160, 80, 2.5).unwrap();
    let scene = SceneSpec {
        boxes: vec![],
        seed: 0,
        extent: 100.0,
    };
    let plan = RenderChannelPlan::new(vec![Role::Constant]).unwrap();
    let depth: Vec<Tensor> = render_views(&scene, &rig, &plan)
        .iter()
        .map(|v| {
            let d = v.hits.iter().map(|h: &Hit| if h.kind == HitKind::None { f64::NAN } else { h.depth }).collect();
            Tensor::new(&[80, 160], d).unwrap()
        })
        .collect();
    // one distinct constant feature per view, at full image resolution
    let feats: Vec<Tensor> = (0..6).map(|v| Tensor::full(&[2, 80, 160], v as f64 + 1.0)).collect();
    let (lifted, hits) = depth_transform(&grid, &rig, &feats, 1.0, &DepthSource::PerPixel(depth)).unwrap();
    let hf = HeightField::hypothetical(&grid, -2.0, 2.0, 0.0).unwrap();
    let sampled = transform_features(&grid, &hf, &rig, &feats, 1.0).unwrap();
    let proj = polarbev::geometry::project_grid(&grid, hf.z.data(), &rig).unwrap();
    let n = grid.cells();
    let (mut compared, mut covered) = (0, 0);
    for cell in 0..n {
        let seen: Vec<bool> = (0..6).map(|v| proj.masks[v * n + cell]).collect();
        let lit: Vec<bool> = (0..6).map(|v| hits[v * n + cell]).collect();
        if seen.iter().any(|&s| s) {
            covered += 1;
        }
        if seen == lit && seen.iter().any(|&s| s) {
            compared += 1;
            for c in 0..2 {
                let d = (lifted.data()[cell * 2 + c] - sampled.data()[cell * 2 + c]).abs();
                assert!(d < 1e-6, "cell {cell}: {d}");
            }
        }
    }
    assert!(compared as f64 >= 0.9 * covered as f64, "{compared} of {covered}");
}

#[test]
fn uniform_depth_baseline_spreads_over_the_ray() {
    let grid = build_polar_grid(20.0, 10, 36).unwrap();
    let rig = make_ring_rig(1, 70.0, 32, 16, 2.5).unwrap();
    let feats = vec![Tensor::full(&[1, 16, 32], 2.0)];
    let src = DepthSource::Uniform {
        bins: 16,
        near: 1.0,
        far: 15.0,
    };
    let (out, hits) = depth_transform(&grid, &rig, &feats, 1.0, &src).unwrap();
    let lit = hits.iter().filter(|&&h| h).count();
    assert!(lit > 10);
    for (cell, &h) in hits.iter().enumerate() {
        assert_eq!(out.data()[cell], if h { 2.0 } else { 0.0 });
    }
    assert!(depth_transform(&grid, &rig, &feats, 1.0, &DepthSource::Uniform { bins: 0, near: 1.0, far: 2.0 }).is_err());
}

fn mini_setup() -> (PipelineConfig, CameraRig, Vec<Tensor>, ParamStore) {
    let cfg = PipelineConfig::mini();
    let rig = make_ring_rig(1, 90.0, 128, 128, 2.5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let images = vec![rand_tensor(&mut rng, &[2, 128, 128], 1.0)];
    let mut params = ParamStore::init(&cfg, 21).unwrap();
    for (name, t) in params.params.iter_mut() {
        if name.starts_with("theta") {
            *t = rand_tensor(&mut rng, t.shape(), 0.5);
        }
    }
    (cfg, rig, images, params)
}

#[test]
fn mini_model_passes_grad_check() {
    let check = mini_grad_check(21).unwrap();
    assert!(check.report.passed, "{check:?}");
    assert!(check.report.checked > 100);
}

#[test]
fn height_gradient_flows_through_projection() {
    let (cfg, rig, images, params) = mini_setup();
    let geom = ViewGeometry::new(&cfg.grid().unwrap(), &rig);
    let model = Model::new(cfg, params).unwrap();
    let mut tape = Tape::<f64>::new();
    let vars = model.bind(&mut tape, true);
    let out = model.forward(&mut tape, vars.clone(), &geom, &images, true, None).unwrap();
    let s = tape.sum(out.seg_logits);
    let g = tape.backward(s).unwrap();
    let w = g.get(vars["theta0.w1"]).unwrap();
    assert!(w.iter().any(|&x| x != 0.0));
}

#[test]
fn checkpoint_roundtrip_reproduces_outputs() {
    let (cfg, rig, images, params) = mini_setup();
    let dir = tempfile::tempdir().unwrap();
    params.save_checkpoint(&cfg, dir.path()).unwrap();
    let (cfg2, p2) = ParamStore::load_checkpoint(dir.path(), Some(&cfg)).unwrap();
    assert_eq!(cfg, cfg2);
    assert_eq!(params.params, p2.params);
    let a = run_model(&images, &rig, &Model::new(cfg.clone(), params).unwrap()).unwrap();
    let b = run_model(&images, &rig, &Model::new(cfg2, p2).unwrap()).unwrap();
    assert_eq!(a.seg_logits, b.seg_logits);
    let other = PipelineConfig {
        channels: 5,
        ..cfg
    };
    assert!(ParamStore::load_checkpoint(dir.path(), Some(&other)).is_err());
}

#[test]
fn running_norm_uses_buffers_at_inference() {
    let cfg = PipelineConfig {
        norm: NormScheme::Running { momentum: 0.5 },
        ..PipelineConfig::mini()
    };
    let (_, rig, images, _) = mini_setup();
    let mut model = Model::new(cfg.clone(), ParamStore::init(&cfg, 1).unwrap()).unwrap();
    let a = run_model(&images, &rig, &model).unwrap();
    let stats = vec![("head.down0".to_string(), vec![0.3; 3], vec![2.0; 3])];
    model.update_running_stats(&stats);
    assert_eq!(model.params.buffers["head.down0.running_mean"].data(), &[0.15; 3]);
    assert_eq!(model.params.buffers["head.down0.running_var"].data(), &[1.5; 3]);
    let b = run_model(&images, &rig, &model).unwrap();
    assert_ne!(a.seg_logits, b.seg_logits);
}

#[test]
fn remap_of_a_smooth_field_is_within_cell_error() {
    let grid = build_polar_grid(50.0 * 2f64.sqrt(), 100, 400).unwrap();
    let setting = EvalSetting::numbered(2).unwrap();
    let xy = grid.centers_xy();
    let field = Tensor::from_fn(&[1, 100, 400], |i| xy[i].0 + xy[i].1);
    let rect = remap_polar_to_rect(&field, &grid, &setting, RemapMode::Bilinear, 0.0).unwrap();
    let bound = grid.dr() + grid.r_max * grid.dtheta();
    let mut worst: f64 = 0.0;
    for r in 0..setting.rows() {
        for c in 0..setting.cols() {
            let (x, y) = setting.cell_center(r, c);
            worst = worst.max((rect.get(&[0, r, c]) - (x + y)).abs());
        }
    }
    assert!(worst < bound, "{worst} >= {bound}");
}

#[test]
fn nearest_remap_copies_the_containing_cell() {
    let grid = build_polar_grid(10.0, 5, 12).unwrap();
    let setting = EvalSetting::new(14.0, 14.0, 0.5).unwrap();
    let field = Tensor::from_fn(&[1, 5, 12], |i| i as f64);
    let rect = remap_polar_to_rect(&field, &grid, &setting, RemapMode::Nearest, -1.0).unwrap();
    for r in 0..setting.rows() {
        for c in 0..setting.cols() {
            let (x, y) = setting.cell_center(r, c);
            let (rho, th) = polarbev::geometry::cartesian_to_polar(x, y);
            let want = if rho >= 10.0 {
                -1.0
            } else {
                let j = (rho / grid.dr()).floor() as usize;
                let k = (((th + PI) / grid.dtheta()).floor() as usize) % 12;
                (j * 12 + k) as f64
            };
            assert_eq!(rect.get(&[0, r, c]), want, "({x}, {y})");
        }
    }
}

#[test]
fn rect_loss_matches_scalar_oracle_on_4x4() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let cfg = PipelineConfig {
        pos_weight: 2.5,
        ..PipelineConfig::default()
    };
    for _ in 0..20 {
        let n = 16;
        let t = RectTargets::<f64> {
            rows: 4,
            cols: 4,
            seg: Arc::new((0..n).map(|_| rng.random_range(0..2)).collect()),
            center: Arc::new((0..n).map(|_| rng.random_range(0.0..1.0)).collect()),
            offset: Arc::new((0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect()),
            mask: Arc::new((0..n).map(|_| rng.random_bool(0.4)).collect()),
        };
        let seg: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-4.0..4.0)).collect();
        let cen: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let off: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::<f64>::inference();
        let s = tape.constant(Tensor::new(&[2, 4, 4], seg.clone()).unwrap());
        let c = tape.constant(Tensor::new(&[1, 4, 4], cen.clone()).unwrap());
        let o = tape.constant(Tensor::new(&[2, 4, 4], off.clone()).unwrap());
        let (_, parts) = rect_loss(&mut tape, s, c, o, &t, &cfg).unwrap();
        let want = scalar_loss_oracle(&seg, &cen, &off, &t, &cfg);
        assert!((parts.total - want).abs() < 1e-12, "{} vs {want}", parts.total);
    }
}

#[test]
fn empty_scene_has_zero_offset_loss() {
    let setting = EvalSetting::new(4.0, 4.0, 1.0).unwrap();
    let scene = SceneSpec {
        boxes: vec![],
        seed: 0,
        extent: 4.0,
    };
    let gt = polarbev::synth::rasterize_gt(&scene, &setting);
    let parts = compute_loss(
        &Tensor::from_fn(&[2, 4, 4], |i| if i < 16 { 5.0 } else { -5.0 }),
        &Tensor::zeros(&[1, 4, 4]),
        &Tensor::full(&[2, 4, 4], 9.0),
        &gt,
        &PipelineConfig::default(),
    )
    .unwrap();
    assert_eq!(parts.offset, 0.0);
    assert!(parts.seg < 1e-4);
    assert!(compute_loss(&Tensor::zeros(&[2, 3, 4]), &Tensor::zeros(&[1, 4, 4]), &Tensor::zeros(&[2, 4, 4]), &gt, &PipelineConfig::default()).is_err());
}

fn tiny_training() -> (Vec<SceneData>, CameraRig, TrainConfig, EvalSetting) {
    let mut pipeline = PipelineConfig::mini();
    pipeline.encoder.in_channels = 3;
    let rig = make_ring_rig(2, 100.0, 64, 32, 2.5).unwrap();
    let setting = EvalSetting::new(24.0, 24.0, 1.0).unwrap();
    let grid = pipeline.grid().unwrap();
    let scenes = polarbev::synth::gen_scene_set(
        2,
        3,
        polarbev::synth::SceneKnobs {
            difficulty: 2,
            min_range: 4.0,
            max_range: 9.0,
            extent: 24.0,
        },
    )
    .unwrap();
    let data = scenes
        .iter()
        .enumerate()
        .map(|(i, s)| SceneData::render(format!("s{i}"), s, &rig, &polarbev::synth::toy_plan(), &setting, &grid))
        .collect();
    let mut cfg = TrainConfig {
        pipeline,
        ..TrainConfig::default()
    };
    cfg.optimizer.steps = 6;
    cfg.optimizer.eval_every = 2;
    cfg.optimizer.warmup = 2;
    (data, rig, cfg, setting)
}

#[test]
fn training_is_deterministic() {
    let (data, rig, cfg, setting) = tiny_training();
    let a = train_toy(&data, &rig, &cfg, &setting, |_| {}).unwrap();
    let b = train_toy(&data, &rig, &cfg, &setting, |_| {}).unwrap();
    let ja = serde_json::to_string(&a.trace.iter().map(|e| (e.step, e.loss, e.iou, e.pq)).collect::<Vec<_>>()).unwrap();
    let jb = serde_json::to_string(&b.trace.iter().map(|e| (e.step, e.loss, e.iou, e.pq)).collect::<Vec<_>>()).unwrap();
    assert_eq!(ja, jb);
    assert_eq!(a.model.params.params, b.model.params.params);
    assert_eq!(a.trace.len(), 4);
}

#[test]
fn zero_learning_rate_keeps_metrics_constant() {
    let (data, rig, mut cfg, setting) = tiny_training();
    cfg.optimizer.lr = 0.0;
    let out = train_toy(&data, &rig, &cfg, &setting, |_| {}).unwrap();
    for e in &out.trace {
        assert_eq!((e.iou, e.pq), (out.trace[0].iou, out.trace[0].pq));
        assert_eq!(e.height_mae, out.trace[0].height_mae);
    }
}

#[test]
fn training_needs_scenes() {
    let (_, rig, cfg, setting) = tiny_training();
    assert!(train_toy(&[], &rig, &cfg, &setting, |_| {}).is_err());
}

#[test]
fn non_finite_loss_reports_divergence_with_step() {
    let (mut data, rig, cfg, setting) = tiny_training();
    for d in &mut data {
        d.gt.centerness.data[0] = f64::NAN;
    }
    match train_toy(&data, &rig, &cfg, &setting, |_| {}) {
        Err(polarbev::Error::Diverged { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.report.aggregate)),
    }
}
