mod common;

use common::footprint_samples;

use std::f64::consts::PI;

use polarbev::geometry::{build_polar_grid, project_grid, project_to_view, lift_homogeneous, CameraModel};
use polarbev::metrics::EvalSetting;
use polarbev::synth::*;
use proptest::prelude::*;

/// Ground point seen at pixel `(u, v)`, from the inverse of the ground-plane
/// homography (projection matrix columns x, y, 1).
fn ground_from_homography(cam: &CameraModel, u: f64, v: f64) -> Option<[f64; 2]> {
    let p = cam.projection_matrix();
    let h = [0, 1, 2].map(|i| [p[i][0], p[i][1], p[i][3]]);
    let det = h[0][0] * (h[1][1] * h[2][2] - h[1][2] * h[2][1]) - h[0][1] * (h[1][0] * h[2][2] - h[1][2] * h[2][0])
        + h[0][2] * (h[1][0] * h[2][1] - h[1][1] * h[2][0]);
    let cof = |r: usize, c: usize| {
        let (r0, r1) = ((r + 1) % 3, (r + 2) % 3);
        let (c0, c1) = ((c + 1) % 3, (c + 2) % 3);
        h[r0][c0] * h[r1][c1] - h[r0][c1] * h[r1][c0]
    };
    let inv = |i: usize, j: usize| cof(j, i) / det;
    let q = [u, v, 1.0];
    let w: Vec<f64> = (0..3).map(|i| (0..3).map(|j| inv(i, j) * q[j]).sum()).collect();
    // the point lies in front of the camera when the depth scale is positive
    let scale = 1.0 / w[2];
    (scale > 0.0).then(|| [w[0] * scale, w[1] * scale])
}

fn bilinear(img: &polarbev::tensor::Tensor, ch: usize, u: f64, v: f64) -> f64 {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
    let (u1, v1) = ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1));
    let (a, b) = (u - u0 as f64, v - v0 as f64);
    let at = |x: usize, y: usize| img.data()[(ch * h + y) * w + x];
    (1.0 - a) * (1.0 - b) * at(u0, v0) + a * (1.0 - b) * at(u1, v0) + (1.0 - a) * b * at(u0, v1) + a * b * at(u1, v1)
}

#[test]
fn ring6_neighbours_sit_60_degrees_apart_and_overlap_by_about_10() {
    let rig = ring6();
    let sees = |cam: &CameraModel, az: f64| {
        project_to_view(lift_homogeneous(100.0 * az.cos(), 100.0 * az.sin(), RING_MOUNT_HEIGHT), cam).valid
    };
    // a horizontal direction at angle Δ off the axis lands tan Δ / cos(pitch)
    // focal lengths from the centre column
    let pitch = RING_PITCH_DEG.to_radians();
    let half = ((RING_FOV_DEG / 2.0).to_radians().tan() * pitch.cos()).atan().to_degrees();
    let want_overlap = 2.0 * half - 60.0;
    let steps = 3600;
    let mut counts = vec![0usize; steps];
    for (i, c) in counts.iter_mut().enumerate() {
        let az = (i as f64 * 0.1).to_radians();
        *c = rig.cameras.iter().filter(|cam| sees(cam, az)).count();
    }
    assert!(counts.iter().all(|&c| c == 1 || c == 2));
    let overlap_deg = counts.iter().filter(|&&c| c == 2).count() as f64 * 0.1 / 6.0;
    assert!((overlap_deg - want_overlap).abs() <= 0.2, "{overlap_deg} vs {want_overlap}");
    assert!((want_overlap - 10.0).abs() < 0.5);
    for (i, cam) in rig.cameras.iter().enumerate() {
        let yaw = (60.0 * i as f64).to_radians();
        assert!(sees(cam, yaw) && !sees(cam, yaw + PI));
        let p = project_to_view(lift_homogeneous(100.0 * yaw.cos(), 100.0 * yaw.sin(), RING_MOUNT_HEIGHT), cam);
        assert!((p.u - cam.cx()).abs() < 1e-9);
    }
}

#[test]
fn every_cell_beyond_one_metre_is_seen_at_camera_height() {
    let rig = ring6();
    let grid = build_polar_grid(50.0, 100, 400).unwrap();
    let heights = vec![RING_MOUNT_HEIGHT; grid.cells()];
    let proj = project_grid(&grid, &heights, &rig).unwrap();
    let n = grid.cells();
    for j in 0..grid.d_rad {
        if grid.radius(j) <= 1.0 {
            continue;
        }
        for k in 0..grid.d_ang {
            let i = j * grid.d_ang + k;
            assert!((0..rig.len()).any(|v| proj.masks[v * n + i]), "cell ({j}, {k}) unseen");
        }
    }
}

#[test]
fn empty_scene_world_coordinates_match_the_ground_homography() {
    let rig = make_ring_rig(2, 80.0, 40, 30, 1.7).unwrap();
    let scene = SceneSpec { boxes: vec![], seed: 0, extent: 100.0 };
    let plan = RenderChannelPlan::new(vec![Role::WorldX, Role::WorldY, Role::SurfaceHeight, Role::BoxId]).unwrap();
    for (view, cam) in render_views(&scene, &rig, &plan).iter().zip(&rig.cameras) {
        let d = view.image.data();
        let hw = cam.width * cam.height;
        for v in 0..cam.height {
            for u in 0..cam.width {
                let i = v * cam.width + u;
                let below = cam.ray(u as f64, v as f64)[2] < 0.0;
                match ground_from_homography(cam, u as f64, v as f64).filter(|_| below) {
                    Some([x, y]) => {
                        assert!((d[i] - x).abs() < 1e-9 * x.abs().max(1.0), "({u}, {v})");
                        assert!((d[hw + i] - y).abs() < 1e-9 * y.abs().max(1.0));
                        assert_eq!(d[2 * hw + i], 0.0);
                        assert_eq!(d[3 * hw + i], 0.0);
                    }
                    None => {
                        assert_eq!(view.hit(u, v).kind, HitKind::None);
                        assert_eq!(d[i], NO_HIT_SENTINEL);
                    }
                }
            }
        }
    }
}

#[test]
fn four_by_two_box_fills_an_eight_by_four_block_at_half_metre() {
    let b = BoxSpec { x: 5.0, y: 0.0, yaw: 0.0, length: 4.0, width: 2.0, top: 1.5 };
    let scene = SceneSpec { boxes: vec![b], seed: 0, extent: 20.0 };
    let setting = EvalSetting::new(20.0, 20.0, 0.5).unwrap();
    let gt = rasterize_gt(&scene, &setting);
    let cells: Vec<(usize, usize)> = (0..setting.rows())
        .flat_map(|r| (0..setting.cols()).map(move |c| (r, c)))
        .filter(|&(r, c)| gt.seg.data[r * setting.cols() + c])
        .collect();
    assert_eq!(cells.len(), 32);
    let rows: std::collections::BTreeSet<_> = cells.iter().map(|c| c.0).collect();
    let cols: std::collections::BTreeSet<_> = cells.iter().map(|c| c.1).collect();
    assert_eq!((rows.len(), cols.len()), (8, 4));
    assert_eq!(gt.instances.count(), 1);
    for &(r, c) in &cells {
        let i = r * setting.cols() + c;
        let (x, y) = setting.cell_center(r, c);
        assert_eq!((gt.offset[0].data[i], gt.offset[1].data[i]), (5.0 - x, -y));
        assert_eq!(gt.height.data[i], 1.5);
    }
}

#[test]
fn generated_boxes_respect_ego_disc_extent_and_each_other() {
    let scenes = gen_scene_set(1000, 11, SceneKnobs::default()).unwrap();
    for s in &scenes {
        assert!((1..=8).contains(&s.boxes.len()));
        s.validate(0.0, 3.0).unwrap();
        for (i, b) in s.boxes.iter().enumerate() {
            assert!((3.0..6.0).contains(&b.length) && (1.5..2.5).contains(&b.width) && (1.0..2.0).contains(&b.top));
            let pts = footprint_samples(b);
            assert!(pts.iter().all(|(x, y)| x.hypot(*y) > EGO_EXCLUSION_RADIUS), "scene {}", s.seed);
            for o in &s.boxes[i + 1..] {
                assert!(pts.iter().all(|&(x, y)| !o.contains(x, y)), "overlap in scene {}", s.seed);
            }
        }
    }
}

#[test]
fn scene_generation_and_rendering_are_deterministic() {
    let a = gen_scene_set(5, 3, SceneKnobs::toy()).unwrap();
    assert_eq!(a, gen_scene_set(5, 3, SceneKnobs::toy()).unwrap());
    assert_ne!(a, gen_scene_set(5, 4, SceneKnobs::toy()).unwrap());
    let rig = make_ring_rig(6, 70.0, 32, 16, 2.5).unwrap();
    let r1: Vec<_> = render_views(&a[0], &rig, &toy_plan()).into_iter().map(|v| v.image).collect();
    let r2: Vec<_> = render_views(&a[0], &rig, &toy_plan()).into_iter().map(|v| v.image).collect();
    assert_eq!(r1, r2);
    assert!(gen_scene_set(0, 1, SceneKnobs::default()).is_err());
    assert!(gen_scene_set(1, 1, SceneKnobs { min_range: 5.0, max_range: 5.0, ..SceneKnobs::default() }).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn no_hit_pixels_carry_the_sentinel_and_hits_never_do(seed in any::<u64>()) {
        let scene = gen_scene_set(1, seed, SceneKnobs::default()).unwrap().remove(0);
        let rig = make_ring_rig(6, 70.0, 48, 24, 2.5).unwrap();
        let roles = vec![Role::WorldX, Role::WorldY, Role::SurfaceHeight, Role::BoxId, Role::Constant, Role::TopFace,
            Role::XOverDepth, Role::YOverDepth, Role::InvDepth];
        let mut plan = RenderChannelPlan::new(roles.clone()).unwrap();
        plan.max_ground_range = 30.0;
        for view in render_views(&scene, &rig, &plan) {
            let (h, w) = (view.image.shape()[1], view.image.shape()[2]);
            for v in 0..h {
                for u in 0..w {
                    let hit = view.hit(u, v);
                    for (c, role) in roles.iter().enumerate() {
                        let x = view.image.data()[(c * h + v) * w + u];
                        match (hit.kind, role) {
                            (_, Role::Constant) => prop_assert_eq!(x, 1.0),
                            (HitKind::None, Role::TopFace) => prop_assert_eq!(x, 0.0),
                            (HitKind::None, _) => prop_assert_eq!(x, NO_HIT_SENTINEL),
                            _ => prop_assert!(x.is_finite() && x != NO_HIT_SENTINEL),
                        }
                    }
                    if hit.kind == HitKind::Ground {
                        prop_assert!(hit.point[0].hypot(hit.point[1]) <= 30.0);
                    }
                }
            }
        }
    }
}

#[test]
fn valid_projections_never_touch_sentinel_pixels() {
    let rig = make_ring_rig(6, 70.0, 120, 56, RING_MOUNT_HEIGHT).unwrap();
    let plan = RenderChannelPlan::new(vec![Role::WorldX]).unwrap();
    let grid = build_polar_grid(50.0 * 2f64.sqrt(), 50, 200).unwrap();
    let n = grid.cells();
    let mut scenes = gen_scene_set(4, 9, SceneKnobs::default()).unwrap();
    scenes.push(SceneSpec { boxes: vec![], seed: 0, extent: 100.0 });
    let mut checked = 0usize;
    for scene in &scenes {
        let views = render_views(scene, &rig, &plan);
        let (_, tops) = rasterize_polar_heights(scene, &grid);
        // ground level everywhere, then the box tops over their footprints
        for heights in [vec![0.0; n], tops] {
            let proj = project_grid(&grid, &heights, &rig).unwrap();
            for (vi, view) in views.iter().enumerate() {
                let (h, w) = (view.image.shape()[1], view.image.shape()[2]);
                for i in 0..n {
                    let k = vi * n + i;
                    if !proj.masks[k] {
                        continue;
                    }
                    let (u, v) = (proj.pixels[2 * k], proj.pixels[2 * k + 1]);
                    let (u0, v0) = (u.floor() as usize, v.floor() as usize);
                    for (a, b) in [(u0, v0), ((u0 + 1).min(w - 1), v0), (u0, (v0 + 1).min(h - 1)), ((u0 + 1).min(w - 1), (v0 + 1).min(h - 1))] {
                        assert_ne!(view.image.data()[b * w + a], NO_HIT_SENTINEL, "cell {i} view {vi}");
                    }
                    checked += 1;
                }
            }
        }
    }
    assert!(checked > 10_000);
}

#[test]
fn box_tops_sampled_at_cell_projections_recover_the_cell() {
    let rig = ring6();
    let grid = build_polar_grid(50.0, 100, 400).unwrap();
    let plan = RenderChannelPlan::new(vec![Role::WorldX, Role::WorldY, Role::XOverDepth, Role::YOverDepth, Role::InvDepth]).unwrap();
    let scenes = gen_scene_set(3, 5, SceneKnobs::toy()).unwrap();
    let mut checked = 0;
    for scene in &scenes {
        let views = render_views(scene, &rig, &plan);
        let (fg, h) = rasterize_polar_heights(scene, &grid);
        let proj = project_grid(&grid, &h, &rig).unwrap();
        let n = grid.cells();
        for (i, (x, y)) in grid.centers_xy().into_iter().enumerate() {
            if !fg[i] {
                continue;
            }
            for (vi, view) in views.iter().enumerate() {
                let k = vi * n + i;
                if !proj.masks[k] {
                    continue;
                }
                let (u, v) = (proj.pixels[2 * k], proj.pixels[2 * k + 1]);
                let w = view.image.shape()[2];
                let h_img = view.image.shape()[1];
                let (u0, v0) = (u.floor() as usize, v.floor() as usize);
                let nb = [(u0, v0), ((u0 + 1).min(w - 1), v0), (u0, (v0 + 1).min(h_img - 1)), ((u0 + 1).min(w - 1), (v0 + 1).min(h_img - 1))];
                let kinds: Vec<HitKind> = nb.iter().map(|&(a, b)| view.hit(a, b).kind).collect();
                if !kinds.iter().all(|kd| matches!(kd, HitKind::Top(_)) && *kd == kinds[0]) {
                    continue;
                }
                // spread of the neighbour hits bounds the bilinear error
                let pts: Vec<[f64; 3]> = nb.iter().map(|&(a, b)| view.hit(a, b).point).collect();
                let gsd = pts.iter().flat_map(|p| pts.iter().map(move |q| (p[0] - q[0]).hypot(p[1] - q[1]))).fold(0.0, f64::max);
                let (sx, sy) = (bilinear(&view.image, 0, u, v), bilinear(&view.image, 1, u, v));
                assert!((sx - x).hypot(sy - y) <= gsd + 1e-9, "cell {i} view {vi}");
                // projective channels recover the point exactly on a plane
                let inv = bilinear(&view.image, 4, u, v);
                let (px, py) = (bilinear(&view.image, 2, u, v) / inv, bilinear(&view.image, 3, u, v) / inv);
                assert!((px - x).abs() < 1e-9 && (py - y).abs() < 1e-9, "cell {i} view {vi}: {px} {py} vs {x} {y}");
                checked += 1;
            }
        }
    }
    assert!(checked > 100, "only {checked} cells checked");
}

#[test]
fn scene_json_roundtrip_and_validation() {
    let s = gen_scene_set(1, 2, SceneKnobs::default()).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("scene.json");
    s.save(&p).unwrap();
    assert_eq!(SceneSpec::load(&p).unwrap(), s);
    let mut bad = s.clone();
    bad.boxes[0].top = 10.0;
    match bad.validate(-1.0, 4.0) {
        Err(polarbev::Error::Validation { path, .. }) => assert_eq!(path, "boxes[0]"),
        other => panic!("{other:?}"),
    }
}
