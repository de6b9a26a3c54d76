//! Deterministic box-world scenes, analytic ray-cast renders and BEV
//! ground-truth rasters.

mod gt;
mod render;

pub use gt::{rasterize_gt, rasterize_polar_heights, GtRasters, CENTER_SIGMA_CELLS};
pub use render::{render_views, toy_plan, Hit, HitKind, RenderChannelPlan, RenderedView, Role, NO_HIT_SENTINEL};

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, CameraRig};

/// Radius of the disc around the ego vehicle that boxes never touch.
pub const EGO_EXCLUSION_RADIUS: f64 = 2.0;

/// Downward pitch of every ring camera, degrees.
pub const RING_PITCH_DEG: f64 = 5.0;

/// Horizontal field of view of the standard ring rigs, degrees.
pub const RING_FOV_DEG: f64 = 70.0;
/// Image size `(width, height)` of the standard ring rigs.
pub const RING_IMAGE: (usize, usize) = (480, 224);
/// Camera height above ground of the standard ring rigs, metres.
pub const RING_MOUNT_HEIGHT: f64 = 2.5;

/// The six-camera surround rig used for toy training.
pub fn ring6() -> CameraRig {
    make_ring_rig(6, RING_FOV_DEG, RING_IMAGE.0, RING_IMAGE.1, RING_MOUNT_HEIGHT).expect("valid constants")
}

/// A single forward camera with the ring-rig intrinsics.
pub fn ring1() -> CameraRig {
    make_ring_rig(1, RING_FOV_DEG, RING_IMAGE.0, RING_IMAGE.1, RING_MOUNT_HEIGHT).expect("valid constants")
}

/// `k` cameras at the ego origin, `mount_height` above ground, yaws at
/// `360/k` degree spacing starting along `+x`, pitched down by
/// [`RING_PITCH_DEG`]. Focal length follows from the horizontal fov.
pub fn make_ring_rig(k: usize, fov_deg: f64, width: usize, height: usize, mount_height: f64) -> Result<CameraRig> {
    if k == 0 {
        return Err(Error::config("a ring rig needs at least one camera"));
    }
    if !(fov_deg > 0.0 && fov_deg < 180.0) {
        return Err(Error::config(format!("horizontal fov must lie in (0, 180) degrees, got {fov_deg}")));
    }
    if width < 2 || height < 2 {
        return Err(Error::config("ring rig images need at least 2×2 pixels"));
    }
    let f = 0.5 * width as f64 / (0.5 * fov_deg.to_radians()).tan();
    let (cx, cy) = (0.5 * (width as f64 - 1.0), 0.5 * (height as f64 - 1.0));
    let pitch = RING_PITCH_DEG.to_radians();
    let cams = (0..k)
        .map(|i| {
            let yaw = 2.0 * PI * i as f64 / k as f64;
            let fwd = [pitch.cos() * yaw.cos(), pitch.cos() * yaw.sin(), -pitch.sin()];
            let right = [yaw.sin(), -yaw.cos(), 0.0];
            let down = cross(fwd, right);
            CameraModel::from_pose(format!("cam{i}"), (f, f, cx, cy), [right, down, fwd], [0.0, 0.0, mount_height], width, height)
        })
        .collect();
    CameraRig::new(cams)
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// An upright box standing on the ground.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxSpec {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub length: f64,
    pub width: f64,
    /// Height of the top face above the ground, metres.
    pub top: f64,
}

impl BoxSpec {
    /// Point in box-local coordinates (`x` along the length).
    pub fn to_local(&self, x: f64, y: f64) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        let (dx, dy) = (x - self.x, y - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (lx, ly) = self.to_local(x, y);
        lx.abs() <= 0.5 * self.length && ly.abs() <= 0.5 * self.width
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let (hl, hw) = (0.5 * self.length, 0.5 * self.width);
        [(hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)].map(|(a, b)| (self.x + c * a - s * b, self.y + s * a + c * b))
    }

    /// Distance from a ground point to the footprint (0 inside).
    pub fn footprint_distance(&self, x: f64, y: f64) -> f64 {
        let (lx, ly) = self.to_local(x, y);
        let dx = (lx.abs() - 0.5 * self.length).max(0.0);
        let dy = (ly.abs() - 0.5 * self.width).max(0.0);
        dx.hypot(dy)
    }

    fn bounding_radius(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub boxes: Vec<BoxSpec>,
    pub seed: u64,
    /// Side of the square region, centred on the ego, that holds every box.
    pub extent: f64,
}

impl SceneSpec {
    /// Checks the scene invariants against the height bounds of a model.
    pub fn validate(&self, z_inf: f64, z_sup: f64) -> Result<()> {
        for (i, b) in self.boxes.iter().enumerate() {
            let fail = |msg: String| {
                Err(Error::Validation {
                    path: format!("boxes[{i}]"),
                    msg,
                })
            };
            if !(b.length > 0.0 && b.width > 0.0) {
                return fail("box footprint must have positive size".into());
            }
            if !(b.top > z_inf && b.top < z_sup) {
                return fail(format!("top height {} outside ({z_inf}, {z_sup})", b.top));
            }
            if b.corners().iter().any(|&(x, y)| x.abs().max(y.abs()) > 0.5 * self.extent) {
                return fail(format!("footprint leaves the {} m scene extent", self.extent));
            }
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&text)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Controls for [`gen_scene_set`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneKnobs {
    /// 0 gives one fixed box straight ahead; `d ≥ 1` draws `1..=min(d, 8)`
    /// random boxes.
    pub difficulty: u32,
    /// Box centres are drawn at ranges in `[min_range, max_range]`.
    pub min_range: f64,
    pub max_range: f64,
    pub extent: f64,
}

impl Default for SceneKnobs {
    fn default() -> Self {
        SceneKnobs {
            difficulty: 8,
            min_range: 4.0,
            max_range: 45.0,
            extent: 100.0,
        }
    }
}

impl SceneKnobs {
    /// Knobs of the toy training set: boxes within 15 m.
    pub fn toy() -> Self {
        SceneKnobs {
            max_range: 15.0,
            ..SceneKnobs::default()
        }
    }
}

/// The box used at difficulty 0.
pub const CENTERED_BOX: BoxSpec = BoxSpec {
    x: 10.0,
    y: 0.0,
    yaw: 0.0,
    length: 4.5,
    width: 2.0,
    top: 1.5,
};

const MAX_TRIES: usize = 10_000;

fn scene_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index as u64)
}

/// Reproducible scenes of 1–8 non-overlapping boxes, sizes in
/// `[3, 6] × [1.5, 2.5]` m, tops in `[1, 2]` m, clear of the ego disc.
pub fn gen_scene_set(n: usize, seed: u64, knobs: SceneKnobs) -> Result<Vec<SceneSpec>> {
    if n == 0 {
        return Err(Error::config("scene count must be at least 1"));
    }
    if !(knobs.min_range >= 0.0 && knobs.max_range > knobs.min_range && knobs.extent > 0.0) {
        return Err(Error::config("scene knobs need 0 <= min_range < max_range and a positive extent"));
    }
    (0..n)
        .map(|i| {
            let s = scene_seed(seed, i);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let boxes = if knobs.difficulty == 0 {
                vec![CENTERED_BOX]
            } else {
                let count = rng.random_range(1..=knobs.difficulty.min(8) as usize);
                place_boxes(&mut rng, count, &knobs)?
            };
            Ok(SceneSpec {
                boxes,
                seed: s,
                extent: knobs.extent,
            })
        })
        .collect()
}

fn place_boxes(rng: &mut ChaCha8Rng, count: usize, k: &SceneKnobs) -> Result<Vec<BoxSpec>> {
    let mut boxes: Vec<BoxSpec> = Vec::with_capacity(count);
    let mut tries = 0;
    while boxes.len() < count {
        tries += 1;
        if tries > MAX_TRIES {
            return Err(Error::config("could not place non-overlapping boxes; widen the range knobs"));
        }
        let r = rng.random_range(k.min_range..k.max_range);
        let th = rng.random_range(-PI..PI);
        let b = BoxSpec {
            x: r * th.cos(),
            y: r * th.sin(),
            yaw: rng.random_range(-PI..PI),
            length: rng.random_range(3.0..6.0),
            width: rng.random_range(1.5..2.5),
            top: rng.random_range(1.0..2.0),
        };
        let inside = b.corners().iter().all(|&(x, y)| x.abs().max(y.abs()) <= 0.5 * k.extent);
        let clear_of_ego = b.footprint_distance(0.0, 0.0) > EGO_EXCLUSION_RADIUS;
        let clear_of_boxes = boxes
            .iter()
            .all(|o| (o.x - b.x).hypot(o.y - b.y) > o.bounding_radius() + b.bounding_radius() + 0.5);
        if inside && clear_of_ego && clear_of_boxes {
            boxes.push(b);
        }
    }
    Ok(boxes)
}
