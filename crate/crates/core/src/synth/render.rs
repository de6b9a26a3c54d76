use serde::{Deserialize, Serialize};

use super::SceneSpec;
use crate::geometry::{CameraModel, CameraRig};
use crate::tensor::Tensor;

/// Value written into geometric channels of pixels whose ray hits nothing.
pub const NO_HIT_SENTINEL: f64 = -1e6;

/// What a render channel encodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    WorldX,
    WorldY,
    SurfaceHeight,
    /// 0 for ground, `i + 1` for box `i`.
    BoxId,
    Constant,
    /// 1 on box top faces, 0 elsewhere.
    TopFace,
    /// `x / depth`; like the two below it is affine in pixel coordinates on
    /// any plane, so bilinear sampling reproduces it exactly on a planar
    /// patch.
    XOverDepth,
    YOverDepth,
    InvDepth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderChannelPlan {
    pub roles: Vec<Role>,
    /// Fill for geometric channels of no-hit pixels.
    #[serde(default = "default_fill")]
    pub no_hit_fill: f64,
    /// Ground hits farther than this horizontal range count as no hit.
    #[serde(default = "default_range")]
    pub max_ground_range: f64,
}

fn default_fill() -> f64 {
    NO_HIT_SENTINEL
}

fn default_range() -> f64 {
    1000.0
}

impl RenderChannelPlan {
    pub fn new(roles: Vec<Role>) -> crate::Result<Self> {
        if roles.is_empty() {
            return Err(crate::Error::config("a render plan needs at least one channel"));
        }
        Ok(RenderChannelPlan {
            roles,
            no_hit_fill: NO_HIT_SENTINEL,
            max_ground_range: default_range(),
        })
    }

    pub fn with_fill(mut self, fill: f64) -> Self {
        self.no_hit_fill = fill;
        self
    }
}

/// Channels fed to the encoder in toy training: top-face flag, surface
/// height and inverse depth, with no-hit pixels set to 0.
pub fn toy_plan() -> RenderChannelPlan {
    RenderChannelPlan::new(vec![Role::TopFace, Role::SurfaceHeight, Role::InvDepth])
        .expect("non-empty")
        .with_fill(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HitKind {
    None,
    Ground,
    Top(usize),
    Side(usize),
}

/// Nearest intersection of a pixel ray; `depth` is the camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub kind: HitKind,
    pub point: [f64; 3],
    pub depth: f64,
}

pub struct RenderedView {
    /// `[C, H, W]`.
    pub image: Tensor,
    /// Row-major `[H, W]`.
    pub hits: Vec<Hit>,
}

impl RenderedView {
    pub fn hit(&self, u: usize, v: usize) -> &Hit {
        &self.hits[v * self.image.shape()[2] + u]
    }
}

/// Slab intersection of a ray with box `b`; returns the entry depth and
/// whether the top face is the entry face.
fn ray_box(origin: [f64; 3], dir: [f64; 3], b: &super::BoxSpec) -> Option<(f64, bool)> {
    let (s, c) = b.yaw.sin_cos();
    let (ox, oy) = b.to_local(origin[0], origin[1]);
    let (dx, dy) = (c * dir[0] + s * dir[1], -s * dir[0] + c * dir[1]);
    let slabs = [
        (ox, dx, 0.5 * b.length, false),
        (oy, dy, 0.5 * b.width, false),
        (origin[2] - 0.5 * b.top, dir[2], 0.5 * b.top, true),
    ];
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    let mut top = false;
    for (o, d, half, vertical) in slabs {
        if d == 0.0 {
            if o.abs() > half {
                return None;
            }
            continue;
        }
        let (mut a, mut e) = ((-half - o) / d, (half - o) / d);
        if a > e {
            std::mem::swap(&mut a, &mut e);
        }
        if a > t0 {
            t0 = a;
            // entering through the z slab from above is the top face
            top = vertical && d < 0.0;
        }
        t1 = t1.min(e);
    }
    (t0 <= t1 && t0 > 0.0).then_some((t0, top))
}

fn trace(cam: &CameraModel, origin: [f64; 3], scene: &SceneSpec, plan: &RenderChannelPlan, u: f64, v: f64) -> Hit {
    let dir = cam.ray(u, v);
    let mut best = Hit {
        kind: HitKind::None,
        point: [f64::NAN; 3],
        depth: f64::INFINITY,
    };
    if dir[2] < 0.0 {
        let t = -origin[2] / dir[2];
        let p = [origin[0] + t * dir[0], origin[1] + t * dir[1], 0.0];
        if p[0].hypot(p[1]) <= plan.max_ground_range {
            best = Hit {
                kind: HitKind::Ground,
                point: p,
                depth: t,
            };
        }
    }
    for (i, b) in scene.boxes.iter().enumerate() {
        if let Some((t, top)) = ray_box(origin, dir, b) {
            if t < best.depth {
                let mut p = [0, 1, 2].map(|k| origin[k] + t * dir[k]);
                if top {
                    p[2] = b.top;
                }
                best = Hit {
                    kind: if top { HitKind::Top(i) } else { HitKind::Side(i) },
                    point: p,
                    depth: t,
                };
            }
        }
    }
    best
}

fn channel(role: Role, hit: &Hit, fill: f64) -> f64 {
    if role == Role::Constant {
        return 1.0;
    }
    if hit.kind == HitKind::None {
        return match role {
            Role::TopFace => 0.0,
            _ => fill,
        };
    }
    let p = hit.point;
    match role {
        Role::WorldX => p[0],
        Role::WorldY => p[1],
        Role::SurfaceHeight => p[2],
        Role::BoxId => match hit.kind {
            HitKind::Top(i) | HitKind::Side(i) => (i + 1) as f64,
            _ => 0.0,
        },
        Role::TopFace => matches!(hit.kind, HitKind::Top(_)) as u8 as f64,
        Role::XOverDepth => p[0] / hit.depth,
        Role::YOverDepth => p[1] / hit.depth,
        Role::InvDepth => 1.0 / hit.depth,
        Role::Constant => unreachable!(),
    }
}

/// Casts one ray through every pixel centre of every camera and fills the
/// planned channels from the nearest hit among box faces and the ground.
pub fn render_views(scene: &SceneSpec, rig: &CameraRig, plan: &RenderChannelPlan) -> Vec<RenderedView> {
    rig.cameras
        .iter()
        .map(|cam| {
            let origin = cam.position();
            let (w, h, c) = (cam.width, cam.height, plan.roles.len());
            let mut img = vec![0.0; c * h * w];
            let mut hits = Vec::with_capacity(h * w);
            for v in 0..h {
                for u in 0..w {
                    let hit = trace(cam, origin, scene, plan, u as f64, v as f64);
                    for (ch, &role) in plan.roles.iter().enumerate() {
                        img[(ch * h + v) * w + u] = channel(role, &hit, plan.no_hit_fill);
                    }
                    hits.push(hit);
                }
            }
            RenderedView {
                image: Tensor::new(&[c, h, w], img).expect("render shape"),
                hits,
            }
        })
        .collect()
}
