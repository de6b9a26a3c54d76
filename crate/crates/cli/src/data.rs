//! On-disk dataset layout shared by `gen` and the commands that read it:
//!
//! ```text
//! DIR/rig.json             camera calibration
//! DIR/plan.json            render channel plan
//! DIR/scene_000/scene.json box list
//! DIR/scene_000/view_K.bin rendered view K, [C, H, W] f32
//! DIR/scene_000/gt_setting{1,2}/
//!     seg.pgm instances.pgm   previews
//!     instances.bin           i32 instance ids
//!     centerness.bin offset.bin height.bin
//! ```

use std::path::{Path, PathBuf};

use polarbev::geometry::{CameraRig, PolarGrid};
use polarbev::metrics::EvalSetting;
use polarbev::pipeline::SceneData;
use polarbev::synth::{make_ring_rig, rasterize_gt, rasterize_polar_heights, render_views, ring1, ring6, RenderChannelPlan, SceneSpec, RING_FOV_DEG, RING_IMAGE, RING_MOUNT_HEIGHT};
use polarbev::tensor::io::{read_tensor, write_labels, write_pgm, write_tensor};
use polarbev::tensor::Tensor;
use polarbev::{Error, Result};

use crate::manifest::write_json;

/// `ring6`, `ring1`, `ringK` or `file:PATH`.
pub fn parse_rig(spec: &str) -> Result<CameraRig> {
    match spec {
        "ring6" => Ok(ring6()),
        "ring1" => Ok(ring1()),
        _ if spec.starts_with("file:") => CameraRig::load(Path::new(&spec[5..])),
        _ => match spec.strip_prefix("ring").and_then(|k| k.parse::<usize>().ok()) {
            Some(k) => make_ring_rig(k, RING_FOV_DEG, RING_IMAGE.0, RING_IMAGE.1, RING_MOUNT_HEIGHT),
            None => Err(Error::Config(format!("unknown rig `{spec}`, expected ring6, ring1, ringK or file:PATH"))),
        },
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn scene_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("scene_{i:03}"))
}

fn write_gt(dir: &Path, scene: &SceneSpec, setting: &EvalSetting) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.into(), source: e })?;
    let gt = rasterize_gt(scene, setting);
    let (r, c) = (setting.rows(), setting.cols());
    let seg: Vec<u8> = gt.seg.data.iter().map(|&f| if f { 255 } else { 0 }).collect();
    write_pgm(&dir.join("seg.pgm"), r, c, &seg)?;
    // spread ids over the grey range so neighbouring instances differ
    let inst: Vec<u8> = gt.instances.0.data.iter().map(|&l| if l == 0 { 0 } else { (40 + (l * 53) % 215) as u8 }).collect();
    write_pgm(&dir.join("instances.pgm"), r, c, &inst)?;
    let ids: Vec<i32> = gt.instances.0.data.iter().map(|&l| l as i32).collect();
    write_labels(&dir.join("instances.bin"), "instances", &[r, c], &ids)?;
    write_tensor(&dir.join("centerness.bin"), "centerness", &Tensor::new(&[r, c], gt.centerness.data)?)?;
    let off: Vec<f64> = gt.offset.iter().flat_map(|o| o.data.iter().copied()).collect();
    write_tensor(&dir.join("offset.bin"), "offset", &Tensor::new(&[2, r, c], off)?)?;
    write_tensor(&dir.join("height.bin"), "height", &Tensor::new(&[r, c], gt.height.data)?)
}

/// Renders every scene through `rig` and writes the full layout.
pub fn write_dataset(root: &Path, rig: &CameraRig, plan: &RenderChannelPlan, scenes: &[SceneSpec]) -> Result<()> {
    std::fs::create_dir_all(root).map_err(|e| Error::Io { path: root.into(), source: e })?;
    rig.save(&root.join("rig.json"))?;
    write_json(&root.join("plan.json"), plan)?;
    for (i, scene) in scenes.iter().enumerate() {
        let dir = scene_dir(root, i);
        write_json(&dir.join("scene.json"), scene)?;
        for (k, view) in render_views(scene, rig, plan).iter().enumerate() {
            write_tensor(&dir.join(format!("view_{k}.bin")), &format!("view_{k}"), &view.image.cast::<f32>())?;
        }
        for n in [1, 2] {
            write_gt(&dir.join(format!("gt_setting{n}")), scene, &EvalSetting::numbered(n)?)?;
        }
    }
    Ok(())
}

pub struct Dataset {
    pub rig: CameraRig,
    pub plan: RenderChannelPlan,
    /// `(name, scene, images)` in directory order.
    pub scenes: Vec<(String, SceneSpec, Vec<Tensor>)>,
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let rig = CameraRig::load(&root.join("rig.json"))?;
    let plan: RenderChannelPlan = read_json(&root.join("plan.json"))?;
    let mut scenes = Vec::new();
    for i in 0.. {
        let dir = scene_dir(root, i);
        if !dir.is_dir() {
            break;
        }
        let scene = SceneSpec::load(&dir.join("scene.json"))?;
        let images = (0..rig.len())
            .map(|k| read_tensor::<f64>(&dir.join(format!("view_{k}.bin"))))
            .collect::<Result<Vec<_>>>()?;
        for (k, img) in images.iter().enumerate() {
            let cam = &rig.cameras[k];
            if img.shape() != [plan.roles.len(), cam.height, cam.width] {
                return Err(Error::Validation {
                    path: format!("scene_{i:03}/view_{k}"),
                    msg: format!("shape {:?} does not match the rig and plan", img.shape()),
                });
            }
        }
        scenes.push((format!("scene_{i:03}"), scene, images));
    }
    if scenes.is_empty() {
        return Err(Error::Config(format!("no scene_000 directory under {}", root.display())));
    }
    Ok(Dataset { rig, plan, scenes })
}

impl Dataset {
    /// Training or evaluation records with ground truth on `setting`.
    pub fn scene_data(&self, setting: &EvalSetting, grid: &PolarGrid) -> Vec<SceneData> {
        self.scenes
            .iter()
            .map(|(name, scene, images)| SceneData {
                name: name.clone(),
                images: images.clone(),
                gt: rasterize_gt(scene, setting),
                polar_height: Some(rasterize_polar_heights(scene, grid)),
            })
            .collect()
    }
}
