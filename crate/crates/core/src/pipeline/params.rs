use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{NormScheme, PipelineConfig};
use crate::error::{Error, Result};
use crate::tensor::io::{read_tensor, write_tensor};
use crate::tensor::Tensor;

/// Named model parameters plus non-trainable buffers, both in `f64`.
/// Iteration order is by name, which keeps every traversal deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    pub params: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

/// Names of the conv blocks (3×3 conv, normalisation, affine, relu).
pub(crate) fn block_names(cfg: &PipelineConfig) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    let e = &cfg.encoder.widths;
    let mut prev = cfg.encoder.in_channels;
    for (i, &w) in e.iter().enumerate() {
        out.push((format!("enc{i}"), prev, w));
        prev = w;
    }
    let fuse_in = cfg.channels + cfg.feature_channels() + cfg.fuse_height as usize;
    for t in 0..theta_sets(cfg) {
        out.push((format!("fuse{t}"), fuse_in, cfg.channels));
    }
    let h = &cfg.head.widths;
    out.push(("head.down0".into(), cfg.channels, h[0]));
    out.push(("head.down1".into(), h[0], h[1]));
    out.push(("head.down2".into(), h[1], h[2]));
    out.push(("head.up1".into(), h[2] + h[1], h[1]));
    out.push(("head.up0".into(), h[1] + h[0], h[0]));
    out
}

/// Number of distinct Θ / fusion weight sets.
pub(crate) fn theta_sets(cfg: &PipelineConfig) -> usize {
    if cfg.share_theta_across_iters {
        1
    } else {
        cfg.n_iters
    }
}

pub(crate) const BRANCHES: [(&str, usize); 3] = [("seg", 2), ("center", 1), ("offset", 2)];

impl ParamStore {
    /// Deterministic initialisation from `seed`: He-normal conv kernels and
    /// Θ hidden layers, unit gains, zero biases, `N(0, 0.1²)` embeddings and a
    /// zero last Θ layer so the height starts at the hypothetical plane.
    pub fn init(cfg: &PipelineConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: &[usize], std: f64| {
            let d = Normal::new(0.0, std).expect("finite std");
            Tensor::from_fn(shape, |_| d.sample(&mut rng))
        };
        let mut s = ParamStore::default();
        let c = cfg.channels;
        s.params.insert("embed.q_rad".into(), normal(&[cfg.d_rad, c], 0.1));
        s.params.insert("embed.q_ang".into(), normal(&[cfg.d_ang, c], 0.1));
        for (name, cin, cout) in block_names(cfg) {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            s.params.insert(format!("{name}.kernel"), normal(&[cout, cin, 3, 3], std));
            s.params.insert(format!("{name}.gamma"), Tensor::full(&[cout], 1.0));
            s.params.insert(format!("{name}.beta"), Tensor::zeros(&[cout]));
            if let NormScheme::Running { .. } = cfg.norm {
                s.buffers.insert(format!("{name}.running_mean"), Tensor::zeros(&[cout]));
                s.buffers.insert(format!("{name}.running_var"), Tensor::full(&[cout], 1.0));
            }
        }
        for t in 0..theta_sets(cfg) {
            let mut prev = c;
            let widths: Vec<usize> = cfg.theta_hidden.iter().copied().chain([1]).collect();
            for (l, &w) in widths.iter().enumerate() {
                let last = l + 1 == widths.len();
                let wt = if last {
                    Tensor::zeros(&[w, prev])
                } else {
                    normal(&[w, prev], (2.0 / prev as f64).sqrt())
                };
                s.params.insert(format!("theta{t}.w{l}"), wt);
                s.params.insert(format!("theta{t}.b{l}"), Tensor::zeros(&[w]));
                prev = w;
            }
        }
        let h0 = cfg.head.widths[0];
        for (b, k) in BRANCHES {
            s.params.insert(format!("head.{b}.kernel"), normal(&[k, h0, 1, 1], (1.0 / h0 as f64).sqrt()));
            s.params.insert(format!("head.{b}.bias"), Tensor::zeros(&[k]));
        }
        Ok(s)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .or_else(|| self.buffers.get(name))
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Writes `config.json` plus one tensor file per parameter and buffer.
    pub fn save_checkpoint(&self, cfg: &PipelineConfig, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let cp = dir.join("config.json");
        std::fs::write(&cp, serde_json::to_vec_pretty(cfg)?).map_err(|e| Error::io(&cp, e))?;
        for (kind, map) in [("params", &self.params), ("buffers", &self.buffers)] {
            for (name, t) in map {
                write_tensor(&dir.join(kind).join(format!("{name}.bin")), name, t)?;
            }
        }
        Ok(())
    }

    /// Loads a checkpoint, validating every tensor shape against the
    /// embedded config and, when given, that config against `expect`.
    pub fn load_checkpoint(dir: &Path, expect: Option<&PipelineConfig>) -> Result<(PipelineConfig, Self)> {
        let cp = dir.join("config.json");
        let text = std::fs::read(&cp).map_err(|e| Error::io(&cp, e))?;
        let cfg: PipelineConfig = serde_json::from_slice(&text)?;
        cfg.validate()?;
        if let Some(want) = expect {
            check_same_shapes(want, &cfg)?;
        }
        let mut store = ParamStore::init(&cfg, 0)?;
        for (kind, map) in [("params", &mut store.params), ("buffers", &mut store.buffers)] {
            for (name, slot) in map.iter_mut() {
                let t: Tensor = read_tensor(&dir.join(kind).join(format!("{name}.bin")))?;
                if t.shape() != slot.shape() {
                    return Err(Error::Validation {
                        path: format!("{kind}.{name}"),
                        msg: format!("checkpoint shape {:?} does not match config shape {:?}", t.shape(), slot.shape()),
                    });
                }
                *slot = t;
            }
        }
        Ok((cfg, store))
    }
}

/// Fails with the first config field whose value changes parameter shapes.
pub fn check_same_shapes(want: &PipelineConfig, got: &PipelineConfig) -> Result<()> {
    let fields: [(&str, String, String); 9] = [
        ("d_rad", want.d_rad.to_string(), got.d_rad.to_string()),
        ("d_ang", want.d_ang.to_string(), got.d_ang.to_string()),
        ("channels", want.channels.to_string(), got.channels.to_string()),
        ("n_iters", want.n_iters.to_string(), got.n_iters.to_string()),
        ("theta_hidden", format!("{:?}", want.theta_hidden), format!("{:?}", got.theta_hidden)),
        ("share_theta_across_iters", want.share_theta_across_iters.to_string(), got.share_theta_across_iters.to_string()),
        ("fuse_height", want.fuse_height.to_string(), got.fuse_height.to_string()),
        ("encoder", format!("{:?}", want.encoder), format!("{:?}", got.encoder)),
        ("head", format!("{:?}", want.head), format!("{:?}", got.head)),
    ];
    for (path, a, b) in fields {
        if a != b {
            return Err(Error::Validation {
                path: path.into(),
                msg: format!("config has {a}, checkpoint has {b}"),
            });
        }
    }
    Ok(())
}
