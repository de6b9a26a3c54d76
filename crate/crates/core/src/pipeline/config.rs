use std::f64::consts::SQRT_2;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{build_polar_grid, PolarGrid};

/// Statistics used by the normalisation after each convolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormScheme {
    /// Per-channel statistics of the current sample, in training and
    /// inference alike.
    Sample,
    /// Sample statistics while training, exponential running averages at
    /// inference.
    Running { momentum: f64 },
}

/// Tiny image encoder: four 3×3 conv blocks with a 2×2 average pool before
/// each of the first three, giving features of stride 8.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub widths: [usize; 4],
}

/// Ring-conv encoder-decoder on the polar grid: `widths[0]` at full
/// resolution, `widths[1]` at 1/2, `widths[2]` at 1/4.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSpec {
    pub widths: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub r_max: f64,
    pub d_rad: usize,
    pub d_ang: usize,
    /// Channels of the polar query `q`.
    pub channels: usize,
    pub n_iters: usize,
    pub z_inf: f64,
    pub z_sup: f64,
    pub h_hypo: f64,
    /// Hidden widths of Θ; input is `channels`, output is 1.
    pub theta_hidden: Vec<usize>,
    pub share_theta_across_iters: bool,
    /// Feed the current height as an extra channel into each fusion block.
    pub fuse_height: bool,
    pub encoder: EncoderSpec,
    pub head: HeadSpec,
    pub norm: NormScheme,
    pub norm_eps: f64,
    /// Loss weight of the centerness term.
    pub lambda_center: f64,
    /// Loss weight of the offset term.
    pub lambda_offset: f64,
    /// Cross-entropy weight of the foreground class (background is 1).
    pub pos_weight: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            r_max: 50.0 * SQRT_2,
            d_rad: 100,
            d_ang: 400,
            channels: 64,
            n_iters: 3,
            z_inf: -2.0,
            z_sup: 2.0,
            h_hypo: 0.0,
            theta_hidden: vec![64],
            share_theta_across_iters: false,
            fuse_height: true,
            encoder: EncoderSpec {
                in_channels: 3,
                widths: [16, 32, 32, 32],
            },
            head: HeadSpec { widths: [32, 48, 64] },
            norm: NormScheme::Sample,
            norm_eps: 1e-5,
            lambda_center: 0.1,
            lambda_offset: 0.1,
            pos_weight: 5.0,
        }
    }
}

/// Downsampling factor of the image encoder.
pub const FEATURE_STRIDE: usize = 8;

impl PipelineConfig {
    /// The miniature configuration used for end-to-end gradient checks.
    pub fn mini() -> Self {
        PipelineConfig {
            r_max: 12.0,
            d_rad: 6,
            d_ang: 8,
            channels: 4,
            n_iters: 2,
            theta_hidden: vec![4],
            encoder: EncoderSpec {
                in_channels: 2,
                widths: [2, 2, 3, 3],
            },
            head: HeadSpec { widths: [3, 3, 3] },
            ..PipelineConfig::default()
        }
    }

    pub fn grid(&self) -> Result<PolarGrid> {
        build_polar_grid(self.r_max, self.d_rad, self.d_ang)
    }

    pub fn feature_channels(&self) -> usize {
        self.encoder.widths[3]
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |path: &str, msg: &str| {
            Err(Error::Validation {
                path: path.into(),
                msg: msg.into(),
            })
        };
        if self.n_iters == 0 {
            return fail("n_iters", "at least one iteration is required");
        }
        if self.channels == 0 || self.d_rad == 0 || self.d_ang == 0 {
            return fail("channels", "grid extents and channel count must be positive");
        }
        if !(self.r_max > 0.0) {
            return fail("r_max", "must be positive");
        }
        if !(self.z_inf < self.z_sup) {
            return fail("z_sup", "z_inf must be below z_sup");
        }
        if self.theta_hidden.contains(&0) {
            return fail("theta_hidden", "hidden widths must be positive");
        }
        if self.encoder.in_channels == 0 || self.encoder.widths.contains(&0) {
            return fail("encoder.widths", "widths must be positive");
        }
        if self.head.widths.contains(&0) {
            return fail("head.widths", "widths must be positive");
        }
        if let NormScheme::Running { momentum } = self.norm {
            if !(0.0..=1.0).contains(&momentum) {
                return fail("norm.momentum", "must lie in [0, 1]");
            }
        }
        if !(self.norm_eps > 0.0 && self.pos_weight > 0.0) {
            return fail("norm_eps", "norm_eps and pos_weight must be positive");
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let cfg: PipelineConfig = serde_json::from_slice(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Seeds and step rule of [`super::train_toy`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSpec {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    /// Linear warm-up length; the rate then decays with a cosine to
    /// `lr · final_lr_fraction`.
    pub warmup: usize,
    pub final_lr_fraction: f64,
    pub eval_every: usize,
    pub seed: u64,
    /// Train with a single-precision tape.
    pub f32: bool,
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec {
            lr: 4e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            steps: 2000,
            warmup: 50,
            final_lr_fraction: 0.05,
            eval_every: 100,
            seed: 7,
            f32: false,
        }
    }
}

impl OptimizerSpec {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.lr * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.steps.saturating_sub(self.warmup).max(1) as f64;
        let t = ((step - self.warmup) as f64 / span).min(1.0);
        let floor = self.final_lr_fraction;
        self.lr * (floor + (1.0 - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos()))
    }
}

/// Everything `train` reads from its config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainConfig {
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub optimizer: OptimizerSpec,
    #[serde(default)]
    pub decode: DecodeSpec,
}

/// Instance decoding thresholds used for PQ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeSpec {
    pub center_thresh: f64,
    pub nms_radius: f64,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        DecodeSpec {
            center_thresh: 0.3,
            nms_radius: 2.5,
        }
    }
}
