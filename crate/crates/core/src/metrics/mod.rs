//! Rectangular BEV rasters, IoU, instance decoding and panoptic quality.
//!
//! Rect rasters are indexed `(row, col)` with rows running along ego `x`
//! and columns along ego `y`, both increasing.

mod decode;
mod panoptic;

pub use decode::decode_instances;
pub use panoptic::{panoptic_quality, PanopticScores};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A dense 2-D raster in row-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Raster<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Clone> Raster<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::dim("raster", &[rows, cols], &[data.len()]));
        }
        Ok(Raster { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, v: T) -> Self {
        Raster {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> &T {
        &self.data[r * self.cols + c]
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> U) -> Raster<U> {
        Raster {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(f).collect(),
        }
    }
}

fn same_shape<A, B>(op: &'static str, a: &Raster<A>, b: &Raster<B>) -> Result<()> {
    if (a.rows, a.cols) != (b.rows, b.cols) {
        return Err(Error::dim(op, &[a.rows, a.cols], &[b.rows, b.cols]));
    }
    Ok(())
}

/// Integer-labelled raster: 0 is background, instances are `1..=n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMap(pub Raster<u32>);

impl InstanceMap {
    pub fn empty(rows: usize, cols: usize) -> Self {
        InstanceMap(Raster::filled(rows, cols, 0))
    }

    /// Relabels ids to `1..=n` in order of first row-major appearance.
    pub fn canonical(raster: Raster<u32>) -> Self {
        let mut map = std::collections::HashMap::new();
        let data = raster
            .data
            .iter()
            .map(|&l| {
                if l == 0 {
                    0
                } else {
                    let next = map.len() as u32 + 1;
                    *map.entry(l).or_insert(next)
                }
            })
            .collect();
        InstanceMap(Raster {
            rows: raster.rows,
            cols: raster.cols,
            data,
        })
    }

    pub fn count(&self) -> usize {
        self.0.data.iter().copied().max().unwrap_or(0) as usize
    }

    pub fn foreground(&self) -> Raster<bool> {
        self.0.map(|&l| l > 0)
    }
}

/// `|pred ∧ gt| / |pred ∨ gt|`, with two empty masks scoring 1.
pub fn iou(pred: &Raster<bool>, gt: &Raster<bool>) -> Result<f64> {
    let (i, u) = intersection_union(pred, gt)?;
    Ok(if u == 0 { 1.0 } else { i as f64 / u as f64 })
}

pub fn intersection_union(pred: &Raster<bool>, gt: &Raster<bool>) -> Result<(usize, usize)> {
    same_shape("iou", pred, gt)?;
    let mut inter = 0;
    let mut union = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    Ok((inter, union))
}

/// Rectangular evaluation window centred on the ego vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalSetting {
    /// Window length along ego `x` (rows), metres.
    pub extent_x: f64,
    /// Window length along ego `y` (columns), metres.
    pub extent_y: f64,
    pub resolution: f64,
}

impl EvalSetting {
    /// 100 m × 50 m at 0.25 m.
    pub const SETTING_1: EvalSetting = EvalSetting {
        extent_x: 100.0,
        extent_y: 50.0,
        resolution: 0.25,
    };
    /// 100 m × 100 m at 0.5 m.
    pub const SETTING_2: EvalSetting = EvalSetting {
        extent_x: 100.0,
        extent_y: 100.0,
        resolution: 0.5,
    };

    pub fn numbered(n: u32) -> Result<Self> {
        match n {
            1 => Ok(Self::SETTING_1),
            2 => Ok(Self::SETTING_2),
            _ => Err(Error::config(format!("unknown evaluation setting {n}, expected 1 or 2"))),
        }
    }

    pub fn new(extent_x: f64, extent_y: f64, resolution: f64) -> Result<Self> {
        let s = EvalSetting {
            extent_x,
            extent_y,
            resolution,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.resolution > 0.0 && self.extent_x > 0.0 && self.extent_y > 0.0) {
            return Err(Error::config("evaluation extents and resolution must be positive"));
        }
        for e in [self.extent_x, self.extent_y] {
            let q = e / self.resolution;
            if (q - q.round()).abs() > 1e-9 {
                return Err(Error::config(format!("extent {e} m is not a multiple of {} m", self.resolution)));
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        (self.extent_x / self.resolution).round() as usize
    }

    pub fn cols(&self) -> usize {
        (self.extent_y / self.resolution).round() as usize
    }

    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            -0.5 * self.extent_x + (row as f64 + 0.5) * self.resolution,
            -0.5 * self.extent_y + (col as f64 + 0.5) * self.resolution,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub iou: f64,
    pub intersection: usize,
    pub union: usize,
    #[serde(flatten)]
    pub panoptic: PanopticScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateMetrics {
    /// Pooled intersection over pooled union.
    pub iou: f64,
    pub mean_scene_iou: f64,
    /// Dataset-level RQ/SQ/PQ from pooled TP/FP/FN and matched IoU sums.
    #[serde(flatten)]
    pub panoptic: PanopticScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub setting: EvalSetting,
    pub aggregate: AggregateMetrics,
    pub scenes: Vec<SceneMetrics>,
}

/// One scene's rectangular prediction or ground truth.
#[derive(Debug, Clone)]
pub struct RectLabels {
    pub seg: Raster<bool>,
    pub instances: InstanceMap,
}

/// Scores named scenes and pools them into an aggregate.
pub fn evaluate(scenes: &[(String, RectLabels, RectLabels)], setting: EvalSetting) -> Result<MetricReport> {
    setting.validate()?;
    let mut out = Vec::with_capacity(scenes.len());
    let (mut inter, mut union) = (0usize, 0usize);
    let mut pooled = PanopticScores::default();
    for (name, pred, gt) in scenes {
        if pred.seg.shape() != [setting.rows(), setting.cols()] {
            return Err(Error::dim("evaluate", &pred.seg.shape(), &[setting.rows(), setting.cols()]));
        }
        let (i, u) = intersection_union(&pred.seg, &gt.seg)?;
        let pq = panoptic_quality(&pred.instances, &gt.instances)?;
        inter += i;
        union += u;
        pooled.tp += pq.tp;
        pooled.fp += pq.fp;
        pooled.fn_ += pq.fn_;
        pooled.iou_sum += pq.iou_sum;
        out.push(SceneMetrics {
            scene: name.clone(),
            iou: if u == 0 { 1.0 } else { i as f64 / u as f64 },
            intersection: i,
            union: u,
            panoptic: pq,
        });
    }
    let mean_scene_iou = if out.is_empty() {
        1.0
    } else {
        out.iter().map(|s| s.iou).sum::<f64>() / out.len() as f64
    };
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        setting,
        aggregate: AggregateMetrics {
            iou: if union == 0 { 1.0 } else { inter as f64 / union as f64 },
            mean_scene_iou,
            panoptic: pooled.finish(),
        },
        scenes: out,
    })
}
