use std::sync::Arc;

use serde::Serialize;

use super::config::PipelineConfig;
use super::model::ModelOutput;
use crate::error::{Error, Result};
use crate::synth::GtRasters;
use crate::tensor::{GatherTable, Scalar, Tape, Tensor, Var};

/// Rect-grid training targets in tape precision.
#[derive(Clone)]
pub struct RectTargets<T> {
    pub rows: usize,
    pub cols: usize,
    pub seg: Arc<Vec<usize>>,
    pub center: Arc<Vec<T>>,
    /// `[2, rows, cols]`.
    pub offset: Arc<Vec<T>>,
    pub mask: Arc<Vec<bool>>,
}

impl<T: Scalar> RectTargets<T> {
    pub fn from_gt(gt: &GtRasters) -> Self {
        let cast = |v: &[f64]| v.iter().map(|&x| T::of(x)).collect::<Vec<T>>();
        let mut offset = cast(&gt.offset[0].data);
        offset.extend(cast(&gt.offset[1].data));
        RectTargets {
            rows: gt.seg.rows,
            cols: gt.seg.cols,
            seg: Arc::new(gt.seg.data.iter().map(|&f| f as usize).collect()),
            center: Arc::new(cast(&gt.centerness.data)),
            offset: Arc::new(offset),
            mask: Arc::new(gt.seg.data.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct LossParts {
    pub total: f64,
    pub seg: f64,
    pub center: f64,
    pub offset: f64,
}

/// Cross-entropy on the segmentation logits plus `λ_c`·MSE on centerness
/// plus `λ_o`·foreground-masked L1 on offsets. Inputs are rect-grid
/// variables `[2, R, C]`, `[1, R, C]`, `[2, R, C]`.
pub fn rect_loss<T: Scalar>(
    tape: &mut Tape<T>,
    seg: Var,
    center: Var,
    offset: Var,
    targets: &RectTargets<T>,
    cfg: &PipelineConfig,
) -> Result<(Var, LossParts)> {
    let want = [targets.rows, targets.cols];
    for (v, k) in [(seg, 2), (center, 1), (offset, 2)] {
        let s = tape.shape(v);
        if s.len() != 3 || s[0] != k || s[1..] != want {
            return Err(Error::dim("compute_loss", s, &[k, want[0], want[1]]));
        }
    }
    let ce = tape.cross_entropy(seg, targets.seg.clone(), &[T::one(), T::of(cfg.pos_weight)])?;
    let mse = tape.mse(center, targets.center.clone())?;
    let l1 = tape.masked_l1(offset, targets.offset.clone(), targets.mask.clone())?;
    let a = tape.scale(mse, T::of(cfg.lambda_center));
    let b = tape.scale(l1, T::of(cfg.lambda_offset));
    let total = tape.add(ce, a)?;
    let total = tape.add(total, b)?;
    let parts = LossParts {
        total: tape.value(total).item().f64(),
        seg: tape.value(ce).item().f64(),
        center: tape.value(mse).item().f64(),
        offset: tape.value(l1).item().f64(),
    };
    Ok((total, parts))
}

/// Remaps polar model outputs through `table` and applies [`rect_loss`].
pub fn model_loss<T: Scalar>(
    tape: &mut Tape<T>,
    out: &ModelOutput,
    table: &Arc<GatherTable>,
    targets: &RectTargets<T>,
    cfg: &PipelineConfig,
) -> Result<(Var, LossParts)> {
    let shape = [targets.rows, targets.cols];
    let seg = tape.gather(out.seg_logits, table.clone(), &shape)?;
    let cen = tape.gather(out.centerness, table.clone(), &shape)?;
    let off = tape.gather(out.offset, table.clone(), &shape)?;
    rect_loss(tape, seg, cen, off, targets, cfg)
}

/// Loss of already remapped rect predictions against ground truth.
pub fn compute_loss(seg_logits: &Tensor, centerness: &Tensor, offset: &Tensor, gt: &GtRasters, cfg: &PipelineConfig) -> Result<LossParts> {
    let mut tape = Tape::<f64>::inference();
    let (s, c, o) = (
        tape.constant(seg_logits.clone()),
        tape.constant(centerness.clone()),
        tape.constant(offset.clone()),
    );
    Ok(rect_loss(&mut tape, s, c, o, &RectTargets::from_gt(gt), cfg)?.1)
}
