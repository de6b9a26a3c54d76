use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{same_shape, InstanceMap};
use crate::error::Result;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PanopticScores {
    pub rq: f64,
    pub sq: f64,
    pub pq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Sum of matched IoUs, kept so scores can be pooled across scenes.
    pub iou_sum: f64,
}

impl PanopticScores {
    /// Fills `rq`, `sq`, `pq` from the counts.
    pub fn finish(mut self) -> Self {
        let (tp, fp, fn_) = (self.tp as f64, self.fp as f64, self.fn_ as f64);
        if self.tp == 0 {
            let perfect = self.fp == 0 && self.fn_ == 0;
            self.sq = if perfect { 1.0 } else { 0.0 };
            self.rq = if perfect { 1.0 } else { 0.0 };
        } else {
            self.sq = self.iou_sum / tp;
            self.rq = tp / (tp + 0.5 * fp + 0.5 * fn_);
        }
        self.pq = self.sq * self.rq;
        self
    }
}

fn areas(m: &InstanceMap) -> Vec<usize> {
    let mut a = vec![0; m.count() + 1];
    for &l in &m.0.data {
        a[l as usize] += 1;
    }
    a
}

/// Matches instances at IoU > 0.5 (tested as `2·inter > union` on integer
/// counts) and scores the matching. Ids need not be contiguous.
pub fn panoptic_quality(pred: &InstanceMap, gt: &InstanceMap) -> Result<PanopticScores> {
    same_shape("panoptic_quality", &pred.0, &gt.0)?;
    let pred = InstanceMap::canonical(pred.0.clone());
    let gt = InstanceMap::canonical(gt.0.clone());
    let (pa, ga) = (areas(&pred), areas(&gt));
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.0.data.iter().zip(&gt.0.data) {
        if p > 0 && g > 0 {
            *inter.entry((g, p)).or_default() += 1;
        }
    }
    let mut pairs: Vec<((u32, u32), usize)> = inter.into_iter().collect();
    pairs.sort_unstable();
    let mut s = PanopticScores::default();
    let mut pred_matched = vec![false; pa.len()];
    let mut gt_matched = vec![false; ga.len()];
    for ((g, p), i) in pairs {
        let union = ga[g as usize] + pa[p as usize] - i;
        if 2 * i > union {
            s.tp += 1;
            s.iou_sum += i as f64 / union as f64;
            pred_matched[p as usize] = true;
            gt_matched[g as usize] = true;
        }
    }
    s.fp = pred_matched.iter().skip(1).filter(|&&m| !m).count();
    s.fn_ = gt_matched.iter().skip(1).filter(|&&m| !m).count();
    Ok(s.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Raster;

    fn map(rows: usize, cols: usize, d: Vec<u32>) -> InstanceMap {
        InstanceMap(Raster::new(rows, cols, d).unwrap())
    }

    #[test]
    fn identical_single_instance() {
        let m = map(2, 2, vec![1, 1, 0, 0]);
        let s = panoptic_quality(&m, &m).unwrap();
        assert_eq!((s.rq, s.sq, s.pq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_maps_score_one() {
        let m = InstanceMap::empty(3, 3);
        let s = panoptic_quality(&m, &m).unwrap();
        assert_eq!((s.rq, s.sq, s.pq), (1.0, 1.0, 1.0));
    }

    #[test]
    fn only_false_positives_score_zero() {
        let s = panoptic_quality(&map(1, 2, vec![1, 0]), &InstanceMap::empty(1, 2)).unwrap();
        assert_eq!((s.rq, s.sq, s.pq, s.fp), (0.0, 0.0, 0.0, 1));
    }
}
