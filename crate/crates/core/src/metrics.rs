//! Instance matching, F1 and instance-averaged Dice.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::InstanceMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub pred_id: u32,
    pub gt_id: u32,
    pub iou: f64,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Assigned pairs, all with IoU at or above the threshold.
    pub pairs: Vec<MatchedPair>,
    pub unmatched_pred: Vec<u32>,
    pub unmatched_gt: Vec<u32>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Per-id areas and pairwise intersections of two label maps.
struct Overlap {
    pred_area: BTreeMap<u32, usize>,
    gt_area: BTreeMap<u32, usize>,
    inter: HashMap<(u32, u32), usize>,
}

impl Overlap {
    fn new(pred: &InstanceMap, gt: &InstanceMap) -> Result<Self> {
        if pred.dims() != gt.dims() {
            return Err(Error::Dimension(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let mut pred_area = BTreeMap::new();
        let mut gt_area = BTreeMap::new();
        let mut inter = HashMap::new();
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if p != 0 {
                *pred_area.entry(p).or_insert(0) += 1;
            }
            if g != 0 {
                *gt_area.entry(g).or_insert(0) += 1;
            }
            if p != 0 && g != 0 {
                *inter.entry((p, g)).or_insert(0) += 1;
            }
        }
        Ok(Self { pred_area, gt_area, inter })
    }

    fn iou(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        if i == 0 {
            return 0.0;
        }
        i as f64 / (self.pred_area[&p] + self.gt_area[&g] - i) as f64
    }

    fn dice(&self, p: u32, g: u32) -> f64 {
        let i = self.inter.get(&(p, g)).copied().unwrap_or(0);
        2.0 * i as f64 / (self.pred_area[&p] + self.gt_area[&g]) as f64
    }
}

/// Minimum-cost perfect assignment on a square cost matrix (row-major
/// `n × n`); returns the column assigned to each row.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    // 1-based potentials formulation; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(r0 - 1) * n + (j - 1)] - u[r0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            owner[col0] = owner[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

/// One-to-one assignment maximizing total IoU over pairs whose IoU is at
/// least `iou_threshold`.
pub fn match_instances(pred: &InstanceMap, gt: &InstanceMap, iou_threshold: f64) -> Result<MatchResult> {
    let ov = Overlap::new(pred, gt)?;
    let pids: Vec<u32> = ov.pred_area.keys().copied().collect();
    let gids: Vec<u32> = ov.gt_area.keys().copied().collect();
    let n = pids.len().max(gids.len());
    let weight = |i: usize, j: usize| -> f64 {
        if i >= pids.len() || j >= gids.len() {
            return 0.0;
        }
        let iou = ov.iou(pids[i], gids[j]);
        if iou >= iou_threshold && iou > 0.0 {
            iou
        } else {
            0.0
        }
    };
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = -weight(i, j);
        }
    }
    let assign = hungarian(&cost, n);
    let mut pairs = Vec::new();
    let mut pred_used = vec![false; pids.len()];
    let mut gt_used = vec![false; gids.len()];
    for (i, &j) in assign.iter().enumerate() {
        if weight(i, j) > 0.0 {
            pred_used[i] = true;
            gt_used[j] = true;
            pairs.push(MatchedPair { pred_id: pids[i], gt_id: gids[j], iou: ov.iou(pids[i], gids[j]), dice: ov.dice(pids[i], gids[j]) });
        }
    }
    let unmatched_pred: Vec<u32> = pids.iter().zip(&pred_used).filter(|(_, &u)| !u).map(|(&p, _)| p).collect();
    let unmatched_gt: Vec<u32> = gids.iter().zip(&gt_used).filter(|(_, &u)| !u).map(|(&g, _)| g).collect();
    Ok(MatchResult { tp: pairs.len(), fp: unmatched_pred.len(), fn_: unmatched_gt.len(), pairs, unmatched_pred, unmatched_gt })
}

/// `2·TP / (2·TP + FP + FN)`; 1 when all counts are zero.
pub fn f1(m: &MatchResult) -> f64 {
    f1_from_counts(m.tp, m.fp, m.fn_)
}

pub fn f1_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Area-weighted mean of each instance's best pixel Dice against the other
/// map, averaged over the two directions. Both maps empty gives 1; exactly
/// one empty gives 0.
pub fn instance_dice(pred: &InstanceMap, gt: &InstanceMap) -> Result<f64> {
    let ov = Overlap::new(pred, gt)?;
    if ov.pred_area.is_empty() && ov.gt_area.is_empty() {
        return Ok(1.0);
    }
    if ov.pred_area.is_empty() || ov.gt_area.is_empty() {
        return Ok(0.0);
    }
    let mut best_pred: BTreeMap<u32, f64> = ov.pred_area.keys().map(|&p| (p, 0.0)).collect();
    let mut best_gt: BTreeMap<u32, f64> = ov.gt_area.keys().map(|&g| (g, 0.0)).collect();
    for &(p, g) in ov.inter.keys() {
        let d = ov.dice(p, g);
        let bp = best_pred.get_mut(&p).expect("known id");
        *bp = bp.max(d);
        let bg = best_gt.get_mut(&g).expect("known id");
        *bg = bg.max(d);
    }
    let side = |area: &BTreeMap<u32, usize>, best: &BTreeMap<u32, f64>| {
        let total: usize = area.values().sum();
        area.iter().map(|(id, &a)| a as f64 * best[id]).sum::<f64>() / total as f64
    };
    Ok(0.5 * (side(&ov.pred_area, &best_pred) + side(&ov.gt_area, &best_gt)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    /// `TP / (TP + FP)`; reported where some tables say "accuracy".
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub dice: f64,
    pub n_pred: usize,
    pub n_gt: usize,
}

fn ratio(num: usize, den: usize, other_empty: bool) -> f64 {
    if den == 0 {
        if other_empty { 1.0 } else { 0.0 }
    } else {
        num as f64 / den as f64
    }
}

pub fn score(pred: &InstanceMap, gt: &InstanceMap, iou_threshold: f64) -> Result<ScoreReport> {
    let m = match_instances(pred, gt, iou_threshold)?;
    let n_pred = m.tp + m.fp;
    let n_gt = m.tp + m.fn_;
    Ok(ScoreReport {
        precision: ratio(m.tp, n_pred, n_gt == 0),
        recall: ratio(m.tp, n_gt, n_pred == 0),
        f1: f1(&m),
        dice: instance_dice(pred, gt)?,
        n_pred,
        n_gt,
    })
}

/// Unweighted mean over images.
pub fn macro_average(reports: &[ScoreReport]) -> ScoreReport {
    let n = reports.len().max(1) as f64;
    let mean = |f: fn(&ScoreReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    ScoreReport {
        precision: mean(|r| r.precision),
        recall: mean(|r| r.recall),
        f1: mean(|r| r.f1),
        dice: mean(|r| r.dice),
        n_pred: reports.iter().map(|r| r.n_pred).sum(),
        n_gt: reports.iter().map(|r| r.n_gt).sum(),
    }
}

/// Scores every `(pred, gt)` pair in parallel; results keep input order.
pub fn score_dataset(pairs: &[(InstanceMap, InstanceMap)], iou_threshold: f64) -> Result<(Vec<ScoreReport>, ScoreReport)> {
    let per: Vec<ScoreReport> = pairs.par_iter().map(|(p, g)| score(p, g, iou_threshold)).collect::<Result<_>>()?;
    let avg = macro_average(&per);
    Ok((per, avg))
}
