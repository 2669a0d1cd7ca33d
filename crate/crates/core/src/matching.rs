//! Detection to ground-truth matching.
//!
//! Two flavours are needed: the category-aware, one-to-one greedy protocol
//! used by AP, F1 and LRP, and a category-agnostic argmax assignment (many
//! detections may point at one ground truth) used by the naming error.

use crate::mask::BinaryMask;

/// Dense `dets x gts` IoU table.
#[derive(Debug, Clone, PartialEq)]
pub struct IouMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl IouMatrix {
    pub fn compute(dets: &[&BinaryMask], gts: &[&BinaryMask]) -> Self {
        let mut data = Vec::with_capacity(dets.len() * gts.len());
        for d in dets {
            for g in gts {
                data.push(d.iou_unchecked(g));
            }
        }
        IouMatrix {
            rows: dets.len(),
            cols: gts.len(),
            data,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged IoU rows");
        IouMatrix {
            rows: rows.len(),
            cols,
            data: rows.into_iter().flatten().collect(),
        }
    }

    pub fn n_dets(&self) -> usize {
        self.rows
    }

    pub fn n_gts(&self) -> usize {
        self.cols
    }

    pub fn get(&self, det: usize, gt: usize) -> f64 {
        self.data[det * self.cols + gt]
    }
}

/// Outcome of one-to-one matching. Indices refer to the input slices.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub det_to_gt: Vec<Option<usize>>,
    /// IoU with the matched ground truth; 0 for unmatched detections.
    pub det_iou: Vec<f64>,
    pub gt_to_det: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.det_to_gt.iter().filter(|m| m.is_some()).count()
    }

    pub fn fp(&self) -> usize {
        self.det_to_gt.len() - self.tp()
    }

    pub fn fn_count(&self) -> usize {
        self.gt_to_det.iter().filter(|m| m.is_none()).count()
    }

    pub fn is_tp(&self, det: usize) -> bool {
        self.det_to_gt[det].is_some()
    }
}

/// Indices sorted by descending score; equal scores keep input order.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// COCO greedy matching. Detections are visited in `order`; each claims the
/// still-unmatched ground truth with the highest IoU, provided that IoU is at
/// least `iou_thr`. Ties in IoU go to the lower ground-truth index.
pub fn greedy_match_ious(ious: &IouMatrix, order: &[usize], iou_thr: f64) -> MatchResult {
    let mut res = MatchResult {
        det_to_gt: vec![None; ious.n_dets()],
        det_iou: vec![0.0; ious.n_dets()],
        gt_to_det: vec![None; ious.n_gts()],
    };
    for &d in order {
        let mut best: Option<(usize, f64)> = None;
        for g in 0..ious.n_gts() {
            if res.gt_to_det[g].is_some() {
                continue;
            }
            let v = ious.get(d, g);
            if v < iou_thr {
                continue;
            }
            if best.map_or(true, |(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, v)) = best {
            res.det_to_gt[d] = Some(g);
            res.det_iou[d] = v;
            res.gt_to_det[g] = Some(d);
        }
    }
    res
}

/// Greedy matching for detections already sorted by descending confidence.
pub fn greedy_match(dets: &[&BinaryMask], gts: &[&BinaryMask], iou_thr: f64) -> MatchResult {
    let ious = IouMatrix::compute(dets, gts);
    let order: Vec<usize> = (0..dets.len()).collect();
    greedy_match_ious(&ious, &order, iou_thr)
}

/// Category-agnostic assignment `g(D_j)`: the ground truth of maximum IoU if
/// that IoU is at least 0.5, otherwise `None`. Ties go to the lowest index.
pub fn agnostic_match(dets: &[&BinaryMask], gts: &[&BinaryMask]) -> Vec<Option<usize>> {
    dets.iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts.iter().enumerate() {
                let v = d.iou_unchecked(g);
                if best.map_or(true, |(_, b)| v > b) {
                    best = Some((i, v));
                }
            }
            best.filter(|&(_, v)| v >= 0.5).map(|(i, _)| i)
        })
        .collect()
}
