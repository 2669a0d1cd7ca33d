//! Localization-Recall-Precision error.
//!
//! ```text
//! LRP = [ sum_{TP} (1 - IoU_k) / (1 - t) + |FP| + |FN| ] / (|TP| + |FP| + |FN|)
//! ```
//!
//! Components are kept in `[0, 1]`; scaling by 100 happens only when printing.

use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LrpResult {
    pub lrp: Option<f64>,
    pub lrp_loc: Option<f64>,
    pub lrp_fp: Option<f64>,
    pub lrp_fn: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
}

/// LRP from matched IoUs and FP/FN counts at matching threshold `iou_thr`.
pub fn lrp_from_matches(tp_ious: &[f64], fp: usize, fn_count: usize, iou_thr: f64) -> LrpResult {
    let tp = tp_ious.len();
    let loc: f64 = tp_ious
        .iter()
        .map(|&iou| (1.0 - iou) / (1.0 - iou_thr))
        .sum();
    let total = tp + fp + fn_count;
    let ratio = |num: f64, den: usize| (den > 0).then(|| num / den as f64);
    LrpResult {
        lrp: ratio(loc + (fp + fn_count) as f64, total),
        lrp_loc: ratio(loc, tp),
        lrp_fp: ratio(fp as f64, tp + fp),
        lrp_fn: ratio(fn_count as f64, tp + fn_count),
        tp,
        fp,
        fn_count,
    }
}

/// A detection's score and, if it is a true positive, its matched IoU.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredOutcome {
    pub score: f64,
    pub tp_iou: Option<f64>,
}

/// LRP over detections scoring at least `cutoff`.
///
/// Greedy matching visits detections in score order, so the matches of the
/// surviving prefix are exactly those of the full run; outcomes computed once
/// can be reused for any cutoff.
pub fn lrp_at_cutoff(
    outcomes: &[ScoredOutcome],
    n_gt: usize,
    cutoff: f64,
    iou_thr: f64,
) -> LrpResult {
    let kept = outcomes.iter().filter(|o| o.score >= cutoff);
    let mut ious = Vec::new();
    let mut fp = 0;
    for o in kept {
        match o.tp_iou {
            Some(v) => ious.push(v),
            None => fp += 1,
        }
    }
    let fn_count = n_gt - ious.len();
    lrp_from_matches(&ious, fp, fn_count, iou_thr)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OptimalLrp {
    pub result: LrpResult,
    /// Score cutoff achieving the minimum; `None` when there are no detections.
    pub cutoff: Option<f64>,
}

/// Minimum LRP over cutoffs taken from the distinct detection scores.
pub fn olrp(outcomes: &[ScoredOutcome], n_gt: usize, iou_thr: f64) -> OptimalLrp {
    let mut scores: Vec<f64> = outcomes.iter().map(|o| o.score).collect();
    scores.sort_by(|a, b| b.total_cmp(a));
    scores.dedup();
    let mut best = OptimalLrp {
        result: lrp_at_cutoff(&[], n_gt, 0.0, iou_thr),
        cutoff: None,
    };
    for s in scores {
        let r = lrp_at_cutoff(outcomes, n_gt, s, iou_thr);
        let better = match (r.lrp, best.result.lrp) {
            (Some(a), Some(b)) => a < b,
            (Some(_), None) => true,
            _ => false,
        };
        if better || best.cutoff.is_none() && best.result.lrp.is_none() {
            best = OptimalLrp {
                result: r,
                cutoff: Some(s),
            };
        }
    }
    best
}
