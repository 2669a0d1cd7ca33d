//! Precision/recall curves, interpolated AP, F1 and FP:TP ratio curves.

use serde::Serialize;

use crate::coco::CategoryId;

/// One detection's rank key and match outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedDetection {
    pub score: f64,
    pub is_tp: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub confidence: f64,
    pub is_tp: bool,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
    pub category: Option<CategoryId>,
    pub iou_thr: f64,
}

impl PrCurve {
    pub fn max_recall(&self) -> f64 {
        self.points.last().map_or(0.0, |p| p.recall)
    }
}

/// Ranks detections dataset-wide by descending score. The sort is stable, so
/// equal scores keep the order in which they were supplied.
pub fn build_pr_curve(
    mut dets: Vec<RankedDetection>,
    n_gt: usize,
    category: Option<CategoryId>,
    iou_thr: f64,
) -> PrCurve {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let (mut tp, mut fp) = (0usize, 0usize);
    let points = dets
        .into_iter()
        .map(|d| {
            if d.is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            PrPoint {
                confidence: d.score,
                is_tp: d.is_tp,
                precision: tp as f64 / (tp + fp) as f64,
                recall: if n_gt == 0 {
                    0.0
                } else {
                    tp as f64 / n_gt as f64
                },
            }
        })
        .collect();
    PrCurve {
        points,
        n_gt,
        category,
        iou_thr,
    }
}

/// `n` evenly spaced values from `start` to `stop` inclusive, computed the
/// way `numpy.linspace` does so threshold grids match pycocotools bit for bit.
pub fn linspace(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => {
            let step = (stop - start) / (n - 1) as f64;
            let mut v: Vec<f64> = (0..n - 1).map(|k| start + k as f64 * step).collect();
            v.push(stop);
            v
        }
    }
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn coco_iou_thresholds() -> Vec<f64> {
    linspace(0.5, 0.95, 10)
}

/// The 101 recall sample points. Computed as `k * 0.01` so the values are
/// bit-identical to the ones pycocotools uses.
pub fn recall_thresholds() -> [f64; 101] {
    std::array::from_fn(|k| k as f64 * 0.01)
}

/// 101-point interpolated AP; `None` when the curve has no ground truth.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.n_gt == 0 {
        return None;
    }
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (1..envelope.len()).rev() {
        if envelope[i] > envelope[i - 1] {
            envelope[i - 1] = envelope[i];
        }
    }
    let recalls: Vec<f64> = curve.points.iter().map(|p| p.recall).collect();
    let sum: f64 = recall_thresholds()
        .iter()
        .map(|&r| {
            let idx = recalls.partition_point(|&x| x < r);
            envelope.get(idx).copied().unwrap_or(0.0)
        })
        .sum();
    Some(sum / 101.0)
}

/// Exact area under the interpolated curve (every-point interpolation).
pub fn area_under_curve(curve: &PrCurve) -> Option<f64> {
    if curve.n_gt == 0 {
        return None;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    let mut best_after = vec![0.0f64; curve.points.len() + 1];
    for i in (0..curve.points.len()).rev() {
        best_after[i] = best_after[i + 1].max(curve.points[i].precision);
    }
    for (i, p) in curve.points.iter().enumerate() {
        if p.recall > prev_recall {
            area += (p.recall - prev_recall) * best_after[i];
            prev_recall = p.recall;
        }
    }
    Some(area)
}

/// Mean over the defined cells.
pub fn mean_ap(cells: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let (sum, n) = cells
        .into_iter()
        .flatten()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Score {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn f1_from_counts(tp: usize, n_det: usize, n_gt: usize) -> F1Score {
    let precision = if n_det == 0 {
        0.0
    } else {
        tp as f64 / n_det as f64
    };
    let recall = if n_gt == 0 {
        0.0
    } else {
        tp as f64 / n_gt as f64
    };
    let f1 = if tp == 0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    F1Score {
        tp,
        fp: n_det - tp,
        fn_count: n_gt - tp,
        precision,
        recall,
        f1,
    }
}

/// Cumulative FP/TP at the first rank reaching each recall bin. `None` for
/// bins never reached.
pub fn fp_tp_ratio_curve(curve: &PrCurve, recall_bins: &[f64]) -> Vec<Option<f64>> {
    recall_bins
        .iter()
        .map(|&r| {
            let (mut tp, mut fp) = (0usize, 0usize);
            for p in &curve.points {
                if p.is_tp {
                    tp += 1;
                } else {
                    fp += 1;
                }
                if p.recall >= r {
                    return (tp > 0).then(|| fp as f64 / tp as f64);
                }
            }
            None
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(flags: &[bool], n_gt: usize) -> PrCurve {
        let dets = flags
            .iter()
            .enumerate()
            .map(|(i, &is_tp)| RankedDetection {
                score: 1.0 - i as f64 / (flags.len() as f64 + 1.0),
                is_tp,
            })
            .collect();
        build_pr_curve(dets, n_gt, None, 0.5)
    }

    #[test]
    fn fp_last_does_not_contribute() {
        let mut flags = vec![true; 9];
        flags.push(false);
        let c = curve(&flags, 10);
        let last = c.points.last().unwrap();
        assert!((last.precision - 0.9).abs() < 1e-15);
        assert!((c.max_recall() - 0.9).abs() < 1e-15);
        // 91 of 101 recall samples reach precision 1
        assert_eq!(average_precision(&c).unwrap(), 91.0 / 101.0);
        assert!((area_under_curve(&c).unwrap() - 0.9).abs() < 1e-12);
    }

    #[test]
    fn fp_first_costs_precision() {
        let mut flags = vec![false];
        flags.extend([true; 9]);
        let c = curve(&flags, 10);
        let ap = average_precision(&c).unwrap();
        assert!((ap - 0.9 * 91.0 / 101.0).abs() < 1e-12);
        assert!((area_under_curve(&c).unwrap() - 0.81).abs() < 1e-12);
    }

    #[test]
    fn degenerate_curves() {
        let c = curve(&[], 3);
        assert!(c.points.is_empty());
        assert_eq!(c.max_recall(), 0.0);
        assert_eq!(average_precision(&c), Some(0.0));
        let c = curve(&[false, false], 3);
        assert!(c.points.iter().all(|p| p.precision == 0.0));
        assert_eq!(average_precision(&curve(&[true], 0)), None);
        assert_eq!(average_precision(&curve(&[true; 4], 4)), Some(1.0));
    }

    #[test]
    fn f1_examples() {
        assert_eq!(f1_from_counts(10, 10, 10).f1, 1.0);
        let s = f1_from_counts(10, 20, 10);
        assert_eq!((s.precision, s.recall), (0.5, 1.0));
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(f1_from_counts(0, 0, 5).f1, 0.0);
    }

    #[test]
    fn ratio_curve() {
        // FP, TP, FP, TP with 2 GT
        let c = curve(&[false, true, false, true], 2);
        let r = fp_tp_ratio_curve(&c, &[0.5, 1.0]);
        assert_eq!(r, vec![Some(1.0), Some(1.0)]);
        let c = curve(&[true, false], 4);
        assert_eq!(fp_tp_ratio_curve(&c, &[0.25, 0.5]), vec![Some(0.0), None]);
    }

    #[test]
    fn mean_skips_undefined() {
        assert_eq!(mean_ap([Some(1.0), None, Some(0.5)]), Some(0.75));
        assert_eq!(mean_ap([None]), None);
    }

    proptest! {
        #[test]
        fn flags_not_scores_determine_ap(
            flags in proptest::collection::vec(any::<bool>(), 0..40),
            extra_gt in 0usize..5,
            scores in proptest::collection::btree_set(0u32..1_000_000, 40),
        ) {
            let n_gt = flags.iter().filter(|&&f| f).count() + extra_gt;
            prop_assume!(n_gt > 0);
            let mut scores: Vec<f64> = scores.into_iter().map(|s| s as f64 / 1e6).collect();
            scores.reverse();
            let dets = flags.iter().zip(&scores).map(|(&is_tp, &score)| RankedDetection { score, is_tp }).collect();
            let other = build_pr_curve(dets, n_gt, None, 0.5);
            prop_assert_eq!(average_precision(&other), average_precision(&curve(&flags, n_gt)));
        }

        #[test]
        fn trailing_false_positives_leave_ap_unchanged(
            flags in proptest::collection::vec(any::<bool>(), 1..40),
            n_fp in 1usize..50,
        ) {
            let n_gt = flags.iter().filter(|&&f| f).count().max(1);
            let base = curve(&flags, n_gt);
            let min = base.points.last().unwrap().confidence;
            let mut dets: Vec<RankedDetection> = base.points.iter().map(|p| RankedDetection { score: p.confidence, is_tp: p.is_tp }).collect();
            for k in 0..n_fp {
                dets.push(RankedDetection { score: min * (1.0 - (k + 1) as f64 / (n_fp + 1) as f64), is_tp: false });
            }
            let hedged = build_pr_curve(dets, n_gt, None, 0.5);
            prop_assert_eq!(average_precision(&hedged), average_precision(&base));
        }

        #[test]
        fn f1_bounds(tp in 0usize..50, fp in 0usize..50, fneg in 0usize..50) {
            let s = f1_from_counts(tp, tp + fp, tp + fneg);
            prop_assert!((0.0..=1.0).contains(&s.f1));
            prop_assert_eq!(s.f1 == 1.0, s.precision == 1.0 && s.recall == 1.0);
        }
    }
}
