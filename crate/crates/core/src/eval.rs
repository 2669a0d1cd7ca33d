//! End-to-end evaluation: matching once per (image, category, threshold),
//! then AP/mAP, F1, LRP, FP:TP curves, duplicate confusion and naming error.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use crate::coco::{CategoryId, Dataset, Detection, DetectionSet, ImageId};
use crate::hedging::{duplicate_confusion, naming_error, DcConfig, DcReport, NamingError};
use crate::lrp::{lrp_at_cutoff, olrp, LrpResult, OptimalLrp, ScoredOutcome};
use crate::mask::BinaryMask;
use crate::matching::{greedy_match_ious, rank_by_score, IouMatrix};
use crate::nms::NmsConfig;
use crate::pr::{
    average_precision, build_pr_curve, coco_iou_thresholds, f1_from_counts, fp_tp_ratio_curve,
    linspace, mean_ap, F1Score, PrCurve, RankedDetection,
};

pub const SCHEMA_VERSION: u32 = 1;
pub const NE_IOU_THR: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Metric {
    Ap,
    Map,
    F1,
    Dc,
    Ne,
    Lrp,
    FpTpCurve,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Ap,
        Metric::Map,
        Metric::F1,
        Metric::Dc,
        Metric::Ne,
        Metric::Lrp,
        Metric::FpTpCurve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Ap => "ap",
            Metric::Map => "map",
            Metric::F1 => "f1",
            Metric::Dc => "dc",
            Metric::Ne => "ne",
            Metric::Lrp => "lrp",
            Metric::FpTpCurve => "fp-tp-curve",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Metric::ALL.iter().map(|m| m.name()).collect();
                format!(
                    "unknown metric '{s}' (expected one of {})",
                    names.join(", ")
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalConfig {
    pub metrics: BTreeSet<Metric>,
    /// Matching thresholds for AP and mAP.
    pub iou_thresholds: Vec<f64>,
    /// Detections kept per (image, category) for AP.
    pub max_dets: usize,
    pub f1_iou: f64,
    /// Confidence cutoff for F1 and fixed-cutoff LRP.
    pub min_score: f64,
    pub lrp_iou: f64,
    pub fp_tp_iou: f64,
    pub recall_bins: Vec<f64>,
    pub dc: DcConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            metrics: Metric::ALL.into_iter().collect(),
            iou_thresholds: coco_iou_thresholds(),
            max_dets: 100,
            f1_iou: 0.5,
            min_score: 0.0,
            lrp_iou: 0.5,
            fp_tp_iou: 0.5,
            recall_bins: linspace(0.1, 1.0, 10),
            dc: DcConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iou_thresholds.is_empty() {
            return Err("at least one AP IoU threshold is required".into());
        }
        for (name, v) in [
            ("f1_iou", self.f1_iou),
            ("lrp_iou", self.lrp_iou),
            ("fp_tp_iou", self.fp_tp_iou),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(format!("{name} = {v} must lie in (0, 1]"));
            }
        }
        if self.lrp_iou >= 1.0 {
            return Err("lrp_iou must be below 1".into());
        }
        for &t in &self.iou_thresholds {
            if !(t > 0.0 && t <= 1.0) {
                return Err(format!("IoU threshold {t} must lie in (0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(format!("min_score = {} must lie in [0, 1]", self.min_score));
        }
        if self.max_dets == 0 {
            return Err("max_dets must be positive".into());
        }
        self.dc.validate()
    }

    fn wants(&self, m: Metric) -> bool {
        self.metrics.contains(&m)
    }

    fn needs_matching(&self) -> bool {
        [
            Metric::Ap,
            Metric::Map,
            Metric::F1,
            Metric::Lrp,
            Metric::FpTpCurve,
        ]
        .iter()
        .any(|&m| self.wants(m))
    }

    /// Distinct thresholds any matching-based metric needs, in first-use order.
    fn match_thresholds(&self) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for &t in self
            .iou_thresholds
            .iter()
            .chain([&self.f1_iou, &self.lrp_iou, &self.fp_tp_iou])
        {
            if !out.contains(&t) {
                out.push(t);
            }
        }
        out
    }
}

/// Matching outcome of one (image, category) cell at every threshold, in
/// rank order.
struct Cell {
    category: CategoryId,
    n_gt: usize,
    outcomes: Vec<Vec<ScoredOutcome>>,
}

fn match_cell(
    dets: &[&Detection],
    gts: &[&BinaryMask],
    thresholds: &[f64],
) -> Vec<Vec<ScoredOutcome>> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = rank_by_score(&scores);
    let masks: Vec<&BinaryMask> = dets.iter().map(|d| &d.mask).collect();
    let ious = IouMatrix::compute(&masks, gts);
    thresholds
        .iter()
        .map(|&t| {
            let m = greedy_match_ious(&ious, &order, t);
            order
                .iter()
                .map(|&k| ScoredOutcome {
                    score: scores[k],
                    tp_iou: m.det_to_gt[k].map(|_| m.det_iou[k]),
                })
                .collect()
        })
        .collect()
}

fn image_cells(
    dataset: &Dataset,
    dets: &DetectionSet,
    image: ImageId,
    thresholds: &[f64],
) -> Vec<Cell> {
    let gts = dataset.gts_for(image);
    let ds = dets.for_image(image);
    dataset
        .category_ids()
        .filter_map(|cat| {
            let g: Vec<&BinaryMask> = gts
                .iter()
                .filter(|x| x.category == cat)
                .map(|x| &x.mask)
                .collect();
            let d: Vec<&Detection> = ds.iter().filter(|x| x.category == cat).collect();
            if g.is_empty() && d.is_empty() {
                return None;
            }
            Some(Cell {
                category: cat,
                n_gt: g.len(),
                outcomes: match_cell(&d, &g, thresholds),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl Default for ToolInfo {
    fn default() -> Self {
        Self {
            name: "hedgeval".into(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Counts {
    pub images: usize,
    pub categories: usize,
    pub n_gt: usize,
    pub n_det: usize,
    pub rejected_score: usize,
    pub rejected_empty: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApAt {
    pub iou_thr: f64,
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MapReport {
    pub map: Option<f64>,
    pub ap50: Option<f64>,
    pub ap75: Option<f64>,
    pub iou_thresholds: Vec<f64>,
    pub max_dets: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Report {
    pub iou_thr: f64,
    pub min_score: f64,
    #[serde(flatten)]
    pub score: F1Score,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LrpSummary {
    pub iou_thr: f64,
    pub cutoff: f64,
    pub lrp: Option<f64>,
    pub lrp_loc: Option<f64>,
    pub lrp_fp: Option<f64>,
    pub lrp_fn: Option<f64>,
    pub olrp: Option<f64>,
    /// Categories with at least one ground truth.
    pub categories: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CategoryLrp {
    #[serde(flatten)]
    pub fixed: LrpResult,
    pub olrp: OptimalLrp,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NeReport {
    pub iou_thr: f64,
    #[serde(flatten)]
    pub value: NamingError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FpTpCurve {
    pub iou_thr: f64,
    pub recall_bins: Vec<f64>,
    pub ratios: Vec<Option<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Aggregate {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub map: Option<MapReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub f1: Option<F1Report>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dc: Option<DcReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ne: Option<NeReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrp: Option<LrpSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fp_tp_curve: Option<FpTpCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CategoryReport {
    pub id: CategoryId,
    pub name: String,
    pub n_gt: usize,
    pub n_det: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap: Option<Vec<ApAt>>,
    /// AP averaged over `iou_thresholds`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ap_mean: Option<Option<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lrp: Option<CategoryLrp>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifySummary {
    pub seed: u64,
    pub sampled_images: Vec<ImageId>,
    pub match_checks: usize,
    pub ap_checks: usize,
    pub dc_checks: usize,
    /// Graphs with a component too large for path enumeration.
    pub dc_skipped: usize,
    pub mismatches: Vec<String>,
}

impl VerifySummary {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub tool: ToolInfo,
    /// Wall-clock time of the run; the only field allowed to differ between
    /// identical runs.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<String>,
    pub inputs: BTreeMap<String, String>,
    pub config: EvalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nms: Option<NmsConfig>,
    pub counts: Counts,
    pub aggregate: Aggregate,
    pub per_category: Vec<CategoryReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifySummary>,
}

fn approx_index(values: &[f64], target: f64) -> Option<usize> {
    values.iter().position(|v| (v - target).abs() < 1e-9)
}

fn mean_of(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    mean_ap(values)
}

/// Evaluates `dets` against `dataset` with the metrics selected in `cfg`.
pub fn evaluate(
    dataset: &Dataset,
    dets: &DetectionSet,
    cfg: &EvalConfig,
) -> Result<MetricReport, String> {
    cfg.validate()?;
    let thresholds = cfg.match_thresholds();
    let idx = |t: f64| {
        thresholds
            .iter()
            .position(|&x| x == t)
            .expect("threshold registered")
    };
    let cells: Vec<Cell> = if cfg.needs_matching() {
        let ids: Vec<ImageId> = dataset.image_ids().collect();
        ids.par_iter()
            .map(|&id| image_cells(dataset, dets, id, &thresholds))
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .collect()
    } else {
        Vec::new()
    };

    let mut by_cat: BTreeMap<CategoryId, Vec<&Cell>> = BTreeMap::new();
    for c in &cells {
        by_cat.entry(c.category).or_default().push(c);
    }

    let mut per_category = Vec::new();
    let mut all_aps = Vec::new();
    let mut lrp_rows: Vec<CategoryLrp> = Vec::new();
    for cat in &dataset.categories {
        let n_det = dets.iter().filter(|d| d.category == cat.id).count();
        let n_gt = dataset
            .ground_truths()
            .filter(|g| g.category == cat.id)
            .count();
        let cat_cells = by_cat.get(&cat.id).map_or(&[][..], Vec::as_slice);
        let mut report = CategoryReport {
            id: cat.id,
            name: cat.name.clone(),
            n_gt,
            n_det,
            ap: None,
            ap_mean: None,
            lrp: None,
        };
        if cfg.wants(Metric::Ap) || cfg.wants(Metric::Map) {
            let aps: Vec<ApAt> = cfg
                .iou_thresholds
                .iter()
                .map(|&t| {
                    let ti = idx(t);
                    let ranked: Vec<RankedDetection> = cat_cells
                        .iter()
                        .flat_map(|c| c.outcomes[ti].iter().take(cfg.max_dets))
                        .map(|o| RankedDetection {
                            score: o.score,
                            is_tp: o.tp_iou.is_some(),
                        })
                        .collect();
                    ApAt {
                        iou_thr: t,
                        ap: average_precision(&build_pr_curve(ranked, n_gt, Some(cat.id), t)),
                    }
                })
                .collect();
            all_aps.extend(aps.iter().map(|a| a.ap));
            if cfg.wants(Metric::Ap) {
                report.ap_mean = Some(mean_ap(aps.iter().map(|a| a.ap)));
                report.ap = Some(aps);
            }
        }
        if cfg.wants(Metric::Lrp) {
            let li = idx(cfg.lrp_iou);
            let outcomes: Vec<ScoredOutcome> = cat_cells
                .iter()
                .flat_map(|c| c.outcomes[li].iter().copied())
                .collect();
            let row = CategoryLrp {
                fixed: lrp_at_cutoff(&outcomes, n_gt, cfg.min_score, cfg.lrp_iou),
                olrp: olrp(&outcomes, n_gt, cfg.lrp_iou),
            };
            if n_gt > 0 {
                lrp_rows.push(row);
            }
            report.lrp = Some(row);
        }
        per_category.push(report);
    }

    let mut aggregate = Aggregate::default();
    if cfg.wants(Metric::Map) {
        let nt = cfg.iou_thresholds.len();
        let at = |target: f64| {
            approx_index(&cfg.iou_thresholds, target)
                .and_then(|ti| mean_ap(all_aps.iter().skip(ti).step_by(nt).copied()))
        };
        aggregate.map = Some(MapReport {
            map: mean_ap(all_aps.iter().copied()),
            ap50: at(0.5),
            ap75: at(0.75),
            iou_thresholds: cfg.iou_thresholds.clone(),
            max_dets: cfg.max_dets,
        });
    }
    if cfg.wants(Metric::F1) {
        let fi = idx(cfg.f1_iou);
        let kept = cells
            .iter()
            .flat_map(|c| c.outcomes[fi].iter())
            .filter(|o| o.score >= cfg.min_score);
        let (mut tp, mut n_det) = (0, 0);
        for o in kept {
            n_det += 1;
            tp += usize::from(o.tp_iou.is_some());
        }
        aggregate.f1 = Some(F1Report {
            iou_thr: cfg.f1_iou,
            min_score: cfg.min_score,
            score: f1_from_counts(tp, n_det, dataset.n_gt()),
        });
    }
    if cfg.wants(Metric::Lrp) {
        aggregate.lrp = Some(LrpSummary {
            iou_thr: cfg.lrp_iou,
            cutoff: cfg.min_score,
            lrp: mean_of(lrp_rows.iter().map(|r| r.fixed.lrp)),
            lrp_loc: mean_of(lrp_rows.iter().map(|r| r.fixed.lrp_loc)),
            lrp_fp: mean_of(lrp_rows.iter().map(|r| r.fixed.lrp_fp)),
            lrp_fn: mean_of(lrp_rows.iter().map(|r| r.fixed.lrp_fn)),
            olrp: mean_of(lrp_rows.iter().map(|r| r.olrp.result.lrp)),
            categories: lrp_rows.len(),
        });
    }
    if cfg.wants(Metric::FpTpCurve) {
        let curve = pooled_curve(&cells, idx(cfg.fp_tp_iou), dataset.n_gt(), cfg.fp_tp_iou);
        aggregate.fp_tp_curve = Some(FpTpCurve {
            iou_thr: cfg.fp_tp_iou,
            recall_bins: cfg.recall_bins.clone(),
            ratios: fp_tp_ratio_curve(&curve, &cfg.recall_bins),
        });
    }
    if cfg.wants(Metric::Dc) {
        aggregate.dc = Some(duplicate_confusion(dets, &cfg.dc));
    }
    if cfg.wants(Metric::Ne) {
        aggregate.ne = Some(NeReport {
            iou_thr: NE_IOU_THR,
            value: naming_error(dataset, dets),
        });
    }

    Ok(MetricReport {
        schema_version: SCHEMA_VERSION,
        tool: ToolInfo::default(),
        generated_at: None,
        inputs: BTreeMap::new(),
        config: cfg.clone(),
        nms: None,
        counts: Counts {
            images: dataset.images.len(),
            categories: dataset.categories.len(),
            n_gt: dataset.n_gt(),
            n_det: dets.len(),
            rejected_score: dets.rejected_score,
            rejected_empty: dets.rejected_empty,
        },
        aggregate,
        per_category,
        verify: None,
    })
}

fn pooled_curve(cells: &[Cell], ti: usize, n_gt: usize, iou_thr: f64) -> PrCurve {
    let ranked = cells
        .iter()
        .flat_map(|c| c.outcomes[ti].iter())
        .map(|o| RankedDetection {
            score: o.score,
            is_tp: o.tp_iou.is_some(),
        })
        .collect();
    build_pr_curve(ranked, n_gt, None, iou_thr)
}

/// Dataset-wide P/R curve of one category (or all categories pooled) at `iou_thr`.
pub fn pr_curve(
    dataset: &Dataset,
    dets: &DetectionSet,
    category: Option<CategoryId>,
    iou_thr: f64,
) -> PrCurve {
    let ids: Vec<ImageId> = dataset.image_ids().collect();
    let cells: Vec<Cell> = ids
        .par_iter()
        .map(|&id| image_cells(dataset, dets, id, &[iou_thr]))
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .filter(|c| category.map_or(true, |cat| c.category == cat))
        .collect();
    let n_gt = cells.iter().map(|c| c.n_gt).sum();
    let mut curve = pooled_curve(&cells, 0, n_gt, iou_thr);
    curve.category = category;
    curve
}

/// Keeps only the detections of `images`.
pub fn subset_detections(dets: &DetectionSet, images: &[ImageId]) -> DetectionSet {
    DetectionSet::from_detections(
        images
            .iter()
            .flat_map(|&id| dets.for_image(id).iter().cloned()),
    )
}

/// Re-evaluates a random 1% of images (at least one) with the brute-force
/// oracles and records every disagreement with the production code.
#[cfg(feature = "verify")]
pub fn verify_sample(
    dataset: &Dataset,
    dets: &DetectionSet,
    cfg: &EvalConfig,
    seed: u64,
) -> VerifySummary {
    use crate::hedging::{dc_single, DetectionGraph};
    use crate::matching::greedy_match;
    use crate::oracles::{ap_naive, dc_bruteforce, largest_component, match_bruteforce};
    use rand::SeedableRng;

    const MAX_ENUMERATED_COMPONENT: usize = 8;

    let ids: Vec<ImageId> = dataset.image_ids().collect();
    let n = ids.len().div_ceil(100).min(ids.len());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, ids.len(), n).into_vec();
    picked.sort_unstable();
    let sample: Vec<ImageId> = picked.into_iter().map(|i| ids[i]).collect();

    let mut summary = VerifySummary {
        seed,
        sampled_images: sample.clone(),
        match_checks: 0,
        ap_checks: 0,
        dc_checks: 0,
        dc_skipped: 0,
        mismatches: Vec::new(),
    };

    // per (category, threshold): oracle (score, flag) lists and GT counts
    let nt = cfg.iou_thresholds.len();
    let mut flags: BTreeMap<CategoryId, (usize, Vec<Vec<(f64, bool)>>)> = BTreeMap::new();
    let mut dc_sums = vec![vec![0.0; cfg.dc.conf_thresholds.len()]; cfg.dc.iou_thresholds.len()];
    let mut dc_counts =
        vec![vec![0usize; cfg.dc.conf_thresholds.len()]; cfg.dc.iou_thresholds.len()];
    let mut dc_complete = true;
    for &img in &sample {
        for cat in dataset.category_ids() {
            let mut cell: Vec<&Detection> = dets
                .for_image(img)
                .iter()
                .filter(|d| d.category == cat)
                .collect();
            cell.sort_by(|a, b| b.score.total_cmp(&a.score));
            let gts: Vec<&BinaryMask> = dataset
                .gts_for(img)
                .iter()
                .filter(|g| g.category == cat)
                .map(|g| &g.mask)
                .collect();
            let masks: Vec<&BinaryMask> = cell.iter().map(|d| &d.mask).collect();
            let entry = flags
                .entry(cat)
                .or_insert_with(|| (0, vec![Vec::new(); nt]));
            entry.0 += gts.len();
            for (ti, &t) in cfg.iou_thresholds.iter().enumerate() {
                let oracle = match_bruteforce(&masks, &gts, t);
                summary.match_checks += 1;
                if oracle != greedy_match(&masks, &gts, t) {
                    summary.mismatches.push(format!(
                        "image {img} category {cat}: matching differs at IoU {t}"
                    ));
                }
                let limit = cfg.max_dets.min(cell.len());
                entry.1[ti]
                    .extend((0..limit).map(|k| (cell[k].score, oracle.det_to_gt[k].is_some())));
            }
            if cell.is_empty() {
                continue;
            }
            let weights: Vec<f64> = cell.iter().map(|d| d.score).collect();
            for (ti, &t) in cfg.dc.iou_thresholds.iter().enumerate() {
                for (vi, &v) in cfg.dc.conf_thresholds.iter().enumerate() {
                    let keep: Vec<usize> = (0..cell.len()).filter(|&k| weights[k] >= v).collect();
                    if keep.is_empty() {
                        continue;
                    }
                    let km: Vec<&BinaryMask> = keep.iter().map(|&k| masks[k]).collect();
                    let kw: Vec<f64> = keep.iter().map(|&k| weights[k]).collect();
                    let g = DetectionGraph::from_masks(&km, kw, t);
                    dc_counts[ti][vi] += 1;
                    if largest_component(&g) > MAX_ENUMERATED_COMPONENT {
                        summary.dc_skipped += 1;
                        dc_complete = false;
                        continue;
                    }
                    let slow = dc_bruteforce(&g);
                    dc_sums[ti][vi] += slow;
                    summary.dc_checks += 1;
                    if (dc_single(&g) - slow).abs() > 1e-9 {
                        summary.mismatches.push(format!(
                            "image {img} category {cat}: DC differs at IoU {t}, confidence {v}"
                        ));
                    }
                }
            }
        }
    }

    let sub_ds = dataset.subset(&sample);
    let sub_dets = subset_detections(dets, &sample);
    let ap_cfg = EvalConfig {
        metrics: [Metric::Ap, Metric::Dc].into_iter().collect(),
        ..cfg.clone()
    };
    match evaluate(&sub_ds, &sub_dets, &ap_cfg) {
        Ok(report) => {
            for cat in &report.per_category {
                let Some((n_gt, per_t)) = flags.get(&cat.id) else {
                    continue;
                };
                for (ti, at) in cat.ap.iter().flatten().enumerate() {
                    let mut ranked = per_t[ti].clone();
                    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
                    let seq: Vec<bool> = ranked.iter().map(|r| r.1).collect();
                    let naive = ap_naive(&seq, *n_gt);
                    summary.ap_checks += 1;
                    let agree = match (naive, at.ap) {
                        (Some(a), Some(b)) => (a - b).abs() <= 1e-12,
                        (None, None) => true,
                        _ => false,
                    };
                    if !agree {
                        summary.mismatches.push(format!(
                            "category {}: AP at IoU {} is {:?}, oracle gives {:?}",
                            cat.id, at.iou_thr, at.ap, naive
                        ));
                    }
                }
            }
            if let (true, Some(dc)) = (dc_complete, report.aggregate.dc) {
                let mut total = 0.0;
                for (ti, row) in dc_sums.iter().enumerate() {
                    for (vi, &s) in row.iter().enumerate() {
                        let c = dc_counts[ti][vi];
                        total += if c == 0 { 0.0 } else { s / c as f64 };
                    }
                }
                let slow = total / (dc_sums.len() * dc_sums[0].len()) as f64;
                summary.dc_checks += 1;
                if (slow - dc.dc).abs() > 1e-9 {
                    summary.mismatches.push(format!(
                        "aggregate DC {} differs from oracle {}",
                        dc.dc, slow
                    ));
                }
            }
        }
        Err(e) => summary
            .mismatches
            .push(format!("evaluation of the sample failed: {e}")),
    }
    summary
}
