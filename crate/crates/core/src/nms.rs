//! Duplicate removal: greedy mask NMS, Matrix NMS, Soft-NMS, and semantic
//! sorting followed by semantic (occupancy) NMS.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::coco::{CategoryId, Detection, DetectionSet, ImageId, SemanticMaskSet};
use crate::mask::BinaryMask;
use crate::matching::rank_by_score;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NmsError {
    #[error("image {image_id}: no semantic mask for category {category}")]
    MissingSemanticMask {
        image_id: ImageId,
        category: CategoryId,
    },
    #[error("image {image_id}: no semantic masks supplied")]
    MissingSemanticImage { image_id: ImageId },
    #[error("image {image_id}: semantic mask is {sh}x{sw}, detection is {dh}x{dw}")]
    SemanticDims {
        image_id: ImageId,
        sh: u32,
        sw: u32,
        dh: u32,
        dw: u32,
    },
    #[error("semantic NMS needs semantic masks")]
    NoSemanticSource,
    #[error("invalid NMS config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum NmsMethod {
    Mask,
    Matrix,
    Soft,
    Semantic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Decay {
    Gaussian,
    Linear,
}

impl Decay {
    fn apply(self, iou: f64, sigma: f64) -> f64 {
        match self {
            Decay::Gaussian => (-(iou * iou) / sigma).exp(),
            Decay::Linear => 1.0 - iou,
        }
    }
}

/// Which score semantic NMS writes on the detections it keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SemanticScore {
    /// `(tau + pr + (1 - iou)) / 3`, same order as the sum and within `[0, 1]`.
    Averaged,
    /// The detector's own confidence.
    Original,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NmsConfig {
    pub method: NmsMethod,
    /// Suppression IoU for mask NMS (and the linear Soft-NMS cut-in).
    pub iou_thr: f64,
    /// Post-NMS score floor; `None` selects the method default.
    pub score_floor: Option<f64>,
    /// Minimum remaining semantic occupancy for semantic NMS.
    pub occupancy_thr: f64,
    pub decay: Decay,
    pub sigma: f64,
    pub semantic_score: SemanticScore,
}

impl Default for NmsConfig {
    fn default() -> Self {
        Self {
            method: NmsMethod::Semantic,
            iou_thr: 0.5,
            score_floor: None,
            occupancy_thr: 0.5,
            decay: Decay::Gaussian,
            sigma: 2.0,
            semantic_score: SemanticScore::Averaged,
        }
    }
}

impl NmsConfig {
    pub fn effective_score_floor(&self) -> f64 {
        self.score_floor.unwrap_or(match self.method {
            NmsMethod::Matrix => 0.05,
            NmsMethod::Soft => 0.001,
            NmsMethod::Mask | NmsMethod::Semantic => 0.0,
        })
    }

    pub fn validate(&self) -> Result<(), NmsError> {
        for (name, v) in [
            ("iou_thr", self.iou_thr),
            ("score_floor", self.effective_score_floor()),
            ("occupancy_thr", self.occupancy_thr),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(NmsError::Config(format!("{name} = {v} is outside [0, 1]")));
            }
        }
        if !(self.sigma > 0.0) {
            return Err(NmsError::Config(format!(
                "sigma = {} must be positive",
                self.sigma
            )));
        }
        Ok(())
    }
}

/// Greedy mask NMS. Returns kept indices in descending-score order.
///
/// A detection survives iff its IoU with every already-kept detection of the
/// same category is below `iou_thr`.
pub fn mask_nms(dets: &[Detection], iou_thr: f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut kept: Vec<usize> = Vec::new();
    for k in rank_by_score(&scores) {
        let d = &dets[k];
        let suppressed = kept.iter().any(|&j| {
            dets[j].category == d.category && dets[j].mask.iou_unchecked(&d.mask) >= iou_thr
        });
        if !suppressed {
            kept.push(k);
        }
    }
    kept
}

/// Matrix NMS: every detection is decayed by
/// `min_j f(iou_jk) / f(max_i iou_ij)` over higher-ranked same-category `j`,
/// then detections below `score_floor` are dropped. Output is sorted by the
/// new score.
pub fn matrix_nms(
    dets: &[Detection],
    decay: Decay,
    sigma: f64,
    score_floor: f64,
) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = rank_by_score(&scores);
    let n = order.len();
    let mut iou = vec![0.0; n * n];
    for a in 0..n {
        for b in (a + 1)..n {
            let (da, db) = (&dets[order[a]], &dets[order[b]]);
            if da.category == db.category {
                iou[a * n + b] = da.mask.iou_unchecked(&db.mask);
            }
        }
    }
    // compensation: the largest IoU each detection has with a higher-ranked one
    let comp: Vec<f64> = (0..n)
        .map(|b| (0..b).map(|a| iou[a * n + b]).fold(0.0, f64::max))
        .collect();
    let mut out: Vec<Detection> = Vec::with_capacity(n);
    for k in 0..n {
        let mut factor = 1.0f64;
        for j in 0..k {
            if dets[order[j]].category != dets[order[k]].category {
                continue;
            }
            let denom = decay.apply(comp[j], sigma);
            if denom <= 0.0 {
                continue;
            }
            factor = factor.min(decay.apply(iou[j * n + k], sigma) / denom);
        }
        let mut d = dets[order[k]].clone();
        d.score *= factor.min(1.0);
        if d.score >= score_floor {
            out.push(d);
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Soft-NMS: repeatedly take the highest-scoring remaining detection and decay
/// the others of its category by their IoU with it. Linear decay only applies
/// above `iou_thr`.
pub fn soft_nms(
    dets: &[Detection],
    decay: Decay,
    sigma: f64,
    iou_thr: f64,
    score_floor: f64,
) -> Vec<Detection> {
    let mut pool: Vec<Detection> = {
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        rank_by_score(&scores)
            .into_iter()
            .map(|i| dets[i].clone())
            .collect()
    };
    let mut out = Vec::with_capacity(pool.len());
    while !pool.is_empty() {
        let best = pool
            .iter()
            .enumerate()
            .fold(0, |b, (i, d)| if d.score > pool[b].score { i } else { b });
        let top = pool.remove(best);
        for d in pool.iter_mut().filter(|d| d.category == top.category) {
            let iou = top.mask.iou_unchecked(&d.mask);
            let f = match decay {
                Decay::Gaussian => decay.apply(iou, sigma),
                Decay::Linear if iou >= iou_thr => decay.apply(iou, sigma),
                Decay::Linear => 1.0,
            };
            d.score *= f;
        }
        if top.score >= score_floor {
            out.push(top);
        }
    }
    out
}

/// A detection's position in the input and its semantic score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SortedDetection {
    pub index: usize,
    /// `tau + pr + (1 - iou)` against the category's semantic mask.
    pub score: f64,
}

fn semantic_mask_for<'a>(
    semantic: &'a SemanticMaskSet,
    d: &Detection,
) -> Result<&'a BinaryMask, NmsError> {
    let m = semantic
        .mask(d.category)
        .ok_or(NmsError::MissingSemanticMask {
            image_id: semantic.image_id,
            category: d.category,
        })?;
    if m.dims() != d.mask.dims() {
        return Err(NmsError::SemanticDims {
            image_id: semantic.image_id,
            sh: m.height(),
            sw: m.width(),
            dh: d.mask.height(),
            dw: d.mask.width(),
        });
    }
    Ok(m)
}

/// Rescores each detection by its agreement with the semantic mask of its
/// category and sorts by the new score (ties: original confidence, then
/// input order).
pub fn semantic_sort(
    dets: &[Detection],
    semantic: &SemanticMaskSet,
) -> Result<Vec<SortedDetection>, NmsError> {
    let mut out = Vec::with_capacity(dets.len());
    for (index, d) in dets.iter().enumerate() {
        let m = semantic_mask_for(semantic, d)?;
        let pr = d.mask.precision_unchecked(m);
        let iou = d.mask.iou_unchecked(m);
        out.push(SortedDetection {
            index,
            score: d.score + pr + (1.0 - iou),
        });
    }
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(dets[b.index].score.total_cmp(&dets[a.index].score))
            .then(a.index.cmp(&b.index))
    });
    Ok(out)
}

/// Single pass over `sorted`: keep a detection iff at least `thr` of its
/// pixels are still unclaimed in its category's semantic mask, then claim
/// them. Works on a private copy of the masks. Returns one flag per entry of
/// `sorted`.
pub fn semantic_nms(
    dets: &[Detection],
    sorted: &[SortedDetection],
    semantic: &SemanticMaskSet,
    thr: f64,
) -> Result<Vec<bool>, NmsError> {
    let mut occupancy: BTreeMap<CategoryId, BinaryMask> = BTreeMap::new();
    let mut keep = Vec::with_capacity(sorted.len());
    for s in sorted {
        let d = &dets[s.index];
        if !occupancy.contains_key(&d.category) {
            let m = semantic_mask_for(semantic, d)?;
            occupancy.insert(d.category, m.clone());
        }
        let free = occupancy.get_mut(&d.category).expect("inserted above");
        let overlap = d.mask.precision_unchecked(free);
        if overlap >= thr {
            free.subtract_in_place_unchecked(&d.mask);
            keep.push(true);
        } else {
            keep.push(false);
        }
    }
    Ok(keep)
}

/// Semantic sorting followed by semantic NMS for one image. Kept detections
/// come back in semantic order with scores per `score_mode`.
pub fn semantic_filter(
    dets: &[Detection],
    semantic: &SemanticMaskSet,
    thr: f64,
    score_mode: SemanticScore,
) -> Result<Vec<Detection>, NmsError> {
    let sorted = semantic_sort(dets, semantic)?;
    let keep = semantic_nms(dets, &sorted, semantic, thr)?;
    Ok(sorted
        .iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(s, _)| {
            let mut d = dets[s.index].clone();
            if score_mode == SemanticScore::Averaged {
                d.score = s.score / 3.0;
            }
            d
        })
        .collect())
}

fn nms_image(
    dets: &[Detection],
    cfg: &NmsConfig,
    semantic: Option<&SemanticMaskSet>,
) -> Result<Vec<Detection>, NmsError> {
    let floor = cfg.effective_score_floor();
    let out = match cfg.method {
        NmsMethod::Mask => mask_nms(dets, cfg.iou_thr)
            .into_iter()
            .map(|i| dets[i].clone())
            .filter(|d| d.score >= floor)
            .collect(),
        NmsMethod::Matrix => matrix_nms(dets, cfg.decay, cfg.sigma, floor),
        NmsMethod::Soft => soft_nms(dets, cfg.decay, cfg.sigma, cfg.iou_thr, floor),
        NmsMethod::Semantic => {
            let sem = semantic.ok_or(NmsError::NoSemanticSource)?;
            semantic_filter(dets, sem, cfg.occupancy_thr, cfg.semantic_score)?
                .into_iter()
                .filter(|d| d.score >= floor)
                .collect()
        }
    };
    Ok(out)
}

/// Applies the configured NMS to every image independently.
pub fn run_nms(
    dets: &DetectionSet,
    cfg: &NmsConfig,
    semantic: Option<&BTreeMap<ImageId, SemanticMaskSet>>,
) -> Result<DetectionSet, NmsError> {
    cfg.validate()?;
    if cfg.method == NmsMethod::Semantic && semantic.is_none() {
        return Err(NmsError::NoSemanticSource);
    }
    let ids: Vec<ImageId> = dets.image_ids().collect();
    let results: Vec<Result<(ImageId, Vec<Detection>), NmsError>> = ids
        .par_iter()
        .map(|&id| {
            let sem = match semantic {
                Some(map) => Some(
                    map.get(&id)
                        .ok_or(NmsError::MissingSemanticImage { image_id: id })?,
                ),
                None => None,
            };
            Ok((id, nms_image(dets.for_image(id), cfg, sem)?))
        })
        .collect();
    let mut out = DetectionSet::default();
    out.rejected_score = dets.rejected_score;
    out.rejected_empty = dets.rejected_empty;
    for r in results {
        let (id, kept) = r?;
        out.set_image(id, kept);
    }
    Ok(out)
}
