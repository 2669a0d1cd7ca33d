//! Synthetic part-counting scenes: identical capsule-shaped parts dropped
//! around the image center, later parts occluding earlier ones.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coco::{
    self, Category, CategoryId, CocoError, Dataset, Detection, DetectionSet, GroundTruthInstance,
    ImageId, ImageInfo, SemanticMaskSet,
};
use crate::mask::BinaryMask;

pub const PART_CATEGORY: CategoryId = 1;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    Config(String),
    #[error("could not place a part inside the image after {0} attempts")]
    Placement(usize),
    #[error(transparent)]
    Io(#[from] CocoError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub parts_per_image: usize,
    pub height: u32,
    pub width: u32,
    /// Placement standard deviation as a fraction of the image side.
    pub sigma_frac: f64,
    /// Total capsule length in pixels, end cap to end cap, sampled uniformly.
    pub length: [f64; 2],
    /// Capsule thickness in pixels, sampled uniformly.
    pub thickness: [f64; 2],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_images: 100,
            parts_per_image: 10,
            height: 256,
            width: 256,
            sigma_frac: 1.0 / 6.0,
            length: [60.0, 60.0],
            thickness: [8.0, 8.0],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.parts_per_image == 0 {
            return err("parts_per_image must be at least 1");
        }
        if self.height == 0 || self.width == 0 {
            return err("image size must be positive");
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac.is_finite()) {
            return err("sigma_frac must be positive");
        }
        for (name, [lo, hi]) in [("length", self.length), ("thickness", self.thickness)] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(SynthError::Config(format!(
                    "{name} range must satisfy 0 < lo <= hi"
                )));
            }
        }
        if self.thickness[1] > self.length[0] {
            return err("thickness must not exceed length");
        }
        if self.length[1] > f64::from(self.height.min(self.width)) {
            return Err(SynthError::Config(format!(
                "part length up to {} does not fit a {}x{} image",
                self.length[1], self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Capsule {
    cx: f64,
    cy: f64,
    angle: f64,
    half_segment: f64,
    radius: f64,
}

impl Capsule {
    fn extent(&self) -> (f64, f64) {
        (
            self.half_segment * self.angle.cos().abs() + self.radius,
            self.half_segment * self.angle.sin().abs() + self.radius,
        )
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (self.angle.cos(), self.angle.sin());
        let (px, py) = (x - self.cx, y - self.cy);
        let t = (px * dx + py * dy).clamp(-self.half_segment, self.half_segment);
        let (ex, ey) = (px - t * dx, py - t * dy);
        ex * ex + ey * ey <= self.radius * self.radius
    }
}

const MAX_PLACEMENT_ATTEMPTS: usize = 100_000;

fn sample_capsule(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Capsule, SynthError> {
    let (w, h) = (f64::from(cfg.width), f64::from(cfg.height));
    let length = rng.gen_range(cfg.length[0]..=cfg.length[1]);
    let thickness = rng.gen_range(cfg.thickness[0]..=cfg.thickness[1]);
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let nx = Normal::new(w / 2.0, w * cfg.sigma_frac).expect("sigma validated");
    let ny = Normal::new(h / 2.0, h * cfg.sigma_frac).expect("sigma validated");
    let mut c = Capsule {
        cx: 0.0,
        cy: 0.0,
        angle,
        half_segment: (length - thickness) / 2.0,
        radius: thickness / 2.0,
    };
    let (ex, ey) = c.extent();
    for _ in 0..MAX_PLACEMENT_ATTEMPTS {
        c.cx = nx.sample(rng);
        c.cy = ny.sample(rng);
        if c.cx - ex >= 0.0 && c.cx + ex <= w && c.cy - ey >= 0.0 && c.cy + ey <= h {
            return Ok(c);
        }
    }
    Err(SynthError::Placement(MAX_PLACEMENT_ATTEMPTS))
}

/// Visible masks of one scene, in placement order, fully hidden parts removed.
fn render_scene(cfg: &SynthConfig, index: usize) -> Result<Vec<BinaryMask>, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(index as u64));
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u32; h as usize * w as usize];
    for part in 1..=cfg.parts_per_image as u32 {
        let c = sample_capsule(cfg, &mut rng)?;
        let (ex, ey) = c.extent();
        let x0 = (c.cx - ex).floor().max(0.0) as u32;
        let y0 = (c.cy - ey).floor().max(0.0) as u32;
        let x1 = ((c.cx + ex).ceil() as u32).min(w);
        let y1 = ((c.cy + ey).ceil() as u32).min(h);
        for row in y0..y1 {
            for col in x0..x1 {
                if c.contains(f64::from(col) + 0.5, f64::from(row) + 0.5) {
                    labels[row as usize * w as usize + col as usize] = part;
                }
            }
        }
    }
    let masks = (1..=cfg.parts_per_image as u32)
        .map(|part| {
            BinaryMask::from_fn(h, w, |row, col| {
                labels[row as usize * w as usize + col as usize] == part
            })
            .expect("validated size")
        })
        .filter(|m| !m.is_empty())
        .collect();
    Ok(masks)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub dataset: Dataset,
    pub semantic: BTreeMap<ImageId, SemanticMaskSet>,
}

pub fn generate(cfg: &SynthConfig) -> Result<SynthDataset, SynthError> {
    cfg.validate()?;
    let scenes: Vec<Vec<BinaryMask>> = (0..cfg.n_images)
        .into_par_iter()
        .map(|i| render_scene(cfg, i))
        .collect::<Result<_, _>>()?;
    let images: Vec<ImageInfo> = (0..cfg.n_images)
        .map(|i| ImageInfo {
            id: i as ImageId + 1,
            height: cfg.height,
            width: cfg.width,
            file_name: Some(format!("synth_{:05}.png", i + 1)),
        })
        .collect();
    let categories = vec![Category {
        id: PART_CATEGORY,
        name: "nail".into(),
        supercategory: Some("part".into()),
    }];
    let mut gts = Vec::new();
    let mut semantic = BTreeMap::new();
    for (img, masks) in images.iter().zip(scenes) {
        let mut sem = SemanticMaskSet::empty(img, [PART_CATEGORY]).map_err(SynthError::Io)?;
        let union = sem
            .masks
            .get_mut(&PART_CATEGORY)
            .expect("category inserted");
        for m in masks {
            union.union_in_place(&m).map_err(CocoError::from)?;
            gts.push(GroundTruthInstance {
                image_id: img.id,
                instance_id: gts.len() as u64 + 1,
                category: PART_CATEGORY,
                mask: m,
            });
        }
        semantic.insert(img.id, sem);
    }
    let dataset = Dataset::new(images, categories, gts)?;
    Ok(SynthDataset {
        config: cfg.clone(),
        dataset,
        semantic,
    })
}

impl SynthDataset {
    /// Writes `annotations.json`, `semantic/` and `config.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), SynthError> {
        coco::write_ground_truth(&self.dataset, &dir.join("annotations.json"))?;
        coco::write_semantic_masks(self.semantic.values(), &dir.join("semantic"))?;
        coco::write_json(&dir.join("config.json"), &self.config)?;
        Ok(())
    }
}

/// Controlled hedging for the ideal detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HedgeConfig {
    /// Spatially jittered duplicates per ground truth.
    pub spatial_copies: usize,
    /// Confidence step: the copy of rank `r` scores `1 - epsilon * r`.
    pub epsilon: f64,
    /// Probability that a ground truth also gets a wrong-category copy.
    pub category_noise_rate: f64,
    pub seed: u64,
}

impl Default for HedgeConfig {
    fn default() -> Self {
        Self {
            spatial_copies: 0,
            epsilon: 0.01,
            category_noise_rate: 0.0,
            seed: 0,
        }
    }
}

const JITTER: [(i32, i32); 8] = [
    (1, 0),
    (0, 1),
    (-1, 0),
    (0, -1),
    (1, 1),
    (-1, -1),
    (1, -1),
    (-1, 1),
];

/// Offset of the jittered copy with 1-based rank `r`.
pub fn jitter_offset(r: usize) -> (i32, i32) {
    let (dx, dy) = JITTER[(r - 1) % JITTER.len()];
    let scale = 1 + ((r - 1) / JITTER.len()) as i32;
    (dx * scale, dy * scale)
}

/// Emits every ground truth as a score-1.0 detection, plus the hedged copies
/// requested by `hedge`.
pub fn perfect_detector(
    dataset: &Dataset,
    hedge: &HedgeConfig,
) -> Result<DetectionSet, SynthError> {
    let lowest = 1.0 - hedge.epsilon * (hedge.spatial_copies + 1) as f64;
    if !(hedge.epsilon > 0.0) || lowest <= 0.0 {
        return Err(SynthError::Config(format!(
            "epsilon {} leaves no positive score for {} copies",
            hedge.epsilon, hedge.spatial_copies
        )));
    }
    if !(0.0..=1.0).contains(&hedge.category_noise_rate) {
        return Err(SynthError::Config(
            "category_noise_rate must be in [0, 1]".into(),
        ));
    }
    let cats: Vec<CategoryId> = dataset.category_ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hedge.seed);
    let mut out = Vec::new();
    for img in &dataset.images {
        for gt in dataset.gts_for(img.id) {
            let det = |category, score, mask| Detection {
                image_id: img.id,
                category,
                score,
                mask,
            };
            out.push(det(gt.category, 1.0, gt.mask.clone()));
            for r in 1..=hedge.spatial_copies {
                let (dx, dy) = jitter_offset(r);
                let m = gt.mask.shifted(dx, dy);
                if !m.is_empty() {
                    out.push(det(gt.category, 1.0 - hedge.epsilon * r as f64, m));
                }
            }
            if cats.len() > 1 && rng.gen_bool(hedge.category_noise_rate) {
                let pos = cats.iter().position(|&c| c == gt.category).unwrap_or(0);
                let wrong = cats[(pos + 1) % cats.len()];
                out.push(det(wrong, lowest, gt.mask.clone()));
            }
        }
    }
    Ok(DetectionSet::from_detections(out))
}
