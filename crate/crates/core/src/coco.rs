//! Reading and writing COCO annotation, results, and semantic-mask files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::mask::{self, BinaryMask, MaskError, RleMask};

pub type ImageId = u64;
pub type CategoryId = u64;

#[derive(Debug, Error)]
pub enum CocoError {
    #[error("{path}: {cause}")]
    Io {
        path: PathBuf,
        cause: std::io::Error,
    },
    #[error("{path}: invalid JSON: {cause}")]
    Json {
        path: PathBuf,
        cause: serde_json::Error,
    },
    #[error("annotation {id}: {reason}")]
    Annotation { id: String, reason: String },
    #[error("annotation {0}: iscrowd annotations are not supported")]
    Crowd(String),
    #[error("detection #{index}: {reason}")]
    Detection { index: usize, reason: String },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("semantic masks: {0}")]
    Semantic(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

pub type Result<T> = std::result::Result<T, CocoError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: ImageId,
    pub height: u32,
    pub width: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthInstance {
    pub image_id: ImageId,
    pub instance_id: u64,
    pub category: CategoryId,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: ImageId,
    pub category: CategoryId,
    pub score: f64,
    pub mask: BinaryMask,
}

/// Images, categories, and ground truth grouped by image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub images: Vec<ImageInfo>,
    pub categories: Vec<Category>,
    gts: BTreeMap<ImageId, Vec<GroundTruthInstance>>,
}

impl Dataset {
    pub fn new(
        images: Vec<ImageInfo>,
        categories: Vec<Category>,
        gts: Vec<GroundTruthInstance>,
    ) -> Result<Self> {
        let mut ds = Dataset {
            images,
            categories,
            gts: BTreeMap::new(),
        };
        let mut seen = std::collections::BTreeSet::new();
        for img in &ds.images {
            if !seen.insert(img.id) {
                return Err(CocoError::DuplicateId {
                    kind: "image",
                    id: img.id,
                });
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for cat in &ds.categories {
            if !seen.insert(cat.id) {
                return Err(CocoError::DuplicateId {
                    kind: "category",
                    id: cat.id,
                });
            }
        }
        for gt in gts {
            let id = gt.instance_id.to_string();
            let img = ds.image(gt.image_id).ok_or_else(|| CocoError::Annotation {
                id: id.clone(),
                reason: format!("unknown image_id {}", gt.image_id),
            })?;
            if gt.mask.dims() != (img.height, img.width) {
                return Err(CocoError::Annotation {
                    id,
                    reason: format!(
                        "mask is {}x{} but image is {}x{}",
                        gt.mask.height(),
                        gt.mask.width(),
                        img.height,
                        img.width
                    ),
                });
            }
            if ds.category(gt.category).is_none() {
                return Err(CocoError::Annotation {
                    id,
                    reason: format!("unknown category_id {}", gt.category),
                });
            }
            if gt.mask.is_empty() {
                return Err(CocoError::Annotation {
                    id,
                    reason: "empty mask".into(),
                });
            }
            ds.gts.entry(gt.image_id).or_default().push(gt);
        }
        Ok(ds)
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageInfo> {
        self.images.iter().find(|i| i.id == id)
    }

    pub fn category(&self, id: CategoryId) -> Option<&Category> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.images.iter().map(|i| i.id)
    }

    pub fn category_ids(&self) -> impl Iterator<Item = CategoryId> + '_ {
        self.categories.iter().map(|c| c.id)
    }

    pub fn gts_for(&self, image_id: ImageId) -> &[GroundTruthInstance] {
        self.gts.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn ground_truths(&self) -> impl Iterator<Item = &GroundTruthInstance> {
        self.gts.values().flatten()
    }

    pub fn n_gt(&self) -> usize {
        self.gts.values().map(Vec::len).sum()
    }

    /// Restricts the dataset to the given images (used by `--verify` sampling).
    pub fn subset(&self, ids: &[ImageId]) -> Dataset {
        let keep: std::collections::BTreeSet<_> = ids.iter().copied().collect();
        Dataset {
            images: self
                .images
                .iter()
                .filter(|i| keep.contains(&i.id))
                .cloned()
                .collect(),
            categories: self.categories.clone(),
            gts: self
                .gts
                .iter()
                .filter(|(k, _)| keep.contains(k))
                .map(|(k, v)| (*k, v.clone()))
                .collect(),
        }
    }
}

/// Detections grouped by image, in file order within each image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    per_image: BTreeMap<ImageId, Vec<Detection>>,
    /// Records dropped because the score was outside `[0, 1]`.
    pub rejected_score: usize,
    /// Records dropped because the decoded mask was empty.
    pub rejected_empty: usize,
}

impl DetectionSet {
    pub fn from_detections(dets: impl IntoIterator<Item = Detection>) -> Self {
        let mut set = DetectionSet::default();
        for d in dets {
            set.per_image.entry(d.image_id).or_default().push(d);
        }
        set
    }

    pub fn for_image(&self, image_id: ImageId) -> &[Detection] {
        self.per_image.get(&image_id).map_or(&[], Vec::as_slice)
    }

    pub fn set_image(&mut self, image_id: ImageId, dets: Vec<Detection>) {
        if dets.is_empty() {
            self.per_image.remove(&image_id);
        } else {
            self.per_image.insert(image_id, dets);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Detection> {
        self.per_image.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.per_image.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn image_ids(&self) -> impl Iterator<Item = ImageId> + '_ {
        self.per_image.keys().copied()
    }
}

/// Per-category semantic masks for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticMaskSet {
    pub image_id: ImageId,
    pub height: u32,
    pub width: u32,
    pub masks: BTreeMap<CategoryId, BinaryMask>,
}

impl SemanticMaskSet {
    pub fn empty(
        image: &ImageInfo,
        categories: impl IntoIterator<Item = CategoryId>,
    ) -> Result<Self> {
        let mut masks = BTreeMap::new();
        for c in categories {
            masks.insert(c, BinaryMask::empty(image.height, image.width)?);
        }
        Ok(Self {
            image_id: image.id,
            height: image.height,
            width: image.width,
            masks,
        })
    }

    pub fn mask(&self, category: CategoryId) -> Option<&BinaryMask> {
        self.masks.get(&category)
    }
}

/// Where semantic masks come from.
#[derive(Debug, Clone, PartialEq)]
pub enum SemanticSource {
    /// `<dir>/<image_id>/<category_id>.json`, one RLE object per file.
    Directory(PathBuf),
    /// Union of ground-truth instance masks per category.
    DeriveFromGt,
    /// Union of detection masks with score at or above `min_score`, per category.
    DeriveFromDt { min_score: f64 },
}

// ---- on-disk records -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RleCounts {
    Compressed(String),
    Raw(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RleRecord {
    /// `[height, width]`
    pub size: [u32; 2],
    pub counts: RleCounts,
}

impl RleRecord {
    pub fn compressed(mask: &BinaryMask) -> Self {
        RleRecord {
            size: [mask.height(), mask.width()],
            counts: RleCounts::Compressed(mask::compress(&mask::encode(mask))),
        }
    }

    pub fn to_rle(&self) -> std::result::Result<RleMask, MaskError> {
        let [h, w] = self.size;
        match &self.counts {
            RleCounts::Compressed(s) => mask::decompress(s, h, w),
            RleCounts::Raw(c) => RleMask::new(h, w, c.clone()),
        }
    }

    pub fn to_mask(&self) -> std::result::Result<BinaryMask, MaskError> {
        Ok(mask::decode(&self.to_rle()?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
enum Segmentation {
    Rle(RleRecord),
    Polygons(Vec<Vec<f64>>),
}

#[derive(Debug, Deserialize)]
struct AnnotationIn {
    id: u64,
    image_id: ImageId,
    category_id: CategoryId,
    segmentation: Segmentation,
    #[serde(default)]
    iscrowd: u8,
}

#[derive(Debug, Serialize)]
struct AnnotationOut<'a> {
    id: u64,
    image_id: ImageId,
    category_id: CategoryId,
    segmentation: &'a RleRecord,
    area: u64,
    bbox: [f64; 4],
    iscrowd: u8,
}

#[derive(Debug, Deserialize)]
struct CocoFileIn {
    images: Vec<ImageInfo>,
    annotations: Vec<Value>,
    categories: Vec<Category>,
}

#[derive(Debug, Serialize)]
struct CocoFileOut<'a> {
    images: &'a [ImageInfo],
    annotations: Vec<AnnotationOut<'a>>,
    categories: &'a [Category],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub score: f64,
    pub segmentation: RleRecord,
}

// ---- helpers ----------------------------------------------------------------

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|cause| CocoError::Io {
        path: path.to_path_buf(),
        cause,
    })?;
    serde_json::from_str(&text).map_err(|cause| CocoError::Json {
        path: path.to_path_buf(),
        cause,
    })
}

/// Writes pretty JSON with a trailing newline, creating parent directories.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let io_err = |cause| CocoError::Io {
        path: path.to_path_buf(),
        cause,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|cause| CocoError::Json {
        path: path.to_path_buf(),
        cause,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(io_err)
}

fn polygons_to_mask(polys: &[Vec<f64>], h: u32, w: u32) -> std::result::Result<BinaryMask, String> {
    let mut out = BinaryMask::empty(h, w).map_err(|e| e.to_string())?;
    for poly in polys {
        if poly.len() % 2 != 0 {
            return Err("polygon has an odd number of coordinates".into());
        }
        let verts: Vec<(f64, f64)> = poly.chunks_exact(2).map(|p| (p[0], p[1])).collect();
        let m = mask::rasterize_polygon(&verts, h, w).map_err(|e| e.to_string())?;
        out.union_in_place(&m).map_err(|e| e.to_string())?;
    }
    Ok(out)
}

// ---- ground truth -------------------------------------------------------------

pub fn parse_ground_truth(text: &str, path: &Path) -> Result<Dataset> {
    let file: CocoFileIn = serde_json::from_str(text).map_err(|cause| CocoError::Json {
        path: path.to_path_buf(),
        cause,
    })?;
    let dims: BTreeMap<ImageId, (u32, u32)> = file
        .images
        .iter()
        .map(|i| (i.id, (i.height, i.width)))
        .collect();
    let mut gts = Vec::with_capacity(file.annotations.len());
    for (index, raw) in file.annotations.into_iter().enumerate() {
        let id = raw
            .get("id")
            .map(|v| v.to_string())
            .unwrap_or_else(|| format!("#{index} (no id)"));
        let ann: AnnotationIn = serde_json::from_value(raw).map_err(|e| CocoError::Annotation {
            id: id.clone(),
            reason: e.to_string(),
        })?;
        if ann.iscrowd != 0 {
            return Err(CocoError::Crowd(id));
        }
        let &(h, w) = dims
            .get(&ann.image_id)
            .ok_or_else(|| CocoError::Annotation {
                id: id.clone(),
                reason: format!("unknown image_id {}", ann.image_id),
            })?;
        let mask = match &ann.segmentation {
            Segmentation::Rle(rec) => {
                if rec.size != [h, w] {
                    return Err(CocoError::Annotation {
                        id,
                        reason: format!("RLE size {:?} does not match image {}x{}", rec.size, h, w),
                    });
                }
                rec.to_mask().map_err(|e| CocoError::Annotation {
                    id: id.clone(),
                    reason: e.to_string(),
                })?
            }
            Segmentation::Polygons(polys) => {
                polygons_to_mask(polys, h, w).map_err(|reason| CocoError::Annotation {
                    id: id.clone(),
                    reason,
                })?
            }
        };
        gts.push(GroundTruthInstance {
            image_id: ann.image_id,
            instance_id: ann.id,
            category: ann.category_id,
            mask,
        });
    }
    Dataset::new(file.images, file.categories, gts)
}

pub fn load_ground_truth(path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|cause| CocoError::Io {
        path: path.to_path_buf(),
        cause,
    })?;
    parse_ground_truth(&text, path)
}

/// Writes a COCO annotation file with compressed RLE segmentations.
pub fn write_ground_truth(dataset: &Dataset, path: &Path) -> Result<()> {
    let records: Vec<(&GroundTruthInstance, RleRecord)> = dataset
        .ground_truths()
        .map(|g| (g, RleRecord::compressed(&g.mask)))
        .collect();
    let annotations = records
        .iter()
        .map(|(g, rec)| AnnotationOut {
            id: g.instance_id,
            image_id: g.image_id,
            category_id: g.category,
            segmentation: rec,
            area: g.mask.area(),
            bbox: g.mask.bbox(),
            iscrowd: 0,
        })
        .collect();
    write_json(
        path,
        &CocoFileOut {
            images: &dataset.images,
            annotations,
            categories: &dataset.categories,
        },
    )
}

// ---- detections -------------------------------------------------------------------

pub fn load_detections(path: &Path, dataset: &Dataset) -> Result<DetectionSet> {
    let records: Vec<Value> = read_json(path)?;
    let mut set = DetectionSet::default();
    for (index, raw) in records.into_iter().enumerate() {
        let rec: ResultRecord = serde_json::from_value(raw).map_err(|e| CocoError::Detection {
            index,
            reason: e.to_string(),
        })?;
        let img = dataset
            .image(rec.image_id)
            .ok_or_else(|| CocoError::Detection {
                index,
                reason: format!("unknown image_id {}", rec.image_id),
            })?;
        if dataset.category(rec.category_id).is_none() {
            return Err(CocoError::Detection {
                index,
                reason: format!("unknown category_id {}", rec.category_id),
            });
        }
        if rec.segmentation.size != [img.height, img.width] {
            return Err(CocoError::Detection {
                index,
                reason: format!(
                    "RLE size {:?} does not match image {}x{}",
                    rec.segmentation.size, img.height, img.width
                ),
            });
        }
        if !(0.0..=1.0).contains(&rec.score) {
            set.rejected_score += 1;
            continue;
        }
        let mask = rec
            .segmentation
            .to_mask()
            .map_err(|e| CocoError::Detection {
                index,
                reason: e.to_string(),
            })?;
        if mask.is_empty() {
            set.rejected_empty += 1;
            continue;
        }
        set.per_image
            .entry(rec.image_id)
            .or_default()
            .push(Detection {
                image_id: rec.image_id,
                category: rec.category_id,
                score: rec.score,
                mask,
            });
    }
    if set.rejected_score + set.rejected_empty > 0 {
        log::warn!(
            "{}: rejected {} detections with score outside [0, 1] and {} with empty masks",
            path.display(),
            set.rejected_score,
            set.rejected_empty
        );
    }
    Ok(set)
}

pub fn detection_records(dets: &DetectionSet) -> Vec<ResultRecord> {
    dets.iter()
        .map(|d| ResultRecord {
            image_id: d.image_id,
            category_id: d.category,
            score: d.score,
            segmentation: RleRecord::compressed(&d.mask),
        })
        .collect()
}

pub fn write_detections(dets: &DetectionSet, path: &Path) -> Result<()> {
    write_json(path, &detection_records(dets))
}

// ---- semantic masks -------------------------------------------------------------------

pub fn load_semantic_masks(
    source: &SemanticSource,
    dataset: &Dataset,
    detections: Option<&DetectionSet>,
) -> Result<BTreeMap<ImageId, SemanticMaskSet>> {
    let mut out = BTreeMap::new();
    for img in &dataset.images {
        let mut set = SemanticMaskSet::empty(img, dataset.category_ids())?;
        match source {
            SemanticSource::DeriveFromGt => {
                for gt in dataset.gts_for(img.id) {
                    if let Some(m) = set.masks.get_mut(&gt.category) {
                        m.union_in_place(&gt.mask)?;
                    }
                }
            }
            SemanticSource::DeriveFromDt { min_score } => {
                let dets = detections.ok_or_else(|| {
                    CocoError::Semantic("derive-from-dt needs a detection set".into())
                })?;
                for d in dets.for_image(img.id) {
                    if d.score >= *min_score {
                        if let Some(m) = set.masks.get_mut(&d.category) {
                            m.union_in_place(&d.mask)?;
                        }
                    }
                }
            }
            SemanticSource::Directory(dir) => {
                let img_dir = dir.join(img.id.to_string());
                if !img_dir.is_dir() {
                    return Err(CocoError::Semantic(format!(
                        "missing entry for image {} (expected directory {})",
                        img.id,
                        img_dir.display()
                    )));
                }
                for (cat, m) in set.masks.iter_mut() {
                    let file = img_dir.join(format!("{cat}.json"));
                    // absent category file means no pixels of that category
                    if !file.exists() {
                        continue;
                    }
                    let rec: RleRecord = read_json(&file)?;
                    if rec.size != [img.height, img.width] {
                        return Err(CocoError::Semantic(format!(
                            "{}: size {:?} does not match image {}x{}",
                            file.display(),
                            rec.size,
                            img.height,
                            img.width
                        )));
                    }
                    *m = rec.to_mask()?;
                }
            }
        }
        out.insert(img.id, set);
    }
    Ok(out)
}

/// Writes `<dir>/<image_id>/<category_id>.json` for every mask in every set.
pub fn write_semantic_masks<'a>(
    sets: impl IntoIterator<Item = &'a SemanticMaskSet>,
    dir: &Path,
) -> Result<()> {
    for set in sets {
        for (cat, m) in &set.masks {
            let file = dir
                .join(set.image_id.to_string())
                .join(format!("{cat}.json"));
            write_json(&file, &RleRecord::compressed(m))?;
        }
    }
    Ok(())
}
