//! Hedging measures: Duplicate Confusion (spatial hedging) and Naming Error
//! (category hedging).
//!
//! Duplicate Confusion builds, for every image and category, a graph whose
//! vertices are detections and whose edges join pairs with mask IoU at or
//! above `t`. The connectivity `c_ij` of two detections is the best
//! "weakest link" confidence over all paths between them, and
//!
//! ```text
//! DC_tv = 1/m * sum_i sum_{j != i} tau_j * c_ij / tau_i
//! ```
//!
//! averaged over a grid of IoU thresholds `t` and confidence floors `v`.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::Serialize;

use crate::coco::{CategoryId, Dataset, Detection, DetectionSet, ImageId};
use crate::mask::BinaryMask;
use crate::matching::agnostic_match;

/// Undirected overlap graph over the detections of one image and category.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionGraph {
    weights: Vec<f64>,
    adjacency: Vec<Vec<bool>>,
}

impl DetectionGraph {
    /// # Panics
    /// On self-loops or out-of-range vertex indices.
    pub fn new(weights: Vec<f64>, edges: &[(usize, usize)]) -> Self {
        let m = weights.len();
        let mut adjacency = vec![vec![false; m]; m];
        for &(a, b) in edges {
            assert!(a != b, "self-edge on vertex {a}");
            assert!(a < m && b < m, "edge ({a}, {b}) out of range");
            adjacency[a][b] = true;
            adjacency[b][a] = true;
        }
        Self { weights, adjacency }
    }

    /// Joins every pair whose IoU is at least `iou_thr`.
    pub fn from_masks(masks: &[&BinaryMask], weights: Vec<f64>, iou_thr: f64) -> Self {
        assert_eq!(masks.len(), weights.len());
        let pairwise = PairwiseIou::compute(masks);
        let all: Vec<usize> = (0..masks.len()).collect();
        pairwise.graph(&all, &weights, iou_thr)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.adjacency[a][b]
    }

    pub fn neighbors(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency[v]
            .iter()
            .enumerate()
            .filter_map(|(j, &e)| e.then_some(j))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).flat_map(move |a| {
            ((a + 1)..self.len()).filter_map(move |b| self.adjacency[a][b].then_some((a, b)))
        })
    }
}

/// Upper-triangular IoU cache among the detections of one cell.
#[derive(Debug, Clone)]
pub struct PairwiseIou {
    n: usize,
    data: Vec<f64>,
}

impl PairwiseIou {
    pub fn compute(masks: &[&BinaryMask]) -> Self {
        let n = masks.len();
        let mut data = vec![0.0; n * n];
        for a in 0..n {
            for b in (a + 1)..n {
                let v = masks[a].iou_unchecked(masks[b]);
                data[a * n + b] = v;
                data[b * n + a] = v;
            }
        }
        Self { n, data }
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.data[a * self.n + b]
    }

    /// Graph over the vertex subset `keep` (indices into the cached masks).
    pub fn graph(&self, keep: &[usize], weights: &[f64], iou_thr: f64) -> DetectionGraph {
        let mut edges = Vec::new();
        for (i, &a) in keep.iter().enumerate() {
            for (j, &b) in keep.iter().enumerate().skip(i + 1) {
                if self.get(a, b) >= iou_thr {
                    edges.push((i, j));
                }
            }
        }
        DetectionGraph::new(keep.iter().map(|&k| weights[k]).collect(), &edges)
    }
}

/// Symmetric all-pairs connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Connectivity {
    n: usize,
    data: Vec<f64>,
}

impl Connectivity {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }
}

struct Components {
    parent: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl Components {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            members: (0..n).map(|v| vec![v]).collect(),
        }
    }

    fn find(&mut self, mut v: usize) -> usize {
        while self.parent[v] != v {
            self.parent[v] = self.parent[self.parent[v]];
            v = self.parent[v];
        }
        v
    }
}

/// Maximum-bottleneck connectivity for every pair of vertices.
///
/// A path's bottleneck is the smallest vertex weight on it, endpoints
/// included, which equals the smallest edge strength `min(tau_u, tau_v)`
/// along it. Adding edges in decreasing strength (Kruskal on a maximum
/// spanning forest) means the edge that first joins two components is the
/// best achievable bottleneck for every pair it connects. Unconnected pairs
/// get 0; the diagonal holds each vertex's own weight.
pub fn bottleneck_connectivity(g: &DetectionGraph) -> Connectivity {
    let n = g.len();
    let tau = g.weights();
    let mut data = vec![0.0; n * n];
    for (i, &t) in tau.iter().enumerate() {
        data[i * n + i] = t;
    }
    let mut edges: Vec<(f64, usize, usize)> =
        g.edges().map(|(a, b)| (tau[a].min(tau[b]), a, b)).collect();
    edges.sort_by(|x, y| y.0.total_cmp(&x.0));

    let mut comps = Components::new(n);
    for (w, a, b) in edges {
        let (ra, rb) = (comps.find(a), comps.find(b));
        if ra == rb {
            continue;
        }
        let (big, small) = if comps.members[ra].len() >= comps.members[rb].len() {
            (ra, rb)
        } else {
            (rb, ra)
        };
        let moved = std::mem::take(&mut comps.members[small]);
        for &x in &moved {
            for &y in &comps.members[big] {
                data[x * n + y] = w;
                data[y * n + x] = w;
            }
        }
        comps.members[big].extend(moved);
        comps.parent[small] = big;
    }
    Connectivity { n, data }
}

/// Duplicate Confusion of one graph; 0 for an empty graph.
///
/// All weights must be positive.
pub fn dc_single(g: &DetectionGraph) -> f64 {
    let m = g.len();
    if m == 0 {
        return 0.0;
    }
    let c = bottleneck_connectivity(g);
    let tau = g.weights();
    let mut total = 0.0;
    for i in 0..m {
        let mut row = 0.0;
        for j in 0..m {
            if j != i {
                row += tau[j] * c.get(i, j);
            }
        }
        total += row / tau[i];
    }
    total / m as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcConfig {
    pub iou_thresholds: Vec<f64>,
    pub conf_thresholds: Vec<f64>,
}

impl Default for DcConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: crate::pr::coco_iou_thresholds(),
            conf_thresholds: crate::pr::linspace(0.1, 0.9, 9),
        }
    }
}

impl DcConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.iou_thresholds.is_empty() || self.conf_thresholds.is_empty() {
            return Err("DC threshold grids must be non-empty".into());
        }
        for &t in self.iou_thresholds.iter().chain(&self.conf_thresholds) {
            if !(t > 0.0 && t < 1.0) {
                return Err(format!("DC threshold {t} must lie in (0, 1)"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DcReport {
    /// Mean of `grid` over every `(t, v)` entry.
    pub dc: f64,
    /// `grid[t][v]`: mean DC over (image, category) cells with at least one
    /// detection at confidence `>= v`; 0 when there are no such cells.
    #[serde(rename = "dc_grid")]
    pub grid: Vec<Vec<f64>>,
    /// Number of non-empty cells behind each grid entry.
    #[serde(rename = "dc_cells")]
    pub cells: Vec<Vec<usize>>,
    pub iou_thresholds: Vec<f64>,
    pub conf_thresholds: Vec<f64>,
}

fn group_cells(dets: &DetectionSet) -> Vec<Vec<&Detection>> {
    let mut cells: BTreeMap<(ImageId, CategoryId), Vec<&Detection>> = BTreeMap::new();
    for d in dets.iter() {
        cells.entry((d.image_id, d.category)).or_default().push(d);
    }
    cells.into_values().collect()
}

/// Per-cell DC values for every `(t, v)`, `None` where no detection survives `v`.
fn cell_grid(cell: &[&Detection], cfg: &DcConfig) -> Vec<Vec<Option<f64>>> {
    let masks: Vec<&BinaryMask> = cell.iter().map(|d| &d.mask).collect();
    let weights: Vec<f64> = cell.iter().map(|d| d.score).collect();
    let pairwise = PairwiseIou::compute(&masks);
    cfg.iou_thresholds
        .iter()
        .map(|&t| {
            cfg.conf_thresholds
                .iter()
                .map(|&v| {
                    let keep: Vec<usize> = (0..cell.len()).filter(|&k| weights[k] >= v).collect();
                    (!keep.is_empty()).then(|| dc_single(&pairwise.graph(&keep, &weights, t)))
                })
                .collect()
        })
        .collect()
}

pub fn duplicate_confusion(dets: &DetectionSet, cfg: &DcConfig) -> DcReport {
    let cells = group_cells(dets);
    let per_cell: Vec<Vec<Vec<Option<f64>>>> =
        cells.par_iter().map(|c| cell_grid(c, cfg)).collect();
    let (nt, nv) = (cfg.iou_thresholds.len(), cfg.conf_thresholds.len());
    let mut sums = vec![vec![0.0; nv]; nt];
    let mut counts = vec![vec![0usize; nv]; nt];
    for cell in &per_cell {
        for ti in 0..nt {
            for vi in 0..nv {
                if let Some(v) = cell[ti][vi] {
                    sums[ti][vi] += v;
                    counts[ti][vi] += 1;
                }
            }
        }
    }
    let grid: Vec<Vec<f64>> = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| {
            s.iter()
                .zip(c)
                .map(|(&s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
                .collect()
        })
        .collect();
    let dc = grid.iter().flatten().sum::<f64>() / (nt * nv) as f64;
    DcReport {
        dc,
        grid,
        cells: counts,
        iou_thresholds: cfg.iou_thresholds.clone(),
        conf_thresholds: cfg.conf_thresholds.clone(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamingError {
    /// `None` when there is no ground truth.
    pub ne: Option<f64>,
    #[serde(rename = "ne_mismatch_count")]
    pub mismatches: usize,
    /// Detections assigned to some ground truth.
    pub assigned: usize,
    pub n_gt: usize,
}

/// Mismatched-label count for one image's detections and ground truths.
pub fn image_label_mismatches(
    det_masks: &[&BinaryMask],
    det_labels: &[CategoryId],
    gt_masks: &[&BinaryMask],
    gt_labels: &[CategoryId],
) -> (usize, usize) {
    let assignment = agnostic_match(det_masks, gt_masks);
    let mut mismatches = 0;
    let mut assigned = 0;
    for (j, g) in assignment.iter().enumerate() {
        if let Some(i) = *g {
            assigned += 1;
            if det_labels[j] != gt_labels[i] {
                mismatches += 1;
            }
        }
    }
    (mismatches, assigned)
}

pub fn naming_error(dataset: &Dataset, dets: &DetectionSet) -> NamingError {
    let ids: Vec<ImageId> = dataset.image_ids().collect();
    let per_image: Vec<(usize, usize)> = ids
        .par_iter()
        .map(|&id| {
            let gts = dataset.gts_for(id);
            let ds = dets.for_image(id);
            let gm: Vec<&BinaryMask> = gts.iter().map(|g| &g.mask).collect();
            let gl: Vec<CategoryId> = gts.iter().map(|g| g.category).collect();
            let dm: Vec<&BinaryMask> = ds.iter().map(|d| &d.mask).collect();
            let dl: Vec<CategoryId> = ds.iter().map(|d| d.category).collect();
            image_label_mismatches(&dm, &dl, &gm, &gl)
        })
        .collect();
    let mismatches = per_image.iter().map(|p| p.0).sum();
    let assigned = per_image.iter().map(|p| p.1).sum();
    let n_gt = dataset.n_gt();
    NamingError {
        ne: (n_gt > 0).then(|| mismatches as f64 / n_gt as f64),
        mismatches,
        assigned,
        n_gt,
    }
}
