//! Timing harness comparing greedy mask NMS with semantic NMS on scenes of
//! identical duplicates.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::coco::{Detection, SemanticMaskSet};
use crate::mask::BinaryMask;
use crate::nms::{mask_nms, semantic_filter, SemanticScore};

const CELL: u32 = 16;
const SQUARE: u32 = 12;

#[derive(Debug, Clone, PartialEq)]
pub struct BenchScene {
    pub detections: Vec<Detection>,
    pub semantic: SemanticMaskSet,
    pub objects: usize,
}

/// Smallest square image whose 16 px grid holds `objects` squares.
pub fn scene_side(objects: usize) -> u32 {
    let per_row = (objects.max(1) as f64).sqrt().ceil() as u32;
    per_row * CELL
}

/// `n` detections of `n / dup` objects (rounded up), each object emitted
/// `dup` times with identical masks. Originals score in `[0.8, 1.0)`, copy
/// `r` scores `0.01 * r` lower.
pub fn bench_scene(n: usize, dup: usize, side: u32, seed: u64) -> BenchScene {
    let dup = dup.max(1);
    let objects = n.div_ceil(dup);
    let per_row = side / CELL;
    assert!(
        (per_row * per_row) as usize >= objects,
        "{side}px image cannot hold {objects} objects"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut union = BinaryMask::empty(side, side).expect("positive side");
    let mut detections = Vec::with_capacity(n);
    for o in 0..objects as u32 {
        let (r0, c0) = ((o / per_row) * CELL, (o % per_row) * CELL);
        let m = BinaryMask::from_fn(side, side, |r, c| {
            r >= r0 && r < r0 + SQUARE && c >= c0 && c < c0 + SQUARE
        })
        .expect("positive side");
        union.union_in_place(&m).expect("same dims");
        let base: f64 = rng.gen_range(0.8..1.0);
        for r in 0..dup {
            if detections.len() == n {
                break;
            }
            detections.push(Detection {
                image_id: 1,
                category: 1,
                score: base - 0.01 * r as f64,
                mask: m.clone(),
            });
        }
    }
    // interleave objects so the input is not already grouped
    for i in (1..detections.len()).rev() {
        let j = rng.gen_range(0..=i);
        detections.swap(i, j);
    }
    BenchScene {
        detections,
        semantic: SemanticMaskSet {
            image_id: 1,
            height: side,
            width: side,
            masks: [(1, union)].into_iter().collect(),
        },
        objects,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub method: &'static str,
    /// Median over `runs` samples of the per-call time.
    pub seconds: f64,
    pub runs: usize,
    pub kept: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Shortest wall time of one timed sample; faster operations are repeated
/// within a sample and the per-call mean is recorded.
const MIN_SAMPLE_SECONDS: f64 = 0.05;

const METHODS: [&str; 2] = ["mask", "semantic"];

fn run_method(method: usize, scene: &BenchScene) -> usize {
    if method == 0 {
        mask_nms(&scene.detections, 0.5).len()
    } else {
        semantic_filter(
            &scene.detections,
            &scene.semantic,
            0.5,
            SemanticScore::Original,
        )
        .expect("scene masks cover the category")
        .len()
    }
}

/// Times both methods at every size. All sizes share one image size, set by
/// the largest, so per-detection mask cost is constant across sizes.
///
/// Runs are interleaved: each round times every (size, method) pair once, so
/// slow stretches on a shared machine hit all sizes instead of one.
pub fn bench_nms(sizes: &[usize], dup: usize, runs: usize, seed: u64) -> Vec<BenchRow> {
    let runs = runs.max(1);
    let largest = sizes.iter().copied().max().unwrap_or(0);
    let side = scene_side(largest.div_ceil(dup.max(1)));
    let scenes: Vec<BenchScene> = sizes
        .iter()
        .map(|&n| bench_scene(n, dup, side, seed))
        .collect();

    let mut iters = vec![[1usize; 2]; scenes.len()];
    let mut kept = vec![[0usize; 2]; scenes.len()];
    for (s, scene) in scenes.iter().enumerate() {
        for m in 0..METHODS.len() {
            let start = Instant::now();
            kept[s][m] = std::hint::black_box(run_method(m, scene));
            let warmup = start.elapsed().as_secs_f64().max(1e-9);
            iters[s][m] = (MIN_SAMPLE_SECONDS / warmup).ceil().max(1.0) as usize;
        }
    }

    let mut samples = vec![[Vec::with_capacity(runs), Vec::with_capacity(runs)]; scenes.len()];
    for _ in 0..runs {
        for (s, scene) in scenes.iter().enumerate() {
            for m in 0..METHODS.len() {
                let start = Instant::now();
                for _ in 0..iters[s][m] {
                    std::hint::black_box(run_method(m, scene));
                }
                samples[s][m].push(start.elapsed().as_secs_f64() / iters[s][m] as f64);
            }
        }
    }

    let mut rows = Vec::new();
    for (s, &n) in sizes.iter().enumerate() {
        for (m, method) in METHODS.iter().enumerate() {
            rows.push(BenchRow {
                n,
                method,
                seconds: median(std::mem::take(&mut samples[s][m])),
                runs,
                kept: kept[s][m],
            });
        }
    }
    rows
}
