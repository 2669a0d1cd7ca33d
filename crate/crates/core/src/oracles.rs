//! Brute-force reference implementations.
//!
//! Nothing here shares code paths with the production metrics: paths are
//! enumerated explicitly, IoU is counted pixel by pixel, and AP is recomputed
//! from the raw TP/FP flags. Only practical for small inputs.

use crate::hedging::DetectionGraph;
use crate::mask::BinaryMask;
use crate::matching::MatchResult;
use crate::pr::recall_thresholds;

fn best_path_bottleneck(
    adj: &[Vec<usize>],
    tau: &[f64],
    at: usize,
    target: usize,
    visited: &mut [bool],
    current_min: f64,
) -> f64 {
    if at == target {
        return current_min;
    }
    let mut best = 0.0f64;
    for &next in &adj[at] {
        if visited[next] {
            continue;
        }
        visited[next] = true;
        let m = current_min.min(tau[next]);
        best = best.max(best_path_bottleneck(adj, tau, next, target, visited, m));
        visited[next] = false;
    }
    best
}

fn reachable_from(adj: &[Vec<usize>], start: usize) -> Vec<bool> {
    let mut seen = vec![false; adj.len()];
    seen[start] = true;
    let mut stack = vec![start];
    while let Some(v) = stack.pop() {
        for &n in &adj[v] {
            if !seen[n] {
                seen[n] = true;
                stack.push(n);
            }
        }
    }
    seen
}

/// `c_ij` by enumerating every simple path; 0 when `i` and `j` are not connected.
pub fn connectivity_bruteforce(g: &DetectionGraph) -> Vec<Vec<f64>> {
    let m = g.len();
    let adj: Vec<Vec<usize>> = (0..m).map(|v| g.neighbors(v).collect()).collect();
    let tau = g.weights();
    let mut c = vec![vec![0.0; m]; m];
    for i in 0..m {
        let reach = reachable_from(&adj, i);
        for j in 0..m {
            if i == j || !reach[j] {
                continue;
            }
            let mut visited = vec![false; m];
            visited[i] = true;
            c[i][j] = best_path_bottleneck(&adj, tau, i, j, &mut visited, tau[i]);
        }
    }
    c
}

/// Duplicate Confusion expanded term by term from path enumeration.
pub fn dc_bruteforce(g: &DetectionGraph) -> f64 {
    let m = g.len();
    if m == 0 {
        return 0.0;
    }
    let c = connectivity_bruteforce(g);
    let tau = g.weights();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += tau[j] * c[i][j] / tau[i];
            }
        }
    }
    total / m as f64
}

/// Size of the largest connected component.
pub fn largest_component(g: &DetectionGraph) -> usize {
    let m = g.len();
    let mut seen = vec![false; m];
    let mut largest = 0;
    for s in 0..m {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut size = 0;
        while let Some(v) = stack.pop() {
            size += 1;
            for n in g.neighbors(v) {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        largest = largest.max(size);
    }
    largest
}

/// 101-point AP straight from the ranked TP/FP flags.
pub fn ap_naive(flags: &[bool], n_gt: usize) -> Option<f64> {
    if n_gt == 0 {
        return None;
    }
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    for k in 0..flags.len() {
        let tp = flags[..=k].iter().filter(|&&f| f).count();
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / n_gt as f64);
    }
    let mut sum = 0.0;
    for r in recall_thresholds() {
        let mut best = 0.0f64;
        for k in 0..flags.len() {
            if recall[k] >= r {
                best = best.max(precision[k]);
            }
        }
        sum += best;
    }
    Some(sum / 101.0)
}

/// Half-open `(row0, row1, col0, col1)` box of the set pixels; `None` if empty.
fn pixel_box(m: &BinaryMask) -> Option<(u32, u32, u32, u32)> {
    if m.is_empty() {
        return None;
    }
    let [x, y, w, h] = m.bbox();
    Some((y as u32, (y + h) as u32, x as u32, (x + w) as u32))
}

fn iou_by_pixels(
    a: &BinaryMask,
    abox: Option<(u32, u32, u32, u32)>,
    b: &BinaryMask,
    bbox: Option<(u32, u32, u32, u32)>,
) -> f64 {
    // pixels outside both boxes are background in both masks
    let (r0, r1, c0, c1) = match (abox, bbox) {
        (None, None) => return 0.0,
        (Some(p), None) | (None, Some(p)) => p,
        (Some(p), Some(q)) => (p.0.min(q.0), p.1.max(q.1), p.2.min(q.2), p.3.max(q.3)),
    };
    let (mut inter, mut union) = (0u64, 0u64);
    for row in r0..r1 {
        for col in c0..c1 {
            let (x, y) = (a.get(row, col), b.get(row, col));
            inter += u64::from(x && y);
            union += u64::from(x || y);
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Literal greedy matching; detections must already be in rank order.
pub fn match_bruteforce(dets: &[&BinaryMask], gts: &[&BinaryMask], iou_thr: f64) -> MatchResult {
    let dboxes: Vec<_> = dets.iter().map(|m| pixel_box(m)).collect();
    let gboxes: Vec<_> = gts.iter().map(|m| pixel_box(m)).collect();
    let mut det_to_gt = vec![None; dets.len()];
    let mut det_iou = vec![0.0; dets.len()];
    let mut gt_to_det: Vec<Option<usize>> = vec![None; gts.len()];
    for (d, dm) in dets.iter().enumerate() {
        let candidates: Vec<(usize, f64)> = gts
            .iter()
            .enumerate()
            .filter(|(g, _)| gt_to_det[*g].is_none())
            .map(|(g, gm)| (g, iou_by_pixels(dm, dboxes[d], gm, gboxes[g])))
            .filter(|&(_, v)| v >= iou_thr)
            .collect();
        let Some(max) = candidates.iter().map(|c| c.1).reduce(f64::max) else {
            continue;
        };
        let (g, v) = *candidates
            .iter()
            .find(|c| c.1 == max)
            .expect("max is present");
        det_to_gt[d] = Some(g);
        det_iou[d] = v;
        gt_to_det[g] = Some(d);
    }
    MatchResult {
        det_to_gt,
        det_iou,
        gt_to_det,
    }
}
