//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use hedgeval::coco::{
    load_semantic_masks, Category, Dataset, Detection, DetectionSet, GroundTruthInstance,
    ImageInfo, SemanticSource,
};
use hedgeval::eval::{evaluate, EvalConfig, Metric, MetricReport};
use hedgeval::hedging::{bottleneck_connectivity, dc_single, naming_error, DetectionGraph};
use hedgeval::lrp::lrp_from_matches;
use hedgeval::mask::{compress, decode, decompress, encode, BinaryMask};
use hedgeval::nms::{run_nms, NmsConfig};
use hedgeval::oracles::dc_bruteforce;
use hedgeval::pr::{area_under_curve, average_precision, build_pr_curve, RankedDetection};
use hedgeval::synth::{generate, perfect_detector, HedgeConfig, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_hedgeval")
}

fn synth_100() -> Dataset {
    generate(&SynthConfig {
        n_images: 100,
        seed: 42,
        ..Default::default()
    })
    .expect("synth generation")
    .dataset
}

fn hedged(ds: &Dataset, k: usize) -> DetectionSet {
    perfect_detector(
        ds,
        &HedgeConfig {
            spatial_copies: k,
            ..Default::default()
        },
    )
    .expect("hedged detections")
}

fn metrics(ms: &[Metric]) -> EvalConfig {
    EvalConfig {
        metrics: ms.iter().copied().collect(),
        ..Default::default()
    }
}

fn map_of(r: &MetricReport) -> f64 {
    r.aggregate
        .map
        .as_ref()
        .and_then(|m| m.map)
        .expect("map computed")
}

fn toy_curve(fp_first: bool) -> hedgeval::pr::PrCurve {
    let mut flags = vec![true; 9];
    if fp_first {
        flags.insert(0, false);
    } else {
        flags.push(false);
    }
    let dets = flags
        .iter()
        .enumerate()
        .map(|(i, &is_tp)| RankedDetection {
            score: 1.0 - 0.05 * i as f64,
            is_tp,
        })
        .collect();
    build_pr_curve(dets, 10, None, 0.5)
}

fn toy_ap() -> Outcome {
    let first = toy_curve(true);
    let last = toy_curve(false);
    let (ap_first, ap_last) = (
        average_precision(&first).unwrap(),
        average_precision(&last).unwrap(),
    );
    // 91 of the 101 recall samples lie at or below the final recall of 0.9
    ensure!(
        (ap_first - 0.9 * 91.0 / 101.0).abs() < 1e-12,
        "FP first: 101-point AP {ap_first}"
    );
    ensure!(
        (ap_last - 91.0 / 101.0).abs() < 1e-12,
        "FP last: 101-point AP {ap_last}"
    );
    ensure!(
        format!("{ap_first:.2}") == "0.81" && format!("{ap_last:.2}") == "0.90",
        "two-decimal values {ap_first:.2} / {ap_last:.2}"
    );
    let (area_first, area_last) = (
        area_under_curve(&first).unwrap(),
        area_under_curve(&last).unwrap(),
    );
    ensure!(
        (area_first - 0.81).abs() < 1e-12,
        "FP first: area {area_first}"
    );
    ensure!(
        (area_last - 0.90).abs() < 1e-12,
        "FP last: area {area_last}"
    );
    Ok(format!(
        "101-point AP {ap_first:.6} / {ap_last:.6} (0.81 / 0.90 at two decimals); area under curve {area_first:.2} / {area_last:.2}"
    ))
}

fn hedging_invariance() -> Outcome {
    let ds = synth_100();
    let cfg = metrics(&[Metric::Map, Metric::F1, Metric::Dc]);
    let clean = evaluate(&ds, &hedged(&ds, 0), &cfg)?;
    let hedge = evaluate(&ds, &hedged(&ds, 5), &cfg)?;
    let dc = |r: &MetricReport| r.aggregate.dc.as_ref().unwrap().dc;
    let f1 = |r: &MetricReport| r.aggregate.f1.as_ref().unwrap().score.f1;
    ensure!(map_of(&clean) == 1.0, "perfect mAP {}", map_of(&clean));
    ensure!(map_of(&hedge) == 1.0, "hedged mAP {}", map_of(&hedge));
    ensure!(dc(&clean) == 0.0, "perfect DC {}", dc(&clean));
    ensure!(dc(&hedge) > 0.0, "hedged DC {}", dc(&hedge));
    ensure!(f1(&hedge) < 0.5, "hedged F1 {}", f1(&hedge));
    Ok(format!(
        "{} GT; mAP 1.0 -> {}, DC {} -> {:.4}, F1 {} -> {:.4}",
        ds.n_gt(),
        map_of(&hedge),
        dc(&clean),
        dc(&hedge),
        f1(&clean),
        f1(&hedge)
    ))
}

fn random_graph(rng: &mut ChaCha8Rng) -> DetectionGraph {
    let m = rng.gen_range(1..=8);
    let density: f64 = rng.gen();
    let weights: Vec<f64> = (0..m).map(|_| rng.gen_range(0.05..=1.0)).collect();
    let mut edges = Vec::new();
    for a in 0..m {
        for b in a + 1..m {
            if rng.gen_bool(density) {
                edges.push((a, b));
            }
        }
    }
    DetectionGraph::new(weights, &edges)
}

fn dc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let g = random_graph(&mut rng);
        let diff = (dc_single(&g) - dc_bruteforce(&g)).abs();
        ensure!(diff <= 1e-9, "trial {trial}: |dc - oracle| = {diff}");
        worst = worst.max(diff);
    }
    let k3 = DetectionGraph::new(vec![0.9, 0.6, 0.3], &[(0, 1), (0, 2), (1, 2)]);
    let c = bottleneck_connectivity(&k3);
    ensure!(
        (c.get(0, 1), c.get(0, 2), c.get(1, 2)) == (0.6, 0.3, 0.3),
        "complete-3 connectivity"
    );
    let k3_dc = dc_single(&k3);
    ensure!((k3_dc - 3.05 / 3.0).abs() < 1e-12, "complete-3 DC {k3_dc}");
    ensure!(
        (dc_bruteforce(&k3) - 3.05 / 3.0).abs() < 1e-12,
        "complete-3 oracle"
    );
    let chain = DetectionGraph::new(vec![0.9, 0.2, 0.8], &[(0, 1), (1, 2)]);
    let c13 = bottleneck_connectivity(&chain).get(0, 2);
    ensure!(c13 == 0.2, "chain c13 {c13}");
    Ok(format!(
        "1000 graphs, max |diff| {worst:.1e}; complete-3 DC {k3_dc:.4}; chain c13 {c13}"
    ))
}

fn square(r0: u32, c0: u32) -> BinaryMask {
    BinaryMask::from_fn(32, 32, |r, c| {
        r >= r0 && r < r0 + 6 && c >= c0 && c < c0 + 6
    })
    .unwrap()
}

fn ne_scene(n_gt: usize, dets: Vec<(usize, u64)>, extra_fp: usize) -> (Dataset, DetectionSet) {
    let img = ImageInfo {
        id: 1,
        height: 32,
        width: 32,
        file_name: None,
    };
    let cats = vec![
        Category {
            id: 1,
            name: "a".into(),
            supercategory: None,
        },
        Category {
            id: 2,
            name: "b".into(),
            supercategory: None,
        },
    ];
    let pos = |i: usize| square((i / 4) as u32 * 8, (i % 4) as u32 * 8);
    let gts = (0..n_gt)
        .map(|i| GroundTruthInstance {
            image_id: 1,
            instance_id: i as u64 + 1,
            category: 1,
            mask: pos(i),
        })
        .collect();
    let ds = Dataset::new(vec![img], cats, gts).unwrap();
    let mut out: Vec<Detection> = dets
        .into_iter()
        .map(|(gt, category)| Detection {
            image_id: 1,
            category,
            score: 0.9,
            mask: pos(gt),
        })
        .collect();
    for _ in 0..extra_fp {
        out.push(Detection {
            image_id: 1,
            category: 2,
            score: 0.5,
            mask: square(26, 26),
        });
    }
    (ds, DetectionSet::from_detections(out))
}

fn naming_error_check() -> Outcome {
    // D1 on G1 correct, D2 on G1 wrong label, D3 matches nothing
    let (ds, dets) = ne_scene(2, vec![(0, 1), (0, 2)], 1);
    let ne = naming_error(&ds, &dets).ne;
    ensure!(ne == Some(0.5), "one mismatch over 2 GTs gave {ne:?}");
    let mut cases = 0;
    for n in 1..=12 {
        for k in 0..=5 {
            let mut d: Vec<(usize, u64)> = (0..n).map(|i| (i, 1)).collect();
            d.extend((0..k).map(|_| (n - 1, 2)));
            let (ds, dets) = ne_scene(n, d, 0);
            let ne = naming_error(&ds, &dets).ne;
            ensure!(ne == Some(k as f64 / n as f64), "k={k} N={n} gave {ne:?}");
            cases += 1;
        }
    }
    Ok(format!(
        "0.5 for the two-GT scene; k/N exact in {cases} scenes"
    ))
}

fn semantic_nms_restores() -> Outcome {
    let synth = generate(&SynthConfig {
        n_images: 100,
        seed: 42,
        ..Default::default()
    })
    .map_err(|e| e.to_string())?;
    let ds = &synth.dataset;
    let dets = hedged(ds, 5);
    let sem =
        load_semantic_masks(&SemanticSource::DeriveFromGt, ds, None).map_err(|e| e.to_string())?;
    let cfg = NmsConfig {
        occupancy_thr: 0.5,
        ..NmsConfig::default()
    };
    let kept = run_nms(&dets, &cfg, Some(&sem)).map_err(|e| e.to_string())?;
    for img in &ds.images {
        let (g, k) = (ds.gts_for(img.id).len(), kept.for_image(img.id).len());
        ensure!(g == k, "image {}: {k} kept for {g} GT", img.id);
    }
    let r = evaluate(ds, &kept, &metrics(&[Metric::F1, Metric::Dc]))?;
    let f1 = r.aggregate.f1.as_ref().unwrap().score.f1;
    let dc = r.aggregate.dc.as_ref().unwrap().dc;
    ensure!(f1 == 1.0, "F1 {f1}");
    ensure!(dc == 0.0, "DC {dc}");
    Ok(format!(
        "{} -> {} detections, F1 {f1}, DC {dc}",
        dets.len(),
        kept.len()
    ))
}

fn nms_scaling() -> Outcome {
    let out = Command::new(bin())
        .args([
            "bench-nms",
            "--sizes",
            "100,400,1600",
            "--dup",
            "4",
            "--runs",
            "7",
            "--seed",
            "0",
        ])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        out.status.success(),
        "bench-nms failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let csv = String::from_utf8_lossy(&out.stdout);
    let mut t = std::collections::BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        t.insert(
            (f[1].to_string(), f[0].parse::<usize>().unwrap()),
            f[2].parse::<f64>().unwrap(),
        );
    }
    let g = |m: &str, a: usize, b: usize| t[&(m.to_string(), b)] / t[&(m.to_string(), a)];
    let mut notes = Vec::new();
    for (a, b) in [(100, 400), (400, 1600)] {
        let (gm, gs) = (g("mask", a, b), g("semantic", a, b));
        // quadratic growth is 16x per 4x n; +-50% gives [8, 24]
        ensure!(
            (8.0..=24.0).contains(&gm),
            "mask NMS grew {gm:.2}x from {a} to {b}"
        );
        ensure!(gs <= 6.0, "semantic NMS grew {gs:.2}x from {a} to {b}");
        notes.push(format!("{a}->{b}: mask {gm:.1}x, semantic {gs:.1}x"));
    }
    let speedup = t[&("mask".to_string(), 1600)] / t[&("semantic".to_string(), 1600)];
    ensure!(
        speedup >= 3.0,
        "semantic only {speedup:.2}x faster at n=1600"
    );
    Ok(format!(
        "{}; {speedup:.1}x faster at 1600",
        notes.join(", ")
    ))
}

fn rle_interop() -> Outcome {
    let text = include_str!("../../core/tests/fixtures/rle_fixtures.json");
    let fixtures: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
    let list = fixtures.as_array().ok_or("fixture file is not a list")?;
    ensure!(list.len() >= 5, "only {} fixtures", list.len());
    for f in list {
        let name = f["name"].as_str().unwrap();
        let (h, w) = (
            f["height"].as_u64().unwrap() as u32,
            f["width"].as_u64().unwrap() as u32,
        );
        let s = f["counts_string"].as_str().unwrap();
        let rows: Vec<&str> = f["rows"]
            .as_array()
            .unwrap()
            .iter()
            .map(|r| r.as_str().unwrap())
            .collect();
        let pixels = BinaryMask::from_rows(&rows).map_err(|e| e.to_string())?;
        let decoded = decode(&decompress(s, h, w).map_err(|e| format!("{name}: {e}"))?);
        ensure!(decoded == pixels, "{name}: decoded pixels differ");
        let encoded = compress(&encode(&pixels));
        ensure!(encoded == s, "{name}: encoded {encoded:?}, reference {s:?}");
    }
    Ok(format!(
        "{} reference strings decode and re-encode exactly",
        list.len()
    ))
}

fn lrp_checks() -> Outcome {
    let perfect = lrp_from_matches(&[1.0, 1.0, 1.0], 0, 0, 0.5);
    ensure!(
        perfect.lrp == Some(0.0)
            && perfect.lrp_loc == Some(0.0)
            && perfect.lrp_fp == Some(0.0)
            && perfect.lrp_fn == Some(0.0),
        "perfect detections {perfect:?}"
    );
    let none = lrp_from_matches(&[], 0, 5, 0.5);
    ensure!(
        none.lrp == Some(1.0) && none.lrp_fn == Some(1.0),
        "no detections {none:?}"
    );
    let mixed = lrp_from_matches(&[0.75], 1, 0, 0.5);
    ensure!(
        mixed.lrp == Some(0.75),
        "1 TP at 0.75 + 1 FP gave {:?}",
        mixed.lrp
    );

    let ds = synth_100();
    let cfg = metrics(&[Metric::Map, Metric::Lrp]);
    let mut notes = Vec::new();
    for k in [0, 5] {
        let base = hedged(&ds, k);
        let lowest = base.iter().map(|d| d.score).fold(f64::INFINITY, f64::min);
        let mut extra: Vec<Detection> = base.iter().cloned().collect();
        extra.push(Detection {
            image_id: 1,
            category: 1,
            score: lowest / 2.0,
            mask: BinaryMask::from_fn(256, 256, |r, c| r < 3 && c < 3).unwrap(),
        });
        let appended = DetectionSet::from_detections(extra);
        let (a, b) = (evaluate(&ds, &base, &cfg)?, evaluate(&ds, &appended, &cfg)?);
        let lrp = |r: &MetricReport| r.aggregate.lrp.as_ref().unwrap().lrp.unwrap();
        ensure!(lrp(&b) > lrp(&a), "k={k}: LRP {} -> {}", lrp(&a), lrp(&b));
        ensure!(
            map_of(&b) == map_of(&a),
            "k={k}: mAP {} -> {}",
            map_of(&a),
            map_of(&b)
        );
        notes.push(format!(
            "k={k}: LRP {:.6} -> {:.6}, mAP {}",
            lrp(&a),
            lrp(&b),
            map_of(&b)
        ));
    }
    Ok(format!("worked examples exact; {}", notes.join("; ")))
}

fn run_eval(dir: &Path, threads: &str, out: &str) -> Result<String, String> {
    let o = Command::new(bin())
        .current_dir(dir)
        .args([
            "eval",
            "--gt",
            "syn/annotations.json",
            "--dt",
            "hedged.json",
            "--out",
            out,
            "--threads",
            threads,
        ])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        o.status.success(),
        "eval --threads {threads}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    Ok(String::from_utf8_lossy(&o.stdout).into_owned())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let o = Command::new(bin())
        .current_dir(dir)
        .args(["synth", "--out", "syn", "--images", "100", "--seed", "42"])
        .args(["--detections", "hedged.json", "--hedge-copies", "3"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(
        o.status.success(),
        "synth: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    let table1 = run_eval(dir, "1", "r1.json")?;
    let table8 = run_eval(dir, "8", "r8.json")?;
    ensure!(table1 == table8, "stdout tables differ");
    let load = |f: &str| -> Result<serde_json::Value, String> {
        let text = std::fs::read_to_string(dir.join(f)).map_err(|e| e.to_string())?;
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
        v.as_object_mut()
            .ok_or("report is not an object")?
            .remove("generated_at");
        Ok(v)
    };
    let (r1, r8) = (load("r1.json")?, load("r8.json")?);
    let (s1, s8) = (r1.to_string(), r8.to_string());
    ensure!(s1 == s8, "reports differ outside generated_at");
    Ok(format!(
        "reports identical apart from the timestamp ({} bytes)",
        s1.len()
    ))
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    check: fn() -> Outcome,
}

fn main() {
    let criteria = [
        Criterion {
            id: 1,
            name: "toy AP reproduction",
            budget: Duration::from_secs(1),
            check: toy_ap,
        },
        Criterion {
            id: 2,
            name: "AP is blind to hedging",
            budget: Duration::from_secs(60),
            check: hedging_invariance,
        },
        Criterion {
            id: 3,
            name: "DC matches path enumeration",
            budget: Duration::from_secs(60),
            check: dc_oracle,
        },
        Criterion {
            id: 4,
            name: "naming error formula",
            budget: Duration::from_secs(1),
            check: naming_error_check,
        },
        Criterion {
            id: 5,
            name: "semantic NMS removes hedging",
            budget: Duration::from_secs(60),
            check: semantic_nms_restores,
        },
        Criterion {
            id: 6,
            name: "NMS complexity scaling",
            budget: Duration::from_secs(300),
            check: nms_scaling,
        },
        Criterion {
            id: 7,
            name: "RLE interop",
            budget: Duration::from_secs(60),
            check: rle_interop,
        },
        Criterion {
            id: 8,
            name: "LRP formula and FP sensitivity",
            budget: Duration::from_secs(60),
            check: lrp_checks,
        },
        Criterion {
            id: 9,
            name: "thread-count determinism",
            budget: Duration::from_secs(300),
            check: determinism,
        },
    ];
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for c in &criteria {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(c.check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let took = start.elapsed();
        let result = match result {
            Ok(detail) if took > c.budget => {
                Err(format!("{detail}; took {took:.2?}, budget {:?}", c.budget))
            }
            other => other,
        };
        match result {
            Ok(detail) => println!("criterion {} PASS  {} [{took:.2?}]: {detail}", c.id, c.name),
            Err(why) => {
                failed += 1;
                println!("criterion {} FAIL  {} [{took:.2?}]: {why}", c.id, c.name);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
