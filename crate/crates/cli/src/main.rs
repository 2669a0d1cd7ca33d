use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hedgeval::bench::bench_nms;
use hedgeval::coco::{self, Dataset, DetectionSet, SemanticMaskSet, SemanticSource};
use hedgeval::eval::{evaluate, pr_curve, EvalConfig, Metric, MetricReport};
use hedgeval::hedging::DcConfig;
use hedgeval::nms::{run_nms, Decay, NmsConfig, NmsMethod, SemanticScore};
use hedgeval::pr::coco_iou_thresholds;
use hedgeval::synth::{generate, perfect_detector, HedgeConfig, SynthConfig};
use hedgeval::ImageId;

#[derive(Parser)]
#[command(
    name = "hedgeval",
    version,
    about = "Instance-segmentation evaluation beyond AP"
)]
struct Cli {
    /// Worker threads for image-parallel work (default: all cores).
    #[arg(long, global = true, env = "HEDGEVAL_THREADS")]
    threads: Option<usize>,
    /// Seed for every random choice the command makes.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Log progress to standard error.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score detections against ground truth and write a JSON report.
    Eval(EvalArgs),
    /// Filter a detection file with one of the NMS methods.
    Nms(NmsArgs),
    /// Generate a synthetic part-counting dataset.
    Synth(SynthArgs),
    /// Write a precision/recall curve as CSV.
    Prcurve(PrcurveArgs),
    /// Time mask NMS against semantic NMS on growing duplicate scenes.
    BenchNms(BenchArgs),
}

#[derive(Args)]
struct SemanticArgs {
    /// Semantic masks: a directory, `derive-from-gt` or `derive-from-dt`.
    #[arg(long)]
    semantic: Option<String>,
    /// Score a detection needs to contribute to `derive-from-dt` masks.
    #[arg(long, default_value_t = 0.5)]
    semantic_min_score: f64,
    /// Fraction of a detection's pixels that must still be unclaimed.
    #[arg(long, default_value_t = 0.5)]
    occupancy_thr: f64,
    /// Score written on detections kept by semantic NMS.
    #[arg(long, value_enum, default_value_t = ScoreMode::Averaged)]
    score_mode: ScoreMode,
}

impl SemanticArgs {
    fn source(&self) -> Option<SemanticSource> {
        self.semantic.as_deref().map(|s| match s {
            "derive-from-gt" => SemanticSource::DeriveFromGt,
            "derive-from-dt" => SemanticSource::DeriveFromDt {
                min_score: self.semantic_min_score,
            },
            dir => SemanticSource::Directory(PathBuf::from(dir)),
        })
    }
}

#[derive(Args)]
struct EvalArgs {
    /// COCO ground-truth annotations.
    #[arg(long)]
    gt: PathBuf,
    /// COCO results file.
    #[arg(long)]
    dt: PathBuf,
    /// Report destination (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics to compute.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "ap,map,f1,dc,ne,lrp,fp-tp-curve"
    )]
    metrics: Vec<Metric>,
    /// IoU thresholds for AP (default 0.50:0.05:0.95).
    #[arg(long, value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,
    #[arg(long, default_value_t = 100)]
    max_dets: usize,
    #[arg(long, default_value_t = 0.5)]
    f1_iou: f64,
    /// Confidence cutoff for F1 and fixed-cutoff LRP.
    #[arg(long, default_value_t = 0.0)]
    min_score: f64,
    #[arg(long, default_value_t = 0.5)]
    lrp_iou: f64,
    #[arg(long, default_value_t = 0.5)]
    fp_tp_iou: f64,
    /// Recall bins of the FP:TP curve (default 0.1:0.1:1.0).
    #[arg(long, value_delimiter = ',')]
    recall_bins: Option<Vec<f64>>,
    /// DC IoU thresholds (default 0.50:0.05:0.95).
    #[arg(long, value_delimiter = ',')]
    dc_iou_thresholds: Option<Vec<f64>>,
    /// DC confidence thresholds (default 0.1:0.1:0.9).
    #[arg(long, value_delimiter = ',')]
    dc_conf_thresholds: Option<Vec<f64>>,
    /// Write the FP:TP curve as CSV as well.
    #[arg(long)]
    curve_csv: Option<PathBuf>,
    /// Re-check a random 1% of images with the brute-force oracles.
    #[arg(long)]
    verify: bool,
    /// Leave `generated_at` empty so repeated runs are byte-identical.
    #[arg(long)]
    no_timestamp: bool,
    /// Apply semantic NMS with these masks before scoring.
    #[command(flatten)]
    semantic: SemanticArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Mask,
    Matrix,
    Soft,
    Semantic,
}

#[derive(Clone, Copy, ValueEnum)]
enum DecayArg {
    Gaussian,
    Linear,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScoreMode {
    Averaged,
    Original,
}

impl From<ScoreMode> for SemanticScore {
    fn from(m: ScoreMode) -> Self {
        match m {
            ScoreMode::Averaged => SemanticScore::Averaged,
            ScoreMode::Original => SemanticScore::Original,
        }
    }
}

#[derive(Args)]
struct NmsArgs {
    /// Ground truth, for image sizes, categories and `derive-from-gt`.
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Method::Semantic)]
    method: Method,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    /// Post-NMS score floor (default: 0.05 matrix, 0.001 soft, 0 otherwise).
    #[arg(long)]
    score_floor: Option<f64>,
    #[arg(long, value_enum, default_value_t = DecayArg::Gaussian)]
    decay: DecayArg,
    #[arg(long, default_value_t = 2.0)]
    sigma: f64,
    #[command(flatten)]
    semantic: SemanticArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    images: usize,
    #[arg(long, default_value_t = 10)]
    parts: usize,
    #[arg(long, default_value_t = 256)]
    height: u32,
    #[arg(long, default_value_t = 256)]
    width: u32,
    #[arg(long, default_value_t = 1.0 / 6.0)]
    sigma_frac: f64,
    /// Part length range `lo,hi` in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = [60.0, 60.0])]
    length: Vec<f64>,
    /// Part thickness range `lo,hi` in pixels.
    #[arg(long, value_delimiter = ',', default_values_t = [8.0, 8.0])]
    thickness: Vec<f64>,
    /// Also write ideal detections to this results file.
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Jittered duplicates per ground truth in `--detections`.
    #[arg(long, default_value_t = 0)]
    hedge_copies: usize,
    /// Confidence step between duplicates.
    #[arg(long, default_value_t = 0.01)]
    epsilon: f64,
    /// Probability of an extra wrong-category copy per ground truth.
    #[arg(long, default_value_t = 0.0)]
    category_noise: f64,
}

#[derive(Args)]
struct PrcurveArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    dt: PathBuf,
    /// CSV destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou_thr: f64,
    /// Category id; required when the dataset has several.
    #[arg(long)]
    category: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [100, 400, 1600])]
    sizes: Vec<usize>,
    /// Detections per object.
    #[arg(long, default_value_t = 4)]
    dup: usize,
    /// Timed runs per size and method; the median is reported.
    #[arg(long, default_value_t = 7)]
    runs: usize,
    /// CSV destination (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().context("building the worker pool")?;
    let seed = cli.seed;
    pool.install(|| match cli.command {
        Command::Eval(a) => cmd_eval(a, seed),
        Command::Nms(a) => cmd_nms(a),
        Command::Synth(a) => cmd_synth(a, seed),
        Command::Prcurve(a) => cmd_prcurve(a),
        Command::BenchNms(a) => cmd_bench(a, seed),
    })
}

fn load_inputs(gt: &Path, dt: &Path) -> Result<(Dataset, DetectionSet)> {
    let dataset = coco::load_ground_truth(gt)
        .with_context(|| format!("loading ground truth {}", gt.display()))?;
    let dets = coco::load_detections(dt, &dataset)
        .with_context(|| format!("loading detections {}", dt.display()))?;
    if dets.rejected_score + dets.rejected_empty > 0 {
        log::warn!(
            "skipped {} detections with scores outside [0, 1] and {} with empty masks",
            dets.rejected_score,
            dets.rejected_empty
        );
    }
    log::info!(
        "{} images, {} ground truths, {} detections",
        dataset.images.len(),
        dataset.n_gt(),
        dets.len()
    );
    Ok((dataset, dets))
}

fn semantic_masks(
    args: &SemanticArgs,
    dataset: &Dataset,
    dets: &DetectionSet,
) -> Result<Option<BTreeMap<ImageId, SemanticMaskSet>>> {
    match args.source() {
        None => Ok(None),
        Some(src) => Ok(Some(
            coco::load_semantic_masks(&src, dataset, Some(dets))
                .context("loading semantic masks")?,
        )),
    }
}

fn semantic_nms_config(args: &SemanticArgs) -> NmsConfig {
    NmsConfig {
        method: NmsMethod::Semantic,
        occupancy_thr: args.occupancy_thr,
        semantic_score: args.score_mode.into(),
        ..NmsConfig::default()
    }
}

fn cmd_eval(a: EvalArgs, seed: u64) -> Result<()> {
    let (dataset, mut dets) = load_inputs(&a.gt, &a.dt)?;
    let defaults = EvalConfig::default();
    let dc_defaults = DcConfig::default();
    let cfg = EvalConfig {
        metrics: a.metrics.iter().copied().collect(),
        iou_thresholds: a.iou_thresholds.clone().unwrap_or_else(coco_iou_thresholds),
        max_dets: a.max_dets,
        f1_iou: a.f1_iou,
        min_score: a.min_score,
        lrp_iou: a.lrp_iou,
        fp_tp_iou: a.fp_tp_iou,
        recall_bins: a.recall_bins.clone().unwrap_or(defaults.recall_bins),
        dc: DcConfig {
            iou_thresholds: a
                .dc_iou_thresholds
                .clone()
                .unwrap_or(dc_defaults.iou_thresholds),
            conf_thresholds: a
                .dc_conf_thresholds
                .clone()
                .unwrap_or(dc_defaults.conf_thresholds),
        },
    };
    let mut inputs = BTreeMap::new();
    inputs.insert("ground_truth".to_string(), a.gt.display().to_string());
    inputs.insert("detections".to_string(), a.dt.display().to_string());
    let mut nms = None;
    if let Some(sem) = semantic_masks(&a.semantic, &dataset, &dets)? {
        let ncfg = semantic_nms_config(&a.semantic);
        dets = run_nms(&dets, &ncfg, Some(&sem))?;
        inputs.insert(
            "semantic".to_string(),
            a.semantic.semantic.clone().unwrap_or_default(),
        );
        log::info!("{} detections after semantic NMS", dets.len());
        nms = Some(ncfg);
    }
    let mut report = evaluate(&dataset, &dets, &cfg).map_err(anyhow::Error::msg)?;
    report.inputs = inputs;
    report.nms = nms;
    if !a.no_timestamp {
        let secs = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        report.generated_at = Some(secs.to_string());
    }
    if a.verify {
        report.verify = Some(hedgeval::eval::verify_sample(&dataset, &dets, &cfg, seed));
    }
    if let Some(out) = &a.out {
        coco::write_json(out, &report)?;
    }
    if let Some(path) = &a.curve_csv {
        let curve = report
            .aggregate
            .fp_tp_curve
            .as_ref()
            .context("--curve-csv needs the fp-tp-curve metric")?;
        let mut csv = String::from("recall,fp_tp_ratio\n");
        for (r, v) in curve.recall_bins.iter().zip(&curve.ratios) {
            let _ = writeln!(csv, "{r},{}", v.map_or(String::new(), |v| v.to_string()));
        }
        write_text(path, &csv)?;
    }
    emit(&render_table(&report))?;
    if let Some(v) = &report.verify {
        if !v.passed() {
            bail!(
                "oracle verification failed:\n  {}",
                v.mismatches.join("\n  ")
            );
        }
        emit(&format!(
            "verify: ok ({} images, {} matching, {} AP, {} DC checks)\n",
            v.sampled_images.len(),
            v.match_checks,
            v.ap_checks,
            v.dc_checks
        ))?;
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>, scale: f64) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.4}", v * scale))
}

fn render_table(r: &MetricReport) -> String {
    let mut rows: Vec<[String; 3]> = Vec::new();
    let a = &r.aggregate;
    if let Some(m) = &a.map {
        let t = &m.iou_thresholds;
        let span = format!(
            "iou={:.2}:{:.2} max_dets={}",
            t[0],
            t[t.len() - 1],
            m.max_dets
        );
        rows.push(["mAP".into(), fmt_opt(m.map, 1.0), span.clone()]);
        rows.push([
            "AP50".into(),
            fmt_opt(m.ap50, 1.0),
            format!("iou=0.50 max_dets={}", m.max_dets),
        ]);
        rows.push([
            "AP75".into(),
            fmt_opt(m.ap75, 1.0),
            format!("iou=0.75 max_dets={}", m.max_dets),
        ]);
    }
    if let Some(f) = &a.f1 {
        let cfg = format!("iou={:.2} min_score={}", f.iou_thr, f.min_score);
        rows.push(["F1".into(), format!("{:.4}", f.score.f1), cfg]);
        rows.push([
            "precision".into(),
            format!("{:.4}", f.score.precision),
            String::new(),
        ]);
        rows.push([
            "recall".into(),
            format!("{:.4}", f.score.recall),
            String::new(),
        ]);
    }
    if let Some(d) = &a.dc {
        let cfg = format!(
            "{}x{} grid, iou {:.2}..{:.2}, conf {:.1}..{:.1}",
            d.iou_thresholds.len(),
            d.conf_thresholds.len(),
            d.iou_thresholds[0],
            d.iou_thresholds[d.iou_thresholds.len() - 1],
            d.conf_thresholds[0],
            d.conf_thresholds[d.conf_thresholds.len() - 1]
        );
        rows.push(["DC".into(), format!("{:.4}", d.dc), cfg]);
    }
    if let Some(n) = &a.ne {
        let cfg = format!(
            "iou={:.2} mismatches={} n_gt={}",
            n.iou_thr, n.value.mismatches, n.value.n_gt
        );
        rows.push(["NE".into(), fmt_opt(n.value.ne, 1.0), cfg]);
    }
    if let Some(l) = &a.lrp {
        let cfg = format!("iou={:.2} cutoff={} x100", l.iou_thr, l.cutoff);
        rows.push(["LRP".into(), fmt_opt(l.lrp, 100.0), cfg]);
        rows.push(["LRP_loc".into(), fmt_opt(l.lrp_loc, 100.0), String::new()]);
        rows.push(["LRP_fp".into(), fmt_opt(l.lrp_fp, 100.0), String::new()]);
        rows.push(["LRP_fn".into(), fmt_opt(l.lrp_fn, 100.0), String::new()]);
        rows.push([
            "oLRP".into(),
            fmt_opt(l.olrp, 100.0),
            "best cutoff per category, x100".into(),
        ]);
    }
    let mut out = String::new();
    let w0 = rows.iter().map(|r| r[0].len()).max().unwrap_or(0).max(6);
    let w1 = rows.iter().map(|r| r[1].len()).max().unwrap_or(0).max(5);
    let _ = writeln!(out, "{:<w0$}  {:>w1$}  config", "metric", "value");
    for r in &rows {
        let _ = writeln!(out, "{:<w0$}  {:>w1$}  {}", r[0], r[1], r[2]);
    }
    if let Some(c) = &a.fp_tp_curve {
        let _ = writeln!(out, "\nFP:TP ratio by recall (iou={:.2})", c.iou_thr);
        for (b, v) in c.recall_bins.iter().zip(&c.ratios) {
            let _ = writeln!(out, "  {:>4.2}  {}", b, fmt_opt(*v, 1.0));
        }
    }
    let show_ap = r.per_category.iter().any(|c| c.ap_mean.is_some());
    let show_lrp = r.per_category.iter().any(|c| c.lrp.is_some());
    if show_ap || show_lrp {
        let wn = r
            .per_category
            .iter()
            .map(|c| c.name.len())
            .max()
            .unwrap_or(0)
            .max(4);
        let _ = writeln!(
            out,
            "\n{:>6}  {:<wn$}  {:>6}  {:>6}  {:>7}  {:>7}",
            "id", "name", "n_gt", "n_det", "AP", "LRP"
        );
        for c in &r.per_category {
            let ap = fmt_opt(c.ap_mean.flatten(), 1.0);
            let lrp = fmt_opt(c.lrp.and_then(|l| l.fixed.lrp), 100.0);
            let _ = writeln!(
                out,
                "{:>6}  {:<wn$}  {:>6}  {:>6}  {:>7}  {:>7}",
                c.id, c.name, c.n_gt, c.n_det, ap, lrp
            );
        }
    }
    out
}

fn cmd_nms(a: NmsArgs) -> Result<()> {
    let (dataset, dets) = load_inputs(&a.gt, &a.dt)?;
    let method = match a.method {
        Method::Mask => NmsMethod::Mask,
        Method::Matrix => NmsMethod::Matrix,
        Method::Soft => NmsMethod::Soft,
        Method::Semantic => NmsMethod::Semantic,
    };
    let cfg = NmsConfig {
        method,
        iou_thr: a.iou_thr,
        score_floor: a.score_floor,
        occupancy_thr: a.semantic.occupancy_thr,
        decay: match a.decay {
            DecayArg::Gaussian => Decay::Gaussian,
            DecayArg::Linear => Decay::Linear,
        },
        sigma: a.sigma,
        semantic_score: a.semantic.score_mode.into(),
    };
    let sem = if method == NmsMethod::Semantic {
        if a.semantic.semantic.is_none() {
            bail!("--method semantic needs --semantic <dir|derive-from-gt|derive-from-dt>");
        }
        semantic_masks(&a.semantic, &dataset, &dets)?
    } else {
        None
    };
    let kept = run_nms(&dets, &cfg, sem.as_ref())?;
    coco::write_detections(&kept, &a.out)?;
    emit(&format!(
        "{} of {} detections kept -> {}\n",
        kept.len(),
        dets.len(),
        a.out.display()
    ))
}

fn range_pair(name: &str, v: &[f64]) -> Result<[f64; 2]> {
    match v {
        [lo, hi] => Ok([*lo, *hi]),
        _ => bail!("--{name} takes two values `lo,hi`, got {}", v.len()),
    }
}

fn cmd_synth(a: SynthArgs, seed: u64) -> Result<()> {
    let cfg = SynthConfig {
        n_images: a.images,
        parts_per_image: a.parts,
        height: a.height,
        width: a.width,
        sigma_frac: a.sigma_frac,
        length: range_pair("length", &a.length)?,
        thickness: range_pair("thickness", &a.thickness)?,
        seed,
    };
    let synth = generate(&cfg)?;
    synth.write(&a.out)?;
    emit(&format!(
        "{} images, {} parts -> {}\n",
        synth.dataset.images.len(),
        synth.dataset.n_gt(),
        a.out.display()
    ))?;
    if let Some(path) = &a.detections {
        let hedge = HedgeConfig {
            spatial_copies: a.hedge_copies,
            epsilon: a.epsilon,
            category_noise_rate: a.category_noise,
            seed,
        };
        let dets = perfect_detector(&synth.dataset, &hedge)?;
        coco::write_detections(&dets, path)?;
        emit(&format!(
            "{} detections -> {}\n",
            dets.len(),
            path.display()
        ))?;
    }
    Ok(())
}

fn cmd_prcurve(a: PrcurveArgs) -> Result<()> {
    let (dataset, dets) = load_inputs(&a.gt, &a.dt)?;
    let category = match a.category {
        Some(c) => {
            if dataset.category(c).is_none() {
                bail!("category {c} is not in the ground truth");
            }
            Some(c)
        }
        None => {
            let cats: Vec<u64> = dataset.category_ids().collect();
            if cats.len() > 1 {
                bail!(
                    "the dataset has {} categories; pick one with --category",
                    cats.len()
                );
            }
            cats.first().copied()
        }
    };
    let curve = pr_curve(&dataset, &dets, category, a.iou_thr);
    let mut csv = String::from("rank,confidence,is_tp,precision,recall\n");
    for (i, p) in curve.points.iter().enumerate() {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            i + 1,
            p.confidence,
            u8::from(p.is_tp),
            p.precision,
            p.recall
        );
    }
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => emit(&csv),
    }
}

fn cmd_bench(a: BenchArgs, seed: u64) -> Result<()> {
    if a.sizes.is_empty() || a.sizes.contains(&0) {
        bail!("--sizes must list positive detection counts");
    }
    if a.runs < 5 {
        log::warn!("fewer than 5 runs per point makes medians noisy");
    }
    let rows = bench_nms(&a.sizes, a.dup, a.runs, seed);
    let mut csv = String::from("n,method,seconds\n");
    for r in &rows {
        let _ = writeln!(csv, "{},{},{:.9}", r.n, r.method, r.seconds);
    }
    match &a.out {
        Some(path) => write_text(path, &csv),
        None => emit(&csv),
    }
}

/// Writes to standard output; a reader closing the pipe early is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
