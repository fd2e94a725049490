//! Command-line interface of the `owl3d` binary.
//!
//! Subcommands wire the pipeline end to end: `ingest-kitti`, `build-bank`,
//! `mix`, `synth`, `eval`, `score`, and `losscheck`. Every report echoes
//! its fully resolved configuration; identical configuration and inputs
//! produce byte-identical reports regardless of worker-thread count.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error.

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use serde_json::{json, Value};
use std::fs;
use std::path::{Path, PathBuf};

use crate::bank::{build_bank, multi_size_mix, LocationPool, ObjectBank, SizePool};
use crate::benchgen::{freeze_benchmark, read_manifest, regenerate_from_manifest, BenchParams};
use crate::error::{Error, Result};
use crate::losses::{
    energy_reg_loss, finite_diff_check, focal_loss, smooth_l1_box_loss, supcon_ood_loss,
    ContrastiveBatch, ContrastiveLabel, LogitBatch, LossConfig,
};
use crate::matching::{match_scene, rank_by_conf, recall_curve, EvalConfig, IouKind};
use crate::ood::{id_score, ood_report, SceneMatches, ScoreKind, ScoreMetric};
use crate::sceneio::{
    ingest_kitti_scene, list_scene_ids, read_annotations, read_detections, read_scene_dir,
    write_scene, Detection, GtObject, SceneDetections, ScoreSpace,
};
use crate::seeding::derive_rng;

#[derive(Parser)]
#[command(
    name = "owl3d",
    about = "Open-world LiDAR 3D detection evaluation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert KITTI velodyne + label + calib files into canonical scenes.
    IngestKitti(IngestArgs),
    /// Extract an object bank from annotated scenes.
    BuildBank(BuildBankArgs),
    /// Multi-size mix: resize every odd-indexed bank entry.
    Mix(MixArgs),
    /// Freeze a synthetic OOD benchmark.
    Synth(SynthArgs),
    /// Recall and OOD classification report.
    Eval(EvalArgs),
    /// Apply a score metric to a detections file.
    Score(ScoreArgs),
    /// Verify analytic loss gradients against finite differences.
    Losscheck(LosscheckArgs),
}

#[derive(Args)]
struct IngestArgs {
    /// Directory of velodyne .bin files.
    #[arg(long)]
    velodyne: PathBuf,
    /// Directory of KITTI label .txt files.
    #[arg(long)]
    labels: PathBuf,
    /// Directory of calib .txt files.
    #[arg(long)]
    calib: PathBuf,
    /// Output canonical scene directory.
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated scene ids; defaults to every label file.
    #[arg(long, value_delimiter = ',')]
    scene_ids: Vec<String>,
}

#[derive(Args)]
struct BuildBankArgs {
    /// Canonical scene directory.
    #[arg(long)]
    scenes: PathBuf,
    /// Classes to extract, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "Misc")]
    classes: Vec<String>,
    /// Minimum point count per kept object.
    #[arg(long)]
    min_points: Option<usize>,
    /// Output bank directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct MixArgs {
    /// Input bank directory.
    #[arg(long)]
    bank: PathBuf,
    /// JSON size pool file: {"dims": [[l, w, h], ...]}.
    #[arg(long)]
    sizes: Option<PathBuf>,
    /// Harvest the size pool from this scene directory instead.
    #[arg(long)]
    size_scenes: Option<PathBuf>,
    /// Class whose box sizes populate the harvested pool.
    #[arg(long, default_value = "Misc")]
    size_class: String,
    /// Master seed (mandatory: mixed banks must be reproducible).
    #[arg(long)]
    seed: u64,
    /// Output bank directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// Canonical scene directory to synthesize from.
    #[arg(long)]
    scenes: PathBuf,
    /// Object bank directory.
    #[arg(long)]
    bank: PathBuf,
    /// Master seed (mandatory: frozen benchmarks must be reproducible).
    #[arg(long, required_unless_present = "from_manifest")]
    seed: Option<u64>,
    /// Benchmark name recorded in the manifest.
    #[arg(long, default_value = "synthetic")]
    name: String,
    /// Objects pasted per scene.
    #[arg(long)]
    samples_per_scene: Option<usize>,
    /// Keep scenes with an inserted object in this range, "lo,hi" meters.
    #[arg(long)]
    range: Option<String>,
    /// Class label given to inserted objects.
    #[arg(long)]
    label: Option<String>,
    /// JSON donor location pool: {"placements": [{"center": [x,y,z], "yaw": r}]}.
    #[arg(long)]
    locations: Option<PathBuf>,
    /// Regenerate from an existing manifest instead of fresh parameters.
    #[arg(long)]
    from_manifest: Option<PathBuf>,
    /// Output benchmark directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Ground-truth scene directory (annotations/<id>.json).
    #[arg(long)]
    gt: PathBuf,
    /// Detections file, JSON Lines.
    #[arg(long)]
    dets: PathBuf,
    /// Proposal budgets, comma separated.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// IoU thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    iou: Vec<f64>,
    /// IoU kind: 3d or bev.
    #[arg(long)]
    iou_kind: Option<String>,
    /// Class treated as out-of-distribution.
    #[arg(long)]
    unseen_class: Option<String>,
    /// In-distribution class catalog (sets the score vector length K).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Skip the OOD block (recall only).
    #[arg(long)]
    skip_ood: bool,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Also write the recall table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    /// Detections file, JSON Lines.
    #[arg(long)]
    dets: PathBuf,
    /// Score metric name (msp, max_logit, ..., energy).
    #[arg(long)]
    metric: String,
    /// Temperature for the energy score.
    #[arg(long)]
    temperature: Option<f64>,
    /// In-distribution class catalog (sets the score vector length K).
    #[arg(long, value_delimiter = ',')]
    classes: Vec<String>,
    /// Report output path (JSON).
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct LosscheckArgs {
    /// Seed for the randomized gradient-check instances.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Report output path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

const DEFAULT_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

/// Parse argv and run; returns the process exit code.
pub fn dispatch<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::IngestKitti(a) => run_ingest(a),
        Command::BuildBank(a) => run_build_bank(a),
        Command::Mix(a) => run_mix(a),
        Command::Synth(a) => run_synth(a),
        Command::Eval(a) => run_eval(a),
        Command::Score(a) => run_score(a),
        Command::Losscheck(a) => run_losscheck(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

// --- config-file support ----------------------------------------------------

/// Optional JSON config file with one section per subcommand; explicit
/// flags override config values, which override built-in defaults.
struct ConfigFile {
    section: Value,
}

impl ConfigFile {
    fn load(path: Option<&Path>, section: &str) -> Result<ConfigFile> {
        let Some(path) = path else {
            return Ok(ConfigFile {
                section: Value::Null,
            });
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root: Value = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("config file: {e}")))?;
        Ok(ConfigFile {
            section: root.get(section).cloned().unwrap_or(Value::Null),
        })
    }

    fn usize(&self, key: &str) -> Option<usize> {
        self.section.get(key)?.as_u64().map(|v| v as usize)
    }

    fn f64(&self, key: &str) -> Option<f64> {
        self.section.get(key)?.as_f64()
    }

    fn string(&self, key: &str) -> Option<String> {
        self.section.get(key)?.as_str().map(str::to_string)
    }

    fn usize_list(&self, key: &str) -> Option<Vec<usize>> {
        let arr = self.section.get(key)?.as_array()?;
        arr.iter()
            .map(|v| v.as_u64().map(|x| x as usize))
            .collect()
    }

    fn f64_list(&self, key: &str) -> Option<Vec<f64>> {
        let arr = self.section.get(key)?.as_array()?;
        arr.iter().map(|v| v.as_f64()).collect()
    }

    fn string_list(&self, key: &str) -> Option<Vec<String>> {
        let arr = self.section.get(key)?.as_array()?;
        arr.iter()
            .map(|v| v.as_str().map(str::to_string))
            .collect()
    }
}

fn thread_budget(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("OWL3D_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

/// Run `f` inside a bounded rayon pool when a budget is given. Results do
/// not depend on the pool size; this only limits parallelism.
fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    match threads {
        None => Ok(f()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn write_report(path: &Path, report: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(report).expect("report serialization");
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// --- subcommand handlers ----------------------------------------------------

fn run_ingest(args: IngestArgs) -> Result<()> {
    let scene_ids = if args.scene_ids.is_empty() {
        let entries =
            fs::read_dir(&args.labels).map_err(|e| Error::io(&args.labels, e))?;
        let mut ids = Vec::new();
        for entry in entries {
            let entry = entry.map_err(|e| Error::io(&args.labels, e))?;
            let name = entry.file_name();
            if let Some(id) = name.to_string_lossy().strip_suffix(".txt") {
                ids.push(id.to_string());
            }
        }
        ids.sort();
        ids
    } else {
        args.scene_ids.clone()
    };
    if scene_ids.is_empty() {
        return Err(Error::invalid("no scenes to ingest"));
    }
    let mut total_objects = 0;
    for id in &scene_ids {
        let scene = ingest_kitti_scene(
            id,
            &args.velodyne.join(format!("{id}.bin")),
            &args.labels.join(format!("{id}.txt")),
            &args.calib.join(format!("{id}.txt")),
        )?;
        total_objects += scene.annotations.len();
        write_scene(&args.out, &scene)?;
    }
    println!(
        "ingested {} scenes ({} objects) into {}",
        scene_ids.len(),
        total_objects,
        args.out.display()
    );
    Ok(())
}

fn run_build_bank(args: BuildBankArgs) -> Result<()> {
    let cfg = ConfigFile::load(args.config.as_deref(), "build-bank")?;
    let min_points = args
        .min_points
        .or_else(|| cfg.usize("min_points"))
        .unwrap_or(5);
    let classes = if args.classes.is_empty() {
        cfg.string_list("classes")
            .unwrap_or_else(|| vec!["Misc".to_string()])
    } else {
        args.classes.clone()
    };
    let scenes = read_scene_dir(&args.scenes)?;
    let bank = build_bank(&scenes, &classes, min_points);
    bank.save(&args.out)?;
    println!(
        "bank: {} entries (classes {:?}, min_points {}) -> {}",
        bank.len(),
        classes,
        min_points,
        args.out.display()
    );
    Ok(())
}

fn run_mix(args: MixArgs) -> Result<()> {
    let bank = ObjectBank::load(&args.bank)?;
    let pool = match (&args.sizes, &args.size_scenes) {
        (Some(path), _) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<SizePool>(&text)
                .map_err(|e| Error::format(format!("size pool: {e}")))?
        }
        (None, Some(dir)) => {
            let scenes = read_scene_dir(dir)?;
            SizePool::harvest(&scenes, &args.size_class)
        }
        (None, None) => {
            return Err(Error::invalid(
                "mix needs either --sizes or --size-scenes",
            ))
        }
    };
    let mixed = multi_size_mix(&bank, &pool, args.seed)?;
    mixed.save(&args.out)?;
    let resized = mixed.entries.iter().filter(|e| e.resized).count();
    println!(
        "mixed bank: {} entries ({} resized, seed {}) -> {}",
        mixed.len(),
        resized,
        args.seed,
        args.out.display()
    );
    Ok(())
}

fn parse_range(s: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::invalid(format!("range '{s}' must be 'lo,hi'")));
    }
    let lo: f64 = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad range bound '{}'", parts[0])))?;
    let hi: f64 = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::invalid(format!("bad range bound '{}'", parts[1])))?;
    if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
        return Err(Error::invalid(format!("range '{s}' is not a valid interval")));
    }
    Ok((lo, hi))
}

fn run_synth(args: SynthArgs) -> Result<()> {
    let scenes = read_scene_dir(&args.scenes)?;
    let bank = ObjectBank::load(&args.bank)?;
    let threads = thread_budget(args.threads);

    if let Some(manifest_path) = &args.from_manifest {
        let dir = manifest_path
            .parent()
            .filter(|p| !p.as_os_str().is_empty())
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let manifest = read_manifest(&dir)?;
        let out = args.out.clone();
        let regenerated = with_pool(threads, move || {
            regenerate_from_manifest(&manifest, &scenes, &bank, &out)
        })??;
        println!(
            "regenerated benchmark '{}' ({} scenes) -> {}",
            regenerated.name,
            regenerated.scene_ids.len(),
            args.out.display()
        );
        return Ok(());
    }

    let cfg = ConfigFile::load(args.config.as_deref(), "synth")?;
    let seed = args.seed.expect("clap enforces --seed without --from-manifest");
    let params = BenchParams {
        samples_per_scene: args
            .samples_per_scene
            .or_else(|| cfg.usize("samples_per_scene"))
            .unwrap_or(1),
        range_m: match (&args.range, cfg.string("range")) {
            (Some(s), _) => parse_range(s)?,
            (None, Some(s)) => parse_range(&s)?,
            (None, None) => (0.0, 50.0),
        },
        unseen_label: args
            .label
            .clone()
            .or_else(|| cfg.string("label"))
            .unwrap_or_else(|| "Anomaly".to_string()),
        donor_locations: match &args.locations {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let pool: LocationPool = serde_json::from_str(&text)
                    .map_err(|e| Error::format(format!("location pool: {e}")))?;
                pool.validate()?;
                pool
            }
            None => LocationPool::default(),
        },
    };

    let name = args.name.clone();
    let out = args.out.clone();
    let manifest = with_pool(threads, move || {
        freeze_benchmark(&scenes, &bank, &name, seed, &params, &out)
    })??;
    println!(
        "froze benchmark '{}': {} scenes -> {}",
        manifest.name,
        manifest.scene_ids.len(),
        args.out.display()
    );
    Ok(())
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref(), "eval")?;
    let k_values = if args.k.is_empty() {
        cfg_file.usize_list("k").unwrap_or_else(|| vec![500])
    } else {
        args.k.clone()
    };
    let thresholds = if args.iou.is_empty() {
        cfg_file
            .f64_list("iou")
            .unwrap_or_else(|| vec![0.10, 0.25, 0.40])
    } else {
        args.iou.clone()
    };
    let iou_kind = match args.iou_kind.clone().or_else(|| cfg_file.string("iou_kind")) {
        Some(s) => IouKind::parse(&s)?,
        None => IouKind::ThreeD,
    };
    let unseen_class = args
        .unseen_class
        .clone()
        .or_else(|| cfg_file.string("unseen_class"))
        .unwrap_or_else(|| "Misc".to_string());
    let classes = if args.classes.is_empty() {
        cfg_file
            .string_list("classes")
            .unwrap_or_else(|| DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect())
    } else {
        args.classes.clone()
    };
    let proposal_k = *k_values.iter().max().expect("non-empty k list");
    let eval_cfg = EvalConfig {
        proposal_k,
        iou_thresholds: thresholds.clone(),
        iou_kind,
        recall_matching: crate::matching::RecallMatching::Coverage,
    };
    eval_cfg.validate()?;

    // Ground truths: annotations only; clouds are not needed for eval.
    let scene_ids = list_scene_ids(&args.gt)?;
    let mut gt_scenes = Vec::with_capacity(scene_ids.len());
    for id in &scene_ids {
        let ann = read_annotations(&args.gt.join("annotations").join(format!("{id}.json")))?;
        gt_scenes.push(ann);
    }

    let det_scenes: Vec<SceneDetections> = read_detections(&args.dets, classes.len())?;
    let det_by_id: std::collections::HashMap<&str, &SceneDetections> = det_scenes
        .iter()
        .map(|d| (d.scene_id.as_str(), d))
        .collect();

    let empty: Vec<Detection> = Vec::new();
    let paired: Vec<(&[GtObject], &[Detection], ScoreSpace)> = gt_scenes
        .iter()
        .map(|ann| match det_by_id.get(ann.scene_id.as_str()) {
            Some(d) => (
                ann.objects.as_slice(),
                d.detections.as_slice(),
                d.score_space,
            ),
            None => (ann.objects.as_slice(), empty.as_slice(), ScoreSpace::Logit),
        })
        .collect();

    let threads = thread_budget(args.threads);
    let report_value = with_pool(threads, || -> Result<Value> {
        use rayon::prelude::*;

        let recall_inputs: Vec<(&[GtObject], &[Detection])> =
            paired.iter().map(|(g, d, _)| (*g, *d)).collect();
        let recall = recall_curve(&recall_inputs, &eval_cfg, &k_values)?;

        // Two-stage matching on the top-k detections of each scene.
        let matched: Vec<(Vec<Detection>, crate::matching::MatchResult, ScoreSpace)> = paired
            .par_iter()
            .map(|(gts, dets, space)| {
                let order = rank_by_conf(dets);
                let top: Vec<Detection> = order
                    .iter()
                    .take(eval_cfg.proposal_k)
                    .map(|&i| dets[i].clone())
                    .collect();
                let result = match_scene(gts, &top, &eval_cfg);
                (top, result, *space)
            })
            .collect();

        let ood_block = if args.skip_ood {
            Value::Null
        } else {
            let scene_matches: Vec<SceneMatches<'_>> = paired
                .iter()
                .zip(&matched)
                .map(|((gts, _, _), (top, result, space))| SceneMatches {
                    matches: result,
                    gts,
                    dets: top,
                    score_space: *space,
                })
                .collect();
            let metrics: Vec<ScoreMetric> =
                ScoreKind::ALL.iter().map(|&k| ScoreMetric::new(k)).collect();
            serde_json::to_value(ood_report(&scene_matches, &unseen_class, &metrics)?)
                .expect("ood report serialization")
        };

        Ok(json!({
            "config": {
                "gt": args.gt.display().to_string(),
                "dets": args.dets.display().to_string(),
                "k": k_values,
                "iou_thresholds": thresholds,
                "iou_kind": iou_kind,
                "unseen_class": unseen_class,
                "classes": classes,
                "proposal_k": proposal_k,
                "skip_ood": args.skip_ood,
            },
            "recall": recall,
            "ood": ood_block,
        }))
    })??;

    write_report(&args.out, &report_value)?;
    if let Some(csv_path) = &args.csv {
        let recall: crate::matching::RecallReport =
            serde_json::from_value(report_value["recall"].clone())
                .expect("recall block round-trips");
        fs::write(csv_path, recall.to_csv()).map_err(|e| Error::io(csv_path, e))?;
    }
    println!("eval report -> {}", args.out.display());
    Ok(())
}

fn run_score(args: ScoreArgs) -> Result<()> {
    let cfg_file = ConfigFile::load(args.config.as_deref(), "score")?;
    let temperature = args
        .temperature
        .or_else(|| cfg_file.f64("temperature"))
        .unwrap_or(1.0);
    let classes = if args.classes.is_empty() {
        cfg_file
            .string_list("classes")
            .unwrap_or_else(|| DEFAULT_CLASSES.iter().map(|s| s.to_string()).collect())
    } else {
        args.classes.clone()
    };
    let metric = ScoreMetric::with_temperature(ScoreKind::parse(&args.metric)?, temperature)?;
    let det_scenes = read_detections(&args.dets, classes.len())?;

    let mut scenes_out = Vec::with_capacity(det_scenes.len());
    for scene in &det_scenes {
        let mut scores = Vec::with_capacity(scene.detections.len());
        for det in &scene.detections {
            let s = match scene.score_space {
                ScoreSpace::Logit => id_score(&det.scores, metric)?,
                ScoreSpace::Prob => {
                    if metric.kind != ScoreKind::Msp {
                        return Err(Error::invalid(format!(
                            "metric '{}' needs logits but '{}' declares probability scores",
                            metric.kind.name(),
                            scene.scene_id
                        )));
                    }
                    det.scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                }
            };
            scores.push(s);
        }
        scenes_out.push(json!({"scene_id": scene.scene_id, "scores": scores}));
    }
    let report = json!({
        "config": {
            "dets": args.dets.display().to_string(),
            "metric": metric.kind.name(),
            "temperature": temperature,
            "classes": classes,
        },
        "scenes": scenes_out,
    });
    write_report(&args.out, &report)?;
    println!("score report -> {}", args.out.display());
    Ok(())
}

// --- gradient verification suite ---------------------------------------------

const FD_EPSILON: f64 = 1e-4;
const FD_TOLERANCE: f64 = 1e-5;
const FD_INSTANCES: usize = 20;

fn losscheck_report(seed: u64) -> Value {
    let cfg = LossConfig::default();
    let mut results = Vec::new();

    // focal
    {
        let mut rng = derive_rng(seed, "losscheck/focal");
        let mut worst = 0.0_f64;
        for _ in 0..FD_INSTANCES {
            let n = rng.gen_range(1..8);
            let logits: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
            let labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.5)).collect();
            let (_, grad) = focal_loss(&logits, &labels, cfg.alpha, cfg.gamma).unwrap();
            let err = finite_diff_check(
                |x| focal_loss(x, &labels, cfg.alpha, cfg.gamma).unwrap().0,
                &logits,
                &grad,
                FD_EPSILON,
            );
            worst = worst.max(err);
        }
        results.push(("focal", worst));
    }

    // energy regularizer
    {
        let mut rng = derive_rng(seed, "losscheck/energy_reg");
        let mut worst = 0.0_f64;
        for _ in 0..FD_INSTANCES {
            let k = rng.gen_range(1..5);
            let n_id = rng.gen_range(1..4);
            let n_ood = rng.gen_range(1..4);
            // Resample rows whose energy lands on a hinge kink; central
            // differences are invalid across the non-smooth point.
            let row = |rng: &mut rand_chacha::ChaCha20Rng, margin: f64| -> Vec<f64> {
                loop {
                    let r: Vec<f64> = (0..k).map(|_| rng.gen_range(-8.0..8.0)).collect();
                    if (crate::losses::energy(&r, 1.0) - margin).abs() > 1e-3 {
                        return r;
                    }
                }
            };
            let batch = LogitBatch {
                id_logits: (0..n_id).map(|_| row(&mut rng, cfg.m_in)).collect(),
                ood_logits: (0..n_ood).map(|_| row(&mut rng, cfg.m_out)).collect(),
            };
            let (_, grads) = energy_reg_loss(&batch, &cfg);
            let flat: Vec<f64> = batch
                .id_logits
                .iter()
                .chain(&batch.ood_logits)
                .flatten()
                .cloned()
                .collect();
            let flat_grad: Vec<f64> =
                grads.id.iter().chain(&grads.ood).flatten().cloned().collect();
            let n_id_rows = batch.id_logits.len();
            let err = finite_diff_check(
                |x| {
                    let rows: Vec<Vec<f64>> = x.chunks(k).map(|c| c.to_vec()).collect();
                    let b = LogitBatch {
                        id_logits: rows[..n_id_rows].to_vec(),
                        ood_logits: rows[n_id_rows..].to_vec(),
                    };
                    energy_reg_loss(&b, &cfg).0
                },
                &flat,
                &flat_grad,
                FD_EPSILON,
            );
            worst = worst.max(err);
        }
        results.push(("energy_reg", worst));
    }

    // outlier-aware supervised contrastive
    {
        let mut rng = derive_rng(seed, "losscheck/supcon");
        let dim = 8;
        let n = 6;
        let mut worst = 0.0_f64;
        for _ in 0..FD_INSTANCES {
            let embeddings: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let labels: Vec<ContrastiveLabel> = (0..n)
                .map(|_| {
                    if rng.gen_bool(0.3) {
                        ContrastiveLabel::Out
                    } else {
                        ContrastiveLabel::In(rng.gen_range(0..2))
                    }
                })
                .collect();
            let batch = ContrastiveBatch {
                embeddings: embeddings.clone(),
                labels: labels.clone(),
            };
            let (_, grads) = supcon_ood_loss(&batch, cfg.tau_c).unwrap();
            let flat: Vec<f64> = embeddings.iter().flatten().cloned().collect();
            let flat_grad: Vec<f64> = grads.iter().flatten().cloned().collect();
            let err = finite_diff_check(
                |x| {
                    let b = ContrastiveBatch {
                        embeddings: x.chunks(dim).map(|c| c.to_vec()).collect(),
                        labels: labels.clone(),
                    };
                    supcon_ood_loss(&b, cfg.tau_c).unwrap().0
                },
                &flat,
                &flat_grad,
                FD_EPSILON,
            );
            worst = worst.max(err);
        }
        results.push(("supcon_ood", worst));
    }

    // smooth-L1 box regression
    {
        let mut rng = derive_rng(seed, "losscheck/smooth_l1");
        let mut worst = 0.0_f64;
        for _ in 0..FD_INSTANCES {
            let mut pred = [0.0_f64; 7];
            let mut target = [0.0_f64; 7];
            for i in 0..7 {
                pred[i] = rng.gen_range(-3.0..3.0);
                target[i] = rng.gen_range(-3.0..3.0);
                // Keep away from the quadratic/linear switch at |d| = 1.
                if ((pred[i] - target[i]).abs() - 1.0).abs() < 1e-3 {
                    pred[i] += 0.01;
                }
            }
            let (_, grad) = smooth_l1_box_loss(&pred, &target);
            let err = finite_diff_check(
                |x| {
                    let mut p = [0.0; 7];
                    p.copy_from_slice(x);
                    smooth_l1_box_loss(&p, &target).0
                },
                &pred,
                &grad,
                FD_EPSILON,
            );
            worst = worst.max(err);
        }
        results.push(("smooth_l1_box", worst));
    }

    let losses: Vec<Value> = results
        .iter()
        .map(|(name, err)| {
            json!({
                "name": name,
                "max_rel_error": err,
                "pass": *err <= FD_TOLERANCE,
            })
        })
        .collect();
    json!({
        "seed": seed,
        "epsilon": FD_EPSILON,
        "tolerance": FD_TOLERANCE,
        "instances_per_loss": FD_INSTANCES,
        "losses": losses,
        "pass": results.iter().all(|(_, err)| *err <= FD_TOLERANCE),
    })
}

fn run_losscheck(args: LosscheckArgs) -> Result<()> {
    let report = losscheck_report(args.seed);
    let text = {
        let mut t = serde_json::to_string_pretty(&report).expect("losscheck serialization");
        t.push('\n');
        t
    };
    match &args.out {
        Some(path) => fs::write(path, &text).map_err(|e| Error::io(path, e))?,
        None => print!("{text}"),
    }
    if report["pass"].as_bool() == Some(true) {
        Ok(())
    } else {
        Err(Error::invalid("gradient check failed; see report"))
    }
}
