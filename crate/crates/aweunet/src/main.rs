use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use aweunet::config::{ExperimentConfig, CONFIG_KEYS_HELP};
use aweunet::data::{self, Split};
use aweunet::detect;
use aweunet::error::Error;
use aweunet::train::{self, Checkpoint, DetectorChoice};

#[derive(Parser)]
#[command(
    name = "aweunet",
    about = "Lung nodule detection + segmentation pipeline",
    after_long_help = CONFIG_KEYS_HELP
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone)]
struct CommonArgs {
    /// Flat `key = value` config file (see --help for all keys)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config output directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with exact ground truth
    Synth {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Train the segmentation model on the train split
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a checkpoint on one split; writes metrics.json and curves
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Full detect → segment pipeline on one image
    Predict {
        #[command(flatten)]
        common: CommonArgs,
        /// Input grayscale PNG
        image: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// `baseline` or `csv:PATH` with precomputed detections
        #[arg(long, default_value = "baseline")]
        detector: String,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Evaluate the detector (AP) against manifest ground truth
    DetectEval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_parser = ["train", "val", "test"], default_value = "test")]
        split: String,
        #[arg(long, default_value = "baseline")]
        detector: String,
    },
}

fn load_config(common: &CommonArgs) -> aweunet::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.phantom.seed = seed;
        cfg.augmentation.seed = seed;
    } else {
        cfg.phantom.seed = cfg.seed;
        cfg.augmentation.seed = cfg.seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn ensure_out(dir: &Path) -> aweunet::Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_synth(common: &CommonArgs) -> aweunet::Result<()> {
    let cfg = load_config(common)?;
    let root = &cfg.output_dir;
    ensure_out(root)?;
    let entries = data::generate_phantoms(&cfg.phantom, root)?;
    let manifest = data::split_dataset(entries, cfg.phantom.seed)?;
    data::write_manifest(&manifest, root)?;
    let (tr, va, te) = (
        manifest.split_entries(Split::Train).len(),
        manifest.split_entries(Split::Val).len(),
        manifest.split_entries(Split::Test).len(),
    );
    println!(
        "wrote {} phantoms to {} (split {}/{}/{})",
        manifest.entries.len(),
        root.display(),
        tr,
        va,
        te
    );
    Ok(())
}

fn run_train(common: &CommonArgs) -> aweunet::Result<()> {
    let cfg = load_config(common)?;
    ensure_out(&cfg.output_dir)?;
    let manifest = data::read_manifest(&cfg.dataset_root)?;
    let out = train::train(&cfg, &manifest)?;
    out.best.save(&cfg.output_dir.join("best.ckpt"))?;
    out.last.save(&cfg.output_dir.join("last.ckpt"))?;
    out.log.write_csv(&cfg.output_dir.join("trainlog.csv"))?;
    println!(
        "trained {} epochs; final train DSC {:.4}, best val DSC {:.4}",
        cfg.epochs, out.final_train_dsc, out.best.best_val_dsc
    );
    Ok(())
}

fn write_metrics_json(path: &Path, entries: &BTreeMap<String, f64>) -> aweunet::Result<()> {
    let json = serde_json::to_string_pretty(entries).expect("flat map serializes");
    std::fs::write(path, json).map_err(|e| Error::io(path, e))
}

fn run_eval(
    common: &CommonArgs,
    checkpoint: &Path,
    split: &str,
    threshold: Option<f64>,
) -> aweunet::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    ensure_out(&cfg.output_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    // the checkpoint's config echo is authoritative for topology
    cfg.model = ckpt.config.clone();
    let model = ckpt.into_model(&cfg.model)?;
    let manifest = data::read_manifest(&cfg.dataset_root)?;
    let samples = train::load_split_samples(&manifest, Split::parse(split)?, &cfg)?;
    let out = train::evaluate(&model, &samples, cfg.threshold)?;

    let mut flat = BTreeMap::new();
    flat.insert("acc".into(), out.mean.acc);
    flat.insert("sen".into(), out.mean.sen);
    flat.insert("spe".into(), out.mean.spe);
    flat.insert("dsc".into(), out.mean.dsc);
    flat.insert("iou".into(), out.mean.iou);
    flat.insert("auc_roc".into(), out.mean.auc_roc);
    flat.insert("auc_pr".into(), out.mean.auc_pr);
    flat.insert("std_acc".into(), out.std[0]);
    flat.insert("std_sen".into(), out.std[1]);
    flat.insert("std_spe".into(), out.std[2]);
    flat.insert("std_dsc".into(), out.std[3]);
    flat.insert("std_iou".into(), out.std[4]);
    flat.insert("pooled_acc".into(), out.pooled.0);
    flat.insert("pooled_sen".into(), out.pooled.1);
    flat.insert("pooled_spe".into(), out.pooled.2);
    flat.insert("threshold".into(), cfg.threshold);
    // aggregation mode marker: 1.0 = per-image mean (pooled_* are the alternative)
    flat.insert("per_image_mean_mode".into(), 1.0);
    write_metrics_json(&cfg.output_dir.join("metrics.json"), &flat)?;

    let per_image_path = cfg.output_dir.join("per_image.csv");
    let mut f = std::fs::File::create(&per_image_path).map_err(|e| Error::io(&per_image_path, e))?;
    writeln!(f, "source,acc,sen,spe,dsc,iou").map_err(|e| Error::io(&per_image_path, e))?;
    for r in &out.per_image {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.source, r.acc, r.sen, r.spe, r.dsc, r.iou
        )
        .map_err(|e| Error::io(&per_image_path, e))?;
    }
    let roc_path = cfg.output_dir.join("roc.csv");
    out.roc
        .write_csv(std::fs::File::create(&roc_path).map_err(|e| Error::io(&roc_path, e))?)
        .map_err(|e| Error::io(&roc_path, e))?;
    let pr_path = cfg.output_dir.join("pr.csv");
    out.pr
        .write_csv(std::fs::File::create(&pr_path).map_err(|e| Error::io(&pr_path, e))?)
        .map_err(|e| Error::io(&pr_path, e))?;
    println!(
        "split {} ({} samples): DSC {:.4} IoU {:.4} ACC {:.4} SEN {:.4} SPE {:.4} AUC {:.4} AP {:.4}",
        split,
        out.per_image.len(),
        out.mean.dsc,
        out.mean.iou,
        out.mean.acc,
        out.mean.sen,
        out.mean.spe,
        out.mean.auc_roc,
        out.mean.auc_pr
    );
    Ok(())
}

fn detector_choice(detector: &str, image_name: &str) -> aweunet::Result<Option<DetectorChoice>> {
    if detector == "baseline" {
        return Ok(Some(DetectorChoice::Baseline));
    }
    if let Some(path) = detector.strip_prefix("csv:") {
        let rows = detect::read_detections_csv(Path::new(path))?;
        let dets: Vec<_> = rows
            .into_iter()
            .filter(|(img, _)| img == image_name)
            .map(|(_, d)| d)
            .collect();
        return Ok(Some(DetectorChoice::Provided(dets)));
    }
    Err(Error::Config(format!(
        "unknown detector '{detector}' (expected 'baseline' or 'csv:PATH')"
    )))
}

fn run_predict(
    common: &CommonArgs,
    image_path: &Path,
    checkpoint: &Path,
    detector: &str,
    threshold: Option<f64>,
) -> aweunet::Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(t) = threshold {
        cfg.threshold = t;
    }
    ensure_out(&cfg.output_dir)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    cfg.model = ckpt.config.clone();
    let model = ckpt.into_model(&cfg.model)?;
    let image = data::load_gray_png(image_path)?;
    let stem = image_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let choice = detector_choice(detector, &stem)?.unwrap();
    let out = train::predict_pipeline(&image, &model, choice, &cfg)?;
    let mask_path = cfg.output_dir.join(format!("{stem}_mask.png"));
    data::save_gray_png(&mask_path, &out.mask.mapv(|m| f64::from(m) * 255.0))?;
    let det_path = cfg.output_dir.join(format!("{stem}_detections.csv"));
    let rows: Vec<_> = out
        .detections
        .iter()
        .map(|d| (stem.clone(), *d))
        .collect();
    detect::write_detections_csv(&det_path, &rows)?;
    if out.empty_warning {
        println!("warning: no ROI proposals for {stem}; wrote empty mask");
    } else {
        println!(
            "{}: {} detections, mask written to {}",
            stem,
            out.detections.len(),
            mask_path.display()
        );
    }
    Ok(())
}

fn run_detect_eval(common: &CommonArgs, split: &str, detector: &str) -> aweunet::Result<()> {
    if detector != "baseline" && !detector.starts_with("csv:") {
        return Err(Error::Config(format!(
            "unknown detector '{detector}' (expected 'baseline' or 'csv:PATH')"
        )));
    }
    let cfg = load_config(common)?;
    ensure_out(&cfg.output_dir)?;
    let manifest = data::read_manifest(&cfg.dataset_root)?;
    let entries = manifest.split_entries(Split::parse(split)?);
    let mut all_preds = Vec::new();
    let mut all_gts = Vec::new();
    let mut rows = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        let stem = e
            .image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let image = data::load_gray_png(&e.image_path)?;
        let (extracted, _) = data::extract_lung_region(&image);
        let dets = match detector_choice(detector, &stem)? {
            Some(DetectorChoice::Baseline) => detect::propose_rois_baseline(
                &extracted,
                cfg.detector_min_area,
                cfg.detector_max_count,
                cfg.detector_quantile,
            ),
            Some(DetectorChoice::Provided(d)) => d,
            None => unreachable!(),
        };
        // offset boxes into a per-image lane so AP pools over the split
        let offset = (i * 100_000) as f64;
        for d in &dets {
            rows.push((stem.clone(), *d));
            let mut shifted = *d;
            shifted.bbox.x += offset;
            all_preds.push(shifted);
        }
        for g in &e.boxes {
            let mut shifted = *g;
            shifted.x += offset;
            all_gts.push(shifted);
        }
    }
    let ap = detect::average_precision(&all_preds, &all_gts, 0.5)?;
    detect::write_detections_csv(&cfg.output_dir.join("detections.csv"), &rows)?;
    let mut flat = BTreeMap::new();
    flat.insert("ap".to_string(), ap);
    write_metrics_json(&cfg.output_dir.join("metrics.json"), &flat)?;
    println!("split {split}: AP@0.5 = {ap:.4} over {} images", entries.len());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth { common } => run_synth(common),
        Command::Train { common } => run_train(common),
        Command::Eval {
            common,
            checkpoint,
            split,
            threshold,
        } => run_eval(common, checkpoint, split, *threshold),
        Command::Predict {
            common,
            image,
            checkpoint,
            detector,
            threshold,
        } => run_predict(common, image, checkpoint, detector, *threshold),
        Command::DetectEval {
            common,
            split,
            detector,
        } => run_detect_eval(common, split, detector),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
