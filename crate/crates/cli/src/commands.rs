use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;
use srpn_core::config::{ExperimentConfig, EVAL_DIR, NEGATIVE_DIR, TRAIN_DIR};
use srpn_core::evaluator::{self, evaluate_f1ap, evaluate_ringcell};
use srpn_core::gradcheck::{run_scope, GradCheckConfig, Scope};
use srpn_core::synth::{load_annotations, load_png, read_dataset, write_dataset, AnnotatedImage, ANNOTATION_FILE};
use srpn_core::trainer::{sweep_csv, sweep_losses, train as train_head};
use srpn_core::{BBox, Model64};

use crate::error::CliError;
use crate::overlay;
use crate::ProtocolArg;

pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOG_FILE: &str = "train_log.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.txt";
pub const DETECTIONS_FILE: &str = "detections.jsonl";
pub const OVERLAY_FILE: &str = "overlay.png";
pub const SWEEP_FILE: &str = "sweep.csv";

type Result<T> = std::result::Result<T, CliError>;

fn load_config(path: Option<&Path>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => Ok(ExperimentConfig::load(p)?),
        None => Ok(ExperimentConfig::default()),
    }
}

fn prepare_out(out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(out).map_err(CliError::io(out))?;
    write(&out.join(CONFIG_FILE), &cfg.to_toml_string())
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(CliError::io(path))
}

/// A directory holding `annotations.jsonl`, or its `split` subdirectory.
fn dataset_dir(data: &Path, split: &str) -> PathBuf {
    if data.join(ANNOTATION_FILE).is_file() {
        data.to_path_buf()
    } else {
        data.join(split)
    }
}

fn read_split(data: &Path, split: &str) -> Result<Vec<AnnotatedImage<f64>>> {
    let dir = dataset_dir(data, split);
    if !dir.join(ANNOTATION_FILE).is_file() {
        return Err(CliError::Io {
            path: dir.join(ANNOTATION_FILE),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    Ok(read_dataset(&dir)?)
}

fn load_model(checkpoint: &Path) -> Result<Model64> {
    if !checkpoint.is_file() {
        return Err(CliError::Io {
            path: checkpoint.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    Ok(Model64::load(checkpoint)?)
}

/// An explicit config, else the one saved beside the checkpoint.
fn config_for_checkpoint(explicit: Option<&Path>, checkpoint: &Path, model: &Model64) -> Result<ExperimentConfig> {
    let beside = checkpoint.parent().map(|d| d.join(CONFIG_FILE)).filter(|p| p.is_file());
    let cfg = load_config(explicit.or(beside.as_deref()))?;
    cfg.train
        .check_head(model.config())
        .map_err(|e| CliError::BadArgument(format!("config does not fit the checkpoint: {e}")))?;
    Ok(cfg)
}

pub fn synth(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    prepare_out(out, &cfg)?;
    let splits = cfg.generate_splits::<f64>()?;
    for (name, images) in [(TRAIN_DIR, &splits.train), (EVAL_DIR, &splits.eval), (NEGATIVE_DIR, &splits.negative)] {
        if images.is_empty() {
            continue;
        }
        write_dataset(&out.join(name), images)?;
        info!("wrote {} images to {}", images.len(), out.join(name).display());
    }
    println!(
        "synth: {} train, {} eval, {} negative images in {}",
        splits.train.len(),
        splits.eval.len(),
        splits.negative.len(),
        out.display()
    );
    Ok(())
}

pub fn train(config: Option<&Path>, seed: Option<u64>, data: &Path, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.train.model_seed = s;
    }
    let images = read_split(data, TRAIN_DIR)?;
    prepare_out(out, &cfg)?;
    let (model, log) = train_head(&cfg.head, &cfg.train, &images)?;
    model.save(&out.join(CHECKPOINT_FILE))?;
    write(&out.join(LOG_FILE), &log.to_csv())?;
    println!(
        "train: {} iterations on {} images, final loss {:.4}; checkpoint {}",
        cfg.train.iterations,
        images.len(),
        log.tail_mean(1),
        out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, protocol: ProtocolArg, config: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let cfg = config_for_checkpoint(config, checkpoint, &model)?;
    let report = match protocol {
        ProtocolArg::F1ap => {
            let images = read_split(data, EVAL_DIR)?;
            evaluate_f1ap(&model, &images, &cfg.train.anchors, &cfg.eval)?
        }
        ProtocolArg::Ringcell => {
            let mut images = read_split(data, EVAL_DIR)?;
            if !data.join(ANNOTATION_FILE).is_file() && data.join(NEGATIVE_DIR).is_dir() {
                images.extend(read_split(data, NEGATIVE_DIR)?);
            }
            if images.iter().all(|i| !i.boxes.is_empty()) {
                return Err(CliError::Eval(srpn_core::error::EvalError::NoNegativeImages));
            }
            evaluate_ringcell(&model, &images, &cfg.train.anchors, &cfg.eval)?
        }
    };
    prepare_out(out, &cfg)?;
    write(&out.join(METRICS_FILE), &report.to_csv())?;
    write(&out.join(SUMMARY_FILE), &report.summary())?;
    print!("{}", report.summary());
    Ok(())
}

pub fn gradcheck(scope: Scope, seed: Option<u64>, out: Option<&Path>) -> Result<()> {
    let mut cfg = GradCheckConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let report = run_scope(scope, &cfg);
    let table = report.to_table();
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        write(&dir.join("gradcheck.txt"), &table)?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::GradCheck(report.rows.iter().filter(|r| !r.passed).count()))
    }
}

#[derive(Serialize)]
struct DetectionRecord {
    x: f64,
    y: f64,
    h: f64,
    w: f64,
    score: f64,
}

/// Ground truth for an image inside a dataset directory, if annotated.
fn ground_truth_for(image: &Path) -> Option<Vec<BBox<f64>>> {
    let dir = image.parent()?.parent()?;
    let records = load_annotations(&dir.join(ANNOTATION_FILE)).ok()?;
    let canon = image.canonicalize().ok()?;
    records
        .into_iter()
        .find(|r| dir.join(&r.image).canonicalize().ok().as_deref() == Some(canon.as_path()))
        .map(|r| r.bboxes())
}

pub fn detect(checkpoint: &Path, image: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let model = load_model(checkpoint)?;
    let cfg = config_for_checkpoint(config, checkpoint, &model)?;
    if !image.is_file() {
        return Err(CliError::Io {
            path: image.to_path_buf(),
            source: std::io::ErrorKind::NotFound.into(),
        });
    }
    let img = load_png::<f64>(image)?;
    let dets = evaluator::detect(&model, &img, &cfg.train.anchors, cfg.eval.score_threshold, cfg.eval.nms_iou)?;
    prepare_out(out, &cfg)?;
    let mut lines = String::new();
    for d in &dets {
        let rec = DetectionRecord {
            x: d.bbox.x,
            y: d.bbox.y,
            h: d.bbox.h,
            w: d.bbox.w,
            score: d.score,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("detection serializes"));
        lines.push('\n');
    }
    write(&out.join(DETECTIONS_FILE), &lines)?;
    let gt = ground_truth_for(image).unwrap_or_default();
    let boxes: Vec<BBox<f64>> = dets.iter().map(|d| d.bbox).collect();
    overlay::render(&img, &boxes, &gt)
        .save(out.join(OVERLAY_FILE))
        .map_err(|e| CliError::Data(srpn_core::error::DataError::Image(e.to_string())))?;
    println!("detect: {} detections, {} ground-truth boxes; wrote {}", dets.len(), gt.len(), out.display());
    Ok(())
}

pub fn ablate(config: Option<&Path>, margins: &[f64], data: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.train.model_seed = s;
    }
    if margins.is_empty() || margins.iter().any(|m| !(m.is_finite() && *m >= 0.0)) {
        return Err(CliError::BadArgument(format!("margins must be non-negative numbers, got {margins:?}")));
    }
    let (train_set, eval_set) = match data {
        Some(d) => (read_split(d, TRAIN_DIR)?, read_split(d, EVAL_DIR)?),
        None => {
            let s = cfg.generate_splits::<f64>()?;
            (s.train, s.eval)
        }
    };
    prepare_out(out, &cfg)?;
    let rows = sweep_losses(&cfg.head, &cfg.train, margins, &train_set, &eval_set, &cfg.eval)?;
    let csv = sweep_csv(&rows);
    write(&out.join(SWEEP_FILE), &csv)?;
    print!("{csv}");
    Ok(())
}
