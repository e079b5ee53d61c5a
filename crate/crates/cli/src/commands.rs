use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use resattunet::data::{
    compute_split_stats, default_class_names, marida_acronyms, marida_counts, read_image, standardize, synth_dataset,
    write_mask, BandStats, Manifest, Mask, PatchSample, Split,
};
use resattunet::loss::{class_weights_from_counts, ClassWeights};
use resattunet::metrics::argmax_classes;
use resattunet::nn::checkpoint::load_checkpoint;
use resattunet::train::{class_weights_for, evaluate_split, load_weights, Trainer};
use resattunet::verify::gradcheck_suite;
use resattunet::{Error, ResAttUNet};

use crate::config::RunConfig;
use crate::CliError;

/// Largest finite-difference error `gradcheck` accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    std::fs::write(path, text).map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("json serializes") + "\n"))
}

fn required<'a>(field: &'a Option<PathBuf>, key: &str, command: &str) -> Result<&'a Path, CliError> {
    field
        .as_deref()
        .ok_or_else(|| CliError::usage(format!("{command} needs `{key}` (--set {key}=<path>)")))
}

/// Loads the manifest and checks that the model fits its bands and classes.
fn manifest(cfg: &RunConfig, command: &str) -> Result<Manifest, CliError> {
    let m = Manifest::load(required(&cfg.manifest, "manifest", command)?)?;
    if m.band_count != cfg.model.in_bands || m.num_classes() != cfg.model.num_classes {
        return Err(CliError::usage(format!(
            "model expects {} bands and {} classes, manifest has {} and {}; set model.in_bands and model.num_classes",
            cfg.model.in_bands,
            cfg.model.num_classes,
            m.band_count,
            m.num_classes()
        )));
    }
    Ok(m)
}

/// Stored training statistics, computed on the fly for older manifests.
fn band_stats(cfg: &RunConfig, m: &Manifest) -> Result<Option<BandStats>, CliError> {
    if !cfg.standardize {
        return Ok(None);
    }
    Ok(Some(match &m.stats {
        Some(s) => s.clone(),
        None => compute_split_stats(m, Split::Train)?,
    }))
}

fn prepared(samples: Vec<PatchSample>, stats: Option<&BandStats>) -> Result<Vec<PatchSample>, CliError> {
    match stats {
        None => Ok(samples),
        Some(s) => Ok(samples.iter().map(|x| standardize(x, s)).collect::<Result<_, _>>()?),
    }
}

/// A split that may legitimately be absent.
fn optional_split(m: &Manifest, split: Split) -> Result<Option<Vec<PatchSample>>, CliError> {
    match m.load_split(split) {
        Ok(s) => Ok(Some(s)),
        Err(Error::Empty(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Class weights as training derived them: from the training split's labels.
fn training_weights(cfg: &RunConfig, m: &Manifest) -> Result<ClassWeights, CliError> {
    match optional_split(m, Split::Train)? {
        Some(train) => Ok(class_weights_for(&train, cfg.model.num_classes, cfg.train.class_weights)?),
        None => {
            log::warn!("manifest has no training split; scoring the loss with uniform class weights");
            Ok(ClassWeights::uniform(cfg.model.num_classes))
        }
    }
}

fn load_model(cfg: &RunConfig, command: &str) -> Result<ResAttUNet<f32>, CliError> {
    let path = required(&cfg.checkpoint, "checkpoint", command)?;
    let mut model = ResAttUNet::new(cfg.model.clone(), cfg.train.seed)?;
    load_weights(model.params_mut(), &load_checkpoint(path)?)?;
    Ok(model)
}

pub fn synth(cfg: &RunConfig) -> Result<Value, CliError> {
    let m = synth_dataset(&cfg.synth, &cfg.out)?;
    let count = |s: Split| m.entries(s).count();
    Ok(json!({
        "command": "synth",
        "manifest": cfg.out.join(resattunet::data::MANIFEST_FILE),
        "train": count(Split::Train),
        "val": count(Split::Val),
        "test": count(Split::Test),
    }))
}

pub fn weights(cfg: &RunConfig) -> Result<Value, CliError> {
    let counts = cfg.counts.clone().unwrap_or_else(marida_counts);
    let names = match &cfg.manifest {
        Some(path) => Manifest::load(path)?.classes,
        None if cfg.counts.is_none() => marida_acronyms(),
        None => default_class_names(counts.len()),
    };
    let w = class_weights_from_counts(&counts)?;
    let table = w.to_json(&names)?;
    write_json(&cfg.out.join("class_weights.json"), &table)?;
    Ok(json!({ "command": "weights", "weights": table }))
}

pub fn train(cfg: &RunConfig) -> Result<Value, CliError> {
    let m = manifest(cfg, "train")?;
    let stats = band_stats(cfg, &m)?;
    let raw_train = m.load_split(Split::Train)?;
    let weights = class_weights_for(&raw_train, cfg.model.num_classes, cfg.train.class_weights)?;
    write_json(&cfg.out.join("class_weights.json"), &weights.to_json(&m.classes)?)?;
    let train = prepared(raw_train, stats.as_ref())?;
    let val = optional_split(&m, Split::Val)?.map(|v| prepared(v, stats.as_ref())).transpose()?;

    let mut trainer = Trainer::new(cfg.model.clone(), cfg.train.clone(), weights)?;
    if let Some(path) = &cfg.resume {
        trainer.load_checkpoint(path)?;
        log::info!("resuming after epoch {}", trainer.epoch);
    }
    let log = trainer.fit(&train, val.as_deref(), Some(&cfg.out))?;
    let reports: serde_json::Map<String, Value> = log
        .final_reports
        .iter()
        .map(|(split, r)| (split.clone(), serde_json::to_value(r).expect("report serializes")))
        .collect();
    write_json(&cfg.out.join("final_metrics.json"), &Value::Object(reports.clone()))?;
    Ok(json!({
        "command": "train",
        "epochs": trainer.epoch,
        "final_train_loss": log.records.last().map(|r| r.train_loss),
        "best_val_macro_f1": trainer.best_val,
        "reports": reports,
    }))
}

pub fn evaluate(cfg: &RunConfig) -> Result<Value, CliError> {
    let m = manifest(cfg, "evaluate")?;
    let stats = band_stats(cfg, &m)?;
    let weights = training_weights(cfg, &m)?;
    let model = load_model(cfg, "evaluate")?;
    let samples = prepared(m.load_split(cfg.split)?, stats.as_ref())?;
    let eval = evaluate_split(&model, &samples, &cfg.train.loss, &weights)?;
    let split = cfg.split;
    write_text(&cfg.out.join(format!("metrics_{split}.csv")), &eval.report.to_csv())?;
    write_text(&cfg.out.join(format!("confusion_{split}.csv")), &eval.confusion.to_csv())?;
    let summary = json!({
        "command": "evaluate",
        "split": split,
        "patches": samples.len(),
        "loss": eval.loss,
        "metrics": eval.report,
    });
    write_json(&cfg.out.join(format!("metrics_{split}.json")), &summary)?;
    Ok(summary)
}

pub fn predict(cfg: &RunConfig) -> Result<Value, CliError> {
    let image_path = required(&cfg.image, "image", "predict")?;
    let image = read_image(image_path)?;
    let [bands, h, w] = *image.shape() else {
        return Err(CliError::usage(format!("image must be bands×H×W, got {:?}", image.shape())));
    };
    let stats = if cfg.standardize {
        let m = cfg.manifest.as_ref().ok_or_else(|| {
            CliError::usage("predict standardizes with the manifest's band statistics; set `manifest` or standardize=false")
        })?;
        band_stats(cfg, &manifest_for_stats(m, cfg)?)?
    } else {
        None
    };
    let model = load_model(cfg, "predict")?;
    let id = image_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "patch".into());
    let sample = PatchSample::new(id.clone(), image, Mask::new(h, w, vec![0; h * w])?, cfg.model.num_classes)?;
    let sample = prepared(vec![sample], stats.as_ref())?.remove(0);
    let batch = sample.image.reshape(&[1, bands, h, w])?;
    let labels = argmax_classes(&model.logits(&batch)?)?;
    let mut histogram = vec![0u64; cfg.model.num_classes];
    for &l in &labels {
        histogram[l as usize - 1] += 1;
    }
    let path = cfg.out.join(format!("{id}.msk"));
    write_mask(&path, &Mask::new(h, w, labels)?)?;
    Ok(json!({ "command": "predict", "mask": path, "height": h, "width": w, "class_pixels": histogram }))
}

fn manifest_for_stats(path: &Path, cfg: &RunConfig) -> Result<Manifest, CliError> {
    let m = Manifest::load(path)?;
    if m.band_count != cfg.model.in_bands {
        return Err(CliError::usage(format!(
            "manifest has {} bands, model expects {}",
            m.band_count, cfg.model.in_bands
        )));
    }
    Ok(m)
}

pub fn gradcheck(cfg: &RunConfig) -> Result<Value, CliError> {
    if cfg.gradcheck_seeds == 0 {
        return Err(CliError::usage("gradcheck_seeds must be positive"));
    }
    let suite = gradcheck_suite(0..cfg.gradcheck_seeds)?;
    let worst = suite.worst().expect("at least one check ran");
    let per_check: serde_json::Map<String, Value> =
        suite.worst_per_check().into_iter().map(|(n, e)| (n.to_string(), json!(e))).collect();
    let summary = json!({
        "command": "gradcheck",
        "seeds": cfg.gradcheck_seeds,
        "worst_check": worst.name,
        "worst_seed": worst.seed,
        "max_rel_error": worst.max_rel_error,
        "tolerance": GRADCHECK_TOLERANCE,
        "per_check": per_check,
    });
    write_json(&cfg.out.join("gradcheck.json"), &summary)?;
    if !(worst.max_rel_error < GRADCHECK_TOLERANCE) {
        return Err(CliError::runtime(format!(
            "{} (seed {}) has relative error {:.3e} ≥ {GRADCHECK_TOLERANCE:e}",
            worst.name, worst.seed, worst.max_rel_error
        )));
    }
    Ok(summary)
}
