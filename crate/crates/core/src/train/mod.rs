//! Training loop: step-decay schedule, batching, optimization, validation
//! and checkpointing.

mod optim;

pub use optim::{adam_step, clip_grad_norm, sgd_step, OptimizerConfig, OptimizerState};

use std::collections::HashMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flip, label_distribution, PatchSample};
use crate::error::{Error, Result};
use crate::loss::{class_weights_from_counts, ClassWeights, LossKind, IGNORE};
use crate::metrics::{argmax_classes, ConfusionMatrix, MetricReport};
use crate::model::{ModelConfig, ResAttUNet};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint};
use crate::nn::ParameterStore;
use crate::tensor::{Tape, Tensor};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "epoch,lr,train_loss,val_loss,seconds";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// Inverse log frequency over the training split's labels.
    #[default]
    Frequency,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_interval_epochs: usize,
    pub batch_size: usize,
    pub loss: LossKind,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub shuffle: bool,
    /// Random horizontal/vertical flips of training patches.
    pub flips: bool,
    pub class_weights: WeightMode,
    /// Record elapsed seconds in the log. Off makes logs byte-comparable.
    pub log_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            initial_lr: 1e-3,
            decay_factor: 0.5,
            decay_interval_epochs: 40,
            batch_size: 8,
            loss: LossKind::WeightedXent,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            grad_clip: Some(5.0),
            shuffle: false,
            flips: false,
            class_weights: WeightMode::Frequency,
            log_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!("decay_factor must be in (0, 1], got {}", self.decay_factor)));
        }
        if self.decay_interval_epochs == 0 {
            return Err(Error::Config("decay_interval_epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config(format!("initial_lr must be ≥ 0, got {}", self.initial_lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        self.optimizer.validate()
    }
}

/// `initial_lr · decay_factor^⌊epoch / decay_interval⌋` for a 0-based epoch.
pub fn lr_schedule(cfg: &TrainConfig, epoch: usize) -> f64 {
    let steps = (epoch / cfg.decay_interval_epochs) as i32;
    cfg.initial_lr * cfg.decay_factor.powi(steps)
}

/// Class weights for a training set according to `mode`.
pub fn class_weights_for(samples: &[PatchSample], num_classes: usize, mode: WeightMode) -> Result<ClassWeights> {
    match mode {
        WeightMode::Uniform => Ok(ClassWeights::uniform(num_classes)),
        WeightMode::Frequency => {
            let dist = label_distribution(samples.iter().map(|s| &s.mask), num_classes)?;
            class_weights_from_counts(&dist.counts)
        }
    }
}

/// Stacks equally sized samples into a `B×bands×H×W` batch and its labels.
pub fn make_batch(samples: &[&PatchSample]) -> Result<(Tensor<f32>, Vec<u8>)> {
    let first = samples.first().ok_or_else(|| Error::Empty("batch".into()))?;
    let shape = first.image.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * first.image.numel());
    let mut labels = Vec::with_capacity(samples.len() * first.mask.data.len());
    for s in samples {
        if s.image.shape() != shape.as_slice() {
            return Err(Error::shape(
                "batch",
                format!("{} has shape {:?}, batch uses {shape:?}", s.id, s.image.shape()),
            ));
        }
        data.extend_from_slice(s.image.data());
        labels.extend_from_slice(&s.mask.data);
    }
    let mut full = vec![samples.len()];
    full.extend_from_slice(&shape);
    Ok((Tensor::new(full, data)?, labels))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0-based epoch index.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let val = self.val_loss.map(|v| v.to_string()).unwrap_or_default();
        format!("{},{},{},{},{:.3}", self.epoch, self.lr, self.train_loss, val, self.seconds)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// Metric reports after the last epoch, keyed by split name.
    pub final_reports: Vec<(String, MetricReport)>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{LOG_HEADER}\n");
        for r in &self.records {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub report: MetricReport,
    pub confusion: ConfusionMatrix,
    /// Weight-mass-weighted mean loss over patches with labeled pixels.
    pub loss: Option<f64>,
}

/// Scores `model` on `samples` one patch at a time, in order. Parameters
/// are only read.
pub fn evaluate_split(
    model: &ResAttUNet<f32>,
    samples: &[PatchSample],
    loss: &LossKind,
    weights: &ClassWeights,
) -> Result<Evaluation> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let k = model.config().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    let (mut total, mut mass) = (0.0, 0.0);
    for s in samples {
        let (x, labels) = make_batch(&[s])?;
        let logits = model.logits(&x)?;
        let pred = argmax_classes(&logits)?;
        cm.accumulate(&labels, &pred)?;
        if labels.iter().any(|&l| l != IGNORE) {
            let out = loss.compute(&logits, &labels, weights)?;
            total += out.loss.value * out.loss.weight_mass;
            mass += out.loss.weight_mass;
        }
    }
    Ok(Evaluation {
        report: MetricReport::from_confusion(&cm)?,
        confusion: cm,
        loss: (mass > 0.0).then(|| total / mass),
    })
}

/// Encodes a `u64` exactly as four 16-bit limbs in an f32 tensor.
fn u64_record(x: u64) -> Tensor<f32> {
    Tensor::from_fn(&[4], |i| ((x >> (16 * i)) & 0xffff) as f32)
}

fn u64_from_record(t: &Tensor<f32>) -> Result<u64> {
    let limbs = t.data();
    if t.shape() != [4] || limbs.iter().any(|&l| !(0.0..65536.0).contains(&l) || l.fract() != 0.0) {
        return Err(Error::Malformed {
            what: "checkpoint",
            detail: format!("bad integer record {:?}", t.shape()),
        });
    }
    Ok(limbs.iter().enumerate().map(|(i, &l)| (l as u64) << (16 * i)).sum())
}

/// Replaces every parameter of `store` with the same-named record. Nothing
/// is modified unless every parameter is present with a matching shape.
pub fn load_weights(store: &mut ParameterStore<f32>, records: &[(String, Tensor<f32>)]) -> Result<()> {
    let by_name: HashMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let mut values = Vec::with_capacity(store.len());
    for p in store.iter() {
        let t = by_name.get(p.name.as_str()).ok_or_else(|| Error::Malformed {
            what: "checkpoint",
            detail: format!("missing parameter {}", p.name),
        })?;
        if t.shape() != p.value.shape() {
            return Err(Error::Malformed {
                what: "checkpoint",
                detail: format!("{} has shape {:?}, model expects {:?}", p.name, t.shape(), p.value.shape()),
            });
        }
        values.push((*t).clone());
    }
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
    Ok(())
}

/// Owns the model and optimizer for a training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: ResAttUNet<f32>,
    pub optimizer: OptimizerState<f32>,
    pub weights: ClassWeights,
    /// Completed epochs.
    pub epoch: usize,
    /// Best validation macro F1 seen so far.
    pub best_val: Option<f64>,
}

impl Trainer {
    /// Fresh run; the model is initialized from `cfg.seed`.
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig, weights: ClassWeights) -> Result<Self> {
        cfg.validate()?;
        if weights.num_classes() != model_cfg.num_classes {
            return Err(Error::Config(format!(
                "{} class weights for a {}-class model",
                weights.num_classes(),
                model_cfg.num_classes
            )));
        }
        let model = ResAttUNet::new(model_cfg, cfg.seed)?;
        let optimizer = OptimizerState::new(&cfg.optimizer, model.params());
        Ok(Trainer {
            cfg,
            model,
            optimizer,
            weights,
            epoch: 0,
            best_val: None,
        })
    }

    /// Batch order for `epoch`: manifest order, or a shuffle seeded by
    /// `seed + epoch`. Also returns per-sample flip choices.
    fn epoch_plan(&self, n: usize, epoch: usize) -> (Vec<usize>, Vec<(bool, bool)>) {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(epoch as u64));
        if self.cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let flips = (0..n)
            .map(|_| if self.cfg.flips { (rng.gen(), rng.gen()) } else { (false, false) })
            .collect();
        (order, flips)
    }

    /// One pass over `train`. Returns the weight-mass-weighted mean batch
    /// loss, or `None` when every batch was skipped.
    pub fn train_epoch(&mut self, train: &[PatchSample]) -> Result<Option<f64>> {
        if train.is_empty() {
            return Err(Error::Empty("train split".into()));
        }
        let lr = lr_schedule(&self.cfg, self.epoch);
        let (order, flips) = self.epoch_plan(train.len(), self.epoch);
        let (mut total, mut mass) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(self.cfg.batch_size).enumerate() {
            let flipped: Vec<PatchSample>;
            let batch: Vec<&PatchSample> = if self.cfg.flips {
                flipped = chunk
                    .iter()
                    .zip(&flips)
                    .map(|(&i, &(h, v))| flip(&train[i], h, v))
                    .collect();
                flipped.iter().collect()
            } else {
                chunk.iter().map(|&i| &train[i]).collect()
            };
            let (x, labels) = make_batch(&batch)?;
            if labels.iter().all(|&l| l == IGNORE) {
                log::warn!("epoch {} batch {bi}: no labeled pixels, skipped", self.epoch);
                continue;
            }
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let (logits, bound) = self.model.forward(&mut tape, xv)?;
            let out = self.cfg.loss.compute(tape.value(logits), &labels, &self.weights)?;
            let grads = tape.backward(logits, out.grad)?;
            let params = self.model.params_mut();
            params.zero_grads();
            params.accumulate_grads(&grads, &bound);
            if let Some(c) = self.cfg.grad_clip {
                clip_grad_norm(params, c);
            }
            self.optimizer.step(&self.cfg.optimizer, params, lr)?;
            total += out.loss.value * out.loss.weight_mass;
            mass += out.loss.weight_mass;
        }
        self.epoch += 1;
        Ok((mass > 0.0).then(|| total / mass))
    }

    pub fn evaluate(&self, samples: &[PatchSample]) -> Result<Evaluation> {
        evaluate_split(&self.model, samples, &self.cfg.loss, &self.weights)
    }

    /// Trains until `cfg.epochs` epochs are complete.
    pub fn fit(&mut self, train: &[PatchSample], val: Option<&[PatchSample]>, out_dir: Option<&Path>) -> Result<TrainLog> {
        self.fit_to(self.cfg.epochs, train, val, out_dir)
    }

    /// Trains until `end_epoch` epochs are complete. With `out_dir`, the log
    /// is appended per epoch, `last.ckpt` is refreshed after every epoch and
    /// `best.ckpt` whenever validation macro F1 improves.
    pub fn fit_to(
        &mut self,
        end_epoch: usize,
        train: &[PatchSample],
        val: Option<&[PatchSample]>,
        out_dir: Option<&Path>,
    ) -> Result<TrainLog> {
        let val = val.filter(|v| !v.is_empty());
        let mut log_file = match out_dir {
            Some(dir) => Some(self.open_log(dir)?),
            None => None,
        };
        let mut log = TrainLog::default();
        while self.epoch < end_epoch.min(self.cfg.epochs) {
            let started = Instant::now();
            let epoch = self.epoch;
            let lr = lr_schedule(&self.cfg, epoch);
            let train_loss = self.train_epoch(train)?.unwrap_or(f64::NAN);
            let mut val_loss = None;
            let mut improved = false;
            if let Some(v) = val {
                let eval = self.evaluate(v)?;
                val_loss = eval.loss;
                let f1 = eval.report.macro_f1;
                if self.best_val.is_none_or(|b| f1 > b) {
                    self.best_val = Some(f1);
                    improved = true;
                }
            }
            let seconds = if self.cfg.log_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            };
            let record = EpochRecord {
                epoch,
                lr,
                train_loss,
                val_loss,
                seconds,
            };
            log::info!("{}", record.csv_row());
            if let (Some(f), Some(dir)) = (log_file.as_mut(), out_dir) {
                writeln!(f, "{}", record.csv_row()).map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
                f.flush().map_err(|e| Error::io(dir.join(LOG_FILE), e))?;
                self.save_checkpoint(dir.join(LAST_CHECKPOINT))?;
                if improved {
                    self.save_checkpoint(dir.join(BEST_CHECKPOINT))?;
                }
            }
            log.records.push(record);
        }
        if self.epoch >= self.cfg.epochs {
            log.final_reports.push(("train".into(), self.evaluate(train)?.report));
            if let Some(v) = val {
                log.final_reports.push(("val".into(), self.evaluate(v)?.report));
            }
        }
        Ok(log)
    }

    fn open_log(&self, dir: &Path) -> Result<File> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        if self.epoch > 0 && path.exists() {
            return File::options().append(true).open(&path).map_err(|e| Error::io(&path, e));
        }
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
        Ok(f)
    }

    /// Parameters, optimizer buffers, epoch counter, Adam step count and
    /// best validation score.
    pub fn checkpoint_records(&self) -> Vec<(String, Tensor<f32>)> {
        let store = self.model.params();
        let mut records: Vec<(String, Tensor<f32>)> =
            store.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        records.extend(self.optimizer.records(store));
        records.push(("meta.epoch".into(), u64_record(self.epoch as u64)));
        if let OptimizerState::Adam { t, .. } = &self.optimizer {
            records.push(("meta.adam_t".into(), u64_record(*t)));
        }
        if let Some(b) = self.best_val {
            records.push(("meta.best_val".into(), u64_record(b.to_bits())));
        }
        records
    }

    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.checkpoint_records())
    }

    /// Restores a state written by [`Trainer::save_checkpoint`]. On error
    /// the trainer is left untouched.
    pub fn load_checkpoint(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let records = load_checkpoint(path)?;
        self.restore(&records)
    }

    pub fn restore(&mut self, records: &[(String, Tensor<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &Tensor<f32>> = records.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let missing = |name: String| Error::Malformed {
            what: "checkpoint",
            detail: format!("missing record {name}"),
        };
        let mut store = self.model.params().clone();
        load_weights(&mut store, records)?;
        let buffers = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            store
                .iter()
                .map(|p| {
                    let name = format!("{prefix}.{}", p.name);
                    let t = by_name.get(name.as_str()).ok_or_else(|| missing(name.clone()))?;
                    if t.shape() != p.value.shape() {
                        return Err(Error::Malformed {
                            what: "checkpoint",
                            detail: format!("{name} has shape {:?}", t.shape()),
                        });
                    }
                    Ok((*t).clone())
                })
                .collect()
        };
        let meta = |name: &str| -> Result<u64> {
            u64_from_record(by_name.get(name).ok_or_else(|| missing(name.into()))?)
        };
        let optimizer = match self.optimizer {
            OptimizerState::Adam { .. } => OptimizerState::Adam {
                t: meta("meta.adam_t")?,
                m: buffers("adam.m")?,
                v: buffers("adam.v")?,
            },
            OptimizerState::Sgd { .. } => OptimizerState::Sgd {
                velocity: buffers("sgd.velocity")?,
            },
        };
        let epoch = meta("meta.epoch")? as usize;
        let best_val = match by_name.get("meta.best_val") {
            Some(t) => Some(f64::from_bits(u64_from_record(t)?)),
            None => None,
        };
        *self.model.params_mut() = store;
        self.optimizer = optimizer;
        self.epoch = epoch;
        self.best_val = best_val;
        Ok(())
    }
}
