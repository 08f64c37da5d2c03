//! The training loop for one (dataset variant, feedback type) cell: Adam,
//! an exponentially decaying learning rate, deterministic shuffling,
//! resumable checkpoints, and per-step loss logging.
//!
//! All randomness (initialization and shuffling) flows from the single run
//! seed, and the batch schedule is a pure function of (seed, epoch), so a
//! run is reproducible on the same platform and can be resumed
//! bit-exactly from a checkpoint.

use std::path::Path;
use std::time::Instant;

use ndarray::{Array4, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::Graph;
use crate::decoy::{DatasetBundle, Split, Variant};
use crate::model::{
    attach_forward, insert_params, read_container, write_container, ModelError, ModelParameters,
    NetworkConfig,
};
use crate::objectives::{
    attach_classification_loss, attach_explanation_loss, attach_l2, feedback_to_penalty_mask,
    masks_to_node, total_loss, FeedbackType, LossBreakdown, ObjectiveError,
};
use crate::saliency::attach_gradcam;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("bundle mismatch: {0}")]
    BundleMismatch(String),
    #[error("NaN loss at step {step} (epoch {epoch})")]
    NanLoss { step: usize, epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Hyperparameters for one training run.
#[derive(Clone, PartialEq, Debug, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub dataset_variant: Variant,
    pub feedback_type: FeedbackType,
    pub epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Multiplicative factor per epoch; the rate at epoch e is exactly
    /// `initial_lr * lr_decay^e`.
    pub lr_decay: f64,
    /// L2 coefficient on `sum(theta^2)` inside the loss.
    pub lambda: f64,
    pub explanation_weight: f64,
    pub seed: u64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_variant: Variant::Random,
            feedback_type: FeedbackType::None,
            epochs: 15,
            batch_size: 128,
            initial_lr: 1e-3,
            lr_decay: 0.9,
            lambda: 1e-4,
            explanation_weight: 1.0,
            seed: 7,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.initial_lr <= 0.0 {
            return Err(TrainError::InvalidConfig("initial_lr must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TrainError::InvalidConfig("lr_decay must be in (0, 1]".into()));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(TrainError::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if self.lambda < 0.0 || self.explanation_weight < 0.0 {
            return Err(TrainError::InvalidConfig(
                "lambda and explanation_weight must be nonnegative".into(),
            ));
        }
        self.network.validate()?;
        Ok(())
    }

    /// Learning rate at a given epoch: `initial_lr * lr_decay^epoch`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// Deterministic per-epoch permutation of `0..n`: Fisher-Yates driven by a
/// ChaCha8 stream keyed by the run seed XOR a fixed multiple of the epoch.
pub fn shuffle_schedule(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let key = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub breakdown: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub mean_explanation: f64,
    /// Argmax accuracy over a fixed leading slice of the training bundle;
    /// a progress signal only, never used for decisions.
    pub validation_accuracy: f64,
    pub wall_clock_secs: f64,
}

/// Everything a run recorded: one entry per optimizer step, one per epoch,
/// and the saliency instrumentation counter.
#[derive(Clone, Debug, Default)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Number of saliency-graph constructions during training; exactly 0
    /// for feedback type `none`.
    pub saliency_builds: usize,
    pub total_secs: f64,
}

impl TrainingLog {
    /// Steps CSV: `step,classification,explanation,l2,total`.
    pub fn write_steps_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("step,classification,explanation,l2,total\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{:.9},{:.9},{:.9},{:.9}\n",
                r.step,
                r.breakdown.classification,
                r.breakdown.explanation,
                r.breakdown.l2,
                r.breakdown.total
            ));
        }
        std::fs::write(path, out)
    }

    /// Epochs CSV: `epoch,learning_rate,mean_explanation,validation_accuracy,seconds`.
    pub fn write_epochs_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut out = String::from("epoch,learning_rate,mean_explanation,validation_accuracy,seconds\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.9e},{:.9},{:.6},{:.3}\n",
                r.epoch, r.learning_rate, r.mean_explanation, r.validation_accuracy, r.wall_clock_secs
            ));
        }
        std::fs::write(path, out)
    }
}

struct Adam<T: Scalar> {
    m: Vec<ArrayD<T>>,
    v: Vec<ArrayD<T>>,
    t: u64,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(params: &ModelParameters<T>) -> Self {
        let zeros = |p: &ModelParameters<T>| {
            p.entries().iter().map(|(_, a)| ArrayD::zeros(a.raw_dim())).collect()
        };
        Self { m: zeros(params), v: zeros(params), t: 0 }
    }

    fn step(&mut self, params: &mut ModelParameters<T>, grads: &[ArrayD<T>], lr: f64) {
        self.t += 1;
        let b1 = T::from_f64_lossy(Self::BETA1);
        let b2 = T::from_f64_lossy(Self::BETA2);
        let one = T::one();
        let eps = T::from_f64_lossy(Self::EPS);
        let corr1 = T::from_f64_lossy(1.0 - Self::BETA1.powi(self.t as i32));
        let corr2 = T::from_f64_lossy(1.0 - Self::BETA2.powi(self.t as i32));
        let lr_t = T::from_f64_lossy(lr);
        for ((entry, m), (v, grad)) in params
            .entries_mut()
            .iter_mut()
            .zip(&mut self.m)
            .zip(self.v.iter_mut().zip(grads))
        {
            let theta = entry.1.as_slice_mut().unwrap();
            let m = m.as_slice_mut().unwrap();
            let v = v.as_slice_mut().unwrap();
            let gslice = grad.as_slice().unwrap();
            for i in 0..theta.len() {
                let g = gslice[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                let mhat = m[i] / corr1;
                let vhat = v[i] / corr2;
                theta[i] = theta[i] - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Stateful trainer allowing step-at-a-time execution and bit-exact resume.
pub struct Trainer<'d, T: Scalar> {
    config: TrainConfig,
    bundle: &'d DatasetBundle,
    params: ModelParameters<T>,
    adam: Adam<T>,
    epoch: usize,
    step_in_epoch: usize,
    log: TrainingLog,
    epoch_expl_sum: f64,
    epoch_started: Instant,
    run_started: Instant,
}

impl<'d, T: Scalar> Trainer<'d, T> {
    pub fn new(config: TrainConfig, bundle: &'d DatasetBundle) -> Result<Self, TrainError> {
        config.validate()?;
        if bundle.split != Split::Train {
            return Err(TrainError::BundleMismatch("training requires the train split".into()));
        }
        if bundle.spec.variant != config.dataset_variant {
            return Err(TrainError::BundleMismatch(format!(
                "bundle variant {} does not match config variant {}",
                bundle.spec.variant, config.dataset_variant
            )));
        }
        if bundle.is_empty() {
            return Err(TrainError::BundleMismatch("empty bundle".into()));
        }
        let params = ModelParameters::init(&config.network, config.seed)?;
        let adam = Adam::new(&params);
        Ok(Self {
            config,
            bundle,
            params,
            adam,
            epoch: 0,
            step_in_epoch: 0,
            log: TrainingLog::default(),
            epoch_expl_sum: 0.0,
            epoch_started: Instant::now(),
            run_started: Instant::now(),
        })
    }

    pub fn params(&self) -> &ModelParameters<T> {
        &self.params
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    fn global_step(&self) -> usize {
        self.epoch * self.config.steps_per_epoch(self.bundle.len()) + self.step_in_epoch
    }

    /// Runs one optimizer step. Returns `None` once all epochs finished.
    pub fn step(&mut self) -> Result<Option<StepRecord>, TrainError> {
        if self.is_done() {
            return Ok(None);
        }
        let n = self.bundle.len();
        let steps_per_epoch = self.config.steps_per_epoch(n);
        let perm = shuffle_schedule(self.config.seed, self.epoch, n);
        let lo = self.step_in_epoch * self.config.batch_size;
        let hi = (lo + self.config.batch_size).min(n);
        let indices = &perm[lo..hi];

        let side = self.config.network.input_side;
        let b = indices.len();
        let scale = T::from_f64_lossy(1.0 / 255.0);
        let mut batch = Array4::<T>::zeros((b, 1, side, side));
        let mut labels = Vec::with_capacity(b);
        for (bi, &ix) in indices.iter().enumerate() {
            let img = &self.bundle.images[ix];
            for ((i, j), &p) in img.pixels.indexed_iter() {
                batch[(bi, 0, i, j)] = T::from_f64_lossy(f64::from(p)) * scale;
            }
            labels.push(u32::from(img.label));
        }

        let mut g: Graph<T> = Graph::new();
        let x = g.constant(batch.into_dyn());
        let pv = insert_params(&mut g, &self.params);
        let f = attach_forward(&mut g, &self.config.network, &pv, x);
        let ce = attach_classification_loss(&mut g, f.logits, &labels);
        let l2 = attach_l2(&mut g, &pv);

        let explanation = if self.config.feedback_type == FeedbackType::None {
            None
        } else {
            let masks: Vec<_> = indices
                .iter()
                .map(|&ix| {
                    feedback_to_penalty_mask(&self.bundle.images[ix], self.config.feedback_type)
                        .expect("feedback type has a mask")
                })
                .collect();
            let sal = attach_gradcam(&mut g, &f, &labels, side);
            self.log.saliency_builds += 1;
            let mask_node = masks_to_node(&mut g, &masks);
            Some(attach_explanation_loss(&mut g, &sal, mask_node))
        };

        let mut terms = vec![ce];
        if let Some(expl) = explanation {
            terms.push(g.scalar_mul(expl, T::from_f64_lossy(self.config.explanation_weight)));
        }
        terms.push(g.scalar_mul(l2, T::from_f64_lossy(self.config.lambda)));
        let total = g.add_n(&terms);

        let step = self.global_step();
        let breakdown = total_loss(
            g.scalar_value(ce).to_f64_lossy(),
            explanation.map_or(0.0, |e| g.scalar_value(e).to_f64_lossy()),
            g.scalar_value(l2).to_f64_lossy(),
            self.config.lambda,
            self.config.explanation_weight,
            self.config.feedback_type,
        )?;
        if !breakdown.total.is_finite() {
            return Err(TrainError::NanLoss { step, epoch: self.epoch });
        }

        let grads = g.backward(total, &pv.0);
        let grad_arrays: Vec<ArrayD<T>> = grads
            .iter()
            .zip(self.params.entries())
            .map(|(gv, (_, p))| match gv {
                Some(v) => g.value(*v).clone(),
                None => ArrayD::zeros(p.raw_dim()),
            })
            .collect();
        self.adam.step(&mut self.params, &grad_arrays, self.config.learning_rate(self.epoch));
        if !self.params.all_finite() {
            return Err(TrainError::NanLoss { step, epoch: self.epoch });
        }

        self.epoch_expl_sum += breakdown.explanation;
        let record = StepRecord { step, breakdown };
        self.log.steps.push(record.clone());

        self.step_in_epoch += 1;
        if self.step_in_epoch == steps_per_epoch {
            let val_n = n.min(1000);
            let validation_accuracy = subset_accuracy(&self.params, self.bundle, val_n)?;
            self.log.epochs.push(EpochRecord {
                epoch: self.epoch,
                learning_rate: self.config.learning_rate(self.epoch),
                mean_explanation: self.epoch_expl_sum / steps_per_epoch as f64,
                validation_accuracy,
                wall_clock_secs: self.epoch_started.elapsed().as_secs_f64(),
            });
            self.epoch += 1;
            self.step_in_epoch = 0;
            self.epoch_expl_sum = 0.0;
            self.epoch_started = Instant::now();
        }
        Ok(Some(record))
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        while self.step()?.is_some() {}
        self.log.total_secs = self.run_started.elapsed().as_secs_f64();
        Ok(())
    }

    pub fn into_output(self) -> (ModelParameters<T>, TrainingLog) {
        (self.params, self.log)
    }

    /// Writes the full optimizer state (parameters, Adam moments, position)
    /// so a run can continue exactly where it stopped.
    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let mut entries: Vec<(String, ArrayD<T>)> = self.params.entries().to_vec();
        for ((name, _), m) in self.params.entries().iter().zip(&self.adam.m) {
            entries.push((format!("adam.m.{name}"), m.clone()));
        }
        for ((name, _), v) in self.params.entries().iter().zip(&self.adam.v) {
            entries.push((format!("adam.v.{name}"), v.clone()));
        }
        let scalar = |x: f64| ArrayD::from_elem(IxDyn(&[1]), T::from_f64_lossy(x));
        entries.push(("meta.adam_t".into(), scalar(self.adam.t as f64)));
        entries.push(("meta.epoch".into(), scalar(self.epoch as f64)));
        entries.push(("meta.step_in_epoch".into(), scalar(self.step_in_epoch as f64)));
        write_container(path, &self.config.network, &entries)?;
        Ok(())
    }

    /// Restores a trainer from [`Trainer::save_checkpoint`] output. The
    /// config and bundle must match the original run for the continuation
    /// to be exact.
    pub fn resume(
        config: TrainConfig,
        bundle: &'d DatasetBundle,
        path: &Path,
    ) -> Result<Self, TrainError> {
        let mut trainer = Self::new(config, bundle)?;
        let (net, entries) = read_container::<T>(path)?;
        if net != trainer.config.network {
            return Err(TrainError::BundleMismatch(
                "checkpoint network config does not match".into(),
            ));
        }
        let find = |name: &str| -> Result<&ArrayD<T>, TrainError> {
            entries
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, a)| a)
                .ok_or_else(|| TrainError::BundleMismatch(format!("checkpoint missing {name}")))
        };
        let names: Vec<String> =
            trainer.params.entries().iter().map(|(n, _)| n.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            trainer.params.set(name, find(name)?.clone());
            trainer.adam.m[i] = find(&format!("adam.m.{name}"))?.clone();
            trainer.adam.v[i] = find(&format!("adam.v.{name}"))?.clone();
        }
        trainer.adam.t = find("meta.adam_t")?[[0]].to_f64_lossy() as u64;
        trainer.epoch = find("meta.epoch")?[[0]].to_f64_lossy() as usize;
        trainer.step_in_epoch = find("meta.step_in_epoch")?[[0]].to_f64_lossy() as usize;
        Ok(trainer)
    }
}

/// Argmax accuracy over the leading `limit` images; forward passes only.
fn subset_accuracy<T: Scalar>(
    params: &ModelParameters<T>,
    bundle: &DatasetBundle,
    limit: usize,
) -> Result<f64, TrainError> {
    let side = params.config.input_side;
    let scale = T::from_f64_lossy(1.0 / 255.0);
    let mut correct = 0usize;
    let n = bundle.len().min(limit);
    for chunk in bundle.images[..n].chunks(200) {
        let b = chunk.len();
        let mut batch = Array4::<T>::zeros((b, 1, side, side));
        for (bi, img) in chunk.iter().enumerate() {
            for ((i, j), &p) in img.pixels.indexed_iter() {
                batch[(bi, 0, i, j)] = T::from_f64_lossy(f64::from(p)) * scale;
            }
        }
        let mut g: Graph<T> = Graph::new();
        let x = g.constant(batch.into_dyn());
        let pv = insert_params(&mut g, params);
        let f = attach_forward(&mut g, &params.config, &pv, x);
        let logits = g.value(f.logits);
        for (bi, img) in chunk.iter().enumerate() {
            let mut best = T::neg_infinity();
            let mut arg = 0usize;
            for k in 0..params.config.num_classes {
                if logits[[bi, k]] > best {
                    best = logits[[bi, k]];
                    arg = k;
                }
            }
            correct += usize::from(arg == img.label as usize);
        }
    }
    Ok(correct as f64 / n as f64)
}

/// Trains one configuration to completion.
pub fn train<T: Scalar>(
    config: &TrainConfig,
    bundle: &DatasetBundle,
) -> Result<(ModelParameters<T>, TrainingLog), TrainError> {
    let mut trainer = Trainer::new(config.clone(), bundle)?;
    trainer.run()?;
    Ok(trainer.into_output())
}
