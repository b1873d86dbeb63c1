//! Joint objective, update assembly and the training loop.

mod diagnostics;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use diagnostics::{bimodality_metric, central_band_mass, sign_flip_rate};

use crate::binlayer::{BiFCLayer, GradVariant};
use crate::data::Dataset;
use crate::em;
use crate::error::{Error, Result};
use crate::model::{argmax_rows, Layer, Model};
use crate::nn::{adam_step, cosine_lr, softmax_cross_entropy, AdamConfig, AdamMoments, Mode, ParamKind, Tensor};
use crate::real::Real;

/// Direction in which the mixture term enters the weight update.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmSign {
    /// Weights move toward the responsibility-weighted means.
    #[default]
    Attract,
    /// `+τ·EM(w)` added to the descent direction as printed, which pushes weights toward
    /// the interval center.
    Literal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Reconstruction-loss weight.
    pub lambda: f64,
    /// Mixture-attraction weight.
    pub tau: f64,
    pub base_lr: f64,
    /// Learning rate reached at the end of the cosine schedule.
    pub lr_floor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_variant: GradVariant,
    pub em_sign: EmSign,
    /// Run on a single thread.
    pub deterministic: bool,
    /// Per-coordinate Gaussian jitter applied to training clouds (0 disables it).
    pub jitter_sigma: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 1e-4,
            tau: 1e-3,
            base_lr: 1e-3,
            lr_floor: 0.0,
            epochs: 200,
            batch_size: 64,
            seed: 0,
            grad_variant: GradVariant::Analytic,
            em_sign: EmSign::Attract,
            deterministic: false,
            jitter_sigma: 0.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")))
            }
        };
        nonneg("lambda", self.lambda)?;
        nonneg("tau", self.tau)?;
        nonneg("base_lr", self.base_lr)?;
        nonneg("lr_floor", self.lr_floor)?;
        nonneg("jitter_sigma", self.jitter_sigma)?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch size must be >= 2, got {}", self.batch_size)));
        }
        Ok(())
    }
}

/// Loss terms of one evaluation of the joint objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// Cross-entropy.
    pub task: f64,
    /// Sum of the layer reconstruction losses (unweighted).
    pub reconstruction: f64,
    /// `task + λ·reconstruction`.
    pub total: f64,
}

impl LossParts {
    pub fn new(task: f64, reconstruction: f64, lambda: f64) -> Self {
        LossParts {
            task,
            reconstruction,
            total: task + lambda * reconstruction,
        }
    }
}

/// Joint objective on one batch, with batch statistics in the normalization layers.
///
/// Running statistics of `model` are left untouched.
pub fn total_loss<T: Real>(model: &Model<T>, x: &Tensor<T>, labels: &[usize], config: &TrainConfig) -> Result<LossParts> {
    let mut probe = model.clone();
    let (logits, _) = probe.forward(x, Mode::Train)?;
    let (task, _) = softmax_cross_entropy(&logits, labels)?;
    Ok(LossParts::new(task.as_f64(), model.reconstruction_loss(), config.lambda))
}

/// Per-step descent direction for a binary layer's latent weights.
///
/// `task + λ·∂L_R/∂W ∓ τ·EM(W)`, where the mixture term is subtracted under
/// [`EmSign::Attract`] and added under [`EmSign::Literal`]. Responsibilities are evaluated
/// per weight from the channel's current mixture parameters.
pub fn assemble_weight_update<T: Real>(layer: &BiFCLayer<T>, task_grad: &Tensor<T>, config: &TrainConfig) -> Result<Tensor<T>> {
    layer.check_gmm()?;
    if task_grad.shape() != layer.weights().shape() {
        return Err(Error::shape(format!(
            "weight gradient {:?} for weights {:?}",
            task_grad.shape(),
            layer.weights().shape()
        )));
    }
    let rec = layer.grad_reconstruction_w(config.grad_variant);
    let lambda = config.lambda;
    let tau = match config.em_sign {
        EmSign::Attract => -config.tau,
        EmSign::Literal => config.tau,
    };
    let n = layer.in_features();
    let mut out = Tensor::zeros(task_grad.shape());
    for (j, gmm) in layer.gmm().iter().enumerate() {
        let range = j * n..(j + 1) * n;
        let w = &layer.weights().data()[range.clone()];
        let t = &task_grad.data()[range.clone()];
        let r = &rec.data()[range.clone()];
        let o = &mut out.data_mut()[range];
        for i in 0..n {
            let mut d = t[i].as_f64() + lambda * r[i].as_f64();
            if tau != 0.0 {
                let wi = w[i].as_f64();
                let resp = gmm.responsibility_or_nearest(wi);
                d += tau * em::em_force(wi, gmm, &resp);
            }
            o[i] = T::of(d);
        }
    }
    Ok(out)
}

/// Per-step descent direction for a binary layer's scales: `task + λ·∂L_R/∂α`.
pub fn assemble_alpha_update<T: Real>(layer: &BiFCLayer<T>, task_grad: &[T], config: &TrainConfig) -> Result<Vec<T>> {
    if task_grad.len() != layer.out_features() {
        return Err(Error::shape(format!(
            "{} scale gradients for {} channels",
            task_grad.len(),
            layer.out_features()
        )));
    }
    let rec = layer.grad_reconstruction_alpha(config.grad_variant);
    Ok(task_grad
        .iter()
        .zip(&rec)
        .map(|(&t, &r)| T::of(t.as_f64() + config.lambda * r.as_f64()))
        .collect())
}

/// One row of the training report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's batches.
    pub task_loss: f64,
    /// Summed reconstruction loss at epoch end.
    pub reconstruction_loss: f64,
    pub train_acc: f64,
    /// `None` when no test split was given.
    pub test_acc: Option<f64>,
    /// Central-band mass per binary layer, after the epoch's mixture refit.
    pub bimodality: Vec<f64>,
}

impl EpochRecord {
    pub fn mean_bimodality(&self) -> f64 {
        if self.bimodality.is_empty() {
            f64::NAN
        } else {
            self.bimodality.iter().sum::<f64>() / self.bimodality.len() as f64
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub records: Vec<EpochRecord>,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,lr,task_loss,reconstruction_loss,train_acc,test_acc,mean_bimodality";

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    /// CSV with the fixed columns of [`CSV_HEADER`](Self::CSV_HEADER) followed by one
    /// `bimodality_<layer>` column per binary layer. Floats print in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let layers = self.records.first().map_or(0, |r| r.bimodality.len());
        let mut s = String::from(Self::CSV_HEADER);
        for i in 0..layers {
            let _ = write!(s, ",bimodality_{i}");
        }
        s.push('\n');
        for r in &self.records {
            let test = r.test_acc.map(|v| v.to_string()).unwrap_or_default();
            let _ = write!(
                s,
                "{},{},{},{},{},{},{}",
                r.epoch,
                r.lr,
                r.task_loss,
                r.reconstruction_loss,
                r.train_acc,
                test,
                r.mean_bimodality()
            );
            for b in &r.bimodality {
                let _ = write!(s, ",{b}");
            }
            s.push('\n');
        }
        s
    }
}

/// Summary of one parameter tensor for the non-finite-loss dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub layer: usize,
    pub kind: ParamKind,
    pub min: f64,
    pub max: f64,
    pub non_finite: usize,
}

/// State captured when training aborts on a non-finite loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostic {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub task_loss: f64,
    pub reconstruction_loss: f64,
    pub params: Vec<ParamSummary>,
}

impl Diagnostic {
    fn capture<T: Real>(model: &Model<T>, epoch: usize, step: usize, lr: f64, task_loss: f64) -> Self {
        let mut params = Vec::new();
        for (i, layer) in model.layers().iter().enumerate() {
            for kind in layer.param_kinds() {
                let Some(v) = layer.param(kind) else { continue };
                let finite = v.iter().map(|x| x.as_f64()).filter(|x| x.is_finite());
                let (min, max) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
                params.push(ParamSummary {
                    layer: i,
                    kind,
                    min,
                    max,
                    non_finite: v.iter().filter(|x| !x.is_finite()).count(),
                });
            }
        }
        Diagnostic {
            epoch,
            step,
            lr,
            task_loss,
            reconstruction_loss: model.reconstruction_loss(),
            params,
        }
    }
}

/// Fraction of correct argmax predictions.
pub fn accuracy<T: Real>(model: &Model<T>, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Ok(f64::NAN);
    }
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, labels) = data.batch::<T>(&idx)?;
    let pred = argmax_rows(&model.predict(&x)?);
    Ok(pred.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
}

/// Trains `model` on `train`, evaluating on `test` after every epoch.
pub fn train<T: Real>(model: &mut Model<T>, train: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<TrainReport> {
    train_with_hook(model, train, test, config, |_, _| Ok(()))
}

/// [`train`] with a callback run after every epoch (checkpointing, logging).
pub fn train_with_hook<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    hook: impl FnMut(&EpochRecord, &Model<T>) -> Result<()> + Send,
) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if train.num_classes > model.spec().num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes, model {}",
            train.num_classes,
            model.spec().num_classes
        )));
    }
    if config.deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        pool.install(|| run(model, train, test, config, hook))
    } else {
        run(model, train, test, config, hook)
    }
}

fn run<T: Real>(
    model: &mut Model<T>,
    train: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut hook: impl FnMut(&EpochRecord, &Model<T>) -> Result<()>,
) -> Result<TrainReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut moments: Vec<BTreeMap<ParamKind, AdamMoments>> = model
        .layers()
        .iter()
        .map(|l| {
            l.param_kinds()
                .into_iter()
                .map(|k| (k, AdamMoments::new(l.param(k).map_or(0, <[T]>::len))))
                .collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..config.epochs {
        let lr = cosine_lr(epoch, config.epochs, config.base_lr, config.lr_floor);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let mut correct = 0usize;
        let mut seen = 0usize;
        // A trailing batch of one cloud cannot be batch-normalized and is skipped.
        for (step, idx) in order.chunks(config.batch_size).filter(|c| c.len() >= 2).enumerate() {
            let (mut x, labels) = train.batch::<T>(idx)?;
            if config.jitter_sigma > 0.0 {
                crate::data::jitter_tensor(&mut x, config.jitter_sigma, 5.0 * config.jitter_sigma, &mut rng);
            }
            let (logits, cache) = model.forward(&x, Mode::Train)?;
            let (loss, grad) = softmax_cross_entropy(&logits, &labels)?;
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    snapshot: Box::new(Diagnostic::capture(model, epoch, step, lr, loss)),
                });
            }
            loss_sum += loss;
            batches += 1;
            correct += argmax_rows(&logits).iter().zip(&labels).filter(|(p, l)| p == l).count();
            seen += labels.len();
            let grads = model.backward(&grad, &cache)?;
            drop(cache);
            apply_updates(model, grads, &mut moments, lr, config)?;
        }
        model.refit_gmm()?;
        let record = EpochRecord {
            epoch,
            lr,
            task_loss: loss_sum / batches.max(1) as f64,
            reconstruction_loss: model.reconstruction_loss(),
            train_acc: correct as f64 / seen.max(1) as f64,
            test_acc: test.map(|t| accuracy(model, t)).transpose()?,
            bimodality: model.binary_layers().map(bimodality_metric).collect(),
        };
        log::info!(
            "epoch {epoch}: lr {lr:.2e} loss {:.4} train {:.3} test {:?} band {:.4}",
            record.task_loss,
            record.train_acc,
            record.test_acc,
            record.mean_bimodality()
        );
        hook(&record, model)?;
        report.records.push(record);
    }
    Ok(report)
}

fn apply_updates<T: Real>(
    model: &mut Model<T>,
    grads: Vec<crate::nn::GradBundle<T>>,
    moments: &mut [BTreeMap<ParamKind, AdamMoments>],
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    for ((layer, mut bundle), layer_moments) in model.layers_mut().iter_mut().zip(grads).zip(moments) {
        for kind in layer.param_kinds() {
            let Some(g) = bundle.take(kind) else {
                return Err(Error::CacheMismatch(format!("missing {kind:?} gradient")));
            };
            let step: Vec<T> = match (&*layer, kind) {
                (Layer::Binary(b), ParamKind::Weight) => assemble_weight_update(b, &g, config)?.into_data(),
                (Layer::Binary(b), ParamKind::Alpha) => assemble_alpha_update(b, g.data(), config)?,
                _ => g.into_data(),
            };
            let m = layer_moments.get_mut(&kind).expect("moments registered per parameter");
            let mut result = Ok(());
            layer.update_param(kind, |p| result = adam_step(p, &step, m, lr, &config.adam));
            result?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
