//! Mini-batch training: augmentation, Adam, model selection, and resume.
//!
//! All randomness in a run comes from one ChaCha8 stream derived from the
//! seed. Within an epoch the draws happen in a fixed order: the shuffle, then
//! for each batch the per-sample augmentation followed by the dropout masks
//! of its forward pass.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::branches::{Modality, TextSequence};
use crate::checkpoint::{Checkpoint, OptimizerState, RngState, TrainingProgress};
use crate::data::{make_batches, Batch, MultimodalSample};
use crate::error::{Error, Result};
use crate::metrics::{EpochLog, EvalReport};
use crate::model::{AblationMode, Model};
use crate::params::ParamSet;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::transformer::ForwardCtx;

/// Stream index of the training generator; stream 0 of the same seed
/// initializes weights.
const TRAIN_STREAM: u64 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    /// Standard deviation of Gaussian noise added to image and audio features.
    pub gaussian_sigma: f64,
    /// Probability of blanking one uniformly chosen modality of a sample.
    pub modality_dropout_p: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            gaussian_sigma: 0.01,
            modality_dropout_p: 0.1,
        }
    }
}

impl AugmentationConfig {
    pub fn off() -> Self {
        AugmentationConfig {
            gaussian_sigma: 0.0,
            modality_dropout_p: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma.is_finite() && self.gaussian_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "gaussian_sigma must be finite and >= 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0..1.0).contains(&self.modality_dropout_p) {
            return Err(Error::Config(format!(
                "modality_dropout_p must lie in [0, 1), got {}",
                self.modality_dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub augmentation: AugmentationConfig,
    /// Epochs without a validation weighted-F1 improvement before stopping;
    /// 0 disables early stopping.
    pub early_stop_patience: usize,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            augmentation: AugmentationConfig::default(),
            early_stop_patience: 0,
            grad_clip_norm: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {b}")));
            }
        }
        if !(self.adam_eps.is_finite() && self.adam_eps > 0.0) {
            return Err(Error::Config(format!("adam_eps must be > 0, got {}", self.adam_eps)));
        }
        if !(self.grad_clip_norm.is_finite() && self.grad_clip_norm >= 0.0) {
            return Err(Error::Config(format!(
                "grad_clip_norm must be >= 0, got {}",
                self.grad_clip_norm
            )));
        }
        self.augmentation.validate()
    }
}

/// One Adam update with bias correction, after optional global-norm clipping.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Config(format!(
            "adam_step: {} parameters, {} gradients, {} moment buffers",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.tensors().iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].shape() != p.shape() || state.v[i].shape() != p.shape() {
            return Err(Error::Shape {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.name(crate::params::ParamId(i)).to_owned(),
            });
        }
    }

    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    let clip = if config.grad_clip_norm > 0.0 && norm > config.grad_clip_norm {
        config.grad_clip_norm / norm
    } else {
        1.0
    };

    state.step += 1;
    let t = state.step as i32;
    let correct1 = 1.0 - config.beta1.powi(t);
    let correct2 = 1.0 - config.beta2.powi(t);
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j] * clip;
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / correct1;
            let v_hat = v[j] / correct2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.adam_eps);
        }
    }
    Ok(())
}

fn zero_modality(sample: &mut MultimodalSample, m: Modality) {
    match m {
        Modality::Image => sample.image.features.data_mut().fill(0.0),
        Modality::Audio => sample.audio.features.data_mut().fill(0.0),
        Modality::Text => match &mut sample.text {
            TextSequence::Embeddings(t) => t.data_mut().fill(0.0),
            TextSequence::Tokens(ids) => ids.fill(0),
        },
    }
}

/// Train-time augmentation: Gaussian feature noise on image and audio, then
/// with probability `modality_dropout_p` one uniformly chosen modality is
/// blanked (zeros, or token id 0). The label and every length are unchanged.
pub fn augment(
    sample: &MultimodalSample,
    config: &AugmentationConfig,
    rng: &mut dyn RngCore,
) -> MultimodalSample {
    let mut out = sample.clone();
    if config.gaussian_sigma > 0.0 {
        let noise = Normal::new(0.0, config.gaussian_sigma).expect("sigma validated finite");
        for t in [&mut out.image.features, &mut out.audio.features] {
            for v in t.data_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    if config.modality_dropout_p > 0.0 && rng.gen::<f64>() < config.modality_dropout_p {
        let m = Modality::ALL[rng.gen_range(0..3)];
        zero_modality(&mut out, m);
    }
    out
}

/// Inference-mode metrics over `samples`; independent of `batch_size`.
pub fn evaluate(
    model: &Model,
    samples: &[&MultimodalSample],
    batch_size: usize,
    mode: AblationMode,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Config("cannot evaluate an empty split".into()));
    }
    let mut probs = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    let mut total_loss = 0.0;
    let mut tape = Tape::new();
    for batch in make_batches(samples, batch_size, None)? {
        tape.reset();
        let bound = model.params().bind_frozen(&mut tape)?;
        let out = model.forward_batch(&mut tape, &bound, &batch, mode, &mut ForwardCtx::inference())?;
        for (p, l) in out.probs.iter().zip(&out.losses) {
            probs.push(tape.value(*p).data().to_vec());
            total_loss += tape.scalar(*l);
        }
        labels.extend(batch.labels.iter().map(|l| l.code()));
    }
    EvalReport::from_predictions(&probs, &labels, total_loss / samples.len() as f64)
}

#[derive(Debug, Clone)]
struct Best {
    params: ParamSet,
    f1: f64,
    loss: f64,
    epoch: usize,
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the best validation epoch (initial ones if no epoch ran).
    pub model: Model,
    pub history: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

pub struct Trainer {
    model: Model,
    config: TrainConfig,
    mode: AblationMode,
    optimizer: OptimizerState,
    rng: ChaCha8Rng,
    epoch: usize,
    best: Option<Best>,
    stale_epochs: usize,
    history: Vec<EpochLog>,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig, mode: AblationMode) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params())?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(TRAIN_STREAM);
        Ok(Trainer {
            model,
            config,
            mode,
            optimizer,
            rng,
            epoch: 0,
            best: None,
            stale_epochs: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(checkpoint: &Checkpoint, config: TrainConfig, mode: AblationMode) -> Result<Self> {
        config.validate()?;
        let model = checkpoint.model()?;
        let optimizer = match &checkpoint.optimizer {
            Some(o) => o.clone(),
            None => OptimizerState::new(model.params())?,
        };
        let (best, stale_epochs) = match &checkpoint.progress {
            Some(p) => (
                Some(Best {
                    params: p.best_params.clone(),
                    f1: p.best_f1,
                    loss: p.best_loss,
                    epoch: p.best_epoch,
                }),
                p.stale_epochs,
            ),
            None => (None, 0),
        };
        Ok(Trainer {
            model,
            config,
            mode,
            optimizer,
            rng: checkpoint.rng.restore(),
            epoch: checkpoint.epoch,
            best,
            stale_epochs,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLog] {
        &self.history
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.optimizer
    }

    /// Full resume state: current weights, optimizer, generator position and
    /// model-selection bookkeeping.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model_config: self.model.config().clone(),
            mode: self.mode,
            epoch: self.epoch,
            params: self.model.params().clone(),
            optimizer: Some(self.optimizer.clone()),
            rng: RngState::capture(&self.rng),
            progress: self.best.as_ref().map(|b| TrainingProgress {
                best_params: b.params.clone(),
                best_f1: b.f1,
                best_loss: b.loss,
                best_epoch: b.epoch,
                stale_epochs: self.stale_epochs,
            }),
        }
    }

    /// The selected model: best validation epoch so far, else current weights.
    pub fn best_model(&self) -> Result<Model> {
        match &self.best {
            Some(b) => Model::from_params(self.model.config().clone(), b.params.clone()),
            None => Ok(self.model.clone()),
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.as_ref().map(|b| b.epoch)
    }

    fn train_batch(&mut self, batch: &Batch) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params().bind(&mut tape)?;
        let dropout_p = self.model.config().dropout_p;
        let out = {
            let mut ctx = ForwardCtx::training(dropout_p, &mut self.rng);
            self.model.forward_batch(&mut tape, &bound, batch, self.mode, &mut ctx)?
        };
        let loss = tape.scalar(out.loss);
        tape.backward(out.loss)?;
        let grads = bound.grads(&tape, self.model.params())?;
        adam_step(self.model.params_mut(), &grads, &mut self.optimizer, &self.config)?;
        Ok(loss)
    }

    /// Runs one epoch and evaluates on `val` (or on `train` when `val` is
    /// empty). On a non-finite loss or gradient the epoch is abandoned and
    /// the error carries the checkpoint from before it started.
    pub fn run_epoch(
        &mut self,
        train: &[&MultimodalSample],
        val: &[&MultimodalSample],
    ) -> Result<EpochLog> {
        if train.is_empty() {
            return Err(Error::Config("training split is empty".into()));
        }
        let last_good = self.checkpoint();
        let started = Instant::now();
        let next_epoch = self.epoch + 1;
        let diverged = |e: Error| match e {
            Error::NonFinite { .. } | Error::NonFiniteGradient { .. } => Error::Diverged {
                epoch: next_epoch,
                reason: e.to_string(),
                last_good: Box::new(last_good.clone()),
            },
            other => other,
        };

        let mut order: Vec<&MultimodalSample> = train.to_vec();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(self.config.batch_size) {
            let augmented: Vec<MultimodalSample> = chunk
                .iter()
                .map(|s| augment(s, &self.config.augmentation, &mut self.rng))
                .collect();
            let refs: Vec<&MultimodalSample> = augmented.iter().collect();
            let batch = Batch::from_samples(&refs)?;
            let loss = self.train_batch(&batch).map_err(&diverged)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(diverged(Error::NonFinite { op: "train_loss" }));
        }

        let val = if val.is_empty() { train } else { val };
        let report = evaluate(&self.model, val, self.config.batch_size, self.mode).map_err(&diverged)?;
        let [alpha, beta, chi] = self.model.fusion_weights(self.mode);

        self.epoch = next_epoch;
        let improved = match &self.best {
            None => true,
            Some(b) => report.weighted_f1 > b.f1 || (report.weighted_f1 == b.f1 && report.loss < b.loss),
        };
        if improved {
            self.best = Some(Best {
                params: self.model.params().clone(),
                f1: report.weighted_f1,
                loss: report.loss,
                epoch: self.epoch,
            });
            self.stale_epochs = 0;
        } else {
            self.stale_epochs += 1;
        }

        let log = EpochLog {
            epoch: self.epoch,
            train_loss,
            val_acc: report.accuracy,
            val_f1: report.weighted_f1,
            val_auc: report.macro_auc,
            alpha,
            beta,
            chi,
            seconds: started.elapsed().as_secs_f64(),
        };
        self.history.push(log.clone());
        Ok(log)
    }

    /// Trains until `config.epochs` epochs have run in total or early
    /// stopping triggers.
    pub fn fit(
        &mut self,
        train: &[&MultimodalSample],
        val: &[&MultimodalSample],
    ) -> Result<TrainOutcome> {
        let mut stopped_early = false;
        while self.epoch < self.config.epochs {
            self.run_epoch(train, val)?;
            let patience = self.config.early_stop_patience;
            if patience > 0 && self.stale_epochs >= patience {
                stopped_early = true;
                break;
            }
        }
        Ok(TrainOutcome {
            model: self.best_model()?,
            history: self.history.clone(),
            best_epoch: self.best_epoch(),
            stopped_early,
        })
    }
}

/// Trains `model` from scratch and returns the best-validation parameters
/// with the per-epoch log.
pub fn train(
    model: Model,
    train_split: &[&MultimodalSample],
    val_split: &[&MultimodalSample],
    config: &TrainConfig,
    mode: AblationMode,
) -> Result<TrainOutcome> {
    if train_split.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    for s in train_split.iter().chain(val_split) {
        model.check_sample(s)?;
    }
    Trainer::new(model, config.clone(), mode)?.fit(train_split, val_split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(value: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![value]).unwrap()).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut params = single_param(0.7);
        let mut state = OptimizerState::new(&params).unwrap();
        let grads = vec![Tensor::zeros(&[1]).unwrap()];
        adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap();
        assert_eq!(params.tensors()[0].data(), &[0.7]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn one_step_from_known_state() {
        let config = TrainConfig {
            learning_rate: 0.01,
            beta1: 0.8,
            beta2: 0.9,
            adam_eps: 1e-8,
            grad_clip_norm: 0.0,
            ..TrainConfig::default()
        };
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params).unwrap();
        state.step = 2;
        state.m[0].data_mut()[0] = 0.1;
        state.v[0].data_mut()[0] = 0.04;
        let grads = vec![Tensor::vector(vec![0.5]).unwrap()];
        adam_step(&mut params, &grads, &mut state, &config).unwrap();

        // m = 0.8·0.1 + 0.2·0.5 = 0.18, v = 0.9·0.04 + 0.1·0.25 = 0.061
        // m̂ = 0.18 / (1 − 0.8³) = 0.18 / 0.488, v̂ = 0.061 / (1 − 0.9³) = 0.061 / 0.271
        let m_hat = 0.18 / 0.488;
        let v_hat = 0.061 / 0.271;
        let expected = 1.0 - 0.01 * m_hat / (f64::sqrt(v_hat) + 1e-8);
        assert!((params.tensors()[0].data()[0] - expected).abs() < 1e-15);
        assert_eq!(state.step, 3);
        assert!((state.m[0].data()[0] - 0.18).abs() < 1e-15);
        assert!((state.v[0].data()[0] - 0.061).abs() < 1e-15);
    }

    #[test]
    fn clipping_matches_prescaled_gradient() {
        let config = TrainConfig {
            grad_clip_norm: 1.0,
            ..TrainConfig::default()
        };
        let unclipped = TrainConfig {
            grad_clip_norm: 0.0,
            ..config.clone()
        };
        let mut p = ParamSet::new();
        p.insert("a", Tensor::vector(vec![0.5, -0.5]).unwrap()).unwrap();
        let grads = vec![Tensor::vector(vec![6.0, 8.0]).unwrap()];
        let scaled = vec![Tensor::vector(vec![0.6, 0.8]).unwrap()];

        let mut clipped_params = p.clone();
        let mut s1 = OptimizerState::new(&p).unwrap();
        adam_step(&mut clipped_params, &grads, &mut s1, &config).unwrap();
        let mut scaled_params = p.clone();
        let mut s2 = OptimizerState::new(&p).unwrap();
        adam_step(&mut scaled_params, &scaled, &mut s2, &unclipped).unwrap();
        assert!(clipped_params.tensors()[0].max_abs_diff(&scaled_params.tensors()[0]) < 1e-15);
        assert!(s1.m[0].max_abs_diff(&s2.m[0]) < 1e-15);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params).unwrap();
        let grads = vec![Tensor::vector(vec![f64::NAN]).unwrap()];
        let err = adam_step(&mut params, &grads, &mut state, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref param } if param == "w"));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig {
                augmentation: AugmentationConfig { gaussian_sigma: 0.0, modality_dropout_p: 1.0 },
                ..TrainConfig::default()
            },
        ] {
            assert!(bad.validate().is_err(), "{bad:?}");
        }
    }
}
