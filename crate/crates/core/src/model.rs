//! The full three-branch model: encode each modality, fuse, classify.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::branches::{encode_sequence, BranchInput, BranchParams, Modality};
use crate::config::ModelConfig;
use crate::data::{Batch, MultimodalSample};
use crate::error::{Error, Result};
use crate::fusion::{classify, cross_entropy, effective_weights, fuse, ClassifierHead, FusionWeights};
use crate::params::{BoundParams, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::ForwardCtx;

/// Which branches feed the classifier.
///
/// Unimodal modes pin the fusion weights to a simplex vertex: only the active
/// branch is encoded and its vector goes straight to the head.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    #[default]
    Full,
    TextOnly,
    ImageOnly,
    AudioOnly,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::TextOnly,
        AblationMode::ImageOnly,
        AblationMode::AudioOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::TextOnly => "text_only",
            AblationMode::ImageOnly => "image_only",
            AblationMode::AudioOnly => "audio_only",
        }
    }

    pub fn active(self) -> Option<Modality> {
        match self {
            AblationMode::Full => None,
            AblationMode::TextOnly => Some(Modality::Text),
            AblationMode::ImageOnly => Some(Modality::Image),
            AblationMode::AudioOnly => Some(Modality::Audio),
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Config(format!(
                "unknown ablation mode \"{s}\"; expected one of: full, text_only, image_only, audio_only"
            ))
        })
    }
}

/// One sample's inputs, possibly padded, with per-modality validity masks.
#[derive(Debug, Clone, Copy)]
pub struct ModalInputs<'a> {
    pub image: BranchInput<'a>,
    pub image_mask: &'a [bool],
    pub audio: BranchInput<'a>,
    pub audio_mask: &'a [bool],
    pub text: BranchInput<'a>,
    pub text_mask: &'a [bool],
}

#[derive(Debug, Clone, Copy)]
pub struct Forward {
    /// `[C]` class probabilities.
    pub probs: Var,
    /// Scalar cross-entropy against the label.
    pub loss: Var,
}

#[derive(Debug, Clone)]
pub struct BatchForward {
    /// Mean cross-entropy over the batch.
    pub loss: Var,
    pub probs: Vec<Var>,
    /// Per-row cross-entropy.
    pub losses: Vec<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: ParamSet,
    branches: [BranchParams; 3],
    fusion: FusionWeights,
    head: ClassifierHead,
}

impl Model {
    /// Fresh model with weights drawn from a generator seeded by `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_rng(config, &mut rng)
    }

    pub fn with_rng(config: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let branches = [
            BranchParams::init(&mut params, Modality::Image, &config, rng)?,
            BranchParams::init(&mut params, Modality::Audio, &config, rng)?,
            BranchParams::init(&mut params, Modality::Text, &config, rng)?,
        ];
        let fusion = FusionWeights::init(&mut params)?;
        let head = ClassifierHead::init(&mut params, &config, rng)?;
        Ok(Model {
            config,
            params,
            branches,
            fusion,
            head,
        })
    }

    /// Rebuilds a model around existing parameter values, checking names and
    /// shapes against the layout `config` implies.
    pub fn from_params(config: ModelConfig, params: ParamSet) -> Result<Self> {
        let mut model = Model::new(config, 0)?;
        if !model.params.same_layout(&params) {
            return Err(Error::Config(
                "parameter names or shapes do not match the model configuration".into(),
            ));
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet) -> Result<()> {
        if !self.params.same_layout(&params) {
            return Err(Error::Config("parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    pub fn branch(&self, modality: Modality) -> &BranchParams {
        &self.branches[modality.index()]
    }

    pub fn fusion(&self) -> FusionWeights {
        self.fusion
    }

    pub fn head(&self) -> ClassifierHead {
        self.head
    }

    /// Effective `(α, β, χ)`; a vertex of the simplex in unimodal modes.
    pub fn fusion_weights(&self, mode: AblationMode) -> [f64; 3] {
        match mode.active() {
            None => effective_weights(self.params.get(self.fusion.logits)),
            Some(m) => {
                let mut w = [0.0; 3];
                w[m.index()] = 1.0;
                w
            }
        }
    }

    /// Checks a sample's widths and lengths against the configuration.
    pub fn check_sample(&self, sample: &MultimodalSample) -> Result<()> {
        let c = &self.config;
        let mut problems = Vec::new();
        if sample.image.features.cols() != c.d_img {
            problems.push(format!(
                "image width: expected {}, got {}",
                c.d_img,
                sample.image.features.cols()
            ));
        }
        if sample.audio.features.cols() != c.d_audio {
            problems.push(format!(
                "audio width: expected {}, got {}",
                c.d_audio,
                sample.audio.features.cols()
            ));
        }
        match (&sample.text, c.text_mode) {
            (crate::branches::TextSequence::Embeddings(t), crate::config::TextMode::Embeddings) => {
                if t.cols() != c.d_text {
                    problems.push(format!("text width: expected {}, got {}", c.d_text, t.cols()));
                }
            }
            (crate::branches::TextSequence::Tokens(ids), crate::config::TextMode::Tokens) => {
                if let Some(id) = ids.iter().find(|&&id| id >= c.vocab_size) {
                    problems.push(format!(
                        "token id {id} out of range for vocab_size {}",
                        c.vocab_size
                    ));
                }
            }
            (_, mode) => problems.push(format!("text mode: expected {mode:?}")),
        }
        for (name, len) in [
            ("image", sample.image.len()),
            ("audio", sample.audio.len()),
            ("text", sample.text.len()),
        ] {
            if len > c.max_seq_len {
                problems.push(format!("{name} length {len} exceeds max_seq_len {}", c.max_seq_len));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "sample \"{}\" does not fit the model: {}",
                sample.id,
                problems.join("; ")
            )))
        }
    }

    /// Encodes the active branches, fuses, and classifies on `tape`.
    pub fn forward_inputs(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        inputs: ModalInputs<'_>,
        label: usize,
        mode: AblationMode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        let mut encode = |tape: &mut Tape, m: Modality| {
            let (input, mask) = match m {
                Modality::Image => (inputs.image, inputs.image_mask),
                Modality::Audio => (inputs.audio, inputs.audio_mask),
                Modality::Text => (inputs.text, inputs.text_mask),
            };
            encode_sequence(tape, bound, &self.branches[m.index()], input, mask, cfg, ctx)
        };
        let fused = match mode.active() {
            None => {
                let z_img = encode(tape, Modality::Image)?;
                let z_audio = encode(tape, Modality::Audio)?;
                let z_text = encode(tape, Modality::Text)?;
                fuse(tape, z_img, z_audio, z_text, self.fusion.resolve(bound))?
            }
            Some(m) => encode(tape, m)?,
        };
        let probs = classify(tape, fused, self.head.resolve(bound))?;
        let loss = cross_entropy(tape, probs, label)?;
        Ok(Forward { probs, loss })
    }

    pub fn forward_sample(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        sample: &MultimodalSample,
        mode: AblationMode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Forward> {
        self.check_sample(sample)?;
        let image_mask = vec![true; sample.image.len()];
        let audio_mask = vec![true; sample.audio.len()];
        let text_mask = vec![true; sample.text.len()];
        let inputs = ModalInputs {
            image: BranchInput::Features(&sample.image.features),
            image_mask: &image_mask,
            audio: BranchInput::Features(&sample.audio.features),
            audio_mask: &audio_mask,
            text: sample.text.as_input(),
            text_mask: &text_mask,
        };
        self.forward_inputs(tape, bound, inputs, sample.label.code(), mode, ctx)
    }

    /// Mean loss over a padded batch, all rows on one tape.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        batch: &Batch,
        mode: AblationMode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<BatchForward> {
        let mut losses = Vec::with_capacity(batch.len());
        let mut probs = Vec::with_capacity(batch.len());
        for b in 0..batch.len() {
            let row = batch.row(b)?;
            let inputs = ModalInputs {
                image: BranchInput::Features(&row.image),
                image_mask: row.image_mask,
                audio: BranchInput::Features(&row.audio),
                audio_mask: row.audio_mask,
                text: row.text_input(),
                text_mask: row.text_mask,
            };
            let out = self.forward_inputs(tape, bound, inputs, row.label.code(), mode, ctx)?;
            losses.push(out.loss);
            probs.push(out.probs);
        }
        let stacked = tape.concat_rows(&losses)?;
        let loss = tape.mean(stacked)?;
        Ok(BatchForward { loss, probs, losses })
    }

    /// One-tape forward for a single sample: `(probabilities, loss)`.
    pub fn forward_full(
        &self,
        sample: &MultimodalSample,
        mode: AblationMode,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<(Tensor, f64)> {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape)?;
        let out = self.forward_sample(&mut tape, &bound, sample, mode, ctx)?;
        Ok((tape.value(out.probs).clone(), tape.scalar(out.loss)))
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, sample: &MultimodalSample, mode: AblationMode) -> Result<Tensor> {
        Ok(self.forward_full(sample, mode, &mut ForwardCtx::inference())?.0)
    }
}
