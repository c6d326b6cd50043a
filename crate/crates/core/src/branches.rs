//! The three modality encoders. Each maps a variable-length feature sequence
//! to one `d_model` summary vector: project, add positions, run the encoder
//! stack under the padding mask, then mean-pool the valid positions.

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TextMode};
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{encoder_layer, positional_encoding, xavier, EncoderLayerParams, ForwardCtx};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Image,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Image, Modality::Audio, Modality::Text];

    pub fn index(self) -> usize {
        match self {
            Modality::Image => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Image => "image",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

fn check_sequence(name: &str, features: &Tensor) -> Result<()> {
    if features.rank() != 2 {
        return Err(Error::Data(format!(
            "{name} features must be [len × dim], got shape {:?}",
            features.shape()
        )));
    }
    if !features.is_finite() {
        return Err(Error::Data(format!("{name} features contain non-finite values")));
    }
    Ok(())
}

/// Per-frame facial feature vectors, `[T × d_img]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub features: Tensor,
}

impl ImageSequence {
    pub fn new(features: Tensor) -> Result<Self> {
        check_sequence("image", &features)?;
        Ok(ImageSequence { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Per-frame acoustic feature vectors, `[L × d_audio]`, already normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioSequence {
    pub features: Tensor,
}

impl AudioSequence {
    pub fn new(features: Tensor) -> Result<Self> {
        check_sequence("audio", &features)?;
        Ok(AudioSequence { features })
    }

    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TextSequence {
    /// `[N × d_text]` embeddings from an external pretrained encoder.
    Embeddings(Tensor),
    /// Token ids for the learned embedding table.
    Tokens(Vec<usize>),
}

impl TextSequence {
    pub fn embeddings(features: Tensor) -> Result<Self> {
        check_sequence("text", &features)?;
        Ok(TextSequence::Embeddings(features))
    }

    pub fn tokens(ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("text token sequence is empty".into()));
        }
        Ok(TextSequence::Tokens(ids))
    }

    pub fn len(&self) -> usize {
        match self {
            TextSequence::Embeddings(t) => t.rows(),
            TextSequence::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mode(&self) -> TextMode {
        match self {
            TextSequence::Embeddings(_) => TextMode::Embeddings,
            TextSequence::Tokens(_) => TextMode::Tokens,
        }
    }

    pub fn as_input(&self) -> BranchInput<'_> {
        match self {
            TextSequence::Embeddings(t) => BranchInput::Features(t),
            TextSequence::Tokens(ids) => BranchInput::Tokens(ids),
        }
    }
}

/// Borrowed input to [`encode_sequence`], possibly padded.
#[derive(Debug, Clone, Copy)]
pub enum BranchInput<'a> {
    Features(&'a Tensor),
    Tokens(&'a [usize]),
}

impl BranchInput<'_> {
    pub fn len(&self) -> usize {
        match self {
            BranchInput::Features(t) => t.rows(),
            BranchInput::Tokens(ids) => ids.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputProjection<H = ParamId> {
    Linear { weight: H, bias: H },
    Embedding { table: H },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchParams<H = ParamId> {
    pub modality: Modality,
    /// Feature width (or vocabulary size) the input projection expects.
    pub input_dim: usize,
    pub input: InputProjection<H>,
    pub layers: Vec<EncoderLayerParams<H>>,
}

impl BranchParams<ParamId> {
    pub fn init(
        params: &mut ParamSet,
        modality: Modality,
        config: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let prefix = modality.name();
        let d = config.d_model;
        let (input_dim, input) = match (modality, config.text_mode) {
            (Modality::Text, TextMode::Tokens) => {
                let table = xavier(rng, config.vocab_size, d)?;
                let table = params.insert(format!("{prefix}.embed"), table)?;
                (config.vocab_size, InputProjection::Embedding { table })
            }
            _ => {
                let din = match modality {
                    Modality::Image => config.d_img,
                    Modality::Audio => config.d_audio,
                    Modality::Text => config.d_text,
                };
                let weight = params.insert(format!("{prefix}.proj.w"), xavier(rng, din, d)?)?;
                let bias = params.insert(format!("{prefix}.proj.b"), Tensor::zeros(&[d])?)?;
                (din, InputProjection::Linear { weight, bias })
            }
        };
        let layers = (0..config.n_layers)
            .map(|l| EncoderLayerParams::init(params, &format!("{prefix}.layer{l}"), config, rng))
            .collect::<Result<_>>()?;
        Ok(BranchParams {
            modality,
            input_dim,
            input,
            layers,
        })
    }

    /// Every parameter this branch owns.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = match self.input {
            InputProjection::Linear { weight, bias } => vec![weight, bias],
            InputProjection::Embedding { table } => vec![table],
        };
        for l in &self.layers {
            let a = l.attention;
            ids.extend([
                a.w_q, a.w_k, a.w_v, a.w_o, l.norm1_gain, l.norm1_bias, l.norm2_gain,
                l.norm2_bias, l.ffn_w1, l.ffn_b1, l.ffn_w2, l.ffn_b2,
            ]);
        }
        ids
    }
}

/// Project, encode and pool one (possibly padded) sequence.
pub fn encode_sequence(
    tape: &mut Tape,
    bound: &BoundParams,
    branch: &BranchParams,
    input: BranchInput<'_>,
    mask: &[bool],
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let name = branch.modality.name();
    let len = input.len();
    if len == 0 {
        return Err(Error::Data(format!("{name} sequence is empty")));
    }
    if mask.len() != len {
        return Err(Error::Shape {
            op: "encode_sequence",
            lhs: vec![len],
            rhs: vec![mask.len()],
        });
    }
    let embedded = match (input, branch.input) {
        (BranchInput::Features(features), InputProjection::Linear { weight, bias }) => {
            if features.cols() != branch.input_dim {
                return Err(Error::Config(format!(
                    "{name} feature width {} does not match the configured {}",
                    features.cols(),
                    branch.input_dim
                )));
            }
            let x = tape.constant(features.clone())?;
            let x = tape.matmul(x, bound.var(weight))?;
            tape.add_row(x, bound.var(bias))?
        }
        (BranchInput::Tokens(ids), InputProjection::Embedding { table }) => {
            tape.embedding(bound.var(table), ids)?
        }
        (BranchInput::Features(_), InputProjection::Embedding { .. }) => {
            return Err(Error::Config(format!(
                "{name} branch expects token ids but received embeddings"
            )))
        }
        (BranchInput::Tokens(_), InputProjection::Linear { .. }) => {
            return Err(Error::Config(format!(
                "{name} branch expects embeddings but received token ids"
            )))
        }
    };
    let pe = positional_encoding(len, config.d_model, config.max_seq_len)?;
    let pe = tape.constant(pe)?;
    let mut h = tape.add(embedded, pe)?;
    for layer in &branch.layers {
        h = encoder_layer(tape, h, &layer.resolve(bound), config, mask, ctx)?;
    }
    masked_mean_pool(tape, h, mask)
}

pub fn masked_mean_pool(tape: &mut Tape, h: Var, mask: &[bool]) -> Result<Var> {
    tape.masked_mean_pool(h, mask)
}

pub fn encode_image(
    tape: &mut Tape,
    bound: &BoundParams,
    branch: &BranchParams,
    x: &ImageSequence,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let mask = vec![true; x.len()];
    encode_sequence(tape, bound, branch, BranchInput::Features(&x.features), &mask, config, ctx)
}

pub fn encode_audio(
    tape: &mut Tape,
    bound: &BoundParams,
    branch: &BranchParams,
    x: &AudioSequence,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let mask = vec![true; x.len()];
    encode_sequence(tape, bound, branch, BranchInput::Features(&x.features), &mask, config, ctx)
}

pub fn encode_text(
    tape: &mut Tape,
    bound: &BoundParams,
    branch: &BranchParams,
    x: &TextSequence,
    config: &ModelConfig,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let mask = vec![true; x.len()];
    encode_sequence(tape, bound, branch, x.as_input(), &mask, config, ctx)
}
