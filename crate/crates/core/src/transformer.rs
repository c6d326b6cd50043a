//! Scaled dot-product attention and the pre-norm encoder layer shared by all
//! three modality branches.

use rand::Rng;
use rand::RngCore;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Per-pass switches: training mode and the random stream dropout draws from.
pub struct ForwardCtx<'r> {
    pub training: bool,
    pub dropout_p: f64,
    rng: Option<&'r mut dyn RngCore>,
}

impl<'r> ForwardCtx<'r> {
    pub fn inference() -> Self {
        ForwardCtx {
            training: false,
            dropout_p: 0.0,
            rng: None,
        }
    }

    pub fn training(dropout_p: f64, rng: &'r mut dyn RngCore) -> Self {
        ForwardCtx {
            training: true,
            dropout_p,
            rng: Some(rng),
        }
    }

    /// Inverted dropout. Identity outside training or when `p == 0`.
    pub fn dropout(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        if !self.training || self.dropout_p == 0.0 {
            return Ok(x);
        }
        let rng = self
            .rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("training-mode dropout needs a random stream".into()))?;
        let keep = 1.0 - self.dropout_p;
        let factors = (0..tape.value(x).numel())
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        tape.multiply_const(x, factors)
    }
}

/// Query/key/value projections for all heads, stored side by side: head `h`
/// owns columns `h·d_k .. (h+1)·d_k` of each `[d_model × d_model]` matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionHeadParams<H = ParamId> {
    pub w_q: H,
    pub w_k: H,
    pub w_v: H,
    pub w_o: H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerParams<H = ParamId> {
    pub attention: AttentionHeadParams<H>,
    pub norm1_gain: H,
    pub norm1_bias: H,
    pub norm2_gain: H,
    pub norm2_bias: H,
    pub ffn_w1: H,
    pub ffn_b1: H,
    pub ffn_w2: H,
    pub ffn_b2: H,
}

pub(crate) fn xavier(rng: &mut dyn RngCore, fan_in: usize, fan_out: usize) -> Result<Tensor> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-limit..=limit))
        .collect();
    Tensor::new(&[fan_in, fan_out], data)
}

impl AttentionHeadParams<ParamId> {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        config: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let d = config.d_model;
        Ok(AttentionHeadParams {
            w_q: params.insert(format!("{prefix}.w_q"), xavier(rng, d, d)?)?,
            w_k: params.insert(format!("{prefix}.w_k"), xavier(rng, d, d)?)?,
            w_v: params.insert(format!("{prefix}.w_v"), xavier(rng, d, d)?)?,
            w_o: params.insert(format!("{prefix}.w_o"), xavier(rng, d, d)?)?,
        })
    }

    pub fn resolve(&self, bound: &BoundParams) -> AttentionHeadParams<Var> {
        AttentionHeadParams {
            w_q: bound.var(self.w_q),
            w_k: bound.var(self.w_k),
            w_v: bound.var(self.w_v),
            w_o: bound.var(self.w_o),
        }
    }
}

impl EncoderLayerParams<ParamId> {
    pub fn init(
        params: &mut ParamSet,
        prefix: &str,
        config: &ModelConfig,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        let d = config.d_model;
        let f = config.d_ff;
        let attention = AttentionHeadParams::init(params, &format!("{prefix}.attn"), config, rng)?;
        Ok(EncoderLayerParams {
            attention,
            norm1_gain: params.insert(format!("{prefix}.norm1.gain"), Tensor::ones(&[d])?)?,
            norm1_bias: params.insert(format!("{prefix}.norm1.bias"), Tensor::zeros(&[d])?)?,
            norm2_gain: params.insert(format!("{prefix}.norm2.gain"), Tensor::ones(&[d])?)?,
            norm2_bias: params.insert(format!("{prefix}.norm2.bias"), Tensor::zeros(&[d])?)?,
            ffn_w1: params.insert(format!("{prefix}.ffn.w1"), xavier(rng, d, f)?)?,
            ffn_b1: params.insert(format!("{prefix}.ffn.b1"), Tensor::zeros(&[f])?)?,
            ffn_w2: params.insert(format!("{prefix}.ffn.w2"), xavier(rng, f, d)?)?,
            ffn_b2: params.insert(format!("{prefix}.ffn.b2"), Tensor::zeros(&[d])?)?,
        })
    }

    pub fn resolve(&self, bound: &BoundParams) -> EncoderLayerParams<Var> {
        EncoderLayerParams {
            attention: self.attention.resolve(bound),
            norm1_gain: bound.var(self.norm1_gain),
            norm1_bias: bound.var(self.norm1_bias),
            norm2_gain: bound.var(self.norm2_gain),
            norm2_bias: bound.var(self.norm2_bias),
            ffn_w1: bound.var(self.ffn_w1),
            ffn_b1: bound.var(self.ffn_b1),
            ffn_w2: bound.var(self.ffn_w2),
            ffn_b2: bound.var(self.ffn_b2),
        }
    }
}

/// `softmax(QKᵀ / √d_k) V` with masked key positions excluded.
pub fn scaled_dot_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    mask: &[bool],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let (_, d_k) = tape.value(q).matrix_dims();
    let (s_k, d_k2) = tape.value(k).matrix_dims();
    let (s_v, _) = tape.value(v).matrix_dims();
    if d_k != d_k2 || s_k != s_v || mask.len() != s_k {
        return Err(Error::Shape {
            op: "scaled_dot_attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Degenerate(
            "attention over a sequence with every position masked".into(),
        ));
    }
    let k_t = tape.transpose(k)?;
    let scores = tape.matmul(q, k_t)?;
    let scores = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let scores = if mask.iter().all(|&m| m) {
        scores
    } else {
        tape.mask_columns(scores, mask)?
    };
    let weights = tape.softmax_rows(scores)?;
    let weights = ctx.dropout(tape, weights)?;
    tape.matmul(weights, v)
}

pub fn multi_head_attention(
    tape: &mut Tape,
    x: Var,
    params: &AttentionHeadParams<Var>,
    n_heads: usize,
    mask: &[bool],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let d_model = tape.value(x).cols();
    if n_heads == 0 || !d_model.is_multiple_of(n_heads) {
        return Err(Error::Config(format!(
            "d_model ({d_model}) must be divisible by n_heads ({n_heads})"
        )));
    }
    let d_k = d_model / n_heads;
    let q = tape.matmul(x, params.w_q)?;
    let k = tape.matmul(x, params.w_k)?;
    let v = tape.matmul(x, params.w_v)?;
    let merged = if n_heads == 1 {
        scaled_dot_attention(tape, q, k, v, mask, ctx)?
    } else {
        let mut heads = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = tape.slice_cols(q, h * d_k, d_k)?;
            let kh = tape.slice_cols(k, h * d_k, d_k)?;
            let vh = tape.slice_cols(v, h * d_k, d_k)?;
            heads.push(scaled_dot_attention(tape, qh, kh, vh, mask, ctx)?);
        }
        tape.concat_cols(&heads)?
    };
    tape.matmul(merged, params.w_o)
}

/// Pre-norm residual block: `x + MHA(LN(x))`, then `+ FFN(LN(·))`.
pub fn encoder_layer(
    tape: &mut Tape,
    x: Var,
    params: &EncoderLayerParams<Var>,
    config: &ModelConfig,
    mask: &[bool],
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let eps = config.layer_norm_eps;
    let h = tape.layer_norm(x, params.norm1_gain, params.norm1_bias, eps)?;
    let attended = multi_head_attention(tape, h, &params.attention, config.n_heads, mask, ctx)?;
    let x = tape.add(x, attended)?;

    let h = tape.layer_norm(x, params.norm2_gain, params.norm2_bias, eps)?;
    let hidden = tape.matmul(h, params.ffn_w1)?;
    let hidden = tape.add_row(hidden, params.ffn_b1)?;
    let hidden = tape.gelu(hidden)?;
    let hidden = ctx.dropout(tape, hidden)?;
    let out = tape.matmul(hidden, params.ffn_w2)?;
    let out = tape.add_row(out, params.ffn_b2)?;
    tape.add(x, out)
}

/// Fixed sinusoidal table: `PE[p][2i] = sin(p / 10000^(2i/d))`,
/// `PE[p][2i+1] = cos(p / 10000^(2i/d))`.
pub fn positional_encoding(len: usize, d_model: usize, max_seq_len: usize) -> Result<Tensor> {
    if len > max_seq_len {
        return Err(Error::Config(format!(
            "sequence length {len} exceeds max_seq_len {max_seq_len}"
        )));
    }
    if len == 0 || d_model == 0 {
        return Err(Error::Degenerate("positional encoding of an empty table".into()));
    }
    let mut data = vec![0.0; len * d_model];
    for p in 0..len {
        for j in 0..d_model {
            let pair = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(pair / d_model as f64);
            data[p * d_model + j] = if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d_model], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.constant(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn single_position_returns_value() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[vec![0.3, -2.0]]);
        let k = constant(&mut tape, &[vec![1.5, 0.7]]);
        let v = constant(&mut tape, &[vec![4.0, -1.0, 9.5]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, &[true], &mut ForwardCtx::inference()).unwrap();
        assert_eq!(tape.value(out).data(), &[4.0, -1.0, 9.5]);
    }

    #[test]
    fn identical_keys_give_uniform_attention() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[vec![1.0, 2.0], vec![-3.0, 0.5], vec![0.0, 7.0]]);
        let k = constant(&mut tape, &vec![vec![0.4, -0.1]; 3]);
        let v = constant(&mut tape, &[vec![1.0, 10.0], vec![2.0, 20.0], vec![6.0, 60.0]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, &[true; 3], &mut ForwardCtx::inference()).unwrap();
        for row in tape.value(out).data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12);
            assert!((row[1] - 30.0).abs() < 1e-12);
        }
        // with the last key masked the mean is over the first two value rows only
        let out = scaled_dot_attention(&mut tape, q, k, v, &[true, true, false], &mut ForwardCtx::inference()).unwrap();
        for row in tape.value(out).data().chunks(2) {
            assert!((row[0] - 1.5).abs() < 1e-12);
            assert!((row[1] - 15.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_position_closed_form() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[vec![1.0], vec![0.0]]);
        let k = constant(&mut tape, &[vec![1.0], vec![0.0]]);
        let v = constant(&mut tape, &[vec![2.0], vec![4.0]]);
        let out = scaled_dot_attention(&mut tape, q, k, v, &[true, true], &mut ForwardCtx::inference()).unwrap();
        // row 0 scores are (1, 0); row 1 scores are (0, 0)
        let sigma = 1f64.exp() / (1f64.exp() + 1.0);
        let expected_row0 = sigma * 2.0 + (1.0 - sigma) * 4.0;
        assert!((tape.value(out).data()[0] - expected_row0).abs() < 1e-12);
        assert!((tape.value(out).data()[1] - 3.0).abs() < 1e-12);

        // masking the second position reduces row 0 to the single-position case
        let out = scaled_dot_attention(&mut tape, q, k, v, &[true, false], &mut ForwardCtx::inference()).unwrap();
        assert_eq!(tape.value(out).data(), &[2.0, 2.0]);
    }

    #[test]
    fn all_masked_is_degenerate() {
        let mut tape = Tape::new();
        let q = constant(&mut tape, &[vec![1.0], vec![0.0]]);
        let err = scaled_dot_attention(&mut tape, q, q, q, &[false, false], &mut ForwardCtx::inference())
            .unwrap_err();
        assert!(matches!(err, Error::Degenerate(_)));
    }

    #[test]
    fn positional_encoding_anchors() {
        let pe = positional_encoding(5, 6, 8).unwrap();
        assert_eq!(pe.row(0), &[0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 0.841471).abs() < 1e-6);
        assert!((pe.get(&[3, 0]) - 3f64.sin()).abs() < 1e-15);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(positional_encoding(9, 6, 8), Err(Error::Config(_))));
    }

    #[test]
    fn dropout_is_identity_at_inference_and_zero_rate() {
        let mut tape = Tape::new();
        let x = constant(&mut tape, &[vec![1.0, 2.0, 3.0]]);
        assert_eq!(ForwardCtx::inference().dropout(&mut tape, x).unwrap(), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ctx = ForwardCtx::training(0.0, &mut rng);
        assert_eq!(ctx.dropout(&mut tape, x).unwrap(), x);
    }

    #[test]
    fn dropout_scales_survivors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2000]).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ctx = ForwardCtx::training(0.25, &mut rng);
        let y = ctx.dropout(&mut tape, x).unwrap();
        let data = tape.value(y).data();
        assert!(data.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let dropped = data.iter().filter(|&&v| v == 0.0).count() as f64 / 2000.0;
        assert!((dropped - 0.25).abs() < 0.05);
    }
}
