//! Learned convex fusion of the branch vectors and the softmax classifier.

use rand::Rng;
use rand::RngCore;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Three free logits (image, audio, text). Their softmax gives the fusion
/// weights α, β, χ.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionWeights<H = ParamId> {
    pub logits: H,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierHead<H = ParamId> {
    /// `[d_model × C]`
    pub weight: H,
    /// `[C]`
    pub bias: H,
}

impl FusionWeights<ParamId> {
    pub fn init(params: &mut ParamSet) -> Result<Self> {
        Ok(FusionWeights {
            logits: params.insert("fusion.logits", Tensor::zeros(&[3])?)?,
        })
    }

    pub fn resolve(&self, bound: &BoundParams) -> FusionWeights<Var> {
        FusionWeights {
            logits: bound.var(self.logits),
        }
    }
}

impl ClassifierHead<ParamId> {
    pub fn init(params: &mut ParamSet, config: &ModelConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let d = config.d_model;
        let c = config.n_classes;
        let limit = 1.0 / (d as f64).sqrt();
        let w = (0..d * c).map(|_| rng.gen_range(-limit..=limit)).collect();
        Ok(ClassifierHead {
            weight: params.insert("head.w", Tensor::new(&[d, c], w)?)?,
            bias: params.insert("head.b", Tensor::zeros(&[c])?)?,
        })
    }

    pub fn resolve(&self, bound: &BoundParams) -> ClassifierHead<Var> {
        ClassifierHead {
            weight: bound.var(self.weight),
            bias: bound.var(self.bias),
        }
    }
}

/// Softmax of the fusion logits as plain numbers `[α, β, χ]`.
pub fn effective_weights(logits: &Tensor) -> [f64; 3] {
    let l = logits.data();
    let max = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    [e[0] / total, e[1] / total, e[2] / total]
}

/// `Z_fused = α·z_img + β·z_audio + χ·z_text` with `(α, β, χ) = softmax(logits)`.
pub fn fuse(tape: &mut Tape, z_img: Var, z_audio: Var, z_text: Var, weights: FusionWeights<Var>) -> Result<Var> {
    let d = tape.value(z_img).numel();
    for z in [z_audio, z_text] {
        if tape.value(z).numel() != d {
            return Err(Error::Shape {
                op: "fuse",
                lhs: tape.value(z_img).shape().to_vec(),
                rhs: tape.value(z).shape().to_vec(),
            });
        }
    }
    if tape.value(weights.logits).numel() != 3 {
        return Err(Error::Shape {
            op: "fuse",
            lhs: vec![3],
            rhs: tape.value(weights.logits).shape().to_vec(),
        });
    }
    let simplex = tape.softmax_rows(weights.logits)?;
    let simplex = tape.reshape(simplex, &[1, 3])?;
    let stacked = tape.concat_rows(&[z_img, z_audio, z_text])?;
    let fused = tape.matmul(simplex, stacked)?;
    tape.reshape(fused, &[d])
}

/// `softmax(Wᵀ z + b)` as a `[C]` probability vector.
pub fn classify(tape: &mut Tape, z_fused: Var, head: ClassifierHead<Var>) -> Result<Var> {
    let d = tape.value(z_fused).numel();
    let z = tape.reshape(z_fused, &[1, d])?;
    let logits = tape.matmul(z, head.weight)?;
    let logits = tape.add_row(logits, head.bias)?;
    let c = tape.value(logits).numel();
    let logits = tape.reshape(logits, &[c])?;
    tape.softmax_rows(logits)
}

/// `−ln(probs[label] + 1e-12)`
pub fn cross_entropy(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    tape.cross_entropy(probs, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_var(tape: &mut Tape, v: &[f64]) -> Var {
        tape.constant(Tensor::vector(v.to_vec()).unwrap()).unwrap()
    }

    #[test]
    fn saturated_logits_select_one_branch() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, -2.0, 3.0]);
        let b = vec_var(&mut tape, &[10.0, 20.0, 30.0]);
        let c = vec_var(&mut tape, &[-5.0, 0.5, 7.0]);
        let logits = vec_var(&mut tape, &[40.0, -40.0, -40.0]);
        let fused = fuse(&mut tape, a, b, c, FusionWeights { logits }).unwrap();
        assert!(tape.value(fused).max_abs_diff(tape.value(a)) < 1e-10);
    }

    #[test]
    fn equal_logits_average() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[3.0, 0.0]);
        let b = vec_var(&mut tape, &[0.0, 6.0]);
        let c = vec_var(&mut tape, &[3.0, 3.0]);
        let logits = vec_var(&mut tape, &[0.7, 0.7, 0.7]);
        let fused = fuse(&mut tape, a, b, c, FusionWeights { logits }).unwrap();
        let got = tape.value(fused).data();
        assert!((got[0] - 2.0).abs() < 1e-14 && (got[1] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn fuse_rejects_length_mismatch() {
        let mut tape = Tape::new();
        let a = vec_var(&mut tape, &[1.0, 2.0]);
        let b = vec_var(&mut tape, &[1.0, 2.0, 3.0]);
        let logits = vec_var(&mut tape, &[0.0; 3]);
        assert!(matches!(
            fuse(&mut tape, a, b, a, FusionWeights { logits }),
            Err(Error::Shape { op: "fuse", .. })
        ));
    }

    #[test]
    fn zero_head_is_uniform() {
        let mut tape = Tape::new();
        let z = vec_var(&mut tape, &[0.3, -1.0, 4.0, 2.0]);
        let weight = tape.constant(Tensor::zeros(&[4, 7]).unwrap()).unwrap();
        let bias = tape.constant(Tensor::zeros(&[7]).unwrap()).unwrap();
        let probs = classify(&mut tape, z, ClassifierHead { weight, bias }).unwrap();
        for p in tape.value(probs).data() {
            assert!((p - 1.0 / 7.0).abs() < 1e-15);
        }
        let loss = cross_entropy(&mut tape, probs, 4).unwrap();
        assert!((tape.scalar(loss) - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_anchors() {
        let mut tape = Tape::new();
        let one_hot = vec_var(&mut tape, &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let loss = cross_entropy(&mut tape, one_hot, 2).unwrap();
        assert!(tape.scalar(loss) >= 0.0 && tape.scalar(loss) <= 1e-11);

        let half = vec_var(&mut tape, &[0.5, 0.1, 0.1, 0.1, 0.1, 0.05, 0.05]);
        let loss = cross_entropy(&mut tape, half, 0).unwrap();
        assert!((tape.scalar(loss) - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn effective_weights_on_simplex() {
        let w = effective_weights(&Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        assert_eq!(w, [1.0 / 3.0; 3]);
        let w = effective_weights(&Tensor::vector(vec![500.0, -3.0, 2.0]).unwrap());
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|v| *v >= 0.0));
    }
}
