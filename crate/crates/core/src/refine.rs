//! Second-level attention: trainable maps from raw scores `A` to refined
//! scores `B`, and the masking pipeline around them.
//!
//! All functions work on `[.., n, n]` score tensors; refinement matrices are
//! `n × n` and shared across the batch.

use crate::config::{Mechanism, ModelConfig, RefineScale};
use crate::data::PAD;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mask, Tape, Tensor, Var};

/// Which query/key pairs may interact in a batch of left-padded sequences.
///
/// A pair `(k, t)` is allowed when `t <= k` and both positions hold items.
/// Padded query rows have nothing to attend to, so the softmax mask lets
/// them see their own diagonal entry; the resulting rows are zeroed
/// afterwards.
#[derive(Clone, Debug)]
pub struct AttentionMask<S> {
    batch: usize,
    n: usize,
    allowed: Mask,
    allowed_values: Tensor<S>,
    softmax: Mask,
}

impl<S: Scalar> AttentionMask<S> {
    /// Builds the mask for `[batch × n]` item ids (row-major).
    pub fn from_inputs(inputs: &[usize], batch: usize, n: usize) -> Result<Self> {
        if inputs.len() != batch * n {
            return Err(Error::shape("attention mask", &[inputs.len()], &[batch, n]));
        }
        let mut allowed = Vec::with_capacity(batch * n * n);
        let mut softmax = Vec::with_capacity(batch * n * n);
        for b in 0..batch {
            let seq = &inputs[b * n..(b + 1) * n];
            for k in 0..n {
                for t in 0..n {
                    let ok = t <= k && seq[k] != PAD && seq[t] != PAD;
                    allowed.push(ok);
                    softmax.push(ok || (t == k && seq[k] == PAD));
                }
            }
        }
        let allowed = Mask::new([batch, n, n], allowed)?;
        Ok(Self {
            batch,
            n,
            allowed_values: allowed.to_tensor(),
            allowed,
            softmax: Mask::new([batch, n, n], softmax)?,
        })
    }

    /// Plain causal mask for one unpadded sequence of length `n`.
    pub fn causal(n: usize) -> Self {
        Self::from_inputs(&vec![1; n], 1, n).expect("consistent shape")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn allowed(&self) -> &Mask {
        &self.allowed
    }

    /// Mask for the outer softmax (allowed pairs plus pad-row diagonals).
    pub fn softmax_mask(&self) -> &Mask {
        &self.softmax
    }

    fn allowed_var(&self, tape: &Tape<S>) -> Var {
        tape.constant(self.allowed_values.clone())
    }
}

/// Refinement matrices bound on a tape for one head of one layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RefineParams {
    None,
    Simp { wrq: Var, wrk: Var },
    Value { wrq: Var, wrk: Var, wrv: Var },
    Add { wrq: Var, wrk: Var },
    Stoc { wmu: Var, wsigma: Var },
}

impl RefineParams {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            RefineParams::None => Mechanism::None,
            RefineParams::Simp { .. } => Mechanism::Simp,
            RefineParams::Value { .. } => Mechanism::Value,
            RefineParams::Add { .. } => Mechanism::Add,
            RefineParams::Stoc { .. } => Mechanism::Stoc,
        }
    }

    /// Assembles the variant for `mechanism` from matrices listed in
    /// [`Mechanism::matrices`] order.
    pub fn from_vars(mechanism: Mechanism, vars: &[Var]) -> Result<Self> {
        if vars.len() != mechanism.matrices().len() {
            return Err(Error::contract(format!(
                "mechanism {mechanism} takes {} matrices, got {}",
                mechanism.matrices().len(),
                vars.len()
            )));
        }
        Ok(match mechanism {
            Mechanism::None => RefineParams::None,
            Mechanism::Simp => RefineParams::Simp { wrq: vars[0], wrk: vars[1] },
            Mechanism::Add => RefineParams::Add { wrq: vars[0], wrk: vars[1] },
            Mechanism::Value => RefineParams::Value {
                wrq: vars[0],
                wrk: vars[1],
                wrv: vars[2],
            },
            Mechanism::Stoc => RefineParams::Stoc {
                wmu: vars[0],
                wsigma: vars[1],
            },
        })
    }
}

/// Exact refinement parameter count for `config`.
pub fn parameter_count(config: &ModelConfig) -> usize {
    config.refinement_parameter_count()
}

/// Divisor for refined inner products under `config`.
pub fn refine_divisor<S: Scalar>(config: &ModelConfig) -> S {
    let dim = match config.refine_scale {
        RefineScale::SqrtD => config.d,
        RefineScale::SqrtN => config.n,
    };
    S::from_usize(dim).unwrap().sqrt()
}

/// Zeroes disallowed entries of `a` so they cannot leak through the `n × n`
/// products of a refinement.
pub fn sanitize_scores<S: Scalar>(tape: &Tape<S>, a: Var, mask: &AttentionMask<S>) -> Result<Var> {
    let allowed = mask.allowed_var(tape);
    tape.mul(a, allowed)
}

/// `B = (A W_RQ)(A W_RK)ᵀ / divisor`.
pub fn refine_simp<S: Scalar>(tape: &Tape<S>, a: Var, wrq: Var, wrk: Var, divisor: S) -> Result<Var> {
    let q = tape.matmul(a, wrq)?;
    let k = tape.matmul(a, wrk)?;
    let kt = tape.transpose(k)?;
    let b = tape.matmul(q, kt)?;
    Ok(tape.scale(b, divisor.recip()))
}

/// `B = ((A W_RK)(A W_RQ)ᵀ / divisor + A) / 2`; the key map sits on the
/// query side here, the mirror image of [`refine_simp`].
pub fn refine_add<S: Scalar>(tape: &Tape<S>, a: Var, wrq: Var, wrk: Var, divisor: S) -> Result<Var> {
    let s = refine_simp(tape, a, wrk, wrq, divisor)?;
    let b = tape.add(s, a)?;
    Ok(tape.scale(b, S::lit(0.5)))
}

/// `B = (W_RV A) · softmax_rows((W_RK A)ᵀ (W_RQ A))` over the whole window.
///
/// Row `k` of this product reads rows of `A` past `k`, so it is not causal.
/// Training uses [`refine_value`]; this form is kept as a reference.
pub fn refine_value_dense<S: Scalar>(
    tape: &Tape<S>,
    a: Var,
    wrq: Var,
    wrk: Var,
    wrv: Var,
) -> Result<Var> {
    let rk = tape.matmul(wrk, a)?;
    let rq = tape.matmul(wrq, a)?;
    let rkt = tape.transpose(rk)?;
    let inner = tape.matmul(rkt, rq)?;
    let inner = tape.softmax_rows(inner, None)?;
    let rv = tape.matmul(wrv, a)?;
    tape.matmul(rv, inner)
}

/// Causal form of [`refine_value_dense`].
///
/// Row `k` is row `k` of the dense formula applied to the leading
/// `(k+1) × (k+1)` blocks of `A` and of every refinement matrix, padded
/// with zeros to width `n`. The last row equals the dense formula.
pub fn refine_value<S: Scalar>(tape: &Tape<S>, a: Var, wrq: Var, wrk: Var, wrv: Var) -> Result<Var> {
    let shape = tape.shape(a);
    let nd = shape.len();
    if nd < 2 || shape[nd - 1] != shape[nd - 2] {
        return Err(Error::shape("refine_value", &shape, &shape));
    }
    let n = shape[nd - 1];
    let mut rows = Vec::with_capacity(n);
    for k in 0..n {
        let p = k + 1;
        let ap = tape.slice(a, 0..p, 0..p)?;
        let rk = tape.matmul(tape.slice(wrk, 0..p, 0..p)?, ap)?;
        let rq = tape.matmul(tape.slice(wrq, 0..p, 0..p)?, ap)?;
        let inner = tape.matmul(tape.transpose(rk)?, rq)?;
        let inner = tape.softmax_rows(inner, None)?;
        let rv_row = tape.matmul(tape.slice(wrv, k..p, 0..p)?, ap)?;
        let row = tape.matmul(rv_row, inner)?;
        let row = if p < n {
            let mut zshape = shape.clone();
            zshape[nd - 2] = 1;
            zshape[nd - 1] = n - p;
            let zeros = tape.constant(Tensor::zeros(zshape));
            tape.concat_cols(&[row, zeros])?
        } else {
            row
        };
        rows.push(row);
    }
    tape.concat_rows(&rows)
}

/// `B_kt = −W2(N(μ_k, Σ_k), N(μ_t, Σ_t))` with `μ = A W_μ` and
/// `Σ = elu(A W_Σ) + 1` (diagonal).
pub fn refine_stoc<S: Scalar>(tape: &Tape<S>, a: Var, wmu: Var, wsigma: Var) -> Result<Var> {
    let mu = tape.matmul(a, wmu)?;
    let var = tape.matmul(a, wsigma)?;
    let var = tape.elu_plus_one(var);
    let std = tape.sqrt(var)?;
    let feat = tape.concat_cols(&[mu, std])?;
    let d = tape.pairwise_distance(feat, feat)?;
    Ok(tape.neg(d))
}

/// Raw scores, refined scores (if any) and final weights of one head.
#[derive(Clone, Copy, Debug)]
pub struct Refined {
    pub a: Var,
    pub b: Option<Var>,
    pub weights: Var,
}

/// Masked refinement followed by the outer softmax.
///
/// With no mechanism the raw scores go straight into the masked softmax.
/// Otherwise `A` is sanitized, refined to `B`, and `B` is softmaxed under
/// the same mask. Disallowed entries of the weights are exactly zero, as
/// are rows of padded query positions.
pub fn refinement_pipeline<S: Scalar>(
    tape: &Tape<S>,
    a_raw: Var,
    mask: &AttentionMask<S>,
    params: &RefineParams,
    divisor: S,
) -> Result<Refined> {
    let b = match *params {
        RefineParams::None => None,
        other => {
            let a = sanitize_scores(tape, a_raw, mask)?;
            Some(match other {
                RefineParams::Simp { wrq, wrk } => refine_simp(tape, a, wrq, wrk, divisor)?,
                RefineParams::Add { wrq, wrk } => refine_add(tape, a, wrq, wrk, divisor)?,
                RefineParams::Value { wrq, wrk, wrv } => refine_value(tape, a, wrq, wrk, wrv)?,
                RefineParams::Stoc { wmu, wsigma } => refine_stoc(tape, a, wmu, wsigma)?,
                RefineParams::None => unreachable!(),
            })
        }
    };
    let scores = b.unwrap_or(a_raw);
    let weights = tape.softmax_rows(scores, Some(mask.softmax_mask()))?;
    let weights = tape.mul(weights, mask.allowed_var(tape))?;
    Ok(Refined {
        a: a_raw,
        b,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::uniform(shape.to_vec(), -1.0, 1.0, rng)
    }

    #[test]
    fn mask_for_left_padded_inputs() {
        let m = AttentionMask::<f64>::from_inputs(&[0, 0, 4, 7], 1, 4).unwrap();
        let allowed = m.allowed().data();
        // query 3 sees 2 and 3 only
        assert_eq!(&allowed[12..16], &[false, false, true, true]);
        // pad query rows get only their diagonal in the softmax mask
        assert_eq!(&m.softmax_mask().data()[0..4], &[true, false, false, false]);
        assert_eq!(&allowed[0..4], &[false; 4]);
    }

    #[test]
    fn sanitize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let a = tape.constant(rand(&[1, 3, 3], &mut rng));
        let mask = AttentionMask::causal(3);
        let s = sanitize_scores(&tape, a, &mask).unwrap();
        let v = tape.value(s).clone();
        for k in 0..3 {
            for t in 0..3 {
                let want = if t <= k { tape.value(a).at3(0, k, t) } else { 0.0 };
                assert_eq!(v.at3(0, k, t), want);
            }
        }
        let again = sanitize_scores(&tape, s, &mask).unwrap();
        assert_eq!(*tape.value(again), v);
    }

    #[test]
    fn simp_with_identity_is_a_at() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let at = rand(&[3, 3], &mut rng);
        let a = tape.constant(at.clone());
        let i = tape.constant(Tensor::identity(3));
        let b = refine_simp(&tape, a, i, i, 2.0).unwrap();
        let b = tape.value(b);
        for k in 0..3 {
            for t in 0..3 {
                let dot: f64 = (0..3).map(|j| at.at(&[k, j]) * at.at(&[t, j])).sum();
                assert!((b.at(&[k, t]) - dot / 2.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_scores_give_zero_refinement() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([3, 3]));
        let w: Vec<Var> = (0..3).map(|_| tape.constant(rand(&[3, 3], &mut rng))).collect();
        for b in [
            refine_simp(&tape, a, w[0], w[1], 2.0).unwrap(),
            refine_add(&tape, a, w[0], w[1], 2.0).unwrap(),
            refine_value(&tape, a, w[0], w[1], w[2]).unwrap(),
            refine_value_dense(&tape, a, w[0], w[1], w[2]).unwrap(),
        ] {
            assert!(tape.value(b).data().iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn value_last_row_matches_dense_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let a = tape.constant(rand(&[2, 4, 4], &mut rng));
        let w: Vec<Var> = (0..3).map(|_| tape.constant(rand(&[4, 4], &mut rng))).collect();
        let causal = refine_value(&tape, a, w[0], w[1], w[2]).unwrap();
        let dense = refine_value_dense(&tape, a, w[0], w[1], w[2]).unwrap();
        let (c, d) = (tape.value(causal), tape.value(dense));
        for b in 0..2 {
            for t in 0..4 {
                assert!((c.at3(b, 3, t) - d.at3(b, 3, t)).abs() < 1e-12);
                assert_eq!(c.at3(b, 0, t) == 0.0, t > 0);
            }
        }
    }

    #[test]
    fn stoc_is_symmetric_with_zero_diagonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let tape = Tape::new();
        let a = tape.constant(rand(&[4, 4], &mut rng));
        let wm = tape.constant(rand(&[4, 4], &mut rng));
        let ws = tape.constant(rand(&[4, 4], &mut rng));
        let b = refine_stoc(&tape, a, wm, ws).unwrap();
        let b = tape.value(b).clone();
        for k in 0..4 {
            assert_eq!(b.at(&[k, k]), 0.0);
            for t in 0..4 {
                assert_eq!(b.at(&[k, t]), b.at(&[t, k]));
                assert!(b.at(&[k, t]) <= 0.0);
            }
        }
        // identical rows collapse every distribution onto one
        let row = [0.3, -0.2, 0.5, 0.1];
        let same: Vec<f64> = row.iter().copied().cycle().take(16).collect();
        let a = tape.constant(Tensor::from_f64([4, 4], &same).unwrap());
        let b = refine_stoc(&tape, a, wm, ws).unwrap();
        assert!(tape.value(b).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn pipeline_weights_are_masked_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let inputs = [0, 0, 3, 5, 1, 2, 3, 4];
        let mask = AttentionMask::<f64>::from_inputs(&inputs, 2, 4).unwrap();
        for mech in Mechanism::ALL {
            let tape = Tape::new();
            let a = tape.constant(rand(&[2, 4, 4], &mut rng));
            let vars: Vec<Var> = mech
                .matrices()
                .iter()
                .map(|_| tape.constant(rand(&[4, 4], &mut rng)))
                .collect();
            let params = RefineParams::from_vars(mech, &vars).unwrap();
            let r = refinement_pipeline(&tape, a, &mask, &params, 2.0).unwrap();
            assert_eq!(r.b.is_some(), mech != Mechanism::None);
            let w = tape.value(r.weights);
            for b in 0..2 {
                for k in 0..4 {
                    let valid = inputs[b * 4 + k] != PAD;
                    let row: f64 = (0..4).map(|t| w.at3(b, k, t)).sum();
                    if valid {
                        assert!((row - 1.0).abs() < 1e-12, "{mech} {b} {k}: {row}");
                    } else {
                        assert_eq!(row, 0.0);
                    }
                    for t in 0..4 {
                        if !mask.allowed().get((b * 4 + k) * 4 + t) {
                            assert_eq!(w.at3(b, k, t), 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn parameter_count_examples() {
        let c = ModelConfig {
            n: 20,
            layers: 1,
            heads: 1,
            mechanism: Mechanism::Add,
            ..ModelConfig::default()
        };
        assert_eq!(parameter_count(&c), 800);
    }
}
