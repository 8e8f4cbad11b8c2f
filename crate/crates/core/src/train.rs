//! Loss, optimizer and the early-stopping training loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::checkpoint::NamedTensor;
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch_iter, Batch, SplitDataset, Target};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::scalar::Scalar;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

/// Binary cross-entropy with sampled negatives, averaged over unmasked
/// positions: `−Σ [log σ(pos) + Σ_j log σ(−neg_j)] / count`.
///
/// `pos` is `[m]`, `neg` is `[m · k]` (position-major) and `mask` has `m`
/// entries.
pub fn bce_loss<S: Scalar>(tape: &Tape<S>, pos: Var, neg: Var, mask: &[bool]) -> Result<Var> {
    let m = mask.len();
    let count = mask.iter().filter(|&&b| b).count();
    if count == 0 {
        return Err(Error::contract("every position is masked"));
    }
    let np = tape.value(pos).numel();
    let nn = tape.value(neg).numel();
    if np != m || !nn.is_multiple_of(m) {
        return Err(Error::shape("bce_loss", &[np, nn], &[m]));
    }
    let k = nn / m;
    let on = |b: bool| if b { S::one() } else { S::zero() };
    let wp: Vec<S> = mask.iter().map(|&b| on(b)).collect();
    let wn: Vec<S> = mask.iter().flat_map(|&b| std::iter::repeat_n(on(b), k)).collect();
    let wp = tape.constant(Tensor::new(tape.shape(pos), wp)?);
    let wn = tape.constant(Tensor::new(tape.shape(neg), wn)?);
    let lp = tape.log_sigmoid(pos);
    let ln = tape.log_sigmoid(tape.neg(neg));
    let total = tape.add(tape.sum(tape.mul(lp, wp)?), tape.sum(tape.mul(ln, wn)?))?;
    Ok(tape.scale(total, -S::from_usize(count).unwrap().recip()))
}

/// Training loss of `model` on one batch. Dropout runs when `rng` is given.
pub fn batch_loss<S: Scalar>(
    model: &Model<S>,
    tape: &Tape<S>,
    bound: &Bound,
    batch: &Batch,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var> {
    let (b, n, k) = (batch.size, batch.n, batch.num_negatives);
    let fwd = model.forward(tape, bound, &batch.inputs, b, rng)?;
    let feats = model.state_features(tape, &fwd)?;
    let f = *tape.shape(feats).last().unwrap();
    let states = tape.reshape(feats, [b * n, f])?;
    let items = model.item_features(tape, bound)?;
    let pos_items = tape.gather_rows(items, &batch.positives)?;
    let pos = model.score_pairs(tape, states, pos_items)?;
    let repeat: Vec<usize> = (0..b * n).flat_map(|i| std::iter::repeat_n(i, k)).collect();
    let neg_states = tape.gather_rows(states, &repeat)?;
    let neg_items = tape.gather_rows(items, &batch.negatives)?;
    let neg = model.score_pairs(tape, neg_states, neg_items)?;
    bce_loss(tape, pos, neg, &batch.mask)
}

/// L2 norm of all gradients taken together.
pub fn global_grad_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|&v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// Adam with bias correction. The L2 penalty `λ/2 · ‖θ‖²` is part of the
/// loss, so its gradient `λθ` is added before the moment updates.
///
/// Moments are kept in `f64` regardless of the parameter type.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub l2_weight: f64,
    /// Updates applied so far.
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<S: Scalar>(lr: f64, l2_weight: f64, params: &ParamStore<S>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            l2_weight,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Adds the L2 gradient to `grads` in place and rejects non-finite
    /// entries, naming the parameter.
    pub fn regularize<S: Scalar>(&self, params: &ParamStore<S>, grads: &mut [Tensor<S>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        let l2 = S::lit(self.l2_weight);
        for (p, g) in params.iter().zip(grads.iter_mut()) {
            if g.shape() != p.value.shape() {
                return Err(Error::shape("adam", g.shape(), p.value.shape()));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite {
                    what: "gradient",
                    name: p.name.clone(),
                });
            }
            if self.l2_weight != 0.0 {
                for (gv, &pv) in g.data_mut().iter_mut().zip(p.value.data()) {
                    *gv += l2 * pv;
                }
            }
        }
        Ok(())
    }

    /// One update with already-regularized gradients.
    pub fn apply<S: Scalar>(&mut self, params: &mut ParamStore<S>, grads: &[Tensor<S>]) -> Result<()> {
        if self.m.len() != params.len() {
            return Err(Error::contract("optimizer state does not match parameters"));
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (w, &gv)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                let g = gv.as_f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w = S::lit(w.as_f64() - self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
        Ok(())
    }

    /// [`Adam::regularize`] followed by [`Adam::apply`].
    pub fn step<S: Scalar>(&mut self, params: &mut ParamStore<S>, mut grads: Vec<Tensor<S>>) -> Result<()> {
        self.regularize(params, &mut grads)?;
        self.apply(params, &grads)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg5: f64,
    /// Mean over the epoch's steps.
    pub grad_norm: f64,
    /// Wall-clock time; the only non-deterministic field.
    pub seconds: f64,
}

impl EpochRecord {
    /// The record without its wall-clock time, for reproducibility checks.
    pub fn deterministic(&self) -> (usize, u64, u64, u64) {
        (
            self.epoch,
            self.train_loss.to_bits(),
            self.valid_ndcg5.to_bits(),
            self.grad_norm.to_bits(),
        )
    }
}

/// Everything needed to continue training exactly where it stopped.
///
/// Batch order and dropout masks are drawn from RNGs seeded by
/// `(seed, epoch)`, so no generator state needs to be stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid_ndcg5: Option<f64>,
    pub best_epoch: usize,
    pub epochs_since_improvement: usize,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
    pub best_params: Vec<NamedTensor>,
    pub finished: bool,
}

/// Seed for `stream` in `epoch`, decorrelated from neighbouring values.
fn epoch_seed(seed: u64, epoch: usize, stream: u64) -> u64 {
    let mut z = seed
        ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ stream.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Called on the gradients of every step before the optimizer sees them.
pub type GradHook<'h, S> = Box<dyn FnMut(&mut [Tensor<S>]) + 'h>;

/// Stepwise trainer with early stopping on validation NDCG@5.
pub struct Trainer<'a, 'h, S: Scalar> {
    model: Model<S>,
    config: TrainConfig,
    split: &'a SplitDataset,
    state: TrainState,
    grad_hook: Option<GradHook<'h, S>>,
}

impl<'a, 'h, S: Scalar> Trainer<'a, 'h, S> {
    pub fn new(model: Model<S>, config: TrainConfig, split: &'a SplitDataset) -> Result<Self> {
        config.validate()?;
        if model.num_items() != split.num_items {
            return Err(Error::config(format!(
                "model has {} items, dataset has {}",
                model.num_items(),
                split.num_items
            )));
        }
        if model.config().n != split.max_len {
            return Err(Error::config(format!(
                "model n = {} but dataset was built with max_len = {}",
                model.config().n,
                split.max_len
            )));
        }
        let c = model.config();
        let state = TrainState {
            epoch: 0,
            best_valid_ndcg5: None,
            best_epoch: 0,
            epochs_since_improvement: 0,
            adam: Adam::new(c.learning_rate, c.l2_weight, model.params()),
            history: Vec::new(),
            best_params: NamedTensor::from_store(model.params()),
            finished: false,
        };
        Ok(Self {
            model,
            config,
            split,
            state,
            grad_hook: None,
        })
    }

    /// Continues from a saved state; `model` holds the parameters as they
    /// were at the end of `state.epoch`.
    pub fn resume(model: Model<S>, config: TrainConfig, split: &'a SplitDataset, state: TrainState) -> Result<Self> {
        let mut t = Self::new(model, config, split)?;
        if state.best_params.len() != t.model.params().len() {
            return Err(Error::data("saved trainer state does not match the model"));
        }
        t.state = state;
        Ok(t)
    }

    pub fn set_grad_hook(&mut self, hook: GradHook<'h, S>) {
        self.grad_hook = Some(hook);
    }

    pub fn model(&self) -> &Model<S> {
        &self.model
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn is_finished(&self) -> bool {
        self.state.finished
    }

    fn model_config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Runs one epoch of updates, then scores the model with `validate`
    /// and updates the early-stopping state.
    pub fn run_epoch(&mut self, validate: &mut dyn FnMut(&Model<S>) -> Result<f64>) -> Result<EpochRecord> {
        if self.state.finished {
            return Err(Error::contract("training already finished"));
        }
        let start = Instant::now();
        let epoch = self.state.epoch + 1;
        let seed = self.model_config().seed;
        let dropout = self.model_config().dropout;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(epoch_seed(seed, epoch, 1));
        let batches = batch_iter(
            self.split,
            self.config.batch_size,
            self.config.num_negatives,
            epoch_seed(seed, epoch, 0),
        )?;
        let (mut loss_sum, mut norm_sum, mut steps) = (0.0, 0.0, 0usize);
        for batch in batches {
            let tape = Tape::new();
            let bound = self.model.params().bind(&tape);
            let rng: Option<&mut dyn rand::RngCore> = if dropout > 0.0 { Some(&mut drop_rng) } else { None };
            let loss = batch_loss(&self.model, &tape, &bound, &batch, rng)?;
            let value = tape.item(loss).as_f64();
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    what: "loss",
                    name: format!("epoch {epoch} step {}", steps + 1),
                });
            }
            tape.backward(loss)?;
            let mut grads = self.model.params().grads(&tape, &bound);
            drop(bound);
            drop(tape);
            if let Some(hook) = self.grad_hook.as_mut() {
                hook(&mut grads);
            }
            self.state.adam.regularize(self.model.params(), &mut grads)?;
            norm_sum += global_grad_norm(&grads);
            self.state.adam.apply(self.model.params_mut(), &grads)?;
            loss_sum += value;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::data("no user has enough training items to form a batch"));
        }
        let valid = validate(&self.model)?;
        let st = &mut self.state;
        st.epoch = epoch;
        if st.best_valid_ndcg5.is_none_or(|b| valid > b) {
            st.best_valid_ndcg5 = Some(valid);
            st.best_epoch = epoch;
            st.epochs_since_improvement = 0;
            st.best_params = NamedTensor::from_store(self.model.params());
        } else {
            st.epochs_since_improvement += 1;
        }
        if st.epochs_since_improvement >= self.config.patience || epoch >= self.config.max_epochs {
            st.finished = true;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / steps as f64,
            valid_ndcg5: valid,
            grad_norm: norm_sum / steps as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        st.history.push(record.clone());
        Ok(record)
    }

    /// The best-validation parameters and the final state.
    pub fn into_best(self) -> Result<(Model<S>, TrainState)> {
        let store = NamedTensor::to_store(&self.state.best_params)?;
        let model = Model::from_parts(self.model.config().clone(), self.model.num_items(), store)?;
        Ok((model, self.state))
    }
}

/// Validation NDCG@5 under `config.valid_mode`.
pub fn valid_ndcg5<S: Scalar>(model: &Model<S>, split: &SplitDataset, config: &TrainConfig) -> Result<f64> {
    let seed = model.config().seed;
    let r = evaluate(model, split, Target::Valid, &[5], config.valid_mode, seed)?;
    Ok(r.ndcg(5).unwrap_or(0.0))
}

/// Trains until early stopping with a caller-supplied validation score.
pub fn fit_with<S: Scalar>(
    model: Model<S>,
    config: &TrainConfig,
    split: &SplitDataset,
    validate: &mut dyn FnMut(&Model<S>) -> Result<f64>,
) -> Result<(Model<S>, TrainState)> {
    let mut t = Trainer::new(model, config.clone(), split)?;
    while !t.is_finished() {
        let r = t.run_epoch(validate)?;
        log::info!(
            "epoch {} loss {:.5} valid_ndcg5 {:.5} grad_norm {:.4}",
            r.epoch,
            r.train_loss,
            r.valid_ndcg5,
            r.grad_norm
        );
    }
    t.into_best()
}

/// Builds a model from `model_config` and trains it with validation
/// NDCG@5 as the stopping criterion.
pub fn fit<S: Scalar>(
    model_config: &ModelConfig,
    config: &TrainConfig,
    split: &SplitDataset,
) -> Result<(Model<S>, TrainState)> {
    let model = Model::new(model_config.clone(), split.num_items)?;
    fit_with(model, config, split, &mut |m| valid_ndcg5(m, split, config))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        let tape = Tape::<f64>::new();
        let pos = tape.constant(Tensor::from_f64([2], &[0.0, 30.0]).unwrap());
        let neg = tape.constant(Tensor::from_f64([2], &[0.0, -30.0]).unwrap());
        let l = bce_loss(&tape, pos, neg, &[true, false]).unwrap();
        assert!((tape.item(l) - 2.0 * 2f64.ln()).abs() < 1e-15);
        let l = bce_loss(&tape, pos, neg, &[false, true]).unwrap();
        assert!(tape.item(l) < 1e-12);
        assert!(matches!(
            bce_loss(&tape, pos, neg, &[false, false]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn adam_first_step_and_zero_gradient() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(0.5)).unwrap();
        let mut adam = Adam::new(1e-3, 0.0, &store);
        adam.step(&mut store, vec![Tensor::scalar(1.0)]).unwrap();
        let w = store.iter().next().unwrap().value.item();
        assert!((0.5 - w - 1e-3).abs() < 1e-9);

        let before = store.clone();
        let mut adam = Adam::new(1e-3, 0.0, &store);
        adam.step(&mut store, vec![Tensor::scalar(0.0)]).unwrap();
        assert_eq!(store, before);
    }

    #[test]
    fn adam_reports_nonfinite_gradient_by_name() {
        let mut store = ParamStore::<f64>::new();
        store.add("layer0.ffn.W1", Tensor::zeros([2])).unwrap();
        let mut adam = Adam::new(1e-3, 0.0, &store);
        let err = adam
            .step(&mut store, vec![Tensor::from_f64([2], &[0.0, f64::NAN]).unwrap()])
            .unwrap_err();
        assert!(err.to_string().contains("layer0.ffn.W1"), "{err}");
        assert!(err.is_internal());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        let target = [3.0, -2.0, 0.5];
        let mut store = ParamStore::<f64>::new();
        store.add("x", Tensor::zeros([3])).unwrap();
        let mut adam = Adam::new(1e-2, 0.0, &store);
        for _ in 0..5000 {
            let x = store.iter().next().unwrap().value.clone();
            let g: Vec<f64> = x.data().iter().zip(target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam.step(&mut store, vec![Tensor::new([3], g).unwrap()]).unwrap();
        }
        let x = store.iter().next().unwrap().value.clone();
        for (a, b) in x.data().iter().zip(target) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn l2_is_a_loss_side_penalty() {
        let mut store = ParamStore::<f64>::new();
        store.add("w", Tensor::scalar(2.0)).unwrap();
        let adam = Adam::new(1e-3, 0.1, &store);
        let mut g = vec![Tensor::scalar(1.0)];
        adam.regularize(&store, &mut g).unwrap();
        assert!((g[0].item() - 1.2).abs() < 1e-15);
    }

    #[test]
    fn grad_norm_examples() {
        assert_eq!(global_grad_norm::<f64>(&[Tensor::zeros([3])]), 0.0);
        let g = [Tensor::scalar(3.0), Tensor::scalar(4.0)];
        assert_eq!(global_grad_norm(&g), 5.0);
    }

    #[test]
    fn epoch_seeds_differ() {
        let a = epoch_seed(1, 1, 0);
        assert_ne!(a, epoch_seed(1, 2, 0));
        assert_ne!(a, epoch_seed(1, 1, 1));
        assert_ne!(a, epoch_seed(2, 1, 0));
        assert_eq!(a, epoch_seed(1, 1, 0));
    }
}
