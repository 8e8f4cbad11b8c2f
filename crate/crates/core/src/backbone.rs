//! Embeddings and the two self-attention encoders.
//!
//! Sequences are left padded to the configured length `n`. The dot-product
//! encoder keeps one point state per position; the stochastic encoder keeps
//! a mean stream and a raw covariance stream, with effective covariance
//! `elu(raw) + 1`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Backbone, ModelConfig};
use crate::data::{left_pad, PAD};
use crate::error::{Error, Result};
use crate::refine::{refine_divisor, refinement_pipeline, AttentionMask, RefineParams, Refined};
use crate::scalar::Scalar;
use crate::tensor::{elu_plus_one, Bound, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-8;

/// Diagonal Gaussians, one per row.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianEmbedding<S> {
    pub mean: Tensor<S>,
    /// Pre-activation covariance; see [`GaussianEmbedding::covariance`].
    pub cov_raw: Tensor<S>,
}

impl<S: Scalar> GaussianEmbedding<S> {
    pub fn new(mean: Tensor<S>, cov_raw: Tensor<S>) -> Result<Self> {
        if mean.shape() != cov_raw.shape() || mean.ndim() != 2 {
            return Err(Error::shape("gaussian embedding", mean.shape(), cov_raw.shape()));
        }
        Ok(Self { mean, cov_raw })
    }

    /// Effective diagonal covariance, strictly positive.
    pub fn covariance(&self) -> Tensor<S> {
        self.cov_raw.map(elu_plus_one)
    }

    pub fn len(&self) -> usize {
        self.mean.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Scores and weights of one attention head for one sequence, all `n × n`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionRecord<S> {
    pub layer: usize,
    pub head: usize,
    pub a: Tensor<S>,
    pub b: Option<Tensor<S>>,
    pub weights: Tensor<S>,
}

/// Final per-position states of one encoded sequence.
#[derive(Clone, Debug, PartialEq)]
pub enum Encoded<S> {
    Dot(Tensor<S>),
    Stochastic(GaussianEmbedding<S>),
}

/// `(H W_Q)(H W_K)ᵀ / √d_head` for `H: [.., n, d]` and `W: [d, d_head]`.
pub fn dot_attention_scores<S: Scalar>(tape: &Tape<S>, h: Var, wq: Var, wk: Var) -> Result<Var> {
    let q = tape.matmul(h, wq)?;
    let k = tape.matmul(h, wk)?;
    let d_head = *tape.shape(wq).last().expect("2-D weight");
    let kt = tape.transpose(k)?;
    let a = tape.matmul(q, kt)?;
    Ok(tape.scale(a, S::from_usize(d_head).unwrap().sqrt().recip()))
}

/// Wasserstein-2 distance between two diagonal Gaussians.
pub fn wasserstein2_diag<S: Scalar>(mu1: &[S], var1: &[S], mu2: &[S], var2: &[S]) -> Result<S> {
    let d = mu1.len();
    if var1.len() != d || mu2.len() != d || var2.len() != d {
        return Err(Error::shape(
            "wasserstein2_diag",
            &[mu1.len(), var1.len()],
            &[mu2.len(), var2.len()],
        ));
    }
    if var1.iter().chain(var2).any(|&v| !(v > S::zero())) {
        return Err(Error::contract("wasserstein2_diag needs strictly positive variances"));
    }
    let mut sq = S::zero();
    for i in 0..d {
        let dm = mu1[i] - mu2[i];
        let ds = var1[i].sqrt() - var2[i].sqrt();
        sq += dm * dm + ds * ds;
    }
    Ok(sq.sqrt())
}

/// Rows `[mean W_μ, sqrt(elu(cov_raw W_Σ) + 1)]`: Euclidean distance between
/// two such rows is the Wasserstein-2 distance of the projected Gaussians.
pub fn gaussian_features<S: Scalar>(
    tape: &Tape<S>,
    mean: Var,
    cov_raw: Var,
    w_mu: Var,
    w_sigma: Var,
) -> Result<Var> {
    let m = tape.matmul(mean, w_mu)?;
    let c = tape.matmul(cov_raw, w_sigma)?;
    let c = tape.elu_plus_one(c);
    let s = tape.sqrt(c)?;
    tape.concat_cols(&[m, s])
}

/// Linear maps of one stochastic attention head.
#[derive(Clone, Copy, Debug)]
pub struct StochasticHead {
    pub wq_mu: Var,
    pub wq_sigma: Var,
    pub wk_mu: Var,
    pub wk_sigma: Var,
    pub wv_mu: Var,
    pub wv_sigma: Var,
}

/// `A_kt = −W2(query_k, key_t)` over a Gaussian state `[.., n, d]`.
pub fn stochastic_attention_scores<S: Scalar>(
    tape: &Tape<S>,
    mean: Var,
    cov_raw: Var,
    head: &StochasticHead,
) -> Result<Var> {
    let q = gaussian_features(tape, mean, cov_raw, head.wq_mu, head.wq_sigma)?;
    let k = gaussian_features(tape, mean, cov_raw, head.wk_mu, head.wk_sigma)?;
    let d = tape.pairwise_distance(q, k)?;
    Ok(tape.neg(d))
}

/// `weights · values`.
pub fn aggregate_values<S: Scalar>(tape: &Tape<S>, weights: Var, values: Var) -> Result<Var> {
    tape.matmul(weights, values)
}

/// Output of a batched forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// `[batch, n, d]` for the dot backbone.
    pub state: Var,
    /// Raw covariance stream of the stochastic backbone.
    pub cov_raw: Option<Var>,
    /// `(layer, head, scores)` for every head.
    pub attention: Vec<(usize, usize, Refined)>,
}

/// Encoder parameters plus the shapes they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    config: ModelConfig,
    num_items: usize,
    params: ParamStore<S>,
}

/// `rows × cols` tensor, uniform with Glorot bounds.
fn glorot<S: Scalar>(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor<S> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::uniform([rows, cols], -a, a, rng)
}

fn stream_prefix(layer: usize, stream: Option<&str>) -> String {
    match stream {
        Some(s) => format!("layer{layer}.{s}"),
        None => format!("layer{layer}"),
    }
}

impl<S: Scalar> Model<S> {
    /// Fresh parameters for `num_items` items (ids `1..=num_items`), drawn
    /// from `config.seed`.
    pub fn new(config: ModelConfig, num_items: usize) -> Result<Self> {
        config.validate()?;
        if num_items == 0 {
            return Err(Error::config("model needs at least one item"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let (d, n, dh) = (config.d, config.n, config.d_head());
        let emb = (3.0 / d as f64).sqrt();
        let streams: &[Option<&str>] = match config.backbone {
            Backbone::DotProduct => {
                p.add("item_emb", Tensor::uniform([num_items + 1, d], -emb, emb, &mut rng))?;
                p.add("pos_emb", Tensor::uniform([n, d], -emb, emb, &mut rng))?;
                &[None]
            }
            Backbone::Stochastic => {
                for name in ["item_mean", "item_cov"] {
                    p.add(name, Tensor::uniform([num_items + 1, d], -emb, emb, &mut rng))?;
                }
                for name in ["pos_mean", "pos_cov"] {
                    p.add(name, Tensor::uniform([n, d], -emb, emb, &mut rng))?;
                }
                &[Some("mean"), Some("cov")]
            }
        };
        let head_maps: &[&str] = match config.backbone {
            Backbone::DotProduct => &["WQ", "WK", "WV"],
            Backbone::Stochastic => &["WQ_mean", "WQ_cov", "WK_mean", "WK_cov", "WV_mean", "WV_cov"],
        };
        for l in 0..config.layers {
            for h in 0..config.heads {
                for m in head_maps {
                    p.add(format!("layer{l}.head{h}.{m}"), glorot(d, dh, &mut rng))?;
                }
                for m in config.mechanism.matrices() {
                    p.add(
                        format!("layer{l}.head{h}.refine.{m}"),
                        Tensor::uniform([n, n], -0.02, 0.02, &mut rng),
                    )?;
                }
            }
            for &s in streams {
                let pre = stream_prefix(l, s);
                for norm in ["attn_norm", "ffn_norm"] {
                    p.add(format!("{pre}.{norm}.gain"), Tensor::full([d], S::one()))?;
                    p.add(format!("{pre}.{norm}.bias"), Tensor::zeros([d]))?;
                }
                p.add(format!("{pre}.ffn.W1"), glorot(d, d, &mut rng))?;
                p.add(format!("{pre}.ffn.b1"), Tensor::zeros([d]))?;
                p.add(format!("{pre}.ffn.W2"), glorot(d, d, &mut rng))?;
                p.add(format!("{pre}.ffn.b2"), Tensor::zeros([d]))?;
            }
        }
        Ok(Self {
            config,
            num_items,
            params: p,
        })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh layout.
    pub fn from_parts(config: ModelConfig, num_items: usize, params: ParamStore<S>) -> Result<Self> {
        let layout = Self::new(config.clone(), num_items)?;
        if layout.params.len() != params.len() {
            return Err(Error::data(format!(
                "expected {} parameters, found {}",
                layout.params.len(),
                params.len()
            )));
        }
        for (want, got) in layout.params.iter().zip(params.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::data(format!(
                    "parameter `{}` {:?} does not match expected `{}` {:?}",
                    got.name,
                    got.value.shape(),
                    want.name,
                    want.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            num_items,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    fn var(&self, bound: &Bound, name: &str) -> Var {
        let id = self
            .params
            .id(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from layout"));
        bound[id]
    }

    fn layer_norm(&self, tape: &Tape<S>, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let y = tape.layer_norm(x, S::lit(LN_EPS));
        let y = tape.mul(y, self.var(bound, &format!("{prefix}.gain")))?;
        tape.add(y, self.var(bound, &format!("{prefix}.bias")))
    }

    fn feed_forward(
        &self,
        tape: &Tape<S>,
        bound: &Bound,
        x: Var,
        pre: &str,
        rng: &mut Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let p = self.config.dropout;
        let f = tape.matmul(x, self.var(bound, &format!("{pre}.ffn.W1")))?;
        let f = tape.add(f, self.var(bound, &format!("{pre}.ffn.b1")))?;
        let f = tape.relu(f);
        let f = tape.dropout(f, p, rng.as_deref_mut())?;
        let f = tape.matmul(f, self.var(bound, &format!("{pre}.ffn.W2")))?;
        let f = tape.add(f, self.var(bound, &format!("{pre}.ffn.b2")))?;
        let f = tape.dropout(f, p, rng.as_deref_mut())?;
        let r = tape.add(x, f)?;
        self.layer_norm(tape, bound, r, &format!("{pre}.ffn_norm"))
    }

    fn refine_params(&self, bound: &Bound, l: usize, h: usize) -> Result<RefineParams> {
        let mech = self.config.mechanism;
        let vars: Vec<Var> = mech
            .matrices()
            .iter()
            .map(|m| self.var(bound, &format!("layer{l}.head{h}.refine.{m}")))
            .collect();
        RefineParams::from_vars(mech, &vars)
    }

    fn embed(&self, tape: &Tape<S>, bound: &Bound, table: &str, pos: &str, inputs: &[usize], batch: usize) -> Result<Var> {
        let (n, d) = (self.config.n, self.config.d);
        let e = tape.gather_rows(self.var(bound, table), inputs)?;
        let e = tape.reshape(e, [batch, n, d])?;
        tape.add(e, self.var(bound, pos))
    }

    /// Encodes `[batch × n]` left-padded item ids (row-major).
    ///
    /// Dropout is active only when `rng` is given.
    pub fn forward(
        &self,
        tape: &Tape<S>,
        bound: &Bound,
        inputs: &[usize],
        batch: usize,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Forward> {
        let c = &self.config;
        let n = c.n;
        if let Some(&bad) = inputs.iter().find(|&&i| i > self.num_items) {
            return Err(Error::contract(format!(
                "item id {bad} exceeds vocabulary of {}",
                self.num_items
            )));
        }
        let mask = AttentionMask::from_inputs(inputs, batch, n)?;
        let divisor = refine_divisor::<S>(c);
        let p = c.dropout;
        let mut attention = Vec::with_capacity(c.layers * c.heads);
        match c.backbone {
            Backbone::DotProduct => {
                let h0 = self.embed(tape, bound, "item_emb", "pos_emb", inputs, batch)?;
                let mut h = tape.dropout(h0, p, rng.as_deref_mut())?;
                for l in 0..c.layers {
                    let mut outs = Vec::with_capacity(c.heads);
                    for hd in 0..c.heads {
                        let w = |m: &str| self.var(bound, &format!("layer{l}.head{hd}.{m}"));
                        let a = dot_attention_scores(tape, h, w("WQ"), w("WK"))?;
                        let params = self.refine_params(bound, l, hd)?;
                        let r = refinement_pipeline(tape, a, &mask, &params, divisor)?;
                        let v = tape.matmul(h, w("WV"))?;
                        outs.push(aggregate_values(tape, r.weights, v)?);
                        attention.push((l, hd, r));
                    }
                    let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
                    let o = tape.dropout(o, p, rng.as_deref_mut())?;
                    let x = tape.add(h, o)?;
                    let x = self.layer_norm(tape, bound, x, &format!("layer{l}.attn_norm"))?;
                    h = self.feed_forward(tape, bound, x, &format!("layer{l}"), &mut rng)?;
                }
                Ok(Forward {
                    state: h,
                    cov_raw: None,
                    attention,
                })
            }
            Backbone::Stochastic => {
                let m0 = self.embed(tape, bound, "item_mean", "pos_mean", inputs, batch)?;
                let c0 = self.embed(tape, bound, "item_cov", "pos_cov", inputs, batch)?;
                let mut m = tape.dropout(m0, p, rng.as_deref_mut())?;
                let mut cv = tape.dropout(c0, p, rng.as_deref_mut())?;
                for l in 0..c.layers {
                    let (mut om, mut oc) = (Vec::new(), Vec::new());
                    for hd in 0..c.heads {
                        let w = |s: &str| self.var(bound, &format!("layer{l}.head{hd}.{s}"));
                        let head = StochasticHead {
                            wq_mu: w("WQ_mean"),
                            wq_sigma: w("WQ_cov"),
                            wk_mu: w("WK_mean"),
                            wk_sigma: w("WK_cov"),
                            wv_mu: w("WV_mean"),
                            wv_sigma: w("WV_cov"),
                        };
                        let a = stochastic_attention_scores(tape, m, cv, &head)?;
                        let params = self.refine_params(bound, l, hd)?;
                        let r = refinement_pipeline(tape, a, &mask, &params, divisor)?;
                        let vm = tape.matmul(m, head.wv_mu)?;
                        let vc = tape.matmul(cv, head.wv_sigma)?;
                        let vc = tape.elu_plus_one(vc);
                        if !tape.value(vc).data().iter().all(|&x| x > S::zero()) {
                            return Err(Error::contract(format!(
                                "value covariance lost positivity in layer {l} head {hd}"
                            )));
                        }
                        om.push(aggregate_values(tape, r.weights, vm)?);
                        oc.push(aggregate_values(tape, r.weights, vc)?);
                        attention.push((l, hd, r));
                    }
                    let mut next = Vec::with_capacity(2);
                    for (stream, x, outs) in [("mean", m, om), ("cov", cv, oc)] {
                        let o = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
                        let o = tape.dropout(o, p, rng.as_deref_mut())?;
                        let y = tape.add(x, o)?;
                        let pre = format!("layer{l}.{stream}");
                        let y = self.layer_norm(tape, bound, y, &format!("{pre}.attn_norm"))?;
                        next.push(self.feed_forward(tape, bound, y, &pre, &mut rng)?);
                    }
                    m = next[0];
                    cv = next[1];
                }
                Ok(Forward {
                    state: m,
                    cov_raw: Some(cv),
                    attention,
                })
            }
        }
    }

    /// Scoring features of encoder states, `[.., F]`. Points for the dot
    /// backbone; `[mean, √cov]` for the stochastic one.
    pub fn state_features(&self, tape: &Tape<S>, fwd: &Forward) -> Result<Var> {
        match fwd.cov_raw {
            None => Ok(fwd.state),
            Some(c) => {
                let cov = tape.elu_plus_one(c);
                let s = tape.sqrt(cov)?;
                tape.concat_cols(&[fwd.state, s])
            }
        }
    }

    /// Scoring features of every item (row 0 is padding), `[V + 1, F]`.
    pub fn item_features(&self, tape: &Tape<S>, bound: &Bound) -> Result<Var> {
        match self.config.backbone {
            Backbone::DotProduct => Ok(self.var(bound, "item_emb")),
            Backbone::Stochastic => {
                let cov = tape.elu_plus_one(self.var(bound, "item_cov"));
                let s = tape.sqrt(cov)?;
                tape.concat_cols(&[self.var(bound, "item_mean"), s])
            }
        }
    }

    /// Scores of matching rows `[m, F] × [m, F] -> [m]`: inner product for
    /// the dot backbone, negative Wasserstein-2 distance otherwise.
    pub fn score_pairs(&self, tape: &Tape<S>, states: Var, items: Var) -> Result<Var> {
        match self.config.backbone {
            Backbone::DotProduct => Ok(tape.sum_last(tape.mul(states, items)?)),
            Backbone::Stochastic => Ok(tape.neg(tape.row_distance(states, items)?)),
        }
    }

    /// Scores of every state row against every item row: `[m, V + 1]`.
    pub fn score_matrix(&self, tape: &Tape<S>, states: Var, items: Var) -> Result<Var> {
        match self.config.backbone {
            Backbone::DotProduct => tape.matmul(states, tape.transpose(items)?),
            Backbone::Stochastic => Ok(tape.neg(tape.pairwise_distance(states, items)?)),
        }
    }

    fn padded(&self, sequence: &[usize]) -> Result<Vec<usize>> {
        if sequence.len() > self.config.n {
            return Err(Error::contract(format!(
                "sequence of length {} exceeds n = {}",
                sequence.len(),
                self.config.n
            )));
        }
        if sequence.is_empty() || sequence.contains(&PAD) {
            return Err(Error::contract("sequence must be non-empty and free of padding ids"));
        }
        Ok(left_pad(sequence, self.config.n))
    }

    /// Encodes one sequence (at most `n` items, no dropout). Returns states
    /// for all `n` positions and every attention record; positions before
    /// the first item are padding.
    pub fn encode(&self, sequence: &[usize]) -> Result<(Encoded<S>, Vec<AttentionRecord<S>>)> {
        let inputs = self.padded(sequence)?;
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let fwd = self.forward(&tape, &bound, &inputs, 1, None)?;
        let n = self.config.n;
        let grab = |v: Var| tape.value(v).clone().reshape([n, n]);
        let mut records = Vec::with_capacity(fwd.attention.len());
        for &(layer, head, r) in &fwd.attention {
            records.push(AttentionRecord {
                layer,
                head,
                a: grab(r.a)?,
                b: r.b.map(grab).transpose()?,
                weights: grab(r.weights)?,
            });
        }
        let shape = [n, self.config.d];
        let state = tape.value(fwd.state).clone().reshape(shape)?;
        let encoded = match fwd.cov_raw {
            None => Encoded::Dot(state),
            Some(c) => Encoded::Stochastic(GaussianEmbedding::new(
                state,
                tape.value(c).clone().reshape(shape)?,
            )?),
        };
        Ok((encoded, records))
    }

    /// Scores `candidates` against the state at `position` of an encoded
    /// sequence. Higher is better.
    pub fn score_items(&self, encoded: &Encoded<S>, position: usize, candidates: &[usize]) -> Result<Vec<S>> {
        if let Some(&bad) = candidates.iter().find(|&&i| i == PAD || i > self.num_items) {
            return Err(Error::contract(format!("unknown item id {bad}")));
        }
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let state = match encoded {
            Encoded::Dot(t) => t.row(position).to_vec(),
            Encoded::Stochastic(g) => {
                let mut f = g.mean.row(position).to_vec();
                f.extend(g.covariance().row(position).iter().map(|v| v.sqrt()));
                f
            }
        };
        let feats = self.item_features(&tape, &bound)?;
        let f = state.len();
        let states = tape.constant(Tensor::new([1, f], state)?);
        let items = tape.gather_rows(feats, candidates)?;
        let scores = self.score_matrix(&tape, states, items)?;
        let out = tape.value(scores).data().to_vec();
        Ok(out)
    }

    /// Scores every item (index = item id, index 0 unused) after each of
    /// `histories`, using the last `n` items of each. Shape `[U, V + 1]`.
    pub fn score_next(&self, histories: &[&[usize]]) -> Result<Tensor<S>> {
        let n = self.config.n;
        let mut inputs = Vec::with_capacity(histories.len() * n);
        for h in histories {
            let tail = &h[h.len().saturating_sub(n)..];
            inputs.extend(self.padded(tail)?);
        }
        let u = histories.len();
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let fwd = self.forward(&tape, &bound, &inputs, u, None)?;
        let feats = self.state_features(&tape, &fwd)?;
        let f = *tape.shape(feats).last().unwrap();
        let last = tape.slice(feats, n - 1..n, 0..f)?;
        let last = tape.reshape(last, [u, f])?;
        let items = self.item_features(&tape, &bound)?;
        let scores = self.score_matrix(&tape, last, items)?;
        let out = tape.value(scores).clone();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Mechanism;

    fn small(backbone: Backbone, mechanism: Mechanism) -> ModelConfig {
        ModelConfig {
            backbone,
            mechanism,
            d: 4,
            n: 5,
            heads: 2,
            layers: 2,
            dropout: 0.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn parameter_layout_names() {
        let m = Model::<f64>::new(small(Backbone::DotProduct, Mechanism::Value), 12).unwrap();
        let p = m.params();
        assert!(p.id("layer0.head1.refine.WRQ").is_some());
        assert!(p.id("layer1.head0.refine.WRV").is_some());
        assert!(p.id("layer1.ffn.W2").is_some());
        let refine: usize = p
            .iter()
            .filter(|q| q.name.contains(".refine."))
            .map(|q| q.value.numel())
            .sum();
        assert_eq!(refine, m.config().refinement_parameter_count());
        let s = Model::<f64>::new(small(Backbone::Stochastic, Mechanism::Stoc), 12).unwrap();
        assert!(s.params().id("layer0.head0.refine.Wsigma_R").is_some());
        assert!(s.params().id("layer1.cov.ffn.b1").is_some());
    }

    #[test]
    fn encode_shapes_and_records() {
        for backbone in [Backbone::DotProduct, Backbone::Stochastic] {
            let m = Model::<f64>::new(small(backbone, Mechanism::Simp), 12).unwrap();
            let (enc, rec) = m.encode(&[3, 4, 5]).unwrap();
            assert_eq!(rec.len(), 4);
            match enc {
                Encoded::Dot(t) => assert_eq!(t.shape(), &[5, 4]),
                Encoded::Stochastic(g) => {
                    assert_eq!(g.mean.shape(), &[5, 4]);
                    assert!(g.covariance().data().iter().all(|&v| v > 0.0));
                }
            }
            for r in &rec {
                assert_eq!(r.weights.shape(), &[5, 5]);
                assert!(r.b.is_some());
            }
        }
    }

    #[test]
    fn encode_rejects_long_sequences() {
        let m = Model::<f64>::new(small(Backbone::DotProduct, Mechanism::None), 12).unwrap();
        assert!(matches!(m.encode(&[1; 6]), Err(Error::Contract(_))));
        assert!(m.encode(&[13]).is_err());
    }

    #[test]
    fn score_next_matches_score_items() {
        for backbone in [Backbone::DotProduct, Backbone::Stochastic] {
            let m = Model::<f64>::new(small(backbone, Mechanism::None), 12).unwrap();
            let seq = [2, 7, 9];
            let all = m.score_next(&[&seq]).unwrap();
            let (enc, _) = m.encode(&seq).unwrap();
            let ids: Vec<usize> = (1..=12).collect();
            let one = m.score_items(&enc, 4, &ids).unwrap();
            for (k, &id) in ids.iter().enumerate() {
                assert!((all.at(&[0, id]) - one[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn w2_examples() {
        assert_eq!(wasserstein2_diag(&[0.5], &[2.0], &[0.5], &[2.0]).unwrap(), 0.0);
        assert_eq!(wasserstein2_diag(&[0.0], &[1.0], &[1.0], &[1.0]).unwrap(), 1.0);
        assert!(wasserstein2_diag(&[0.0], &[0.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn f32_model_runs() {
        let m = Model::<f32>::new(small(Backbone::Stochastic, Mechanism::Add), 12).unwrap();
        let s = m.score_next(&[&[1, 2, 3]]).unwrap();
        assert!(s.all_finite());
    }
}
