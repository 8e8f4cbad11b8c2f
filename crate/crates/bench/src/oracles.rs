//! Naive reference implementations: plain nested loops over `Vec<Vec<f64>>`,
//! sharing no code with the tensor library.

use seqrec::{Backbone, Model, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor) -> Mat {
    let (r, c) = (t.rows(), t.cols());
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn vec_of(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for l in 0..k {
                s += a[i][l] * b[l][j];
            }
            out[i][j] = s;
        }
    }
    out
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn elu1(x: f64) -> f64 {
    if x > 0.0 {
        x + 1.0
    } else {
        x.exp()
    }
}

/// Softmax over entries with `allowed[j]`, others exactly 0.
pub fn softmax(row: &[f64], allowed: &[bool]) -> Vec<f64> {
    let mut max = f64::NEG_INFINITY;
    for j in 0..row.len() {
        if allowed[j] && row[j] > max {
            max = row[j];
        }
    }
    let mut out = vec![0.0; row.len()];
    let mut z = 0.0;
    for j in 0..row.len() {
        if allowed[j] {
            out[j] = (row[j] - max).exp();
            z += out[j];
        }
    }
    for v in &mut out {
        *v /= z;
    }
    out
}

/// Closed-form Wasserstein-2 distance between diagonal Gaussians.
pub fn w2(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..mu1.len() {
        s += (mu1[i] - mu2[i]).powi(2) + (var1[i].sqrt() - var2[i].sqrt()).powi(2);
    }
    s.sqrt()
}

/// `A_kt = Σ_i q_ki k_ti / √d_head` with `q = H W_Q`, `k = H W_K`.
pub fn dot_scores(h: &Mat, wq: &Mat, wk: &Mat) -> Mat {
    let (n, d, dh) = (h.len(), h[0].len(), wq[0].len());
    let mut a = vec![vec![0.0; n]; n];
    for k in 0..n {
        for t in 0..n {
            let mut s = 0.0;
            for i in 0..dh {
                let mut q = 0.0;
                let mut kk = 0.0;
                for j in 0..d {
                    q += h[k][j] * wq[j][i];
                    kk += h[t][j] * wk[j][i];
                }
                s += q * kk;
            }
            a[k][t] = s / (dh as f64).sqrt();
        }
    }
    a
}

/// `A_kt = −W2(query_k, key_t)` with linear maps on mean and raw covariance.
pub fn stochastic_scores(mean: &Mat, cov: &Mat, wqm: &Mat, wqs: &Mat, wkm: &Mat, wks: &Mat) -> Mat {
    let n = mean.len();
    let qm = matmul(mean, wqm);
    let km = matmul(mean, wkm);
    let qs: Mat = matmul(cov, wqs).iter().map(|r| r.iter().map(|&x| elu1(x)).collect()).collect();
    let ks: Mat = matmul(cov, wks).iter().map(|r| r.iter().map(|&x| elu1(x)).collect()).collect();
    let mut a = vec![vec![0.0; n]; n];
    for k in 0..n {
        for t in 0..n {
            a[k][t] = -w2(&qm[k], &qs[k], &km[t], &ks[t]);
        }
    }
    a
}

pub fn refine_simp(a: &Mat, wrq: &Mat, wrk: &Mat, divisor: f64) -> Mat {
    let n = a.len();
    let mut b = vec![vec![0.0; n]; n];
    for k in 0..n {
        for t in 0..n {
            let mut s = 0.0;
            for i in 0..n {
                let mut q = 0.0;
                let mut kk = 0.0;
                for j in 0..n {
                    q += a[k][j] * wrq[j][i];
                    kk += a[t][j] * wrk[j][i];
                }
                s += q * kk;
            }
            b[k][t] = s / divisor;
        }
    }
    b
}

pub fn refine_add(a: &Mat, wrq: &Mat, wrk: &Mat, divisor: f64) -> Mat {
    let n = a.len();
    let ak = matmul(a, wrk);
    let aq = matmul(a, wrq);
    (0..n)
        .map(|k| {
            (0..n)
                .map(|t| {
                    let dot: f64 = (0..n).map(|j| ak[k][j] * aq[t][j]).sum();
                    (dot / divisor + a[k][t]) / 2.0
                })
                .collect()
        })
        .collect()
}

/// Row `k` from the leading `(k+1)`-blocks, zero beyond column `k`.
pub fn refine_value(a: &Mat, wrq: &Mat, wrk: &Mat, wrv: &Mat) -> Mat {
    let n = a.len();
    let mut b = vec![vec![0.0; n]; n];
    for k in 0..n {
        let p = k + 1;
        let mut rk = vec![vec![0.0; p]; p];
        let mut rq = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                for l in 0..p {
                    rk[i][j] += wrk[i][l] * a[l][j];
                    rq[i][j] += wrq[i][l] * a[l][j];
                }
            }
        }
        let mut inner = vec![vec![0.0; p]; p];
        for i in 0..p {
            for j in 0..p {
                for l in 0..p {
                    inner[i][j] += rk[l][i] * rq[l][j];
                }
            }
        }
        let soft: Mat = inner.iter().map(|r| softmax(r, &vec![true; p])).collect();
        let mut rv = vec![0.0; p];
        for j in 0..p {
            for l in 0..p {
                rv[j] += wrv[k][l] * a[l][j];
            }
        }
        for t in 0..p {
            for j in 0..p {
                b[k][t] += rv[j] * soft[j][t];
            }
        }
    }
    b
}

/// The whole-window formula, for comparison with the last row above.
pub fn refine_value_dense(a: &Mat, wrq: &Mat, wrk: &Mat, wrv: &Mat) -> Mat {
    let rk = matmul(wrk, a);
    let rq = matmul(wrq, a);
    let inner = matmul(&transpose(&rk), &rq);
    let n = a.len();
    let soft: Mat = inner.iter().map(|r| softmax(r, &vec![true; n])).collect();
    matmul(&matmul(wrv, a), &soft)
}

pub fn refine_stoc(a: &Mat, wmu: &Mat, wsig: &Mat) -> Mat {
    let n = a.len();
    let mu = matmul(a, wmu);
    let var: Mat = matmul(a, wsig).iter().map(|r| r.iter().map(|&x| elu1(x)).collect()).collect();
    let mut b = vec![vec![0.0; n]; n];
    for k in 0..n {
        for t in 0..n {
            b[k][t] = -w2(&mu[k], &var[k], &mu[t], &var[t]);
        }
    }
    b
}

pub fn recall_ndcg(ranks: &[usize], n: usize) -> (f64, f64) {
    let mut hits = 0.0;
    let mut dcg = 0.0;
    for &r in ranks {
        if r <= n {
            hits += 1.0;
            dcg += 1.0 / ((r + 1) as f64).log2();
        }
    }
    (hits / ranks.len() as f64, dcg / ranks.len() as f64)
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(i, v)| (v - mean) / (var + 1e-8).sqrt() * gain[i] + bias[i])
                .collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Reads parameters of a [`Model`] by name.
struct Params<'a>(&'a Model);

impl Params<'_> {
    fn t(&self, name: &str) -> &Tensor {
        let id = self.0.params().id(name).unwrap_or_else(|| panic!("no {name}"));
        &self.0.params().get(id).value
    }
    fn m(&self, name: &str) -> Mat {
        mat(self.t(name))
    }
    fn v(&self, name: &str) -> Vec<f64> {
        vec_of(self.t(name))
    }
}

fn ffn(p: &Params, x: &Mat, pre: &str) -> Mat {
    let w1 = p.m(&format!("{pre}.ffn.W1"));
    let b1 = p.v(&format!("{pre}.ffn.b1"));
    let w2 = p.m(&format!("{pre}.ffn.W2"));
    let b2 = p.v(&format!("{pre}.ffn.b2"));
    let h: Mat = matmul(x, &w1)
        .iter()
        .map(|r| r.iter().zip(&b1).map(|(v, b)| (v + b).max(0.0)).collect())
        .collect();
    let f: Mat = matmul(&h, &w2)
        .iter()
        .map(|r| r.iter().zip(&b2).map(|(v, b)| v + b).collect())
        .collect();
    layer_norm(
        &add(x, &f),
        &p.v(&format!("{pre}.ffn_norm.gain")),
        &p.v(&format!("{pre}.ffn_norm.bias")),
    )
}

/// Allowed pairs for one left-padded sequence.
pub fn allowed(seq: &[usize]) -> Vec<Vec<bool>> {
    let n = seq.len();
    (0..n)
        .map(|k| (0..n).map(|t| t <= k && seq[k] != 0 && seq[t] != 0).collect())
        .collect()
}

/// Weights of one head: masked softmax of `a`, padded query rows zero.
pub fn attention_weights(a: &Mat, seq: &[usize]) -> Mat {
    let ok = allowed(seq);
    (0..a.len())
        .map(|k| {
            if seq[k] == 0 {
                vec![0.0; a.len()]
            } else {
                softmax(&a[k], &ok[k])
            }
        })
        .collect()
}

/// Unrefined encoder forward for one padded sequence, written directly
/// from the attention definitions. Returns `(mean or state, raw cov)`.
pub fn encode_unrefined(model: &Model, seq: &[usize]) -> (Mat, Option<Mat>) {
    let p = Params(model);
    let c = model.config();
    let embed = |table: &str, pos: &str| -> Mat {
        let t = p.m(table);
        let ps = p.m(pos);
        seq.iter()
            .enumerate()
            .map(|(i, &id)| t[id].iter().zip(&ps[i]).map(|(a, b)| a + b).collect())
            .collect()
    };
    match c.backbone {
        Backbone::DotProduct => {
            let mut h = embed("item_emb", "pos_emb");
            for l in 0..c.layers {
                let mut out: Mat = vec![Vec::new(); seq.len()];
                for hd in 0..c.heads {
                    let w = |m: &str| p.m(&format!("layer{l}.head{hd}.{m}"));
                    let a = dot_scores(&h, &w("WQ"), &w("WK"));
                    let wts = attention_weights(&a, seq);
                    let v = matmul(&h, &w("WV"));
                    for (k, row) in matmul(&wts, &v).into_iter().enumerate() {
                        out[k].extend(row);
                    }
                }
                let x = layer_norm(
                    &add(&h, &out),
                    &p.v(&format!("layer{l}.attn_norm.gain")),
                    &p.v(&format!("layer{l}.attn_norm.bias")),
                );
                h = ffn(&p, &x, &format!("layer{l}"));
            }
            (h, None)
        }
        Backbone::Stochastic => {
            let mut m = embed("item_mean", "pos_mean");
            let mut cv = embed("item_cov", "pos_cov");
            for l in 0..c.layers {
                let mut om: Mat = vec![Vec::new(); seq.len()];
                let mut oc: Mat = vec![Vec::new(); seq.len()];
                for hd in 0..c.heads {
                    let w = |s: &str| p.m(&format!("layer{l}.head{hd}.{s}"));
                    let a = stochastic_scores(&m, &cv, &w("WQ_mean"), &w("WQ_cov"), &w("WK_mean"), &w("WK_cov"));
                    let wts = attention_weights(&a, seq);
                    let vm = matmul(&m, &w("WV_mean"));
                    let vc: Mat = matmul(&cv, &w("WV_cov"))
                        .iter()
                        .map(|r| r.iter().map(|&x| elu1(x)).collect())
                        .collect();
                    for (k, row) in matmul(&wts, &vm).into_iter().enumerate() {
                        om[k].extend(row);
                    }
                    for (k, row) in matmul(&wts, &vc).into_iter().enumerate() {
                        oc[k].extend(row);
                    }
                }
                let mut next = Vec::new();
                for (stream, x, o) in [("mean", &m, &om), ("cov", &cv, &oc)] {
                    let pre = format!("layer{l}.{stream}");
                    let y = layer_norm(
                        &add(x, o),
                        &p.v(&format!("{pre}.attn_norm.gain")),
                        &p.v(&format!("{pre}.attn_norm.bias")),
                    );
                    next.push(ffn(&p, &y, &pre));
                }
                cv = next.pop().unwrap();
                m = next.pop().unwrap();
            }
            (m, Some(cv))
        }
    }
}
