//! Central finite-difference gradient checking.
//!
//! The checker only evaluates forward passes, so it is independent of the
//! backward rules it verifies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradReport {
    /// `max |analytic - numeric| / max(max |numeric|, 1e-8)` over all parameters.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

pub fn random_tensor<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("valid shape")
}

/// Compares backward-pass gradients of `f` against central differences.
pub fn check_gradients<F>(params: &[Tensor], step: f64, f: F) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let grads = g.backward(loss)?;

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };

    let mut max_abs_err: f64 = 0.0;
    let mut max_rel_err: f64 = 0.0;
    let mut work = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[pi], p);
        let mut numeric = vec![0.0; p.numel()];
        for k in 0..p.numel() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[k] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            numeric[k] = (plus - minus) / (2.0 * step);
        }
        let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
        let abs = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        max_abs_err = max_abs_err.max(abs);
        max_rel_err = max_rel_err.max(abs / scale);
    }
    Ok(GradReport {
        max_rel_err,
        max_abs_err,
    })
}

/// Names of the operations exercised by [`check_op`].
pub const DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "batch_matmul",
    "transpose",
    "transpose_last",
    "add",
    "add_bias",
    "mul",
    "scale",
    "relu",
    "layer_norm",
    "softmax",
    "embedding",
    "concat",
    "slice_rows",
    "select_rows",
    "split_merge_heads",
    "mean",
    "cross_entropy",
    "kl_divergence",
];

/// Runs a finite-difference check of one named op on random shapes drawn from `rng`.
///
/// Every op output is reduced to a scalar through a fixed random projection so
/// that all output entries contribute distinct weights.
pub fn check_op<R: Rng + ?Sized>(op: &str, rng: &mut R) -> Result<GradReport> {
    let d = |rng: &mut R| rng.random_range(2..=5usize);
    let (m, k, n) = (d(rng), d(rng), d(rng));
    let project = |g: &mut Graph, y: Var, w: &Tensor| -> Result<Var> {
        let wv = g.constant(w.clone());
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    };
    match op {
        "matmul" => {
            let ps = vec![random_tensor(rng, &[m, k]), random_tensor(rng, &[k, n])];
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y, &w)
            })
        }
        "batch_matmul" => {
            let b = d(rng);
            let ps = vec![random_tensor(rng, &[b, m, k]), random_tensor(rng, &[b, k, n])];
            let w = random_tensor(rng, &[b, m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.batch_matmul(v[0], v[1])?;
                project(g, y, &w)
            })
        }
        "transpose" => {
            let ps = vec![random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[n, m]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.transpose(v[0])?;
                project(g, y, &w)
            })
        }
        "transpose_last" => {
            let ps = vec![random_tensor(rng, &[k, m, n])];
            let w = random_tensor(rng, &[k, n, m]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.transpose_last(v[0])?;
                project(g, y, &w)
            })
        }
        "add" | "mul" => {
            let ps = vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[m, n]);
            let is_add = op == "add";
            check_gradients(&ps, 1e-5, |g, v| {
                let y = if is_add { g.add(v[0], v[1])? } else { g.mul(v[0], v[1])? };
                project(g, y, &w)
            })
        }
        "add_bias" => {
            let ps = vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[n])];
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                project(g, y, &w)
            })
        }
        "scale" => {
            let c: f64 = rng.random_range(-3.0..3.0);
            let ps = vec![random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.scale(v[0], c);
                project(g, y, &w)
            })
        }
        "relu" => {
            // keep inputs away from the kink so central differences stay valid
            let mut x = random_tensor(rng, &[m, n]);
            for v in x.data_mut() {
                if v.abs() < 0.05 {
                    *v += 0.1_f64.copysign(*v);
                }
            }
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&[x], 1e-5, |g, v| {
                let y = g.relu(v[0]);
                project(g, y, &w)
            })
        }
        "layer_norm" => {
            let ps = vec![
                random_tensor(rng, &[m, n + 1]),
                random_tensor(rng, &[n + 1]),
                random_tensor(rng, &[n + 1]),
            ];
            let w = random_tensor(rng, &[m, n + 1]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
                project(g, y, &w)
            })
        }
        "softmax" => {
            let ps = vec![random_tensor(rng, &[m, k, n])];
            let axis = rng.random_range(0..3usize);
            let w = random_tensor(rng, &[m, k, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y, &w)
            })
        }
        "embedding" => {
            let ids: Vec<usize> = (0..k + 2).map(|_| rng.random_range(0..m)).collect();
            let ps = vec![random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[ids.len(), n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.embedding(v[0], &ids)?;
                project(g, y, &w)
            })
        }
        "concat" => {
            let axis = rng.random_range(0..2usize);
            let (s1, s2) = if axis == 0 { ([m, n], [k, n]) } else { ([m, n], [m, k]) };
            let ps = vec![random_tensor(rng, &s1), random_tensor(rng, &s2)];
            let out = if axis == 0 { [m + k, n] } else { [m, n + k] };
            let w = random_tensor(rng, &out);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.concat(&[v[0], v[1]], axis)?;
                project(g, y, &w)
            })
        }
        "slice_rows" => {
            let rows = m + k;
            let start = rng.random_range(0..k);
            let ps = vec![random_tensor(rng, &[rows, n])];
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.slice_rows(v[0], start, m)?;
                project(g, y, &w)
            })
        }
        "select_rows" => {
            let rows: Vec<usize> = (0..k).map(|_| rng.random_range(0..m)).collect();
            let ps = vec![random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[k, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let y = g.select_rows(v[0], &rows)?;
                project(g, y, &w)
            })
        }
        "split_merge_heads" => {
            let (batch, seq, heads, dh) = (m, k, 2, n);
            let ps = vec![random_tensor(rng, &[batch * seq, heads * dh])];
            let w = random_tensor(rng, &[batch * heads, seq, dh]);
            let w2 = random_tensor(rng, &[batch * seq, heads * dh]);
            check_gradients(&ps, 1e-5, |g, v| {
                let s = g.split_heads(v[0], batch, seq, heads)?;
                let a = project(g, s, &w)?;
                let sq = g.mul(s, s)?;
                let back = g.merge_heads(sq, batch, seq, heads)?;
                let b = project(g, back, &w2)?;
                g.add(a, b)
            })
        }
        "mean" => {
            let ps = vec![random_tensor(rng, &[m, n])];
            let w = random_tensor(rng, &[m, n]);
            check_gradients(&ps, 1e-5, |g, v| {
                let wv = g.constant(w.clone());
                let p = g.mul(v[0], wv)?;
                let mu = g.mean(p);
                g.mul(mu, mu)
            })
        }
        "cross_entropy" => {
            let target = super::softmax_rows(&random_tensor(rng, &[m, n]));
            let ps = vec![random_tensor(rng, &[m, n])];
            check_gradients(&ps, 1e-5, |g, v| {
                let t = g.constant(target.clone());
                g.cross_entropy(v[0], t)
            })
        }
        "kl_divergence" => {
            let ps = vec![random_tensor(rng, &[m, n]), random_tensor(rng, &[m, n])];
            check_gradients(&ps, 1e-5, |g, v| {
                let p = g.softmax_last(v[0]);
                let q = g.softmax_last(v[1]);
                g.kl_divergence(p, q)
            })
        }
        other => Err(crate::error::Error::Usage(format!("unknown op {other}"))),
    }
}
