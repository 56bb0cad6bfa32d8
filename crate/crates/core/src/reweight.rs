//! Meta re-weighting of soft pseudo-labels.
//!
//! Each pseudo-labeled example gets a perturbation weight `ε_i`. A virtual
//! SGD step `ψ(ε) = ψ - α ∇ψ (1/n) Σ ε_i CE_i` is scored on a labeled
//! mini-batch, and `u_i = -∂ L_val(ψ(ε)) / ∂ε_i` at `ε = 0`.
//!
//! Because `ψ(ε)` is affine in `ε` and `ψ(0) = ψ`, the derivative has the
//! closed form `u_i = (α / n) ⟨∇ψ L_val(ψ), ∇ψ CE_i(ψ)⟩`. It is exact, with no
//! truncated second-order term, so it needs only per-example gradients.

use serde::{Deserialize, Serialize};

use crate::adapter::{TunableParams, TunableVars};
use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{config_err, dim_err, input_err, Error, Result};
use crate::optim::Optimizer;
use crate::par;
use crate::prompting::{one_hot, ClozeInstance, Labeled, PromptModel};

/// Unlabeled instances with the teacher's label distributions.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBatch {
    pub instances: Vec<ClozeInstance>,
    /// `[n, n_labels]`, rows sum to 1.
    pub teacher_dists: Tensor,
}

impl PseudoBatch {
    pub fn new(instances: Vec<ClozeInstance>, teacher_dists: Tensor) -> Result<Self> {
        if teacher_dists.rank() != 2 || teacher_dists.shape()[0] != instances.len() {
            return Err(dim_err!(
                "pseudo batch: {} instances, dists {:?}",
                instances.len(),
                teacher_dists.shape()
            ));
        }
        for i in 0..instances.len() {
            let row = teacher_dists.row(i);
            let s: f64 = row.iter().sum();
            if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                return Err(input_err!("pseudo batch: row {i} is not a distribution"));
            }
        }
        Ok(Self {
            instances,
            teacher_dists,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    fn refs(&self) -> Vec<&ClozeInstance> {
        self.instances.iter().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReweightConfig {
    /// Step size `α` of the virtual update; defaults to the self-training lr.
    pub virtual_step: f64,
    pub val_batch_size: usize,
    pub normalize: bool,
}

impl Default for ReweightConfig {
    fn default() -> Self {
        Self {
            virtual_step: 3e-3,
            val_batch_size: 4,
            normalize: true,
        }
    }
}

impl ReweightConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.virtual_step > 0.0 && self.virtual_step.is_finite()) {
            return Err(config_err!("reweight.virtual_step must be positive"));
        }
        if self.val_batch_size == 0 {
            return Err(config_err!("reweight.val_batch_size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGradient {
    pub u: Tensor,
}

/// A pseudo batch with non-negative per-example weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ReweightedBatch {
    pub batch: PseudoBatch,
    pub weights: Tensor,
}

impl ReweightedBatch {
    pub fn new(batch: PseudoBatch, weights: Tensor) -> Result<Self> {
        if weights.shape() != [batch.len()] {
            return Err(dim_err!("{} weights for {} examples", weights.numel(), batch.len()));
        }
        if weights.data().iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
            return Err(input_err!("weights must be finite and non-negative"));
        }
        Ok(Self { batch, weights })
    }

    pub fn is_all_zero(&self) -> bool {
        self.weights.data().iter().all(|&w| w == 0.0)
    }
}

/// `(1/n) Σ ε_i CE(teacher_i, student_i)` on the tape.
pub fn weighted_loss<'g>(
    g: &mut Graph<'g>,
    model: &'g PromptModel<'_>,
    tv: &TunableVars,
    batch: &PseudoBatch,
    eps: &Tensor,
) -> Result<Var> {
    let n = batch.len();
    if eps.shape() != [n] {
        return Err(input_err!("weighted_loss: {} perturbations for {n} examples", eps.numel()));
    }
    let rows = model.loss_rows(g, tv, &batch.refs(), &batch.teacher_dists)?;
    let e = g.constant(eps.clone());
    let weighted = g.mul(rows, e)?;
    let total = g.sum(weighted);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Gradient of one example's cross-entropy, in [`TunableParams::tensors`] order.
fn example_grad(
    model: &PromptModel<'_>,
    tunable: &TunableParams,
    inst: &ClozeInstance,
    target: &Tensor,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let tv = tunable.register(&mut g, true);
    let rows = model.loss_rows(&mut g, &tv, &[inst], target)?;
    let loss = g.sum(rows);
    let grads = g.backward(loss)?;
    Ok(tunable.collect_grads(&tv, &grads))
}

/// Per-example cross-entropy gradients of a pseudo batch.
pub fn per_example_grads(
    model: &PromptModel<'_>,
    tunable: &TunableParams,
    batch: &PseudoBatch,
) -> Result<Vec<Vec<Tensor>>> {
    let l = batch.teacher_dists.shape()[1];
    let items: Vec<(usize, &ClozeInstance)> = batch.instances.iter().enumerate().collect();
    par::try_map(&items, |&(i, inst)| {
        let target = Tensor::new(vec![1, l], batch.teacher_dists.row(i).to_vec())?;
        example_grad(model, tunable, inst, &target)
    })
}

/// Mean cross-entropy of the labeled mini-batch and its gradient.
pub fn val_loss_and_grad(
    model: &PromptModel<'_>,
    tunable: &TunableParams,
    val: &[&Labeled],
) -> Result<(f64, Vec<Tensor>)> {
    if val.is_empty() {
        return Err(Error::Usage("meta_weights: empty validation batch".into()));
    }
    let inst: Vec<&ClozeInstance> = val.iter().map(|v| &v.instance).collect();
    let labels: Vec<usize> = val.iter().map(|v| v.label).collect();
    let target = one_hot(&labels, model.n_labels())?;
    let mut g = Graph::new();
    let tv = tunable.register(&mut g, true);
    let rows = model.loss_rows(&mut g, &tv, &inst, &target)?;
    let loss = g.mean(rows);
    let grads = g.backward(loss)?;
    Ok((g.value(loss).item(), tunable.collect_grads(&tv, &grads)))
}

fn dot_all(a: &[Tensor], b: &[Tensor]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

/// Meta-gradient and the per-example gradients it was built from.
pub fn meta_weights_with_grads(
    batch: &PseudoBatch,
    val: &[&Labeled],
    model: &PromptModel<'_>,
    tunable: &TunableParams,
    cfg: &ReweightConfig,
) -> Result<(MetaGradient, Vec<Vec<Tensor>>)> {
    cfg.validate()?;
    if batch.is_empty() {
        return Err(input_err!("meta_weights: empty pseudo batch"));
    }
    let (_, gval) = val_loss_and_grad(model, tunable, val)?;
    let grads = per_example_grads(model, tunable, batch)?;
    let c = cfg.virtual_step / batch.len() as f64;
    let u = grads.iter().map(|gi| c * dot_all(&gval, gi)).collect();
    Ok((
        MetaGradient {
            u: Tensor::new(vec![batch.len()], u)?,
        },
        grads,
    ))
}

/// `u_i = -∂ L_val(ψ(ε)) / ∂ε_i` at `ε = 0`. Reads `tunable` only.
pub fn meta_weights(
    batch: &PseudoBatch,
    val: &[&Labeled],
    model: &PromptModel<'_>,
    tunable: &TunableParams,
    cfg: &ReweightConfig,
) -> Result<MetaGradient> {
    Ok(meta_weights_with_grads(batch, val, model, tunable, cfg)?.0)
}

/// Clamps at zero and optionally normalises to unit sum.
pub fn to_weights(u: &MetaGradient, cfg: &ReweightConfig) -> Tensor {
    let raw: Vec<f64> = u.u.data().iter().map(|&x| x.max(0.0)).collect();
    let w = if cfg.normalize {
        let s: f64 = raw.iter().sum::<f64>() + 1e-12;
        raw.iter().map(|r| r / s).collect()
    } else {
        raw
    };
    Tensor::from_parts(vec![w.len()], w)
}

/// One optimiser step on `(1/n) Σ w_i CE_i`. Returns `false` and leaves
/// everything untouched when all weights are zero.
pub fn reweighted_step(
    rb: &ReweightedBatch,
    model: &PromptModel<'_>,
    tunable: &mut TunableParams,
    opt: &mut dyn Optimizer,
) -> Result<bool> {
    if rb.is_all_zero() {
        return Ok(false);
    }
    let grads = {
        let mut g = Graph::new();
        let tv = tunable.register(&mut g, true);
        let loss = weighted_loss(&mut g, model, &tv, &rb.batch, &rb.weights)?;
        let grads = g.backward(loss)?;
        tunable.collect_grads(&tv, &grads)
    };
    opt.step(&mut tunable.tensors_mut(), &grads)?;
    Ok(true)
}

/// Same update as [`reweighted_step`], assembled from precomputed
/// per-example gradients.
pub fn reweighted_step_from_grads(
    weights: &Tensor,
    example_grads: &[Vec<Tensor>],
    tunable: &mut TunableParams,
    opt: &mut dyn Optimizer,
) -> Result<bool> {
    if weights.numel() != example_grads.len() {
        return Err(dim_err!("{} weights for {} gradients", weights.numel(), example_grads.len()));
    }
    if weights.data().iter().all(|&w| w == 0.0) {
        return Ok(false);
    }
    let n = example_grads.len() as f64;
    let mut total: Vec<Tensor> = tunable.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
    for (w, gi) in weights.data().iter().zip(example_grads) {
        if *w != 0.0 {
            for (acc, g) in total.iter_mut().zip(gi) {
                acc.axpy(w / n, g);
            }
        }
    }
    opt.step(&mut tunable.tensors_mut(), &total)?;
    Ok(true)
}
