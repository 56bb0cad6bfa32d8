//! First-order optimisers over an ordered list of parameter tensors.

use crate::diffcore::Tensor;
use crate::error::{dim_err, Result};

pub trait Optimizer {
    fn lr(&self) -> f64;
    /// Applies one update; `grads[i]` belongs to `params[i]`.
    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()>;
}

fn check_shapes(params: &[&mut Tensor], grads: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() {
        return Err(dim_err!("optimizer: {} params, {} grads", params.len(), grads.len()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(dim_err!(
                "optimizer: param {i} has shape {:?}, grad {:?}",
                p.shape(),
                g.shape()
            ));
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
}

impl Optimizer for Sgd {
    fn lr(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        for (p, g) in params.iter_mut().zip(grads) {
            p.axpy(-self.lr, g);
        }
        Ok(())
    }
}

/// AdamW with decoupled weight decay; defaults follow `torch.optim.AdamW`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }
}

impl Optimizer for AdamW {
    fn lr(&self) -> f64 {
        self.lr
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        check_shapes(params, grads)?;
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != grads.len() || self.m.iter().zip(grads).any(|(m, g)| m.len() != g.numel()) {
            return Err(dim_err!("optimizer: parameter layout changed between steps"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w -= self.lr * self.weight_decay * *w;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let g = Tensor::new(vec![2], vec![0.5, -1.0]).unwrap();
        Sgd { lr: 0.1 }.step(&mut [&mut p], &[g]).unwrap();
        assert_eq!(p.data(), &[0.95, 2.1]);
    }

    #[test]
    fn adamw_first_step_has_magnitude_lr() {
        let mut opt = AdamW::new(0.01);
        opt.weight_decay = 0.0;
        let mut p = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![3.0, -0.2]).unwrap();
        opt.step(&mut [&mut p], &[g]).unwrap();
        assert!((p.data()[0] - 0.99).abs() < 1e-8);
        assert!((p.data()[1] + 0.99).abs() < 1e-8);
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut opt = AdamW::new(0.05);
        let mut p = Tensor::new(vec![3], vec![2.0, -3.0, 0.5]).unwrap();
        for _ in 0..2000 {
            let g = p.clone();
            opt.step(&mut [&mut p], &[g]).unwrap();
        }
        assert!(p.l2_norm() < 1e-2);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = Tensor::zeros(&[2]);
        assert!(Sgd { lr: 1.0 }.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
    }
}
