//! AMSGrad optimizer.

use super::Tensor;
use crate::error::{Error, Result};

/// AMSGrad: Adam with a monotone second-moment maximum, bias-corrected
/// moments. State is lazily allocated on the first step and keyed by
/// parameter order, which must stay stable across steps.
pub struct Amsgrad {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    t: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    vhat: Vec<Vec<f32>>,
}

impl Amsgrad {
    pub fn new(lr: f32) -> Self {
        Self::with_hyper(lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(lr: f32, beta1: f32, beta2: f32, eps: f32) -> Self {
        Amsgrad {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
            vhat: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Monotone second-moment maxima, one slice per parameter.
    pub fn vhat(&self) -> &[Vec<f32>] {
        &self.vhat
    }

    pub fn step(&mut self, params: &mut [Tensor<f32>], grads: &[Tensor<f32>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::train(format!(
                "optimizer got {} params but {} grads",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            for p in params.iter() {
                self.m.push(vec![0.0; p.numel()]);
                self.v.push(vec![0.0; p.numel()]);
                self.vhat.push(vec![0.0; p.numel()]);
            }
        }
        if self.m.len() != params.len() {
            return Err(Error::train(
                "parameter count changed between optimizer steps",
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "param {} shape {:?} vs grad shape {:?}",
                    i,
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::non_finite(format!("gradient of param {}", i)));
            }
            let (m, v, vh) = (&mut self.m[i], &mut self.v[i], &mut self.vhat[i]);
            for (j, (pv, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gv;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gv * gv;
                vh[j] = vh[j].max(v[j]);
                let mhat = m[j] / bc1;
                let denom = (vh[j] / bc2).sqrt() + self.eps;
                *pv -= self.lr * mhat / denom;
            }
            if !p.all_finite() {
                return Err(Error::non_finite(format!("param {} after update", i)));
            }
        }
        Ok(())
    }
}
