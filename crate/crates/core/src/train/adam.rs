use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam moments for a list of parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &[Tensor<T>]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }

    /// One bias-corrected Adam step. Fails without touching anything if a
    /// gradient is non-finite or shapes disagree.
    pub fn update(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Structural(format!(
                "adam state for {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::Shape(format!(
                    "parameter {i}: value {}, gradient {}",
                    p.shape(),
                    g.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}; step rejected")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (ob1, ob2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step = T::lit(lr / c1);
        let rc2 = T::lit(1.0 / c2.sqrt());
        let eps = T::lit(self.eps);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + ob1 * gv;
                *vv = b2 * *vv + ob2 * gv * gv;
                *pv -= step * *mv / ((*vv).sqrt() * rc2 + eps);
            }
        }
        Ok(())
    }
}
