//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-3,
            eps: 1e-8,
        }
    }
}

/// Optimizer state: step count and per-parameter moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T: Scalar = f32> {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamW<T> {
    /// Fresh state with zeroed moments shaped like `params`.
    pub fn new<'a>(config: AdamWConfig, params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let (m, v) = params
            .into_iter()
            .map(|p| (Tensor::zeros(p.shape().to_vec()), Tensor::zeros(p.shape().to_vec())))
            .unzip();
        Self { config, step: 0, m, v }
    }

    /// Restores state saved by [`AdamW::moments`].
    pub fn from_parts(config: AdamWConfig, step: u64, m: Vec<Tensor<T>>, v: Vec<Tensor<T>>) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::Config("AdamW moment buffers are inconsistent".into()));
        }
        Ok(Self { config, step, m, v })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor<T>], &[Tensor<T>]) {
        (&self.m, &self.v)
    }

    /// One update. `names` label parameters in diagnostics.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>], names: &[String]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Config(format!(
                "AdamW tracks {} parameters, got {} params and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).map(String::as_str).unwrap_or("?");
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::dim(
                    "adamw",
                    format!("parameter {name}: shape {:?}, gradient {:?}", p.shape(), g.shape()),
                ));
            }
            if let Some(pos) = g.data().iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter {name} at entry {pos}")));
            }
        }

        self.step += 1;
        let c = &self.config;
        let t = self.step as i32;
        let lr = T::lit(c.lr);
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let eps = T::lit(c.eps);
        let decay = T::one() - lr * T::lit(c.weight_decay);
        let bc1 = T::one() - b1.powi(t);
        let bc2 = T::one() - b2.powi(t);

        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
