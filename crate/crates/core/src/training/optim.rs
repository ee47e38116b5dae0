use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update of `param` at step `t >= 1`.
pub fn adam_step<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    state: &mut AdamMoments,
    hyper: &AdamHyper,
    lr: f64,
    t: u64,
) -> Result<()> {
    if param.len() != grad.len() || state.m.len() != param.len() || state.v.len() != param.len() {
        return Err(Error::Shape("Adam parameter, gradient and state lengths differ".into()));
    }
    if t == 0 {
        return Err(Error::Contract("Adam steps are counted from 1".into()));
    }
    if let Some(i) = grad.iter().position(|g| !g.as_f64().is_finite()) {
        return Err(Error::NonFiniteGradient(format!("element {i}")));
    }
    let (b1, b2) = (hyper.beta1, hyper.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..param.len() {
        let g = grad[i].as_f64();
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g;
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        let p = param[i].as_f64() - lr * m_hat / (v_hat.sqrt() + hyper.eps);
        param[i] = T::cast(p);
    }
    Ok(())
}

/// Adam over every trainable entry of a [`ParamStore`], reading the
/// gradients accumulated in the store.
#[derive(Clone, Debug)]
pub struct Adam {
    hyper: AdamHyper,
    t: u64,
    state: Vec<AdamMoments>,
}

impl Adam {
    pub fn new<T: Scalar>(store: &ParamStore<T>, hyper: AdamHyper) -> Self {
        Self {
            hyper,
            t: 0,
            state: store.iter().map(|(_, e)| AdamMoments::zeros(e.tensor().numel())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update. Every gradient is checked before any parameter
    /// changes, so a non-finite gradient leaves the store untouched.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        for (_, e) in store.iter().filter(|(_, e)| e.trainable()) {
            if let Some(g) = e.tensor().grad() {
                if g.iter().any(|v| !v.as_f64().is_finite()) {
                    return Err(Error::NonFiniteGradient(e.name().to_string()));
                }
            }
        }
        self.t += 1;
        for (id, e) in store.iter_mut() {
            if !e.trainable() {
                continue;
            }
            let grad = match e.tensor().grad() {
                Some(g) => g.to_vec(),
                None => continue,
            };
            adam_step(e.tensor_mut().data_mut(), &grad, &mut self.state[id.index()], &self.hyper, lr, self.t)?;
        }
        Ok(())
    }
}
