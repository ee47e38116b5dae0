use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine_to;
use crate::numerics::{Graph, Scalar, Tensor, Var};

/// One-class softmax scale and margins. The target direction `w0` is a
/// model parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OcsParams {
    pub k: f64,
    /// Margin for bona fide (target) embeddings.
    pub m0: f64,
    /// Margin for spoof embeddings.
    pub m1: f64,
}

impl Default for OcsParams {
    fn default() -> Self {
        Self {
            k: 20.0,
            m0: 0.9,
            m1: 0.2,
        }
    }
}

impl OcsParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k > 0.0 && self.k.is_finite()) {
            return Err(Error::config("train.ocs.k", "must be positive"));
        }
        if !(self.m0 > self.m1) {
            return Err(Error::config("train.ocs.m0", "must exceed m1"));
        }
        Ok(())
    }

    /// Per-sample loss `softplus(k (m_y - cos) (-1)^y)` from a cosine.
    pub fn sample_loss(&self, cos: f64, label: usize) -> f64 {
        let z = match label {
            0 => self.k * (self.m0 - cos),
            _ => self.k * (cos - self.m1),
        };
        softplus(z)
    }
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Mean one-class softmax loss over a batch of embeddings `[N, D]` with
/// labels 0 (bona fide) and 1 (spoof), scored against direction `w0: [D]`.
pub fn ocs_loss<T: Scalar>(
    g: &mut Graph<T>,
    embeddings: Var,
    labels: &[usize],
    w0: Var,
    p: &OcsParams,
) -> Result<Var> {
    p.validate()?;
    let n = g.shape(embeddings)[0];
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} embeddings", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y > 1) {
        return Err(Error::Contract(format!("label {bad} is not 0 or 1")));
    }
    let cos = cosine_to(g, embeddings, w0)?;
    // z = k * sign * (margin - cos) with sign = +1 for bona fide, -1 for spoof.
    let margin: Vec<f64> = labels.iter().map(|&y| if y == 0 { p.m0 } else { p.m1 }).collect();
    let sign: Vec<f64> = labels.iter().map(|&y| if y == 0 { p.k } else { -p.k }).collect();
    let margin = g.constant(Tensor::from_f64([n], &margin)?);
    let sign = g.constant(Tensor::from_f64([n], &sign)?);
    let diff = g.sub(margin, cos)?;
    let z = g.mul(diff, sign)?;
    let l = g.softplus(z)?;
    g.mean_all(l)
}
