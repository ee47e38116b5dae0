//! Finite-difference gradient checks over every differentiable building
//! block of the network, run in 64-bit on inputs kept away from kinks.

use rand::Rng;
use serde::Serialize;

use crate::activations::{
    arelu, elu, leaky_relu, prelu, relu, rrelu, ActivationKind, ActivationSpec, Mode, ARELU_ALPHA, ARELU_BETA,
    ELU_R, LEAKY_RELU_GAMMA, PRELU_XI, RRELU_LOWER, RRELU_UPPER,
};
use crate::error::Result;
use crate::model::{attentive_stats_pool, se_gate, POOL_VAR_FLOOR};
use crate::numerics::{grad_check_many, Conv2dParams, Graph, Tensor, Var};
use crate::training::{ocs_loss, OcsParams};
use crate::{seed_rng, SeedRng};

pub const GRAD_STEP: f64 = 1e-6;
pub const GRAD_TOL: f64 = 1e-5;

/// A probe point is redrawn when some nonzero gradient coordinate is smaller
/// than this fraction of the largest one of the same input. Central differences of an `O(10)`
/// scalar carry about `1e-8` of roundoff, which swamps the relative error of
/// a near-zero coordinate just as a kink would.
pub const CONDITIONING: f64 = 1e-2;
const MAX_REDRAWS: usize = 1000;

/// Worst result of one building block over all its trials.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub trials: usize,
    pub checked: usize,
    pub skipped: usize,
    /// Probe points rejected as ill-conditioned before a trial was run.
    pub redrawn: usize,
    pub max_rel_err: f64,
    pub pass: bool,
}

fn uniform(rng: &mut SeedRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape, &v).expect("shape matches data")
}

/// Either sign, magnitude in `[0.1, 2)`.
fn off_zero(rng: &mut SeedRng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

const OCS_LABELS: [usize; 6] = [0, 1, 0, 1, 1, 0];

/// Embeddings whose cosine to `w0` lies within 0.1 of their class margin.
/// With `k = 20` the loss saturates further out and its true gradient drops
/// below what a central difference can resolve.
fn near_margin(rng: &mut SeedRng, w0: &[f64], labels: &[usize], p: &OcsParams) -> Tensor<f64> {
    let d = w0.len();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let u: Vec<f64> = w0.iter().map(|x| x / norm(w0)).collect();
    let mut out = Vec::with_capacity(labels.len() * d);
    for &y in labels {
        let margin = if y == 0 { p.m0 } else { p.m1 };
        let cos: f64 = margin + rng.random_range(-0.1..0.1);
        // Random direction orthogonal to u.
        let mut o: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot: f64 = o.iter().zip(&u).map(|(a, b)| a * b).sum();
        o.iter_mut().zip(&u).for_each(|(a, b)| *a -= dot * b);
        let on = norm(&o);
        let scale = rng.random_range(0.5..2.0);
        let sin = (1.0 - cos * cos).sqrt();
        out.extend((0..d).map(|i| scale * (cos * u[i] + sin * o[i] / on)));
    }
    Tensor::from_f64([labels.len(), d], &out).expect("shape matches data")
}

fn param(v: f64) -> Tensor<f64> {
    Tensor::from_f64([1], &[v]).expect("one element")
}

/// How a block's output is reduced to the scalar being differentiated.
#[derive(Clone, Copy)]
enum Reduce {
    /// The block already returns a scalar loss.
    Scalar,
    /// Weighted sum with weights in `[0.5, 1.5)`.
    Positive,
    /// Weighted sum with weights of either sign. Batch normalization
    /// subtracts the weight mean from every input gradient, so same-sign
    /// weights would leave those gradients close to zero.
    Signed,
}

/// Reduces `y` to a scalar with fixed random weights so no coordinate's
/// gradient cancels by symmetry.
fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64, signed: bool) -> Result<Var> {
    let mut rng = seed_rng(seed);
    let w = if signed {
        off_zero(&mut rng, g.shape(y))
    } else {
        uniform(&mut rng, g.shape(y), 0.5, 1.5)
    };
    let w = g.constant(w);
    let p = g.mul(y, w)?;
    g.sum_all(p)
}

type Inputs = Box<dyn Fn(&mut SeedRng) -> Vec<Tensor<f64>>>;
type Body = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Inputs,
    body: Body,
    reduce: Reduce,
}

fn case(
    name: &'static str,
    inputs: impl Fn(&mut SeedRng) -> Vec<Tensor<f64>> + 'static,
    body: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs: Box::new(inputs),
        body: Box::new(body),
        reduce: Reduce::Positive,
    }
}

fn cases() -> Vec<Case> {
    let act = [3, 4, 5];
    let mut out = vec![
        case("relu", move |r| vec![off_zero(r, &act)], |g, v| relu(g, v[0])),
        case(
            "leaky_relu",
            move |r| vec![off_zero(r, &act)],
            |g, v| leaky_relu(g, v[0], LEAKY_RELU_GAMMA),
        ),
        case(
            "rrelu_eval",
            move |r| vec![off_zero(r, &act)],
            |g, v| rrelu(g, v[0], RRELU_LOWER, RRELU_UPPER, Mode::Eval, None),
        ),
        // Every evaluation redraws the same slopes from a fresh generator.
        case(
            "rrelu_train",
            move |r| vec![off_zero(r, &act)],
            |g, v| rrelu(g, v[0], RRELU_LOWER, RRELU_UPPER, Mode::Train, Some(&mut seed_rng(11))),
        ),
        case("elu", move |r| vec![off_zero(r, &act)], |g, v| elu(g, v[0], ELU_R)),
        case(
            "prelu",
            move |r| vec![off_zero(r, &act), param(PRELU_XI)],
            |g, v| prelu(g, v[0], v[1]),
        ),
        case(
            "prelu_per_channel",
            move |r| vec![off_zero(r, &act), Tensor::from_f64([4], &[PRELU_XI; 4]).expect("four")],
            |g, v| prelu(g, v[0], v[1]),
        ),
        case(
            "arelu",
            move |r| vec![off_zero(r, &act), param(ARELU_ALPHA), param(ARELU_BETA)],
            |g, v| arelu(g, v[0], v[1], v[2]),
        ),
        case(
            "ensemble",
            move |r| vec![off_zero(r, &act)],
            |g, v| {
                let kinds = [
                    ActivationKind::Relu,
                    ActivationKind::LeakyRelu,
                    ActivationKind::Elu,
                    ActivationKind::Prelu,
                    ActivationKind::Arelu,
                ];
                ActivationSpec::ensemble_of(&kinds)?.apply(g, v[0], Mode::Eval, None)
            },
        ),
        // Same-sign operands keep every gradient coordinate well away from
        // zero, where roundoff at h = 1e-6 dominates the relative error.
        case(
            "conv2d",
            |r| {
                vec![
                    uniform(r, &[2, 2, 7, 5], 0.1, 2.0),
                    uniform(r, &[3, 2, 3, 3], 0.1, 2.0),
                    off_zero(r, &[3]),
                ]
            },
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new((2, 1), (1, 1))),
        ),
        Case {
            reduce: Reduce::Signed,
            ..case(
                "batch_norm",
                |r| vec![off_zero(r, &[4, 3, 2, 2]), uniform(r, &[3], 0.5, 1.5), off_zero(r, &[3])],
                |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
            )
        },
        case(
            "se_block",
            |r| {
                // Positive squeeze inputs and weights keep the hidden ReLU
                // away from its kink; small excitation weights keep the
                // sigmoid gate out of saturation.
                let mut w2 = off_zero(r, &[2, 4]);
                let mut b2 = off_zero(r, &[4]);
                w2.data_mut().iter_mut().chain(b2.data_mut()).for_each(|v| *v *= 0.25);
                vec![
                    uniform(r, &[2, 4, 3, 2], 0.1, 2.0),
                    uniform(r, &[4, 2], 0.1, 1.0),
                    uniform(r, &[2], 0.1, 0.5),
                    w2,
                    b2,
                ]
            },
            |g, v| se_gate(g, v[0], v[1], v[2], v[3], v[4]),
        ),
        case(
            "attentive_pooling",
            |r| {
                vec![
                    off_zero(r, &[2, 3, 5]),
                    uniform(r, &[3, 4], -1.0, 1.0),
                    uniform(r, &[4], -0.5, 0.5),
                    uniform(r, &[4, 1], -1.0, 1.0),
                ]
            },
            |g, v| attentive_stats_pool(g, v[0], v[1], v[2], v[3], POOL_VAR_FLOOR),
        ),
    ];
    out.push(Case {
        name: "ocs_loss",
        inputs: Box::new(|r| {
            let w0 = off_zero(r, &[5]);
            let e = near_margin(r, w0.data(), &OCS_LABELS, &OcsParams::default());
            vec![e, w0]
        }),
        body: Box::new(|g, v| ocs_loss(g, v[0], &OCS_LABELS, v[1], &OcsParams::default())),
        reduce: Reduce::Scalar,
    });
    out
}

fn scalarize(c: &Case, g: &mut Graph<f64>, v: &[Var], weights: u64) -> Result<Var> {
    let y = (c.body)(g, v)?;
    match c.reduce {
        Reduce::Scalar => Ok(y),
        Reduce::Positive => weighted_sum(g, y, weights, false),
        Reduce::Signed => weighted_sum(g, y, weights, true),
    }
}

fn well_conditioned(c: &Case, inputs: &[Tensor<f64>], weights: u64) -> Result<bool> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = scalarize(c, &mut g, &vars, weights)?;
    let grads = g.backward(out)?;
    Ok(vars.iter().all(|v| {
        let grad = grads.get(*v).unwrap_or(&[]);
        let max = grad.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        grad.iter().all(|&a| a == 0.0 || a.abs() >= CONDITIONING * max)
    }))
}

/// Runs every check `trials` times on fresh random inputs.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = seed_rng(seed);
    let mut results = Vec::new();
    for c in cases() {
        let mut outcome = CheckOutcome {
            name: c.name.to_string(),
            trials,
            checked: 0,
            skipped: 0,
            redrawn: 0,
            max_rel_err: 0.0,
            pass: true,
        };
        for trial in 0..trials {
            let mut draws = 0;
            let (inputs, weights) = loop {
                let inputs = (c.inputs)(&mut rng);
                let weights = rng.random::<u64>();
                draws += 1;
                if draws > MAX_REDRAWS || well_conditioned(&c, &inputs, weights)? {
                    break (inputs, weights);
                }
                outcome.redrawn += 1;
            };
            let report = grad_check_many(|g, v| scalarize(&c, g, v, weights), &inputs, GRAD_STEP, GRAD_TOL)?;
            log::debug!("{} trial {trial}: {report:?}", c.name);
            outcome.checked += report.checked;
            outcome.skipped += report.skipped.len();
            outcome.max_rel_err = outcome.max_rel_err.max(report.max_rel_err);
            outcome.pass &= report.pass && report.checked > 0;
        }
        results.push(outcome);
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes() {
        for o in gradient_suite(3, 1).unwrap() {
            assert!(o.pass && o.skipped == 0, "{o:?}");
        }
    }
}
