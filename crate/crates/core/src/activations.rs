//! ReLU-family activations, the attention rectified linear unit (AReLU) and
//! summation ensembles of them.
//!
//! | kind        | x > 0          | x ≤ 0 (x < 0 for AReLU)  | learnable |
//! |-------------|----------------|--------------------------|-----------|
//! | ReLU        | x              | 0                        | -         |
//! | LeakyReLU   | x              | γ·x                      | -         |
//! | RReLU       | x              | a·x, a ~ U(l, u) / (l+u)/2 | -       |
//! | ELU         | x              | r·(eˣ − 1)               | -         |
//! | PReLU       | x              | ξ·x                      | ξ         |
//! | AReLU       | (1 + σ(β))·x   | C(α)·x, C = clamp to [0.01, 0.99] | α, β |
//!
//! AReLU is ReLU plus an element-wise sign-based attention residue (ELSA):
//! `C(α)·x` on the negative side and `σ(β)·x` on the positive side. An
//! ensemble sums its members' outputs on the same input.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, CustomOp, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::SeedRng;

pub const LEAKY_RELU_GAMMA: f64 = 0.2;
pub const ELU_R: f64 = 1.0;
pub const PRELU_XI: f64 = 0.25;
pub const RRELU_LOWER: f64 = 0.125;
pub const RRELU_UPPER: f64 = 0.333;
pub const ARELU_ALPHA: f64 = 0.9;
pub const ARELU_BETA: f64 = 2.0;
/// Range that AReLU's negative-side scale is clamped into.
pub const ARELU_CLAMP: (f64, f64) = (0.01, 0.99);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationKind {
    Relu,
    LeakyRelu,
    Rrelu,
    Elu,
    Prelu,
    Arelu,
    Ensemble,
}

impl ActivationKind {
    pub const SINGLE: [ActivationKind; 6] = [
        ActivationKind::Relu,
        ActivationKind::LeakyRelu,
        ActivationKind::Rrelu,
        ActivationKind::Elu,
        ActivationKind::Prelu,
        ActivationKind::Arelu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Relu => "relu",
            ActivationKind::LeakyRelu => "leaky_relu",
            ActivationKind::Rrelu => "rrelu",
            ActivationKind::Elu => "elu",
            ActivationKind::Prelu => "prelu",
            ActivationKind::Arelu => "arelu",
            ActivationKind::Ensemble => "ensemble",
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActivationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "relu" => Ok(ActivationKind::Relu),
            "leaky_relu" | "leakyrelu" => Ok(ActivationKind::LeakyRelu),
            "rrelu" => Ok(ActivationKind::Rrelu),
            "elu" => Ok(ActivationKind::Elu),
            "prelu" => Ok(ActivationKind::Prelu),
            "arelu" => Ok(ActivationKind::Arelu),
            "ensemble" => Ok(ActivationKind::Ensemble),
            _ => Err(Error::config("activation", format!("unknown activation kind {s:?}"))),
        }
    }
}

/// Whether an activation runs in training or inference mode. Only RReLU
/// behaves differently between the two.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    #[default]
    Eval,
}

/// An activation kind together with its fixed parameters and the initial
/// values of its learnable ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ActivationSpec {
    Relu,
    LeakyRelu { gamma: f64 },
    Rrelu { lower: f64, upper: f64 },
    Elu { r: f64 },
    Prelu { xi: f64 },
    Arelu { alpha: f64, beta: f64 },
    Ensemble { members: Vec<ActivationSpec> },
}

impl Default for ActivationSpec {
    fn default() -> Self {
        ActivationSpec::Relu
    }
}

impl ActivationSpec {
    /// Default parameters for a single (non-ensemble) kind.
    pub fn init(kind: ActivationKind) -> Result<Self> {
        Ok(match kind {
            ActivationKind::Relu => ActivationSpec::Relu,
            ActivationKind::LeakyRelu => ActivationSpec::LeakyRelu {
                gamma: LEAKY_RELU_GAMMA,
            },
            ActivationKind::Rrelu => ActivationSpec::Rrelu {
                lower: RRELU_LOWER,
                upper: RRELU_UPPER,
            },
            ActivationKind::Elu => ActivationSpec::Elu { r: ELU_R },
            ActivationKind::Prelu => ActivationSpec::Prelu { xi: PRELU_XI },
            ActivationKind::Arelu => ActivationSpec::Arelu {
                alpha: ARELU_ALPHA,
                beta: ARELU_BETA,
            },
            ActivationKind::Ensemble => {
                return Err(Error::Contract(
                    "ensembles are built with ActivationSpec::ensemble".into(),
                ))
            }
        })
    }

    pub fn ensemble(members: Vec<ActivationSpec>) -> Result<Self> {
        let spec = ActivationSpec::Ensemble { members };
        spec.validate()?;
        Ok(spec)
    }

    /// Ensemble of freshly initialized members.
    pub fn ensemble_of(kinds: &[ActivationKind]) -> Result<Self> {
        let members = kinds
            .iter()
            .map(|&k| ActivationSpec::init(k))
            .collect::<Result<Vec<_>>>()?;
        Self::ensemble(members)
    }

    pub fn kind(&self) -> ActivationKind {
        match self {
            ActivationSpec::Relu => ActivationKind::Relu,
            ActivationSpec::LeakyRelu { .. } => ActivationKind::LeakyRelu,
            ActivationSpec::Rrelu { .. } => ActivationKind::Rrelu,
            ActivationSpec::Elu { .. } => ActivationKind::Elu,
            ActivationSpec::Prelu { .. } => ActivationKind::Prelu,
            ActivationSpec::Arelu { .. } => ActivationKind::Arelu,
            ActivationSpec::Ensemble { .. } => ActivationKind::Ensemble,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = |name: &str, v: f64| {
            if v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(format!("activation.{name}"), "must be finite"))
            }
        };
        match self {
            ActivationSpec::Relu => Ok(()),
            ActivationSpec::LeakyRelu { gamma } => finite("gamma", *gamma),
            ActivationSpec::Elu { r } => finite("r", *r),
            ActivationSpec::Prelu { xi } => finite("xi", *xi),
            ActivationSpec::Arelu { alpha, beta } => {
                finite("alpha", *alpha)?;
                finite("beta", *beta)
            }
            ActivationSpec::Rrelu { lower, upper } => {
                finite("lower", *lower)?;
                finite("upper", *upper)?;
                if !(0.0 < *lower && lower < upper) {
                    return Err(Error::config(
                        "activation.lower",
                        format!("RReLU needs 0 < l < u, got l={lower}, u={upper}"),
                    ));
                }
                Ok(())
            }
            ActivationSpec::Ensemble { members } => {
                if members.is_empty() {
                    return Err(Error::Contract("activation ensemble has no members".into()));
                }
                for m in members {
                    if matches!(m, ActivationSpec::Ensemble { .. }) {
                        return Err(Error::Contract("activation ensembles cannot be nested".into()));
                    }
                    m.validate()?;
                }
                Ok(())
            }
        }
    }

    /// True when the activation owns trainable parameters.
    pub fn is_learnable(&self) -> bool {
        match self {
            ActivationSpec::Prelu { .. } | ActivationSpec::Arelu { .. } => true,
            ActivationSpec::Ensemble { members } => members.iter().any(Self::is_learnable),
            _ => false,
        }
    }

    /// Short label such as `relu+arelu`.
    pub fn label(&self) -> String {
        match self {
            ActivationSpec::Ensemble { members } => members
                .iter()
                .map(|m| m.kind().name())
                .collect::<Vec<_>>()
                .join("+"),
            other => other.kind().name().to_string(),
        }
    }

    /// Applies the activation with its parameters held constant.
    pub fn apply<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        x: Var,
        mode: Mode,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<Var> {
        self.validate()?;
        let scalar = |g: &mut Graph<T>, v: f64| g.constant(Tensor::scalar(T::cast(v)));
        match self {
            ActivationSpec::Relu => relu(g, x),
            ActivationSpec::LeakyRelu { gamma } => leaky_relu(g, x, *gamma),
            ActivationSpec::Rrelu { lower, upper } => rrelu(g, x, *lower, *upper, mode, rng),
            ActivationSpec::Elu { r } => elu(g, x, *r),
            ActivationSpec::Prelu { xi } => {
                let xi = scalar(g, *xi);
                prelu(g, x, xi)
            }
            ActivationSpec::Arelu { alpha, beta } => {
                let (a, b) = (scalar(g, *alpha), scalar(g, *beta));
                arelu(g, x, a, b)
            }
            ActivationSpec::Ensemble { members } => {
                let mut acc: Option<Var> = None;
                for m in members {
                    let y = m.apply(g, x, mode, rng.as_deref_mut())?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, y)?,
                        None => y,
                    });
                }
                acc.ok_or_else(|| Error::Contract("activation ensemble has no members".into()))
            }
        }
    }
}

impl fmt::Display for ActivationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

// ------------------------------------------------------------------ kernels

/// Elementwise op `y = slope(x)·x` (or a general `y = f(x)`) whose input
/// derivative is a saved per-element slope.
struct SavedSlope<T> {
    name: &'static str,
    slope: Vec<T>,
}

impl<T: Scalar> CustomOp<T> for SavedSlope<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        Ok(vec![Some(g.iter().zip(&self.slope).map(|(&g, &s)| g * s).collect())])
    }
}

fn elementwise<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    name: &'static str,
    f: impl Fn(T) -> (T, T),
) -> Result<Var> {
    let xv = g.value(x);
    let (out, slope): (Vec<T>, Vec<T>) = xv.data().iter().map(|&v| f(v)).unzip();
    let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
    Ok(g.custom(&[x], out, SavedSlope { name, slope }))
}

pub fn relu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Result<Var> {
    g.relu(x)
}

pub fn leaky_relu<T: Scalar>(g: &mut Graph<T>, x: Var, gamma: f64) -> Result<Var> {
    let gamma = T::cast(gamma);
    elementwise(g, x, "leaky_relu", |v| {
        if v > T::zero() {
            (v, T::one())
        } else {
            (gamma * v, gamma)
        }
    })
}

pub fn elu<T: Scalar>(g: &mut Graph<T>, x: Var, r: f64) -> Result<Var> {
    let r = T::cast(r);
    elementwise(g, x, "elu", |v| {
        if v > T::zero() {
            (v, T::one())
        } else {
            let e = v.exp();
            (r * (e - T::one()), r * e)
        }
    })
}

/// Randomized leaky ReLU. In training mode every element draws its own
/// negative slope from `U(lower, upper)`; in evaluation mode the slope is
/// the mean `(lower + upper) / 2`.
pub fn rrelu<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    lower: f64,
    upper: f64,
    mode: Mode,
    rng: Option<&mut SeedRng>,
) -> Result<Var> {
    if !(0.0 < lower && lower < upper) {
        return Err(Error::Contract(format!(
            "RReLU needs 0 < l < u, got l={lower}, u={upper}"
        )));
    }
    match mode {
        Mode::Eval => {
            let a = T::cast((lower + upper) / 2.0);
            elementwise(g, x, "rrelu", |v| if v > T::zero() { (v, T::one()) } else { (a * v, a) })
        }
        Mode::Train => {
            let rng = rng.ok_or_else(|| {
                Error::Contract("RReLU in training mode needs a random generator".into())
            })?;
            let xv = g.value(x);
            let mut out = Vec::with_capacity(xv.numel());
            let mut slope = Vec::with_capacity(xv.numel());
            for &v in xv.data() {
                let a = T::cast(rng.random_range(lower..upper));
                if v > T::zero() {
                    out.push(v);
                    slope.push(T::one());
                } else {
                    out.push(a * v);
                    slope.push(a);
                }
            }
            let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
            Ok(g.custom(&[x], out, SavedSlope { name: "rrelu", slope }))
        }
    }
}

/// Index of the PReLU coefficient used by element `i` of a tensor of the
/// given shape: per channel (axis 1) when `n_coef > 1`, else shared.
fn prelu_layout(shape: &[usize], n_coef: usize) -> Result<(usize, usize)> {
    if n_coef == 1 {
        return Ok((1, 1));
    }
    if shape.len() < 2 || shape[1] != n_coef {
        return Err(Error::Shape(format!(
            "per-channel PReLU with {n_coef} coefficients cannot act on {shape:?}"
        )));
    }
    Ok((n_coef, shape[2..].iter().product()))
}

struct PreluOp {
    channels: usize,
    inner: usize,
}

impl<T: Scalar> CustomOp<T> for PreluOp {
    fn name(&self) -> &'static str {
        "prelu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let (x, xi) = (inputs[0].data(), inputs[1].data());
        let mut gx = vec![T::zero(); x.len()];
        let mut gxi = vec![T::zero(); xi.len()];
        for i in 0..x.len() {
            let c = (i / self.inner) % self.channels;
            if x[i] > T::zero() {
                gx[i] = g[i];
            } else {
                gx[i] = g[i] * xi[c];
                gxi[c] += g[i] * x[i];
            }
        }
        Ok(vec![Some(gx), Some(gxi)])
    }
}

/// Parametric ReLU. `xi` holds one shared coefficient (`[1]`) or one per
/// channel of axis 1.
pub fn prelu<T: Scalar>(g: &mut Graph<T>, x: Var, xi: Var) -> Result<Var> {
    let n_coef = g.value(xi).numel();
    let (channels, inner) = prelu_layout(g.shape(x), n_coef)?;
    let (xv, cv) = (g.value(x), g.value(xi).data());
    let out: Vec<T> = xv
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| if v > T::zero() { v } else { cv[(i / inner) % channels] * v })
        .collect();
    let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
    Ok(g.custom(&[x, xi], out, PreluOp { channels, inner }))
}

fn clamp_alpha<T: Scalar>(alpha: T) -> (T, bool) {
    let (lo, hi) = (T::cast(ARELU_CLAMP.0), T::cast(ARELU_CLAMP.1));
    (alpha.max(lo).min(hi), alpha >= lo && alpha <= hi)
}

struct AreluOp;

impl<T: Scalar> CustomOp<T> for AreluOp {
    fn name(&self) -> &'static str {
        "arelu"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, g: &[T]) -> Result<Vec<Option<Vec<T>>>> {
        let x = inputs[0].data();
        let (alpha, beta) = (inputs[1].data()[0], inputs[2].data()[0]);
        let (a, inside) = clamp_alpha(alpha);
        let s = sigmoid(beta);
        let pos = T::one() + s;
        let mut gx = vec![T::zero(); x.len()];
        let (mut ga, mut gb) = (T::zero(), T::zero());
        for i in 0..x.len() {
            if x[i] < T::zero() {
                gx[i] = g[i] * a;
                ga += g[i] * x[i];
            } else {
                gx[i] = g[i] * pos;
                gb += g[i] * x[i];
            }
        }
        let ga = if inside { ga } else { T::zero() };
        let gb = gb * s * (T::one() - s);
        Ok(vec![Some(gx), Some(vec![ga]), Some(vec![gb])])
    }
}

fn check_scalar_param<T: Scalar>(g: &Graph<T>, v: Var, name: &str) -> Result<()> {
    if g.value(v).numel() != 1 {
        return Err(Error::Shape(format!(
            "AReLU {name} must be a single value, got shape {:?}",
            g.shape(v)
        )));
    }
    Ok(())
}

/// Attention rectified linear unit: `C(α)·x` for `x < 0`, `(1 + σ(β))·x`
/// otherwise. `alpha` and `beta` are one-element tensors; α is clamped only
/// in the forward pass and receives no gradient outside the clamp range.
pub fn arelu<T: Scalar>(g: &mut Graph<T>, x: Var, alpha: Var, beta: Var) -> Result<Var> {
    check_scalar_param(g, alpha, "alpha")?;
    check_scalar_param(g, beta, "beta")?;
    let (a, _) = clamp_alpha(g.value(alpha).data()[0]);
    let pos = T::one() + sigmoid(g.value(beta).data()[0]);
    let xv = g.value(x);
    let out: Vec<T> = xv
        .data()
        .iter()
        .map(|&v| if v < T::zero() { a * v } else { pos * v })
        .collect();
    let out = Tensor::from_vec(xv.shape().to_vec(), out)?;
    Ok(g.custom(&[x, alpha, beta], out, AreluOp))
}

/// The attention residue of AReLU on its own: `C(α)·x` for `x < 0`,
/// `σ(β)·x` otherwise.
pub fn elsa<T: Scalar>(x: T, alpha: T, beta: T) -> T {
    if x < T::zero() {
        clamp_alpha(alpha).0 * x
    } else {
        sigmoid(beta) * x
    }
}

// -------------------------------------------------------------------- layer

#[derive(Clone, Debug)]
enum Unit {
    Relu,
    LeakyRelu { gamma: f64 },
    Rrelu { lower: f64, upper: f64 },
    Elu { r: f64 },
    Prelu { xi: ParamId },
    Arelu { alpha: ParamId, beta: ParamId },
}

/// An activation site with its learnable parameters registered in a
/// [`ParamStore`]. Reusing one `Activation` at several sites shares its
/// parameters between them.
#[derive(Clone, Debug)]
pub struct Activation {
    spec: ActivationSpec,
    units: Vec<Unit>,
}

impl Activation {
    /// Registers the activation's parameters under `prefix`. `channels`
    /// selects one PReLU coefficient per channel; `None` shares one.
    pub fn build<T: Scalar>(
        spec: &ActivationSpec,
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: Option<usize>,
    ) -> Result<Self> {
        spec.validate()?;
        let members: Vec<&ActivationSpec> = match spec {
            ActivationSpec::Ensemble { members } => members.iter().collect(),
            single => vec![single],
        };
        let ensemble = matches!(spec, ActivationSpec::Ensemble { .. });
        let mut units = Vec::with_capacity(members.len());
        for (i, m) in members.into_iter().enumerate() {
            let name = |p: &str| {
                if ensemble {
                    format!("{prefix}.{i}.{p}")
                } else {
                    format!("{prefix}.{p}")
                }
            };
            units.push(match *m {
                ActivationSpec::Relu => Unit::Relu,
                ActivationSpec::LeakyRelu { gamma } => Unit::LeakyRelu { gamma },
                ActivationSpec::Rrelu { lower, upper } => Unit::Rrelu { lower, upper },
                ActivationSpec::Elu { r } => Unit::Elu { r },
                ActivationSpec::Prelu { xi } => {
                    let n = channels.unwrap_or(1);
                    let t = Tensor::full([n], T::cast(xi))?;
                    Unit::Prelu {
                        xi: store.add(name("xi"), t)?,
                    }
                }
                ActivationSpec::Arelu { alpha, beta } => Unit::Arelu {
                    alpha: store.add(name("alpha"), Tensor::scalar(T::cast(alpha)))?,
                    beta: store.add(name("beta"), Tensor::scalar(T::cast(beta)))?,
                },
                ActivationSpec::Ensemble { .. } => unreachable!("validated: no nesting"),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            units,
        })
    }

    pub fn spec(&self) -> &ActivationSpec {
        &self.spec
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        mode: Mode,
        mut rng: Option<&mut SeedRng>,
    ) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for unit in &self.units {
            let y = match *unit {
                Unit::Relu => relu(g, x)?,
                Unit::LeakyRelu { gamma } => leaky_relu(g, x, gamma)?,
                Unit::Rrelu { lower, upper } => rrelu(g, x, lower, upper, mode, rng.as_deref_mut())?,
                Unit::Elu { r } => elu(g, x, r)?,
                Unit::Prelu { xi } => {
                    let xi = g.param(store, xi);
                    prelu(g, x, xi)?
                }
                Unit::Arelu { alpha, beta } => {
                    let (a, b) = (g.param(store, alpha), g.param(store, beta));
                    arelu(g, x, a, b)?
                }
            };
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        acc.ok_or_else(|| Error::Contract("activation has no members".into()))
    }
}
