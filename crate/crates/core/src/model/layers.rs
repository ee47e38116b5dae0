//! Layer building blocks. Each layer has a free function taking its weights
//! as graph variables (so it can be gradient-checked directly) and a struct
//! that binds those weights to a [`ParamStore`].

use rand_distr::{Distribution, Normal, Uniform};

use crate::activations::{Activation, Mode};
use crate::error::{Error, Result};
use crate::numerics::{Conv2dParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::SeedRng;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
pub const POOL_VAR_FLOOR: f64 = 1e-9;

/// He-normal initialization for a conv weight `[c_out, c_in, kh, kw]`.
fn kaiming<T: Scalar>(shape: [usize; 4], rng: &mut SeedRng) -> Result<Tensor<T>> {
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let n = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
    let v: Vec<T> = (0..shape.iter().product())
        .map(|_| T::cast(n.sample(rng)))
        .collect();
    Tensor::from_vec(shape, v)
}

/// Uniform in `±1/sqrt(fan_in)`.
fn fan_in_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut SeedRng) -> Result<Tensor<T>> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let u = Uniform::new_inclusive(-bound, bound).expect("finite bounds");
    let v: Vec<T> = (0..shape.iter().product())
        .map(|_| T::cast(u.sample(rng)))
        .collect();
    Tensor::from_vec(shape.to_vec(), v)
}

/// Pending running-statistic update produced by a training-mode forward.
#[derive(Clone, Debug)]
pub struct BnUpdate<T> {
    pub mean_id: ParamId,
    pub var_id: ParamId,
    pub batch_mean: Vec<T>,
    pub batch_var: Vec<T>,
    /// Elements per channel in the batch, for the unbiased variance.
    pub count: usize,
}

/// State threaded through one forward pass.
pub struct ForwardCtx<'a, T> {
    pub mode: Mode,
    pub rng: Option<&'a mut SeedRng>,
    pub bn_updates: Vec<BnUpdate<T>>,
    /// `(layer, shape without batch axis)` when tracing is on.
    pub trace: Option<Vec<(String, Vec<usize>)>>,
}

impl<'a, T: Scalar> ForwardCtx<'a, T> {
    pub fn eval() -> Self {
        Self {
            mode: Mode::Eval,
            rng: None,
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn train(rng: &'a mut SeedRng) -> Self {
        Self {
            mode: Mode::Train,
            rng: Some(rng),
            bn_updates: Vec::new(),
            trace: None,
        }
    }

    pub fn traced(mut self) -> Self {
        self.trace = Some(Vec::new());
        self
    }

    pub(crate) fn record(&mut self, g: &Graph<T>, name: &str, v: Var) {
        if let Some(t) = self.trace.as_mut() {
            t.push((name.to_string(), g.shape(v)[1..].to_vec()));
        }
    }

    pub(crate) fn rng(&mut self) -> Option<&mut SeedRng> {
        self.rng.as_deref_mut()
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn build<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.add(format!("{prefix}.gamma"), Tensor::full([channels], T::one())?)?,
            beta: store.add(format!("{prefix}.beta"), Tensor::zeros([channels])?)?,
            running_mean: store.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros([channels])?)?,
            running_var: store.add_buffer(format!("{prefix}.running_var"), Tensor::full([channels], T::one())?)?,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var> {
        let (gamma, beta) = (g.param(store, self.gamma), g.param(store, self.beta));
        let eps = T::cast(BN_EPS);
        match ctx.mode {
            Mode::Train => {
                let shape = g.shape(x);
                let count = shape.iter().product::<usize>() / shape[1];
                let (y, mean, var) = g.batch_norm_train(x, gamma, beta, eps)?;
                ctx.bn_updates.push(BnUpdate {
                    mean_id: self.running_mean,
                    var_id: self.running_var,
                    batch_mean: mean,
                    batch_var: var,
                    count,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = store.get(self.running_mean).data().to_vec();
                let var = store.get(self.running_var).data().to_vec();
                g.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }
}

/// Folds a batch's statistics into the running estimates with momentum
/// [`BN_MOMENTUM`]; the variance is stored unbiased.
pub fn apply_bn_updates<T: Scalar>(store: &mut ParamStore<T>, updates: &[BnUpdate<T>]) {
    let m = T::cast(BN_MOMENTUM);
    for u in updates {
        let correction = if u.count > 1 {
            T::cast(u.count as f64 / (u.count - 1) as f64)
        } else {
            T::one()
        };
        for (r, &b) in store.get_mut(u.mean_id).data_mut().iter_mut().zip(&u.batch_mean) {
            *r = (T::one() - m) * *r + m * b;
        }
        for (r, &b) in store.get_mut(u.var_id).data_mut().iter_mut().zip(&u.batch_var) {
            *r = (T::one() - m) * *r + m * b * correction;
        }
    }
}

/// Convolution followed by optional batch norm. Without batch norm the
/// convolution carries a bias.
#[derive(Clone, Debug)]
pub struct ConvBn {
    weight: ParamId,
    bias: Option<ParamId>,
    bn: Option<BatchNorm>,
    params: Conv2dParams,
}

impl ConvBn {
    #[allow(clippy::too_many_arguments)]
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        c_in: usize,
        c_out: usize,
        kernel: (usize, usize),
        params: Conv2dParams,
        batchnorm: bool,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{prefix}.weight"),
            kaiming([c_out, c_in, kernel.0, kernel.1], rng)?,
        )?;
        let (bias, bn) = if batchnorm {
            (None, Some(BatchNorm::build(store, &format!("{prefix}.bn"), c_out)?))
        } else {
            (Some(store.add(format!("{prefix}.bias"), Tensor::zeros([c_out])?)?), None)
        };
        Ok(Self { weight, bias, bn, params })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        let y = g.conv2d(x, w, b, self.params)?;
        match &self.bn {
            Some(bn) => bn.forward(g, store, y, ctx),
            None => Ok(y),
        }
    }
}

/// `x @ w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(Self {
            weight: store.add(format!("{prefix}.weight"), fan_in_uniform(&[d_in, d_out], d_in, rng)?)?,
            bias: store.add(format!("{prefix}.bias"), fan_in_uniform(&[d_out], d_in, rng)?)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(store, self.weight), g.param(store, self.bias));
        linear(g, x, w, b)
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }
}

/// Squeeze-and-excitation gate on `x: [N, C, H, W]`: channel means go
/// through `FC(C -> C/r) -> ReLU -> FC(C/r -> C) -> sigmoid`, and each
/// channel of `x` is scaled by its gate value.
pub fn se_gate<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 {
        return Err(Error::Shape(format!("SE block expects [N, C, H, W], got {shape:?}")));
    }
    let squeezed = g.mean(x, &[2, 3], false)?;
    let h = linear(g, squeezed, w1, b1)?;
    let h = g.relu(h)?;
    let e = linear(g, h, w2, b2)?;
    let gate = g.sigmoid(e)?;
    let gate = g.reshape(gate, &[shape[0], shape[1], 1, 1])?;
    g.mul(x, gate)
}

#[derive(Clone, Debug)]
pub struct SeBlock {
    squeeze: Linear,
    excite: Linear,
}

impl SeBlock {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::config(
                "model.se_reduction",
                format!("{reduction} does not divide {channels} channels"),
            ));
        }
        let hidden = channels / reduction;
        Ok(Self {
            squeeze: Linear::build(store, &format!("{prefix}.fc1"), channels, hidden, rng)?,
            excite: Linear::build(store, &format!("{prefix}.fc2"), hidden, channels, rng)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.squeeze.weight);
        let b1 = g.param(store, self.squeeze.bias);
        let w2 = g.param(store, self.excite.weight);
        let b2 = g.param(store, self.excite.bias);
        se_gate(g, x, w1, b1, w2, b2)
    }
}

/// Attentive statistics pooling over time for `h: [N, C, T]`.
///
/// `e_t = v . tanh(W h_t + b)`, `a = softmax_t(e)`, `mu = sum_t a_t h_t`,
/// `s = sqrt(max(sum_t a_t h_t^2 - mu^2, floor))`; returns `[N, 2C]` as
/// `concat(mu, s)`. `w: [C, C_att]`, `b: [C_att]`, `v: [C_att, 1]`.
pub fn attentive_stats_pool<T: Scalar>(
    g: &mut Graph<T>,
    h: Var,
    w: Var,
    b: Var,
    v: Var,
    var_floor: f64,
) -> Result<Var> {
    let shape = g.shape(h).to_vec();
    if shape.len() != 3 {
        return Err(Error::Shape(format!("attentive pooling expects [N, C, T], got {shape:?}")));
    }
    let (n, c, t) = (shape[0], shape[1], shape[2]);
    if t == 0 {
        return Err(Error::Contract("attentive pooling needs at least one frame".into()));
    }
    let frames = g.permute(h, &[0, 2, 1])?;
    let frames = g.reshape(frames, &[n * t, c])?;
    let hidden = linear(g, frames, w, b)?;
    let hidden = g.tanh(hidden)?;
    let e = g.matmul(hidden, v)?;
    let e = g.reshape(e, &[n, t])?;
    let a = g.softmax(e, 1)?;
    let a = g.reshape(a, &[n, 1, t])?;
    let weighted = g.mul(h, a)?;
    let mu = g.sum(weighted, &[2], false)?;
    let h2 = g.square(h)?;
    let weighted2 = g.mul(h2, a)?;
    let second = g.sum(weighted2, &[2], false)?;
    let mu2 = g.square(mu)?;
    let var = g.sub(second, mu2)?;
    let var = g.clamp(var, T::cast(var_floor), T::max_value())?;
    let s = g.sqrt(var)?;
    g.concat(&[mu, s], 1)
}

#[derive(Clone, Debug)]
pub struct AttentivePooling {
    w: ParamId,
    b: ParamId,
    v: ParamId,
}

impl AttentivePooling {
    pub fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        attention_dim: usize,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        Ok(Self {
            w: store.add(
                format!("{prefix}.w"),
                fan_in_uniform(&[channels, attention_dim], channels, rng)?,
            )?,
            b: store.add(format!("{prefix}.b"), Tensor::zeros([attention_dim])?)?,
            v: store.add(
                format!("{prefix}.v"),
                fan_in_uniform(&[attention_dim, 1], attention_dim, rng)?,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let (w, b, v) = (g.param(store, self.w), g.param(store, self.b), g.param(store, self.v));
        attentive_stats_pool(g, h, w, b, v, POOL_VAR_FLOOR)
    }
}

/// Residual block: `act(conv-BN -> act -> conv-BN [-> SE] + shortcut)`.
#[derive(Clone, Debug)]
pub struct BasicBlock {
    conv1: ConvBn,
    act1: Activation,
    conv2: ConvBn,
    se: Option<SeBlock>,
    shortcut: Option<ConvBn>,
    act2: Activation,
}

pub(crate) struct BlockPlan<'a> {
    pub c_in: usize,
    pub c_out: usize,
    pub stride: usize,
    pub batchnorm: bool,
    pub se_reduction: Option<usize>,
    pub act1: &'a crate::activations::ActivationSpec,
    pub act2: &'a crate::activations::ActivationSpec,
    pub per_channel_prelu: bool,
}

impl BasicBlock {
    pub(crate) fn build<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        plan: &BlockPlan<'_>,
        rng: &mut SeedRng,
    ) -> Result<Self> {
        let s = plan.stride;
        let conv3 = Conv2dParams::new((s, s), (1, 1));
        let conv1 = ConvBn::build(store, &format!("{prefix}.conv1"), plan.c_in, plan.c_out, (3, 3), conv3, plan.batchnorm, rng)?;
        let channels = plan.per_channel_prelu.then_some(plan.c_out);
        let act1 = Activation::build(plan.act1, store, &format!("{prefix}.act1"), channels)?;
        let conv2 = ConvBn::build(
            store,
            &format!("{prefix}.conv2"),
            plan.c_out,
            plan.c_out,
            (3, 3),
            Conv2dParams::new((1, 1), (1, 1)),
            plan.batchnorm,
            rng,
        )?;
        let se = plan
            .se_reduction
            .map(|r| SeBlock::build(store, &format!("{prefix}.se"), plan.c_out, r, rng))
            .transpose()?;
        let shortcut = if s != 1 || plan.c_in != plan.c_out {
            Some(ConvBn::build(
                store,
                &format!("{prefix}.shortcut"),
                plan.c_in,
                plan.c_out,
                (1, 1),
                Conv2dParams::new((s, s), (0, 0)),
                plan.batchnorm,
                rng,
            )?)
        } else {
            None
        };
        let act2 = Activation::build(plan.act2, store, &format!("{prefix}.act2"), channels)?;
        Ok(Self {
            conv1,
            act1,
            conv2,
            se,
            shortcut,
            act2,
        })
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_, T>,
    ) -> Result<Var> {
        let y = self.conv1.forward(g, store, x, ctx)?;
        let mode = ctx.mode;
        let y = self.act1.forward(g, store, y, mode, ctx.rng())?;
        let mut y = self.conv2.forward(g, store, y, ctx)?;
        if let Some(se) = &self.se {
            y = se.forward(g, store, y)?;
        }
        let skip = match &self.shortcut {
            Some(sc) => sc.forward(g, store, x, ctx)?,
            None => x,
        };
        let y = g.add(y, skip)?;
        self.act2.forward(g, store, y, mode, ctx.rng())
    }
}
