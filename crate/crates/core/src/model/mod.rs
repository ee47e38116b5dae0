//! ResNet-18 / SE-ResNet-18 embedding network over LFCC maps, with
//! attentive statistics pooling, an embedding layer, a two-way softmax head
//! and the one-class target direction used for scoring.

mod checkpoint;
mod layers;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, ParamRecord};
pub use layers::{
    apply_bn_updates, attentive_stats_pool, linear, se_gate, AttentivePooling, BasicBlock, BatchNorm, BnUpdate, ConvBn,
    ForwardCtx, Linear, SeBlock, BN_EPS, BN_MOMENTUM, POOL_VAR_FLOOR,
};

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::activations::{Activation, ActivationSpec};
use crate::error::{Error, Result};
use crate::frontend::FeatureMatrix;
use crate::numerics::{conv_out_len, Conv2dParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::seed_rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Resnet18,
    SeResnet18,
}

/// Where `ModelConfig::activation` is used besides the first and last
/// activation sites.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteriorPolicy {
    /// Residual blocks keep plain ReLU.
    #[default]
    FirstLastOnly,
    /// Every activation site uses the configured activation, each with its
    /// own parameters.
    AllSites,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub activation: ActivationSpec,
    pub interior_activation_policy: InteriorPolicy,
    /// First and last sites share one set of activation parameters.
    pub share_first_last: bool,
    pub use_batchnorm: bool,
    pub se_reduction: usize,
    /// Feature rows (frequency axis) of the input map.
    pub input_dim: usize,
    pub stem_channels: usize,
    pub stage_channels: Vec<usize>,
    pub stage_strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub final_channels: usize,
    pub attention_dim: usize,
    pub embedding_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::SeResnet18,
            activation: ActivationSpec::Relu,
            interior_activation_policy: InteriorPolicy::FirstLastOnly,
            share_first_last: true,
            use_batchnorm: true,
            se_reduction: 8,
            input_dim: 60,
            stem_channels: 16,
            stage_channels: vec![64, 128, 256, 512],
            stage_strides: vec![1, 2, 2, 2],
            blocks_per_stage: 2,
            final_channels: 256,
            attention_dim: 128,
            embedding_dim: 256,
        }
    }
}

pub const N_CLASSES: usize = 2;
const STEM_KERNEL: (usize, usize) = (9, 9);
const STEM_STRIDE: (usize, usize) = (3, 1);
const STEM_PAD: (usize, usize) = (0, 4);
const FINAL_PAD: (usize, usize) = (0, 1);

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.activation
            .validate()
            .map_err(|e| Error::config("model.activation", e.to_string()))?;
        let positive = [
            ("model.input_dim", self.input_dim),
            ("model.stem_channels", self.stem_channels),
            ("model.blocks_per_stage", self.blocks_per_stage),
            ("model.final_channels", self.final_channels),
            ("model.attention_dim", self.attention_dim),
            ("model.embedding_dim", self.embedding_dim),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.stage_channels.is_empty() {
            return Err(Error::config("model.stage_channels", "needs at least one stage"));
        }
        if self.stage_channels.len() != self.stage_strides.len() {
            return Err(Error::config(
                "model.stage_strides",
                format!(
                    "{} strides for {} stages",
                    self.stage_strides.len(),
                    self.stage_channels.len()
                ),
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::config("model.stage_channels", "channel counts must be positive"));
        }
        if self.stage_strides.contains(&0) {
            return Err(Error::config("model.stage_strides", "strides must be positive"));
        }
        if self.arch == Arch::SeResnet18 {
            if self.se_reduction == 0 {
                return Err(Error::config("model.se_reduction", "must be positive"));
            }
            if let Some(c) = self.stage_channels.iter().find(|&&c| c % self.se_reduction != 0) {
                return Err(Error::config(
                    "model.se_reduction",
                    format!("{} does not divide stage width {c}", self.se_reduction),
                ));
            }
        }
        let h = self.final_height().ok_or_else(|| {
            Error::config(
                "model.input_dim",
                format!("{} rows collapse to nothing under the stride plan", self.input_dim),
            )
        })?;
        if h != 1 {
            return Err(Error::config(
                "model.input_dim",
                format!("frequency axis ends at {h} rows before pooling; the plan needs exactly 1"),
            ));
        }
        Ok(())
    }

    /// Frequency rows after the stem, each stage and the final conv.
    fn heights(&self) -> Option<Vec<usize>> {
        let mut h = conv_out_len(self.input_dim, STEM_KERNEL.0, STEM_STRIDE.0, STEM_PAD.0)?;
        let mut out = vec![h];
        for &s in &self.stage_strides {
            h = conv_out_len(h, 3, s, 1)?;
            out.push(h);
        }
        out.push(conv_out_len(h, 3, 1, FINAL_PAD.0)?);
        Some(out)
    }

    fn final_height(&self) -> Option<usize> {
        self.heights().and_then(|h| h.last().copied())
    }

    /// Smallest number of input frames the stride plan accepts.
    pub fn min_frames(&self) -> usize {
        self.stage_strides.iter().product::<usize>().max(1)
    }

    /// Output frames after the stride plan for `frames` input frames.
    pub fn output_frames(&self, frames: usize) -> usize {
        self.stage_strides
            .iter()
            .fold(frames, |t, &s| conv_out_len(t, 3, s, 1).unwrap_or(0))
    }
}

/// Model outputs for a batch of `N` maps.
#[derive(Clone, Copy, Debug)]
pub struct ModelOutput {
    /// `[N, embedding_dim]`
    pub embedding: Var,
    /// `[N, 2]` softmax-head logits.
    pub logits: Var,
    /// `[N]` cosine between each embedding and the target direction.
    pub score: Var,
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    cfg: ModelConfig,
    store: ParamStore<T>,
    stem: ConvBn,
    first_act: Activation,
    blocks: Vec<(usize, BasicBlock)>,
    final_conv: ConvBn,
    last_act: Activation,
    pool: AttentivePooling,
    fc: Linear,
    head: Linear,
    w0: ParamId,
}

impl<T: Scalar> Model<T> {
    /// Builds a freshly initialized model; all random draws come from
    /// `seed` in layer order.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed_rng(seed);
        let mut store = ParamStore::new();
        let bn = cfg.use_batchnorm;
        let stem = ConvBn::build(
            &mut store,
            "stem",
            1,
            cfg.stem_channels,
            STEM_KERNEL,
            Conv2dParams::new(STEM_STRIDE, STEM_PAD),
            bn,
            &mut rng,
        )?;
        // A shared activation cannot hold per-channel PReLU slopes for two
        // different widths, so sharing implies a single slope.
        let shared = cfg.share_first_last;
        let first_channels = (!shared).then_some(cfg.stem_channels);
        let first_act = Activation::build(&cfg.activation, &mut store, "first_act", first_channels)?;

        let interior = match cfg.interior_activation_policy {
            InteriorPolicy::FirstLastOnly => ActivationSpec::Relu,
            InteriorPolicy::AllSites => cfg.activation.clone(),
        };
        let se = (cfg.arch == Arch::SeResnet18).then_some(cfg.se_reduction);
        let mut blocks = Vec::new();
        let mut c_in = cfg.stem_channels;
        for (si, (&c_out, &stride)) in cfg.stage_channels.iter().zip(&cfg.stage_strides).enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                let plan = layers::BlockPlan {
                    c_in,
                    c_out,
                    stride: if bi == 0 { stride } else { 1 },
                    batchnorm: bn,
                    se_reduction: se,
                    act1: &interior,
                    act2: &interior,
                    per_channel_prelu: true,
                };
                let block = BasicBlock::build(&mut store, &format!("stage{}.block{}", si + 1, bi + 1), &plan, &mut rng)?;
                blocks.push((si, block));
                c_in = c_out;
            }
        }
        let final_conv = ConvBn::build(
            &mut store,
            "final_conv",
            c_in,
            cfg.final_channels,
            (3, 3),
            Conv2dParams::new((1, 1), FINAL_PAD),
            bn,
            &mut rng,
        )?;
        let last_act = if shared {
            first_act.clone()
        } else {
            Activation::build(&cfg.activation, &mut store, "last_act", Some(cfg.final_channels))?
        };
        let pool = AttentivePooling::build(&mut store, "pool", cfg.final_channels, cfg.attention_dim, &mut rng)?;
        let fc = Linear::build(&mut store, "fc", 2 * cfg.final_channels, cfg.embedding_dim, &mut rng)?;
        let head = Linear::build(&mut store, "head", cfg.embedding_dim, N_CLASSES, &mut rng)?;
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let w0: Vec<T> = (0..cfg.embedding_dim).map(|_| T::cast(n.sample(&mut rng))).collect();
        let w0 = store.add("ocs.w0", Tensor::from_vec([cfg.embedding_dim], w0)?)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            stem,
            first_act,
            blocks,
            final_conv,
            last_act,
            pool,
            fc,
            head,
            w0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Id of the one-class target direction.
    pub fn w0(&self) -> ParamId {
        self.w0
    }

    /// Runs the network on `x: [N, H, L]` (or `[N, 1, H, L]`).
    pub fn forward(&self, g: &mut Graph<T>, x: Var, ctx: &mut ForwardCtx<'_, T>) -> Result<ModelOutput> {
        let shape = g.shape(x).to_vec();
        let (n, h, l) = match shape.as_slice() {
            [n, h, l] => (*n, *h, *l),
            [n, 1, h, l] => (*n, *h, *l),
            _ => return Err(Error::Shape(format!("expected [N, H, L] input, got {shape:?}"))),
        };
        if h != self.cfg.input_dim {
            return Err(Error::Shape(format!("expected {} feature rows, got {h}", self.cfg.input_dim)));
        }
        if l < self.cfg.min_frames() {
            return Err(Error::EmptyInput(format!(
                "{l} frames is too short; the model needs at least {}",
                self.cfg.min_frames()
            )));
        }
        let s = &self.store;
        let x = g.reshape(x, &[n, 1, h, l])?;
        ctx.record(g, "input", x);
        let y = self.stem.forward(g, s, x, ctx)?;
        let mode = ctx.mode;
        let mut y = self.first_act.forward(g, s, y, mode, ctx.rng())?;
        ctx.record(g, "stem", y);
        for (i, (stage, block)) in self.blocks.iter().enumerate() {
            y = block.forward(g, s, y, ctx)?;
            let last_in_stage = self.blocks.get(i + 1).is_none_or(|(next, _)| next != stage);
            if last_in_stage {
                ctx.record(g, &format!("stage{}", stage + 1), y);
            }
        }
        let y = self.final_conv.forward(g, s, y, ctx)?;
        let y = self.last_act.forward(g, s, y, mode, ctx.rng())?;
        ctx.record(g, "final_conv", y);
        let fshape = g.shape(y).to_vec();
        let frames = g.reshape(y, &[fshape[0], fshape[1] * fshape[2], fshape[3]])?;
        let pooled = self.pool.forward(g, s, frames)?;
        ctx.record(g, "pool", pooled);
        let embedding = self.fc.forward(g, s, pooled)?;
        ctx.record(g, "fc", embedding);
        let logits = self.head.forward(g, s, embedding)?;
        ctx.record(g, "softmax", logits);
        let w0 = g.param(s, self.w0);
        let score = cosine_to(g, embedding, w0)?;
        Ok(ModelOutput {
            embedding,
            logits,
            score,
        })
    }

    /// Eval-mode forward on a batch of equally long maps, returning
    /// `(embeddings, scores)` as plain values.
    pub fn infer(&self, maps: &[&FeatureMatrix]) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let x = batch_tensor::<T>(maps)?;
        let mut g = Graph::new();
        let x = g.constant(x);
        let mut ctx = ForwardCtx::eval();
        let out = self.forward(&mut g, x, &mut ctx)?;
        let d = self.cfg.embedding_dim;
        let emb = g
            .value(out.embedding)
            .data()
            .chunks(d)
            .map(|c| c.iter().map(|v| v.as_f64()).collect())
            .collect();
        let scores = g.value(out.score).data().iter().map(|v| v.as_f64()).collect();
        Ok((emb, scores))
    }

    /// Detection score (cosine to the target direction) of one utterance at
    /// full length.
    pub fn score(&self, map: &FeatureMatrix) -> Result<f64> {
        Ok(self.infer(&[map])?.1[0])
    }

    /// Output shapes (without the batch axis) of each Table-1 layer for an
    /// `input_dim x frames` input.
    pub fn trace_shapes(&self, frames: usize) -> Result<Vec<(String, Vec<usize>)>> {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, self.cfg.input_dim, frames])?);
        let mut ctx = ForwardCtx::eval().traced();
        self.forward(&mut g, x, &mut ctx)?;
        Ok(ctx.trace.unwrap_or_default())
    }
}

/// Stacks equally long maps into a `[N, rows, frames]` tensor.
pub fn batch_tensor<T: Scalar>(maps: &[&FeatureMatrix]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Contract("empty batch".into()))?;
    let (rows, frames) = (first.rows(), first.frames());
    let mut data = Vec::with_capacity(maps.len() * rows * frames);
    for m in maps {
        if (m.rows(), m.frames()) != (rows, frames) {
            return Err(Error::Shape(format!(
                "batch mixes {rows}x{frames} with {}x{} maps",
                m.rows(),
                m.frames()
            )));
        }
        data.extend(m.values().iter().map(|&v| T::cast(v)));
    }
    Tensor::from_vec([maps.len(), rows, frames], data)
}

/// Rows of `x: [N, D]` scaled to unit length.
pub fn normalize_rows<T: Scalar>(g: &mut Graph<T>, x: Var, what: &str) -> Result<Var> {
    let sq = g.square(x)?;
    let norm2 = g.sum(sq, &[1], true)?;
    if let Some(i) = g.value(norm2).data().iter().position(|v| *v <= T::zero()) {
        return Err(Error::Normalization(format!("{what} row {i}")));
    }
    let norm = g.sqrt(norm2)?;
    g.div(x, norm)
}

/// Cosine similarity `[N]` between each row of `x: [N, D]` and `w: [D]`.
pub fn cosine_to<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var) -> Result<Var> {
    let d = g.shape(w)[0];
    let w2 = g.reshape(w, &[1, d])?;
    let w_hat = normalize_rows(g, w2, "w0")?;
    let x_hat = normalize_rows(g, x, "embedding")?;
    let w_col = g.reshape(w_hat, &[d, 1])?;
    let c = g.matmul(x_hat, w_col)?;
    let n = g.shape(c)[0];
    g.reshape(c, &[n])
}
