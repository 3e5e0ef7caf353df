//! The segmentation transformer.
//!
//! Input images are channel-last `[B, H, W, C]` (or unbatched `[H, W, C]`).
//! The network batch-normalizes the input per channel, cuts it into
//! `p x p` patches, embeds each patch linearly into `D` dimensions, runs a
//! stack of encoder blocks and then decoder blocks over the token sequence,
//! and folds a per-token linear projection back into `[B, H, W, classes]`
//! logits. Class 0 is noise; every other class is kept.

mod config;
mod params;
mod patches;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::ModelConfig;
pub use params::{truncated_normal, uniform, Bound, ParamId, ParamStore};
pub use patches::{fold, image_to_patches, patches_to_image, patchify};

use crate::dsp::{AudioImage, Mask};
use crate::error::{config_err, shape_err, Error, Result};
use crate::kv::{KvConfig, KvFile};
use crate::tensor::{Checkpoint, NormMode, Real, RunningStats, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Identifies model checkpoints in their metadata block.
pub const MODEL_FORMAT: &str = "vitvs-model";

#[derive(Clone, Copy, Debug)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    /// Extra leading layer norm; present on decoder blocks only.
    pub pre_norm: Option<NormParams>,
    pub norm1: NormParams,
    pub attention: AttentionParams,
    pub norm2: NormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Debug)]
struct Layout {
    input_norm: NormParams,
    embed_w: ParamId,
    embed_b: ParamId,
    pos: Option<ParamId>,
    encoder: Vec<BlockParams>,
    decoder: Vec<BlockParams>,
    head_w: ParamId,
    head_b: ParamId,
}

#[derive(Clone, Copy)]
pub struct NormWeights<'t, T> {
    pub gamma: Var<'t, T>,
    pub beta: Var<'t, T>,
}

impl<'t, T: Real> NormWeights<'t, T> {
    pub fn apply(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm(self.gamma, self.beta, LN_EPS)
    }
}

#[derive(Clone, Copy)]
pub struct AttentionWeights<'t, T> {
    pub wq: Var<'t, T>,
    pub wk: Var<'t, T>,
    pub wv: Var<'t, T>,
    pub wo: Var<'t, T>,
    pub bo: Option<Var<'t, T>>,
}

#[derive(Clone, Copy)]
pub struct MlpWeights<'t, T> {
    pub w1: Var<'t, T>,
    pub b1: Option<Var<'t, T>>,
    pub w2: Var<'t, T>,
    pub b2: Option<Var<'t, T>>,
}

#[derive(Clone, Copy)]
pub struct BlockWeights<'t, T> {
    pub pre_norm: Option<NormWeights<'t, T>>,
    pub norm1: NormWeights<'t, T>,
    pub attention: AttentionWeights<'t, T>,
    pub norm2: NormWeights<'t, T>,
    pub mlp: MlpWeights<'t, T>,
}

/// Views `[N, D]` as `[1, N, D]`; returns whether a batch axis was added.
fn ensure_batched<'t, T: Real>(x: Var<'t, T>, rank: usize) -> Result<(Var<'t, T>, bool)> {
    let shape = x.shape();
    if shape.len() == rank {
        Ok((x, false))
    } else if shape.len() + 1 == rank {
        let mut s = vec![1];
        s.extend(shape);
        Ok((x.reshape(&s)?, true))
    } else {
        Err(shape_err!("expected {} or {} axes, got {shape:?}", rank - 1, rank))
    }
}

fn drop_batch<'t, T: Real>(x: Var<'t, T>, added: bool) -> Result<Var<'t, T>> {
    if added {
        let shape = x.shape();
        x.reshape(&shape[1..])
    } else {
        Ok(x)
    }
}

/// Scaled dot-product attention over `heads` heads of width `D / heads`,
/// followed by the output projection. `x` is `[N, D]` or `[B, N, D]`.
pub fn multihead_attention<'t, T: Real>(
    x: Var<'t, T>,
    w: &AttentionWeights<'t, T>,
    heads: usize,
) -> Result<Var<'t, T>> {
    let (x, added) = ensure_batched(x, 3)?;
    let shape = x.shape();
    let (b, n, d) = (shape[0], shape[1], shape[2]);
    if heads == 0 || d % heads != 0 {
        return Err(shape_err!("width {d} does not split into {heads} heads"));
    }
    let dk = d / heads;
    let split = |v: Var<'t, T>, perm: &[usize]| -> Result<Var<'t, T>> {
        v.reshape(&[b, n, heads, dk])?.permute(perm)
    };
    let q = split(x.matmul(w.wq)?, &[0, 2, 1, 3])?;
    let kt = split(x.matmul(w.wk)?, &[0, 2, 3, 1])?;
    let v = split(x.matmul(w.wv)?, &[0, 2, 1, 3])?;
    let scores = q.matmul(kt)?.scale(1.0 / (dk as f64).sqrt())?.softmax(3)?;
    let context = scores
        .matmul(v)?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, n, d])?;
    drop_batch(context.linear(w.wo, w.bo)?, added)
}

/// `GELU(x W1 + b1) W2 + b2`.
pub fn mlp<'t, T: Real>(x: Var<'t, T>, w: &MlpWeights<'t, T>) -> Result<Var<'t, T>> {
    x.linear(w.w1, w.b1)?.gelu()?.linear(w.w2, w.b2)
}

/// One transformer block.
///
/// The default form is `x + MLP(LN2(MHA(LN1(y))))` with `y = x`, or
/// `y = LN0(x)` when a leading norm is present. With `conventional`, the
/// standard two-residual form `h = x + MHA(LN1(y)); h + MLP(LN2(h))` is used.
pub fn block<'t, T: Real>(
    x: Var<'t, T>,
    w: &BlockWeights<'t, T>,
    heads: usize,
    conventional: bool,
) -> Result<Var<'t, T>> {
    let y = match &w.pre_norm {
        Some(n) => n.apply(x)?,
        None => x,
    };
    let attended = multihead_attention(w.norm1.apply(y)?, &w.attention, heads)?;
    if conventional {
        let h = x.add(attended)?;
        h.add(mlp(w.norm2.apply(h)?, &w.mlp)?)
    } else {
        x.add(mlp(w.norm2.apply(attended)?, &w.mlp)?)
    }
}

/// Per-pixel argmax over the last axis of `[.., H, W, C]` logits, ties to
/// the lower class, mapped to keep (class > 0) or remove (class 0).
pub fn argmax_masks<T: Real>(logits: &Tensor<T>) -> Result<Vec<Mask>> {
    let shape = logits.shape();
    if shape.len() < 3 || shape[shape.len() - 1] == 0 {
        return Err(shape_err!("logits must be [.., H, W, C], got {shape:?}"));
    }
    let l = shape.len() - 3;
    let (h, w, c) = (shape[l], shape[l + 1], shape[l + 2]);
    let pixels = h * w;
    let labels: Vec<u8> = logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for k in 1..c {
                if row[k] > row[best] {
                    best = k;
                }
            }
            u8::from(best > 0)
        })
        .collect();
    if pixels == 0 {
        return Ok(vec![Mask::filled(h, w, false); shape[..l].iter().product()]);
    }
    labels
        .chunks_exact(pixels)
        .map(|chunk| Mask::new(chunk.to_vec(), h, w))
        .collect()
}

/// An audio image replicated across `channels` as a `[H, W, channels]` tensor.
pub fn image_tensor<T: Real>(image: &AudioImage, channels: usize) -> Tensor<T> {
    Tensor::from_fn(&[image.height(), image.width(), channels], |i| {
        T::lit(image.pixels()[i / channels])
    })
}

#[derive(Clone, Debug)]
pub struct ViTVS<T: Real = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    bn_stats: RunningStats<T>,
    layout: Layout,
}

impl<T: Real> ViTVS<T> {
    /// Builds a model with freshly initialized parameters: truncated normal
    /// weights, zero biases, unit norm scales.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let d = config.embed_dim;
        let hid = config.hidden_dim();
        let c_in = config.in_channels;

        let norm = |ps: &mut ParamStore<T>, prefix: &str, width: usize| NormParams {
            gamma: ps.add(format!("{prefix}.gamma"), Tensor::ones(&[width]), false),
            beta: ps.add(format!("{prefix}.beta"), Tensor::zeros(&[width]), false),
        };
        let input_norm = norm(&mut ps, "input_norm", c_in);
        let embed_w = ps.add(
            "embed.weight",
            truncated_normal(&[config.patch_dim(), d], INIT_STD, &mut rng),
            true,
        );
        let embed_b = ps.add("embed.bias", Tensor::zeros(&[d]), false);
        let pos = config.use_positional_embedding.then(|| {
            ps.add(
                "pos_embed",
                truncated_normal(&[config.num_patches(), d], INIT_STD, &mut rng),
                false,
            )
        });

        let mut make_block = |ps: &mut ParamStore<T>, prefix: String, pre: bool| {
            let pre_norm = pre.then(|| norm(ps, &format!("{prefix}.norm0"), d));
            let norm1 = norm(ps, &format!("{prefix}.norm1"), d);
            let mut weight = |ps: &mut ParamStore<T>, name: &str, rows: usize, cols: usize| {
                ps.add(
                    format!("{prefix}.{name}"),
                    truncated_normal(&[rows, cols], INIT_STD, &mut rng),
                    true,
                )
            };
            let attention = AttentionParams {
                wq: weight(ps, "attn.wq", d, d),
                wk: weight(ps, "attn.wk", d, d),
                wv: weight(ps, "attn.wv", d, d),
                wo: weight(ps, "attn.wo", d, d),
                bo: ps.add(format!("{prefix}.attn.bo"), Tensor::zeros(&[d]), false),
            };
            let norm2 = norm(ps, &format!("{prefix}.norm2"), d);
            let w1 = weight(ps, "mlp.w1", d, hid);
            let b1 = ps.add(format!("{prefix}.mlp.b1"), Tensor::zeros(&[hid]), false);
            let w2 = weight(ps, "mlp.w2", hid, d);
            let b2 = ps.add(format!("{prefix}.mlp.b2"), Tensor::zeros(&[d]), false);
            BlockParams {
                pre_norm,
                norm1,
                attention,
                norm2,
                mlp: MlpParams { w1, b1, w2, b2 },
            }
        };
        let encoder = (0..config.encoder_depth)
            .map(|i| make_block(&mut ps, format!("encoder.{i}"), false))
            .collect();
        let decoder = (0..config.decoder_depth)
            .map(|i| make_block(&mut ps, format!("decoder.{i}"), true))
            .collect();

        let out = config.patch_size * config.patch_size * config.num_classes;
        let head_w = ps.add("head.weight", truncated_normal(&[d, out], INIT_STD, &mut rng), true);
        let head_b = ps.add("head.bias", Tensor::zeros(&[out]), false);

        Ok(Self {
            bn_stats: RunningStats::new(c_in),
            params: ps,
            layout: Layout {
                input_norm,
                embed_w,
                embed_b,
                pos,
                encoder,
                decoder,
                head_w,
                head_b,
            },
            config,
        })
    }

    /// A model that predicts `class` at every pixel regardless of input.
    pub fn constant(config: ModelConfig, class: usize) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        let c = model.config.num_classes;
        if class >= c {
            return Err(config_err!("class {class} out of range for {c} classes"));
        }
        let head_w = model.layout.head_w;
        let zero = Tensor::zeros(model.params.value(head_w).shape());
        model.params.set(head_w, zero)?;
        let head_b = model.layout.head_b;
        let shape = model.params.value(head_b).shape().to_vec();
        let bias = Tensor::from_fn(&shape, |i| if i % c == class { T::one() } else { T::zero() });
        model.params.set(head_b, bias)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &RunningStats<T> {
        &self.bn_stats
    }

    pub fn bn_stats_mut(&mut self) -> &mut RunningStats<T> {
        &mut self.bn_stats
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn positional_embedding(&self) -> Option<ParamId> {
        self.layout.pos
    }

    pub fn encoder_params(&self) -> &[BlockParams] {
        &self.layout.encoder
    }

    pub fn decoder_params(&self) -> &[BlockParams] {
        &self.layout.decoder
    }

    /// Parameters of every encoder and decoder block.
    pub fn block_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in self.layout.encoder.iter().chain(&self.layout.decoder) {
            if let Some(n) = b.pre_norm {
                ids.extend([n.gamma, n.beta]);
            }
            let a = b.attention;
            let m = b.mlp;
            ids.extend([b.norm1.gamma, b.norm1.beta, a.wq, a.wk, a.wv, a.wo, a.bo]);
            ids.extend([b.norm2.gamma, b.norm2.beta, m.w1, m.b1, m.w2, m.b2]);
        }
        ids
    }

    pub fn head_params(&self) -> (ParamId, ParamId) {
        (self.layout.head_w, self.layout.head_b)
    }

    pub fn embed_params(&self) -> (ParamId, ParamId) {
        (self.layout.embed_w, self.layout.embed_b)
    }

    pub fn input_norm_params(&self) -> NormParams {
        self.layout.input_norm
    }

    pub fn bind<'t>(&self, tape: &'t Tape<T>) -> Bound<'t, T> {
        self.params.bind(tape)
    }

    pub fn block_weights<'t>(&self, bound: &Bound<'t, T>, p: &BlockParams) -> BlockWeights<'t, T> {
        let norm = |n: NormParams| NormWeights {
            gamma: bound.var(n.gamma),
            beta: bound.var(n.beta),
        };
        BlockWeights {
            pre_norm: p.pre_norm.map(norm),
            norm1: norm(p.norm1),
            attention: AttentionWeights {
                wq: bound.var(p.attention.wq),
                wk: bound.var(p.attention.wk),
                wv: bound.var(p.attention.wv),
                wo: bound.var(p.attention.wo),
                bo: Some(bound.var(p.attention.bo)),
            },
            norm2: norm(p.norm2),
            mlp: MlpWeights {
                w1: bound.var(p.mlp.w1),
                b1: Some(bound.var(p.mlp.b1)),
                w2: bound.var(p.mlp.w2),
                b2: Some(bound.var(p.mlp.b2)),
            },
        }
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        let c = &self.config;
        let l = shape.len();
        if l != 4 || shape[1] != c.image_size || shape[2] != c.image_size || shape[3] != c.in_channels
        {
            return Err(shape_err!(
                "model expects [B, {s}, {s}, {}] images, got {shape:?}",
                c.in_channels,
                s = c.image_size
            ));
        }
        Ok(())
    }

    /// Batch norm, patchify, linear embedding and positional embedding:
    /// `[B, H, W, C]` images to `[B, N, D]` tokens.
    pub fn embed<'t>(
        &self,
        bound: &Bound<'t, T>,
        images: Var<'t, T>,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var<'t, T>> {
        let (images, added) = ensure_batched(images, 4)?;
        self.check_image(&images.shape())?;
        let n = self.layout.input_norm;
        let normed = images.batch_norm(bound.var(n.gamma), bound.var(n.beta), stats, mode, BN_EPS)?;
        let patches = patchify(normed, self.config.patch_size)?;
        let mut tokens = patches.linear(
            bound.var(self.layout.embed_w),
            Some(bound.var(self.layout.embed_b)),
        )?;
        if let Some(pos) = self.layout.pos {
            tokens = tokens.broadcast_add(bound.var(pos))?;
        }
        drop_batch(tokens, added)
    }

    pub fn encoder_block<'t>(
        &self,
        bound: &Bound<'t, T>,
        index: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let p = self.layout.encoder.get(index).ok_or_else(|| shape_err!("no encoder block {index}"))?;
        let w = self.block_weights(bound, p);
        block(x, &w, self.config.num_heads, self.config.conventional_residual)
    }

    pub fn decoder_block<'t>(
        &self,
        bound: &Bound<'t, T>,
        index: usize,
        x: Var<'t, T>,
    ) -> Result<Var<'t, T>> {
        let p = self.layout.decoder.get(index).ok_or_else(|| shape_err!("no decoder block {index}"))?;
        let w = self.block_weights(bound, p);
        block(x, &w, self.config.num_heads, self.config.conventional_residual)
    }

    /// All encoder blocks followed by all decoder blocks.
    pub fn blocks<'t>(&self, bound: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut x = tokens;
        for i in 0..self.layout.encoder.len() {
            x = self.encoder_block(bound, i, x)?;
        }
        for i in 0..self.layout.decoder.len() {
            x = self.decoder_block(bound, i, x)?;
        }
        Ok(x)
    }

    /// `[B, N, D]` tokens to `[B, H, W, classes]` logits.
    pub fn output_projection<'t>(&self, bound: &Bound<'t, T>, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
        let (tokens, added) = ensure_batched(tokens, 3)?;
        let shape = tokens.shape();
        if shape[1] != self.config.num_patches() || shape[2] != self.config.embed_dim {
            return Err(shape_err!(
                "expected [B, {}, {}] tokens, got {shape:?}",
                self.config.num_patches(),
                self.config.embed_dim
            ));
        }
        let projected = tokens.linear(
            bound.var(self.layout.head_w),
            Some(bound.var(self.layout.head_b)),
        )?;
        let s = self.config.image_size;
        drop_batch(fold(projected, self.config.patch_size, s, s)?, added)
    }

    /// Full network on the tape.
    pub fn forward<'t>(
        &self,
        bound: &Bound<'t, T>,
        images: Var<'t, T>,
        stats: &mut RunningStats<T>,
        mode: NormMode,
    ) -> Result<Var<'t, T>> {
        let (images, added) = ensure_batched(images, 4)?;
        let tokens = self.embed(bound, images, stats, mode)?;
        let tokens = self.blocks(bound, tokens)?;
        drop_batch(self.output_projection(bound, tokens)?, added)
    }

    /// Eval-mode forward with the stored running statistics.
    pub fn forward_eval<'t>(&self, bound: &Bound<'t, T>, images: Var<'t, T>) -> Result<Var<'t, T>> {
        let mut stats = self.bn_stats.clone();
        self.forward(bound, images, &mut stats, NormMode::Eval)
    }

    /// Eval-mode logits for `[B, H, W, C]` or `[H, W, C]` images.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.params.bind_frozen(&tape);
        let x = tape.constant(images.clone());
        Ok(self.forward_eval(&bound, x)?.to_tensor())
    }

    pub fn predict_masks(&self, images: &Tensor<T>) -> Result<Vec<Mask>> {
        argmax_masks(&self.logits(images)?)
    }

    /// Mask for one audio image already at the model's input size.
    pub fn predict_mask(&self, image: &AudioImage) -> Result<Mask> {
        let x = image_tensor(image, self.config.in_channels);
        Ok(self.predict_masks(&x)?.remove(0))
    }

    /// Checkpoint holding the config, parameters and running statistics.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint {
            metadata: format!("format = {MODEL_FORMAT}\n{}", self.config.to_kv_with_prefix("model.")),
            ..Default::default()
        };
        for id in self.params.ids() {
            ck.push(self.params.name(id), self.params.value(id));
        }
        let c = self.bn_stats.mean.len();
        ck.push("input_norm.running_mean", &Tensor::new(&[c], self.bn_stats.mean.clone()).unwrap());
        ck.push("input_norm.running_var", &Tensor::new(&[c], self.bn_stats.var.clone()).unwrap());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = KvFile::parse(&ck.metadata)?;
        if meta.get("format") != Some(MODEL_FORMAT) {
            return Err(config_err!("checkpoint does not hold a model"));
        }
        let mut config = ModelConfig::default();
        config.apply(&meta.section("model."))?;
        let mut model = Self::new(config, 0)?;
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            model.params.set(id, ck.tensor(&name)?)?;
        }
        let c = model.config.in_channels;
        let mean: Tensor<T> = ck.tensor("input_norm.running_mean")?;
        let var: Tensor<T> = ck.tensor("input_norm.running_var")?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(shape_err!("running statistics do not match {c} input channels"));
        }
        model.bn_stats.mean = mean.into_data();
        model.bn_stats.var = var.into_data();
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        Self::from_checkpoint(&ck).map_err(|e| match e {
            Error::Config(m) => Error::format(path, m),
            other => other,
        })
    }
}
