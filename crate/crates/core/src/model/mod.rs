//! The segmentation network and the label-completion U-Net.
//!
//! Both share one encoder/decoder skeleton. An encoder stage is
//! `conv → BN → ReLU → conv → BN → ReLU`, optionally followed by transformer
//! blocks, then max pooling (except at the bottleneck). A decoder stage
//! upsamples with a transposed convolution, concatenates the matching
//! encoder output along channels and runs a conv block. A 1×1 convolution
//! and a channel softmax produce per-voxel class probabilities.

mod checkpoint;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{block_nchw, AttentionParams, AttentionVars, BlockConfig, ScoreScaling, PARAM_NAMES};
use crate::error::{Error, Result};
use crate::nn::{he_normal, Ctx, ParamStore};
use crate::tensor::ops::concat;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::windowing::Magnification;

pub const STAGES: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Mehtc,
    CompletionUnet,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub dims: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub widths: Vec<usize>,
    #[serde(default = "default_conv_kernel")]
    pub conv_kernel: usize,
    #[serde(default = "default_pool_kernel")]
    pub pool_kernel: usize,
    /// Transformer blocks appended to each encoder stage.
    pub transformer: Vec<Vec<BlockConfig>>,
    pub variant: Variant,
}

fn default_conv_kernel() -> usize {
    3
}

fn default_pool_kernel() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::mehtc(3, 1, 4, vec![16, 32, 64, 128, 256], 4, 4)
    }
}

impl ModelConfig {
    /// Segmentation network with one block at each of the three coarsest
    /// stages, alternating unshifted/shifted windows.
    pub fn mehtc(dims: usize, in_channels: usize, num_classes: usize, widths: Vec<usize>, window: usize, heads: usize) -> Self {
        let (win, mag) = if dims == 2 { ([1, window, window], [1, 2, 2]) } else { ([window; 3], [2, 2, 2]) };
        let transformer = widths
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                if i < 2 {
                    return Vec::new();
                }
                vec![BlockConfig {
                    window: win,
                    magnification: Magnification(mag),
                    shifted: i % 2 == 1,
                    heads,
                    channels: c,
                    scaling: ScoreScaling::InvSqrtDk,
                }]
            })
            .collect();
        ModelConfig {
            dims,
            in_channels,
            num_classes,
            widths,
            conv_kernel: 3,
            pool_kernel: 2,
            transformer,
            variant: Variant::Mehtc,
        }
    }

    /// Attention-free 3D U-Net for label completion.
    pub fn completion_unet(in_channels: usize, num_classes: usize, widths: Vec<usize>) -> Self {
        ModelConfig {
            dims: 3,
            in_channels,
            num_classes,
            transformer: vec![Vec::new(); widths.len()],
            widths,
            conv_kernel: 3,
            pool_kernel: 2,
            variant: Variant::CompletionUnet,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 2 && self.dims != 3 {
            return Err(Error::config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.widths.len() != STAGES {
            return Err(Error::config(format!("expected {STAGES} encoder widths, got {}", self.widths.len())));
        }
        if self.widths[0] == 0 || self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config(format!("encoder widths must be positive and strictly increasing: {:?}", self.widths)));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            return Err(Error::config("need at least one input channel and two classes"));
        }
        if self.conv_kernel % 2 == 0 || self.pool_kernel < 2 {
            return Err(Error::config("conv kernel must be odd and pool kernel at least 2"));
        }
        if self.transformer.len() != STAGES {
            return Err(Error::config(format!("transformer list must have {STAGES} stages")));
        }
        for (i, blocks) in self.transformer.iter().enumerate() {
            if self.variant == Variant::CompletionUnet && !blocks.is_empty() {
                return Err(Error::config("completion_unet must not contain transformer blocks"));
            }
            for b in blocks {
                b.validate()?;
                if b.channels != self.widths[i] {
                    return Err(Error::config(format!(
                        "stage {i} block width {} differs from stage width {}",
                        b.channels, self.widths[i]
                    )));
                }
                if self.dims == 2 && (b.window[0] != 1 || b.magnification.0[0] != 1) {
                    return Err(Error::config("2D blocks need unit depth window and magnification"));
                }
            }
        }
        Ok(())
    }

    /// Required multiple for every spatial extent.
    pub fn size_multiple(&self) -> usize {
        self.pool_kernel.pow(STAGES as u32 - 1)
    }

    fn kernel(&self, k: usize) -> Vec<usize> {
        vec![k; self.dims]
    }
}

fn enc(i: usize) -> String {
    format!("encoder.stage{i}")
}

fn dec(i: usize) -> String {
    format!("decoder.stage{i}")
}

fn insert_conv_block<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, c_in: usize, c_out: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let k = cfg.kernel(cfg.conv_kernel);
    for (j, cin) in [(1, c_in), (2, c_out)] {
        let mut shape = vec![c_out, cin];
        shape.extend(&k);
        store.insert(format!("{prefix}.conv{j}.weight"), he_normal(&shape, rng));
        store.insert(format!("{prefix}.bn{j}.gamma"), Tensor::ones(&[c_out]));
        store.insert(format!("{prefix}.bn{j}.beta"), Tensor::zeros(&[c_out]));
        store.insert_buffer(format!("{prefix}.bn{j}.running_mean"), Tensor::zeros(&[c_out]));
        store.insert_buffer(format!("{prefix}.bn{j}.running_var"), Tensor::ones(&[c_out]));
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
}

/// Deterministic initialization from `seed`.
pub fn build_model<T: Scalar>(cfg: ModelConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let w = &cfg.widths;
    for i in 0..STAGES {
        let c_in = if i == 0 { cfg.in_channels } else { w[i - 1] };
        insert_conv_block(&mut store, &enc(i), c_in, w[i], &cfg, &mut rng);
        for (j, b) in cfg.transformer[i].iter().enumerate() {
            let p = AttentionParams::<T>::init(b.channels, b.heads, &mut rng);
            for (name, t) in PARAM_NAMES.iter().zip(p.tensors) {
                store.insert(format!("{}.block{j}.{name}", enc(i)), t);
            }
        }
    }
    let up_k = cfg.kernel(cfg.pool_kernel);
    for i in 0..STAGES - 1 {
        let mut shape = vec![w[i + 1], w[i]];
        shape.extend(&up_k);
        store.insert(format!("{}.up.weight", dec(i)), he_normal(&shape, &mut rng));
        store.insert(format!("{}.up.bias", dec(i)), Tensor::zeros(&[w[i]]));
        insert_conv_block(&mut store, &dec(i), 2 * w[i], w[i], &cfg, &mut rng);
    }
    let mut head = vec![cfg.num_classes, w[0]];
    head.extend(cfg.kernel(1));
    store.insert("head.weight", he_normal(&head, &mut rng));
    store.insert("head.bias", Tensor::zeros(&[cfg.num_classes]));
    Ok(Model { config: cfg, store })
}

fn conv_block<'t, T: Scalar>(cfg: &ModelConfig, ctx: &Ctx<'t, T>, x: Var<'t, T>, prefix: &str) -> Result<Var<'t, T>> {
    let stride = cfg.kernel(1);
    let pad = cfg.kernel(cfg.conv_kernel / 2);
    let mut h = x;
    for j in 1..=2 {
        h = h.conv(ctx.p(&format!("{prefix}.conv{j}.weight"))?, &stride, &pad)?;
        h = ctx.batchnorm(h, &format!("{prefix}.bn{j}"))?.relu();
    }
    Ok(h)
}

fn check_input(cfg: &ModelConfig, shape: &[usize]) -> Result<()> {
    if shape.len() != cfg.dims + 2 || shape[1] != cfg.in_channels {
        return Err(Error::shape(format!(
            "model expects [N, {}, {} spatial axes], got {shape:?}",
            cfg.in_channels, cfg.dims
        )));
    }
    let m = cfg.size_multiple();
    if shape[2..].iter().any(|&s| s % m != 0) {
        return Err(Error::shape(format!(
            "spatial extents {:?} must be multiples of {m}",
            &shape[2..]
        )));
    }
    Ok(())
}

/// Encoder stage outputs (before pooling), finest first.
pub fn encode<'t, T: Scalar>(cfg: &ModelConfig, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Vec<Var<'t, T>>> {
    check_input(cfg, &x.shape())?;
    let pool = cfg.kernel(cfg.pool_kernel);
    let mut feats = Vec::with_capacity(STAGES);
    let mut h = x;
    for i in 0..STAGES {
        if i > 0 {
            h = h.maxpool(&pool)?;
        }
        h = conv_block(cfg, ctx, h, &enc(i))?;
        for (j, b) in cfg.transformer[i].iter().enumerate() {
            let vars = AttentionVars::from_ctx(ctx, &format!("{}.block{j}", enc(i)), b.heads)?;
            h = block_nchw(h, b, &vars)?;
        }
        feats.push(h);
    }
    Ok(feats)
}

/// Decoder output at full resolution with `widths[0]` channels.
pub fn decode<'t, T: Scalar>(cfg: &ModelConfig, ctx: &Ctx<'t, T>, feats: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    if feats.len() != STAGES {
        return Err(Error::shape(format!("decoder needs {STAGES} encoder outputs, got {}", feats.len())));
    }
    let mut h = feats[STAGES - 1];
    for i in (0..STAGES - 1).rev() {
        let p = dec(i);
        let up = h.upconv(ctx.p(&format!("{p}.up.weight"))?)?.add_bias(ctx.p(&format!("{p}.up.bias"))?, 1)?;
        h = conv_block(cfg, ctx, concat(&[feats[i], up], 1)?, &p)?;
    }
    Ok(h)
}

/// Class logits from decoder features.
pub fn head_logits<'t, T: Scalar>(cfg: &ModelConfig, ctx: &Ctx<'t, T>, features: Var<'t, T>) -> Result<Var<'t, T>> {
    features
        .conv(ctx.p("head.weight")?, &cfg.kernel(1), &cfg.kernel(0))?
        .add_bias(ctx.p("head.bias")?, 1)
}

/// Per-voxel class probabilities `[N, classes, spatial]`.
pub fn forward_var<'t, T: Scalar>(cfg: &ModelConfig, ctx: &Ctx<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let feats = encode(cfg, ctx, x)?;
    let h = decode(cfg, ctx, &feats)?;
    head_logits(cfg, ctx, h)?.softmax(1)
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        build_model(cfg, seed)
    }

    /// Eval-mode forward of a batch `[N, C, spatial]`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        let y = forward_var(&self.config, &ctx, tape.constant(x.clone()))?;
        Ok((*y.value()).clone())
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), store: self.store.cast() }
    }

    pub fn attention_param_count(&self) -> usize {
        self.store.params().filter(|(n, _)| n.contains(".block")).map(|(_, t)| t.len()).sum()
    }
}
