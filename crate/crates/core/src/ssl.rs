//! Self-supervised pretraining with masked inpainting reconstruction,
//! contrastive learning between augmented views and rotation prediction.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_model, decode, encode, Checkpoint, ModelConfig, STAGES};
use crate::nn::{apply_bn_updates, collect_grads, he_normal, trunc_normal, Ctx, ParamStore};
use crate::tensor::ops::concat;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::train::{adam_step, AdamConfig, AdamState};

pub const ROTATIONS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaintMode {
    In,
    Out,
}

fn spatial(patch: &Tensor<f32>) -> Result<[usize; 3]> {
    let s = patch.shape();
    match s.len() {
        3 => Ok([1, s[1], s[2]]),
        4 => Ok([s[1], s[2], s[3]]),
        _ => Err(Error::shape(format!("patch must be [C, H, W] or [C, D, H, W], got {s:?}"))),
    }
}

/// Permutes voxels uniformly at random inside each block of the tiling
/// (edge blocks may be partial). All channels share the permutation.
pub fn pixel_shuffle_augment(patch: &Tensor<f32>, block: &[usize], seed: u64) -> Result<Tensor<f32>> {
    let s3 = spatial(patch)?;
    let b3 = match block.len() {
        2 if s3[0] == 1 => [1, block[0], block[1]],
        3 => [block[0], block[1], block[2]],
        _ => return Err(Error::shape(format!("block {block:?} for patch {:?}", patch.shape()))),
    };
    if b3.contains(&0) || (0..3).any(|a| b3[a] > s3[a]) {
        return Err(Error::shape(format!("block {block:?} exceeds patch {:?}", patch.shape())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol: usize = s3.iter().product();
    let c = patch.shape()[0];
    let mut out = patch.clone();
    let mut idx = Vec::new();
    for z0 in (0..s3[0]).step_by(b3[0]) {
        for y0 in (0..s3[1]).step_by(b3[1]) {
            for x0 in (0..s3[2]).step_by(b3[2]) {
                idx.clear();
                for z in z0..(z0 + b3[0]).min(s3[0]) {
                    for y in y0..(y0 + b3[1]).min(s3[1]) {
                        for x in x0..(x0 + b3[2]).min(s3[2]) {
                            idx.push((z * s3[1] + y) * s3[2] + x);
                        }
                    }
                }
                let mut perm = idx.clone();
                perm.shuffle(&mut rng);
                for ch in 0..c {
                    for (&dst, &src) in idx.iter().zip(&perm) {
                        out.data_mut()[ch * vol + dst] = patch.data()[ch * vol + src];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Replaces an explicit box (in-mode) or its complement (out-mode) with
/// uniform noise over the patch's value range. `origin`/`size` are
/// `(D, H, W)`; 2D patches use depth 1.
pub fn paint_box(patch: &Tensor<f32>, mode: PaintMode, origin: [usize; 3], size: [usize; 3], seed: u64) -> Result<Tensor<f32>> {
    let s3 = spatial(patch)?;
    if (0..3).any(|a| origin[a] + size[a] > s3[a]) {
        return Err(Error::shape(format!("box {origin:?}+{size:?} outside patch {s3:?}")));
    }
    let lo = patch.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = patch.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vol: usize = s3.iter().product();
    let mut out = patch.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        let o = i % vol;
        let p = [o / (s3[1] * s3[2]), (o / s3[2]) % s3[1], o % s3[2]];
        let inside = (0..3).all(|a| p[a] >= origin[a] && p[a] < origin[a] + size[a]);
        if inside == (mode == PaintMode::In) {
            *v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        }
    }
    Ok(out)
}

/// In- or out-painting of a random box whose side along each in-use axis
/// is an integer drawn from `[ceil(lo·n), floor(hi·n)]`.
pub fn paint_augment(patch: &Tensor<f32>, mode: PaintMode, rect_fraction: (f64, f64), seed: u64) -> Result<Tensor<f32>> {
    let (lo, hi) = rect_fraction;
    if !(0.0 < lo && lo <= hi && hi < 1.0) {
        return Err(Error::config(format!("paint fractions ({lo}, {hi}) must satisfy 0 < lo <= hi < 1")));
    }
    let s3 = spatial(patch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut origin = [0; 3];
    let mut size = [1; 3];
    for a in 0..3 {
        let n = s3[a];
        if n == 1 {
            continue;
        }
        let smin = ((lo * n as f64).ceil() as usize).max(1);
        let smax = ((hi * n as f64).floor() as usize).max(smin).min(n);
        size[a] = rng.random_range(smin..=smax);
        origin[a] = rng.random_range(0..=n - size[a]);
    }
    paint_box(patch, mode, origin, size, rng.random())
}

/// Rotates the last two axes by `k` quarter turns counterclockwise:
/// `out[i][j] = in[j][n-1-i]` per turn.
pub fn rotate_augment(patch: &Tensor<f32>, k: usize) -> Result<(Tensor<f32>, usize)> {
    let s = patch.shape();
    let r = s.len();
    if r < 2 || s[r - 1] != s[r - 2] {
        return Err(Error::shape(format!("rotation needs square in-plane extents, got {s:?}")));
    }
    let n = s[r - 1];
    let mut cur = patch.clone();
    for _ in 0..k % ROTATIONS {
        let src = cur.clone();
        for (p, plane) in cur.data_mut().chunks_mut(n * n).enumerate() {
            let base = &src.data()[p * n * n..(p + 1) * n * n];
            for i in 0..n {
                for j in 0..n {
                    plane[i * n + j] = base[j * n + n - 1 - i];
                }
            }
        }
    }
    Ok((cur, k % ROTATIONS))
}

/// Additive zero-mean Gaussian noise with standard deviation `std`.
pub fn noise_augment(patch: &Tensor<f32>, std: f64, seed: u64) -> Tensor<f32> {
    if std <= 0.0 {
        return patch.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut out = patch.clone();
    for v in out.data_mut() {
        *v += normal.sample(&mut rng) as f32;
    }
    out
}

/// Normalized-temperature cross-entropy over the `2N` views `[z_a; z_b]`.
/// Rows are L2-normalized; each view's positive is its counterpart, every
/// other view except itself is a negative; the mean is over all `2N`
/// anchors.
pub fn contrastive_loss_var<'t, T: Scalar>(z_a: Var<'t, T>, z_b: Var<'t, T>, tau: f64) -> Result<Var<'t, T>> {
    let (sa, sb) = (z_a.shape(), z_b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(Error::shape(format!("embeddings {sa:?} and {sb:?} must both be [N, e]")));
    }
    if !(tau > 0.0) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let n = sa[0];
    let m = 2 * n;
    let z = concat(&[z_a, z_b], 0)?.l2_normalize_rows()?;
    let sim = z.matmul(z.permute(&[1, 0])?)?.scale(T::c(1.0 / tau));
    let mask = Tensor::from_fn(&[m, m], |i| if i / m == i % m { T::c(-1e9) } else { T::zero() });
    let logp = sim.add_const(&mask)?.log_softmax(1)?;
    let pick = Tensor::from_fn(&[m, m], |i| {
        let (r, c) = (i / m, i % m);
        if c == (r + n) % m {
            T::one()
        } else {
            T::zero()
        }
    });
    Ok(logp.mul_const(&pick)?.sum().scale(T::c(-1.0 / m as f64)))
}

pub fn contrastive_loss(z_a: &Tensor<f64>, z_b: &Tensor<f64>, tau: f64) -> Result<f64> {
    let tape = Tape::inference();
    let l = contrastive_loss_var(tape.constant(z_a.clone()), tape.constant(z_b.clone()), tau)?;
    Ok(l.value().item())
}

/// Mean cosine similarity of positive pairs and of all negative pairs among
/// the `2N` views.
pub fn pair_similarity(z_a: &Tensor<f32>, z_b: &Tensor<f32>) -> Result<(f64, f64)> {
    if z_a.rank() != 2 || z_a.shape() != z_b.shape() {
        return Err(Error::shape("embeddings must both be [N, e]"));
    }
    let (n, e) = (z_a.shape()[0], z_a.shape()[1]);
    let rows: Vec<Vec<f64>> = z_a
        .data()
        .chunks(e)
        .chain(z_b.data().chunks(e))
        .map(|r| {
            let norm = r.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt().max(1e-12);
            r.iter().map(|&v| v as f64 / norm).collect()
        })
        .collect();
    let cos = |i: usize, j: usize| rows[i].iter().zip(&rows[j]).map(|(a, b)| a * b).sum::<f64>();
    let pos = (0..n).map(|i| cos(i, i + n)).sum::<f64>() / n as f64;
    let (mut neg, mut count) = (0.0, 0usize);
    for i in 0..2 * n {
        for j in i + 1..2 * n {
            if j != i + n {
                neg += cos(i, j);
                count += 1;
            }
        }
    }
    Ok((pos, if count > 0 { neg / count as f64 } else { 0.0 }))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslLossWeights {
    pub w_recon: f64,
    pub w_contrast_base: f64,
    pub w_rot: f64,
    pub tau: f64,
}

impl Default for SslLossWeights {
    fn default() -> Self {
        SslLossWeights { w_recon: 1.0, w_contrast_base: 0.05, w_rot: 0.05, tau: 0.5 }
    }
}

impl SslLossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_recon, self.w_contrast_base, self.w_rot];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) || !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("loss weights must be finite and nonnegative, temperature positive"));
        }
        Ok(())
    }

    /// Coefficient of the contrastive term for a given reconstruction loss.
    pub fn dynamic_weight(&self, recon: f64) -> f64 {
        self.w_contrast_base * (-recon).exp()
    }
}

/// `w_r·L_r + w_c·exp(−L_r)·L_c + w_rot·L_rot`. Nondecreasing in `L_r`
/// whenever `w_r ≥ w_c·L_c`.
pub fn ssl_total_loss(recon: f64, contrast: f64, rot: f64, w: &SslLossWeights) -> f64 {
    w.w_recon * recon + w.dynamic_weight(recon) * contrast + w.w_rot * rot
}

/// Differentiable total; the dynamic coefficient is evaluated from the
/// current reconstruction loss and held constant in the backward pass.
pub fn ssl_total_loss_var<'t, T: Scalar>(
    recon: Var<'t, T>,
    contrast: Var<'t, T>,
    rot: Var<'t, T>,
    w: &SslLossWeights,
) -> Result<(Var<'t, T>, f64)> {
    let dyn_w = w.dynamic_weight(recon.value().item().f64());
    let total = recon
        .scale(T::c(w.w_recon))
        .add(contrast.scale(T::c(dyn_w)))?
        .add(rot.scale(T::c(w.w_rot)))?;
    Ok((total, dyn_w))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslAugmentConfig {
    pub shuffle_prob: f64,
    pub shuffle_block: Vec<usize>,
    pub paint_prob: f64,
    /// Box side fractions for in-painting.
    pub paint_fraction: (f64, f64),
    /// Side fractions of the region kept by out-painting.
    pub outpaint_fraction: (f64, f64),
    pub noise_std: f64,
}

impl Default for SslAugmentConfig {
    fn default() -> Self {
        SslAugmentConfig {
            shuffle_prob: 0.5,
            shuffle_block: vec![4, 4],
            paint_prob: 0.5,
            paint_fraction: (0.2, 0.5),
            outpaint_fraction: (0.6, 0.9),
            noise_std: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SslConfig {
    pub model: ModelConfig,
    /// Spatial patch extents; sources are randomly cropped to this size.
    pub patch: Vec<usize>,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weights: SslLossWeights,
    pub embed_dim: usize,
    pub augment: SslAugmentConfig,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            model: ModelConfig::default(),
            patch: vec![16, 64, 64],
            batch_size: 4,
            steps: 1000,
            learning_rate: 1e-3,
            weights: SslLossWeights::default(),
            embed_dim: 128,
            augment: SslAugmentConfig { shuffle_block: vec![2, 4, 4], ..SslAugmentConfig::default() },
            seed: 0,
        }
    }
}

/// Backbone plus reconstruction, projection and rotation heads, all in one
/// store (heads under `ssl.`).
#[derive(Clone, Debug)]
pub struct SslNetwork {
    pub model: ModelConfig,
    pub embed_dim: usize,
    pub store: ParamStore<f32>,
}

impl SslNetwork {
    pub fn new(model: ModelConfig, embed_dim: usize, seed: u64) -> Result<Self> {
        let mut store = build_model::<f32>(model.clone(), seed)?.store;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5353_4c00);
        let deep = model.widths[STAGES - 1];
        let mut recon = vec![model.in_channels, model.widths[0]];
        recon.extend(vec![1; model.dims]);
        store.insert("ssl.recon.weight", he_normal(&recon, &mut rng));
        store.insert("ssl.recon.bias", Tensor::zeros(&[model.in_channels]));
        store.insert("ssl.proj1.weight", trunc_normal(&[deep, embed_dim], 0.02, &mut rng));
        store.insert("ssl.proj1.bias", Tensor::zeros(&[embed_dim]));
        store.insert("ssl.proj2.weight", trunc_normal(&[embed_dim, embed_dim], 0.02, &mut rng));
        store.insert("ssl.proj2.bias", Tensor::zeros(&[embed_dim]));
        store.insert("ssl.rot.weight", trunc_normal(&[deep, ROTATIONS], 0.02, &mut rng));
        store.insert("ssl.rot.bias", Tensor::zeros(&[ROTATIONS]));
        Ok(SslNetwork { model, embed_dim, store })
    }

    /// Reconstruction `[N, C_in, spatial]`, pooled bottleneck features
    /// `[N, width]`, embeddings `[N, e]` and rotation logits `[N, 4]`.
    pub fn heads<'t>(&self, ctx: &Ctx<'t, f32>, x: Var<'t, f32>) -> Result<SslHeads<'t>> {
        let feats = encode(&self.model, ctx, x)?;
        let deep = feats[STAGES - 1];
        let s = deep.shape();
        let pooled = deep.reshape(&[s[0], s[1], s[2..].iter().product()])?.mean_last()?;
        let dec = decode(&self.model, ctx, &feats)?;
        let k1 = vec![1; self.model.dims];
        let k0 = vec![0; self.model.dims];
        let recon = dec.conv(ctx.p("ssl.recon.weight")?, &k1, &k0)?.add_bias(ctx.p("ssl.recon.bias")?, 1)?;
        let embed = pooled
            .linear(ctx.p("ssl.proj1.weight")?, Some(ctx.p("ssl.proj1.bias")?))?
            .gelu()
            .linear(ctx.p("ssl.proj2.weight")?, Some(ctx.p("ssl.proj2.bias")?))?;
        let rot = pooled.linear(ctx.p("ssl.rot.weight")?, Some(ctx.p("ssl.rot.bias")?))?;
        Ok(SslHeads { recon, embed, rot })
    }

    /// Eval-mode embeddings of a batch.
    pub fn embed(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let tape = Tape::inference();
        let ctx = Ctx::new(&tape, &self.store, false);
        Ok((*self.heads(&ctx, tape.constant(x.clone()))?.embed.value()).clone())
    }

    pub fn checkpoint(&self, cfg: &SslConfig) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new("ssl");
        ck.set("model", &self.model)?;
        ck.set("ssl", cfg)?;
        ck.add_store(&self.store, "");
        Ok(ck)
    }
}

pub struct SslHeads<'t> {
    pub recon: Var<'t, f32>,
    pub embed: Var<'t, f32>,
    pub rot: Var<'t, f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct SslLogRow {
    pub step: usize,
    pub recon: f64,
    pub contrast: f64,
    pub rot: f64,
    pub total: f64,
    pub dynamic_weight: f64,
}

pub struct SslOutput {
    pub network: SslNetwork,
    pub checkpoint: Checkpoint,
    pub log: Vec<SslLogRow>,
}

/// Which augmentations a view receives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewPlan {
    pub shuffle: bool,
    pub paint: Option<PaintMode>,
}

/// Optional pixel shuffle, optional in/out painting, then Gaussian noise.
pub fn make_view_with(patch: &Tensor<f32>, cfg: &SslAugmentConfig, plan: ViewPlan, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = patch.clone();
    if plan.shuffle {
        v = pixel_shuffle_augment(&v, &cfg.shuffle_block, rng.random())?;
    }
    match plan.paint {
        Some(PaintMode::In) => v = paint_augment(&v, PaintMode::In, cfg.paint_fraction, rng.random())?,
        Some(PaintMode::Out) => v = paint_augment(&v, PaintMode::Out, cfg.outpaint_fraction, rng.random())?,
        None => {}
    }
    Ok(noise_augment(&v, cfg.noise_std, rng.random()))
}

/// A view whose augmentations are drawn independently with the configured
/// probabilities.
pub fn make_view(patch: &Tensor<f32>, cfg: &SslAugmentConfig, seed: u64) -> Result<Tensor<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shuffle = rng.random::<f64>() < cfg.shuffle_prob;
    let paint = (rng.random::<f64>() < cfg.paint_prob)
        .then(|| if rng.random::<bool>() { PaintMode::In } else { PaintMode::Out });
    make_view_with(patch, cfg, ViewPlan { shuffle, paint }, rng.random())
}

/// Augmentation plans for `n` views with stratified proportions: exactly
/// `round(p·n)` views get each augmentation (paint modes alternating),
/// assigned in random order.
pub fn stratified_plans(n: usize, cfg: &SslAugmentConfig, rng: &mut ChaCha8Rng) -> Vec<ViewPlan> {
    let count = |p: f64| ((p.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
    let mut shuffle: Vec<bool> = (0..n).map(|i| i < count(cfg.shuffle_prob)).collect();
    let painted = count(cfg.paint_prob);
    let mut paint: Vec<Option<PaintMode>> = (0..n)
        .map(|i| (i < painted).then_some(if i % 2 == 0 { PaintMode::In } else { PaintMode::Out }))
        .collect();
    shuffle.shuffle(rng);
    paint.shuffle(rng);
    shuffle.into_iter().zip(paint).map(|(shuffle, paint)| ViewPlan { shuffle, paint }).collect()
}

/// Rotation labels covering each class equally often (up to remainder), in
/// random order.
pub fn stratified_rotations(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let offset = rng.random_range(0..ROTATIONS);
    let mut ks: Vec<usize> = (0..n).map(|i| (i + offset) % ROTATIONS).collect();
    ks.shuffle(rng);
    ks
}

fn crop(src: &Tensor<f32>, patch: &[usize], rng: &mut ChaCha8Rng) -> Result<Tensor<f32>> {
    let sp = &src.shape()[1..];
    if sp == patch {
        return Ok(src.clone());
    }
    let labels = vec![0u16; sp.iter().product()];
    let (img, _) = crate::train::augment_sample(src, &labels, patch, &crate::train::AugmentConfig::off(), rng.random())?;
    Ok(img)
}

fn stack(parts: &[Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Tensor::new(shape, parts.iter().flat_map(|p| p.data().iter().copied()).collect())
}

/// Pretrains on unlabeled patches `[C, spatial...]`. Each step builds, for
/// `B` sources, views `a` and `b` plus a rotated copy of `a`; all `3B`
/// inputs share one forward. Reconstruction targets are the clean sources
/// (rotated alongside for the third group). Augmentation types and rotation
/// classes are stratified across the batch so that step-to-step loss
/// changes reflect learning rather than the augmentation mix.
pub fn ssl_pretrain(data: &[Tensor<f32>], cfg: &SslConfig) -> Result<SslOutput> {
    if data.is_empty() {
        return Err(Error::data("pretraining set is empty"));
    }
    cfg.weights.validate()?;
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::config("batch size and steps must be positive"));
    }
    let mut net = SslNetwork::new(cfg.model.clone(), cfg.embed_dim, cfg.seed)?;
    let adam = AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() };
    let mut state = AdamState::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.steps);
    let b = cfg.batch_size;
    for step in 0..cfg.steps {
        if step * b % data.len() < b {
            order.shuffle(&mut rng);
        }
        let mut sources = Vec::with_capacity(b);
        for i in 0..b {
            sources.push(crop(&data[order[(step * b + i) % data.len()]], &cfg.patch, &mut rng)?);
        }
        let plans = stratified_plans(2 * b, &cfg.augment, &mut rng);
        let mut inputs = Vec::with_capacity(3 * b);
        let mut targets = Vec::with_capacity(3 * b);
        for (j, plan) in plans.iter().enumerate() {
            let s = &sources[j % b];
            inputs.push(make_view_with(s, &cfg.augment, *plan, rng.random())?);
            targets.push(s.clone());
        }
        let rot_labels = stratified_rotations(b, &mut rng);
        for (i, &k) in rot_labels.iter().enumerate() {
            inputs.push(rotate_augment(&inputs[i], k)?.0);
            targets.push(rotate_augment(&sources[i], k)?.0);
        }
        let x = stack(&inputs)?;
        let y = stack(&targets)?;
        let (grads, row, updates) = {
            let tape = Tape::new();
            let ctx = Ctx::new(&tape, &net.store, true);
            let h = net.heads(&ctx, tape.constant(x))?;
            let recon = h.recon.sub(tape.constant(y))?.square().mean();
            let z = h.embed.value();
            let e = z.shape()[1];
            let za = h.embed.gather_rows(std::rc::Rc::new((0..b).collect()), &[b, e])?;
            let zb = h.embed.gather_rows(std::rc::Rc::new((b..2 * b).collect()), &[b, e])?;
            let contrast = contrastive_loss_var(za, zb, cfg.weights.tau)?;
            let rot_logits = h.rot.gather_rows(std::rc::Rc::new((2 * b..3 * b).collect()), &[b, ROTATIONS])?;
            let onehot = Tensor::from_fn(&[b, ROTATIONS], |i| if rot_labels[i / ROTATIONS] == i % ROTATIONS { 1.0 } else { 0.0 });
            let rot = rot_logits.log_softmax(1)?.mul_const(&onehot)?.sum().scale(-1.0 / b as f32);
            let (total, dyn_w) = ssl_total_loss_var(recon, contrast, rot, &cfg.weights)?;
            let row = SslLogRow {
                step,
                recon: recon.value().item() as f64,
                contrast: contrast.value().item() as f64,
                rot: rot.value().item() as f64,
                total: total.value().item() as f64,
                dynamic_weight: dyn_w,
            };
            if !row.total.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretraining loss at step {step}")));
            }
            let g = tape.backward(total)?;
            (collect_grads(&net.store, &g), row, ctx.take_bn_updates())
        };
        adam_step(&mut net.store, &grads, &mut state, &adam)?;
        apply_bn_updates(&mut net.store, updates)?;
        log::debug!("ssl step {step}: total {:.6}", row.total);
        log.push(row);
    }
    let checkpoint = net.checkpoint(cfg)?;
    Ok(SslOutput { network: net, checkpoint, log })
}

pub fn write_ssl_log(path: &Path, log: &[SslLogRow]) -> Result<()> {
    let mut text = String::from("step,recon,contrast,rot,total,dynamic_weight\n");
    for r in log {
        text.push_str(&format!("{},{},{},{},{},{}\n", r.step, r.recon, r.contrast, r.rot, r.total, r.dynamic_weight));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
