//! Supervised training: fused Dice + cross-entropy loss, Adam, sample
//! augmentation and the epoch loop.

mod adam;
mod augment;
mod loss;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment_sample, gaussian_blur, AugmentConfig};
pub use loss::{dice_ce_loss, dice_ce_value, LossParts, CE_FLOOR, DICE_SMOOTH};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward_var, Checkpoint, Model};
use crate::nn::{apply_bn_updates, collect_grads, Ctx};
use crate::tensor::{Tape, Tensor};

/// One training example: image `[C, spatial...]` and labels in the same
/// spatial voxel order.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub labels: Vec<u16>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, labels: Vec<u16>) -> Result<Self> {
        let vox: usize = image.shape()[1..].iter().product();
        if image.rank() < 3 || labels.len() != vox {
            return Err(Error::shape(format!("{} labels for image {:?}", labels.len(), image.shape())));
        }
        Ok(Sample { image, labels })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub patch: Vec<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    /// Optimizer steps per epoch; defaults to one pass over the data.
    pub steps_per_epoch: Option<usize>,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub pretrained_encoder: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch: vec![128, 128, 128],
            batch_size: 2,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 100,
            steps_per_epoch: None,
            augment: AugmentConfig::default(),
            seed: 0,
            pretrained_encoder: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, size_multiple: usize) -> Result<()> {
        if self.patch.iter().any(|&p| p == 0 || p % size_multiple != 0) {
            return Err(Error::config(format!("patch extents {:?} must be positive multiples of {size_multiple}", self.patch)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.steps_per_epoch == Some(0) {
            return Err(Error::config("batch size, epochs and steps per epoch must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.learning_rate, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub dice_component: f64,
    pub ce_component: f64,
}

pub struct TrainOutput {
    /// Weights after the last step.
    pub model: Model,
    /// Weights (and optimizer state) that produced the lowest epoch loss.
    pub best: Checkpoint,
    pub best_loss: f64,
    pub log: Vec<EpochLog>,
}

/// Stacks samples into `[B, C, spatial...]` and concatenated labels.
pub fn stack(samples: &[(Tensor<f32>, Vec<u16>)]) -> Result<(Tensor<f32>, Vec<u16>)> {
    let first = samples.first().ok_or_else(|| Error::data("empty batch"))?;
    let mut shape = vec![samples.len()];
    shape.extend_from_slice(first.0.shape());
    let mut data = Vec::with_capacity(shape.iter().product());
    let mut labels = Vec::new();
    for (img, lab) in samples {
        if img.shape() != first.0.shape() {
            return Err(Error::shape(format!("batch mixes {:?} and {:?}", first.0.shape(), img.shape())));
        }
        data.extend_from_slice(img.data());
        labels.extend_from_slice(lab);
    }
    Ok((Tensor::new(shape, data)?, labels))
}

/// Forward, loss, backward and one Adam update on a prepared batch.
pub fn train_step(model: &mut Model, state: &mut AdamState<f32>, adam: &AdamConfig, x: Tensor<f32>, labels: &[u16]) -> Result<LossParts> {
    let (grads, parts, updates) = {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, &model.store, true);
        let probs = forward_var(&model.config, &ctx, tape.constant(x))?;
        let (loss, parts) = dice_ce_loss(probs, labels)?;
        if !parts.total().is_finite() {
            return Err(Error::Numeric(format!("non-finite training loss {}", parts.total())));
        }
        let g = tape.backward(loss)?;
        (collect_grads(&model.store, &g), parts, ctx.take_bn_updates())
    };
    adam_step(&mut model.store, &grads, state, adam)?;
    apply_bn_updates(&mut model.store, updates)?;
    Ok(parts)
}

/// Copies `encoder.*` parameters from a pretraining checkpoint.
pub fn load_pretrained_encoder(model: &mut Model, path: &Path) -> Result<usize> {
    let ck = Checkpoint::load(path)?;
    let pre = ck.store::<f32>("");
    let n = model.store.load_prefix(&pre, "encoder.")?;
    log::info!("loaded {n} pretrained encoder tensors from {}", path.display());
    Ok(n)
}

/// Runs `epochs × steps_per_epoch` optimizer steps. Each batch draws
/// samples from a per-epoch shuffle and augments them with per-sample seeds
/// taken from the run's generator.
pub fn train_model(mut model: Model, data: &[Sample], cfg: &TrainConfig) -> Result<TrainOutput> {
    if data.is_empty() {
        return Err(Error::data("training set is empty"));
    }
    cfg.validate(model.config.size_multiple())?;
    if let Some(path) = &cfg.pretrained_encoder {
        load_pretrained_encoder(&mut model, path)?;
    }
    let adam = cfg.adam();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new();
    let steps = cfg.steps_per_epoch.unwrap_or(data.len().div_ceil(cfg.batch_size));
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let before = (model.store.clone(), state.clone());
        order.shuffle(&mut rng);
        let (mut sum, mut dsum, mut csum) = (0.0, 0.0, 0.0);
        for step in 0..steps {
            let batch: Vec<(Tensor<f32>, Vec<u16>)> = (0..cfg.batch_size)
                .map(|b| {
                    let s = &data[order[(step * cfg.batch_size + b) % data.len()]];
                    augment_sample(&s.image, &s.labels, &cfg.patch, &cfg.augment, rng.random())
                })
                .collect::<Result<_>>()?;
            let (x, labels) = stack(&batch)?;
            let parts = train_step(&mut model, &mut state, &adam, x, &labels)?;
            sum += parts.total();
            dsum += parts.dice;
            csum += parts.ce;
        }
        let entry = EpochLog {
            epoch,
            mean_loss: sum / steps as f64,
            dice_component: dsum / steps as f64,
            ce_component: csum / steps as f64,
        };
        log::info!("epoch {epoch}: loss {:.6} (dice {:.6}, ce {:.6})", entry.mean_loss, entry.dice_component, entry.ce_component);
        if best.as_ref().is_none_or(|(l, _)| entry.mean_loss < *l) {
            let snapshot = Model { config: model.config.clone(), store: before.0 };
            let mut ck = Checkpoint::from_model(&snapshot)?;
            before.1.write_to(&mut ck, &adam)?;
            ck.set("epoch", epoch)?;
            ck.set("train", cfg)?;
            best = Some((entry.mean_loss, ck));
        }
        log.push(entry);
    }
    let (best_loss, best) = best.expect("at least one epoch");
    Ok(TrainOutput { model, best, best_loss, log })
}

/// Two-class toy images: a random ellipse (label 1) brighter than a
/// graded background, plus uniform noise of amplitude 0.1.
pub fn synthetic_ellipses(count: usize, extent: &[usize], seed: u64) -> Result<Vec<Sample>> {
    if extent.len() != 2 && extent.len() != 3 {
        return Err(Error::config(format!("synthetic extent must have 2 or 3 axes, got {extent:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s3: Vec<usize> = if extent.len() == 2 { vec![1, extent[0], extent[1]] } else { extent.to_vec() };
    let vox: usize = s3.iter().product();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let center: Vec<f64> = s3.iter().map(|&n| n as f64 * rng.random_range(0.35..0.65)).collect();
        let radii: Vec<f64> = s3.iter().map(|&n| if n == 1 { f64::INFINITY } else { n as f64 * rng.random_range(0.15..0.3) }).collect();
        let mut labels = vec![0u16; vox];
        let mut image = vec![0f32; vox];
        for v in 0..vox {
            let p = [v / (s3[1] * s3[2]), (v / s3[2]) % s3[1], v % s3[2]];
            let r: f64 = (0..3).map(|a| ((p[a] as f64 + 0.5 - center[a]) / radii[a]).powi(2)).sum();
            labels[v] = u16::from(r <= 1.0);
            let ramp = 0.2 * p[2] as f64 / s3[2] as f64;
            image[v] = (0.2 + 0.6 * labels[v] as f64 + ramp + 0.1 * rng.random::<f64>()) as f32;
        }
        let mut shape = vec![1];
        shape.extend_from_slice(extent);
        out.push(Sample::new(Tensor::new(shape, image)?, labels)?);
    }
    Ok(out)
}

pub fn write_loss_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("epoch,mean_loss,dice_component,ce_component\n");
    for e in log {
        text.push_str(&format!("{},{},{},{}\n", e.epoch, e.mean_loss, e.dice_component, e.ce_component));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, ModelConfig};

    fn data() -> Vec<Sample> {
        (0..2)
            .map(|k| {
                let labels: Vec<u16> = (0..256).map(|i| u16::from((i % 16 + k) > 8)).collect();
                let image = Tensor::from_fn(&[1, 16, 16], |i| labels[i] as f32);
                Sample::new(image, labels).unwrap()
            })
            .collect()
    }

    fn cfg() -> TrainConfig {
        TrainConfig { patch: vec![16, 16], batch_size: 2, epochs: 3, augment: AugmentConfig::off(), ..TrainConfig::default() }
    }

    #[test]
    fn fixed_seed_is_bitwise_reproducible() {
        let mc = ModelConfig::mehtc(2, 1, 2, vec![2, 4, 8, 16, 32], 2, 1);
        let a = train_model(build_model(mc.clone(), 0).unwrap(), &data(), &cfg()).unwrap();
        let b = train_model(build_model(mc, 0).unwrap(), &data(), &cfg()).unwrap();
        assert_eq!(a.best.to_bytes().unwrap(), b.best.to_bytes().unwrap());
        assert_eq!(a.log, b.log);
    }

    #[test]
    fn rejects_bad_config() {
        let mc = ModelConfig::mehtc(2, 1, 2, vec![2, 4, 8, 16, 32], 2, 1);
        let bad = TrainConfig { patch: vec![12, 16], ..cfg() };
        assert!(train_model(build_model(mc.clone(), 0).unwrap(), &data(), &bad).is_err());
        assert!(train_model(build_model(mc, 0).unwrap(), &[], &cfg()).is_err());
    }
}
