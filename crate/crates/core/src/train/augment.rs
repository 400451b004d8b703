use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Augmentation toggles and ranges. Intensity magnitudes are fractions of
/// the sample's intensity range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub noise: bool,
    pub smooth: bool,
    pub shift: bool,
    pub contrast: bool,
    pub zoom: bool,
    /// Probability of applying each enabled transform.
    pub prob: f64,
    pub noise_std: f64,
    pub smooth_sigma: [f64; 2],
    pub shift_range: f64,
    pub contrast_gamma: [f64; 2],
    pub zoom_range: [f64; 2],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            noise: true,
            smooth: true,
            shift: true,
            contrast: true,
            zoom: true,
            prob: 0.5,
            noise_std: 0.1,
            smooth_sigma: [0.5, 1.0],
            shift_range: 0.1,
            contrast_gamma: [0.7, 1.5],
            zoom_range: [0.9, 1.1],
        }
    }
}

impl AugmentConfig {
    pub fn off() -> Self {
        AugmentConfig { noise: false, smooth: false, shift: false, contrast: false, zoom: false, ..Self::default() }
    }
}

fn lift(sp: &[usize]) -> Result<[usize; 3]> {
    match sp.len() {
        2 => Ok([1, sp[0], sp[1]]),
        3 => Ok([sp[0], sp[1], sp[2]]),
        _ => Err(Error::shape(format!("expected 2 or 3 spatial axes, got {sp:?}"))),
    }
}

/// Crop origin per axis, uniform over valid positions.
fn crop(image: &Tensor<f32>, labels: &[u16], patch: &[usize], rng: &mut ChaCha8Rng) -> Result<(Tensor<f32>, Vec<u16>)> {
    let sp = &image.shape()[1..];
    if patch.len() != sp.len() {
        return Err(Error::config(format!("patch {patch:?} for sample with spatial extents {sp:?}")));
    }
    if patch.iter().zip(sp).any(|(p, s)| p > s) {
        return Err(Error::data(format!("patch {patch:?} larger than sample {sp:?}")));
    }
    let (s3, p3) = (lift(sp)?, lift(patch)?);
    let origin: Vec<usize> = (0..3).map(|a| rng.random_range(0..=s3[a] - p3[a])).collect();
    let c = image.shape()[0];
    let (sv, pv) = (s3.iter().product::<usize>(), p3.iter().product::<usize>());
    let mut img = Vec::with_capacity(c * pv);
    let mut lab = Vec::with_capacity(pv);
    for ch in 0..c {
        for z in 0..p3[0] {
            for y in 0..p3[1] {
                let row = ((origin[0] + z) * s3[1] + origin[1] + y) * s3[2] + origin[2];
                img.extend_from_slice(&image.data()[ch * sv + row..ch * sv + row + p3[2]]);
                if ch == 0 {
                    lab.extend_from_slice(&labels[row..row + p3[2]]);
                }
            }
        }
    }
    let mut shape = vec![c];
    shape.extend_from_slice(patch);
    Ok((Tensor::new(shape, img)?, lab))
}

fn range_of(x: &[f32]) -> (f32, f32) {
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    (lo, hi - lo)
}

/// Separable Gaussian blur with edge clamping on every spatial axis longer
/// than one voxel.
pub fn gaussian_blur(data: &mut [f32], s3: [usize; 3], sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let r = (3.0 * sigma).ceil() as isize;
    let w: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = w.iter().sum();
    let strides = [s3[1] * s3[2], s3[2], 1];
    let planes = data.len() / s3.iter().product::<usize>();
    let vol: usize = s3.iter().product();
    for a in 0..3 {
        let n = s3[a];
        if n == 1 {
            continue;
        }
        let st = strides[a];
        let mut line = vec![0f32; n];
        for p in 0..planes {
            let base = p * vol;
            for start in 0..vol {
                if (start / st) % n != 0 {
                    continue;
                }
                for (i, l) in line.iter_mut().enumerate() {
                    *l = data[base + start + i * st];
                }
                for i in 0..n {
                    let mut acc = 0.0;
                    for (k, &wk) in w.iter().enumerate() {
                        let j = (i as isize + k as isize - r).clamp(0, n as isize - 1) as usize;
                        acc += wk * line[j] as f64;
                    }
                    data[base + start + i * st] = (acc / norm) as f32;
                }
            }
        }
    }
}

/// Rescales about the patch center keeping the extents: linear
/// interpolation for the image, nearest neighbour for labels.
fn zoom(image: &mut Tensor<f32>, labels: &mut [u16], factor: f64) -> Result<()> {
    let s3 = lift(&image.shape()[1..])?;
    let vol: usize = s3.iter().product();
    let src = |a: usize, i: usize| -> f64 {
        let c = s3[a] as f64 / 2.0;
        ((i as f64 + 0.5 - c) / factor + c - 0.5).clamp(0.0, (s3[a] - 1) as f64)
    };
    let coords: Vec<Vec<f64>> = (0..3).map(|a| (0..s3[a]).map(|i| src(a, i)).collect()).collect();
    let old_labels = labels.to_vec();
    for (o, l) in labels.iter_mut().enumerate() {
        let (z, y, x) = (o / (s3[1] * s3[2]), (o / s3[2]) % s3[1], o % s3[2]);
        let (zi, yi, xi) = (coords[0][z].round() as usize, coords[1][y].round() as usize, coords[2][x].round() as usize);
        *l = old_labels[(zi * s3[1] + yi) * s3[2] + xi];
    }
    let channels = image.shape()[0];
    let old = image.data().to_vec();
    let out = image.data_mut();
    for ch in 0..channels {
        let plane = &old[ch * vol..(ch + 1) * vol];
        for o in 0..vol {
            let idx = [o / (s3[1] * s3[2]), (o / s3[2]) % s3[1], o % s3[2]];
            let mut lo = [0usize; 3];
            let mut fr = [0f64; 3];
            for a in 0..3 {
                let c = coords[a][idx[a]];
                lo[a] = c.floor() as usize;
                fr[a] = c - lo[a] as f64;
            }
            let mut acc = 0.0;
            for corner in 0..8 {
                let mut w = 1.0;
                let mut off = 0;
                for a in 0..3 {
                    let bit = (corner >> (2 - a)) & 1;
                    let i = (lo[a] + bit).min(s3[a] - 1);
                    w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
                    off = off * s3[a] + i;
                }
                if w > 0.0 {
                    acc += w * plane[off] as f64;
                }
            }
            out[ch * vol + o] = acc as f32;
        }
    }
    Ok(())
}

/// Random crop to `patch`, then (each with probability `cfg.prob`) noise,
/// smoothing, intensity shift, contrast and zoom. `image` is
/// `[C, spatial...]`; `labels` follow the spatial voxel order.
pub fn augment_sample(
    image: &Tensor<f32>,
    labels: &[u16],
    patch: &[usize],
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<(Tensor<f32>, Vec<u16>)> {
    let vox: usize = image.shape()[1..].iter().product();
    if labels.len() != vox {
        return Err(Error::shape(format!("{} labels for {vox} voxels", labels.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut img, mut lab) = crop(image, labels, patch, &mut rng)?;
    let s3 = lift(patch)?;
    let (_, range) = range_of(img.data());
    let fire = |on: bool, rng: &mut ChaCha8Rng| on && rng.random::<f64>() < cfg.prob;
    if fire(cfg.noise, &mut rng) {
        let sigma = rng.random_range(0.0..=cfg.noise_std) * range as f64;
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).expect("positive std");
            for v in img.data_mut() {
                *v += normal.sample(&mut rng) as f32;
            }
        }
    }
    if fire(cfg.smooth, &mut rng) {
        let sigma = rng.random_range(cfg.smooth_sigma[0]..=cfg.smooth_sigma[1]);
        gaussian_blur(img.data_mut(), s3, sigma);
    }
    if fire(cfg.shift, &mut rng) {
        let off = (rng.random_range(-cfg.shift_range..=cfg.shift_range) * range as f64) as f32;
        for v in img.data_mut() {
            *v += off;
        }
    }
    if fire(cfg.contrast, &mut rng) {
        let gamma = rng.random_range(cfg.contrast_gamma[0]..=cfg.contrast_gamma[1]);
        let (lo2, r2) = range_of(img.data());
        if r2 > 0.0 {
            for v in img.data_mut() {
                *v = (((*v - lo2) / r2) as f64).powf(gamma) as f32 * r2 + lo2;
            }
        }
    }
    if fire(cfg.zoom, &mut rng) {
        let f = rng.random_range(cfg.zoom_range[0]..=cfg.zoom_range[1]);
        zoom(&mut img, &mut lab, f)?;
    }
    Ok((img, lab))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Tensor<f32>, Vec<u16>) {
        let img = Tensor::from_fn(&[1, 12, 10], |i| i as f32);
        let lab = (0..120).map(|i| ((i / 10 + i % 10) % 3) as u16).collect();
        (img, lab)
    }

    #[test]
    fn toggles_off_is_aligned_crop() {
        let (img, lab) = sample();
        let (a, la) = augment_sample(&img, &lab, &[8, 8], &AugmentConfig::off(), 5).unwrap();
        let first = a.data()[0] as usize;
        let (y0, x0) = (first / 10, first % 10);
        for y in 0..8 {
            for x in 0..8 {
                let src = (y0 + y) * 10 + x0 + x;
                assert_eq!(a.data()[y * 8 + x], src as f32);
                assert_eq!(la[y * 8 + x], lab[src]);
            }
        }
    }

    #[test]
    fn deterministic_and_label_subset() {
        let (img, lab) = sample();
        let cfg = AugmentConfig { prob: 1.0, ..AugmentConfig::default() };
        let a = augment_sample(&img, &lab, &[8, 8], &cfg, 9).unwrap();
        let b = augment_sample(&img, &lab, &[8, 8], &cfg, 9).unwrap();
        assert_eq!(a, b);
        assert!(a.1.iter().all(|&l| l < 3));
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let (img, lab) = sample();
        assert!(augment_sample(&img, &lab, &[16, 8], &AugmentConfig::off(), 0).is_err());
    }
}
