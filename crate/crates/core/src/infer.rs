//! Sliding-window whole-volume prediction and connected-component
//! postprocessing.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;
use crate::volio::LabelMap;

/// Anything that maps a `[1, C_in, patch...]` batch to class probabilities
/// `[1, C, patch...]`.
pub trait Predictor {
    fn num_classes(&self) -> usize;
    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>>;
}

impl Predictor for Model<f32> {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.forward(patch)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub patch: Vec<usize>,
    /// Stride as a fraction of the patch extent.
    pub step: f64,
    /// Classes reduced to their largest connected component.
    pub postprocess: Vec<u16>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { patch: vec![128, 128, 128], step: 0.5, postprocess: Vec::new() }
    }
}

/// Patch origins along one axis: multiples of `floor(step·patch)` with the
/// last origin clamped so the final patch ends at the boundary.
pub fn window_origins(extent: usize, patch: usize, step: f64) -> Result<Vec<usize>> {
    if !(step > 0.0 && step <= 1.0) || patch == 0 {
        return Err(Error::config(format!("step fraction must be in (0, 1] and patch positive, got {step}, {patch}")));
    }
    if extent <= patch {
        return Ok(vec![0]);
    }
    let stride = ((step * patch as f64).floor() as usize).max(1);
    let mut out: Vec<usize> = (0..).map(|k| k * stride).take_while(|&o| o + patch < extent).collect();
    out.push(extent - patch);
    out.dedup();
    Ok(out)
}

fn lift(sp: &[usize]) -> Result<[usize; 3]> {
    match sp.len() {
        2 => Ok([1, sp[0], sp[1]]),
        3 => Ok([sp[0], sp[1], sp[2]]),
        _ => Err(Error::shape(format!("expected 2 or 3 spatial axes, got {sp:?}"))),
    }
}

/// Copies a box of a `[C, D, H, W]` grid (out-of-range voxels read as zero).
fn extract(src: &[f32], c: usize, s3: [usize; 3], origin: [isize; 3], size: [usize; 3]) -> Vec<f32> {
    let sv: usize = s3.iter().product();
    let mut out = vec![0f32; c * size.iter().product::<usize>()];
    let mut k = 0;
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                for x in 0..size[2] {
                    let p = [origin[0] + z as isize, origin[1] + y as isize, origin[2] + x as isize];
                    if (0..3).all(|a| p[a] >= 0 && (p[a] as usize) < s3[a]) {
                        out[k] = src[ch * sv + (p[0] as usize * s3[1] + p[1] as usize) * s3[2] + p[2] as usize];
                    }
                    k += 1;
                }
            }
        }
    }
    out
}

/// Tiles `volume` `[C_in, spatial...]` with overlapping patches and
/// averages the predicted probabilities by per-voxel coverage. Volumes
/// smaller than the patch along an axis are zero-padded symmetrically and
/// the padding is stripped from the result.
pub fn sliding_window_predict<P: Predictor + ?Sized>(model: &P, volume: &Tensor<f32>, cfg: &InferenceConfig) -> Result<Tensor<f32>> {
    let sp = &volume.shape()[1..];
    if cfg.patch.len() != sp.len() {
        return Err(Error::config(format!("patch {:?} for volume {:?}", cfg.patch, volume.shape())));
    }
    let c_in = volume.shape()[0];
    let s3 = lift(sp)?;
    let p3 = lift(&cfg.patch)?;
    let pad_low: Vec<usize> = (0..3).map(|a| p3[a].saturating_sub(s3[a]) / 2).collect();
    let work: Vec<usize> = (0..3).map(|a| s3[a].max(p3[a])).collect();
    let origins: Vec<Vec<usize>> = (0..3).map(|a| window_origins(work[a], p3[a], cfg.step)).collect::<Result<_>>()?;
    let classes = model.num_classes();
    let wv: usize = work.iter().product();
    let pv: usize = p3.iter().product();
    let mut acc = vec![0f64; classes * wv];
    let mut count = vec![0u32; wv];
    let mut batch_shape = vec![1, c_in];
    batch_shape.extend_from_slice(&cfg.patch);
    for &oz in &origins[0] {
        for &oy in &origins[1] {
            for &ox in &origins[2] {
                let src_origin = [oz as isize - pad_low[0] as isize, oy as isize - pad_low[1] as isize, ox as isize - pad_low[2] as isize];
                let patch = Tensor::new(batch_shape.clone(), extract(volume.data(), c_in, s3, src_origin, p3))?;
                let probs = model.predict(&patch)?;
                if probs.len() != classes * pv {
                    return Err(Error::shape(format!("predictor returned {:?} for patch {:?}", probs.shape(), cfg.patch)));
                }
                for z in 0..p3[0] {
                    for y in 0..p3[1] {
                        for x in 0..p3[2] {
                            let w = ((oz + z) * work[1] + oy + y) * work[2] + ox + x;
                            let l = (z * p3[1] + y) * p3[2] + x;
                            count[w] += 1;
                            for k in 0..classes {
                                acc[k * wv + w] += probs.data()[k * pv + l] as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    let sv: usize = s3.iter().product();
    let mut out = vec![0f32; classes * sv];
    for k in 0..classes {
        for z in 0..s3[0] {
            for y in 0..s3[1] {
                for x in 0..s3[2] {
                    let w = ((z + pad_low[0]) * work[1] + y + pad_low[1]) * work[2] + x + pad_low[2];
                    out[k * sv + (z * s3[1] + y) * s3[2] + x] = (acc[k * wv + w] / count[w] as f64) as f32;
                }
            }
        }
    }
    let mut shape = vec![classes];
    shape.extend_from_slice(sp);
    Tensor::new(shape, out)
}

/// Per-voxel argmax over the leading class axis; ties go to the lower class.
pub fn argmax_labels(probs: &Tensor<f32>) -> Result<Vec<u16>> {
    if probs.rank() < 2 {
        return Err(Error::shape(format!("expected [C, spatial...], got {:?}", probs.shape())));
    }
    let c = probs.shape()[0];
    let v = probs.len() / c;
    Ok((0..v)
        .map(|i| {
            let mut best = 0;
            for k in 1..c {
                if probs.data()[k * v + i] > probs.data()[best * v + i] {
                    best = k;
                }
            }
            best as u16
        })
        .collect())
}

/// Component ids (0 = not in mask, 1.. in discovery order) under full
/// 26-neighbourhood connectivity, which is 8-connectivity when `D = 1`.
pub fn connected_components(mask: &[bool], shape: [usize; 3]) -> (Vec<u32>, Vec<usize>) {
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        let mut size = 0;
        ids[start] = id;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let p = [i / (shape[1] * shape[2]), (i / shape[2]) % shape[1], i % shape[2]];
            for dz in -1isize..=1 {
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let q = [p[0] as isize + dz, p[1] as isize + dy, p[2] as isize + dx];
                        if (0..3).any(|a| q[a] < 0 || q[a] as usize >= shape[a]) {
                            continue;
                        }
                        let j = (q[0] as usize * shape[1] + q[1] as usize) * shape[2] + q[2] as usize;
                        if mask[j] && ids[j] == 0 {
                            ids[j] = id;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
        sizes.push(size);
    }
    (ids, sizes)
}

/// Reassigns voxels of `cls` outside its largest component to background.
/// Equal-size ties keep the component found first in raster order.
pub fn largest_component(labels: &[u16], shape: [usize; 3], cls: u16) -> Result<Vec<u16>> {
    if labels.len() != shape.iter().product::<usize>() {
        return Err(Error::shape(format!("{} labels for grid {shape:?}", labels.len())));
    }
    let mask: Vec<bool> = labels.iter().map(|&l| l == cls).collect();
    let (ids, sizes) = connected_components(&mask, shape);
    let Some(keep) = sizes.iter().enumerate().fold(None, |best: Option<(usize, usize)>, (i, &s)| match best {
        Some((_, bs)) if bs >= s => best,
        _ => Some((i, s)),
    }) else {
        return Ok(labels.to_vec());
    };
    let keep = keep.0 as u32 + 1;
    Ok(labels.iter().zip(&ids).map(|(&l, &id)| if l == cls && id != keep { 0 } else { l }).collect())
}

/// [`largest_component`] applied to each listed class of a label map.
pub fn postprocess(m: &LabelMap, classes: &[u16]) -> Result<LabelMap> {
    let shape = m.geometry.grid_shape();
    let mut data = m.data.clone();
    for &c in classes {
        data = largest_component(&data, shape, c)?;
    }
    Ok(LabelMap { geometry: m.geometry.clone(), data, schema: m.schema.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Constant(Vec<f32>);

    impl Predictor for Constant {
        fn num_classes(&self) -> usize {
            self.0.len()
        }

        fn predict(&self, patch: &Tensor<f32>) -> Result<Tensor<f32>> {
            let v: usize = patch.shape()[2..].iter().product();
            let mut shape = vec![1, self.0.len()];
            shape.extend_from_slice(&patch.shape()[2..]);
            Tensor::new(shape, self.0.iter().flat_map(|&p| std::iter::repeat_n(p, v)).collect())
        }
    }

    #[test]
    fn origins_match_enumeration() {
        assert_eq!(window_origins(256, 128, 0.5).unwrap(), vec![0, 64, 128]);
        assert_eq!(window_origins(128, 128, 0.5).unwrap(), vec![0]);
        assert_eq!(window_origins(100, 128, 0.5).unwrap(), vec![0]);
        assert_eq!(window_origins(200, 128, 0.5).unwrap(), vec![0, 64, 72]);
        assert!(window_origins(200, 128, 0.0).is_err());
    }

    #[test]
    fn constant_model_is_fixed_point() {
        let m = Constant(vec![0.25, 0.75]);
        let vol = Tensor::from_fn(&[1, 20, 36], |i| i as f32);
        let cfg = InferenceConfig { patch: vec![16, 16], step: 0.5, postprocess: vec![] };
        let out = sliding_window_predict(&m, &vol, &cfg).unwrap();
        assert_eq!(out.shape(), &[2, 20, 36]);
        assert!(out.data()[..720].iter().all(|&v| v == 0.25));
        assert!(out.data()[720..].iter().all(|&v| v == 0.75));
        let small = Tensor::zeros(&[1, 10, 12]);
        assert_eq!(sliding_window_predict(&m, &small, &cfg).unwrap().shape(), &[2, 10, 12]);
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let p = Tensor::new(vec![2, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(argmax_labels(&p).unwrap(), vec![0, 1]);
    }

    #[test]
    fn smaller_component_is_removed() {
        // row of 5 and a separate row of 3 on a 1×5×7 grid
        let mut l = vec![0u16; 35];
        for x in 0..5 {
            l[x] = 2;
        }
        for x in 0..3 {
            l[28 + x] = 2;
        }
        l[20] = 1;
        let out = largest_component(&l, [1, 5, 7], 2).unwrap();
        assert_eq!(out.iter().filter(|&&v| v == 2).count(), 5);
        assert_eq!(out[20], 1);
        assert_eq!(largest_component(&out, [1, 5, 7], 2).unwrap(), out);
        assert_eq!(largest_component(&l, [1, 5, 7], 3).unwrap(), l);
    }

    #[test]
    fn diagonal_neighbours_connect() {
        let mut m = vec![false; 9];
        m[0] = true;
        m[4] = true;
        m[8] = true;
        let (_, sizes) = connected_components(&m, [1, 3, 3]);
        assert_eq!(sizes, vec![3]);
    }
}
