//! Overlap and boundary-distance metrics and cohort reports.

mod report;

pub use report::{evaluate_study, five_number, mean_std, BoxStats, MetricsReport, Row, Summary, SummaryStat};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volio::LabelMap;

/// Which order statistic of the boundary distances to report.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum HdStatistic {
    /// Classic maximum.
    #[default]
    Max,
    /// 95th percentile of each directed distance set.
    P95,
}

impl HdStatistic {
    pub fn from_percentile(p: u32) -> Result<Self> {
        match p {
            100 => Ok(HdStatistic::Max),
            95 => Ok(HdStatistic::P95),
            _ => Err(Error::config(format!("Hausdorff percentile must be 100 or 95, got {p}"))),
        }
    }
}

/// `2|A∩B| / (|A|+|B|)` for class `cls`; 1 when both are empty.
pub fn dice_labels(pred: &[u16], gt: &[u16], cls: u16) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted vs {} reference voxels", pred.len(), gt.len())));
    }
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.iter().zip(gt) {
        a += usize::from(p == cls);
        b += usize::from(g == cls);
        both += usize::from(p == cls && g == cls);
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

pub fn dice(pred: &LabelMap, gt: &LabelMap, cls: u16) -> Result<f64> {
    check_geometry(pred, gt)?;
    dice_labels(&pred.data, &gt.data, cls)
}

fn check_geometry(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.geometry.matches(&b.geometry) {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "geometry mismatch: {:?} @ {:?} vs {:?} @ {:?}",
            a.geometry.dims, a.geometry.spacing, b.geometry.dims, b.geometry.spacing
        )))
    }
}

/// Foreground voxels with at least one face neighbour outside the mask.
/// Voxels on the grid edge count as boundary.
pub fn boundary(mask: &[bool], dims: [usize; 3]) -> Vec<bool> {
    let [ni, nj, nk] = dims;
    let mut out = vec![false; mask.len()];
    for k in 0..nk {
        for j in 0..nj {
            for i in 0..ni {
                let v = (k * nj + j) * ni + i;
                if !mask[v] {
                    continue;
                }
                let p = [i, j, k];
                out[v] = (0..3).any(|a| {
                    let stride = [1, ni, ni * nj][a];
                    p[a] == 0 || p[a] + 1 == dims[a] || !mask[v - stride] || !mask[v + stride]
                });
            }
        }
    }
    out
}

const FAR: f64 = 1e20;

/// Squared distance transform of one line with sample spacing² `w`.
fn edt_line(f: &[f64], w: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    v.push(0);
    z.push(f64::NEG_INFINITY);
    for q in 1..n {
        loop {
            let p = *v.last().expect("nonempty envelope");
            let s = ((f[q] + w * (q * q) as f64) - (f[p] + w * (p * p) as f64)) / (2.0 * w * (q - p) as f64);
            if s <= *z.last().expect("nonempty envelope") {
                v.pop();
                z.pop();
                if v.is_empty() {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = w * d * d + f[v[k]];
    }
}

/// Exact Euclidean distance (mm) from every voxel to the nearest `seed`
/// voxel, with per-axis spacing. Separable lower-envelope algorithm.
pub fn distance_transform(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let mut d: Vec<f64> = seed.iter().map(|&s| if s { 0.0 } else { FAR }).collect();
    let strides = [1, dims[0], dims[0] * dims[1]];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for a in 0..3 {
        let n = dims[a];
        if n == 0 {
            continue;
        }
        let mut f = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..d.len() {
            if (start / strides[a]) % n != 0 {
                continue;
            }
            for (t, fv) in f.iter_mut().enumerate() {
                *fv = d[start + t * strides[a]];
            }
            edt_line(&f, spacing[a] * spacing[a], &mut out, &mut v, &mut z);
            for (t, o) in out.iter().enumerate() {
                d[start + t * strides[a]] = o.min(FAR);
            }
        }
    }
    d.into_iter().map(f64::sqrt).collect()
}

/// Linear-interpolation percentile of an unsorted sample.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = p / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Symmetric boundary-to-boundary Hausdorff distance in mm on a grid with
/// extents `dims = [ni, nj, nk]` (first axis fastest).
pub fn hausdorff_labels(pred: &[u16], gt: &[u16], dims: [usize; 3], cls: u16, spacing: [f64; 3], stat: HdStatistic) -> Result<f64> {
    let n: usize = dims.iter().product();
    if pred.len() != n || gt.len() != n {
        return Err(Error::shape(format!("{} / {} labels for grid {dims:?}", pred.len(), gt.len())));
    }
    let a: Vec<bool> = pred.iter().map(|&l| l == cls).collect();
    let b: Vec<bool> = gt.iter().map(|&l| l == cls).collect();
    let empty = |m: &[bool]| !m.iter().any(|&x| x);
    if empty(&a) || empty(&b) {
        return Err(Error::UndefinedDistance(format!(
            "class {cls} is empty in the {}",
            if empty(&a) { "prediction" } else { "reference" }
        )));
    }
    let (ba, bb) = (boundary(&a, dims), boundary(&b, dims));
    let (da, db) = (distance_transform(&ba, dims, spacing), distance_transform(&bb, dims, spacing));
    let mut ab: Vec<f64> = (0..n).filter(|&v| ba[v]).map(|v| db[v]).collect();
    let mut ba_d: Vec<f64> = (0..n).filter(|&v| bb[v]).map(|v| da[v]).collect();
    Ok(match stat {
        HdStatistic::Max => ab.iter().chain(&ba_d).copied().fold(0.0, f64::max),
        HdStatistic::P95 => percentile(&mut ab, 95.0).max(percentile(&mut ba_d, 95.0)),
    })
}

pub fn hausdorff(pred: &LabelMap, gt: &LabelMap, cls: u16, stat: HdStatistic) -> Result<f64> {
    check_geometry(pred, gt)?;
    hausdorff_labels(&pred.data, &gt.data, pred.geometry.dims, cls, gt.geometry.spacing, stat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_examples() {
        let a = [1, 1, 1, 1, 0, 0, 0, 0];
        let b = [0, 0, 1, 1, 1, 1, 0, 0];
        assert_eq!(dice_labels(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice_labels(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice_labels(&a, &[0; 8], 1).unwrap(), 0.0);
        assert_eq!(dice_labels(&[0; 8], &[0; 8], 1).unwrap(), 1.0);
    }

    #[test]
    fn single_voxels_three_apart() {
        let mut a = vec![0u16; 10];
        let mut b = vec![0u16; 10];
        a[2] = 1;
        b[5] = 1;
        let d = hausdorff_labels(&a, &b, [10, 1, 1], 1, [1.0; 3], HdStatistic::Max).unwrap();
        assert_eq!(d, 3.0);
        assert_eq!(hausdorff_labels(&a, &a, [10, 1, 1], 1, [1.0; 3], HdStatistic::Max).unwrap(), 0.0);
        assert!(matches!(
            hausdorff_labels(&a, &[0; 10], [10, 1, 1], 1, [1.0; 3], HdStatistic::Max),
            Err(Error::UndefinedDistance(_))
        ));
    }

    #[test]
    fn transform_matches_brute_force() {
        let dims = [5, 4, 3];
        let sp = [0.5, 1.3, 2.0];
        let seed: Vec<bool> = (0..60).map(|i| i % 17 == 3).collect();
        let d = distance_transform(&seed, dims, sp);
        for v in 0..60 {
            let p = [v % 5, (v / 5) % 4, v / 20];
            let best = (0..60)
                .filter(|&s| seed[s])
                .map(|s| {
                    let q = [s % 5, (s / 5) % 4, s / 20];
                    (0..3).map(|a| ((p[a] as f64 - q[a] as f64) * sp[a]).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            assert!((d[v] - best).abs() < 1e-9, "{v}: {} vs {best}", d[v]);
        }
    }

    #[test]
    fn percentile_interpolates() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&mut v, 50.0), 2.5);
        assert_eq!(percentile(&mut v, 100.0), 4.0);
    }
}
