//! Whole-heart label completion from sparse slices.
//!
//! Dense nine-label hearts are sliced along short- and long-axis planes
//! (with optional position and breath-hold errors), rasterized into a
//! seven-label sparse grid, and a completion U-Net learns to map the sparse
//! grid back to the dense one.
//!
//! All positions are in millimetres inside a cubic box whose corner sits at
//! the world origin; voxel `i` of an `n`-voxel grid has its centre at
//! `(i + 0.5) · box / n`.

use std::path::Path;

use nalgebra::{Matrix3, Rotation3, SymmetricEigen, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infer::{argmax_labels, largest_component};
use crate::metrics::{distance_transform, dice_labels};
use crate::model::{build_model, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::train::{train_model, AugmentConfig, Sample, TrainConfig, TrainOutput};
use crate::volio::{Geometry, LabelMap, LabelSchema, SchemaView};

/// Sparse input classes: background plus the six chambers and walls.
pub const SPARSE_CLASSES: usize = 7;
/// Dense output classes, adding the two great vessels.
pub const DENSE_CLASSES: usize = 9;

/// Cubic grid covering the reconstruction box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReconGrid {
    pub size: usize,
    pub box_mm: f64,
}

impl Default for ReconGrid {
    fn default() -> Self {
        ReconGrid { size: 160, box_mm: 160.0 }
    }
}

impl ReconGrid {
    pub fn spacing(&self) -> f64 {
        self.box_mm / self.size as f64
    }

    pub fn geometry(&self) -> Geometry {
        let s = self.spacing();
        let mut g = Geometry::new([self.size; 3], [s; 3]);
        g.origin = [s / 2.0; 3];
        g
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !(self.box_mm > 0.0) {
            return Err(Error::config(format!("grid size {} and box {} mm must be positive", self.size, self.box_mm)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceView {
    Sax(usize),
    Lax2ch,
    Lax4ch,
}

/// A square slab of tissue sampled by one acquisition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlicePlane {
    pub origin: [f64; 3],
    pub normal: [f64; 3],
    pub axis_u: [f64; 3],
    pub axis_v: [f64; 3],
    /// In-plane side length (mm).
    pub extent: f64,
    pub thickness: f64,
    pub view: SliceView,
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

impl SlicePlane {
    /// Plane through `origin` with the given normal; in-plane axes are
    /// chosen orthonormal to it.
    pub fn new(origin: [f64; 3], normal: [f64; 3], extent: f64, thickness: f64, view: SliceView) -> Result<Self> {
        let n = v3(normal);
        if !(n.norm() > 1e-12) {
            return Err(Error::data("slice normal has zero length"));
        }
        let n = n.normalize();
        let seed = if n.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
        let u = (seed - n * n.dot(&seed)).normalize();
        let v = n.cross(&u);
        let p = SlicePlane { origin, normal: arr(n), axis_u: arr(u), axis_v: arr(v), extent, thickness, view };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, u, v) = (v3(self.normal), v3(self.axis_u), v3(self.axis_v));
        let ok = [n.norm() - 1.0, u.norm() - 1.0, v.norm() - 1.0, n.dot(&u), n.dot(&v), u.dot(&v)].iter().all(|e| e.abs() <= 1e-6);
        if !ok {
            return Err(Error::data(format!("slice plane axes are not orthonormal: {self:?}")));
        }
        if !(self.thickness > 0.0) || !(self.extent > 0.0) {
            return Err(Error::data("slice thickness and extent must be positive"));
        }
        Ok(())
    }

    /// Whether a world point lies inside the slab.
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let d = v3(p) - v3(self.origin);
        d.dot(&v3(self.normal)).abs() <= self.thickness / 2.0
            && d.dot(&v3(self.axis_u)).abs() <= self.extent / 2.0
            && d.dot(&v3(self.axis_v)).abs() <= self.extent / 2.0
    }
}

/// Acquisition errors: through-plane position error and in-plane
/// breath-hold shift, both Gaussian in mm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ErrorModel {
    pub sigma_position: f64,
    pub sigma_breathhold: f64,
    pub seed: u64,
}

impl Default for ErrorModel {
    fn default() -> Self {
        ErrorModel { sigma_position: 2.0, sigma_breathhold: 2.0, seed: 0 }
    }
}

impl ErrorModel {
    pub fn none() -> Self {
        ErrorModel { sigma_position: 0.0, sigma_breathhold: 0.0, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_position >= 0.0) || !(self.sigma_breathhold >= 0.0) {
            return Err(Error::config("error model standard deviations must be non-negative"));
        }
        Ok(())
    }
}

/// Shifts the plane origin along its normal and in-plane axes. The draw
/// depends only on the error-model seed and the slice index.
pub fn simulate_misalignment(plane: &SlicePlane, em: &ErrorModel, index: usize) -> Result<SlicePlane> {
    em.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(em.seed);
    rng.set_stream(index as u64);
    let pos = Normal::new(0.0, em.sigma_position).expect("validated sigma");
    let bh = Normal::new(0.0, em.sigma_breathhold).expect("validated sigma");
    let (dn, du, dv) = (pos.sample(&mut rng), bh.sample(&mut rng), bh.sample(&mut rng));
    let mut out = plane.clone();
    if dn != 0.0 || du != 0.0 || dv != 0.0 {
        out.origin = arr(v3(plane.origin) + v3(plane.normal) * dn + v3(plane.axis_u) * du + v3(plane.axis_v) * dv);
    }
    Ok(out)
}

fn check_dense(dense: &LabelMap) -> Result<()> {
    if dense.schema.view != SchemaView::Completion9 {
        return Err(Error::data(format!("dense map must use COMPLETION9, got {}", dense.schema.name())));
    }
    Ok(())
}

/// Copies dense labels at voxels whose centres fall inside any
/// (misaligned) slab. Great-vessel labels become background.
pub fn rasterize_slices(dense: &LabelMap, planes: &[SlicePlane], em: &ErrorModel) -> Result<LabelMap> {
    check_dense(dense)?;
    let g = &dense.geometry;
    let [ni, nj, nk] = g.dims;
    let mut data = vec![0u16; dense.data.len()];
    for (index, plane) in planes.iter().enumerate() {
        plane.validate()?;
        let p = simulate_misalignment(plane, em, index)?;
        let mut hit = 0usize;
        for k in 0..nk {
            for j in 0..nj {
                for i in 0..ni {
                    if p.contains(g.world([i as f64, j as f64, k as f64])) {
                        let v = (k * nj + j) * ni + i;
                        let l = dense.data[v];
                        data[v] = if l as usize >= SPARSE_CLASSES { 0 } else { l };
                        hit += 1;
                    }
                }
            }
        }
        if hit == 0 {
            log::warn!("slice {index} ({:?}) lies outside the grid", plane.view);
        }
    }
    LabelMap::new(g.clone(), data, LabelSchema::get(SchemaView::Completion7))
}

/// Local heart frame: x towards the left ventricle, z from apex to base.
struct Pose {
    center: Vector3<f64>,
    rot: Rotation3<f64>,
}

impl Pose {
    fn local(&self, p: [f64; 3]) -> Vector3<f64> {
        self.rot.inverse() * (v3(p) - self.center)
    }
}

fn in_ellipsoid(p: &Vector3<f64>, c: [f64; 3], r: [f64; 3]) -> bool {
    (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
}

fn in_tube(p: &Vector3<f64>, start: [f64; 3], dir: [f64; 3], length: f64, radius: f64) -> bool {
    let d = v3(dir).normalize();
    let rel = p - v3(start);
    let t = rel.dot(&d);
    (0.0..=length).contains(&t) && (rel - d * t).norm() <= radius
}

/// Procedural nine-label heart on the default 160³ grid.
pub fn make_synthetic_heart(seed: u64) -> Result<LabelMap> {
    make_synthetic_heart_on(seed, &ReconGrid::default())
}

/// Nested ellipsoids and tubes with randomized size and pose. The left
/// ventricular wall is grown from the cavity by a distance of at least one
/// voxel, so the cavity never touches background.
pub fn make_synthetic_heart_on(seed: u64, grid: &ReconGrid) -> Result<LabelMap> {
    grid.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = grid.geometry();
    let half = grid.box_mm / 2.0;
    let scale = rng.random_range(0.9..1.1) * grid.box_mm / 160.0;
    let mut jit = |r: [f64; 3]| r.map(|x| x * scale * rng.random_range(0.93..1.07));
    let lv_r = jit([18.0, 18.0, 34.0]);
    let rv_r = jit([24.0, 18.0, 28.0]);
    let la_r = jit([16.0, 14.0, 13.0]);
    let ra_r = jit([16.0, 15.0, 14.0]);
    let angles = [rng.random_range(-0.25..0.25), rng.random_range(0.3..0.7), rng.random_range(-0.4..0.4)];
    let shift = [rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)];
    let rot = Rotation3::from_euler_angles(angles[0], angles[1], angles[2]);
    let pose = Pose { center: Vector3::new(half + shift[0], half + shift[1], half + shift[2]) - rot * Vector3::new(0.0, 0.0, 14.0 * scale), rot };
    let sc = |c: [f64; 3]| c.map(|x| x * scale);
    let lv_c = sc([10.0, 0.0, 0.0]);
    let lv_cut = lv_c[2] + 0.7 * lv_r[2];
    let rv_c = sc([-14.0, 4.0, -4.0]);
    let la_c = sc([12.0, 6.0, 46.0]);
    let ra_c = sc([-18.0, 8.0, 40.0]);
    let lv_wall = (8.0 * scale).max(1.01 * grid.spacing());
    let rv_wall = (4.0 * scale).max(1.01 * grid.spacing());
    let vessel_r = 9.0 * scale;

    let [ni, nj, nk] = g.dims;
    let n = g.voxels();
    let local: Vec<Vector3<f64>> = (0..n).map(|v| pose.local(g.world([(v % ni) as f64, ((v / ni) % nj) as f64, (v / (ni * nj)) as f64]))).collect();
    let mut labels = vec![0u16; n];
    let spacing = g.spacing;
    let grow = |labels: &mut Vec<u16>, from: u16, to: u16, wall: f64| {
        let seed: Vec<bool> = labels.iter().map(|&l| l == from).collect();
        let d = distance_transform(&seed, [ni, nj, nk], spacing);
        for (l, dist) in labels.iter_mut().zip(d) {
            if *l == 0 && dist <= wall {
                *l = to;
            }
        }
    };
    for (l, p) in labels.iter_mut().zip(&local) {
        if in_ellipsoid(p, lv_c, lv_r) && p.z <= lv_cut {
            *l = 1;
        }
    }
    grow(&mut labels, 1, 2, lv_wall);
    for (l, p) in labels.iter_mut().zip(&local) {
        if *l == 0 && in_ellipsoid(p, rv_c, rv_r) {
            *l = 3;
        }
    }
    grow(&mut labels, 3, 4, rv_wall);
    for (l, p) in labels.iter_mut().zip(&local) {
        if *l != 0 {
            continue;
        }
        if in_ellipsoid(p, la_c, la_r) {
            *l = 5;
        } else if in_ellipsoid(p, ra_c, ra_r) {
            *l = 6;
        } else if in_tube(p, sc([2.0, -10.0, 20.0]), [0.15, -0.3, 1.0], 50.0 * scale, vessel_r) {
            *l = 7;
        } else if in_tube(p, sc([-10.0, -18.0, 18.0]), [0.3, -0.4, 1.0], 45.0 * scale, vessel_r) {
            *l = 8;
        }
    }
    LabelMap::new(g, labels, LabelSchema::get(SchemaView::Completion9))
}

/// Slice protocol parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub sax_slices: usize,
    pub thickness_mm: f64,
    pub long_axis_views: bool,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig { sax_slices: 10, thickness_mm: 8.0, long_axis_views: true }
    }
}

fn centroid(m: &LabelMap, classes: &[u16]) -> Option<Vector3<f64>> {
    let [ni, nj, _] = m.geometry.dims;
    let mut sum = Vector3::zeros();
    let mut n = 0usize;
    for (v, l) in m.data.iter().enumerate() {
        if classes.contains(l) {
            sum += v3(m.geometry.world([(v % ni) as f64, ((v / ni) % nj) as f64, (v / (ni * nj)) as f64]));
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Short-axis stack along the left-ventricular long axis plus one
/// four-chamber and one two-chamber plane, all derived from the dense map.
pub fn standard_protocol(dense: &LabelMap, cfg: &ProtocolConfig) -> Result<Vec<SlicePlane>> {
    check_dense(dense)?;
    let g = &dense.geometry;
    let [ni, nj, _] = g.dims;
    let lv: Vec<Vector3<f64>> = dense
        .data
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == 1 || l == 2)
        .map(|(v, _)| v3(g.world([(v % ni) as f64, ((v / ni) % nj) as f64, (v / (ni * nj)) as f64])))
        .collect();
    if lv.len() < 4 {
        return Err(Error::data("dense map has no left ventricle to orient the slice protocol"));
    }
    let mean = lv.iter().sum::<Vector3<f64>>() / lv.len() as f64;
    let mut cov = Matrix3::zeros();
    for p in &lv {
        let d = p - mean;
        cov += d * d.transpose();
    }
    let eig = SymmetricEigen::new(cov / lv.len() as f64);
    let (imax, _) = eig.eigenvalues.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &e)| if e > b.1 { (i, e) } else { b });
    let mut axis: Vector3<f64> = eig.eigenvectors.column(imax).into_owned().normalize();
    if let Some(atria) = centroid(dense, &[5, 6]) {
        if axis.dot(&(atria - mean)) < 0.0 {
            axis = -axis;
        }
    }
    let (lo, hi) = lv.iter().map(|p| (p - mean).dot(&axis)).fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), t| (a.min(t), b.max(t)));
    let extent = g.dims[0] as f64 * g.spacing[0] * 3f64.sqrt();
    let mut planes = Vec::new();
    for k in 0..cfg.sax_slices {
        let t = lo + (k as f64 + 0.5) * (hi - lo) / cfg.sax_slices as f64;
        planes.push(SlicePlane::new(arr(mean + axis * t), arr(axis), extent, cfg.thickness_mm, SliceView::Sax(k))?);
    }
    if cfg.long_axis_views {
        let rv = centroid(dense, &[3]).unwrap_or(mean + Vector3::x());
        let lateral = rv - mean;
        let lateral = (lateral - axis * axis.dot(&lateral)).normalize();
        let four = axis.cross(&lateral);
        planes.push(SlicePlane::new(arr(mean), arr(four), extent, cfg.thickness_mm, SliceView::Lax4ch)?);
        planes.push(SlicePlane::new(arr(mean), arr(lateral), extent, cfg.thickness_mm, SliceView::Lax2ch)?);
    }
    Ok(planes)
}

/// Planes covering every voxel layer along `k`, one voxel thick.
pub fn full_coverage_planes(grid: &ReconGrid) -> Result<Vec<SlicePlane>> {
    let g = grid.geometry();
    let s = grid.spacing();
    (0..grid.size)
        .map(|k| {
            let c = g.world([(grid.size - 1) as f64 / 2.0, (grid.size - 1) as f64 / 2.0, k as f64]);
            SlicePlane::new(c, [0.0, 0.0, 1.0], grid.box_mm * 2.0, s, SliceView::Sax(k))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Protocol {
    pub planes: Vec<SlicePlane>,
}

impl Protocol {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let p: Protocol = serde_json::from_str(&text)?;
        for plane in &p.planes {
            plane.validate()?;
        }
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompletionPair {
    pub sparse: LabelMap,
    pub dense: LabelMap,
}

impl CompletionPair {
    pub fn new(sparse: LabelMap, dense: LabelMap) -> Result<Self> {
        check_dense(&dense)?;
        if sparse.schema.view != SchemaView::Completion7 {
            return Err(Error::data(format!("sparse map must use COMPLETION7, got {}", sparse.schema.name())));
        }
        if !sparse.geometry.matches(&dense.geometry) {
            return Err(Error::data("sparse and dense maps differ in geometry"));
        }
        let d = sparse.geometry.dims;
        if d[0] != d[1] || d[1] != d[2] {
            return Err(Error::data(format!("completion grids must be cubic, got {d:?}")));
        }
        Ok(CompletionPair { sparse, dense })
    }
}

/// Synthetic heart `seed` sliced with the standard protocol.
pub fn make_pair(seed: u64, grid: &ReconGrid, protocol: &ProtocolConfig, em: &ErrorModel) -> Result<CompletionPair> {
    let dense = make_synthetic_heart_on(seed, grid)?;
    let planes = standard_protocol(&dense, protocol)?;
    let em = ErrorModel { seed: em.seed ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15), ..*em };
    let sparse = rasterize_slices(&dense, &planes, &em)?;
    CompletionPair::new(sparse, dense)
}

/// `[7, k, j, i]` one-hot encoding of a sparse map.
pub fn one_hot(sparse: &LabelMap) -> Result<Tensor<f32>> {
    let n = sparse.data.len();
    let mut data = vec![0f32; SPARSE_CLASSES * n];
    for (v, &l) in sparse.data.iter().enumerate() {
        if l as usize >= SPARSE_CLASSES {
            return Err(Error::data(format!("sparse label {l} outside 0..{}", SPARSE_CLASSES - 1)));
        }
        data[l as usize * n + v] = 1.0;
    }
    let [k, j, i] = sparse.geometry.grid_shape();
    Tensor::new(vec![SPARSE_CLASSES, k, j, i], data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompletionConfig {
    pub grid: ReconGrid,
    pub widths: Vec<usize>,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub errors: ErrorModel,
    /// Also train on the error-free full-coverage rasterization of every
    /// dense target, so densely sampled inputs complete to themselves.
    pub full_coverage_inputs: bool,
}

impl Default for CompletionConfig {
    fn default() -> Self {
        let grid = ReconGrid::default();
        CompletionConfig {
            grid,
            widths: vec![8, 16, 32, 64, 128],
            train: TrainConfig {
                patch: vec![grid.size; 3],
                batch_size: 1,
                epochs: 300,
                steps_per_epoch: Some(1),
                augment: AugmentConfig::off(),
                ..TrainConfig::default()
            },
            protocol: ProtocolConfig::default(),
            errors: ErrorModel::default(),
            full_coverage_inputs: true,
        }
    }
}

impl CompletionConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::completion_unet(SPARSE_CLASSES, DENSE_CLASSES, self.widths.clone())
    }
}

/// Trains the completion U-Net on whole grids with Dice + cross-entropy
/// over the nine dense classes. Each step draws `batch_size` samples from
/// the sparse inputs and, when enabled, their full-coverage counterparts.
pub fn train_completion(pairs: &[CompletionPair], cfg: &CompletionConfig) -> Result<TrainOutput> {
    let size = cfg.grid.size;
    let mut samples = Vec::with_capacity(pairs.len());
    for p in pairs {
        if p.dense.geometry.dims != [size; 3] {
            return Err(Error::data(format!("pair grid {:?} differs from configured {size}³", p.dense.geometry.dims)));
        }
        samples.push(Sample::new(one_hot(&p.sparse)?, p.dense.data.clone())?);
    }
    if cfg.full_coverage_inputs {
        let planes = full_coverage_planes(&cfg.grid)?;
        for p in pairs {
            let full = rasterize_slices(&p.dense, &planes, &ErrorModel::none())?;
            samples.push(Sample::new(one_hot(&full)?, p.dense.data.clone())?);
        }
    }
    let model = build_model(cfg.model_config(), cfg.train.seed)?;
    let train = TrainConfig { patch: vec![size; 3], ..cfg.train.clone() };
    let mut out = train_model(model, &samples, &train)?;
    out.best.set("completion", &cfg.grid)?;
    Ok(out)
}

/// One-hot encode, forward, argmax and keep the largest component of every
/// foreground class.
pub fn complete(model: &Model, sparse: &LabelMap) -> Result<LabelMap> {
    if sparse.schema.view != SchemaView::Completion7 {
        return Err(Error::data(format!("sparse map must use COMPLETION7, got {}", sparse.schema.name())));
    }
    if model.config.in_channels != SPARSE_CLASSES || model.config.num_classes != DENSE_CLASSES {
        return Err(Error::config("model is not a 7 → 9 class completion network"));
    }
    let d = sparse.geometry.dims;
    let multiple = model.config.size_multiple();
    if d[0] != d[1] || d[1] != d[2] || d[0] % multiple != 0 {
        return Err(Error::shape(format!("completion grid must be cubic with extent a multiple of {multiple}, got {d:?}")));
    }
    let x = one_hot(sparse)?;
    let mut shape = vec![1];
    shape.extend_from_slice(x.shape());
    let probs = model.forward(&x.reshape(&shape)?)?;
    let inner = probs.shape()[1..].to_vec();
    let probs = probs.reshape(&inner)?;
    let mut labels = argmax_labels(&probs)?;
    let grid = sparse.geometry.grid_shape();
    for cls in 1..DENSE_CLASSES as u16 {
        labels = largest_component(&labels, grid, cls)?;
    }
    LabelMap::new(sparse.geometry.clone(), labels, LabelSchema::get(SchemaView::Completion9))
}

/// Dice per foreground class `1..=8` of a completion against its target.
pub fn completion_dice(pred: &LabelMap, dense: &LabelMap) -> Result<Vec<f64>> {
    (1..DENSE_CLASSES as u16).map(|c| dice_labels(&pred.data, &dense.data, c)).collect()
}
