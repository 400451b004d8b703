//! Volumes, label maps and their geometry; NIfTI-1 reading and writing,
//! resampling and intensity normalization.
//!
//! Grids are stored with the first file axis (`i`) varying fastest, which
//! is the same memory order as a `[k, j, i]` row-major tensor. `dims`,
//! `spacing` and the direction columns are all given in `(i, j, k)` order:
//! in-plane row, in-plane column, through-plane.

mod nifti;

pub use nifti::{read_header, read_labels, read_volume, write_labels, write_volume, Loaded, NiftiHeader, HEADER_SIZE};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Physical placement of a voxel grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    /// Millimetres per voxel along `i`, `j`, `k`.
    pub spacing: [f64; 3],
    /// World position of voxel `(0, 0, 0)` in mm.
    pub origin: [f64; 3],
    /// Columns are the world-space unit vectors of the `i`, `j`, `k` axes.
    pub direction: [[f64; 3]; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        Geometry { dims, spacing, origin: [0.0; 3], direction: IDENTITY }
    }

    pub fn voxels(&self) -> usize {
        self.dims.iter().product()
    }

    /// Row-major tensor extents `[k, j, i]`.
    pub fn grid_shape(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::shape(format!("empty grid {:?}", self.dims)));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::data(format!("spacing {:?} must be positive", self.spacing)));
        }
        for a in 0..3 {
            for b in 0..3 {
                let dot: f64 = (0..3).map(|r| self.direction[r][a] * self.direction[r][b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-5 {
                    return Err(Error::data(format!("direction {:?} is not orthonormal", self.direction)));
                }
            }
        }
        Ok(())
    }

    /// World position (mm) of a continuous voxel index.
    pub fn world(&self, index: [f64; 3]) -> [f64; 3] {
        let mut p = self.origin;
        for (r, pr) in p.iter_mut().enumerate() {
            for a in 0..3 {
                *pr += self.direction[r][a] * self.spacing[a] * index[a];
            }
        }
        p
    }

    /// Continuous voxel index of a world position.
    pub fn index(&self, world: [f64; 3]) -> [f64; 3] {
        let d = [world[0] - self.origin[0], world[1] - self.origin[1], world[2] - self.origin[2]];
        let mut out = [0.0; 3];
        for a in 0..3 {
            out[a] = (0..3).map(|r| self.direction[r][a] * d[r]).sum::<f64>() / self.spacing[a];
        }
        out
    }

    /// Same grid within a relative spacing tolerance of `1e-5`.
    pub fn matches(&self, other: &Geometry) -> bool {
        self.dims == other.dims && self.spacing.iter().zip(&other.spacing).all(|(a, b)| (a - b).abs() <= 1e-5 * a.abs().max(b.abs()))
    }
}

const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

/// Intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub geometry: Geometry,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(geometry: Geometry, data: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxels() {
            return Err(Error::shape(format!("{} values for grid {:?}", data.len(), geometry.dims)));
        }
        Ok(Volume { geometry, data })
    }

    /// `[1, k, j, i]`, or `[1, j, i]` for a single-slice grid when `planar`.
    pub fn to_tensor(&self, planar: bool) -> Result<Tensor<f32>> {
        let g = self.geometry.grid_shape();
        if planar {
            if g[0] != 1 {
                return Err(Error::shape(format!("grid {:?} is not a single slice", self.geometry.dims)));
            }
            Tensor::new(vec![1, g[1], g[2]], self.data.clone())
        } else {
            Tensor::new(vec![1, g[0], g[1], g[2]], self.data.clone())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SchemaView {
    Lax4ch,
    Lax2ch,
    Sax,
    Completion7,
    Completion9,
}

/// Structure names and their integer labels; background is always 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    pub view: SchemaView,
    /// Foreground structures in label order `1..`.
    pub structures: Vec<String>,
}

impl LabelSchema {
    fn of(view: SchemaView, names: &[&str]) -> Self {
        LabelSchema { view, structures: names.iter().map(|s| s.to_string()).collect() }
    }

    pub fn get(view: SchemaView) -> Self {
        match view {
            SchemaView::Lax4ch | SchemaView::Lax2ch => Self::of(view, &["LA", "RA", "LV", "RV"]),
            SchemaView::Sax => Self::of(view, &["LV", "LVM", "RV"]),
            SchemaView::Completion7 => Self::of(view, &["LV", "LVM", "RV", "RVM", "LA", "RA"]),
            SchemaView::Completion9 => Self::of(view, &["LV", "LVM", "RV", "RVM", "LA", "RA", "AA", "PA"]),
        }
    }

    /// Accepts `LAX4CH`, `4ch`, `sax`, `completion7`, ... (case-insensitive).
    pub fn by_name(name: &str) -> Result<Self> {
        let view = match name.to_ascii_lowercase().as_str() {
            "lax4ch" | "4ch" => SchemaView::Lax4ch,
            "lax2ch" | "2ch" => SchemaView::Lax2ch,
            "sax" => SchemaView::Sax,
            "completion7" => SchemaView::Completion7,
            "completion9" => SchemaView::Completion9,
            _ => return Err(Error::config(format!("unknown label schema {name:?}"))),
        };
        Ok(Self::get(view))
    }

    pub fn name(&self) -> &'static str {
        match self.view {
            SchemaView::Lax4ch => "LAX4CH",
            SchemaView::Lax2ch => "LAX2CH",
            SchemaView::Sax => "SAX",
            SchemaView::Completion7 => "COMPLETION7",
            SchemaView::Completion9 => "COMPLETION9",
        }
    }

    /// Classes including background.
    pub fn num_classes(&self) -> usize {
        self.structures.len() + 1
    }

    pub fn label(&self, structure: &str) -> Option<u16> {
        self.structures.iter().position(|s| s == structure).map(|i| i as u16 + 1)
    }

    /// `(name, label)` for each foreground structure.
    pub fn foreground(&self) -> impl Iterator<Item = (&str, u16)> {
        self.structures.iter().enumerate().map(|(i, s)| (s.as_str(), i as u16 + 1))
    }

    /// Long-axis views are segmented slice by slice with a 2D model.
    pub fn is_planar(&self) -> bool {
        matches!(self.view, SchemaView::Lax4ch | SchemaView::Lax2ch)
    }

    pub fn check(&self, labels: &[u16]) -> Result<()> {
        let n = self.num_classes() as u16;
        match labels.iter().find(|&&l| l >= n) {
            Some(l) => Err(Error::data(format!("label {l} outside schema {} (0..{})", self.name(), n - 1))),
            None => Ok(()),
        }
    }
}

/// Integer segmentation on a voxel grid.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub geometry: Geometry,
    pub data: Vec<u16>,
    pub schema: LabelSchema,
}

impl LabelMap {
    pub fn new(geometry: Geometry, data: Vec<u16>, schema: LabelSchema) -> Result<Self> {
        geometry.validate()?;
        if data.len() != geometry.voxels() {
            return Err(Error::shape(format!("{} labels for grid {:?}", data.len(), geometry.dims)));
        }
        schema.check(&data)?;
        Ok(LabelMap { geometry, data, schema })
    }

    pub fn count(&self, cls: u16) -> usize {
        self.data.iter().filter(|&&l| l == cls).count()
    }
}

/// `clamp((v − lo) / (hi − lo), 0, 1)` voxelwise.
pub fn normalize(v: &Volume, lo: f64, hi: f64) -> Result<Volume> {
    if !(hi > lo) {
        return Err(Error::config(format!("normalization range [{lo}, {hi}] is empty")));
    }
    let data = v.data.iter().map(|&x| ((x as f64 - lo) / (hi - lo)).clamp(0.0, 1.0) as f32).collect();
    Ok(Volume { geometry: v.geometry.clone(), data })
}

pub const DEFAULT_TARGET_SPACING: [f64; 3] = [0.37, 0.53, 0.232];

/// Output geometry for `target` spacing: extents `round(n·s/s')` (at least
/// one), with the origin moved so that the physical box keeps its corner.
pub fn resampled_geometry(g: &Geometry, target: [f64; 3]) -> Result<Geometry> {
    if target.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::config(format!("target spacing {target:?} must be positive")));
    }
    let mut dims = [0; 3];
    let mut shift = [0.0; 3];
    for a in 0..3 {
        dims[a] = ((g.dims[a] as f64 * g.spacing[a] / target[a]).round() as usize).max(1);
        shift[a] = (target[a] / g.spacing[a] - 1.0) / 2.0;
    }
    Ok(Geometry { dims, spacing: target, origin: g.world(shift), direction: g.direction })
}

/// Source index for output index `o`: voxel centres aligned to the box.
fn source_coord(o: usize, scale: f64, n: usize) -> f64 {
    ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64)
}

fn axis_coords(g: &Geometry, out: &Geometry) -> [Vec<f64>; 3] {
    std::array::from_fn(|a| (0..out.dims[a]).map(|o| source_coord(o, out.spacing[a] / g.spacing[a], g.dims[a])).collect())
}

/// Trilinear resampling of an image.
pub fn resample(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    let g = &v.geometry;
    let out = resampled_geometry(g, target)?;
    let c = axis_coords(g, &out);
    let [ni, nj, _] = g.dims;
    let mut data = Vec::with_capacity(out.voxels());
    for &k in &c[2] {
        for &j in &c[1] {
            for &i in &c[0] {
                let lo = [i.floor() as usize, j.floor() as usize, k.floor() as usize];
                let fr = [i - lo[0] as f64, j - lo[1] as f64, k - lo[2] as f64];
                let mut acc = 0.0;
                for corner in 0..8 {
                    let mut w = 1.0;
                    let mut idx = [0; 3];
                    for a in 0..3 {
                        let bit = (corner >> a) & 1;
                        idx[a] = (lo[a] + bit).min(g.dims[a] - 1);
                        w *= if bit == 1 { fr[a] } else { 1.0 - fr[a] };
                    }
                    if w > 0.0 {
                        acc += w * v.data[(idx[2] * nj + idx[1]) * ni + idx[0]] as f64;
                    }
                }
                data.push(acc as f32);
            }
        }
    }
    Volume::new(out, data)
}

/// Nearest-neighbour resampling of a label map.
pub fn resample_labels(m: &LabelMap, target: [f64; 3]) -> Result<LabelMap> {
    let g = &m.geometry;
    let out = resampled_geometry(g, target)?;
    let c = axis_coords(g, &out);
    let [ni, nj, _] = g.dims;
    let mut data = Vec::with_capacity(out.voxels());
    for &k in &c[2] {
        for &j in &c[1] {
            for &i in &c[0] {
                data.push(m.data[(k.round() as usize * nj + j.round() as usize) * ni + i.round() as usize]);
            }
        }
    }
    LabelMap::new(out, data, m.schema.clone())
}

/// Nearest-neighbour resampling onto an explicit target grid (used to map
/// predictions back to the input geometry).
pub fn resample_labels_to(m: &LabelMap, target: &Geometry) -> Result<LabelMap> {
    let g = &m.geometry;
    let [ni, nj, _] = g.dims;
    let c: [Vec<usize>; 3] =
        std::array::from_fn(|a| (0..target.dims[a]).map(|o| source_coord(o, target.spacing[a] / g.spacing[a], g.dims[a]).round() as usize).collect());
    let mut data = Vec::with_capacity(target.voxels());
    for &k in &c[2] {
        for &j in &c[1] {
            for &i in &c[0] {
                data.push(m.data[(k * nj + j) * ni + i]);
            }
        }
    }
    LabelMap::new(target.clone(), data, m.schema.clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], spacing: [f64; 3], f: impl Fn(usize, usize, usize) -> f32) -> Volume {
        let mut data = Vec::new();
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume::new(Geometry::new(dims, spacing), data).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let v = vol([4, 1, 1], [1.0; 3], |i, _, _| [0.0, 125.0, 250.0, 400.0][i]);
        assert_eq!(normalize(&v, 0.0, 250.0).unwrap().data, vec![0.0, 0.5, 1.0, 1.0]);
        let n = normalize(&v, 0.0, 250.0).unwrap();
        assert_eq!(normalize(&n, 0.0, 1.0).unwrap().data, n.data);
        assert!(normalize(&v, 1.0, 1.0).is_err());
    }

    #[test]
    fn identity_and_constant_resampling() {
        let v = vol([5, 4, 3], [0.5, 0.7, 2.0], |i, j, k| (i * 7 + j * 3 + k) as f32);
        let same = resample(&v, [0.5, 0.7, 2.0]).unwrap();
        assert_eq!(same.data, v.data);
        let c = vol([5, 4, 3], [1.0; 3], |_, _, _| 3.5);
        let r = resample(&c, [0.3, 0.8, 1.7]).unwrap();
        assert_eq!(r.geometry.dims, [17, 5, 2]);
        assert!(r.data.iter().all(|&x| (x - 3.5).abs() < 1e-6));
    }

    #[test]
    fn box_is_preserved() {
        let v = vol([10, 10, 10], [1.0; 3], |_, _, _| 0.0);
        let r = resample(&v, [0.4, 2.0, 3.0]).unwrap();
        for a in 0..3 {
            let lo_in = v.geometry.origin[a] - 0.5 * v.geometry.spacing[a];
            let lo_out = r.geometry.origin[a] - 0.5 * r.geometry.spacing[a];
            assert!((lo_in - lo_out).abs() < 1e-9);
            let hi_in = lo_in + 10.0 * v.geometry.spacing[a];
            let hi_out = lo_out + r.geometry.dims[a] as f64 * r.geometry.spacing[a];
            assert!((hi_in - hi_out).abs() <= r.geometry.spacing[a]);
        }
    }

    #[test]
    fn schema_tables() {
        let lax = LabelSchema::get(SchemaView::Lax4ch);
        assert_eq!(lax.label("LA"), Some(1));
        assert_eq!(lax.label("RV"), Some(4));
        let sax = LabelSchema::by_name("sax").unwrap();
        assert_eq!(sax.label("LVM"), Some(2));
        let c9 = LabelSchema::get(SchemaView::Completion9);
        assert_eq!((c9.label("RVM"), c9.label("PA"), c9.num_classes()), (Some(4), Some(8), 9));
        assert!(sax.check(&[0, 3]).is_ok());
        assert!(sax.check(&[4]).is_err());
        assert!(LabelSchema::by_name("axial").is_err());
    }
}
