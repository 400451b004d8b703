//! Base-window (WP) and searching-window (WAP) partitions of channel-last
//! token maps, their exact inverse, and cyclic shifts.
//!
//! Token maps are `[N, D, H, W, C]`; two-dimensional maps use `D = 1`.
//! Window extents, magnifications and shifts are given in the same
//! `(D, H, W)` axis order. Every partition is a row gather described by a
//! [`WindowPlan`], so the same plan drives both the plain-tensor functions
//! here and the differentiable versions used by the attention blocks.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::kernels::{self, PAD};
use crate::tensor::{Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Base,
    Searching,
}

/// Per-axis integer enlargement of the base window for searching windows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Magnification(pub [usize; 3]);

impl Magnification {
    pub const IDENTITY: Magnification = Magnification([1, 1, 1]);

    /// Token-count ratio between a searching and a base window.
    pub fn mu(&self) -> usize {
        self.0.iter().product()
    }

    fn validate(&self) -> Result<()> {
        if self.0.contains(&0) {
            return Err(Error::config(format!("magnification components must be >= 1, got {:?}", self.0)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftDirection {
    Forward,
    Inverse,
}

/// Gather plan for one partition of a `[N, D, H, W, C]` map.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub kind: WindowKind,
    pub batch: usize,
    /// `(D, H, W)` of the source map.
    pub source: [usize; 3],
    /// Base window extents.
    pub base_window: [usize; 3],
    /// Extents of the windows this plan extracts (base or enlarged).
    pub window: [usize; 3],
    /// Window count per axis.
    pub grid: [usize; 3],
    /// Low-side padding of the searching window around its base window.
    pub pad_low: [usize; 3],
    /// Window origins in source coordinates, one per window of a single map.
    pub origins: Vec<[isize; 3]>,
    index: Rc<Vec<usize>>,
}

impl WindowPlan {
    /// Non-overlapping tiling; remainders are zero padded on the high side.
    pub fn base(batch: usize, source: [usize; 3], window: [usize; 3]) -> Result<Self> {
        Self::build(batch, source, window, Magnification::IDENTITY, WindowKind::Base)
    }

    /// Enlarged windows `(mag · window)` with stride `window`, each centered on
    /// its base window by symmetric zero padding.
    pub fn searching(batch: usize, source: [usize; 3], window: [usize; 3], mag: Magnification) -> Result<Self> {
        mag.validate()?;
        Self::build(batch, source, window, mag, WindowKind::Searching)
    }

    fn build(batch: usize, source: [usize; 3], window: [usize; 3], mag: Magnification, kind: WindowKind) -> Result<Self> {
        for a in 0..3 {
            if window[a] == 0 || window[a] > source[a] {
                return Err(Error::shape(format!(
                    "window {window:?} does not fit map {source:?}"
                )));
            }
        }
        let grid = [
            source[0].div_ceil(window[0]),
            source[1].div_ceil(window[1]),
            source[2].div_ceil(window[2]),
        ];
        let ext = [window[0] * mag.0[0], window[1] * mag.0[1], window[2] * mag.0[2]];
        let pad_low = [
            (ext[0] - window[0]) / 2,
            (ext[1] - window[1]) / 2,
            (ext[2] - window[2]) / 2,
        ];
        let n: usize = grid.iter().product();
        let tokens: usize = ext.iter().product();
        let map_tokens: usize = source.iter().product();
        let mut origins = Vec::with_capacity(n);
        for g0 in 0..grid[0] {
            for g1 in 0..grid[1] {
                for g2 in 0..grid[2] {
                    origins.push([
                        (g0 * window[0]) as isize - pad_low[0] as isize,
                        (g1 * window[1]) as isize - pad_low[1] as isize,
                        (g2 * window[2]) as isize - pad_low[2] as isize,
                    ]);
                }
            }
        }
        let mut index = Vec::with_capacity(batch * n * tokens);
        for b in 0..batch {
            for o in &origins {
                for t0 in 0..ext[0] {
                    let z = o[0] + t0 as isize;
                    for t1 in 0..ext[1] {
                        let y = o[1] + t1 as isize;
                        for t2 in 0..ext[2] {
                            let x = o[2] + t2 as isize;
                            let inside = z >= 0
                                && y >= 0
                                && x >= 0
                                && (z as usize) < source[0]
                                && (y as usize) < source[1]
                                && (x as usize) < source[2];
                            index.push(if inside {
                                b * map_tokens + ((z as usize) * source[1] + y as usize) * source[2] + x as usize
                            } else {
                                PAD
                            });
                        }
                    }
                }
            }
        }
        Ok(WindowPlan {
            kind,
            batch,
            source,
            base_window: window,
            window: ext,
            grid,
            pad_low,
            origins,
            index: Rc::new(index),
        })
    }

    /// Windows per map.
    pub fn windows_per_map(&self) -> usize {
        self.grid.iter().product()
    }

    /// Windows across the batch.
    pub fn count(&self) -> usize {
        self.batch * self.windows_per_map()
    }

    pub fn tokens_per_window(&self) -> usize {
        self.window.iter().product()
    }

    /// Source row read by each window token, or [`PAD`].
    pub fn index(&self) -> &Rc<Vec<usize>> {
        &self.index
    }

    /// For a base plan: the window-token row holding each source token.
    pub fn merge_index(&self) -> Result<Rc<Vec<usize>>> {
        if self.kind != WindowKind::Base {
            return Err(Error::shape("only base partitions can be merged"));
        }
        let map_tokens: usize = self.source.iter().product();
        let mut inv = vec![PAD; self.batch * map_tokens];
        for (row, &src) in self.index.iter().enumerate() {
            if src != PAD {
                inv[src] = row;
            }
        }
        Ok(Rc::new(inv))
    }

    fn windows_shape(&self, channels: usize) -> [usize; 3] {
        [self.count(), self.tokens_per_window(), channels]
    }
}

/// A batch of token windows with the plan that produced them.
#[derive(Clone, Debug)]
pub struct WindowSet<T> {
    /// `[n × tokens-per-window × C]`.
    pub windows: Tensor<T>,
    pub plan: WindowPlan,
}

impl<T: Scalar> WindowSet<T> {
    pub fn kind(&self) -> WindowKind {
        self.plan.kind
    }

    pub fn len(&self) -> usize {
        self.plan.count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.windows.shape()[2]
    }
}

fn map_dims(shape: &[usize]) -> Result<(usize, [usize; 3], usize)> {
    if shape.len() != 5 {
        return Err(Error::shape(format!("token map must be [N, D, H, W, C], got {shape:?}")));
    }
    Ok((shape[0], [shape[1], shape[2], shape[3]], shape[4]))
}

fn apply<T: Scalar>(features: &Tensor<T>, plan: WindowPlan) -> Result<WindowSet<T>> {
    let (_, _, c) = map_dims(features.shape())?;
    let data = kernels::gather_rows(features.data(), c, plan.index());
    let windows = Tensor::new(plan.windows_shape(c).to_vec(), data)?;
    Ok(WindowSet { windows, plan })
}

/// Window partition (WP) into non-overlapping base windows.
pub fn window_partition<T: Scalar>(features: &Tensor<T>, window: [usize; 3]) -> Result<WindowSet<T>> {
    let (n, source, _) = map_dims(features.shape())?;
    apply(features, WindowPlan::base(n, source, window)?)
}

/// Window area partition (WAP) into enlarged searching windows.
pub fn window_area_partition<T: Scalar>(
    features: &Tensor<T>,
    window: [usize; 3],
    mag: Magnification,
) -> Result<WindowSet<T>> {
    let (n, source, _) = map_dims(features.shape())?;
    apply(features, WindowPlan::searching(n, source, window, mag)?)
}

/// Exact inverse of [`window_partition`]; padding rows are dropped.
pub fn window_merge<T: Scalar>(ws: &WindowSet<T>, target_shape: &[usize]) -> Result<Tensor<T>> {
    let (n, source, c) = map_dims(target_shape)?;
    if n != ws.plan.batch || source != ws.plan.source || c != ws.channels() {
        return Err(Error::shape(format!(
            "merge target {target_shape:?} disagrees with partition of [{}, {:?}, {}]",
            ws.plan.batch,
            ws.plan.source,
            ws.channels()
        )));
    }
    let inv = ws.plan.merge_index()?;
    Tensor::new(target_shape.to_vec(), kernels::gather_rows(ws.windows.data(), c, &inv))
}

/// Row index for a cyclic roll of the `(D, H, W)` lattice. Forward reads
/// `out[i] = in[(i + shift) mod n]` per axis; inverse undoes it.
pub fn shift_index(batch: usize, source: [usize; 3], shift: [usize; 3], direction: ShiftDirection) -> Result<Vec<usize>> {
    for a in 0..3 {
        if shift[a] >= source[a] && shift[a] != 0 {
            return Err(Error::shape(format!("shift {shift:?} not below map extents {source:?}")));
        }
    }
    let map_tokens: usize = source.iter().product();
    let roll = |i: usize, a: usize| match direction {
        ShiftDirection::Forward => (i + shift[a]) % source[a],
        ShiftDirection::Inverse => (i + source[a] - shift[a] % source[a]) % source[a],
    };
    let mut index = Vec::with_capacity(batch * map_tokens);
    for b in 0..batch {
        for z in 0..source[0] {
            for y in 0..source[1] {
                for x in 0..source[2] {
                    index.push(b * map_tokens + (roll(z, 0) * source[1] + roll(y, 1)) * source[2] + roll(x, 2));
                }
            }
        }
    }
    Ok(index)
}

/// Half-window shift used by shifted blocks.
pub fn half_shift(window: [usize; 3]) -> [usize; 3] {
    [window[0] / 2, window[1] / 2, window[2] / 2]
}

pub fn cyclic_shift<T: Scalar>(features: &Tensor<T>, shift: [usize; 3], direction: ShiftDirection) -> Result<Tensor<T>> {
    let (n, source, c) = map_dims(features.shape())?;
    let idx = shift_index(n, source, shift, direction)?;
    Tensor::new(features.shape().to_vec(), kernels::gather_rows(features.data(), c, &idx))
}

/// Differentiable counterparts on tape variables.
pub mod ad {
    use super::*;

    pub fn partition<'t, T: Scalar>(x: Var<'t, T>, plan: &WindowPlan) -> Result<Var<'t, T>> {
        let (_, _, c) = map_dims(&x.shape())?;
        x.gather_rows(plan.index().clone(), &plan.windows_shape(c))
    }

    pub fn merge<'t, T: Scalar>(windows: Var<'t, T>, plan: &WindowPlan, channels: usize) -> Result<Var<'t, T>> {
        let s = plan.source;
        windows.gather_rows(plan.merge_index()?, &[plan.batch, s[0], s[1], s[2], channels])
    }

    pub fn shift<'t, T: Scalar>(x: Var<'t, T>, shift: [usize; 3], direction: ShiftDirection) -> Result<Var<'t, T>> {
        let shape = x.shape();
        let (n, source, _) = map_dims(&shape)?;
        let idx = shift_index(n, source, shift, direction)?;
        x.gather_rows(Rc::new(idx), &shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(shape: [usize; 5]) -> Tensor<f64> {
        Tensor::from_fn(&shape, |i| i as f64 + 1.0)
    }

    #[test]
    fn eight_cube_by_four_gives_eight_windows() {
        let ws = window_partition(&map([1, 8, 8, 8, 2]), [4, 4, 4]).unwrap();
        assert_eq!(ws.len(), 8);
        assert_eq!(ws.windows.shape(), &[8, 64, 2]);
    }

    #[test]
    fn full_window_is_identity_partition() {
        let x = map([1, 3, 4, 5, 2]);
        let ws = window_partition(&x, [3, 4, 5]).unwrap();
        assert_eq!(ws.len(), 1);
        assert_eq!(ws.windows.data(), x.data());
    }

    #[test]
    fn six_cube_pads_two_on_high_side() {
        let x = map([1, 6, 6, 6, 1]);
        let ws = window_partition(&x, [4, 4, 4]).unwrap();
        assert_eq!(ws.len(), 8);
        let origins: Vec<[isize; 3]> = (0..2)
            .flat_map(|a| (0..2).flat_map(move |b| (0..2).map(move |c| [4 * a, 4 * b, 4 * c])))
            .collect();
        assert_eq!(ws.plan.origins, origins);
        // last window: only a 2x2x2 corner is real
        let last = &ws.windows.data()[7 * 64..8 * 64];
        assert_eq!(last.iter().filter(|&&v| v != 0.0).count(), 8);
        let merged = window_merge(&ws, &[1, 6, 6, 6, 1]).unwrap();
        assert_eq!(merged, x);
    }

    #[test]
    fn unit_magnification_matches_base() {
        let x = map([2, 4, 6, 8, 3]);
        let a = window_partition(&x, [2, 3, 4]).unwrap();
        let b = window_area_partition(&x, [2, 3, 4], Magnification::IDENTITY).unwrap();
        assert_eq!(a.windows, b.windows);
    }

    #[test]
    fn doubled_searching_windows_on_eight_cube() {
        let x = map([1, 8, 8, 8, 1]);
        let s = window_area_partition(&x, [4, 4, 4], Magnification([2, 2, 2])).unwrap();
        assert_eq!(s.len(), 8);
        assert_eq!(s.plan.tokens_per_window(), 512);
        assert_eq!(s.plan.pad_low, [2, 2, 2]);
        assert_eq!(s.plan.origins[0], [-2, -2, -2]);
        assert_eq!(s.plan.origins[7], [2, 2, 2]);
    }

    #[test]
    fn base_tokens_lie_inside_searching_window() {
        let x = map([1, 8, 8, 8, 1]);
        let b = window_partition(&x, [4, 4, 4]).unwrap();
        let s = window_area_partition(&x, [4, 4, 4], Magnification([2, 2, 2])).unwrap();
        for w in 0..8 {
            let base = &b.windows.data()[w * 64..(w + 1) * 64];
            let search = &s.windows.data()[w * 512..(w + 1) * 512];
            assert!(base.iter().all(|v| search.contains(v)));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let x = map([1, 4, 4, 4, 1]);
        assert!(window_partition(&x, [5, 4, 4]).is_err());
        assert!(window_area_partition(&x, [2, 2, 2], Magnification([0, 1, 1])).is_err());
        let ws = window_partition(&x, [2, 2, 2]).unwrap();
        assert!(window_merge(&ws, &[1, 4, 4, 2, 1]).is_err());
    }

    #[test]
    fn hand_roll_of_a_row() {
        let x = Tensor::<f64>::new(vec![1, 1, 1, 4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = cyclic_shift(&x, [0, 0, 2], ShiftDirection::Forward).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0, 1.0, 2.0]);
        let z = cyclic_shift(&x, [0, 0, 1], ShiftDirection::Forward).unwrap();
        assert_eq!(z.data(), &[2.0, 3.0, 4.0, 1.0]);
        assert_eq!(cyclic_shift(&z, [0, 0, 1], ShiftDirection::Inverse).unwrap(), x);
        assert_eq!(cyclic_shift(&x, [0, 0, 0], ShiftDirection::Forward).unwrap(), x);
    }

    #[test]
    fn permuting_windows_and_back_then_merge() {
        let x = map([1, 4, 4, 1, 2]);
        let mut ws = window_partition(&x, [2, 2, 1]).unwrap();
        let tpw = ws.plan.tokens_per_window() * 2;
        let orig = ws.windows.clone();
        let d = ws.windows.data_mut();
        d.chunks_mut(tpw).for_each(|c| c.reverse());
        d.chunks_mut(tpw).for_each(|c| c.reverse());
        assert_eq!(ws.windows, orig);
        assert_eq!(window_merge(&ws, &[1, 4, 4, 1, 2]).unwrap(), x);
    }
}
