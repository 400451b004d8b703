//! Differentiable operators on [`Var`].

use std::rc::Rc;

use super::kernels::{self, ConvGeom, UpGeom};
use super::{check_perm, inverse_perm, spatial3, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch-normalization statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    Train,
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

/// Output of [`Var::batchnorm`]; in train mode also carries the batch
/// statistics (biased mean, unbiased variance) for the running update.
pub struct BnOutput<'t, T: Scalar> {
    pub y: Var<'t, T>,
    pub batch_stats: Option<(Tensor<T>, Tensor<T>)>,
}

fn reduce_to_axis<T: Scalar>(g: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = kernels::split_axis(g.shape(), axis);
    let mut out = vec![T::zero(); len];
    let d = g.data();
    for o in 0..outer {
        for (j, acc) in out.iter_mut().enumerate() {
            let base = (o * len + j) * inner;
            *acc += d[base..base + inner].iter().copied().sum::<T>();
        }
    }
    Tensor { shape: vec![len], data: out }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn same_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::Tape("operands recorded on different tapes".into()))
        }
    }

    fn elementwise(
        self,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var<'t, T> {
        let x = self.value();
        let y = x.map(f);
        let y_rc = Rc::new(y.clone());
        self.tape.push(y, &[self.id], move |g| {
            let data = x.data().iter().zip(y_rc.data()).zip(g.data()).map(|((&xv, &yv), &gv)| gv * df(xv, yv)).collect();
            vec![Some(Tensor { shape: x.shape().to_vec(), data })]
        })
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let y = self.value().zip_map(&other.value(), |a, b| a + b)?;
        Ok(self.tape.push(y, &[self.id, other.id], |g| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let y = self.value().zip_map(&other.value(), |a, b| a - b)?;
        Ok(self.tape.push(y, &[self.id, other.id], |g| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let y = a.zip_map(&b, |x, y| x * y)?;
        Ok(self.tape.push(y, &[self.id, other.id], move |g| {
            vec![
                Some(g.zip_map(&b, |gv, bv| gv * bv).expect("shape")),
                Some(g.zip_map(&a, |gv, av| gv * av).expect("shape")),
            ]
        }))
    }

    /// Adds a vector `b` of length `shape[axis]` broadcast along every other axis.
    pub fn add_bias(self, b: Var<'t, T>, axis: usize) -> Result<Var<'t, T>> {
        self.same_tape(&b)?;
        let x = self.value();
        let bv = b.value();
        if axis >= x.rank() || bv.shape() != [x.shape()[axis]] {
            return Err(Error::shape(format!(
                "bias {:?} does not match axis {axis} of {:?}",
                bv.shape(),
                x.shape()
            )));
        }
        let (outer, len, inner) = kernels::split_axis(x.shape(), axis);
        let mut data = x.data().to_vec();
        for o in 0..outer {
            for j in 0..len {
                let base = (o * len + j) * inner;
                for v in &mut data[base..base + inner] {
                    *v += bv.data()[j];
                }
            }
        }
        let y = Tensor { shape: x.shape().to_vec(), data };
        Ok(self.tape.push(y, &[self.id, b.id], move |g| vec![Some(g.clone()), Some(reduce_to_axis(g, axis))]))
    }

    pub fn scale(self, s: T) -> Var<'t, T> {
        let y = self.value().map(|v| v * s);
        self.tape.push(y, &[self.id], move |g| vec![Some(g.map(|v| v * s))])
    }

    pub fn add_scalar(self, s: T) -> Var<'t, T> {
        let y = self.value().map(|v| v + s);
        self.tape.push(y, &[self.id], |g| vec![Some(g.clone())])
    }

    /// Adds a constant tensor (no gradient flows to it).
    pub fn add_const(self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let y = self.value().zip_map(c, |a, b| a + b)?;
        Ok(self.tape.push(y, &[self.id], |g| vec![Some(g.clone())]))
    }

    /// Multiplies by a constant tensor (no gradient flows to it).
    pub fn mul_const(self, c: &Tensor<T>) -> Result<Var<'t, T>> {
        let y = self.value().zip_map(c, |a, b| a * b)?;
        let c = c.clone();
        Ok(self.tape.push(y, &[self.id], move |g| vec![Some(g.zip_map(&c, |a, b| a * b).expect("shape"))]))
    }

    pub fn relu(self) -> Var<'t, T> {
        self.elementwise(|v| v.max(T::zero()), |x, _| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'t, T> {
        self.elementwise(kernels::gelu, |x, _| kernels::gelu_grad(x))
    }

    pub fn exp(self) -> Var<'t, T> {
        self.elementwise(|v| v.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'t, T> {
        self.elementwise(|v| v.ln(), |x, _| T::one() / x)
    }

    pub fn square(self) -> Var<'t, T> {
        self.elementwise(|v| v * v, |x, _| T::c(2.0) * x)
    }

    pub fn sum(self) -> Var<'t, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.tape.push(Tensor::scalar(x.sum()), &[self.id], move |g| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(self) -> Var<'t, T> {
        let n = T::c(self.value().len() as f64);
        self.sum().scale(T::one() / n)
    }

    /// Mean over the last axis; the axis is removed.
    pub fn mean_last(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape(format!("mean_last needs rank >= 2, got {:?}", x.shape())));
        }
        let len = *x.shape().last().unwrap();
        let inv = T::one() / T::c(len as f64);
        let data: Vec<T> = x.data().chunks(len).map(|c| c.iter().copied().sum::<T>() * inv).collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        let full = x.shape().to_vec();
        Ok(self.tape.push(Tensor { shape, data }, &[self.id], move |g| {
            let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v * inv, len)).collect();
            vec![Some(Tensor { shape: full.clone(), data })]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.tape.push(y, &[self.id], move |g| vec![Some(g.clone().reshape(&orig).expect("shape"))]))
    }

    pub fn permute(self, perm: &[usize]) -> Result<Var<'t, T>> {
        check_perm(perm, self.value().rank())?;
        let y = self.value().permute(perm)?;
        let inv = inverse_perm(perm);
        Ok(self.tape.push(y, &[self.id], move |g| vec![Some(g.permute(&inv).expect("perm"))]))
    }

    /// `[m×k] · [k×n]`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul of {:?} and {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let y = Tensor { shape: vec![m, n], data: kernels::bgemm(a.data(), b.data(), 1, m, k, n, false, false) };
        Ok(self.tape.push(y, &[self.id, other.id], move |g| {
            let ga = kernels::bgemm(g.data(), b.data(), 1, m, n, k, false, true);
            let gb = kernels::bgemm(a.data(), g.data(), 1, k, m, n, true, false);
            vec![Some(Tensor { shape: vec![m, k], data: ga }), Some(Tensor { shape: vec![k, n], data: gb })]
        }))
    }

    /// Batched product `[B,m,k] · [B,k,n]`, or `[B,m,k] · [B,n,k]ᵀ` when
    /// `transpose_rhs`.
    pub fn bmm(self, other: Var<'t, T>, transpose_rhs: bool) -> Result<Var<'t, T>> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let ok = a.rank() == 3 && b.rank() == 3 && a.shape()[0] == b.shape()[0];
        let (bsz, m, k) = (a.shape()[0], a.shape()[1], a.shape().get(2).copied().unwrap_or(0));
        let (kb, n) = if transpose_rhs {
            (b.shape().get(2).copied().unwrap_or(0), b.shape()[1])
        } else {
            (b.shape()[1], b.shape().get(2).copied().unwrap_or(0))
        };
        if !ok || k != kb {
            return Err(Error::shape(format!(
                "bmm of {:?} and {:?} (transpose_rhs={transpose_rhs})",
                a.shape(),
                b.shape()
            )));
        }
        let y = Tensor { shape: vec![bsz, m, n], data: kernels::bgemm(a.data(), b.data(), bsz, m, k, n, false, transpose_rhs) };
        let b_shape = b.shape().to_vec();
        Ok(self.tape.push(y, &[self.id, other.id], move |g| {
            let ga = kernels::bgemm(g.data(), b.data(), bsz, m, n, k, false, !transpose_rhs);
            let gb = if transpose_rhs {
                // d(B) = gᵀ A : [n×m]·[m×k]
                kernels::bgemm(g.data(), a.data(), bsz, n, m, k, true, false)
            } else {
                kernels::bgemm(a.data(), g.data(), bsz, k, m, n, true, false)
            };
            vec![
                Some(Tensor { shape: vec![bsz, m, k], data: ga }),
                Some(Tensor { shape: b_shape.clone(), data: gb }),
            ]
        }))
    }

    /// `x · W + b` over the last axis of `x`; `W` is `[c_in × c_out]`.
    pub fn linear(self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Var<'t, T>> {
        let shape = self.shape();
        let c_in = *shape.last().ok_or_else(|| Error::shape("linear on a scalar"))?;
        let ws = w.shape();
        if ws.len() != 2 || ws[0] != c_in {
            return Err(Error::shape(format!("linear weight {ws:?} for input {shape:?}")));
        }
        let rows = shape.iter().product::<usize>() / c_in;
        let mut y = self.reshape(&[rows, c_in])?.matmul(w)?;
        if let Some(b) = b {
            y = y.add_bias(b, 1)?;
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = ws[1];
        y.reshape(&out_shape)
    }

    pub fn softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(format!("softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let shape = x.shape().to_vec();
        let y = Tensor { shape: shape.clone(), data: kernels::softmax(x.data(), &shape, axis) };
        let yv = y.clone();
        Ok(self.tape.push(y, &[self.id], move |g| {
            let (outer, len, inner) = kernels::split_axis(&shape, axis);
            let mut gx = vec![T::zero(); yv.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = T::zero();
                    for j in 0..len {
                        dot += g.data()[base + j * inner] * yv.data()[base + j * inner];
                    }
                    for j in 0..len {
                        let ix = base + j * inner;
                        gx[ix] = yv.data()[ix] * (g.data()[ix] - dot);
                    }
                }
            }
            vec![Some(Tensor { shape: shape.clone(), data: gx })]
        }))
    }

    pub fn log_softmax(self, axis: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape(format!("log_softmax axis {axis} out of range for {:?}", x.shape())));
        }
        let shape = x.shape().to_vec();
        let p = kernels::softmax(x.data(), &shape, axis);
        let (outer, len, inner) = kernels::split_axis(&shape, axis);
        let mut data = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(x.data()[base + j * inner]);
                }
                let lse = mx + (0..len).map(|j| (x.data()[base + j * inner] - mx).exp()).sum::<T>().ln();
                for j in 0..len {
                    data[base + j * inner] = x.data()[base + j * inner] - lse;
                }
            }
        }
        Ok(self.tape.push(Tensor { shape: shape.clone(), data }, &[self.id], move |g| {
            let mut gx = vec![T::zero(); p.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let s: T = (0..len).map(|j| g.data()[base + j * inner]).sum();
                    for j in 0..len {
                        let ix = base + j * inner;
                        gx[ix] = g.data()[ix] - p[ix] * s;
                    }
                }
            }
            vec![Some(Tensor { shape: shape.clone(), data: gx })]
        }))
    }

    /// Cross-correlation of `[N, C_in, spatial]` with `[C_out, C_in, kernel]`
    /// for 2 or 3 spatial axes.
    pub fn conv(self, w: Var<'t, T>, stride: &[usize], pad: &[usize]) -> Result<Var<'t, T>> {
        self.same_tape(&w)?;
        let (x, wt) = (self.value(), w.value());
        let g = conv_geom(x.shape(), wt.shape(), stride, pad)?;
        let mut out_shape = vec![g.batch, g.c_out];
        out_shape.extend_from_slice(&g.output[3 - (x.rank() - 2)..]);
        let y = Tensor { shape: out_shape, data: kernels::conv_forward(x.data(), wt.data(), &g) };
        Ok(self.tape.push(y, &[self.id, w.id], move |gout| {
            let gx = kernels::conv_backward_input(gout.data(), wt.data(), &g);
            let gw = kernels::conv_backward_weight(gout.data(), x.data(), &g);
            vec![
                Some(Tensor { shape: x.shape().to_vec(), data: gx }),
                Some(Tensor { shape: wt.shape().to_vec(), data: gw }),
            ]
        }))
    }

    /// Transposed convolution with stride equal to the kernel extent; weight
    /// `[C_in, C_out, kernel]`. Output extents are input extents times kernel.
    pub fn upconv(self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&w)?;
        let (x, wt) = (self.value(), w.value());
        let sp = spatial3(x.shape())?;
        let ws = wt.shape();
        if ws.len() != x.rank() || ws[0] != x.shape()[1] {
            return Err(Error::shape(format!(
                "transposed conv weight {ws:?} for input {:?}",
                x.shape()
            )));
        }
        let kernel = if ws.len() == 4 { [1, ws[2], ws[3]] } else { [ws[2], ws[3], ws[4]] };
        let g = UpGeom { batch: x.shape()[0], c_in: ws[0], c_out: ws[1], input: sp, kernel };
        let out = g.output();
        let mut out_shape = vec![g.batch, g.c_out];
        out_shape.extend_from_slice(&out[3 - (x.rank() - 2)..]);
        let y = Tensor { shape: out_shape, data: kernels::upconv_forward(x.data(), wt.data(), &g) };
        Ok(self.tape.push(y, &[self.id, w.id], move |gout| {
            let gx = kernels::upconv_backward_input(gout.data(), wt.data(), &g);
            let gw = kernels::upconv_backward_weight(gout.data(), x.data(), &g);
            vec![
                Some(Tensor { shape: x.shape().to_vec(), data: gx }),
                Some(Tensor { shape: wt.shape().to_vec(), data: gw }),
            ]
        }))
    }

    /// Max pooling with stride equal to `kernel` (one extent per spatial axis).
    pub fn maxpool(self, kernel: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let sp = spatial3(x.shape())?;
        if kernel.len() != x.rank() - 2 || kernel.contains(&0) {
            return Err(Error::shape(format!("pool kernel {kernel:?} for input {:?}", x.shape())));
        }
        let k3 = if kernel.len() == 2 { [1, kernel[0], kernel[1]] } else { [kernel[0], kernel[1], kernel[2]] };
        let planes = x.shape()[0] * x.shape()[1];
        let (vals, arg, out) = kernels::maxpool_forward(x.data(), planes, sp, k3);
        let mut out_shape = x.shape()[..2].to_vec();
        out_shape.extend_from_slice(&out[3 - kernel.len()..]);
        let in_shape = x.shape().to_vec();
        let iv: usize = sp.iter().product();
        let ov: usize = out.iter().product();
        Ok(self.tape.push(Tensor { shape: out_shape, data: vals }, &[self.id], move |g| {
            let mut gx = vec![T::zero(); planes * iv];
            for p in 0..planes {
                for o in 0..ov {
                    gx[p * iv + arg[p * ov + o]] += g.data()[p * ov + o];
                }
            }
            vec![Some(Tensor { shape: in_shape.clone(), data: gx })]
        }))
    }

    /// Per-channel batch normalization of `[N, C, ...]`.
    pub fn batchnorm(self, gamma: Var<'t, T>, beta: Var<'t, T>, mode: BnMode<'_, T>) -> Result<BnOutput<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let x = self.value();
        if x.rank() < 2 {
            return Err(Error::shape(format!("batchnorm input {:?}", x.shape())));
        }
        let c = x.shape()[1];
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape(format!(
                "batchnorm parameters {:?}/{:?} for {c} channels",
                gm.shape(),
                bt.shape()
            )));
        }
        let n = x.shape()[0];
        let inner: usize = x.shape()[2..].iter().product();
        let count = n * inner;
        let eps = T::c(NORM_EPS);
        let (mean, var, batch_stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s += x.data()[(b * c + ch) * inner..][..inner].iter().copied().sum::<T>();
                    }
                    let mu = s / T::c(count as f64);
                    let mut ss = T::zero();
                    for b in 0..n {
                        ss += x.data()[(b * c + ch) * inner..][..inner].iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
                    }
                    mean[ch] = mu;
                    var[ch] = ss / T::c(count as f64);
                }
                let unbiased: Vec<T> = var
                    .iter()
                    .map(|&v| if count > 1 { v * T::c(count as f64 / (count - 1) as f64) } else { v })
                    .collect();
                let stats = (Tensor { shape: vec![c], data: mean.clone() }, Tensor { shape: vec![c], data: unbiased });
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.shape() != [c] || var.shape() != [c] {
                    return Err(Error::shape("running statistics do not match channel count"));
                }
                (mean.data().to_vec(), var.data().to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for i in base..base + inner {
                    xhat[i] = (x.data()[i] - mean[ch]) * inv_std[ch];
                    y[i] = gm.data()[ch] * xhat[i] + bt.data()[ch];
                }
            }
        }
        let train = batch_stats.is_some();
        let shape = x.shape().to_vec();
        let yv = self.tape.push(Tensor { shape: shape.clone(), data: y }, &[self.id, gamma.id, beta.id], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for ch in 0..c {
                let mut sum_g = T::zero();
                let mut sum_gx = T::zero();
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        sum_g += gd[i];
                        sum_gx += gd[i] * xhat[i];
                    }
                }
                ggamma[ch] = sum_gx;
                gbeta[ch] = sum_g;
                let gm_ch = gm.data()[ch];
                let m = T::c(count as f64);
                for b in 0..n {
                    let base = (b * c + ch) * inner;
                    for i in base..base + inner {
                        gx[i] = if train {
                            gm_ch * inv_std[ch] * (gd[i] - sum_g / m - xhat[i] * sum_gx / m)
                        } else {
                            gm_ch * inv_std[ch] * gd[i]
                        };
                    }
                }
            }
            vec![
                Some(Tensor { shape: shape.clone(), data: gx }),
                Some(Tensor { shape: vec![c], data: ggamma }),
                Some(Tensor { shape: vec![c], data: gbeta }),
            ]
        });
        Ok(BnOutput { y: yv, batch_stats })
    }

    /// Layer normalization over the last axis.
    pub fn layernorm(self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&gamma)?;
        self.same_tape(&beta)?;
        let x = self.value();
        let c = *x.shape().last().ok_or_else(|| Error::shape("layernorm on scalar"))?;
        let (gm, bt) = (gamma.value(), beta.value());
        if gm.shape() != [c] || bt.shape() != [c] {
            return Err(Error::shape(format!("layernorm parameters for width {c}")));
        }
        let eps = T::c(NORM_EPS);
        let rows = x.len() / c;
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut y = vec![T::zero(); x.len()];
        let cf = T::c(c as f64);
        for r in 0..rows {
            let row = &x.data()[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / cf;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / cf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mu) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = gm.data()[j] * h + bt.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.tape.push(Tensor { shape: shape.clone(), data: y }, &[self.id, gamma.id, beta.id], move |g| {
            let gd = g.data();
            let mut gx = vec![T::zero(); gd.len()];
            let mut ggamma = vec![T::zero(); c];
            let mut gbeta = vec![T::zero(); c];
            for r in 0..rows {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..c {
                    let i = r * c + j;
                    let dh = gd[i] * gm.data()[j];
                    s1 += dh;
                    s2 += dh * xhat[i];
                    ggamma[j] += gd[i] * xhat[i];
                    gbeta[j] += gd[i];
                }
                for j in 0..c {
                    let i = r * c + j;
                    let dh = gd[i] * gm.data()[j];
                    gx[i] = inv_std[r] * (dh - s1 / cf - xhat[i] * s2 / cf);
                }
            }
            vec![
                Some(Tensor { shape: shape.clone(), data: gx }),
                Some(Tensor { shape: vec![c], data: ggamma }),
                Some(Tensor { shape: vec![c], data: gbeta }),
            ]
        }))
    }

    /// Gathers rows of width `shape.last()`: output row `r` copies input row
    /// `idx[r]`, or is zero for [`kernels::PAD`]. `out_shape` must hold
    /// `idx.len()` rows of the same width.
    pub fn gather_rows(self, idx: Rc<Vec<usize>>, out_shape: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let width = *x.shape().last().ok_or_else(|| Error::shape("gather on scalar"))?;
        let rows = x.len() / width;
        if out_shape.last() != Some(&width) || out_shape.iter().product::<usize>() != idx.len() * width {
            return Err(Error::shape(format!(
                "gather of {} rows (width {width}) into {out_shape:?}",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i != kernels::PAD && i >= rows) {
            return Err(Error::shape(format!("gather row {bad} out of {rows}")));
        }
        let y = Tensor { shape: out_shape.to_vec(), data: kernels::gather_rows(x.data(), width, &idx) };
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(y, &[self.id], move |g| {
            vec![Some(Tensor { shape: in_shape.clone(), data: kernels::scatter_rows(g.data(), width, &idx, rows) })]
        }))
    }

    /// Scales each row (last axis) to unit Euclidean norm. A zero row is an error.
    pub fn l2_normalize_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let e = *x.shape().last().ok_or_else(|| Error::shape("normalize on scalar"))?;
        let mut norms = Vec::with_capacity(x.len() / e);
        for (r, row) in x.data().chunks(e).enumerate() {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if !(n > T::zero()) || !n.is_finite() {
                return Err(Error::Numeric(format!("row {r} has zero or non-finite norm")));
            }
            norms.push(n);
        }
        let y: Vec<T> = x.data().chunks(e).zip(&norms).flat_map(|(row, &n)| row.iter().map(move |&v| v / n)).collect();
        let yv = y.clone();
        let shape = x.shape().to_vec();
        Ok(self.tape.push(Tensor { shape: shape.clone(), data: y }, &[self.id], move |g| {
            let mut gx = vec![T::zero(); yv.len()];
            for (r, &n) in norms.iter().enumerate() {
                let (yr, gr) = (&yv[r * e..(r + 1) * e], &g.data()[r * e..(r + 1) * e]);
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for j in 0..e {
                    gx[r * e + j] = (gr[j] - yr[j] * dot) / n;
                }
            }
            vec![Some(Tensor { shape: shape.clone(), data: gx })]
        }))
    }
}

/// Concatenates variables along `axis`.
pub fn concat<'t, T: Scalar>(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
    let tape = first.tape;
    for p in parts {
        first.same_tape(p)?;
    }
    let values: Vec<Rc<Tensor<T>>> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
    let y = Tensor::concat(&refs, axis)?;
    let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(tape.push(y, &ids, move |g| {
        let outer: usize = shapes[0][..axis].iter().product();
        let inner: usize = shapes[0][axis + 1..].iter().product();
        let total: usize = shapes.iter().map(|s| s[axis]).sum();
        let mut out = Vec::with_capacity(shapes.len());
        let mut offset = 0;
        for s in &shapes {
            let block = s[axis] * inner;
            let mut data = Vec::with_capacity(outer * block);
            for o in 0..outer {
                let start = o * total * inner + offset;
                data.extend_from_slice(&g.data()[start..start + block]);
            }
            offset += block;
            out.push(Some(Tensor { shape: s.clone(), data }));
        }
        out
    }))
}

pub(crate) fn conv_geom(x: &[usize], w: &[usize], stride: &[usize], pad: &[usize]) -> Result<ConvGeom> {
    let sp = spatial3(x)?;
    let nsp = x.len() - 2;
    if w.len() != x.len() || stride.len() != nsp || pad.len() != nsp {
        return Err(Error::shape(format!(
            "conv input {x:?}, kernel {w:?}, stride {stride:?}, pad {pad:?} have inconsistent ranks"
        )));
    }
    if w[1] != x[1] {
        return Err(Error::shape(format!("conv kernel {w:?} expects {} input channels, input {x:?} has {}", w[1], x[1])));
    }
    let lift = |v: &[usize], fill: usize| -> [usize; 3] {
        if v.len() == 2 {
            [fill, v[0], v[1]]
        } else {
            [v[0], v[1], v[2]]
        }
    };
    let kernel = lift(&w[2..], 1);
    ConvGeom::new(x[0], x[1], w[0], sp, kernel, lift(stride, 1), lift(pad, 0)).ok_or_else(|| {
        Error::shape(format!("kernel {w:?} larger than padded input {x:?} (pad {pad:?}) or zero stride"))
    })
}
