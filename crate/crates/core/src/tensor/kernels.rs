//! Raw compute kernels on flat slices. Every parallel kernel assigns each
//! output element to exactly one task and sums in a fixed order, so results
//! are bitwise identical for any thread count.

use rayon::prelude::*;

use super::Scalar;

/// Sentinel for a gathered row that reads as zeros (padding).
pub const PAD: usize = usize::MAX;

/// Shape bookkeeping for a 3-axis cross-correlation. Two-dimensional
/// convolutions use a unit depth with unit kernel, stride and zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        c_in: usize,
        c_out: usize,
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Option<Self> {
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * pad[a];
            if kernel[a] > padded || stride[a] == 0 {
                return None;
            }
            output[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Some(ConvGeom { batch, c_in, c_out, input, kernel, stride, pad, output })
    }

    fn in_vol(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vol(&self) -> usize {
        self.output.iter().product()
    }

    fn k_vol(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// Output positions `o` with `0 <= o*stride + k - pad < len`.
fn valid(out: usize, stride: usize, k: usize, pad: usize, len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad > k { (len + pad - k).div_ceil(stride) } else { 0 };
    (lo.min(out), hi.min(out))
}

/// Upper bound on column-matrix elements per slab.
const COL_BUDGET: usize = 1 << 21;

/// Output-depth slabs `[d0, d1)` whose column matrices fit [`COL_BUDGET`].
fn slabs(g: &ConvGeom) -> Vec<(usize, usize)> {
    let plane = g.output[1] * g.output[2];
    let per = (COL_BUDGET / (g.c_in * g.k_vol() * plane).max(1)).max(1);
    (0..g.output[0]).step_by(per).map(|d0| (d0, (d0 + per).min(g.output[0]))).collect()
}

/// Visits every (column row, output row segment, input row segment) of one
/// sample's slab; `f(row, out_offset, in_offset, lo, hi)` covers output
/// columns `lo..hi` of that segment.
fn for_each_tap(g: &ConvGeom, d0: usize, d1: usize, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    let (iv, kv) = (g.in_vol(), g.k_vol());
    let [i0, i1, i2] = g.input;
    let [o0, o1, o2] = g.output;
    let [k0, k1, k2] = g.kernel;
    let [s0, s1, _] = g.stride;
    let [p0, p1, p2] = g.pad;
    for ic in 0..g.c_in {
        for kd in 0..k0 {
            let (d_lo, d_hi) = valid(o0, s0, kd, p0, i0);
            for kh in 0..k1 {
                let (h_lo, h_hi) = valid(o1, s1, kh, p1, i1);
                for kw in 0..k2 {
                    let (w_lo, w_hi) = valid(o2, g.stride[2], kw, p2, i2);
                    let row = ic * kv + (kd * k1 + kh) * k2 + kw;
                    for od in d_lo.max(d0)..d_hi.min(d1) {
                        let id = od * s0 + kd - p0;
                        for oh in h_lo..h_hi {
                            let ih = oh * s1 + kh - p1;
                            f(row, ((od - d0) * o1 + oh) * o2, ic * iv + (id * i1 + ih) * i2, w_lo, w_hi);
                        }
                    }
                }
            }
        }
    }
}

/// Column matrix `[c_in·k_vol, n]` of one sample's output slab.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, d0: usize, d1: usize, cols: &mut Vec<T>) -> usize {
    let n = (d1 - d0) * g.output[1] * g.output[2];
    cols.clear();
    cols.resize(g.c_in * g.k_vol() * n, T::zero());
    let (s2, p2, k2) = (g.stride[2], g.pad[2], g.kernel[2]);
    for_each_tap(g, d0, d1, |row, o, i, lo, hi| {
        let kw = row % k2;
        let dst = &mut cols[row * n + o..][..hi];
        for ow in lo..hi {
            dst[ow] = x[i + ow * s2 + kw - p2];
        }
    });
    n
}

/// Scatter-adds a column matrix back onto one sample's input gradient.
fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, d0: usize, d1: usize, gin: &mut [T]) {
    let n = (d1 - d0) * g.output[1] * g.output[2];
    let (s2, p2, k2) = (g.stride[2], g.pad[2], g.kernel[2]);
    for_each_tap(g, d0, d1, |row, o, i, lo, hi| {
        let kw = row % k2;
        let src = &cols[row * n + o..][..hi];
        for ow in lo..hi {
            gin[i + ow * s2 + kw - p2] += src[ow];
        }
    });
}

/// Rows `d0·plane..d1·plane` of every channel of a `[c, ov]` block.
fn slab_rows<T: Scalar>(x: &[T], c: usize, ov: usize, start: usize, n: usize) -> Vec<T> {
    (0..c).flat_map(|ch| x[ch * ov + start..][..n].iter().copied()).collect()
}

/// Cross-correlation as per-slab column matrices times the weight matrix.
pub fn conv_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (iv, ov) = (g.in_vol(), g.out_vol());
    let rows = g.c_in * g.k_vol();
    let plane = g.output[1] * g.output[2];
    let mut out = vec![T::zero(); g.batch * g.c_out * ov];
    out.par_chunks_mut(g.c_out * ov).enumerate().for_each(|(b, ob)| {
        let xb = &x[b * g.c_in * iv..][..g.c_in * iv];
        let mut cols = Vec::new();
        let mut tmp = Vec::new();
        for (d0, d1) in slabs(g) {
            let n = im2col(xb, g, d0, d1, &mut cols);
            tmp.clear();
            tmp.resize(g.c_out * n, T::zero());
            gemm(w, &cols, &mut tmp, g.c_out, rows, n, false, false);
            for oc in 0..g.c_out {
                ob[oc * ov + d0 * plane..][..n].copy_from_slice(&tmp[oc * n..][..n]);
            }
        }
    });
    out
}

pub fn conv_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let (iv, ov) = (g.in_vol(), g.out_vol());
    let rows = g.c_in * g.k_vol();
    let plane = g.output[1] * g.output[2];
    let mut gin = vec![T::zero(); g.batch * g.c_in * iv];
    gin.par_chunks_mut(g.c_in * iv).enumerate().for_each(|(b, gb)| {
        let gob = &gout[b * g.c_out * ov..][..g.c_out * ov];
        let mut gcols = Vec::new();
        for (d0, d1) in slabs(g) {
            let n = (d1 - d0) * plane;
            let gs = slab_rows(gob, g.c_out, ov, d0 * plane, n);
            gcols.clear();
            gcols.resize(rows * n, T::zero());
            gemm(w, &gs, &mut gcols, rows, g.c_out, n, true, false);
            col2im_add(&gcols, g, d0, d1, gb);
        }
    });
    gin
}

pub fn conv_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &ConvGeom) -> Vec<T> {
    let (iv, ov) = (g.in_vol(), g.out_vol());
    let rows = g.c_in * g.k_vol();
    let plane = g.output[1] * g.output[2];
    let mut gw = vec![T::zero(); g.c_out * rows];
    let mut cols = Vec::new();
    for b in 0..g.batch {
        let xb = &x[b * g.c_in * iv..][..g.c_in * iv];
        let gob = &gout[b * g.c_out * ov..][..g.c_out * ov];
        for (d0, d1) in slabs(g) {
            let n = im2col(xb, g, d0, d1, &mut cols);
            let gs = slab_rows(gob, g.c_out, ov, d0 * plane, n);
            gemm(&gs, &cols, &mut gw, g.c_out, n, rows, false, true);
        }
    }
    gw
}

/// Transposed convolution with stride equal to kernel (non-overlapping
/// upsampling). Weight layout `[C_in, C_out, k0, k1, k2]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UpGeom {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub input: [usize; 3],
    pub kernel: [usize; 3],
}

impl UpGeom {
    pub fn output(&self) -> [usize; 3] {
        [
            self.input[0] * self.kernel[0],
            self.input[1] * self.kernel[1],
            self.input[2] * self.kernel[2],
        ]
    }
}

pub fn upconv_forward<T: Scalar>(x: &[T], w: &[T], g: &UpGeom) -> Vec<T> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [_, o1, o2] = g.output();
    let iv = i0 * i1 * i2;
    let kv = k0 * k1 * k2;
    let ov = iv * kv;
    let mut out = vec![T::zero(); g.batch * g.c_out * ov];
    out.par_chunks_mut(ov).enumerate().for_each(|(idx, o)| {
        let (b, oc) = (idx / g.c_out, idx % g.c_out);
        for ic in 0..g.c_in {
            let xin = &x[(b * g.c_in + ic) * iv..][..iv];
            let wk = &w[(ic * g.c_out + oc) * kv..][..kv];
            for a in 0..k0 {
                for bb in 0..k1 {
                    for c in 0..k2 {
                        let wv = wk[(a * k1 + bb) * k2 + c];
                        for d in 0..i0 {
                            for h in 0..i1 {
                                let orow = &mut o[((d * k0 + a) * o1 + h * k1 + bb) * o2..][..o2];
                                let irow = &xin[(d * i1 + h) * i2..][..i2];
                                for (wi, &v) in irow.iter().enumerate() {
                                    orow[wi * k2 + c] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub fn upconv_backward_input<T: Scalar>(gout: &[T], w: &[T], g: &UpGeom) -> Vec<T> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [_, o1, o2] = g.output();
    let iv = i0 * i1 * i2;
    let kv = k0 * k1 * k2;
    let ov = iv * kv;
    let mut gin = vec![T::zero(); g.batch * g.c_in * iv];
    gin.par_chunks_mut(iv).enumerate().for_each(|(idx, gi)| {
        let (b, ic) = (idx / g.c_in, idx % g.c_in);
        for oc in 0..g.c_out {
            let go = &gout[(b * g.c_out + oc) * ov..][..ov];
            let wk = &w[(ic * g.c_out + oc) * kv..][..kv];
            for a in 0..k0 {
                for bb in 0..k1 {
                    for c in 0..k2 {
                        let wv = wk[(a * k1 + bb) * k2 + c];
                        for d in 0..i0 {
                            for h in 0..i1 {
                                let grow = &go[((d * k0 + a) * o1 + h * k1 + bb) * o2..][..o2];
                                let irow = &mut gi[(d * i1 + h) * i2..][..i2];
                                for (wi, v) in irow.iter_mut().enumerate() {
                                    *v += wv * grow[wi * k2 + c];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub fn upconv_backward_weight<T: Scalar>(gout: &[T], x: &[T], g: &UpGeom) -> Vec<T> {
    let [i0, i1, i2] = g.input;
    let [k0, k1, k2] = g.kernel;
    let [_, o1, o2] = g.output();
    let iv = i0 * i1 * i2;
    let kv = k0 * k1 * k2;
    let ov = iv * kv;
    let mut gw = vec![T::zero(); g.c_in * g.c_out * kv];
    gw.par_chunks_mut(g.c_out * kv).enumerate().for_each(|(ic, gwi)| {
        for oc in 0..g.c_out {
            for a in 0..k0 {
                for bb in 0..k1 {
                    for c in 0..k2 {
                        let mut acc = T::zero();
                        for b in 0..g.batch {
                            let xin = &x[(b * g.c_in + ic) * iv..][..iv];
                            let go = &gout[(b * g.c_out + oc) * ov..][..ov];
                            for d in 0..i0 {
                                for h in 0..i1 {
                                    let grow = &go[((d * k0 + a) * o1 + h * k1 + bb) * o2..][..o2];
                                    let irow = &xin[(d * i1 + h) * i2..][..i2];
                                    for (wi, &v) in irow.iter().enumerate() {
                                        acc += v * grow[wi * k2 + c];
                                    }
                                }
                            }
                        }
                        gwi[oc * kv + (a * k1 + bb) * k2 + c] = acc;
                    }
                }
            }
        }
    });
    gw
}

/// Max pooling with stride equal to kernel. Odd extents are padded with
/// negative infinity on the high side. Returns the pooled values and, per
/// output element, the flat in-plane index of its (first) maximum.
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    input: [usize; 3],
    kernel: [usize; 3],
) -> (Vec<T>, Vec<usize>, [usize; 3]) {
    let out = [
        input[0].div_ceil(kernel[0]),
        input[1].div_ceil(kernel[1]),
        input[2].div_ceil(kernel[2]),
    ];
    let iv: usize = input.iter().product();
    let ov: usize = out.iter().product();
    let mut vals = vec![T::zero(); planes * ov];
    let mut arg = vec![0usize; planes * ov];
    vals.par_chunks_mut(ov)
        .zip(arg.par_chunks_mut(ov))
        .enumerate()
        .for_each(|(p, (v, a))| {
            let xin = &x[p * iv..][..iv];
            for od in 0..out[0] {
                for oh in 0..out[1] {
                    for ow in 0..out[2] {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        for kd in 0..kernel[0] {
                            let d = od * kernel[0] + kd;
                            if d >= input[0] {
                                continue;
                            }
                            for kh in 0..kernel[1] {
                                let h = oh * kernel[1] + kh;
                                if h >= input[1] {
                                    continue;
                                }
                                for kw in 0..kernel[2] {
                                    let w = ow * kernel[2] + kw;
                                    if w >= input[2] {
                                        continue;
                                    }
                                    let i = (d * input[1] + h) * input[2] + w;
                                    if best_i == usize::MAX || xin[i] > best {
                                        best = xin[i];
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        let o = (od * out[1] + oh) * out[2] + ow;
                        v[o] = best;
                        a[o] = best_i;
                    }
                }
            }
        });
    (vals, arg, out)
}

/// Dot product with eight interleaved partial sums, combined in a fixed
/// order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `C = op(A) · op(B)` for one matrix pair; `A` is `[m×k]` (or `[k×m]` when
/// `ta`), `B` is `[k×n]` (or `[n×k]` when `tb`). Accumulates into `c`.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, ta: bool, tb: bool) {
    let row = |i: usize, ci: &mut [T]| match (ta, tb) {
        (false, false) => {
            for p in 0..k {
                let av = a[i * k + p];
                for (cv, &bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        (false, true) => {
            let ar = &a[i * k..(i + 1) * k];
            for (j, cv) in ci.iter_mut().enumerate() {
                *cv += dot(ar, &b[j * k..(j + 1) * k]);
            }
        }
        (true, false) => {
            for p in 0..k {
                let av = a[p * m + i];
                for (cv, &bv) in ci.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                    *cv += av * bv;
                }
            }
        }
        (true, true) => {
            for (j, cv) in ci.iter_mut().enumerate() {
                let mut acc = T::zero();
                for p in 0..k {
                    acc += a[p * m + i] * b[j * k + p];
                }
                *cv += acc;
            }
        }
    };
    if m * n * k >= 1 << 15 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(i, ci));
    } else {
        c.chunks_mut(n).enumerate().for_each(|(i, ci)| row(i, ci));
    }
}

/// Batched `gemm` over `batch` independent matrix pairs.
#[allow(clippy::too_many_arguments)]
pub fn bgemm<T: Scalar>(
    a: &[T],
    b: &[T],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<T> {
    let mut c = vec![T::zero(); batch * m * n];
    let (sa, sb) = (m * k, k * n);
    if batch == 1 {
        gemm(a, b, &mut c, m, k, n, ta, tb);
        return c;
    }
    c.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| {
        gemm(&a[i * sa..][..sa], &b[i * sb..][..sb], ci, m, k, n, ta, tb);
    });
    c
}

/// Row gather: output row `r` is input row `idx[r]`, or zeros for `PAD`.
pub fn gather_rows<T: Scalar>(x: &[T], width: usize, idx: &[usize]) -> Vec<T> {
    let mut out = vec![T::zero(); idx.len() * width];
    for (r, &src) in idx.iter().enumerate() {
        if src != PAD {
            out[r * width..(r + 1) * width].copy_from_slice(&x[src * width..(src + 1) * width]);
        }
    }
    out
}

/// Adjoint of [`gather_rows`]: scatter-add rows back to `rows` source rows.
pub fn scatter_rows<T: Scalar>(g: &[T], width: usize, idx: &[usize], rows: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * width];
    for (r, &dst) in idx.iter().enumerate() {
        if dst != PAD {
            for (o, &v) in out[dst * width..(dst + 1) * width].iter_mut().zip(&g[r * width..]) {
                *o += v;
            }
        }
    }
    out
}

/// `(outer, len, inner)` decomposition of `shape` around `axis`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for j in 0..len {
                mx = mx.max(x[base + j * inner]);
            }
            let mut s = T::zero();
            for j in 0..len {
                let e = (x[base + j * inner] - mx).exp();
                out[base + j * inner] = e;
                s += e;
            }
            for j in 0..len {
                out[base + j * inner] /= s;
            }
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    half * x * (T::one() + (k * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(GELU_K);
    let a = T::c(GELU_A);
    let half = T::c(0.5);
    let u = k * (x + a * x * x * x);
    let t = u.tanh();
    let du = k * (T::one() + T::c(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_brute_force() {
        for out in 1..6 {
            for stride in 1..4 {
                for k in 0..4 {
                    for pad in 0..3 {
                        for len in 1..8 {
                            let (lo, hi) = valid(out, stride, k, pad, len);
                            let brute: Vec<usize> = (0..out)
                                .filter(|&o| {
                                    let i = (o * stride + k) as isize - pad as isize;
                                    i >= 0 && (i as usize) < len
                                })
                                .collect();
                            let got: Vec<usize> = (lo..hi).collect();
                            assert_eq!(got, brute, "out {out} s {stride} k {k} p {pad} len {len}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_pads_with_neg_infinity() {
        let x = [-5.0f64, -7.0, -1.0];
        let (v, a, out) = maxpool_forward(&x, 1, [1, 1, 3], [1, 1, 2]);
        assert_eq!(out, [1, 1, 2]);
        assert_eq!(v, vec![-5.0, -1.0]);
        assert_eq!(a, vec![0, 2]);
    }

    #[test]
    fn gemm_transpose_flags_agree() {
        let a: Vec<f64> = (0..6).map(|i| i as f64 * 0.5 - 1.0).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|i| (i as f64).sin()).collect(); // 3x4
        let at: Vec<f64> = (0..6).map(|i| a[(i % 2) * 3 + i / 2]).collect(); // 3x2
        let bt: Vec<f64> = (0..12).map(|i| b[(i % 3) * 4 + i / 3]).collect(); // 4x3
        let mut c0 = vec![0.0; 8];
        gemm(&a, &b, &mut c0, 2, 3, 4, false, false);
        for (ta, tb, aa, bb) in [(true, false, &at, &b), (false, true, &a, &bt), (true, true, &at, &bt)] {
            let mut c = vec![0.0; 8];
            gemm(aa, bb, &mut c, 2, 3, 4, ta, tb);
            for (x, y) in c.iter().zip(&c0) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
