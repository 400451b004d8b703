//! Property checks shared by the proptest suites and the acceptance run.
//! Each returns `Err` with a description of the first violation.

use mehtc::attention::{attention_weights, transformer_block, wmca_var, AttentionParams, BlockConfig, ScoreScaling};
use mehtc::infer::{connected_components, largest_component, sliding_window_predict, InferenceConfig, Predictor};
use mehtc::tensor::kernels::PAD;
use mehtc::tensor::{Tape, Tensor};
use mehtc::windowing::{
    cyclic_shift, window_area_partition, window_merge, window_partition, Magnification, ShiftDirection, WindowPlan,
};
use mehtc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracle::oracle_components;

pub type Check = std::result::Result<(), String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

// ---- windowing ----

/// Map shape `[N, D, H, W, C]`, a window that fits, and a magnification.
pub fn draw_layout(rng: &mut ChaCha8Rng) -> ([usize; 5], [usize; 3], [usize; 3]) {
    let s = [rng.random_range(1..3), rng.random_range(1..6), rng.random_range(1..9), rng.random_range(1..9), rng.random_range(1..4)];
    let w = [rng.random_range(1..=s[1]), rng.random_range(1..=s[2]), rng.random_range(1..=s[3])];
    let m = [rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4)];
    (s, w, m)
}

pub fn merge_inverts_partition(shape: [usize; 5], window: [usize; 3], seed: u64) -> Check {
    let x = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let ws = window_partition(&x, window).map_err(|e| e.to_string())?;
    let back = window_merge(&ws, &shape).map_err(|e| e.to_string())?;
    ensure!(back.shape() == x.shape(), "merged shape {:?} vs {:?}", back.shape(), x.shape());
    ensure!(
        back.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
        "merge is not bitwise for {shape:?} window {window:?}"
    );
    Ok(())
}

pub fn base_and_searching_pair_up(shape: [usize; 5], window: [usize; 3], mag: [usize; 3]) -> Check {
    let x = Tensor::<f64>::zeros(&shape);
    let base = window_partition(&x, window).map_err(|e| e.to_string())?;
    let search = window_area_partition(&x, window, Magnification(mag)).map_err(|e| e.to_string())?;
    ensure!(base.len() == search.len(), "{} base vs {} searching windows for {shape:?} {window:?} {mag:?}", base.len(), search.len());
    let mu = Magnification(mag).mu();
    ensure!(search.plan.tokens_per_window() == base.plan.tokens_per_window() * mu, "searching window is not mu times the base window");
    Ok(())
}

pub fn base_windows_cover_once(shape: [usize; 5], window: [usize; 3]) -> Check {
    let [n, d, h, w, _] = shape;
    let plan = WindowPlan::base(n, [d, h, w], window).map_err(|e| e.to_string())?;
    let mut cover = vec![0u32; n * d * h * w];
    for &src in plan.index().iter().filter(|&&s| s != PAD) {
        cover[src] += 1;
    }
    ensure!(cover.iter().all(|&c| c == 1), "coverage mask is not all ones for {shape:?} {window:?}");
    Ok(())
}

pub fn searching_contains_base(shape: [usize; 5], window: [usize; 3], mag: [usize; 3]) -> Check {
    let [n, d, h, w, _] = shape;
    let base = WindowPlan::base(n, [d, h, w], window).map_err(|e| e.to_string())?;
    let search = WindowPlan::searching(n, [d, h, w], window, Magnification(mag)).map_err(|e| e.to_string())?;
    let (bt, st) = (base.tokens_per_window(), search.tokens_per_window());
    let (bi, si) = (base.index(), search.index());
    for k in 0..base.count() {
        let rows = &si[k * st..(k + 1) * st];
        for &src in bi[k * bt..(k + 1) * bt].iter().filter(|&&s| s != PAD) {
            ensure!(rows.contains(&src), "window {k} misses token {src}");
        }
    }
    Ok(())
}

pub fn shift_round_trip(shape: [usize; 5], window: [usize; 3], seed: u64) -> Check {
    let x = random(&shape, &mut ChaCha8Rng::seed_from_u64(seed));
    let shift = [window[0] / 2, window[1] / 2, window[2] / 2];
    let y = cyclic_shift(&x, shift, ShiftDirection::Forward).map_err(|e| e.to_string())?;
    let back = cyclic_shift(&y, shift, ShiftDirection::Inverse).map_err(|e| e.to_string())?;
    ensure!(back.data() == x.data(), "shift by {shift:?} does not invert");
    Ok(())
}

// ---- attention ----

/// Parameters with O(1) projections so the weights are far from uniform.
pub fn perturbed_params(c: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttentionParams<f64> {
    let mut p = AttentionParams::init(c, heads, rng);
    for t in p.tensors.iter_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.7..0.7);
        }
    }
    p
}

fn cross(base: &Tensor<f64>, search: &Tensor<f64>, p: &AttentionParams<f64>) -> Tensor<f64> {
    let tape = Tape::inference();
    let vars = p.leaves(&tape);
    let o = wmca_var(tape.constant(base.clone()), tape.constant(search.clone()), &vars, ScoreScaling::InvSqrtDk).unwrap();
    (*o.out.value()).clone()
}

pub fn weight_rows_sum_to_one(seed: u64, h: usize, w: usize, win: usize, mag: usize, heads: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 2 * heads;
    let x = random(&[1, 1, h, w, c], &mut rng);
    let win = [1, win.min(h), win.min(w)];
    let m = Magnification([1, mag, mag]);
    let base = window_partition(&x, win).map_err(|e| e.to_string())?;
    let search = window_area_partition(&x, win, m).map_err(|e| e.to_string())?;
    let p = perturbed_params(c, heads, &mut rng);
    let a = attention_weights(&base, &search, &p, ScoreScaling::InvSqrtDk).map_err(|e| e.to_string())?;
    let s = a.shape().to_vec();
    ensure!(s[0] == base.len() * heads && s[2] == search.plan.tokens_per_window(), "weights shape {s:?}");
    for row in a.data().chunks(s[2]) {
        let sum: f64 = row.iter().sum();
        ensure!(row.iter().all(|&v| v >= 0.0) && (sum - 1.0).abs() < 1e-6, "row sums to {sum}");
    }
    Ok(())
}

pub fn key_value_permutation(seed: u64, s: usize, m: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c) = (2, 4);
    let base = random(&[n, s, c], &mut rng);
    let search = random(&[n, m, c], &mut rng);
    let p = perturbed_params(c, 2, &mut rng);
    let mut perm: Vec<usize> = (0..m).collect();
    for i in (1..m).rev() {
        perm.swap(i, rng.random_range(0..=i));
    }
    let shuffled = Tensor::from_fn(&[n, m, c], |i| {
        let (b, t, ch) = (i / (m * c), (i / c) % m, i % c);
        search.data()[(b * m + perm[t]) * c + ch]
    });
    let diff = cross(&base, &search, &p).max_abs_diff(&cross(&base, &shuffled, &p));
    ensure!(diff < 1e-6, "permuting keys and values moved the output by {diff:e}");
    Ok(())
}

/// Every query sees the same value vector, so the output is the closed form
/// `(t·Wv + bv)·Wo + bo` for any weights.
pub fn constant_values_pass_through(seed: u64, s: usize, m: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let base = random(&[1, s, c], &mut rng);
    let token = random(&[c], &mut rng);
    let search = Tensor::from_fn(&[1, m, c], |i| token.data()[i % c]);
    let p = perturbed_params(c, 2, &mut rng);
    let out = cross(&base, &search, &p);
    let proj = |x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
        (0..c).map(|j| b.data()[j] + (0..c).map(|i| x[i] * w.data()[i * c + j]).sum::<f64>()).collect()
    };
    let v = proj(token.data(), p.get("v.weight"), p.get("v.bias"));
    let expect = proj(&v, p.get("out.weight"), p.get("out.bias"));
    for row in out.data().chunks(c) {
        for (a, b) in row.iter().zip(&expect) {
            ensure!((a - b).abs() < 1e-12, "constant-value output {a} vs {b}");
        }
    }
    Ok(())
}

pub fn zeroed_residual_is_identity(seed: u64, shifted: bool, d: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let x = random(&[1, d, 4, 4, c], &mut rng);
    let mut p = perturbed_params(c, 2, &mut rng);
    for name in ["out.weight", "out.bias", "mlp2.weight", "mlp2.bias"] {
        let t = p.get_mut(name);
        *t = Tensor::zeros(t.shape());
    }
    let cfg = BlockConfig {
        window: [1, 2, 2],
        magnification: Magnification([1, 2, 2]),
        shifted,
        heads: 2,
        channels: c,
        scaling: ScoreScaling::InvSqrtDk,
    };
    let y = transformer_block(&x, &cfg, &p).map_err(|e| e.to_string())?;
    ensure!(y.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "zeroed block is not the identity");
    Ok(())
}

// ---- inference ----

/// Same class probabilities at every voxel.
pub struct Constant(pub Vec<f32>);

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

pub fn constant_model_fixed_point(sp: &[usize], patch: &[usize], step: f64) -> Check {
    let probs = vec![0.1f32, 0.3, 0.6];
    let mut shape = vec![1];
    shape.extend_from_slice(sp);
    let vol = Tensor::<f32>::from_fn(&shape, |i| (i % 7) as f32);
    let cfg = InferenceConfig { patch: patch.to_vec(), step, postprocess: vec![] };
    let out = sliding_window_predict(&Constant(probs.clone()), &vol, &cfg).map_err(|e| e.to_string())?;
    let v: usize = sp.iter().product();
    for (k, &p) in probs.iter().enumerate() {
        ensure!(out.data()[k * v..(k + 1) * v].iter().all(|&x| x == p), "class {k} is not exactly {p} for {sp:?}");
    }
    Ok(())
}

pub fn channel_sums(probs: &Tensor<f32>) -> Check {
    let k = probs.shape()[0];
    let v = probs.len() / k;
    for i in 0..v {
        let s: f32 = (0..k).map(|c| probs.data()[c * v + i]).sum();
        ensure!((s - 1.0).abs() < 1e-5, "voxel {i} sums to {s}");
    }
    Ok(())
}

/// `largest_component` against union-find; ties go to the component met
/// first in scan order.
pub fn largest_component_matches_oracle(labels: &[u16], s: [usize; 3], cls: u16) -> Check {
    let mask: Vec<bool> = labels.iter().map(|&l| l == cls).collect();
    let roots = oracle_components(&mask, s);
    let mut sizes: std::collections::HashMap<usize, usize> = Default::default();
    let mut first: Vec<usize> = Vec::new();
    for i in (0..mask.len()).filter(|&i| mask[i]) {
        let e = sizes.entry(roots[i]).or_insert(0);
        if *e == 0 {
            first.push(roots[i]);
        }
        *e += 1;
    }
    let keep = first.iter().copied().fold(None, |best: Option<usize>, r| match best {
        Some(b) if sizes[&b] >= sizes[&r] => Some(b),
        _ => Some(r),
    });
    let expect: Vec<u16> = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| if l == cls && Some(roots[i]) != keep { 0 } else { l })
        .collect();
    let got = largest_component(labels, s, cls).map_err(|e| e.to_string())?;
    ensure!(got == expect, "largest component differs from the oracle on {s:?}");
    ensure!(largest_component(&got, s, cls).map_err(|e| e.to_string())? == got, "largest_component is not idempotent");
    let kept: Vec<bool> = got.iter().map(|&l| l == cls).collect();
    ensure!(connected_components(&kept, s).1.len() <= 1, "more than one component left");
    Ok(())
}
