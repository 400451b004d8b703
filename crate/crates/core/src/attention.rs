//! Windowed multi-head cross-attention (W-MCA) and the transformer block
//! built around it.
//!
//! Queries come from base windows, keys and values from the enlarged
//! searching windows centered on them. A block runs
//! `[shift] → WP/WAP → norm → W-MCA → residual → norm → MLP(GELU) →
//! residual → merge → [unshift]` on a channel-last token map.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{trunc_normal, Ctx};
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::windowing::{ad, half_shift, Magnification, ShiftDirection, WindowKind, WindowPlan, WindowSet};

/// Divisor applied to query-key scores.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreScaling {
    /// `1/sqrt(d_k)`.
    #[default]
    InvSqrtDk,
    /// `1/d_k`.
    InvDk,
}

impl ScoreScaling {
    fn factor(self, dk: usize) -> f64 {
        match self {
            ScoreScaling::InvSqrtDk => 1.0 / (dk as f64).sqrt(),
            ScoreScaling::InvDk => 1.0 / dk as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    /// Base window extents `(D, H, W)`; `D = 1` for 2D maps.
    pub window: [usize; 3],
    pub magnification: Magnification,
    pub shifted: bool,
    pub heads: usize,
    pub channels: usize,
    #[serde(default)]
    pub scaling: ScoreScaling,
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::config(format!(
                "token width {} not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.window.contains(&0) || self.magnification.0.contains(&0) {
            return Err(Error::config("window extents and magnifications must be positive"));
        }
        Ok(())
    }
}

pub const MLP_RATIO: usize = 4;

/// Parameter names of one block, relative to its prefix.
pub const PARAM_NAMES: [&str; 16] = [
    "norm1.gamma",
    "norm1.beta",
    "q.weight",
    "q.bias",
    "k.weight",
    "k.bias",
    "v.weight",
    "v.bias",
    "out.weight",
    "out.bias",
    "norm2.gamma",
    "norm2.beta",
    "mlp1.weight",
    "mlp1.bias",
    "mlp2.weight",
    "mlp2.bias",
];

/// Block parameters. Projections are `[c_in × c_out]` matrices applied as
/// `x · W + b`; per-head projections are the column blocks of `q/k/v`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<T> {
    pub heads: usize,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> AttentionParams<T> {
    /// Truncated-normal projections (std 0.02), zero biases, unit norms.
    pub fn init(channels: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        let c = channels;
        let h = MLP_RATIO * c;
        let tensors = PARAM_NAMES
            .iter()
            .map(|name| match *name {
                "norm1.gamma" | "norm2.gamma" => Tensor::ones(&[c]),
                "norm1.beta" | "norm2.beta" => Tensor::zeros(&[c]),
                "q.weight" | "k.weight" | "v.weight" | "out.weight" => trunc_normal(&[c, c], 0.02, rng),
                "mlp1.weight" => trunc_normal(&[c, h], 0.02, rng),
                "mlp2.weight" => trunc_normal(&[h, c], 0.02, rng),
                "mlp1.bias" => Tensor::zeros(&[h]),
                _ => Tensor::zeros(&[c]),
            })
            .collect();
        AttentionParams { heads, tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        let i = PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter name");
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter name");
        &mut self.tensors[i]
    }

    pub fn channels(&self) -> usize {
        self.get("q.weight").shape()[0]
    }

    /// Fresh leaves on `tape`, in [`PARAM_NAMES`] order.
    pub fn leaves<'t>(&self, tape: &'t Tape<T>) -> AttentionVars<'t, T> {
        AttentionVars { heads: self.heads, vars: self.tensors.iter().map(|t| tape.leaf(t.clone())).collect() }
    }
}

/// Block parameters bound to a tape.
#[derive(Clone, Debug)]
pub struct AttentionVars<'t, T: Scalar> {
    pub heads: usize,
    pub vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> AttentionVars<'t, T> {
    pub fn from_ctx(ctx: &Ctx<'t, T>, prefix: &str, heads: usize) -> Result<Self> {
        let vars = PARAM_NAMES
            .iter()
            .map(|n| ctx.p(&format!("{prefix}.{n}")))
            .collect::<Result<Vec<_>>>()?;
        Ok(AttentionVars { heads, vars })
    }

    fn get(&self, name: &str) -> Var<'t, T> {
        self.vars[PARAM_NAMES.iter().position(|n| *n == name).expect("known parameter name")]
    }
}

/// Output of [`wmca_var`]: projected attention output `[B, s, c]` and the
/// attention weights `[B·heads, s, μ·s]`.
pub struct WmcaOutput<'t, T: Scalar> {
    pub out: Var<'t, T>,
    pub weights: Var<'t, T>,
}

/// Splits `[B, L, c]` into heads `[B·heads, L, c/heads]`.
fn split_heads<'t, T: Scalar>(x: Var<'t, T>, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (b, l, c) = (s[0], s[1], s[2]);
    x.reshape(&[b, l, heads, c / heads])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, l, c / heads])
}

fn merge_heads<'t, T: Scalar>(x: Var<'t, T>, batch: usize, heads: usize) -> Result<Var<'t, T>> {
    let s = x.shape();
    let (l, dk) = (s[1], s[2]);
    x.reshape(&[batch, heads, l, dk])?.permute(&[0, 2, 1, 3])?.reshape(&[batch, l, heads * dk])
}

/// Cross-attention between base windows `[B, s, c]` and searching windows
/// `[B, m, c]`: per head `softmax(Q_ba K_seᵀ · scale) V_se`, heads
/// concatenated and projected by the output matrix.
pub fn wmca_var<'t, T: Scalar>(
    base: Var<'t, T>,
    search: Var<'t, T>,
    p: &AttentionVars<'t, T>,
    scaling: ScoreScaling,
) -> Result<WmcaOutput<'t, T>> {
    let (bs, ss) = (base.shape(), search.shape());
    if bs.len() != 3 || ss.len() != 3 || bs[0] != ss[0] || bs[2] != ss[2] {
        return Err(Error::shape(format!(
            "base windows {bs:?} and searching windows {ss:?} disagree in count or width"
        )));
    }
    let (batch, c) = (bs[0], bs[2]);
    let heads = p.heads;
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape(format!("width {c} not divisible by {heads} heads")));
    }
    let q = split_heads(base.linear(p.get("q.weight"), Some(p.get("q.bias")))?, heads)?;
    let k = split_heads(search.linear(p.get("k.weight"), Some(p.get("k.bias")))?, heads)?;
    let v = split_heads(search.linear(p.get("v.weight"), Some(p.get("v.bias")))?, heads)?;
    let scores = q.bmm(k, true)?.scale(T::c(scaling.factor(c / heads)));
    let weights = scores.softmax(2)?;
    let ctx = merge_heads(weights.bmm(v, false)?, batch, heads)?;
    let out = ctx.linear(p.get("out.weight"), Some(p.get("out.bias")))?;
    Ok(WmcaOutput { out, weights })
}

/// Window extents clipped to the map, so deep low-resolution stages use a
/// single window per axis instead of mostly padding.
pub fn effective_window(window: [usize; 3], source: [usize; 3]) -> [usize; 3] {
    [window[0].min(source[0]), window[1].min(source[1]), window[2].min(source[2])]
}

/// Transformer block on a channel-last map `[N, D, H, W, C]`.
pub fn block_var<'t, T: Scalar>(x: Var<'t, T>, cfg: &BlockConfig, p: &AttentionVars<'t, T>) -> Result<Var<'t, T>> {
    cfg.validate()?;
    let s = x.shape();
    if s.len() != 5 || s[4] != cfg.channels {
        return Err(Error::shape(format!(
            "block expects [N, D, H, W, {}], got {s:?}",
            cfg.channels
        )));
    }
    let source = [s[1], s[2], s[3]];
    let window = effective_window(cfg.window, source);
    let shift = half_shift(window);
    let shifted = cfg.shifted && shift.iter().any(|&v| v > 0);
    let x = if shifted { ad::shift(x, shift, ShiftDirection::Forward)? } else { x };
    let base_plan = WindowPlan::base(s[0], source, window)?;
    let search_plan = WindowPlan::searching(s[0], source, window, cfg.magnification)?;

    let normed = x.layernorm(p.get("norm1.gamma"), p.get("norm1.beta"))?;
    let base_raw = ad::partition(x, &base_plan)?;
    let base = ad::partition(normed, &base_plan)?;
    let search = ad::partition(normed, &search_plan)?;
    let h = base_raw.add(wmca_var(base, search, p, cfg.scaling)?.out)?;
    let mlp = h
        .layernorm(p.get("norm2.gamma"), p.get("norm2.beta"))?
        .linear(p.get("mlp1.weight"), Some(p.get("mlp1.bias")))?
        .gelu()
        .linear(p.get("mlp2.weight"), Some(p.get("mlp2.bias")))?;
    let out = h.add(mlp)?;
    let merged = ad::merge(out, &base_plan, cfg.channels)?;
    if shifted {
        ad::shift(merged, shift, ShiftDirection::Inverse)
    } else {
        Ok(merged)
    }
}

/// Transformer block on a `[N, C, spatial...]` feature map (2 or 3 spatial
/// axes); the map is moved to channel-last and back.
pub fn block_nchw<'t, T: Scalar>(x: Var<'t, T>, cfg: &BlockConfig, p: &AttentionVars<'t, T>) -> Result<Var<'t, T>> {
    let s = x.shape();
    match s.len() {
        4 => {
            let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
            let tokens = x.permute(&[0, 2, 3, 1])?.reshape(&[n, 1, h, w, c])?;
            block_var(tokens, cfg, p)?.reshape(&[n, h, w, c])?.permute(&[0, 3, 1, 2])
        }
        5 => block_var(x.permute(&[0, 2, 3, 4, 1])?, cfg, p)?.permute(&[0, 4, 1, 2, 3]),
        _ => Err(Error::shape(format!("feature map must be [N, C, H, W] or [N, C, D, H, W], got {s:?}"))),
    }
}

fn check_pair<T: Scalar>(base: &WindowSet<T>, search: &WindowSet<T>) -> Result<()> {
    if base.kind() != WindowKind::Base || search.kind() != WindowKind::Searching {
        return Err(Error::shape("wmca needs a base set and a searching set"));
    }
    if base.len() != search.len() || base.channels() != search.channels() {
        return Err(Error::shape(format!(
            "window counts {}/{} or widths {}/{} disagree",
            base.len(),
            search.len(),
            base.channels(),
            search.channels()
        )));
    }
    Ok(())
}

/// Plain-tensor W-MCA; the result keeps the base set's plan.
pub fn wmca<T: Scalar>(
    base: &WindowSet<T>,
    search: &WindowSet<T>,
    p: &AttentionParams<T>,
    scaling: ScoreScaling,
) -> Result<WindowSet<T>> {
    check_pair(base, search)?;
    let tape = Tape::inference();
    let vars = p.leaves(&tape);
    let out = wmca_var(tape.constant(base.windows.clone()), tape.constant(search.windows.clone()), &vars, scaling)?;
    Ok(WindowSet { windows: (*out.out.value()).clone(), plan: base.plan.clone() })
}

/// Attention weights `[n·heads, s, μ·s]` of [`wmca`].
pub fn attention_weights<T: Scalar>(
    base: &WindowSet<T>,
    search: &WindowSet<T>,
    p: &AttentionParams<T>,
    scaling: ScoreScaling,
) -> Result<Tensor<T>> {
    check_pair(base, search)?;
    let tape = Tape::inference();
    let vars = p.leaves(&tape);
    let out = wmca_var(tape.constant(base.windows.clone()), tape.constant(search.windows.clone()), &vars, scaling)?;
    Ok((*out.weights.value()).clone())
}

/// Plain-tensor transformer block on `[N, D, H, W, C]`.
pub fn transformer_block<T: Scalar>(features: &Tensor<T>, cfg: &BlockConfig, p: &AttentionParams<T>) -> Result<Tensor<T>> {
    let tape = Tape::inference();
    let vars = p.leaves(&tape);
    let y = block_var(tape.constant(features.clone()), cfg, &vars)?;
    Ok((*y.value()).clone())
}
