//! Central finite-difference oracle for reverse-mode gradients in f64.

use std::collections::BTreeMap;

use mehtc::attention::{block_var, wmca_var, AttentionParams, AttentionVars, BlockConfig, ScoreScaling};
use mehtc::model::{build_model, forward_var, ModelConfig};
use mehtc::nn::{collect_grads, Ctx, ParamStore};
use mehtc::tensor::ops::{concat, BnMode};
use mehtc::tensor::{Tape, Tensor, Var};
use mehtc::train::dice_ce_loss;
use mehtc::windowing::Magnification;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-4;
pub const OP_TOL: f64 = 1e-4;
pub const MODEL_TOL: f64 = 1e-3;

pub fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, so ReLU kinks are never crossed.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.1..1.0);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// `‖a − n‖ / (‖a‖ + ‖n‖)`. Gradients that vanish identically (the key
/// bias under softmax shift invariance) leave round-off on both sides, so
/// norms below 1e-8 count as agreement.
pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale < 1e-8 { 0.0 } else { diff / scale }
}

/// Largest relative error over all inputs of a scalar function of leaves.
pub fn grad_error<F>(inputs: Vec<Tensor<f64>>, f: F) -> f64
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        f(&tape, &vars).value().item()
    };
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = f(&tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        let mut numeric = vec![0.0; inputs[i].len()];
        for (j, g) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += H;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= H;
            *g = (eval(&plus) - eval(&minus)) / (2.0 * H);
        }
        worst = worst.max(rel_err(analytic.data(), &numeric));
    }
    worst
}

/// Weighted sum with fixed random weights, turning any output into a scalar.
fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>, seed: u64) -> Var<'t, f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = rand_t(&y.shape(), &mut rng);
    y.mul(tape.constant(w)).unwrap().sum()
}

/// Attention parameters with O(1) perturbations so softmax is far from
/// uniform.
fn attention_inputs(c: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    let p = AttentionParams::<f64>::init(c, 2, rng);
    p.tensors.iter().map(|t| Tensor::from_fn(t.shape(), |i| t.data()[i] + rng.random_range(-0.5..0.5))).collect()
}

pub fn dense_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    vec![
        ("matmul", grad_error(vec![rand_t(&[3, 4], &mut rng), rand_t(&[4, 5], &mut rng)], |t, v| project(t, v[0].matmul(v[1]).unwrap(), 2))),
        ("bmm", grad_error(vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[2, 5, 4], &mut rng)], |t, v| project(t, v[0].bmm(v[1], true).unwrap(), 3))),
        (
            "linear",
            grad_error(vec![rand_t(&[2, 3, 4], &mut rng), rand_t(&[4, 2], &mut rng), rand_t(&[2], &mut rng)], |t, v| {
                project(t, v[0].linear(v[1], Some(v[2])).unwrap(), 4)
            }),
        ),
    ]
}

pub fn conv_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut distinct: Vec<f64> = (0..2 * 4 * 6).map(|i| i as f64 * 0.01).collect();
    for i in (1..distinct.len()).rev() {
        distinct.swap(i, rng.random_range(0..=i));
    }
    vec![
        (
            "conv2d",
            grad_error(vec![rand_t(&[2, 2, 5, 4], &mut rng), rand_t(&[3, 2, 3, 3], &mut rng)], |t, v| {
                project(t, v[0].conv(v[1], &[1, 1], &[1, 1]).unwrap(), 6)
            }),
        ),
        (
            "conv2d_strided",
            grad_error(vec![rand_t(&[1, 2, 5, 6], &mut rng), rand_t(&[2, 2, 3, 3], &mut rng)], |t, v| {
                project(t, v[0].conv(v[1], &[2, 2], &[1, 0]).unwrap(), 7)
            }),
        ),
        (
            "conv3d",
            grad_error(vec![rand_t(&[1, 2, 3, 4, 3], &mut rng), rand_t(&[2, 2, 3, 3, 3], &mut rng)], |t, v| {
                project(t, v[0].conv(v[1], &[1, 1, 1], &[1, 1, 1]).unwrap(), 8)
            }),
        ),
        (
            "transpose_conv2d",
            grad_error(vec![rand_t(&[1, 3, 2, 3], &mut rng), rand_t(&[3, 2, 2, 2], &mut rng)], |t, v| project(t, v[0].upconv(v[1]).unwrap(), 9)),
        ),
        (
            "transpose_conv3d",
            grad_error(vec![rand_t(&[1, 2, 2, 2, 2], &mut rng), rand_t(&[2, 2, 2, 2, 2], &mut rng)], |t, v| project(t, v[0].upconv(v[1]).unwrap(), 10)),
        ),
        // distinct values: no pooling window has a tie
        ("maxpool", grad_error(vec![Tensor::new(vec![1, 2, 4, 6], distinct).unwrap()], |t, v| project(t, v[0].maxpool(&[2, 2]).unwrap(), 11))),
    ]
}

pub fn norm_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_t(&[3, 2, 4], &mut rng);
    let g = rand_t(&[2], &mut rng);
    let b = rand_t(&[2], &mut rng);
    let mean = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
    let var = Tensor::new(vec![2], vec![0.5, 1.5]).unwrap();
    vec![
        (
            "batchnorm_train",
            grad_error(vec![x.clone(), g.clone(), b.clone()], |t, v| project(t, v[0].batchnorm(v[1], v[2], BnMode::Train).unwrap().y, 13)),
        ),
        (
            "batchnorm_eval",
            grad_error(vec![x, g, b], |t, v| project(t, v[0].batchnorm(v[1], v[2], BnMode::Eval { mean: &mean, var: &var }).unwrap().y, 14)),
        ),
        (
            "layernorm",
            grad_error(vec![rand_t(&[3, 4], &mut rng), rand_t(&[4], &mut rng), rand_t(&[4], &mut rng)], |t, v| {
                project(t, v[0].layernorm(v[1], v[2]).unwrap(), 22)
            }),
        ),
        ("l2_normalize", grad_error(vec![rand_t(&[3, 4], &mut rng)], |t, v| project(t, v[0].l2_normalize_rows().unwrap(), 23))),
    ]
}

pub fn activation_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let pos = Tensor::from_fn(&[6], |_| rng.random_range(0.5..2.0));
    vec![
        ("relu", grad_error(vec![away_from_zero(&[4, 5], &mut rng)], |t, v| project(t, v[0].relu(), 16))),
        ("gelu", grad_error(vec![rand_t(&[4, 5], &mut rng)], |t, v| project(t, v[0].gelu(), 17))),
        ("exp", grad_error(vec![rand_t(&[6], &mut rng)], |t, v| project(t, v[0].exp(), 18))),
        ("ln", grad_error(vec![pos], |t, v| project(t, v[0].ln(), 19))),
        ("softmax", grad_error(vec![rand_t(&[2, 4, 3], &mut rng)], |t, v| project(t, v[0].softmax(1).unwrap(), 20))),
        ("log_softmax", grad_error(vec![rand_t(&[3, 5], &mut rng)], |t, v| project(t, v[0].log_softmax(1).unwrap(), 21))),
        (
            "concat",
            grad_error(vec![rand_t(&[2, 1, 3], &mut rng), rand_t(&[2, 2, 3], &mut rng)], |t, v| project(t, concat(&[v[0], v[1]], 1).unwrap(), 24)),
        ),
    ]
}

pub fn attention_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let c = 4;
    let mut inputs = vec![rand_t(&[2, 3, c], &mut rng), rand_t(&[2, 6, c], &mut rng)];
    inputs.extend(attention_inputs(c, &mut rng));
    let mut out = vec![(
        "wmca",
        grad_error(inputs, |t, v| {
            let p = AttentionVars { heads: 2, vars: v[2..].to_vec() };
            let o = wmca_var(v[0], v[1], &p, ScoreScaling::InvSqrtDk).unwrap();
            let w = project(t, o.weights, 27);
            project(t, o.out, 26).add(w).unwrap()
        }),
    )];
    for (name, shifted) in [("transformer_block", false), ("transformer_block_shifted", true)] {
        let cfg = BlockConfig { window: [1, 2, 2], magnification: Magnification([1, 2, 2]), shifted, heads: 2, channels: c, scaling: ScoreScaling::InvSqrtDk };
        let mut inputs = vec![rand_t(&[1, 1, 4, 4, c], &mut rng)];
        inputs.extend(attention_inputs(c, &mut rng));
        out.push((
            name,
            grad_error(inputs, |t, v| {
                let p = AttentionVars { heads: 2, vars: v[1..].to_vec() };
                project(t, block_var(v[0], &cfg, &p).unwrap(), 29)
            }),
        ));
    }
    out
}

pub fn loss_cases() -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let labels: Vec<u16> = (0..2 * 6).map(|_| rng.random_range(0..3)).collect();
    vec![(
        "dice_ce_loss",
        grad_error(vec![rand_t(&[2, 3, 2, 3], &mut rng)], |_, v| dice_ce_loss(v[0].softmax(1).unwrap(), &labels).unwrap().0),
    )]
}

pub fn all_operator_cases() -> Vec<(&'static str, f64)> {
    [dense_cases(), conv_cases(), norm_cases(), activation_cases(), attention_cases(), loss_cases()].concat()
}

/// Full tiny 2D network in train mode: 20 sampled parameter entries.
pub fn full_model_error() -> f64 {
    let cfg = ModelConfig::mehtc(2, 1, 2, vec![2, 4, 8, 16, 32], 2, 1);
    let model = build_model::<f64>(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = rand_t(&[2, 1, 16, 16], &mut rng);
    let labels: Vec<u16> = (0..2 * 256).map(|i| u16::from((i % 16) > 7)).collect();
    let loss_of = |store: &ParamStore<f64>| -> (f64, BTreeMap<String, Tensor<f64>>) {
        let tape = Tape::new();
        let ctx = Ctx::new(&tape, store, true);
        let probs = forward_var(&cfg, &ctx, tape.constant(x.clone())).unwrap();
        let (loss, _) = dice_ce_loss(probs, &labels).unwrap();
        let v = loss.value().item();
        let g = tape.backward(loss).unwrap();
        (v, collect_grads(store, &g))
    };
    let (_, grads) = loss_of(&model.store);
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for _ in 0..20 {
        let name = &names[rng.random_range(0..names.len())];
        let j = rng.random_range(0..model.store.get(name).unwrap().len());
        let mut plus = model.store.clone();
        plus.get_mut(name).unwrap().data_mut()[j] += H;
        let mut minus = model.store.clone();
        minus.get_mut(name).unwrap().data_mut()[j] -= H;
        numeric.push((loss_of(&plus).0 - loss_of(&minus).0) / (2.0 * H));
        analytic.push(grads.get(name).map(|g| g.data()[j]).unwrap_or(0.0));
    }
    rel_err(&analytic, &numeric)
}
