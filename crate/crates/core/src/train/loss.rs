use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor, Var};

/// Smoothing term of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1e-5;
/// Probability floor inside the logarithm of the cross-entropy term.
pub const CE_FLOOR: f64 = 1e-12;

/// Components of [`dice_ce_loss`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossParts {
    /// `1 − mean foreground soft Dice`.
    pub dice: f64,
    pub ce: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.dice + self.ce
    }
}

fn check<T: Scalar>(probs: &Tensor<T>, target: &[u16]) -> Result<(usize, usize, usize)> {
    let s = probs.shape();
    if s.len() < 3 {
        return Err(Error::shape(format!("probabilities must be [N, C, spatial...], got {s:?}")));
    }
    let (n, c) = (s[0], s[1]);
    let v: usize = s[2..].iter().product();
    if c < 2 {
        return Err(Error::shape("need at least two classes"));
    }
    if target.len() != n * v {
        return Err(Error::shape(format!("{} target labels for {} voxels", target.len(), n * v)));
    }
    if let Some(&bad) = target.iter().find(|&&t| t as usize >= c) {
        return Err(Error::data(format!("target class {bad} not below class count {c}")));
    }
    Ok((n, c, v))
}

struct Sums {
    inter: Vec<f64>,
    psum: Vec<f64>,
    ysum: Vec<f64>,
}

fn class_sums<T: Scalar>(p: &[T], target: &[u16], n: usize, c: usize, v: usize) -> Sums {
    let mut s = Sums { inter: vec![0.0; c], psum: vec![0.0; c], ysum: vec![0.0; c] };
    for b in 0..n {
        for k in 0..c {
            let plane = &p[(b * c + k) * v..(b * c + k + 1) * v];
            let labels = &target[b * v..(b + 1) * v];
            for (&pv, &t) in plane.iter().zip(labels) {
                let pv = pv.f64();
                s.psum[k] += pv;
                if t as usize == k {
                    s.inter[k] += pv;
                    s.ysum[k] += 1.0;
                }
            }
        }
    }
    s
}

fn parts<T: Scalar>(p: &[T], target: &[u16], n: usize, c: usize, v: usize, sums: &Sums) -> LossParts {
    let mean_dice = (1..c)
        .map(|k| (2.0 * sums.inter[k] + DICE_SMOOTH) / (sums.psum[k] + sums.ysum[k] + DICE_SMOOTH))
        .sum::<f64>()
        / (c - 1) as f64;
    let mut ce = 0.0;
    for b in 0..n {
        for (i, &t) in target[b * v..(b + 1) * v].iter().enumerate() {
            ce -= p[(b * c + t as usize) * v + i].f64().max(CE_FLOOR).ln();
        }
    }
    LossParts { dice: 1.0 - mean_dice, ce: ce / (n * v) as f64 }
}

/// Soft Dice over foreground classes (batch pooled) plus mean voxel
/// cross-entropy, on probabilities `[N, C, spatial...]` and integer labels
/// in the same voxel order.
pub fn dice_ce_value<T: Scalar>(probs: &Tensor<T>, target: &[u16]) -> Result<LossParts> {
    let (n, c, v) = check(probs, target)?;
    let sums = class_sums(probs.data(), target, n, c, v);
    Ok(parts(probs.data(), target, n, c, v, &sums))
}

/// Differentiable [`dice_ce_value`]; returns the scalar loss and its parts.
pub fn dice_ce_loss<'t, T: Scalar>(probs: Var<'t, T>, target: &[u16]) -> Result<(Var<'t, T>, LossParts)> {
    let p = probs.value();
    let (n, c, v) = check(&p, target)?;
    let sums = class_sums(p.data(), target, n, c, v);
    let lp = parts(p.data(), target, n, c, v, &sums);
    let target = target.to_vec();
    let shape = p.shape().to_vec();
    let loss = probs.tape.push(Tensor::scalar(T::c(lp.total())), &[probs.id], move |g| {
        let g0 = g.item().f64();
        let fg = (c - 1) as f64;
        let m = (n * v) as f64;
        // d(soft dice_k)/dp = 2y/S - (2I + eps)/S^2 with S = sum p + sum y + eps
        let coef: Vec<(f64, f64)> = (0..c)
            .map(|k| {
                let s = sums.psum[k] + sums.ysum[k] + DICE_SMOOTH;
                (2.0 / s, (2.0 * sums.inter[k] + DICE_SMOOTH) / (s * s))
            })
            .collect();
        let mut gx = vec![T::zero(); n * c * v];
        for b in 0..n {
            for k in 1..c {
                let (a, q) = coef[k];
                for i in 0..v {
                    let y = if target[b * v + i] as usize == k { 1.0 } else { 0.0 };
                    gx[(b * c + k) * v + i] = T::c(-g0 * (a * y - q) / fg);
                }
            }
            for i in 0..v {
                let ix = (b * c + target[b * v + i] as usize) * v + i;
                let pv = p.data()[ix].f64();
                if pv > CE_FLOOR {
                    gx[ix] += T::c(-g0 / (m * pv));
                }
            }
        }
        vec![Some(Tensor::new(shape.clone(), gx).expect("gradient shape"))]
    });
    Ok((loss, lp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_near_zero() {
        let target = [0u16, 1, 1, 0];
        let p = Tensor::<f64>::from_fn(&[1, 2, 4], |i| if target[i % 4] as usize == i / 4 { 1.0 } else { 0.0 });
        assert!(dice_ce_value(&p, &target).unwrap().total() <= 1e-4);
    }

    #[test]
    fn uniform_ce_is_log_classes() {
        let p = Tensor::<f64>::full(&[2, 3, 5], 1.0 / 3.0);
        let target: Vec<u16> = (0..10).map(|i| (i % 3) as u16).collect();
        let lp = dice_ce_value(&p, &target).unwrap();
        assert!((lp.ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_class_is_rejected() {
        let p = Tensor::<f64>::full(&[1, 2, 2], 0.5);
        assert!(dice_ce_value(&p, &[0, 2]).is_err());
    }
}
