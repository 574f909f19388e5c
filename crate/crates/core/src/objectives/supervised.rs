//! Cross-entropy and soft Dice.

use crate::error::{Error, Result};
use crate::nn::ForwardOut;
use crate::scalar::Scalar;
use crate::volume::{LabelMap, ProbMap, VoxelMask};

pub const DICE_EPS: f64 = 1e-5;
/// Lower clamp on probabilities inside the log.
pub const CE_CLAMP: f64 = 1e-12;

fn check<T: Scalar>(p: &ProbMap<T>, y: &LabelMap, mask: Option<&VoxelMask>) -> Result<()> {
    if p.shape() != y.shape() {
        return Err(Error::shape(format!("probabilities {} vs labels {}", p.shape(), y.shape())));
    }
    if p.classes() != y.classes() {
        return Err(Error::shape(format!("{} probability classes vs {} label classes", p.classes(), y.classes())));
    }
    if let Some(m) = mask {
        if m.shape() != p.shape() {
            return Err(Error::shape(format!("mask {} vs probabilities {}", m.shape(), p.shape())));
        }
    }
    Ok(())
}

fn kept(mask: Option<&VoxelMask>, v: usize) -> bool {
    mask.map_or(true, |m| m.get(v))
}

/// Soft Dice loss averaged over the foreground classes `1..K`, restricted to
/// `mask` when given: `1 - (2 sum p y + eps) / (sum p + sum y + eps)`.
pub fn dice_loss_grad<T: Scalar>(p: &ProbMap<T>, y: &LabelMap, mask: Option<&VoxelMask>) -> Result<(T, Vec<T>)> {
    check(p, y, mask)?;
    let n = p.voxels();
    let k = p.classes();
    let eps = T::lit(DICE_EPS);
    let two = T::lit(2.0);
    let scale = T::lit(1.0 / (k - 1) as f64);
    let mut grad = vec![T::zero(); n * k];
    let mut loss = T::zero();
    for c in 1..k {
        let plane = p.plane(c);
        let (mut inter, mut psum, mut ysum) = (T::zero(), T::zero(), T::zero());
        for v in (0..n).filter(|&v| kept(mask, v)) {
            let yv = usize::from(y.values()[v] as usize == c);
            psum += plane[v];
            if yv == 1 {
                inter += plane[v];
                ysum += T::one();
            }
        }
        let num = two * inter + eps;
        let den = psum + ysum + eps;
        loss += scale * (T::one() - num / den);
        let g = &mut grad[c * n..(c + 1) * n];
        for v in (0..n).filter(|&v| kept(mask, v)) {
            let yv = if y.values()[v] as usize == c { T::one() } else { T::zero() };
            g[v] = -scale * (two * yv * den - num) / (den * den);
        }
    }
    Ok((loss, grad))
}

pub fn dice_loss<T: Scalar>(p: &ProbMap<T>, y: &LabelMap) -> Result<T> {
    Ok(dice_loss_grad(p, y, None)?.0)
}

/// Mean of `-ln max(p[y], 1e-12)` over the voxels in `mask` (all voxels when
/// `None`). An empty mask gives 0.
pub fn ce_loss_grad<T: Scalar>(p: &ProbMap<T>, y: &LabelMap, mask: Option<&VoxelMask>) -> Result<(T, Vec<T>)> {
    check(p, y, mask)?;
    let n = p.voxels();
    let mut grad = vec![T::zero(); n * p.classes()];
    let count = mask.map_or(n, VoxelMask::count);
    if count == 0 {
        return Ok((T::zero(), grad));
    }
    let inv = T::lit(1.0 / count as f64);
    let clamp = T::lit(CE_CLAMP);
    let mut loss = T::zero();
    for v in (0..n).filter(|&v| kept(mask, v)) {
        let c = y.values()[v] as usize;
        let pv = p.get(v, c);
        if pv >= clamp {
            loss -= pv.ln();
            grad[c * n + v] = -inv / pv;
        } else {
            loss -= clamp.ln();
        }
    }
    Ok((loss * inv, grad))
}

pub fn ce_loss<T: Scalar>(p: &ProbMap<T>, y: &LabelMap, mask: Option<&VoxelMask>) -> Result<T> {
    Ok(ce_loss_grad(p, y, mask)?.0)
}

/// `(ce, dice, d(ce + dice)/dp)` in one pass over the inputs.
pub fn ce_dice_grad<T: Scalar>(p: &ProbMap<T>, y: &LabelMap, mask: Option<&VoxelMask>) -> Result<(T, T, Vec<T>)> {
    let (ce, mut g) = ce_loss_grad(p, y, mask)?;
    let (dice, gd) = dice_loss_grad(p, y, mask)?;
    g.iter_mut().zip(gd).for_each(|(a, b)| *a += b);
    Ok((ce, dice, g))
}

/// `ce + dice` for one labeled item.
pub fn supervised_loss<T: Scalar>(out: &ForwardOut<T>, y: &LabelMap) -> Result<T> {
    Ok(ce_loss(&out.probs, y, None)? + dice_loss(&out.probs, y)?)
}

/// Mean of [`supervised_loss`] over a labeled batch.
pub fn supervised_loss_batch<T: Scalar>(outs: &[ForwardOut<T>], ys: &[LabelMap]) -> Result<T> {
    if outs.is_empty() || outs.len() != ys.len() {
        return Err(Error::invalid(format!(
            "labeled batch needs matching non-empty outputs and labels, got {} and {}",
            outs.len(),
            ys.len()
        )));
    }
    let mut total = T::zero();
    for (o, y) in outs.iter().zip(ys) {
        total += supervised_loss(o, y)?;
    }
    Ok(total / T::lit(outs.len() as f64))
}
