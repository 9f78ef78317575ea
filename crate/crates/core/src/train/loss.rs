//! Dice and cross-entropy losses, their gradients with respect to logits,
//! and hard-mask Dice scores.
//!
//! Probabilities and targets are cell-major with `k` values per cell. A
//! single class (`k == 1`) is a sigmoid foreground probability; otherwise
//! the `k` channels form a softmax with class 0 as background.

use crate::error::{invalid, Result};
use crate::grid::LabelGrid;
use crate::scalar::Real;

pub const DICE_SMOOTHING: f64 = 1e-5;

/// Probabilities are clamped this far away from 0 and 1 before logs.
const PROB_EPS: f64 = 1e-7;

fn check(probs_len: usize, target_len: usize, k: usize) -> Result<()> {
    if k == 0 || probs_len != target_len || probs_len % k != 0 {
        return Err(invalid(format!(
            "probabilities ({probs_len}) and targets ({target_len}) disagree for {k} classes"
        )));
    }
    Ok(())
}

/// `1 - (2 sum p t + s) / (sum p + sum t + s)` per class, averaged over the
/// `k` classes.
pub fn dice_loss<T: Real>(probs: &[T], target: &[T], k: usize) -> Result<T> {
    check(probs.len(), target.len(), k)?;
    let s = T::from_f64(DICE_SMOOTHING);
    let mut total = T::ZERO;
    for class in 0..k {
        let (mut inter, mut sp, mut st) = (T::ZERO, T::ZERO, T::ZERO);
        for (p, t) in probs.iter().skip(class).step_by(k).zip(target.iter().skip(class).step_by(k)) {
            inter += *p * *t;
            sp += *p;
            st += *t;
        }
        total += T::ONE - (T::from_f64(2.0) * inter + s) / (sp + st + s);
    }
    Ok(total / T::from_f64(k as f64))
}

/// Mean per-cell cross-entropy: binary form for `k == 1`, categorical otherwise.
pub fn bce_loss<T: Real>(probs: &[T], target: &[T], k: usize) -> Result<T> {
    check(probs.len(), target.len(), k)?;
    let lo = T::from_f64(PROB_EPS);
    let hi = T::from_f64(1.0 - PROB_EPS);
    let clamp = |p: T| if p < lo { lo } else if p > hi { hi } else { p };
    let cells = probs.len() / k;
    let mut total = T::ZERO;
    if k == 1 {
        for (&p, &t) in probs.iter().zip(target) {
            let p = clamp(p);
            total -= t * p.ln() + (T::ONE - t) * (T::ONE - p).ln();
        }
    } else {
        for (&p, &t) in probs.iter().zip(target) {
            total -= t * clamp(p).ln();
        }
    }
    Ok(total / T::from_f64(cells.max(1) as f64))
}

/// `(2 - lambda) * BCE + lambda * Dice`.
pub fn combined_loss<T: Real>(probs: &[T], target: &[T], k: usize, lambda_dice: f64) -> Result<T> {
    if !(0.0..=2.0).contains(&lambda_dice) {
        return Err(invalid(format!("lambda_dice {lambda_dice} outside [0, 2]")));
    }
    let bce = bce_loss(probs, target, k)?;
    let dice = dice_loss(probs, target, k)?;
    let l = T::from_f64(lambda_dice);
    Ok((T::from_f64(2.0) - l) * bce + l * dice)
}

/// Per-cell targets for labels: the foreground indicator for one class, a
/// one-hot vector otherwise.
pub fn one_hot<T: Real>(labels: &[u8], k: usize) -> Result<Vec<T>> {
    if k == 1 {
        return Ok(labels.iter().map(|&l| if l != 0 { T::ONE } else { T::ZERO }).collect());
    }
    let mut out = vec![T::ZERO; labels.len() * k];
    for (cell, &l) in labels.iter().enumerate() {
        if l as usize >= k {
            return Err(invalid(format!("label {l} out of range for {k} classes")));
        }
        out[cell * k + l as usize] = T::ONE;
    }
    Ok(out)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Probabilities from logits: sigmoid for one class, softmax over each cell
/// otherwise.
pub fn probabilities<T: Real>(logits: &[T], k: usize) -> Vec<T> {
    if k == 1 {
        return logits.iter().map(|&x| sigmoid(x)).collect();
    }
    let mut out = Vec::with_capacity(logits.len());
    for cell in logits.chunks_exact(k) {
        let m = cell.iter().copied().fold(cell[0], |a, b| if b > a { b } else { a });
        let start = out.len();
        let mut z = T::ZERO;
        for &x in cell {
            let e = (x - m).exp();
            z += e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / z;
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct LossOutput<T> {
    pub loss: T,
    pub bce: T,
    pub dice: T,
    /// dLoss/dlogit, same layout as the logits.
    pub grad: Vec<T>,
}

/// Combined loss evaluated from logits, with its gradient.
///
/// The cross-entropy uses the log-sum-exp form, so it is finite for any
/// logits and its gradient is `(p - t) / cells`.
pub fn logits_loss<T: Real>(logits: &[T], labels: &[u8], k: usize, lambda_dice: f64) -> Result<LossOutput<T>> {
    if k == 0 || logits.len() != labels.len() * k {
        return Err(invalid(format!(
            "{} logits for {} labels with {k} classes",
            logits.len(),
            labels.len()
        )));
    }
    if !(0.0..=2.0).contains(&lambda_dice) {
        return Err(invalid(format!("lambda_dice {lambda_dice} outside [0, 2]")));
    }
    let target: Vec<T> = one_hot(labels, k)?;
    let probs = probabilities(logits, k);
    let cells = T::from_f64(labels.len().max(1) as f64);

    let mut bce = T::ZERO;
    if k == 1 {
        for (&x, &t) in logits.iter().zip(&target) {
            let relu = if x > T::ZERO { x } else { T::ZERO };
            bce += relu - x * t + (T::ONE + (-x.abs()).exp()).ln();
        }
    } else {
        for (cell, t) in logits.chunks_exact(k).zip(target.chunks_exact(k)) {
            let m = cell.iter().copied().fold(cell[0], |a, b| if b > a { b } else { a });
            let lse = m + cell.iter().map(|&x| (x - m).exp()).sum::<T>().ln();
            for (&x, &tv) in cell.iter().zip(t) {
                bce += tv * (lse - x);
            }
        }
    }
    bce = bce / cells;

    // dDice/dp per class
    let s = T::from_f64(DICE_SMOOTHING);
    let two = T::from_f64(2.0);
    let kf = T::from_f64(k as f64);
    let mut dice = T::ZERO;
    let mut g_dice_p = vec![T::ZERO; probs.len()];
    for class in 0..k {
        let (mut inter, mut sp, mut st) = (T::ZERO, T::ZERO, T::ZERO);
        for i in (class..probs.len()).step_by(k) {
            inter += probs[i] * target[i];
            sp += probs[i];
            st += target[i];
        }
        let den = sp + st + s;
        let num = two * inter + s;
        dice += T::ONE - num / den;
        for i in (class..probs.len()).step_by(k) {
            g_dice_p[i] = -(two * target[i] * den - num) / (den * den) / kf;
        }
    }
    dice = dice / kf;

    let lam = T::from_f64(lambda_dice);
    let wb = two - lam;
    let mut grad = vec![T::ZERO; logits.len()];
    if k == 1 {
        for i in 0..logits.len() {
            let p = probs[i];
            grad[i] = wb * (p - target[i]) / cells + lam * g_dice_p[i] * p * (T::ONE - p);
        }
    } else {
        for (cell_idx, (g, p)) in grad.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
            let gd = &g_dice_p[cell_idx * k..(cell_idx + 1) * k];
            let t = &target[cell_idx * k..(cell_idx + 1) * k];
            let dot: T = p.iter().zip(gd).map(|(&a, &b)| a * b).sum();
            for j in 0..k {
                g[j] = wb * (p[j] - t[j]) / cells + lam * p[j] * (gd[j] - dot);
            }
        }
    }
    Ok(LossOutput {
        loss: wb * bce + lam * dice,
        bce,
        dice,
        grad,
    })
}

/// Intersection and sizes of one class in a prediction/target pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub predicted: usize,
    pub target: usize,
}

impl Overlap {
    pub fn add(&mut self, other: Overlap) {
        self.intersection += other.intersection;
        self.predicted += other.predicted;
        self.target += other.target;
    }

    /// `2|P n T| / (|P| + |T|)`, or `None` when the class is absent from both.
    pub fn dice(&self) -> Option<f64> {
        let denom = self.predicted + self.target;
        (denom > 0).then(|| 2.0 * self.intersection as f64 / denom as f64)
    }
}

pub fn class_overlap(pred: &LabelGrid, target: &LabelGrid, class: u8) -> Result<Overlap> {
    if pred.dims() != target.dims() {
        return Err(invalid(format!(
            "prediction {:?} and target {:?} differ in extents",
            pred.dims(),
            target.dims()
        )));
    }
    let mut o = Overlap::default();
    for (&p, &t) in pred.labels().iter().zip(target.labels()) {
        let (p, t) = (p == class, t == class);
        o.intersection += usize::from(p && t);
        o.predicted += usize::from(p);
        o.target += usize::from(t);
    }
    Ok(o)
}
