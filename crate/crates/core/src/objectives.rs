//! Segmentation losses and the evaluation Dice score.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probability clamp used by the cross-entropy term.
pub const CE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the Dice term; `1 - alpha` weighs cross-entropy.
    pub alpha: f64,
    pub dice_smooth: f64,
    /// Use only the foreground log-likelihood term in cross-entropy.
    pub ce_literal: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            dice_smooth: 1e-5,
            ce_literal: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if self.dice_smooth <= 0.0 {
            return Err(Error::Config("dice_smooth must be positive".into()));
        }
        Ok(())
    }
}

fn same_len(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.elem_count() != b.elem_count() {
        return Err(Error::Shape(format!(
            "prediction {:?} and truth {:?} differ in size",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// `1 - (2 sum(p g) + s) / (sum(p^2) + sum(g^2) + s)` over all elements.
pub fn dice_loss(probs: &Tensor, truth: &Tensor, smooth: f64) -> Result<Tensor> {
    same_len(probs, truth)?;
    let p = probs.flatten_all()?;
    let g = truth.flatten_all()?.to_dtype(p.dtype())?;
    let inter = (p.mul(&g)?.sum_all()? * 2.0)?;
    let denom = (p.sqr()?.sum_all()? + g.sqr()?.sum_all()?)?;
    let ratio = ((inter + smooth)? / (denom + smooth)?)?;
    Ok(ratio.affine(-1.0, 1.0)?)
}

fn check_two_class(probs: &Tensor, truth: &Tensor) -> Result<()> {
    let (n, k) = probs.dims2()?;
    if k != 2 || truth.elem_count() != n {
        return Err(Error::Shape(format!(
            "expected (N, 2) probabilities for {} labels, got {:?}",
            truth.elem_count(),
            probs.dims()
        )));
    }
    Ok(())
}

/// Mean over pixels of `-log p(true class)`, probabilities clamped to `[eps, 1 - eps]`.
pub fn ce_loss(probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    check_two_class(probs, truth)?;
    let g = truth.flatten_all()?.to_dtype(probs.dtype())?;
    let p_bg = probs.narrow(1, 0, 1)?.flatten_all()?;
    let p_fg = probs.narrow(1, 1, 1)?.flatten_all()?;
    let p_true = (p_fg.mul(&g)? + p_bg.mul(&g.affine(-1.0, 1.0)?)?)?;
    let nll = p_true.clamp(CE_EPS, 1.0 - CE_EPS)?.log()?.neg()?;
    Ok(nll.mean_all()?)
}

/// Foreground-only variant: mean over pixels of `-g log p_fg`.
pub fn ce_loss_literal(probs: &Tensor, truth: &Tensor) -> Result<Tensor> {
    check_two_class(probs, truth)?;
    let g = truth.flatten_all()?.to_dtype(probs.dtype())?;
    let p_fg = probs.narrow(1, 1, 1)?.flatten_all()?;
    let nll = p_fg.clamp(CE_EPS, 1.0 - CE_EPS)?.log()?.neg()?.mul(&g)?;
    Ok(nll.mean_all()?)
}

/// `alpha * Dice(p_fg, g) + (1 - alpha) * CE(p, g)` for `(N, 2)` probabilities.
pub fn segmentation_loss(probs: &Tensor, truth: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    check_two_class(probs, truth)?;
    let dice = dice_loss(&probs.narrow(1, 1, 1)?, truth, cfg.dice_smooth)?;
    let ce = if cfg.ce_literal {
        ce_loss_literal(probs, truth)?
    } else {
        ce_loss(probs, truth)?
    };
    Ok(((dice * cfg.alpha)? + (ce * (1.0 - cfg.alpha))?)?)
}

/// Softmax over the class axis of `(B, C, h, w)` logits.
pub fn class_probabilities(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(1)?.detach();
    let e = logits.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(1)?)?)
}

/// Training loss for a batch of `(B, 2, h, w)` logits and `(B, h, w)` masks:
/// Dice per sample averaged over the batch, cross-entropy averaged over all pixels.
pub fn batch_loss(logits: &Tensor, masks: &Tensor, cfg: &LossConfig) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if c != 2 || masks.dims() != [b, h, w] {
        return Err(Error::Shape(format!(
            "logits {:?} incompatible with masks {:?}",
            logits.dims(),
            masks.dims()
        )));
    }
    let probs = class_probabilities(logits)?;
    let mut dice = Vec::with_capacity(b);
    for i in 0..b {
        let fg = probs.get(i)?.get(1)?;
        dice.push(dice_loss(&fg, &masks.get(i)?, cfg.dice_smooth)?);
    }
    let dice = Tensor::stack(&dice, 0)?.mean_all()?;
    // (B, 2, h, w) -> (B*h*w, 2)
    let flat = probs.permute((0, 2, 3, 1))?.reshape((b * h * w, 2))?;
    let truth = masks.flatten_all()?;
    let ce = if cfg.ce_literal {
        ce_loss_literal(&flat, &truth)?
    } else {
        ce_loss(&flat, &truth)?
    };
    Ok(((dice * cfg.alpha)? + (ce * (1.0 - cfg.alpha))?)?)
}

/// Foreground mask from `(2, h, w)` logits: foreground probability above 0.5.
pub fn threshold_logits(logits: &Tensor) -> Result<Vec<u8>> {
    let diff = (logits.get(1)? - logits.get(0)?)?;
    let v: Vec<f64> = diff.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1()?;
    Ok(v.into_iter().map(|d| u8::from(d > 0.0)).collect())
}

/// `2 |P ∩ G| / (|P| + |G|)`, defined as 1 when both masks are empty.
pub fn dice_score(pred: &[u8], truth: &[u8]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "prediction has {} pixels, truth has {}",
            pred.len(),
            truth.len()
        )));
    }
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(truth) {
        let (a, b) = (a > 0, b > 0);
        inter += usize::from(a && b);
        p += usize::from(a);
        g += usize::from(b);
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Per-age means and their unweighted average.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgeReport {
    pub per_age: Vec<f64>,
    pub avg: f64,
}

pub fn aggregate_by_age(scores: &[(usize, f64)], num_ages: usize) -> Result<AgeReport> {
    let mut sums = vec![0.0; num_ages];
    let mut counts = vec![0usize; num_ages];
    for &(age, s) in scores {
        if age >= num_ages {
            return Err(Error::UnknownAge { age, num_ages });
        }
        sums[age] += s;
        counts[age] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyAgeGroup(missing));
    }
    let per_age: Vec<f64> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let avg = per_age.iter().sum::<f64>() / num_ages as f64;
    Ok(AgeReport { per_age, avg })
}
