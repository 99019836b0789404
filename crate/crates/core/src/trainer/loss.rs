//! Segmentation loss: `(1−λ)·mean BCE + λ·(1 − Dice)`.
//!
//! Dice is computed over every pixel of the batch at once, with `ε`
//! smoothing in numerator and denominator.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-6;

fn check(n_pred: usize, n_truth: usize, lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("dice weight {lambda} outside [0, 1]")));
    }
    if n_pred != n_truth {
        return Err(Error::shape(
            "loss",
            format!("{n_pred} predictions vs {n_truth} labels"),
        ));
    }
    if n_pred == 0 {
        return Err(Error::shape("loss", "empty grid"));
    }
    Ok(())
}

fn dice(p: &[f64], t: &[f64]) -> (f64, f64, f64) {
    let inter: f64 = p.iter().zip(t).map(|(p, t)| p * t).sum();
    let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + DICE_EPS;
    ((2.0 * inter + DICE_EPS) / denom, inter, denom)
}

/// Loss on probabilities.
pub fn loss(pred: &[f64], truth: &[f64], lambda: f64) -> Result<f64> {
    check(pred.len(), truth.len(), lambda)?;
    let bce = pred
        .iter()
        .zip(truth)
        .map(|(&p, &t)| {
            let mut v = 0.0;
            if t != 0.0 {
                v -= t * p.ln();
            }
            if t != 1.0 {
                v -= (1.0 - t) * (1.0 - p).ln();
            }
            v
        })
        .sum::<f64>()
        / pred.len() as f64;
    if lambda == 0.0 {
        return Ok(bce);
    }
    Ok((1.0 - lambda) * bce + lambda * (1.0 - dice(pred, truth).0))
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// The same loss on pre-sigmoid logits, as a differentiable scalar.
pub fn loss_from_logits(logits: &Tensor, truth: &[f64], lambda: f64) -> Result<Tensor> {
    check(logits.numel(), truth.len(), lambda)?;
    let n = truth.len() as f64;
    let z = logits.data();
    let p: Vec<f64> = z.iter().map(|&z| sigmoid(z)).collect();
    let bce = z.iter().zip(truth).map(|(&z, &t)| softplus(z) - t * z).sum::<f64>() / n;
    let (d, inter, denom) = dice(&p, truth);
    let value = (1.0 - lambda) * bce + lambda * (1.0 - d);
    let truth = truth.to_vec();
    let backward = Box::new(move |g: &[f64], _: &[Tensor], _: &[f64]| {
        let numer = 2.0 * inter + DICE_EPS;
        let grad = p
            .iter()
            .zip(&truth)
            .map(|(&p, &t)| {
                let d_bce = (p - t) / n;
                let d_dice = (2.0 * t * denom - numer) / (denom * denom) * p * (1.0 - p);
                g[0] * ((1.0 - lambda) * d_bce - lambda * d_dice)
            })
            .collect();
        vec![Some(grad)]
    });
    Ok(Tensor::from_op(
        "seg_loss",
        Vec::new(),
        vec![value],
        &[logits],
        backward,
    ))
}
