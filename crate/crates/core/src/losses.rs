//! Segmentation objectives: soft Dice, multi-class focal, and their sum.
//!
//! All losses take per-voxel class probabilities and a one-hot target of the
//! same `(n, c, h, w)` shape. Sums for the Dice term run over the whole batch
//! per class.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub epsilon: f64,
    /// Per-class focal weights; a single entry is broadcast to every class.
    pub alpha: Vec<f64>,
    pub gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-6,
            alpha: vec![1.0],
            gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("loss epsilon must be positive".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("focal gamma must be non-negative".into()));
        }
        if self.alpha.is_empty() || self.alpha.iter().any(|&a| !(a > 0.0)) {
            return Err(Error::Config("focal alpha weights must be positive".into()));
        }
        Ok(())
    }

    pub fn alpha_for(&self, class: usize) -> f64 {
        if self.alpha.len() == 1 {
            self.alpha[0]
        } else {
            self.alpha[class]
        }
    }

    fn check_classes(&self, classes: usize) -> Result<()> {
        if self.alpha.len() != 1 && self.alpha.len() != classes {
            return Err(Error::Config(format!(
                "alpha has {} entries for {classes} classes",
                self.alpha.len()
            )));
        }
        Ok(())
    }
}

fn check_shapes(probs: &FeatureMap, target: &FeatureMap) -> Result<()> {
    if probs.shape() != target.shape() {
        return Err(Error::shape(format!(
            "probabilities {:?} vs target {:?}",
            probs.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Loss value together with its gradient w.r.t. the probabilities.
#[derive(Debug, Clone)]
pub struct LossWithGrad {
    pub value: f64,
    pub grad: FeatureMap,
}

pub fn dice_loss(probs: &FeatureMap, target: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    Ok(dice_loss_grad(probs, target, cfg)?.value)
}

pub fn dice_loss_grad(
    probs: &FeatureMap,
    target: &FeatureMap,
    cfg: &LossConfig,
) -> Result<LossWithGrad> {
    check_shapes(probs, target)?;
    let classes = probs.shape()[1];
    let eps = cfg.epsilon;
    let mut inter = vec![0.0; classes];
    let mut denom = vec![0.0; classes];
    for c in 0..classes {
        let p = probs.index_axis(Axis(1), c);
        let t = target.index_axis(Axis(1), c);
        inter[c] = ndarray::Zip::from(&p)
            .and(&t)
            .fold(0.0, |acc, &a, &b| acc + a * b);
        denom[c] = p.sum() + t.sum();
    }
    let mut mean_term = 0.0;
    for c in 0..classes {
        mean_term += (2.0 * inter[c] + eps) / (denom[c] + eps);
    }
    mean_term /= classes as f64;

    let mut grad = FeatureMap::zeros(probs.raw_dim());
    for c in 0..classes {
        let s = denom[c] + eps;
        let num = 2.0 * inter[c] + eps;
        let t = target.index_axis(Axis(1), c);
        let mut g = grad.index_axis_mut(Axis(1), c);
        ndarray::Zip::from(&mut g).and(&t).for_each(|g, &tv| {
            *g = -(2.0 * tv * s - num) / (s * s) / classes as f64;
        });
    }
    Ok(LossWithGrad {
        value: 1.0 - mean_term,
        grad,
    })
}

pub fn focal_loss(probs: &FeatureMap, target: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    Ok(focal_loss_grad(probs, target, cfg)?.value)
}

pub fn focal_loss_grad(
    probs: &FeatureMap,
    target: &FeatureMap,
    cfg: &LossConfig,
) -> Result<LossWithGrad> {
    check_shapes(probs, target)?;
    let classes = probs.shape()[1];
    cfg.check_classes(classes)?;
    let s = probs.shape();
    let voxels = (s[0] * s[2] * s[3]) as f64;
    let (eps, gamma) = (cfg.epsilon, cfg.gamma);
    let mut total = 0.0;
    let mut grad = FeatureMap::zeros(probs.raw_dim());
    for c in 0..classes {
        let alpha = cfg.alpha_for(c);
        let p = probs.index_axis(Axis(1), c);
        let t = target.index_axis(Axis(1), c);
        let mut g = grad.index_axis_mut(Axis(1), c);
        ndarray::Zip::from(&mut g)
            .and(&p)
            .and(&t)
            .for_each(|g, &pv, &tv| {
                if tv == 0.0 {
                    return;
                }
                let one_minus = 1.0 - pv;
                let log_p = (pv + eps).ln();
                let modulator = one_minus.powf(gamma);
                total += alpha * tv * modulator * log_p;
                let d_mod = if gamma == 0.0 {
                    0.0
                } else {
                    -gamma * one_minus.powf(gamma - 1.0)
                };
                *g = -alpha * tv * (d_mod * log_p + modulator / (pv + eps)) / voxels;
            });
    }
    Ok(LossWithGrad {
        value: -total / voxels,
        grad,
    })
}

/// Dice and focal components of the total objective.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub dice: f64,
    pub focal: f64,
    pub grad: FeatureMap,
}

pub fn total_loss(probs: &FeatureMap, target: &FeatureMap, cfg: &LossConfig) -> Result<f64> {
    Ok(total_loss_grad(probs, target, cfg)?.value)
}

pub fn total_loss_grad(
    probs: &FeatureMap,
    target: &FeatureMap,
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    let dice = dice_loss_grad(probs, target, cfg)?;
    let focal = focal_loss_grad(probs, target, cfg)?;
    Ok(TotalLoss {
        value: dice.value + focal.value,
        dice: dice.value,
        focal: focal.value,
        grad: dice.grad + focal.grad,
    })
}

/// One-hot encodes a `(n, h, w)` class map into `(n, classes, h, w)`.
pub fn one_hot(labels: &ndarray::Array3<u8>, classes: usize) -> Result<FeatureMap> {
    let (n, h, w) = labels.dim();
    let mut out = FeatureMap::zeros((n, classes, h, w));
    for ((i, y, x), &l) in labels.indexed_iter() {
        if l as usize >= classes {
            return Err(Error::InvalidLabel {
                id: l,
                allowed: "0..n_classes",
            });
        }
        out[[i, l as usize, y, x]] = 1.0;
    }
    Ok(out)
}
