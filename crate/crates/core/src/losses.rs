//! Soft Dice and Focal losses over per-pixel foreground probabilities, with analytic
//! gradients.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clipped to `[PROB_CLIP, 1 - PROB_CLIP]` before any logarithm.
pub const PROB_CLIP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Hash, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Dice,
    Focal,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::Focal => "focal",
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dice" => Ok(LossKind::Dice),
            "focal" => Ok(LossKind::Focal),
            other => Err(Error::Config(format!("unknown loss `{other}` (dice|focal)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub kind: LossKind,
    pub dice_smooth: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: LossKind::Dice,
            dice_smooth: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn with_kind(kind: LossKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dice_smooth > 0.0) {
            return Err(Error::Config("dice_smooth must be > 0".into()));
        }
        if !(self.focal_alpha > 0.0 && self.focal_alpha <= 1.0) {
            return Err(Error::Config("focal_alpha must lie in (0, 1]".into()));
        }
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::Config("focal_gamma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn value(&self, probs: &[f64], target: &[f64]) -> Result<f64> {
        match self.kind {
            LossKind::Dice => dice_loss(probs, target, self.dice_smooth),
            LossKind::Focal => focal_loss(probs, target, self.focal_alpha, self.focal_gamma),
        }
    }

    pub fn value_and_grad(&self, probs: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
        match self.kind {
            LossKind::Dice => dice_loss_grad(probs, target, self.dice_smooth),
            LossKind::Focal => focal_loss_grad(probs, target, self.focal_alpha, self.focal_gamma),
        }
    }

    /// Loss on logits and its gradient with respect to each logit (through the sigmoid).
    pub fn on_logits(&self, logits: &[f32], target: &[f64]) -> Result<(f64, Vec<f32>)> {
        let probs: Vec<f64> = logits.iter().map(|&z| sigmoid(z as f64)).collect();
        let (loss, dp) = self.value_and_grad(&probs, target)?;
        let dz = dp
            .iter()
            .zip(&probs)
            .map(|(g, p)| (g * p * (1.0 - p)) as f32)
            .collect();
        Ok((loss, dz))
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn check_shapes(probs: &[f64], target: &[f64]) -> Result<()> {
    if probs.len() != target.len() {
        return Err(Error::Shape(format!(
            "probabilities have {} elements, target has {}",
            probs.len(),
            target.len()
        )));
    }
    Ok(())
}

/// `1 − (2·Σpg + ε) / (Σp + Σg + ε)` over every element passed in.
pub fn dice_loss(probs: &[f64], target: &[f64], smooth: f64) -> Result<f64> {
    check_shapes(probs, target)?;
    let (inter, sp, sg) = dice_sums(probs, target);
    Ok(1.0 - (2.0 * inter + smooth) / (sp + sg + smooth))
}

fn dice_sums(probs: &[f64], target: &[f64]) -> (f64, f64, f64) {
    probs
        .iter()
        .zip(target)
        .fold((0.0, 0.0, 0.0), |(i, p, g), (&pi, &gi)| (i + pi * gi, p + pi, g + gi))
}

pub fn dice_loss_grad(probs: &[f64], target: &[f64], smooth: f64) -> Result<(f64, Vec<f64>)> {
    check_shapes(probs, target)?;
    let (inter, sp, sg) = dice_sums(probs, target);
    let num = 2.0 * inter + smooth;
    let den = sp + sg + smooth;
    let grad = target
        .iter()
        .map(|&g| -(2.0 * g * den - num) / (den * den))
        .collect();
    Ok((1.0 - num / den, grad))
}

/// Mean over pixels of `−α (1 − p_t)^γ ln p_t`, `p_t = p` on foreground and `1 − p` otherwise.
pub fn focal_loss(probs: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    check_shapes(probs, target)?;
    if probs.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let pt = p_true(p, g);
            -alpha * (1.0 - pt).powf(gamma) * pt.ln()
        })
        .sum();
    Ok(total / probs.len() as f64)
}

fn p_true(p: f64, g: f64) -> f64 {
    let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
    if g >= 0.5 {
        p
    } else {
        1.0 - p
    }
}

pub fn focal_loss_grad(probs: &[f64], target: &[f64], alpha: f64, gamma: f64) -> Result<(f64, Vec<f64>)> {
    let loss = focal_loss(probs, target, alpha, gamma)?;
    let n = probs.len().max(1) as f64;
    let grad = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            if !(PROB_CLIP..=1.0 - PROB_CLIP).contains(&p) {
                return 0.0;
            }
            let pt = p_true(p, g);
            let q = 1.0 - pt;
            let mut d_pt = -alpha * q.powf(gamma) / pt;
            if gamma != 0.0 {
                d_pt += alpha * gamma * q.powf(gamma - 1.0) * pt.ln();
            }
            let sign = if g >= 0.5 { 1.0 } else { -1.0 };
            sign * d_pt / n
        })
        .collect();
    Ok((loss, grad))
}

/// Mean binary cross-entropy with the same clipping as the focal loss.
pub fn binary_cross_entropy(probs: &[f64], target: &[f64]) -> Result<f64> {
    check_shapes(probs, target)?;
    let total: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &g)| {
            let p = p.clamp(PROB_CLIP, 1.0 - PROB_CLIP);
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len().max(1) as f64)
}
