//! Segmentation losses with their logit gradients.

use serde::{Deserialize, Serialize};

use crate::decoder::{PseudoLabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::numkernel::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return Err(Error::Config(format!("loss weights must be >= 0, got {self:?}")));
        }
        Ok(())
    }
}

/// `L_s + lambda1 * L_t_ce + lambda2 * L_t_mse`.
pub fn total_loss(l_s: f64, l_t_ce: f64, l_t_mse: f64, w: &LossWeights) -> f64 {
    l_s + w.lambda1 * l_t_ce + w.lambda2 * l_t_mse
}

fn binary_dims(logits: &Tensor) -> Result<(usize, usize, usize)> {
    match *logits.dims() {
        [b, 2, h, w] => Ok((b, h, w)),
        [2, h, w] => Ok((1, h, w)),
        _ => Err(Error::shape("binary logits (b,2,H,W)", logits.dims(), &[2])),
    }
}

/// Mean two-class cross-entropy over pixels whose label is not [`IGNORE`].
///
/// `labels` is laid out `(b, H, W)`. Returns the loss, its gradient with
/// respect to the logits, and the number of contributing pixels. With no
/// valid pixel the loss and gradient are zero.
pub fn cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor, usize)> {
    let (b, h, w) = binary_dims(logits)?;
    let plane = h * w;
    if labels.len() != b * plane {
        return Err(Error::shape("cross_entropy labels", logits.dims(), &[labels.len()]));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = Tensor::zeros(logits.dims());
    if valid == 0 {
        return Ok((0.0, grad, 0));
    }
    let n = valid as f64;
    let z = logits.data();
    let g = grad.data_mut();
    let mut loss = 0.0;
    for i in 0..b {
        for px in 0..plane {
            let label = labels[i * plane + px];
            if label == IGNORE {
                continue;
            }
            let (i0, i1) = (i * 2 * plane + px, i * 2 * plane + plane + px);
            let (z0, z1) = (z[i0], z[i1]);
            let m = z0.max(z1);
            let lse = m + ((z0 - m).exp() + (z1 - m).exp()).ln();
            let (p0, p1) = ((z0 - lse).exp(), (z1 - lse).exp());
            loss -= if label == 1 { z1 - lse } else { z0 - lse };
            g[i0] = (p0 - if label == 0 { 1.0 } else { 0.0 }) / n;
            g[i1] = (p1 - if label == 1 { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad, valid))
}

/// Converts binary masks into per-pixel labels.
pub fn mask_labels(masks: &[&Tensor]) -> Vec<u8> {
    masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| u8::from(v > 0.5)))
        .collect()
}

pub fn pseudo_labels_flat(maps: &[&PseudoLabelMap]) -> Vec<u8> {
    maps.iter().flat_map(|m| m.labels.iter().copied()).collect()
}

/// Mean cross-entropy of source logits against their ground-truth masks.
pub fn source_ce_loss(logits: &Tensor, masks: &[&Tensor]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::Param("source loss over an empty batch".into()));
    }
    Ok(cross_entropy(logits, &mask_labels(masks))?.0)
}

/// Cross-entropy over the confident pixels of the pseudo-label maps.
pub fn target_ce_loss(logits: &Tensor, pseudo: &[&PseudoLabelMap]) -> Result<f64> {
    Ok(cross_entropy(logits, &pseudo_labels_flat(pseudo))?.0)
}

/// Mean squared difference between a positive-class probability map
/// `(b, H, W)` and the pseudo labels over valid pixels, with its gradient.
pub fn consistency_mse(s_prime: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    if s_prime.len() != labels.len() {
        return Err(Error::shape("consistency_mse", s_prime.dims(), &[labels.len()]));
    }
    let valid = labels.iter().filter(|&&l| l != IGNORE).count();
    let mut grad = Tensor::zeros(s_prime.dims());
    if valid == 0 {
        return Ok((0.0, grad));
    }
    let n = valid as f64;
    let mut loss = 0.0;
    for (i, (&s, &l)) in s_prime.data().iter().zip(labels).enumerate() {
        if l == IGNORE {
            continue;
        }
        let d = s - l as f64;
        loss += d * d;
        grad.data_mut()[i] = 2.0 * d / n;
    }
    Ok((loss / n, grad))
}

pub fn consistency_mse_loss(s_prime: &Tensor, pseudo: &[&PseudoLabelMap]) -> Result<f64> {
    Ok(consistency_mse(s_prime, &pseudo_labels_flat(pseudo))?.0)
}
