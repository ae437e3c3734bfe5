//! Pixel-level AUC, average precision and PRO as mean per-image IoU.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;

fn check(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Param(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::Param(format!("labels must be 0/1, found {l}")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Param("NaN score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// `(true positives, false positives)` after each group of tied scores,
/// thresholds descending.
fn tie_groups(scores: &[f64], labels: &[u8]) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out = Vec::new();
    let (mut tp, mut fp) = (0, 0);
    for (pos, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last = pos + 1 == order.len() || scores[order[pos + 1]] != scores[i];
        if last {
            out.push((tp, fp));
        }
    }
    out
}

/// Trapezoidal area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    if p == 0 || n == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes ({p} positive, {n} negative)"
        )));
    }
    let (pf, nf) = (p as f64, n as f64);
    let mut area = 0.0;
    let (mut prev_tpr, mut prev_fpr) = (0.0, 0.0);
    for (tp, fp) in tie_groups(scores, labels) {
        let (tpr, fpr) = (tp as f64 / pf, fp as f64 / nf);
        area += (fpr - prev_fpr) * (tpr + prev_tpr) / 2.0;
        prev_tpr = tpr;
        prev_fpr = fpr;
    }
    Ok(area)
}

/// `sum (R_n - R_{n-1}) P_n` over descending unique thresholds.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (p, _) = check(scores, labels)?;
    if p == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive".into()));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (tp, fp) in tie_groups(scores, labels) {
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * tp as f64 / (tp + fp) as f64;
        prev_recall = recall;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "tau", rename_all = "snake_case")]
pub enum ThresholdMode {
    Fixed(f64),
    /// Best of 101 evenly spaced thresholds on `[0, 1]`.
    BestSweep,
}

pub const SWEEP_STEPS: usize = 101;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProResult {
    pub pro: f64,
    pub tau: f64,
    /// IoU per image at `tau`; `None` where the mask is empty.
    pub per_image: Vec<Option<f64>>,
}

fn normalized(map: &Tensor) -> Vec<f64> {
    let lo = map.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        map.data().iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; map.len()]
    }
}

fn iou_at(norm: &[f64], mask: &[f64], tau: f64) -> Option<f64> {
    let (mut inter, mut union, mut gt) = (0usize, 0usize, 0usize);
    for (&s, &m) in norm.iter().zip(mask) {
        let (p, g) = (s >= tau, m > 0.5);
        gt += g as usize;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    (gt > 0).then(|| inter as f64 / union as f64)
}

/// Mean IoU between per-image min-max normalized maps binarized at `tau`
/// (`score >= tau`) and the ground-truth masks. Images with empty masks
/// are left out of the mean.
pub fn pro_mean_iou(maps: &[Tensor], masks: &[Tensor], mode: ThresholdMode) -> Result<ProResult> {
    if maps.len() != masks.len() {
        return Err(Error::Param(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    for (m, g) in maps.iter().zip(masks) {
        if m.dims() != g.dims() {
            return Err(Error::shape("pro map vs mask", m.dims(), g.dims()));
        }
    }
    let norms: Vec<Vec<f64>> = maps.iter().map(normalized).collect();
    let at = |tau: f64| -> (Option<f64>, Vec<Option<f64>>) {
        let per: Vec<Option<f64>> = norms.iter().zip(masks).map(|(n, g)| iou_at(n, g.data(), tau)).collect();
        let vals: Vec<f64> = per.iter().flatten().copied().collect();
        let mean = (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64);
        (mean, per)
    };
    let taus: Vec<f64> = match mode {
        ThresholdMode::Fixed(t) => vec![t],
        ThresholdMode::BestSweep => (0..SWEEP_STEPS).map(|i| i as f64 / (SWEEP_STEPS - 1) as f64).collect(),
    };
    let mut best: Option<ProResult> = None;
    for tau in taus {
        let (mean, per_image) = at(tau);
        let Some(pro) = mean else {
            return Err(Error::UndefinedMetric("PRO needs an image with a nonempty mask".into()));
        };
        if best.as_ref().is_none_or(|b| pro > b.pro) {
            best = Some(ProResult { pro, tau, per_image });
        }
    }
    best.ok_or_else(|| Error::UndefinedMetric("empty threshold sweep".into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetric {
    pub id: String,
    pub iou: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ap: f64,
    pub pro: f64,
    pub pro_threshold: f64,
    pub per_image: Vec<ImageMetric>,
}

/// Pixel AUC and AP over every pixel of every map, plus PRO.
pub fn evaluate(maps: &[Tensor], masks: &[Tensor], ids: &[String], mode: ThresholdMode) -> Result<MetricReport> {
    if ids.len() != maps.len() {
        return Err(Error::Param(format!("{} ids vs {} maps", ids.len(), maps.len())));
    }
    let pro = pro_mean_iou(maps, masks, mode)?;
    let scores: Vec<f64> = maps.iter().flat_map(|m| m.data().iter().copied()).collect();
    let labels: Vec<u8> = masks
        .iter()
        .flat_map(|m| m.data().iter().map(|&v| u8::from(v > 0.5)))
        .collect();
    Ok(MetricReport {
        auc: auc(&scores, &labels)?,
        ap: average_precision(&scores, &labels)?,
        pro: pro.pro,
        pro_threshold: pro.tau,
        per_image: ids
            .iter()
            .zip(pro.per_image)
            .map(|(id, iou)| ImageMetric { id: id.clone(), iou })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auc(&[0.8, 0.3, 0.6, 0.1], &[1, 1, 0, 0]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn ap_examples() {
        let ap = average_precision(&[0.9, 0.8, 0.7], &[1, 0, 1]).unwrap();
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(average_precision(&[0.9, 0.8, 0.1], &[1, 1, 0]).unwrap(), 1.0);
        assert!(matches!(
            average_precision(&[0.3], &[0]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn pro_examples() {
        let gt = Tensor::new(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let gts = std::slice::from_ref(&gt);
        let fixed = ThresholdMode::Fixed(0.5);
        assert_eq!(pro_mean_iou(gts, gts, fixed).unwrap().pro, 1.0);
        let disjoint = Tensor::new(&[1, 4], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        assert_eq!(pro_mean_iou(&[disjoint], gts, fixed).unwrap().pro, 0.0);
        let half = Tensor::new(&[1, 4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert_eq!(pro_mean_iou(&[half], gts, fixed).unwrap().pro, 1.0 / 3.0);
        let empty = Tensor::zeros(&[1, 4]);
        assert!(matches!(
            pro_mean_iou(gts, std::slice::from_ref(&empty), fixed),
            Err(Error::UndefinedMetric(_))
        ));
        let r = pro_mean_iou(&[gt.clone(), gt.clone()], &[gt.clone(), empty], fixed).unwrap();
        assert_eq!(r.per_image, vec![Some(1.0), None]);
    }
}
