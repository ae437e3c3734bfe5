//! Wall-clock timing of bank inference against the number of prototypes.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{build_bank, score_batch, BankConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numkernel::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    #[serde(rename = "K")]
    pub k: usize,
    pub batch: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub ks: Vec<usize>,
    pub batches: Vec<usize>,
    /// Timed rounds per batch size, after one untimed warmup of each `K`.
    pub repeats: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            ks: vec![5, 10, 20, 30, 40],
            batches: vec![1, 5, 10, 15],
            repeats: 20,
            sigma: super::DEFAULT_SIGMA,
            seed: 0,
        }
    }
}

/// Times `score_batch` (feature extraction included) for every `(K, batch)`
/// pair. All banks are built first; each timed round then visits every `K`
/// once, so slow drift in machine speed is shared across `K`. Test images
/// are cycled to fill larger batches.
pub fn bench_inference(
    model: &Model,
    class_id: usize,
    bank_images: &[Tensor],
    test_images: &[Tensor],
    cfg: &BenchConfig,
) -> Result<Vec<BenchRecord>> {
    if test_images.is_empty() || cfg.repeats == 0 {
        return Err(Error::Param("bench needs test images and at least one repeat".into()));
    }
    let banks = cfg
        .ks
        .iter()
        .map(|&k| {
            build_bank(
                model,
                class_id,
                bank_images,
                &BankConfig {
                    k,
                    m: bank_images.len(),
                    seed: cfg.seed,
                    ..BankConfig::default()
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for &batch in &cfg.batches {
        let imgs: Vec<Tensor> = (0..batch).map(|i| test_images[i % test_images.len()].clone()).collect();
        let x = Tensor::stack(&imgs)?;
        for bank in &banks {
            score_batch(model, bank, &x, cfg.sigma)?;
        }
        let mut ms = vec![Vec::with_capacity(cfg.repeats); banks.len()];
        for _ in 0..cfg.repeats {
            for (bank, times) in banks.iter().zip(&mut ms) {
                let t0 = Instant::now();
                score_batch(model, bank, &x, cfg.sigma)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
        for (&k, times) in cfg.ks.iter().zip(&ms) {
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / times.len() as f64;
            out.push(BenchRecord {
                k,
                batch,
                mean_ms: mean,
                std_ms: var.sqrt(),
            });
        }
    }
    Ok(out)
}

/// Least-squares line through `(x, y)`: `(slope, intercept, r2)`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64, f64) {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    (slope, my - slope * mx, r2)
}

/// True when every value is at least `(1 - band)` times its predecessor.
pub fn monotone_within(ys: &[f64], band: f64) -> bool {
    ys.windows(2).all(|w| w[1] >= w[0] * (1.0 - band))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_of_exact_line() {
        let (s, b, r2) = linear_fit(&[5.0, 10.0, 20.0], &[2.0, 3.0, 5.0]);
        assert!((s - 0.2).abs() < 1e-12 && (b - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotone_band() {
        assert!(monotone_within(&[1.0, 0.95, 1.2], 0.1));
        assert!(!monotone_within(&[1.0, 0.85], 0.1));
    }
}
