//! Decoder-free anomaly scoring against a per-scale prototype bank built
//! from a handful of normal target images.

pub mod bench;
pub mod sinkhorn;

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::write_png;
use crate::decoder::{Mode, Route};
use crate::error::{Error, Result};
use crate::fusion::deinterleave;
use crate::model::Model;
use crate::numkernel::io::{read_nxt1, read_nxtd, write_nxt1, write_nxtd};
use crate::numkernel::{bilinear_resize_centered, gaussian_blur, softmax_channel, Tensor};

pub use sinkhorn::{
    kmeanspp_init, lloyd_kmeans, marginal_violation, sinkhorn_assign, sinkhorn_kmeans, sinkhorn_kmeans_from,
    sinkhorn_plan, sq_dist_matrix, KMeansOptions, KMeansResult, TransportPlan,
};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_M: usize = 10;
pub const DEFAULT_SIGMA: f64 = 2.0;

/// Which encoder channels enter the bank.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    /// Full fused channels.
    #[default]
    Fused,
    /// Only the adapted hierarchical half.
    HieraOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankConfig {
    pub k: usize,
    pub m: usize,
    pub mode: FeatureMode,
    /// Fixed Sinkhorn regularization; `None` uses `0.05 * mean(C)`.
    pub eps: Option<f64>,
    pub seed: u64,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            m: DEFAULT_M,
            mode: FeatureMode::Fused,
            eps: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BankMeta {
    pub class_id: usize,
    pub m_images: usize,
    pub k: usize,
    pub mode: FeatureMode,
    pub eps: Vec<f64>,
    pub outer_iterations: Vec<usize>,
    pub sinkhorn_sweeps: Vec<usize>,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    /// One `(K, C_n)` prototype matrix per scale.
    pub prototypes: Vec<Tensor>,
    pub meta: BankMeta,
}

/// Per-scale NHWC encoder features in the requested mode.
pub fn scale_features(model: &Model, images: &Tensor, mode: FeatureMode) -> Result<Vec<Tensor>> {
    let pyr = model.encode(images)?;
    match mode {
        FeatureMode::Fused => Ok(pyr.scales),
        FeatureMode::HieraOnly => pyr.scales.iter().map(|s| Ok(deinterleave(s)?.0)).collect(),
    }
}

fn flatten_rows(x: Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    let n = x.len() / c.max(1);
    x.reshape(&[n, c])
}

/// Stacks the bank images' features into one `(M * h_n * w_n, C_n)` matrix
/// per scale, image-major then row-major over the grid.
pub fn build_bank_features(model: &Model, images: &[Tensor], mode: FeatureMode) -> Result<Vec<Tensor>> {
    if images.is_empty() {
        return Err(Error::Param("memory bank needs at least one image".into()));
    }
    let feats = scale_features(model, &Tensor::stack(images)?, mode)?;
    feats.into_iter().map(flatten_rows).collect()
}

/// Clusters each scale's bank features into `cfg.k` prototypes.
pub fn build_bank(model: &Model, class_id: usize, images: &[Tensor], cfg: &BankConfig) -> Result<MemoryBank> {
    if images.len() != cfg.m {
        return Err(Error::Param(format!(
            "bank expects M={} images, got {}",
            cfg.m,
            images.len()
        )));
    }
    let z = build_bank_features(model, images, cfg.mode)?;
    let results: Vec<Result<KMeansResult>> = z
        .par_iter()
        .enumerate()
        .map(|(n, zn)| {
            let opts = KMeansOptions {
                eps: cfg.eps,
                seed: crate::rng::child_seed(cfg.seed, &[class_id as u64, n as u64]),
                ..KMeansOptions::default()
            };
            sinkhorn_kmeans(zn, cfg.k, &opts)
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MemoryBank {
        meta: BankMeta {
            class_id,
            m_images: images.len(),
            k: cfg.k,
            mode: cfg.mode,
            eps: results.iter().map(|r| r.eps).collect(),
            outer_iterations: results.iter().map(|r| r.outer_iterations).collect(),
            sinkhorn_sweeps: results.iter().map(|r| r.sinkhorn_sweeps).collect(),
            seed: cfg.seed,
        },
        prototypes: results.into_iter().map(|r| r.prototypes).collect(),
    })
}

impl MemoryBank {
    pub fn validate(&self) -> Result<()> {
        if self.prototypes.len() != 4 {
            return Err(Error::Config(format!(
                "bank has {} scales, expected 4",
                self.prototypes.len()
            )));
        }
        for p in &self.prototypes {
            if p.rank() != 2 || p.dims()[0] != self.meta.k || !p.is_finite() {
                return Err(Error::Data(format!(
                    "bad prototype matrix {:?} for K={}",
                    p.dims(),
                    self.meta.k
                )));
            }
        }
        Ok(())
    }

    /// Writes `bank.json` plus `scale{n}.nxt1` and exact `scale{n}.nxtd` copies.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        for (n, p) in self.prototypes.iter().enumerate() {
            write_nxt1(dir.join(format!("scale{n}.nxt1")), p)?;
            write_nxtd(dir.join(format!("scale{n}.nxtd")), p)?;
        }
        fs::write(dir.join("bank.json"), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let meta: BankMeta = serde_json::from_slice(
            &fs::read(dir.join("bank.json")).map_err(|e| Error::Data(format!("{}: {e}", dir.display())))?,
        )?;
        let mut prototypes = Vec::with_capacity(4);
        for n in 0..4 {
            let exact = dir.join(format!("scale{n}.nxtd"));
            prototypes.push(if exact.exists() {
                read_nxtd(exact)?
            } else {
                read_nxt1(dir.join(format!("scale{n}.nxt1")))?
            });
        }
        let bank = Self { prototypes, meta };
        bank.validate()?;
        Ok(bank)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// Raw per-scale nearest-prototype distances, `(h_n, w_n)`.
    pub coarse: Vec<Tensor>,
    /// Smoothed full-resolution score, `(H, W)`.
    pub a_prime: Tensor,
    pub sigma: f64,
    pub weights: Vec<f64>,
}

/// Distance from every grid cell of `(h, w, c)` features to its nearest prototype.
pub fn min_distance_grid(features: &Tensor, prototypes: &Tensor) -> Result<Tensor> {
    let (h, w, c) = match *features.dims() {
        [h, w, c] => (h, w, c),
        _ => return Err(Error::shape("min_distance_grid features", features.dims(), &[0, 0, 0])),
    };
    if prototypes.rank() != 2 || prototypes.dims()[1] != c {
        return Err(Error::Config(format!(
            "prototype dims {:?} do not match feature channels {c}",
            prototypes.dims()
        )));
    }
    let protos: Vec<&[f64]> = prototypes.data().chunks_exact(c).collect();
    let out = features
        .data()
        .chunks_exact(c)
        .map(|z| {
            protos
                .iter()
                .map(|p| z.iter().zip(*p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
                .sqrt()
        })
        .collect();
    Tensor::new(&[h, w], out)
}

fn min_max(x: &Tensor) -> Tensor {
    let lo = x.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        x.map(|v| (v - lo) / (hi - lo))
    } else {
        Tensor::zeros(x.dims())
    }
}

/// Min-max normalizes each grid, upsamples to `(H, W)` with grid values at
/// cell centres, takes the weighted
/// mean and smooths with a Gaussian of width `sigma`.
pub fn aggregate(coarse: &[Tensor], out_hw: (usize, usize), weights: &[f64], sigma: f64) -> Result<Tensor> {
    if coarse.len() != weights.len() || coarse.is_empty() {
        return Err(Error::Config("one weight per scale required".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut acc = Tensor::zeros(&[out_hw.0, out_hw.1]);
    for (grid, &w) in coarse.iter().zip(weights) {
        let mut up = bilinear_resize_centered(&min_max(grid), out_hw.0, out_hw.1)?;
        up.scale(w / total);
        acc.add_assign(&up)?;
    }
    gaussian_blur(&acc, sigma)
}

/// Scores every image of an `(b, H, W, 3)` batch against `bank`.
pub fn score_batch(model: &Model, bank: &MemoryBank, images: &Tensor, sigma: f64) -> Result<Vec<AnomalyMap>> {
    bank.validate()?;
    let (b, h, w, _) = images.dims4()?;
    let feats = scale_features(model, images, bank.meta.mode)?;
    let weights = vec![1.0; feats.len()];
    (0..b)
        .into_par_iter()
        .map(|i| {
            let coarse = feats
                .iter()
                .zip(&bank.prototypes)
                .map(|(f, p)| {
                    let item = f.outer(i);
                    min_distance_grid(&item, p)
                })
                .collect::<Result<Vec<_>>>()?;
            let a_prime = aggregate(&coarse, (h, w), &weights, sigma)?;
            Ok(AnomalyMap {
                coarse,
                a_prime,
                sigma,
                weights: weights.clone(),
            })
        })
        .collect()
}

/// Scores a single `(H, W, 3)` image.
pub fn anomaly_score_map(model: &Model, bank: &MemoryBank, image: &Tensor, sigma: f64) -> Result<AnomalyMap> {
    let d = image.dims().to_vec();
    if d.len() != 3 {
        return Err(Error::shape("anomaly_score_map image", &d, &[0, 0, 3]));
    }
    let batch = image.clone().reshape(&[1, d[0], d[1], d[2]])?;
    Ok(score_batch(model, bank, &batch, sigma)?.remove(0))
}

/// Defect probability maps `(H, W)` from the trained target segmentation
/// head of `class_id`, in eval mode.
pub fn decoder_score_maps(model: &Model, class_id: usize, images: &Tensor) -> Result<Vec<Tensor>> {
    let ti = match model.heads.route(class_id)? {
        Route::Target(i) => i,
        Route::Source(_) => return Err(Error::Config(format!("class {class_id} has no target head"))),
    };
    let (b, h, w, _) = images.dims4()?;
    let pyr = model.encode(images)?;
    let (logits, _) = model.heads.target_seg_heads[ti].forward(&pyr, (h, w), Mode::Eval)?;
    let p = softmax_channel(&logits)?;
    let plane = h * w;
    (0..b)
        .map(|i| Tensor::new(&[h, w], p.data()[(2 * i + 1) * plane..(2 * i + 2) * plane].to_vec()))
        .collect()
}

/// Piecewise-linear blue-cyan-yellow-red colormap on `[0, 1]`.
pub fn colormap(v: f64) -> [u8; 3] {
    const STOPS: [(f64, [f64; 3]); 5] = [
        (0.0, [0.0, 0.0, 0.5]),
        (0.25, [0.0, 0.4, 1.0]),
        (0.5, [0.0, 0.9, 0.6]),
        (0.75, [1.0, 0.85, 0.0]),
        (1.0, [0.7, 0.0, 0.0]),
    ];
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let i = STOPS.iter().rposition(|s| s.0 <= v).unwrap_or(0).min(STOPS.len() - 2);
    let (t0, c0) = STOPS[i];
    let (t1, c1) = STOPS[i + 1];
    let t = (v - t0) / (t1 - t0);
    let mut out = [0u8; 3];
    for ch in 0..3 {
        out[ch] = ((c0[ch] + t * (c1[ch] - c0[ch])) * 255.0).round() as u8;
    }
    out
}

/// Writes an `(H, W)` score map as an RGB PNG after per-image min-max scaling.
pub fn save_heatmap_png(path: impl AsRef<Path>, map: &Tensor) -> Result<()> {
    let (h, w) = match *map.dims() {
        [h, w] => (h, w),
        _ => return Err(Error::shape("heatmap", map.dims(), &[0, 0])),
    };
    let norm = min_max(map);
    let bytes: Vec<u8> = norm.data().iter().flat_map(|&v| colormap(v)).collect();
    write_png(path.as_ref(), w as u32, h as u32, png::ColorType::Rgb, &bytes)
}
