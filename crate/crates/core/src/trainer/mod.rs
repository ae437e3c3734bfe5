//! Two-phase training: source supervision first, then joint training with
//! periodically refreshed pseudo labels on the target classes.

pub mod augment;
pub mod loss;
pub mod step;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneFeatures, BackboneSpec};
use crate::datagen::{synth_class, synth_class_with, DomainSplit};
use crate::decoder::{make_pseudo_labels, DecoderConfig, PseudoLabelMap, IGNORE};
use crate::error::{Error, Result};
use crate::fusion::fuse;
use crate::model::{Model, ModelConfig};
use crate::numkernel::{
    finite_diff_check, lr_at, Adam, GradCheckOptions, GradCheckReport, Parameterized, Probe, Tensor,
};
use crate::rng;

pub use augment::{augment, random_op, AugmentOp, AugmentRecord};
pub use loss::{consistency_mse_loss, cross_entropy, source_ce_loss, target_ce_loss, total_loss, LossWeights};
pub use step::{LossParts, SourceBatch, StepSwitches, TargetBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Epochs of source-only supervision before pseudo labels are used.
    pub phase1_epochs: usize,
    pub batch_size: usize,
    pub theta: f64,
    pub pseudo_refresh_every: usize,
    pub mtl_enabled: bool,
    pub pseudo_enabled: bool,
    /// Probability of adding Gaussian pixel noise to a training image.
    pub augment_prob: f64,
    pub noise_std: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            base_lr: 1e-4,
            warmup_epochs: 5,
            phase1_epochs: 10,
            batch_size: 4,
            theta: 0.7,
            pseudo_refresh_every: 5,
            mtl_enabled: true,
            pseudo_enabled: true,
            augment_prob: 0.5,
            noise_std: 0.02,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.epochs == 0 || self.batch_size == 0 || self.pseudo_refresh_every == 0 {
            return Err(Error::Config(
                "epochs, batch_size and pseudo_refresh_every must be > 0".into(),
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.base_lr > 0.0) || !(0.0..1.0).contains(&self.theta) {
            return Err(Error::Config("need base_lr > 0 and 0 <= theta < 1".into()));
        }
        if !(0.0..=1.0).contains(&self.augment_prob) || self.noise_std < 0.0 {
            return Err(Error::Config("augment_prob must be in [0,1] and noise_std >= 0".into()));
        }
        Ok(())
    }

    fn switches(&self) -> StepSwitches {
        StepSwitches {
            bootstrap: self.pseudo_enabled,
            weights: self.weights,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    #[serde(rename = "L_s")]
    pub l_s: f64,
    #[serde(rename = "L_boot")]
    pub l_boot: f64,
    #[serde(rename = "L_t_ce")]
    pub l_t_ce: f64,
    #[serde(rename = "L_t_mse")]
    pub l_t_mse: f64,
    pub total: f64,
    /// Confident-pixel fraction at the latest pseudo-label refresh.
    pub valid_pixel_frac: Option<f64>,
    pub source_steps: usize,
    pub target_batches: usize,
}

/// Backbone outputs of clean training images keyed by `(class, index)`.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    map: BTreeMap<(usize, usize), BackboneFeatures>,
}

impl FeatureCache {
    pub fn build(model: &Model, data: &DomainSplit) -> Result<Self> {
        let mut map = BTreeMap::new();
        let items: Vec<((usize, usize), &Tensor)> = data
            .source
            .iter()
            .map(|s| ((s.class_id, s.index), &s.image))
            .chain(data.target_train.iter().map(|s| ((s.class_id, s.index), &s.image)))
            .collect();
        for chunk in items.chunks(8) {
            let images: Vec<Tensor> = chunk.iter().map(|(_, t)| (*t).clone()).collect();
            let feats = model.backbone_features(&Tensor::stack(&images)?)?;
            for (i, (key, _)) in chunk.iter().enumerate() {
                map.insert(*key, feats.item(i));
            }
        }
        Ok(Self { map })
    }

    pub fn get(&self, class_id: usize, index: usize) -> Result<&BackboneFeatures> {
        self.map
            .get(&(class_id, index))
            .ok_or_else(|| Error::Data(format!("no cached features for class {class_id} image {index}")))
    }
}

/// Everything besides the model needed to continue a run exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub adam: Adam,
    pub pseudo: BTreeMap<(usize, usize), PseudoLabelMap>,
    pub last_valid_frac: Option<f64>,
    pub log: Vec<EpochLog>,
}

const STREAM_SOURCE: u64 = 1;
const STREAM_TARGET: u64 = 2;
const STREAM_NOISE_SOURCE: u64 = 3;
const STREAM_NOISE_TARGET: u64 = 4;
const STREAM_AUG: u64 = 5;

pub struct Trainer {
    pub model: Model,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

fn noisy<R: Rng + ?Sized>(image: &Tensor, std: f64, rng: &mut R) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let data = image
        .data()
        .iter()
        .map(|&v| (v + normal.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Tensor::new(image.dims(), data)
}

fn class_batches<R: Rng + ?Sized>(keys: &[(usize, usize)], batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &(c, _)) in keys.iter().enumerate() {
        by_class.entry(c).or_default().push(pos);
    }
    let mut batches = Vec::new();
    for (_, mut members) in by_class {
        members.shuffle(rng);
        batches.extend(members.chunks(batch).map(|c| c.to_vec()));
    }
    batches.shuffle(rng);
    batches
}

fn check_head_layout(model: &Model, cfg: &TrainConfig) -> Result<()> {
    if cfg.mtl_enabled == model.config.shared_source_head {
        return Err(Error::Config(format!(
            "mtl_enabled={} needs a model with shared_source_head={}",
            cfg.mtl_enabled, !cfg.mtl_enabled
        )));
    }
    Ok(())
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        check_head_layout(&model, &cfg)?;
        Ok(Self {
            model,
            cfg,
            state: TrainState::default(),
        })
    }

    pub fn resume(model: Model, cfg: TrainConfig, state: TrainState) -> Result<Self> {
        cfg.validate()?;
        check_head_layout(&model, &cfg)?;
        Ok(Self { model, cfg, state })
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs
    }

    fn refresh_due(&self, epoch: usize) -> bool {
        self.cfg.pseudo_enabled
            && epoch >= self.cfg.phase1_epochs
            && (epoch - self.cfg.phase1_epochs).is_multiple_of(self.cfg.pseudo_refresh_every)
    }

    /// Recomputes confident labels for every target training image from
    /// its pseudo-label head. Returns the confident-pixel fraction.
    pub fn refresh_pseudo_labels(&mut self, data: &DomainSplit, cache: &FeatureCache) -> Result<f64> {
        let (mut valid, mut total) = (0usize, 0usize);
        for img in &data.target_train {
            let feats = cache.get(img.class_id, img.index)?;
            let (fused, _) = fuse(feats, &self.model.fusion)?;
            let ti = match self.model.heads.route(img.class_id)? {
                crate::decoder::Route::Target(i) => i,
                _ => return Err(Error::Data(format!("class {} is not a target class", img.class_id))),
            };
            let hw = (img.image.dims()[0], img.image.dims()[1]);
            let (logits, _) = self.model.heads.target_pseudo_heads[ti].forward(&fused.scales[3], hw)?;
            let map = make_pseudo_labels(&logits.outer(0), self.cfg.theta)?;
            valid += map.valid_count();
            total += map.labels.len();
            self.state.pseudo.insert((img.class_id, img.index), map);
        }
        let frac = if total == 0 { 0.0 } else { valid as f64 / total as f64 };
        self.state.last_valid_frac = Some(frac);
        Ok(frac)
    }

    fn features_for<R: Rng + ?Sized>(
        &self,
        cache: &FeatureCache,
        items: &[(usize, usize, &Tensor)],
        rng: &mut R,
    ) -> Result<BackboneFeatures> {
        let mut noisy_images = Vec::new();
        let mut from_noisy = Vec::with_capacity(items.len());
        for &(_, _, image) in items {
            if rng.random::<f64>() < self.cfg.augment_prob && self.cfg.noise_std > 0.0 {
                from_noisy.push(Some(noisy_images.len()));
                noisy_images.push(noisy(image, self.cfg.noise_std, rng)?);
            } else {
                from_noisy.push(None);
            }
        }
        let noisy_feats = if noisy_images.is_empty() {
            None
        } else {
            Some(self.model.backbone_features(&Tensor::stack(&noisy_images)?)?)
        };
        let mut parts = Vec::with_capacity(items.len());
        for (&(c, i, _), slot) in items.iter().zip(&from_noisy) {
            match (slot, &noisy_feats) {
                (Some(k), Some(f)) => parts.push(f.item(*k)),
                _ => parts.push(cache.get(c, i)?.clone()),
            }
        }
        BackboneFeatures::concat(&parts)
    }

    /// Runs the next epoch and appends its log line.
    pub fn run_epoch(&mut self, data: &DomainSplit, cache: &FeatureCache) -> Result<EpochLog> {
        let e = self.state.epoch;
        let cfg = self.cfg.clone();
        let lr = lr_at(e, cfg.epochs, cfg.warmup_epochs, cfg.base_lr)?;
        if self.refresh_due(e) {
            self.refresh_pseudo_labels(data, cache)?;
        }
        let seed = cfg.seed;
        let mut r_src = rng::stream(seed, &[STREAM_SOURCE, e as u64]);
        let mut r_tgt = rng::stream(seed, &[STREAM_TARGET, e as u64]);
        let mut r_noise_s = rng::stream(seed, &[STREAM_NOISE_SOURCE, e as u64]);
        let mut r_noise_t = rng::stream(seed, &[STREAM_NOISE_TARGET, e as u64]);
        let mut r_aug = rng::stream(seed, &[STREAM_AUG, e as u64]);

        let src_keys: Vec<(usize, usize)> = data.source.iter().map(|s| (s.class_id, s.index)).collect();
        let src_batches = class_batches(&src_keys, cfg.batch_size, &mut r_src);
        let joint = cfg.pseudo_enabled && e >= cfg.phase1_epochs && !self.state.pseudo.is_empty();
        let tgt_batches = if joint {
            let keys: Vec<(usize, usize)> = data.target_train.iter().map(|s| (s.class_id, s.index)).collect();
            class_batches(&keys, cfg.batch_size, &mut r_tgt)
        } else {
            Vec::new()
        };
        let n_steps = src_batches.len();
        let mut plan: Vec<Vec<usize>> = vec![Vec::new(); n_steps];
        for j in 0..tgt_batches.len() {
            plan[j * n_steps / tgt_batches.len()].push(j);
        }

        let sw = cfg.switches();
        let mut sums = LossParts::default();
        let mut total = 0.0;
        for (s, members) in src_batches.iter().enumerate() {
            let samples: Vec<_> = members.iter().map(|&p| &data.source[p]).collect();
            let items: Vec<_> = samples.iter().map(|x| (x.class_id, x.index, &x.image)).collect();
            let hw = (samples[0].image.dims()[0], samples[0].image.dims()[1]);
            let src = SourceBatch {
                class_id: samples[0].class_id,
                features: self.features_for(cache, &items, &mut r_noise_s)?,
                labels: loss::mask_labels(&samples.iter().map(|x| &x.mask).collect::<Vec<_>>()),
                hw,
            };
            let mut targets = Vec::with_capacity(plan[s].len());
            for &j in &plan[s] {
                let imgs: Vec<_> = tgt_batches[j].iter().map(|&p| &data.target_train[p]).collect();
                let items: Vec<_> = imgs.iter().map(|x| (x.class_id, x.index, &x.image)).collect();
                let features = self.features_for(cache, &items, &mut r_noise_t)?;
                let thw = (imgs[0].image.dims()[0], imgs[0].image.dims()[1]);
                let op = random_op(thw.0, &mut r_aug);
                let clean = Tensor::stack(&imgs.iter().map(|x| x.image.clone()).collect::<Vec<_>>())?;
                let (aug_images, aug) = augment(&clean, op)?;
                let labels = imgs
                    .iter()
                    .map(|x| {
                        self.state
                            .pseudo
                            .get(&(x.class_id, x.index))
                            .map(|m| m.labels.clone())
                            .ok_or_else(|| Error::Data(format!("no pseudo labels for image {}", x.index)))
                    })
                    .collect::<Result<Vec<_>>>()?
                    .concat();
                targets.push(TargetBatch {
                    class_id: imgs[0].class_id,
                    features,
                    labels,
                    hw: thw,
                    aug_features: self.model.backbone_features(&aug_images)?,
                    aug,
                });
            }
            let (parts, step_cache) = step::forward(&self.model, &src, &targets, &sw)?;
            step::backward(&mut self.model, &src, &targets, &step_cache)?;
            step::commit_running_stats(&mut self.model, &step_cache);
            let active = step::active_prefixes(&self.model, &src, &targets, &sw)?;
            self.state.adam.step_filtered(&mut self.model, lr, &|name| {
                active.iter().any(|p| name.starts_with(p.as_str()))
            })?;
            self.model.zero_grads_matching(&active);
            sums.l_s += parts.l_s;
            sums.l_boot += parts.l_boot;
            sums.l_t_ce += parts.l_t_ce;
            sums.l_t_mse += parts.l_t_mse;
            total += parts.total(&cfg.weights);
        }
        let n = n_steps.max(1) as f64;
        let nt = tgt_batches.len().max(1) as f64;
        let line = EpochLog {
            epoch: e,
            lr,
            l_s: sums.l_s / n,
            l_boot: sums.l_boot / n,
            l_t_ce: sums.l_t_ce / nt,
            l_t_mse: sums.l_t_mse / nt,
            total: total / n,
            valid_pixel_frac: self.state.last_valid_frac,
            source_steps: n_steps,
            target_batches: tgt_batches.len(),
        };
        if !line.total.is_finite() {
            return Err(Error::Numeric(format!("epoch {e} diverged")));
        }
        self.state.log.push(line.clone());
        self.state.epoch += 1;
        Ok(line)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each.
    pub fn train(
        &mut self,
        data: &DomainSplit,
        mut after_epoch: impl FnMut(&Trainer, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        let cache = FeatureCache::build(&self.model, data)?;
        while !self.finished() {
            let t0 = Instant::now();
            let line = self.run_epoch(data, &cache)?;
            log::info!(
                "epoch {} lr {:.2e} L_s {:.4} total {:.4} ({:.1}s)",
                line.epoch,
                line.lr,
                line.l_s,
                line.total,
                t0.elapsed().as_secs_f64()
            );
            after_epoch(self, &line)?;
        }
        Ok(())
    }
}

/// Trains a fresh run to completion.
pub fn train(model: Model, data: &DomainSplit, cfg: &TrainConfig) -> Result<(Model, Vec<EpochLog>)> {
    let mut t = Trainer::new(model, cfg.clone())?;
    t.train(data, |_, _| Ok(()))?;
    Ok((t.model, t.state.log))
}

/// A model small enough for an exhaustive finite-difference sweep.
pub fn tiny_model_config(seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneSpec {
            hiera_dims: [4, 4, 8, 8],
            dense_dim: 4,
            seed,
            ..BackboneSpec::default()
        },
        decoder: DecoderConfig {
            stage_channels: [4, 4, 4],
            pseudo_hidden: [4, 4],
        },
        image_size: 32,
        source_classes: vec![0],
        target_classes: vec![1],
        shared_source_head: false,
        seed,
    }
}

fn banded_labels(n: usize, size: usize, shift: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n * size * size);
    for b in 0..n {
        for y in 0..size {
            for x in 0..size {
                let v = (x + 2 * y + 5 * b + shift) % 11;
                out.push(match v {
                    0..=2 => 1,
                    3 => IGNORE,
                    _ => 0,
                });
            }
        }
    }
    out
}

/// Denominator floor for the full-loss check. The objective carries about
/// 1e-14 of rounding jitter, so central differences at `h = 1e-5` cannot
/// resolve gradients much below this with a relative tolerance of 1e-4.
pub const FULL_LOSS_ABS_FLOOR: f64 = 1e-4;

/// Options used for the full-loss check.
pub fn full_loss_check_options() -> GradCheckOptions {
    GradCheckOptions {
        abs_floor: FULL_LOSS_ABS_FLOOR,
        ..GradCheckOptions::default()
    }
}

/// Checks every trainable gradient of the full objective (source CE,
/// pseudo-head bootstrap, target CE for both target heads, consistency MSE
/// through a rotation and a rescale) against central differences.
pub fn grad_check_full_loss(seed: u64, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = tiny_model_config(seed);
    let mut model = Model::new(&cfg)?;
    let size = cfg.image_size;
    let src_samples = synth_class_with(0, seed, 2, 0, size, 1.0, 0.0)?;
    let src_images = Tensor::stack(&src_samples.iter().map(|s| s.image.clone()).collect::<Vec<_>>())?;
    let src = SourceBatch {
        class_id: 0,
        features: model.backbone_features(&src_images)?,
        labels: loss::mask_labels(&src_samples.iter().map(|s| &s.mask).collect::<Vec<_>>()),
        hw: (size, size),
    };
    let tgt_samples = synth_class(1, seed, 4, 0, size)?;
    let mut targets = Vec::new();
    for (k, op) in [AugmentOp::Rot90(1), AugmentOp::Scale(2.0)].into_iter().enumerate() {
        let images = Tensor::stack(
            &tgt_samples[2 * k..2 * k + 2]
                .iter()
                .map(|s| s.image.clone())
                .collect::<Vec<_>>(),
        )?;
        let (aug_images, aug) = augment(&images, op)?;
        targets.push(TargetBatch {
            class_id: 1,
            features: model.backbone_features(&images)?,
            labels: banded_labels(2, size, k),
            hw: (size, size),
            aug_features: model.backbone_features(&aug_images)?,
            aug,
        });
    }
    let sw = StepSwitches {
        bootstrap: true,
        weights: LossWeights::default(),
    };
    model.zero_grads();
    let (_, cache) = step::forward(&model, &src, &targets, &sw)?;
    step::backward(&mut model, &src, &targets, &cache)?;
    Ok(finite_diff_check(
        &mut model,
        |m: &Model| match step::forward(m, &src, &targets, &sw) {
            Ok((parts, c)) => Probe {
                value: parts.total(&sw.weights),
                signature: c.signature,
            },
            Err(_) => Probe {
                value: f64::NAN,
                signature: u64::MAX,
            },
        },
        opts,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn class_batches_are_homogeneous_and_cover_all() {
        let keys: Vec<(usize, usize)> = (0..3).flat_map(|c| (0..7).map(move |i| (c, i))).collect();
        let mut r = rng::stream(1, &[]);
        let batches = class_batches(&keys, 3, &mut r);
        assert_eq!(batches.len(), 9);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..21).collect::<Vec<_>>());
        for b in &batches {
            assert!(b.iter().all(|&p| keys[p].0 == keys[b[0]].0));
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = TrainConfig {
            warmup_epochs: 50,
            ..TrainConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}
