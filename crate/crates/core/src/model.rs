//! The full network: frozen backbones, trainable fusion and the head bank.

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneFeatures, BackboneSpec, Backbones};
use crate::decoder::{DecoderConfig, HeadBank};
use crate::error::{Error, Result};
use crate::fusion::{fuse, FusedPyramid, FusionParams};
use crate::numkernel::{ParamTensor, Parameterized, Tensor};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneSpec,
    pub decoder: DecoderConfig,
    pub image_size: usize,
    pub source_classes: Vec<usize>,
    pub target_classes: Vec<usize>,
    /// One shared source head instead of one per source class.
    pub shared_source_head: bool,
    pub seed: u64,
}

impl ModelConfig {
    pub fn fused_widths(&self) -> [usize; 4] {
        self.backbone.hiera_dims.map(|d| 2 * d)
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.image_size == 0 || !self.image_size.is_multiple_of(32) {
            return Err(Error::Config(format!(
                "image size {} not divisible by 32",
                self.image_size
            )));
        }
        if self.source_classes.is_empty() || self.target_classes.is_empty() {
            return Err(Error::Config("model needs source and target classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub backbones: Backbones,
    pub fusion: FusionParams,
    pub heads: HeadBank,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let backbones = Backbones::new(&config.backbone)?;
        let fusion = FusionParams::new(
            &config.backbone.hiera_dims,
            config.backbone.dense_dim,
            rng::child_seed(config.seed, &[10]),
        )?;
        let heads = HeadBank::new(
            &config.source_classes,
            &config.target_classes,
            &config.fused_widths(),
            &config.decoder,
            config.shared_source_head,
            rng::child_seed(config.seed, &[11]),
        )?;
        Ok(Self {
            config: config.clone(),
            backbones,
            fusion,
            heads,
        })
    }

    pub fn backbone_features(&self, images: &Tensor) -> Result<BackboneFeatures> {
        self.backbones.forward(images)
    }

    /// Fused pyramid of a batch of `(b, H, W, 3)` images.
    pub fn encode(&self, images: &Tensor) -> Result<FusedPyramid> {
        Ok(fuse(&self.backbones.forward(images)?, &self.fusion)?.0)
    }

    /// Zeroes the gradients of parameters whose name starts with any prefix.
    pub fn zero_grads_matching(&mut self, prefixes: &[String]) {
        self.visit_params_mut("", &mut |name, p| {
            if prefixes.iter().any(|q| name.starts_with(q.as_str())) {
                p.zero_grad();
            }
        });
    }
}

impl Parameterized for Model {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        self.backbones.visit_params(&format!("{prefix}backbone."), f);
        self.fusion.visit_params(&format!("{prefix}fusion."), f);
        self.heads.visit_params(&format!("{prefix}heads."), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        self.backbones.visit_params_mut(&format!("{prefix}backbone."), f);
        self.fusion.visit_params_mut(&format!("{prefix}fusion."), f);
        self.heads.visit_params_mut(&format!("{prefix}heads."), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parameter_partition() {
        let cfg = ModelConfig {
            backbone: BackboneSpec::default(),
            decoder: DecoderConfig::default(),
            image_size: 64,
            source_classes: vec![0, 1],
            target_classes: vec![2],
            shared_source_head: false,
            seed: 1,
        };
        let m = Model::new(&cfg).unwrap();
        assert_eq!(m.heads.head_count(), 4);
        let mut frozen_outside_backbone = Vec::new();
        m.visit_params("", &mut |name, p| {
            if name.starts_with("backbone.") {
                assert!(p.frozen, "{name}");
            } else if p.frozen {
                frozen_outside_backbone.push(name.to_string());
            }
        });
        assert!(frozen_outside_backbone.iter().all(|n| n.contains("running_")));
        let pyr = m.encode(&Tensor::full(&[1, 64, 64, 3], 0.5)).unwrap();
        assert_eq!(pyr.scales[3].dims(), [1, 2, 2, 512]);
    }
}
