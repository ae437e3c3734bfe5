//! Segmentation heads, pseudo-label heads and the per-class head bank.
//!
//! All feature maps are NHWC; head outputs are `(b, 2, H, W)` logits.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusedPyramid;
use crate::numkernel::{
    add_channel_bias, affine, affine_backward, batchnorm2d, batchnorm2d_backward, channel_sum, concat_channels, conv2d,
    conv2d_backward, conv_transpose2d, conv_transpose2d_backward, nchw_to_nhwc, nhwc_to_nchw, relu, relu_backward,
    resize_nhwc, resize_nhwc_backward, sign_signature, softmax_channel, split_channels, update_running_stats, BnCache,
    BnMode, ParamTensor, Parameterized, Tensor,
};
use crate::rng;

pub const BN_EPS: f64 = 1e-5;
pub const IGNORE: u8 = 255;

/// Normalization behaviour of a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    /// Output channels of the three upsampling stages, coarsest first.
    pub stage_channels: [usize; 3],
    /// Hidden widths of the pointwise pseudo-label head.
    pub pseudo_hidden: [usize; 2],
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [64, 32, 16],
            pseudo_hidden: [64, 32],
        }
    }
}

fn he<R: Rng + ?Sized>(dims: &[usize], fan_in: usize, rng: &mut R) -> ParamTensor {
    ParamTensor::trainable(Tensor::randn(dims, (2.0 / fan_in as f64).sqrt(), rng))
}

fn visit_named(prefix: &str, items: &[(&str, &ParamTensor)], f: &mut dyn FnMut(&str, &ParamTensor)) {
    for (name, p) in items {
        f(&format!("{prefix}{name}"), p);
    }
}

/// 3x3 convolution (no bias), batchnorm, ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub kernel: ParamTensor,
    pub gamma: ParamTensor,
    pub beta: ParamTensor,
    /// Running statistics; stored as frozen tensors so they checkpoint alongside weights.
    pub running_mean: ParamTensor,
    pub running_var: ParamTensor,
}

#[derive(Clone, Debug)]
pub struct ConvBlockCache {
    input: Tensor,
    bn: BnCache,
    pre_relu: Tensor,
}

impl ConvBlock {
    fn new<R: Rng + ?Sized>(c_in: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            kernel: he(&[3, 3, c_in, c_out], 9 * c_in, rng),
            gamma: ParamTensor::trainable(Tensor::full(&[c_out], 1.0)),
            beta: ParamTensor::trainable(Tensor::zeros(&[c_out])),
            running_mean: ParamTensor::frozen(Tensor::zeros(&[c_out])),
            running_var: ParamTensor::frozen(Tensor::full(&[c_out], 1.0)),
        }
    }

    fn forward(&self, x: &Tensor, mode: Mode, sig: &mut u64) -> Result<(Tensor, ConvBlockCache)> {
        let y = conv2d(x, &self.kernel.value, 1, 1)?;
        let bn_mode = match mode {
            Mode::Train => BnMode::Train,
            Mode::Eval => BnMode::Eval {
                mean: &self.running_mean.value,
                var: &self.running_var.value,
            },
        };
        let (z, bn) = batchnorm2d(&y, &self.gamma.value, &self.beta.value, BN_EPS, bn_mode)?;
        sign_signature(&z, sig);
        let out = relu(&z);
        Ok((
            out,
            ConvBlockCache {
                input: x.clone(),
                bn,
                pre_relu: z,
            },
        ))
    }

    fn backward(&mut self, cache: &ConvBlockCache, g: &Tensor) -> Result<Tensor> {
        let gz = relu_backward(&cache.pre_relu, g);
        let (gy, ggamma, gbeta) = batchnorm2d_backward(&cache.bn, &self.gamma.value, &gz);
        self.gamma.accumulate(&ggamma);
        self.beta.accumulate(&gbeta);
        let (gx, gk) = conv2d_backward(&cache.input, &self.kernel.value, 1, 1, &gy)?;
        self.kernel.accumulate(&gk);
        Ok(gx)
    }

    fn commit(&mut self, cache: &ConvBlockCache) {
        let count = cache.input.len() / cache.input.last_dim().max(1);
        update_running_stats(
            &cache.bn,
            count,
            &mut self.running_mean.value,
            &mut self.running_var.value,
        );
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        visit_named(
            prefix,
            &[
                ("kernel", &self.kernel),
                ("gamma", &self.gamma),
                ("beta", &self.beta),
                ("running_mean", &self.running_mean),
                ("running_var", &self.running_var),
            ],
            f,
        );
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}kernel"), &mut self.kernel);
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

/// Transposed-conv upsample, skip concatenation, [`ConvBlock`].
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeStage {
    pub up_kernel: ParamTensor,
    pub up_bias: ParamTensor,
    pub block: ConvBlock,
}

#[derive(Clone, Debug)]
pub struct StageCache {
    coarse: Tensor,
    up_channels: usize,
    block: ConvBlockCache,
}

impl DecodeStage {
    pub fn new<R: Rng + ?Sized>(c_coarse: usize, c_skip: usize, c_out: usize, rng: &mut R) -> Self {
        Self {
            up_kernel: he(&[2, 2, c_out, c_coarse], c_coarse, rng),
            up_bias: ParamTensor::trainable(Tensor::zeros(&[c_out])),
            block: ConvBlock::new(c_out + c_skip, c_out, rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.up_bias.value.len()
    }

    pub fn forward(&self, coarse: &Tensor, skip: &Tensor, mode: Mode, sig: &mut u64) -> Result<(Tensor, StageCache)> {
        let up = add_channel_bias(
            &conv_transpose2d(coarse, &self.up_kernel.value, 2)?,
            &self.up_bias.value,
        )?;
        if up.dims()[..3] != skip.dims()[..3] {
            return Err(Error::shape("decode stage skip", up.dims(), skip.dims()));
        }
        let cat = concat_channels(&up, skip)?;
        let (out, block) = self.block.forward(&cat, mode, sig)?;
        Ok((
            out,
            StageCache {
                coarse: coarse.clone(),
                up_channels: up.last_dim(),
                block,
            },
        ))
    }

    /// Returns gradients for `(coarse, skip)`.
    pub fn backward(&mut self, cache: &StageCache, g: &Tensor) -> Result<(Tensor, Tensor)> {
        let gcat = self.block.backward(&cache.block, g)?;
        let (gup, gskip) = split_channels(&gcat, cache.up_channels)?;
        self.up_bias.accumulate(&channel_sum(&gup));
        let (gc, gk) = conv_transpose2d_backward(&cache.coarse, &self.up_kernel.value, 2, &gup)?;
        self.up_kernel.accumulate(&gk);
        Ok((gc, gskip))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}up_kernel"), &self.up_kernel);
        f(&format!("{prefix}up_bias"), &self.up_bias);
        self.block.visit(&format!("{prefix}block."), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}up_kernel"), &mut self.up_kernel);
        f(&format!("{prefix}up_bias"), &mut self.up_bias);
        self.block.visit_mut(&format!("{prefix}block."), f);
    }
}

/// Three decode stages, a final block and a 1x1 classifier, upsampled x4.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderHead {
    pub stages: Vec<DecodeStage>,
    pub final_block: ConvBlock,
    pub cls_w: ParamTensor,
    pub cls_b: ParamTensor,
}

#[derive(Clone, Debug)]
pub struct HeadCache {
    stages: Vec<StageCache>,
    final_block: ConvBlockCache,
    final_out: Tensor,
    coarse_logits_dims: Vec<usize>,
    pub signature: u64,
}

impl DecoderHead {
    /// `widths` are the fused channel counts of the four scales, finest first.
    pub fn new(widths: &[usize; 4], cfg: &DecoderConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[]);
        let mut stages = Vec::with_capacity(3);
        let mut c_coarse = widths[3];
        for (i, &c_out) in cfg.stage_channels.iter().enumerate() {
            stages.push(DecodeStage::new(c_coarse, widths[2 - i], c_out, &mut r));
            c_coarse = c_out;
        }
        let c = cfg.stage_channels[2];
        Self {
            stages,
            final_block: ConvBlock::new(c, c, &mut r),
            cls_w: ParamTensor::trainable(Tensor::randn(&[c, 2], (1.0 / c as f64).sqrt(), &mut r)),
            cls_b: ParamTensor::trainable(Tensor::zeros(&[2])),
        }
    }

    /// Logits `(b, 2, H, W)` at the image resolution `(out_h, out_w)`.
    pub fn forward(&self, pyr: &FusedPyramid, out_hw: (usize, usize), mode: Mode) -> Result<(Tensor, HeadCache)> {
        if pyr.scales.len() != 4 {
            return Err(Error::Config(format!(
                "decoder needs 4 scales, got {}",
                pyr.scales.len()
            )));
        }
        let mut sig = 0u64;
        let mut x = pyr.scales[3].clone();
        let mut caches = Vec::with_capacity(3);
        for (i, stage) in self.stages.iter().enumerate() {
            let (y, c) = stage.forward(&x, &pyr.scales[2 - i], mode, &mut sig)?;
            caches.push(c);
            x = y;
        }
        let (f, fc) = self.final_block.forward(&x, mode, &mut sig)?;
        let logits = affine(&f, &self.cls_w.value, &self.cls_b.value)?;
        let coarse_logits_dims = logits.dims().to_vec();
        let up = resize_nhwc(&logits, out_hw.0, out_hw.1)?;
        Ok((
            nhwc_to_nchw(&up)?,
            HeadCache {
                stages: caches,
                final_block: fc,
                final_out: f,
                coarse_logits_dims,
                signature: sig,
            },
        ))
    }

    /// Accumulates parameter gradients; returns gradients for the 4 scales.
    pub fn backward(&mut self, cache: &HeadCache, g_logits: &Tensor) -> Result<Vec<Tensor>> {
        let g_up = nchw_to_nhwc(g_logits)?;
        let g_coarse = resize_nhwc_backward(&cache.coarse_logits_dims, &g_up)?;
        let cls = affine_backward(&cache.final_out, &self.cls_w.value, &g_coarse)?;
        self.cls_w.accumulate(&cls.w);
        self.cls_b.accumulate(&cls.b);
        let mut g = self.final_block.backward(&cache.final_block, &cls.x)?;
        let mut skips = vec![Tensor::zeros(&[0]); 4];
        for i in (0..3).rev() {
            let (gc, gs) = self.stages[i].backward(&cache.stages[i], &g)?;
            skips[2 - i] = gs;
            g = gc;
        }
        skips[3] = g;
        Ok(skips)
    }

    /// Folds the batch statistics of a train-mode pass into the running stats.
    pub fn commit_running_stats(&mut self, cache: &HeadCache) {
        for (s, c) in self.stages.iter_mut().zip(&cache.stages) {
            s.block.commit(&c.block);
        }
        self.final_block.commit(&cache.final_block);
    }
}

impl Parameterized for DecoderHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, s) in self.stages.iter().enumerate() {
            s.visit(&format!("{prefix}stage{i}."), f);
        }
        self.final_block.visit(&format!("{prefix}final."), f);
        f(&format!("{prefix}cls_w"), &self.cls_w);
        f(&format!("{prefix}cls_b"), &self.cls_b);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_mut(&format!("{prefix}stage{i}."), f);
        }
        self.final_block.visit_mut(&format!("{prefix}final."), f);
        f(&format!("{prefix}cls_w"), &mut self.cls_w);
        f(&format!("{prefix}cls_b"), &mut self.cls_b);
    }
}

/// Three pointwise layers on the coarsest fused scale.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelHead {
    pub weights: Vec<ParamTensor>,
    pub biases: Vec<ParamTensor>,
}

#[derive(Clone, Debug)]
pub struct PseudoCache {
    inputs: Vec<Tensor>,
    pre: Vec<Tensor>,
    coarse_dims: Vec<usize>,
    pub signature: u64,
}

impl PseudoLabelHead {
    pub fn new(c_in: usize, cfg: &DecoderConfig, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[]);
        let widths = [c_in, cfg.pseudo_hidden[0], cfg.pseudo_hidden[1], 2];
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for l in 0..3 {
            weights.push(he(&[widths[l], widths[l + 1]], widths[l], &mut r));
            biases.push(ParamTensor::trainable(Tensor::zeros(&[widths[l + 1]])));
        }
        Self { weights, biases }
    }

    pub fn in_channels(&self) -> usize {
        self.weights[0].value.dims()[0]
    }

    /// Logits `(b, 2, H, W)` from `F_4`.
    pub fn forward(&self, f4: &Tensor, out_hw: (usize, usize)) -> Result<(Tensor, PseudoCache)> {
        if f4.last_dim() != self.in_channels() {
            return Err(Error::shape(
                "pseudo head input",
                f4.dims(),
                self.weights[0].value.dims(),
            ));
        }
        let mut sig = 0u64;
        let mut x = f4.clone();
        let mut inputs = Vec::with_capacity(3);
        let mut pre = Vec::with_capacity(2);
        for l in 0..3 {
            inputs.push(x.clone());
            let z = affine(&x, &self.weights[l].value, &self.biases[l].value)?;
            if l < 2 {
                sign_signature(&z, &mut sig);
                x = relu(&z);
                pre.push(z);
            } else {
                x = z;
            }
        }
        let coarse_dims = x.dims().to_vec();
        let up = resize_nhwc(&x, out_hw.0, out_hw.1)?;
        Ok((
            nhwc_to_nchw(&up)?,
            PseudoCache {
                inputs,
                pre,
                coarse_dims,
                signature: sig,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the gradient for `F_4`.
    pub fn backward(&mut self, cache: &PseudoCache, g_logits: &Tensor) -> Result<Tensor> {
        let mut g = resize_nhwc_backward(&cache.coarse_dims, &nchw_to_nhwc(g_logits)?)?;
        for l in (0..3).rev() {
            if l < 2 {
                g = relu_backward(&cache.pre[l], &g);
            }
            let a = affine_backward(&cache.inputs[l], &self.weights[l].value, &g)?;
            self.weights[l].accumulate(&a.w);
            self.biases[l].accumulate(&a.b);
            g = a.x;
        }
        Ok(g)
    }
}

impl Parameterized for PseudoLabelHead {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for l in 0..3 {
            f(&format!("{prefix}w{l}"), &self.weights[l]);
            f(&format!("{prefix}b{l}"), &self.biases[l]);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for l in 0..3 {
            f(&format!("{prefix}w{l}"), &mut self.weights[l]);
            f(&format!("{prefix}b{l}"), &mut self.biases[l]);
        }
    }
}

/// Which head serves a class.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "domain", content = "head", rename_all = "lowercase")]
pub enum Route {
    Source(usize),
    Target(usize),
}

/// One segmentation head per source class (or one shared head), and a
/// segmentation head plus a pseudo-label head per target class.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadBank {
    pub source_heads: Vec<DecoderHead>,
    pub target_seg_heads: Vec<DecoderHead>,
    pub target_pseudo_heads: Vec<PseudoLabelHead>,
    pub routing: BTreeMap<usize, Route>,
}

impl HeadBank {
    pub fn new(
        source_classes: &[usize],
        target_classes: &[usize],
        widths: &[usize; 4],
        cfg: &DecoderConfig,
        shared_source: bool,
        seed: u64,
    ) -> Result<Self> {
        if let Some(c) = source_classes.iter().find(|c| target_classes.contains(c)) {
            return Err(Error::Config(format!("class {c} routed to both domains")));
        }
        let mut routing = BTreeMap::new();
        let n_source = if shared_source {
            1.min(source_classes.len())
        } else {
            source_classes.len()
        };
        let source_heads = (0..n_source)
            .map(|i| DecoderHead::new(widths, cfg, rng::child_seed(seed, &[1, i as u64])))
            .collect();
        for (i, &c) in source_classes.iter().enumerate() {
            routing.insert(c, Route::Source(if shared_source { 0 } else { i }));
        }
        let mut target_seg_heads = Vec::new();
        let mut target_pseudo_heads = Vec::new();
        for (i, &c) in target_classes.iter().enumerate() {
            target_seg_heads.push(DecoderHead::new(widths, cfg, rng::child_seed(seed, &[2, i as u64])));
            target_pseudo_heads.push(PseudoLabelHead::new(
                widths[3],
                cfg,
                rng::child_seed(seed, &[3, i as u64]),
            ));
            routing.insert(c, Route::Target(i));
        }
        Ok(Self {
            source_heads,
            target_seg_heads,
            target_pseudo_heads,
            routing,
        })
    }

    pub fn head_count(&self) -> usize {
        self.source_heads.len() + self.target_seg_heads.len() + self.target_pseudo_heads.len()
    }

    pub fn route(&self, class_id: usize) -> Result<Route> {
        self.routing
            .get(&class_id)
            .copied()
            .ok_or_else(|| Error::Config(format!("no head routed for class {class_id}")))
    }
}

impl Parameterized for HeadBank {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (i, h) in self.source_heads.iter().enumerate() {
            h.visit_params(&format!("{prefix}source{i}."), f);
        }
        for (i, h) in self.target_seg_heads.iter().enumerate() {
            h.visit_params(&format!("{prefix}target_seg{i}."), f);
        }
        for (i, h) in self.target_pseudo_heads.iter().enumerate() {
            h.visit_params(&format!("{prefix}target_pseudo{i}."), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (i, h) in self.source_heads.iter_mut().enumerate() {
            h.visit_params_mut(&format!("{prefix}source{i}."), f);
        }
        for (i, h) in self.target_seg_heads.iter_mut().enumerate() {
            h.visit_params_mut(&format!("{prefix}target_seg{i}."), f);
        }
        for (i, h) in self.target_pseudo_heads.iter_mut().enumerate() {
            h.visit_params_mut(&format!("{prefix}target_pseudo{i}."), f);
        }
    }
}

/// Per-pixel hard labels of one image, `IGNORE` where not confident.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: Vec<u8>,
    pub confidence: Vec<f64>,
    pub h: usize,
    pub w: usize,
}

impl PseudoLabelMap {
    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    pub fn all_ignore(h: usize, w: usize) -> Self {
        Self {
            labels: vec![IGNORE; h * w],
            confidence: vec![0.0; h * w],
            h,
            w,
        }
    }
}

/// Softmax over the two logit channels of a `(2, H, W)` map; the argmax is
/// kept where its probability strictly exceeds `theta`.
pub fn make_pseudo_labels(logits: &Tensor, theta: f64) -> Result<PseudoLabelMap> {
    let (h, w) = match *logits.dims() {
        [2, h, w] => (h, w),
        _ => return Err(Error::shape("pseudo labels need (2,H,W) logits", logits.dims(), &[2])),
    };
    let p = softmax_channel(logits)?;
    let (p0, p1) = p.data().split_at(h * w);
    let mut labels = Vec::with_capacity(h * w);
    let mut confidence = Vec::with_capacity(h * w);
    for (&a, &b) in p0.iter().zip(p1) {
        let (label, conf) = if b > a { (1u8, b) } else { (0u8, a) };
        confidence.push(conf);
        labels.push(if conf > theta { label } else { IGNORE });
    }
    Ok(PseudoLabelMap {
        labels,
        confidence,
        h,
        w,
    })
}
