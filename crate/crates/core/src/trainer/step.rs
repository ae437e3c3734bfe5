//! One optimisation step: forward over a source batch and any target
//! batches, loss assembly, and the matching backward pass.

use crate::backbone::BackboneFeatures;
use crate::decoder::{DecoderHead, HeadCache, Mode, PseudoCache, Route};
use crate::error::{Error, Result};
use crate::fusion::{encode_backward, fuse, EncodeCache};
use crate::model::Model;
use crate::numkernel::{softmax_channel, softmax_channel_backward, Tensor};

use super::augment::AugmentRecord;
use super::loss::{consistency_mse, cross_entropy, LossWeights};

/// A class-homogeneous labelled batch.
#[derive(Clone, Debug)]
pub struct SourceBatch {
    pub class_id: usize,
    pub features: BackboneFeatures,
    /// `(b, H, W)` ground-truth labels.
    pub labels: Vec<u8>,
    pub hw: (usize, usize),
}

/// A class-homogeneous unlabelled batch with its current pseudo labels and
/// an augmented view for the consistency term.
#[derive(Clone, Debug)]
pub struct TargetBatch {
    pub class_id: usize,
    pub features: BackboneFeatures,
    pub labels: Vec<u8>,
    pub hw: (usize, usize),
    pub aug_features: BackboneFeatures,
    pub aug: AugmentRecord,
}

/// Which loss groups participate.
#[derive(Clone, Copy, Debug)]
pub struct StepSwitches {
    /// Train the pseudo heads on source masks.
    pub bootstrap: bool,
    pub weights: LossWeights,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_s: f64,
    pub l_boot: f64,
    pub l_t_ce: f64,
    pub l_t_mse: f64,
}

impl LossParts {
    /// Optimised objective; pseudo-head bootstrapping shares the target CE weight.
    pub fn total(&self, w: &LossWeights) -> f64 {
        self.l_s + w.lambda1 * (self.l_boot + self.l_t_ce) + w.lambda2 * self.l_t_mse
    }
}

struct SourceCache {
    head: usize,
    enc: EncodeCache,
    head_cache: HeadCache,
    g_logits: Tensor,
    boot: Vec<(PseudoCache, Tensor)>,
}

struct TargetCache {
    head: usize,
    enc: EncodeCache,
    seg: HeadCache,
    g_seg: Tensor,
    pseudo: PseudoCache,
    g_pseudo: Tensor,
    aug_enc: EncodeCache,
    aug_seg: HeadCache,
    g_aug: Tensor,
}

/// Everything [`backward`] needs, plus a hash of all ReLU sign patterns.
pub struct StepCache {
    source: SourceCache,
    targets: Vec<TargetCache>,
    pub signature: u64,
}

fn mix(sig: &mut u64, s: u64) {
    *sig = sig.rotate_left(17) ^ s.wrapping_mul(0x9e37_79b9_7f4a_7c15);
}

fn source_head(model: &Model, class_id: usize) -> Result<usize> {
    match model.heads.route(class_id)? {
        Route::Source(i) => Ok(i),
        Route::Target(_) => Err(Error::Config(format!("class {class_id} is a target class"))),
    }
}

fn target_head(model: &Model, class_id: usize) -> Result<usize> {
    match model.heads.route(class_id)? {
        Route::Target(i) => Ok(i),
        Route::Source(_) => Err(Error::Config(format!("class {class_id} is a source class"))),
    }
}

fn scaled(mut t: Tensor, s: f64) -> Tensor {
    t.scale(s);
    t
}

/// Positive-class probabilities `(b, H', W')` of `(b, 2, H', W')` logits.
fn positive_prob(p: &Tensor) -> Result<Tensor> {
    let (b, _, h, w) = p.dims4()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(b * plane);
    for i in 0..b {
        out.extend_from_slice(&p.data()[(2 * i + 1) * plane..(2 * i + 2) * plane]);
    }
    Tensor::new(&[b, h, w], out)
}

fn positive_prob_backward(g: &Tensor, dims: &[usize]) -> Tensor {
    let (b, plane) = (dims[0], dims[2] * dims[3]);
    let mut out = Tensor::zeros(dims);
    for i in 0..b {
        out.data_mut()[(2 * i + 1) * plane..(2 * i + 2) * plane].copy_from_slice(&g.data()[i * plane..(i + 1) * plane]);
    }
    out
}

/// Forward pass and loss of one step. Gradients of the weighted objective
/// with respect to every head output are stored in the cache.
pub fn forward(
    model: &Model,
    src: &SourceBatch,
    targets: &[TargetBatch],
    sw: &StepSwitches,
) -> Result<(LossParts, StepCache)> {
    let w = sw.weights;
    let mut sig = 0u64;
    let mut parts = LossParts::default();

    let head = source_head(model, src.class_id)?;
    let (fused, enc) = fuse(&src.features, &model.fusion)?;
    let (logits, head_cache) = model.heads.source_heads[head].forward(&fused, src.hw, Mode::Train)?;
    mix(&mut sig, head_cache.signature);
    let (l_s, g_logits, _) = cross_entropy(&logits, &src.labels)?;
    parts.l_s = l_s;
    let mut boot = Vec::new();
    if sw.bootstrap {
        let n = model.heads.target_pseudo_heads.len() as f64;
        for ph in &model.heads.target_pseudo_heads {
            let (pl, pc) = ph.forward(&fused.scales[3], src.hw)?;
            mix(&mut sig, pc.signature);
            let (lb, gb, _) = cross_entropy(&pl, &src.labels)?;
            parts.l_boot += lb / n;
            boot.push((pc, scaled(gb, w.lambda1 / n)));
        }
    }
    let source = SourceCache {
        head,
        enc,
        head_cache,
        g_logits,
        boot,
    };

    let mut target_caches = Vec::with_capacity(targets.len());
    for tb in targets {
        let ti = target_head(model, tb.class_id)?;
        let seg_head: &DecoderHead = &model.heads.target_seg_heads[ti];
        let (fused, enc) = fuse(&tb.features, &model.fusion)?;
        let (seg_logits, seg) = seg_head.forward(&fused, tb.hw, Mode::Train)?;
        let (pl, pseudo) = model.heads.target_pseudo_heads[ti].forward(&fused.scales[3], tb.hw)?;
        mix(&mut sig, seg.signature);
        mix(&mut sig, pseudo.signature);
        let (l_seg, g_seg, _) = cross_entropy(&seg_logits, &tb.labels)?;
        let (l_ps, g_ps, _) = cross_entropy(&pl, &tb.labels)?;
        parts.l_t_ce += l_seg + l_ps;

        let (aug_fused, aug_enc) = fuse(&tb.aug_features, &model.fusion)?;
        let (aug_logits, aug_seg) = seg_head.forward(&aug_fused, tb.aug.out_hw, Mode::Train)?;
        mix(&mut sig, aug_seg.signature);
        let p = softmax_channel(&aug_logits)?;
        let s_prime = tb.aug.restore(&positive_prob(&p)?)?;
        let (l_mse, g_s) = consistency_mse(&s_prime, &tb.labels)?;
        parts.l_t_mse += l_mse;
        let g_p1 = tb.aug.restore_backward(&scaled(g_s, w.lambda2))?;
        let g_aug = softmax_channel_backward(&p, &positive_prob_backward(&g_p1, p.dims()))?;

        target_caches.push(TargetCache {
            head: ti,
            enc,
            seg,
            g_seg: scaled(g_seg, w.lambda1),
            pseudo,
            g_pseudo: scaled(g_ps, w.lambda1),
            aug_enc,
            aug_seg,
            g_aug,
        });
    }
    for v in [parts.l_s, parts.l_boot, parts.l_t_ce, parts.l_t_mse] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss component {v}")));
        }
    }
    Ok((
        parts,
        StepCache {
            source,
            targets: target_caches,
            signature: sig,
        },
    ))
}

/// Accumulates gradients of the weighted objective into the model.
pub fn backward(model: &mut Model, src: &SourceBatch, targets: &[TargetBatch], cache: &StepCache) -> Result<()> {
    let sc = &cache.source;
    let mut g_pyr = model.heads.source_heads[sc.head].backward(&sc.head_cache, &sc.g_logits)?;
    for ((pc, g), ph) in sc.boot.iter().zip(model.heads.target_pseudo_heads.iter_mut()) {
        let g4 = ph.backward(pc, g)?;
        g_pyr[3].add_assign(&g4)?;
    }
    encode_backward(&src.features, &mut model.fusion, &sc.enc, &g_pyr)?;

    for (tb, tc) in targets.iter().zip(&cache.targets) {
        let mut g = model.heads.target_seg_heads[tc.head].backward(&tc.seg, &tc.g_seg)?;
        let g4 = model.heads.target_pseudo_heads[tc.head].backward(&tc.pseudo, &tc.g_pseudo)?;
        g[3].add_assign(&g4)?;
        encode_backward(&tb.features, &mut model.fusion, &tc.enc, &g)?;
        let g_aug = model.heads.target_seg_heads[tc.head].backward(&tc.aug_seg, &tc.g_aug)?;
        encode_backward(&tb.aug_features, &mut model.fusion, &tc.aug_enc, &g_aug)?;
    }
    Ok(())
}

/// Folds batch statistics of the un-augmented passes into running stats.
pub fn commit_running_stats(model: &mut Model, cache: &StepCache) {
    model.heads.source_heads[cache.source.head].commit_running_stats(&cache.source.head_cache);
    for tc in &cache.targets {
        model.heads.target_seg_heads[tc.head].commit_running_stats(&tc.seg);
    }
}

/// Parameter-name prefixes touched by a step.
pub fn active_prefixes(
    model: &Model,
    src: &SourceBatch,
    targets: &[TargetBatch],
    sw: &StepSwitches,
) -> Result<Vec<String>> {
    let mut out = vec![
        "fusion.".to_string(),
        format!("heads.source{}.", source_head(model, src.class_id)?),
    ];
    if sw.bootstrap {
        for i in 0..model.heads.target_pseudo_heads.len() {
            out.push(format!("heads.target_pseudo{i}."));
        }
    }
    for tb in targets {
        let ti = target_head(model, tb.class_id)?;
        out.push(format!("heads.target_seg{ti}."));
        out.push(format!("heads.target_pseudo{ti}."));
    }
    out.sort();
    out.dedup();
    Ok(out)
}
