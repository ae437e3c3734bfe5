//! Adapter fusion of the two encoders into one multi-scale representation.
//!
//! Per scale `n`: a residual bottleneck adapter on the hierarchical map, a
//! linear projection of the resized dense map into the same width, then
//! channel interleaving (`out[2j]` hierarchical, `out[2j+1]` dense).

use rand::Rng;

use crate::backbone::{BackboneFeatures, Backbones, FeaturePyramid};
use crate::error::{Error, Result};
use crate::numkernel::{affine, affine_backward, gelu, gelu_backward, resize_nhwc, ParamTensor, Parameterized, Tensor};
use crate::rng;

/// Fused maps share the pyramid container; channel widths are doubled.
pub type FusedPyramid = FeaturePyramid;

pub const ADAPTER_INIT_STD: f64 = 0.02;

/// Residual bottleneck `gelu(x W_down + b_down) W_up + b_up + x`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterParams {
    pub w_down: ParamTensor,
    pub b_down: ParamTensor,
    pub w_up: ParamTensor,
    pub b_up: ParamTensor,
}

impl AdapterParams {
    pub fn new<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Result<Self> {
        if d == 0 || !d.is_multiple_of(4) {
            return Err(Error::Param(format!(
                "adapter width {d} must be a positive multiple of 4"
            )));
        }
        let r = d / 4;
        Ok(Self {
            w_down: ParamTensor::trainable(Tensor::randn(&[d, r], ADAPTER_INIT_STD, rng)),
            b_down: ParamTensor::trainable(Tensor::zeros(&[r])),
            w_up: ParamTensor::trainable(Tensor::randn(&[r, d], ADAPTER_INIT_STD, rng)),
            b_up: ParamTensor::trainable(Tensor::zeros(&[d])),
        })
    }

    pub fn zeros(d: usize) -> Self {
        let r = d / 4;
        Self {
            w_down: ParamTensor::trainable(Tensor::zeros(&[d, r])),
            b_down: ParamTensor::trainable(Tensor::zeros(&[r])),
            w_up: ParamTensor::trainable(Tensor::zeros(&[r, d])),
            b_up: ParamTensor::trainable(Tensor::zeros(&[d])),
        }
    }

    pub fn width(&self) -> usize {
        self.w_down.value.dims()[0]
    }
}

/// Linear map from the dense width to one hierarchical width.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionParams {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl ProjectionParams {
    pub fn new<R: Rng + ?Sized>(d_dense: usize, d: usize, rng: &mut R) -> Self {
        Self {
            w: ParamTensor::trainable(Tensor::randn(&[d_dense, d], 1.0 / (d_dense as f64).sqrt(), rng)),
            b: ParamTensor::trainable(Tensor::zeros(&[d])),
        }
    }

    pub fn zeros(d_dense: usize, d: usize) -> Self {
        Self {
            w: ParamTensor::trainable(Tensor::zeros(&[d_dense, d])),
            b: ParamTensor::trainable(Tensor::zeros(&[d])),
        }
    }
}

/// Intermediates of one adapter forward pass.
#[derive(Clone, Debug)]
pub struct AdapterCache {
    pre: Tensor,
    hidden: Tensor,
}

pub fn adapter_forward_cached(x: &Tensor, p: &AdapterParams) -> Result<(Tensor, AdapterCache)> {
    if x.last_dim() != p.width() {
        return Err(Error::shape("adapter input", x.dims(), p.w_down.value.dims()));
    }
    let pre = affine(x, &p.w_down.value, &p.b_down.value)?;
    let hidden = gelu(&pre);
    let mut out = affine(&hidden, &p.w_up.value, &p.b_up.value)?;
    out.add_assign(x)?;
    Ok((out, AdapterCache { pre, hidden }))
}

pub fn adapter_forward(x: &Tensor, p: &AdapterParams) -> Result<Tensor> {
    Ok(adapter_forward_cached(x, p)?.0)
}

/// Accumulates parameter gradients and returns the input gradient.
pub fn adapter_backward(x: &Tensor, p: &mut AdapterParams, cache: &AdapterCache, grad_out: &Tensor) -> Result<Tensor> {
    let up = affine_backward(&cache.hidden, &p.w_up.value, grad_out)?;
    p.w_up.accumulate(&up.w);
    p.b_up.accumulate(&up.b);
    let g_pre = gelu_backward(&cache.pre, &up.x);
    let down = affine_backward(x, &p.w_down.value, &g_pre)?;
    p.w_down.accumulate(&down.w);
    p.b_down.accumulate(&down.b);
    let mut gx = down.x;
    gx.add_assign(grad_out)?;
    Ok(gx)
}

/// Projects dense features that were already resized to the target grid.
pub fn project_dense(x: &Tensor, p: &ProjectionParams) -> Result<Tensor> {
    affine(x, &p.w.value, &p.b.value)
}

pub fn project_dense_backward(x: &Tensor, p: &mut ProjectionParams, grad_out: &Tensor) -> Result<Tensor> {
    let g = affine_backward(x, &p.w.value, grad_out)?;
    p.w.accumulate(&g.w);
    p.b.accumulate(&g.b);
    Ok(g.x)
}

/// `out[..., 2j] = a[..., j]`, `out[..., 2j+1] = b[..., j]`.
pub fn interleave(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::shape("interleave", a.dims(), b.dims()));
    }
    let c = a.last_dim();
    let mut out = Vec::with_capacity(2 * a.len());
    for (pa, pb) in a.data().chunks_exact(c).zip(b.data().chunks_exact(c)) {
        for j in 0..c {
            out.push(pa[j]);
            out.push(pb[j]);
        }
    }
    let mut dims = a.dims().to_vec();
    *dims.last_mut().unwrap() = 2 * c;
    Tensor::new(&dims, out)
}

/// Inverse of [`interleave`]: even channels, odd channels.
pub fn deinterleave(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let c2 = x.last_dim();
    if !c2.is_multiple_of(2) {
        return Err(Error::shape("deinterleave needs an even channel count", x.dims(), &[2]));
    }
    let mut a = Vec::with_capacity(x.len() / 2);
    let mut b = Vec::with_capacity(x.len() / 2);
    for px in x.data().chunks_exact(c2) {
        for pair in px.chunks_exact(2) {
            a.push(pair[0]);
            b.push(pair[1]);
        }
    }
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = c2 / 2;
    Ok((Tensor::new(&dims, a)?, Tensor::new(&dims, b)?))
}

/// Trainable parameters of the fusion encoder, one adapter and one
/// projection per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub adapters: Vec<AdapterParams>,
    pub projections: Vec<ProjectionParams>,
}

impl FusionParams {
    pub fn new(hiera_dims: &[usize; 4], dense_dim: usize, seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, &[0xf0]);
        let mut adapters = Vec::with_capacity(4);
        let mut projections = Vec::with_capacity(4);
        for &d in hiera_dims {
            adapters.push(AdapterParams::new(d, &mut r)?);
            projections.push(ProjectionParams::new(dense_dim, d, &mut r));
        }
        Ok(Self { adapters, projections })
    }

    pub fn zeros(hiera_dims: &[usize; 4], dense_dim: usize) -> Self {
        Self {
            adapters: hiera_dims.iter().map(|&d| AdapterParams::zeros(d)).collect(),
            projections: hiera_dims
                .iter()
                .map(|&d| ProjectionParams::zeros(dense_dim, d))
                .collect(),
        }
    }
}

impl Parameterized for FusionParams {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (n, a) in self.adapters.iter().enumerate() {
            f(&format!("{prefix}adapter.{n}.w_down"), &a.w_down);
            f(&format!("{prefix}adapter.{n}.b_down"), &a.b_down);
            f(&format!("{prefix}adapter.{n}.w_up"), &a.w_up);
            f(&format!("{prefix}adapter.{n}.b_up"), &a.b_up);
        }
        for (n, p) in self.projections.iter().enumerate() {
            f(&format!("{prefix}proj.{n}.w"), &p.w);
            f(&format!("{prefix}proj.{n}.b"), &p.b);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (n, a) in self.adapters.iter_mut().enumerate() {
            f(&format!("{prefix}adapter.{n}.w_down"), &mut a.w_down);
            f(&format!("{prefix}adapter.{n}.b_down"), &mut a.b_down);
            f(&format!("{prefix}adapter.{n}.w_up"), &mut a.w_up);
            f(&format!("{prefix}adapter.{n}.b_up"), &mut a.b_up);
        }
        for (n, p) in self.projections.iter_mut().enumerate() {
            f(&format!("{prefix}proj.{n}.w"), &mut p.w);
            f(&format!("{prefix}proj.{n}.b"), &mut p.b);
        }
    }
}

/// Per-scale intermediates needed by [`encode_backward`].
#[derive(Clone, Debug)]
pub struct EncodeCache {
    adapters: Vec<AdapterCache>,
    dense_resized: Vec<Tensor>,
}

/// Fuses precomputed backbone features.
pub fn fuse(features: &BackboneFeatures, params: &FusionParams) -> Result<(FusedPyramid, EncodeCache)> {
    let n_scales = features.hiera.scales.len();
    if n_scales != params.adapters.len() {
        return Err(Error::Config(format!(
            "{n_scales} feature scales but {} adapters",
            params.adapters.len()
        )));
    }
    let mut scales = Vec::with_capacity(n_scales);
    let mut cache = EncodeCache {
        adapters: Vec::with_capacity(n_scales),
        dense_resized: Vec::with_capacity(n_scales),
    };
    for (n, fh) in features.hiera.scales.iter().enumerate() {
        let (_, h, w, _) = fh.dims4()?;
        let (adapted, ac) = adapter_forward_cached(fh, &params.adapters[n])?;
        let dr = resize_nhwc(&features.dense, h, w)?;
        let projected = project_dense(&dr, &params.projections[n])?;
        scales.push(interleave(&adapted, &projected)?);
        cache.adapters.push(ac);
        cache.dense_resized.push(dr);
    }
    Ok((FusedPyramid { scales }, cache))
}

/// Backbone forward followed by [`fuse`].
pub fn encode(images: &Tensor, backbones: &Backbones, params: &FusionParams) -> Result<FusedPyramid> {
    Ok(fuse(&backbones.forward(images)?, params)?.0)
}

/// Routes per-scale gradients of the fused maps into the adapter and
/// projection parameters. The backbone receives nothing.
pub fn encode_backward(
    features: &BackboneFeatures,
    params: &mut FusionParams,
    cache: &EncodeCache,
    grads: &[Tensor],
) -> Result<()> {
    for (n, g) in grads.iter().enumerate() {
        let (g_adapted, g_projected) = deinterleave(g)?;
        adapter_backward(
            &features.hiera.scales[n],
            &mut params.adapters[n],
            &cache.adapters[n],
            &g_adapted,
        )?;
        project_dense_backward(&cache.dense_resized[n], &mut params.projections[n], &g_projected)?;
    }
    Ok(())
}
