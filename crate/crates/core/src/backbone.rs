//! Frozen random-weight feature extractors.
//!
//! [`HierarchicalEncoder`] produces a 4-scale pyramid at strides 4, 8, 16
//! and 32; [`DenseEncoder`] a single map at stride 16. Weights are drawn
//! once from the seed in [`BackboneSpec`] and never updated.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkernel::{add_channel_bias, conv2d, gelu, ParamTensor, Parameterized, Tensor};
use crate::rng;

/// Reproducible description of both stand-in encoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub hiera_dims: [usize; 4],
    pub strides: [usize; 4],
    pub dense_dim: usize,
    pub dense_stride: usize,
    pub seed: u64,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            hiera_dims: [32, 64, 128, 256],
            strides: [4, 8, 16, 32],
            dense_dim: 48,
            dense_stride: 16,
            seed: 7,
        }
    }
}

impl BackboneSpec {
    /// Full-size channel widths of the original encoders.
    pub fn full_scale() -> Self {
        Self {
            hiera_dims: [256, 512, 1024, 2048],
            dense_dim: 384,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides != [4, 8, 16, 32] {
            return Err(Error::Config(format!("unsupported strides {:?}", self.strides)));
        }
        if self.hiera_dims.iter().any(|&d| d == 0 || d % 4 != 0) {
            return Err(Error::Config(format!(
                "hierarchical dims must be positive multiples of 4, got {:?}",
                self.hiera_dims
            )));
        }
        if self.dense_dim == 0 || ![8, 16, 32].contains(&self.dense_stride) {
            return Err(Error::Config(
                "dense encoder needs dim > 0 and stride 8, 16 or 32".into(),
            ));
        }
        Ok(())
    }
}

/// Convolution with bias, applied without padding when `pad == 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenConv {
    pub kernel: ParamTensor,
    pub bias: ParamTensor,
    pub stride: usize,
    pub pad: usize,
}

impl FrozenConv {
    fn new(kh: usize, c_in: usize, c_out: usize, stride: usize, pad: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, &[]);
        let std = (2.0 / (kh * kh * c_in) as f64).sqrt();
        Self {
            kernel: ParamTensor::frozen(Tensor::randn(&[kh, kh, c_in, c_out], std, &mut r)),
            bias: ParamTensor::frozen(Tensor::randn(&[c_out], 0.1, &mut r)),
            stride,
            pad,
        }
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = conv2d(x, &self.kernel.value, self.stride, self.pad)?;
        Ok(gelu(&add_channel_bias(&y, &self.bias.value)?))
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        f(&format!("{prefix}.kernel"), &self.kernel);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        f(&format!("{prefix}.kernel"), &mut self.kernel);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

fn normalise_input(images: &Tensor) -> Result<Tensor> {
    let (_, h, w, c) = images
        .dims4()
        .map_err(|_| Error::shape("encoder input (b,h,w,3)", images.dims(), &[0, 0, 0, 3]))?;
    if c != 3 {
        return Err(Error::shape("encoder input channels", images.dims(), &[0, 0, 0, 3]));
    }
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::shape(
            "encoder input must be divisible by 32",
            images.dims(),
            &[32, 32],
        ));
    }
    Ok(images.map(|v| (v - 0.5) / 0.25))
}

/// Four scales of `(b, h_n, w_n, c_n)` feature maps, finest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub scales: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn batch(&self) -> usize {
        self.scales[0].dims()[0]
    }

    /// Pyramid of the `i`-th batch element (leading dim 1).
    pub fn item(&self, i: usize) -> FeaturePyramid {
        FeaturePyramid {
            scales: self
                .scales
                .iter()
                .map(|s| {
                    let mut d = s.dims().to_vec();
                    d[0] = 1;
                    s.outer(i).reshape(&d).expect("same length")
                })
                .collect(),
        }
    }

    /// Concatenates single-element pyramids along the batch axis.
    pub fn concat(items: &[FeaturePyramid]) -> Result<FeaturePyramid> {
        if items.is_empty() {
            return Err(Error::Param("empty pyramid batch".into()));
        }
        let mut scales = Vec::with_capacity(4);
        for n in 0..items[0].scales.len() {
            let mut dims = items[0].scales[n].dims().to_vec();
            let mut data = Vec::new();
            let mut b = 0;
            for p in items {
                if p.scales[n].dims()[1..] != dims[1..] {
                    return Err(Error::shape("pyramid concat", &dims, p.scales[n].dims()));
                }
                b += p.scales[n].dims()[0];
                data.extend_from_slice(p.scales[n].data());
            }
            dims[0] = b;
            scales.push(Tensor::new(&dims, data)?);
        }
        Ok(FeaturePyramid { scales })
    }
}

/// Four-stage strided conv pyramid standing in for the hierarchical encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalEncoder {
    pub stages: Vec<[FrozenConv; 2]>,
}

impl HierarchicalEncoder {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let mut stages = Vec::with_capacity(4);
        let mut c_in = 3;
        for (n, &d) in spec.hiera_dims.iter().enumerate() {
            let down = if n == 0 { 4 } else { 2 };
            let s = rng::child_seed(spec.seed, &[1, n as u64]);
            stages.push([
                FrozenConv::new(down, c_in, d, down, 0, rng::child_seed(s, &[0])),
                FrozenConv::new(3, d, d, 1, 1, rng::child_seed(s, &[1])),
            ]);
            c_in = d;
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let mut x = normalise_input(images)?;
        let mut scales = Vec::with_capacity(4);
        for [down, mix] in &self.stages {
            x = mix.forward(&down.forward(&x)?)?;
            scales.push(x.clone());
        }
        Ok(FeaturePyramid { scales })
    }
}

/// Single-scale patchify trunk standing in for the dense encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseEncoder {
    pub layers: [FrozenConv; 2],
}

impl DenseEncoder {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        spec.validate()?;
        let s = rng::child_seed(spec.seed, &[2]);
        let p = spec.dense_stride;
        Ok(Self {
            layers: [
                FrozenConv::new(p, 3, spec.dense_dim, p, 0, rng::child_seed(s, &[0])),
                FrozenConv::new(3, spec.dense_dim, spec.dense_dim, 1, 1, rng::child_seed(s, &[1])),
            ],
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = normalise_input(images)?;
        self.layers[1].forward(&self.layers[0].forward(&x)?)
    }
}

/// Raw outputs of both encoders for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneFeatures {
    pub hiera: FeaturePyramid,
    pub dense: Tensor,
}

impl BackboneFeatures {
    pub fn item(&self, i: usize) -> BackboneFeatures {
        let mut d = self.dense.dims().to_vec();
        d[0] = 1;
        BackboneFeatures {
            hiera: self.hiera.item(i),
            dense: self.dense.outer(i).reshape(&d).expect("same length"),
        }
    }

    pub fn concat(items: &[BackboneFeatures]) -> Result<BackboneFeatures> {
        let hiera = FeaturePyramid::concat(&items.iter().map(|f| f.hiera.clone()).collect::<Vec<_>>())?;
        let dense_items: Vec<Tensor> = items.iter().map(|f| f.dense.outer(0)).collect();
        Ok(BackboneFeatures {
            hiera,
            dense: Tensor::stack(&dense_items)?,
        })
    }
}

/// Both frozen encoders.
#[derive(Clone, Debug, PartialEq)]
pub struct Backbones {
    pub spec: BackboneSpec,
    pub hiera: HierarchicalEncoder,
    pub dense: DenseEncoder,
}

impl Backbones {
    pub fn new(spec: &BackboneSpec) -> Result<Self> {
        Ok(Self {
            spec: spec.clone(),
            hiera: HierarchicalEncoder::new(spec)?,
            dense: DenseEncoder::new(spec)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<BackboneFeatures> {
        Ok(BackboneFeatures {
            hiera: self.hiera.forward(images)?,
            dense: self.dense.forward(images)?,
        })
    }

    /// SHA-256 over every parameter name and value, as lowercase hex.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params("", &mut |name, p| {
            h.update(name.as_bytes());
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        });
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

impl Parameterized for Backbones {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &ParamTensor)) {
        for (n, stage) in self.hiera.stages.iter().enumerate() {
            stage[0].visit(&format!("{prefix}hiera.{n}.down"), f);
            stage[1].visit(&format!("{prefix}hiera.{n}.mix"), f);
        }
        self.dense.layers[0].visit(&format!("{prefix}dense.patch"), f);
        self.dense.layers[1].visit(&format!("{prefix}dense.mix"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut ParamTensor)) {
        for (n, stage) in self.hiera.stages.iter_mut().enumerate() {
            stage[0].visit_mut(&format!("{prefix}hiera.{n}.down"), f);
            stage[1].visit_mut(&format!("{prefix}hiera.{n}.mix"), f);
        }
        self.dense.layers[0].visit_mut(&format!("{prefix}dense.patch"), f);
        self.dense.layers[1].visit_mut(&format!("{prefix}dense.mix"), f);
    }
}
