//! Procedural multi-class texture corpus with injected defects.
//!
//! Twelve parameterised texture families stand in for the product categories
//! of an inspection benchmark. Each sample is a pure function of
//! `(master seed, class, split, index)`; pixel values are quantised to 8 bits
//! so images survive a PNG round trip bit-exactly.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{PI, TAU};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::Tensor;
use crate::rng;

pub const NUM_CLASSES: usize = 12;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = [
    "stripes", "checker", "waves", "wood", "diagonal", "rings", "dots", "weave", "gradient", "brick", "plaid", "zigzag",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blob,
    PatchSwap,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [DefectKind::Scratch, DefectKind::Blob, DefectKind::PatchSwap];
}

/// A labelled image: `image` is `(H, W, 3)` in `[0, 1]`, `mask` is `(H, W)`
/// with entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub class_id: usize,
    pub split: Split,
    pub is_defective: bool,
    pub index: usize,
}

/// A target-domain training image. It carries no mask by construction.
#[derive(Clone, Debug, PartialEq)]
pub struct UnlabeledImage {
    pub image: Tensor,
    pub class_id: usize,
    pub index: usize,
}

impl ImageSample {
    pub fn size(&self) -> (usize, usize) {
        (self.image.dims()[0], self.image.dims()[1])
    }

    pub fn defect_area(&self) -> usize {
        self.mask.data().iter().filter(|&&v| v > 0.5).count()
    }

    fn strip_label(&self) -> UnlabeledImage {
        UnlabeledImage {
            image: self.image.clone(),
            class_id: self.class_id,
            index: self.index,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatagenConfig {
    pub size: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Fraction of source-class training images carrying a defect.
    pub source_defect_fraction: f64,
    /// Fraction of test images left defect-free.
    pub test_normal_fraction: f64,
    pub seed: u64,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            n_train: 40,
            n_test: 20,
            source_defect_fraction: 0.5,
            test_normal_fraction: 0.25,
            seed: 42,
        }
    }
}

/// Source/target class partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub source_classes: BTreeSet<usize>,
    pub target_classes: BTreeSet<usize>,
    pub seed: u64,
    /// Normal target images reserved per target class for the memory bank.
    pub bank_size: usize,
}

impl SplitConfig {
    /// Picks `n_target` target classes out of `total` with a seeded shuffle.
    pub fn random(total: usize, n_target: usize, seed: u64) -> Result<Self> {
        if n_target == 0 || n_target >= total {
            return Err(Error::Config(format!(
                "need 1 <= target classes < {total}, got {n_target}"
            )));
        }
        let mut ids: Vec<usize> = (0..total).collect();
        ids.shuffle(&mut rng::stream(seed, &[0x5111]));
        Ok(Self {
            target_classes: ids[..n_target].iter().copied().collect(),
            source_classes: ids[n_target..].iter().copied().collect(),
            seed,
            bank_size: 10,
        })
    }

    pub fn label(&self) -> String {
        format!("{}/{}", self.source_classes.len(), self.target_classes.len())
    }

    pub fn validate(&self, total: usize) -> Result<()> {
        if let Some(c) = self.source_classes.intersection(&self.target_classes).next() {
            return Err(Error::Config(format!("class {c} is both source and target")));
        }
        if self.source_classes.len() + self.target_classes.len() != total {
            return Err(Error::Config(format!(
                "split covers {} of {total} classes",
                self.source_classes.len() + self.target_classes.len()
            )));
        }
        if let Some(c) = self
            .source_classes
            .iter()
            .chain(&self.target_classes)
            .find(|&&c| c >= total)
        {
            return Err(Error::Config(format!("unknown class id {c}")));
        }
        if self.source_classes.is_empty() || self.target_classes.is_empty() {
            return Err(Error::Config("both domains need at least one class".into()));
        }
        Ok(())
    }
}

/// The partitioned corpus handed to training and inference.
#[derive(Clone, Debug)]
pub struct DomainSplit {
    pub source: Vec<ImageSample>,
    pub target_train: Vec<UnlabeledImage>,
    pub target_test: Vec<ImageSample>,
    /// Per target class, `bank_size` defect-free training images.
    pub normal_bank: BTreeMap<usize, Vec<UnlabeledImage>>,
}

// ---------------------------------------------------------------------------
// Texture families

struct Palette {
    mean: [f64; 3],
    contrast: [f64; 3],
}

const PALETTES: [Palette; NUM_CLASSES] = [
    Palette {
        mean: [0.30, 0.30, 0.70],
        contrast: [0.15, 0.15, 0.12],
    },
    Palette {
        mean: [0.50, 0.50, 0.50],
        contrast: [0.30, 0.30, 0.30],
    },
    Palette {
        mean: [0.40, 0.70, 0.30],
        contrast: [0.10, 0.12, 0.08],
    },
    Palette {
        mean: [0.60, 0.40, 0.25],
        contrast: [0.12, 0.10, 0.07],
    },
    Palette {
        mean: [0.75, 0.35, 0.35],
        contrast: [0.15, 0.15, 0.15],
    },
    Palette {
        mean: [0.30, 0.60, 0.65],
        contrast: [0.12, 0.15, 0.15],
    },
    Palette {
        mean: [0.70, 0.65, 0.30],
        contrast: [-0.20, -0.20, -0.15],
    },
    Palette {
        mean: [0.65, 0.55, 0.80],
        contrast: [0.10, 0.10, 0.08],
    },
    Palette {
        mean: [0.72, 0.72, 0.72],
        contrast: [0.06, 0.06, 0.06],
    },
    Palette {
        mean: [0.85, 0.50, 0.45],
        contrast: [-0.10, -0.22, -0.22],
    },
    Palette {
        mean: [0.35, 0.35, 0.25],
        contrast: [0.15, 0.10, 0.10],
    },
    Palette {
        mean: [0.50, 0.28, 0.55],
        contrast: [0.18, 0.12, 0.15],
    },
];

/// Per-sample nuisance parameters of a texture.
#[derive(Clone, Copy, Debug)]
struct TextureParams {
    phase: [f64; 3],
    angle: f64,
    center: (f64, f64),
}

impl TextureParams {
    fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        Self {
            phase: [
                rng.random::<f64>() * TAU,
                rng.random::<f64>() * TAU,
                rng.random::<f64>() * TAU,
            ],
            angle: (rng.random::<f64>() - 0.5) * 0.1,
            center: (rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)),
        }
    }
}

fn smoothstep_wave(s: f64, sharp: f64) -> f64 {
    0.5 + 0.5 * (sharp * s).tanh() / sharp.tanh()
}

/// Pattern intensity in `[0, 1]` at normalised coordinates `(u, v)`.
#[allow(clippy::approx_constant)]
fn pattern(class_id: usize, u: f64, v: f64, p: &TextureParams) -> f64 {
    let [a, b, c] = p.phase;
    let (ca, sa) = (p.angle.cos(), p.angle.sin());
    let (ru, rv) = (u * ca - v * sa, u * sa + v * ca);
    let t = match class_id {
        0 => 0.5 + 0.5 * (TAU * 6.0 * rv + a).sin(),
        1 => smoothstep_wave((TAU * 4.0 * ru + a).sin() * (TAU * 4.0 * rv + b).sin(), 4.0),
        2 => {
            let s = (TAU * (3.0 * ru + 2.0 * rv) + a).sin()
                + (TAU * (-2.0 * ru + 4.0 * rv) + b).sin()
                + (TAU * (4.0 * ru + 1.0 * rv) + c).sin();
            0.5 + s / 6.0
        }
        3 => 0.5 + 0.5 * (TAU * 7.0 * (rv + 0.06 * (TAU * 2.0 * ru + b).sin()) + a).sin(),
        4 => smoothstep_wave((TAU * 5.0 * (ru + rv) * 0.7071 + a).sin(), 3.0),
        5 => {
            let r = ((u - p.center.0).powi(2) + (v - p.center.1).powi(2)).sqrt();
            0.5 + 0.5 * (TAU * 6.0 * r + a).sin()
        }
        6 => {
            let period = 0.2;
            let fu = (ru + a / TAU * period).rem_euclid(period) / period - 0.5;
            let fv = (rv + b / TAU * period).rem_euclid(period) / period - 0.5;
            (-(fu * fu + fv * fv) / (2.0 * 0.18 * 0.18)).exp()
        }
        7 => 0.5 + 0.25 * ((TAU * 6.0 * ru + a).sin() + (TAU * 6.0 * rv + b).sin()),
        8 => 0.5 + 0.45 * ((u - 0.5) * (a).cos() + (v - 0.5) * (a).sin()),
        9 => {
            let rows = 5.0;
            let y = rv * rows + b / TAU;
            let row = y.floor();
            let x = ru * 3.0 + a / TAU + 0.5 * (row.rem_euclid(2.0));
            let dy = (y - row - 0.5).abs();
            let dx = (x - x.floor() - 0.5).abs();
            let mortar = smoothstep_wave((dy.max(dx * 0.6) - 0.42) * 20.0, 1.0);
            1.0 - mortar
        }
        10 => {
            let s1 = 0.5 + 0.5 * (TAU * 3.0 * ru + a).sin();
            let s2 = 0.5 + 0.5 * (TAU * 5.0 * rv + b).sin();
            0.5 * (s1 + s2)
        }
        11 => {
            let tri = |x: f64| 2.0 * (x - (x + 0.5).floor()).abs();
            0.5 + 0.5 * (TAU * 6.0 * (rv + 0.08 * tri(4.0 * ru + a / TAU)) + b).sin()
        }
        _ => unreachable!("class id validated by caller"),
    };
    t.clamp(0.0, 1.0)
}

fn quantise(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn check_class(class_id: usize) -> Result<()> {
    if class_id >= NUM_CLASSES {
        return Err(Error::Param(format!("unknown class id {class_id}")));
    }
    Ok(())
}

/// Renders a normal texture image of a class (quantised, `(size, size, 3)`).
fn render<R: Rng + ?Sized>(class_id: usize, size: usize, rng: &mut R) -> Tensor {
    let params = TextureParams::sample(rng);
    let pal = &PALETTES[class_id];
    let mut img = Tensor::zeros(&[size, size, 3]);
    let d = img.data_mut();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let t = pattern(class_id, u, v, &params) * 2.0 - 1.0;
            for ch in 0..3 {
                let noise: f64 = StandardNormal.sample(rng);
                d[(y * size + x) * 3 + ch] = quantise(pal.mean[ch] + pal.contrast[ch] * t + 0.01 * noise);
            }
        }
    }
    img
}

// ---------------------------------------------------------------------------
// Defects

fn changed_mask(before: &Tensor, after: &Tensor) -> Tensor {
    let (h, w) = (before.dims()[0], before.dims()[1]);
    let mut mask = Tensor::zeros(&[h, w]);
    for (i, (a, b)) in before
        .data()
        .chunks_exact(3)
        .zip(after.data().chunks_exact(3))
        .enumerate()
    {
        if a != b {
            mask.data_mut()[i] = 1.0;
        }
    }
    mask
}

fn luminance(c: [f64; 3]) -> f64 {
    0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]
}

fn paint(img: &mut Tensor, y: usize, x: usize, color: [f64; 3]) {
    let at = (y * img.dims()[1] + x) * 3;
    for (dst, c) in img.data_mut()[at..at + 3].iter_mut().zip(color) {
        *dst = quantise(c);
    }
}

fn scratch<R: Rng + ?Sized>(img: &mut Tensor, class_id: usize, rng: &mut R) {
    let size = img.dims()[0] as f64;
    let len = rng.random_range(0.35..0.65) * size;
    let half_width = rng.random_range(1.3..2.3) * size / 64.0;
    let angle = rng.random::<f64>() * PI;
    let (dx, dy) = (angle.cos(), angle.sin());
    let margin = 0.1 * size;
    let cx = rng.random_range(margin + len / 2.0 * dx.abs()..size - margin - len / 2.0 * dx.abs() + 1e-9);
    let cy = rng.random_range(margin + len / 2.0 * dy.abs()..size - margin - len / 2.0 * dy.abs() + 1e-9);
    let shade = if luminance(PALETTES[class_id].mean) > 0.5 {
        0.08
    } else {
        0.95
    };
    let n = img.dims()[0];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let along = (px * dx + py * dy).clamp(-len / 2.0, len / 2.0);
            let dist = ((px - along * dx).powi(2) + (py - along * dy).powi(2)).sqrt();
            if dist <= half_width {
                paint(img, y, x, [shade; 3]);
            }
        }
    }
}

/// Paints a disk of radius `radius` pixels in a colour far from the class palette.
pub fn paint_blob<R: Rng + ?Sized>(img: &mut Tensor, class_id: usize, radius: f64, rng: &mut R) {
    let size = img.dims()[0] as f64;
    let cx = rng.random_range(radius + 1.0..size - radius - 1.0);
    let cy = rng.random_range(radius + 1.0..size - radius - 1.0);
    let mean = PALETTES[class_id].mean;
    let mut dir = [0.0; 3];
    for d in &mut dir {
        *d = StandardNormal.sample(rng);
    }
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-9);
    let color: Vec<f64> = (0..3)
        .map(|ch| {
            let c = mean[ch] + 0.4 * dir[ch] / norm;
            if !(0.05..=0.95).contains(&c) {
                mean[ch] - 0.4 * dir[ch] / norm
            } else {
                c
            }
        })
        .collect();
    let n = img.dims()[0];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            if px * px + py * py <= radius * radius {
                paint(img, y, x, [color[0], color[1], color[2]]);
            }
        }
    }
}

fn patch_swap<R: Rng + ?Sized>(img: &mut Tensor, class_id: usize, rng: &mut R) {
    let n = img.dims()[0];
    let side = ((rng.random_range(0.18..0.28) * n as f64).round() as usize).max(2);
    let foreign = (class_id + rng.random_range(1..NUM_CLASSES)) % NUM_CLASSES;
    let donor = render(foreign, n, rng);
    let y0 = rng.random_range(n / 10..n - side - n / 10);
    let x0 = rng.random_range(n / 10..n - side - n / 10);
    let sy = rng.random_range(0..n - side);
    let sx = rng.random_range(0..n - side);
    for y in 0..side {
        for x in 0..side {
            for ch in 0..3 {
                let v = donor.data()[((sy + y) * n + sx + x) * 3 + ch];
                img.data_mut()[((y0 + y) * n + x0 + x) * 3 + ch] = v;
            }
        }
    }
}

/// Allowed defect area as a fraction of the image.
pub const DEFECT_AREA_RANGE: (f64, f64) = (0.005, 0.10);

/// Returns a defective copy of a normal sample; the mask marks exactly the
/// pixels whose value changed.
pub fn inject_defect(sample: &ImageSample, kind: DefectKind, seed: u64) -> Result<ImageSample> {
    if sample.is_defective {
        return Err(Error::Param("defect injection requires a normal sample".into()));
    }
    let (h, w) = sample.size();
    let total = (h * w) as f64;
    let mut rng = rng::stream(seed, &[kind as u64]);
    for _ in 0..64 {
        let mut img = sample.image.clone();
        match kind {
            DefectKind::Scratch => scratch(&mut img, sample.class_id, &mut rng),
            DefectKind::Blob => {
                let r = rng.random_range(0.07..0.15) * h as f64;
                paint_blob(&mut img, sample.class_id, r, &mut rng);
            }
            DefectKind::PatchSwap => patch_swap(&mut img, sample.class_id, &mut rng),
        }
        let mask = changed_mask(&sample.image, &img);
        let frac = mask.sum() / total;
        if frac >= DEFECT_AREA_RANGE.0 && frac <= DEFECT_AREA_RANGE.1 {
            return Ok(ImageSample {
                image: img,
                mask,
                is_defective: true,
                ..sample.clone()
            });
        }
    }
    Err(Error::Data(format!(
        "could not place a {kind:?} defect within the area bounds"
    )))
}

// ---------------------------------------------------------------------------
// Corpus assembly

fn sample_seed(master: u64, class_id: usize, split: Split, index: usize) -> u64 {
    rng::child_seed(master, &[class_id as u64, split as u64, index as u64])
}

fn normal_sample(class_id: usize, split: Split, index: usize, size: usize, master: u64) -> ImageSample {
    let mut r = rng::stream(sample_seed(master, class_id, split, index), &[0]);
    ImageSample {
        image: render(class_id, size, &mut r),
        mask: Tensor::zeros(&[size, size]),
        class_id,
        split,
        is_defective: false,
        index,
    }
}

fn defective_sample(class_id: usize, split: Split, index: usize, size: usize, master: u64) -> Result<ImageSample> {
    let base = normal_sample(class_id, split, index, size, master);
    let seed = sample_seed(master, class_id, split, index);
    let kind = DefectKind::ALL[rng::stream(seed, &[1]).random_range(0..3)];
    inject_defect(&base, kind, rng::child_seed(seed, &[2]))
}

fn check_size(size: usize) -> Result<()> {
    if size < 32 {
        return Err(Error::Param(format!("image size {size} < 32")));
    }
    Ok(())
}

/// Generates one class with a chosen fraction of defective training images.
pub fn synth_class_with(
    class_id: usize,
    seed: u64,
    n_train: usize,
    n_test: usize,
    size: usize,
    train_defect_fraction: f64,
    test_normal_fraction: f64,
) -> Result<Vec<ImageSample>> {
    check_class(class_id)?;
    check_size(size)?;
    let n_train_defective = (n_train as f64 * train_defect_fraction).round() as usize;
    let n_test_normal = (n_test as f64 * test_normal_fraction).round() as usize;
    let mut out = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train {
        out.push(if i < n_train - n_train_defective {
            normal_sample(class_id, Split::Train, i, size, seed)
        } else {
            defective_sample(class_id, Split::Train, i, size, seed)?
        });
    }
    for i in 0..n_test {
        out.push(if i < n_test_normal {
            normal_sample(class_id, Split::Test, i, size, seed)
        } else {
            defective_sample(class_id, Split::Test, i, size, seed)?
        });
    }
    Ok(out)
}

/// One class with an all-normal training split and a mixed test split.
pub fn synth_class(class_id: usize, seed: u64, n_train: usize, n_test: usize, size: usize) -> Result<Vec<ImageSample>> {
    synth_class_with(
        class_id,
        seed,
        n_train,
        n_test,
        size,
        0.0,
        DatagenConfig::default().test_normal_fraction,
    )
}

/// A generated corpus together with the split it was generated for.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatagenConfig,
    pub split: SplitConfig,
    pub samples: Vec<ImageSample>,
}

/// Generates every class; source classes get defective training images,
/// target classes an all-normal training split.
pub fn generate_dataset(cfg: &DatagenConfig, split: &SplitConfig) -> Result<Dataset> {
    split.validate(NUM_CLASSES)?;
    let mut samples = Vec::new();
    for class_id in 0..NUM_CLASSES {
        let frac = if split.source_classes.contains(&class_id) {
            cfg.source_defect_fraction
        } else {
            0.0
        };
        samples.extend(synth_class_with(
            class_id,
            cfg.seed,
            cfg.n_train,
            cfg.n_test,
            cfg.size,
            frac,
            cfg.test_normal_fraction,
        )?);
    }
    Ok(Dataset {
        config: cfg.clone(),
        split: split.clone(),
        samples,
    })
}

/// Partitions a corpus into the trainer- and evaluator-facing sets.
pub fn make_split(samples: &[ImageSample], config: &SplitConfig) -> Result<DomainSplit> {
    config.validate(NUM_CLASSES)?;
    let mut source = Vec::new();
    let mut target_train = Vec::new();
    let mut target_test = Vec::new();
    let mut normals: BTreeMap<usize, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        let is_target = config.target_classes.contains(&s.class_id);
        match (is_target, s.split) {
            (false, Split::Train) => source.push(s.clone()),
            (false, Split::Test) => {}
            (true, Split::Train) => {
                target_train.push(s.strip_label());
                if !s.is_defective {
                    normals.entry(s.class_id).or_default().push(s);
                }
            }
            (true, Split::Test) => target_test.push(s.clone()),
        }
    }
    let mut normal_bank = BTreeMap::new();
    for &class_id in &config.target_classes {
        let mut pool = normals.remove(&class_id).unwrap_or_default();
        if pool.len() < config.bank_size {
            return Err(Error::Data(format!(
                "class {class_id} has {} normal training images, bank needs {}",
                pool.len(),
                config.bank_size
            )));
        }
        pool.shuffle(&mut rng::stream(config.seed, &[0xba4c, class_id as u64]));
        let picked: Vec<UnlabeledImage> = pool[..config.bank_size]
            .iter()
            .map(|s| {
                debug_assert!(s.mask.data().iter().all(|&m| m == 0.0));
                s.strip_label()
            })
            .collect();
        normal_bank.insert(class_id, picked);
    }
    Ok(DomainSplit {
        source,
        target_train,
        target_test,
        normal_bank,
    })
}

// ---------------------------------------------------------------------------
// PNG interchange

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::Data(format!("png: {e}"))
}

/// Writes an `(H,W,3)` image in `[0,1]` as 8-bit RGB.
pub fn save_rgb_png(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let (h, w) = (image.dims()[0], image.dims()[1]);
    let bytes: Vec<u8> = image
        .data()
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    write_png(path.as_ref(), w as u32, h as u32, png::ColorType::Rgb, &bytes)
}

/// Writes a binary `(H,W)` mask as 8-bit grayscale (0 / 255).
pub fn save_mask_png(path: impl AsRef<Path>, mask: &Tensor) -> Result<()> {
    let (h, w) = (mask.dims()[0], mask.dims()[1]);
    let bytes: Vec<u8> = mask.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
    write_png(path.as_ref(), w as u32, h as u32, png::ColorType::Grayscale, &bytes)
}

pub(crate) fn write_png(path: &Path, w: u32, h: u32, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w, h);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info().map_err(png_err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| png_err("size overflow"))?];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(png_err("expected 8-bit samples"));
    }
    let channels = info.color_type.samples();
    buf.truncate(info.buffer_size());
    Ok((info.height as usize, info.width as usize, channels, buf))
}

pub fn load_rgb_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let (h, w, c, buf) = read_png(path.as_ref())?;
    if c != 3 {
        return Err(png_err(format!("expected RGB, got {c} channels")));
    }
    Tensor::new(&[h, w, 3], buf.iter().map(|&b| b as f64 / 255.0).collect())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let (h, w, c, buf) = read_png(path.as_ref())?;
    if c != 1 {
        return Err(png_err(format!("expected grayscale mask, got {c} channels")));
    }
    Tensor::new(&[h, w], buf.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect())
}
