//! Geometric augmentation with an inverse that maps predictions back to
//! the original frame.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{bilinear_resize, bilinear_resize_backward, resize_nhwc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "param", rename_all = "snake_case")]
pub enum AugmentOp {
    Hflip,
    Vflip,
    /// Counter-clockwise quarter turns, `1..=3`.
    Rot90(u8),
    /// Output side is `round(side * s)`.
    Scale(f64),
}

/// What was applied, and the frame sizes on both sides.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentRecord {
    pub op: AugmentOp,
    pub in_hw: (usize, usize),
    pub out_hw: (usize, usize),
}

impl AugmentRecord {
    /// The operation undoing `op` on single-channel maps.
    pub fn inverse(&self) -> AugmentOp {
        match self.op {
            AugmentOp::Rot90(k) => AugmentOp::Rot90((4 - k % 4) % 4),
            AugmentOp::Scale(s) => AugmentOp::Scale(1.0 / s),
            other => other,
        }
    }

    /// Maps `(b, H', W')` predictions in the augmented frame back to `(b, H, W)`.
    pub fn restore(&self, maps: &Tensor) -> Result<Tensor> {
        let (b, h, w) = dims3(maps)?;
        if (h, w) != self.out_hw {
            return Err(Error::shape(
                "restore input",
                maps.dims(),
                &[self.out_hw.0, self.out_hw.1],
            ));
        }
        match self.op {
            AugmentOp::Scale(_) => bilinear_resize(maps, self.in_hw.0, self.in_hw.1),
            _ => remap(maps, (b, h, w, 1), self.inverse()).and_then(|t| t.reshape(&[b, self.in_hw.0, self.in_hw.1])),
        }
    }

    /// Adjoint of [`AugmentRecord::restore`].
    pub fn restore_backward(&self, grad: &Tensor) -> Result<Tensor> {
        let (b, h, w) = dims3(grad)?;
        if (h, w) != self.in_hw {
            return Err(Error::shape(
                "restore_backward input",
                grad.dims(),
                &[self.in_hw.0, self.in_hw.1],
            ));
        }
        match self.op {
            AugmentOp::Scale(_) => bilinear_resize_backward(&[b, self.out_hw.0, self.out_hw.1], grad),
            op => remap(grad, (b, h, w, 1), op).and_then(|t| t.reshape(&[b, self.out_hw.0, self.out_hw.1])),
        }
    }
}

fn dims3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [b, h, w] => Ok((b, h, w)),
        _ => Err(Error::shape("expected (b,H,W) maps", x.dims(), &[0, 0, 0])),
    }
}

/// Index permutation of a dihedral op on an NHWC buffer.
fn remap(x: &Tensor, (b, h, w, c): (usize, usize, usize, usize), op: AugmentOp) -> Result<Tensor> {
    let k = match op {
        AugmentOp::Rot90(k) => k % 4,
        _ => 0,
    };
    if k % 2 == 1 && h != w {
        return Err(Error::Param("odd quarter turns need square frames".into()));
    }
    let mut out = vec![0.0; x.len()];
    let src = x.data();
    for n in 0..b {
        for i in 0..h {
            for j in 0..w {
                let (y, xx) = match op {
                    AugmentOp::Hflip => (i, w - 1 - j),
                    AugmentOp::Vflip => (h - 1 - i, j),
                    AugmentOp::Rot90(_) => match k {
                        0 => (i, j),
                        1 => (j, w - 1 - i),
                        2 => (h - 1 - i, w - 1 - j),
                        _ => (h - 1 - j, i),
                    },
                    AugmentOp::Scale(_) => unreachable!("scale is not a permutation"),
                };
                let d = ((n * h + i) * w + j) * c;
                let s = ((n * h + y) * w + xx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(&[b, h, w, c], out)
}

/// Applies `op` to a `(b, H, W, C)` batch.
pub fn augment(images: &Tensor, op: AugmentOp) -> Result<(Tensor, AugmentRecord)> {
    let (b, h, w, c) = images.dims4()?;
    let (out, out_hw) = match op {
        AugmentOp::Scale(s) => {
            if !(s > 0.0) {
                return Err(Error::Param(format!("scale factor {s} must be > 0")));
            }
            let oh = ((h as f64 * s).round() as usize).max(1);
            let ow = ((w as f64 * s).round() as usize).max(1);
            (resize_nhwc(images, oh, ow)?, (oh, ow))
        }
        AugmentOp::Rot90(k) if k % 4 == 0 => (images.clone(), (h, w)),
        _ => (remap(images, (b, h, w, c), op)?, (h, w)),
    };
    Ok((
        out,
        AugmentRecord {
            op,
            in_hw: (h, w),
            out_hw,
        },
    ))
}

/// Uniform draw over flips, quarter turns and one upscale whose output side
/// stays divisible by 32.
pub fn random_op<R: Rng + ?Sized>(size: usize, rng: &mut R) -> AugmentOp {
    match rng.random_range(0..6) {
        0 => AugmentOp::Hflip,
        1 => AugmentOp::Vflip,
        2 => AugmentOp::Rot90(1),
        3 => AugmentOp::Rot90(2),
        4 => AugmentOp::Rot90(3),
        _ => AugmentOp::Scale((size + 32) as f64 / size as f64),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn maps() -> Tensor {
        Tensor::from_fn(&[2, 4, 4], |i| (i * 7 % 11) as f64)
    }

    #[test]
    fn flips_restore_exactly() {
        let x = maps();
        let img = x.clone().reshape(&[2, 4, 4, 1]).unwrap();
        for op in [
            AugmentOp::Hflip,
            AugmentOp::Vflip,
            AugmentOp::Rot90(1),
            AugmentOp::Rot90(3),
        ] {
            let (a, rec) = augment(&img, op).unwrap();
            let back = rec.restore(&a.reshape(&[2, 4, 4]).unwrap()).unwrap();
            assert_eq!(back, x, "{op:?}");
        }
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let img = maps().reshape(&[2, 4, 4, 1]).unwrap();
        let mut y = img.clone();
        for _ in 0..4 {
            y = augment(&y, AugmentOp::Rot90(1)).unwrap().0;
        }
        assert_eq!(y, img);
        let once = augment(&img, AugmentOp::Rot90(1)).unwrap().0;
        assert_ne!(once, img);
    }

    #[test]
    fn scale_roundtrip_on_smooth_image() {
        let n = 64;
        let img = Tensor::from_fn(&[1, n, n, 1], |i| {
            let (y, x) = ((i / n) as f64 / n as f64, (i % n) as f64 / n as f64);
            0.5 + 0.4 * (3.0 * x).sin() * (2.0 * y).cos()
        });
        let (a, rec) = augment(&img, AugmentOp::Scale(1.25)).unwrap();
        assert_eq!(rec.out_hw, (80, 80));
        let back = rec.restore(&a.reshape(&[1, 80, 80]).unwrap()).unwrap();
        let err = back
            .data()
            .iter()
            .zip(img.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "{err}");
    }

    #[test]
    fn restore_backward_is_adjoint() {
        let mut r = rng::stream(4, &[]);
        for op in [
            AugmentOp::Hflip,
            AugmentOp::Rot90(1),
            AugmentOp::Rot90(2),
            AugmentOp::Scale(1.5),
        ] {
            let (_, rec) = augment(&Tensor::zeros(&[1, 4, 4, 3]), op).unwrap();
            let a = Tensor::randn(&[1, rec.out_hw.0, rec.out_hw.1], 1.0, &mut r);
            let g = Tensor::randn(&[1, 4, 4], 1.0, &mut r);
            let lhs = rec.restore(&a).unwrap().dot(&g);
            let rhs = a.dot(&rec.restore_backward(&g).unwrap());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{op:?}");
        }
    }
}
