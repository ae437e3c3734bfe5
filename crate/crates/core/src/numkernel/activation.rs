use std::f64::consts::{FRAC_1_SQRT_2, PI};

use super::Tensor;
use crate::error::{Error, Result};

#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * PI).sqrt();
    cdf + x * pdf
}

/// `x * Phi(x)` with the exact normal CDF.
pub fn gelu(x: &Tensor) -> Tensor {
    x.map(gelu_scalar)
}

pub fn gelu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| g * gelu_grad_scalar(v))
        .collect();
    Tensor::new(x.dims(), data).expect("gelu_backward dims")
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Gradient of ReLU given its input (subgradient 0 at the kink).
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.dims(), data).expect("relu_backward dims")
}

/// Folds the sign pattern of ReLU inputs into a running hash; two inputs with
/// equal signatures sit on the same linear piece.
pub fn sign_signature(x: &Tensor, acc: &mut u64) {
    for &v in x.data() {
        let bit = (v > 0.0) as u64;
        *acc = (*acc ^ bit).wrapping_mul(0x100_0000_01b3);
    }
}

fn channel_layout(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.dims() {
        [c, h, w] => Ok((1, c, h * w)),
        [b, c, h, w] => Ok((b, c, h * w)),
        _ => Err(Error::shape(
            "softmax_channel expects (c,h,w) or (b,c,h,w)",
            x.dims(),
            &[],
        )),
    }
}

/// Softmax over the channel axis of a `(c,h,w)` or `(b,c,h,w)` tensor.
pub fn softmax_channel(x: &Tensor) -> Result<Tensor> {
    let (b, c, hw) = channel_layout(x)?;
    let mut out = x.clone();
    let d = out.data_mut();
    for n in 0..b {
        let base = n * c * hw;
        for p in 0..hw {
            let mut m = f64::NEG_INFINITY;
            for ch in 0..c {
                m = m.max(d[base + ch * hw + p]);
            }
            let mut z = 0.0;
            for ch in 0..c {
                let e = (d[base + ch * hw + p] - m).exp();
                d[base + ch * hw + p] = e;
                z += e;
            }
            for ch in 0..c {
                d[base + ch * hw + p] /= z;
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_channel`] given its output `p`.
pub fn softmax_channel_backward(p: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    let (b, c, hw) = channel_layout(p)?;
    let mut gx = Tensor::zeros(p.dims());
    let (pd, gd) = (p.data(), grad_out.data());
    let out = gx.data_mut();
    for n in 0..b {
        let base = n * c * hw;
        for px in 0..hw {
            let s: f64 = (0..c).map(|ch| pd[base + ch * hw + px] * gd[base + ch * hw + px]).sum();
            for ch in 0..c {
                let i = base + ch * hw + px;
                out[i] = pd[i] * (gd[i] - s);
            }
        }
    }
    Ok(gx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu_scalar(1.0) - 0.8413447).abs() < 1e-7);
    }

    #[test]
    fn softmax_two_zero() {
        let x = Tensor::new(&[2, 1, 1], vec![2.0, 0.0]).unwrap();
        let p = softmax_channel(&x).unwrap();
        assert!((p.data()[0] - 0.880797).abs() < 1e-6);
        assert!((p.data()[1] - 0.119203).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_rank_two() {
        assert!(softmax_channel(&Tensor::zeros(&[2, 2])).is_err());
    }
}
