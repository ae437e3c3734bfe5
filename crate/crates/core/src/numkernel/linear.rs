use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

/// Gradients of [`affine`] with respect to its three operands.
#[derive(Debug, Clone)]
pub struct AffineGrads {
    pub x: Tensor,
    pub w: Tensor,
    pub b: Tensor,
}

fn check_affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    let (d_in, d_out) = match w.dims() {
        [i, o] => (*i, *o),
        _ => return Err(Error::shape("affine weight", x.dims(), w.dims())),
    };
    if x.rank() == 0 || x.last_dim() != d_in {
        return Err(Error::shape("affine", x.dims(), w.dims()));
    }
    if b.dims() != [d_out] {
        return Err(Error::shape("affine bias", w.dims(), b.dims()));
    }
    Ok((x.len() / d_in, d_in, d_out))
}

/// `out[..., j] = sum_i x[..., i] * w[i, j] + b[j]`.
pub fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (rows, d_in, d_out) = check_affine(x, w, b)?;
    let mut out = Vec::with_capacity(rows * d_out);
    for _ in 0..rows {
        out.extend_from_slice(b.data());
    }
    gemm(
        Mat::new(x.data(), rows, d_in),
        Mat::new(w.data(), d_in, d_out),
        1.0,
        &mut out,
    );
    let mut dims = x.dims().to_vec();
    *dims.last_mut().unwrap() = d_out;
    Tensor::new(&dims, out)
}

pub fn affine_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> Result<AffineGrads> {
    let d_in = x.last_dim();
    let d_out = w.last_dim();
    let rows = x.len() / d_in.max(1);
    if grad_out.len() != rows * d_out {
        return Err(Error::shape("affine_backward", x.dims(), grad_out.dims()));
    }
    let g = Mat::new(grad_out.data(), rows, d_out);
    let mut gx = vec![0.0; rows * d_in];
    gemm(g, Mat::new(w.data(), d_in, d_out).t(), 0.0, &mut gx);
    let mut gw = vec![0.0; d_in * d_out];
    gemm(Mat::new(x.data(), rows, d_in).t(), g, 0.0, &mut gw);
    let mut gb = vec![0.0; d_out];
    for row in grad_out.data().chunks_exact(d_out) {
        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
    }
    Ok(AffineGrads {
        x: Tensor::new(x.dims(), gx)?,
        w: Tensor::new(w.dims(), gw)?,
        b: Tensor::new(&[d_out], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(dims: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(dims, v.to_vec()).unwrap()
    }

    #[test]
    fn identity_weights() {
        let out = affine(&t(&[2], &[1., 2.]), &t(&[2, 2], &[1., 0., 0., 1.]), &t(&[2], &[0., 0.])).unwrap();
        assert_eq!(out.data(), &[1., 2.]);
    }

    #[test]
    fn zero_weights_give_bias() {
        let out = affine(&t(&[2], &[1., 2.]), &Tensor::zeros(&[2, 2]), &t(&[2], &[3., 4.])).unwrap();
        assert_eq!(out.data(), &[3., 4.]);
    }

    #[test]
    fn hand_multiply() {
        let out = affine(&t(&[2], &[1., 2.]), &t(&[2, 2], &[1., 2., 3., 4.]), &t(&[2], &[1., 1.])).unwrap();
        assert_eq!(out.data(), &[8., 11.]);
    }

    #[test]
    fn mismatch_names_both_operands() {
        let err = affine(&t(&[3], &[1., 2., 3.]), &Tensor::zeros(&[2, 2]), &Tensor::zeros(&[2])).unwrap_err();
        match err {
            Error::Shape { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn keeps_leading_dims() {
        let x = Tensor::full(&[2, 3, 3, 4], 1.0);
        let out = affine(&x, &Tensor::full(&[4, 5], 0.5), &Tensor::zeros(&[5])).unwrap();
        assert_eq!(out.dims(), &[2, 3, 3, 5]);
        assert!(out.data().iter().all(|&v| v == 2.0));
    }
}
