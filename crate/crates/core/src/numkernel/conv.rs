//! NHWC cross-correlation and its adjoint (transposed convolution).
//!
//! Kernels are stored as `(kh, kw, c_in, c_out)`. Both directions go through
//! an explicit im2col buffer and one GEMM.

use super::gemm::{gemm, Mat};
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    in_h: usize,
    in_w: usize,
    c_in: usize,
    kh: usize,
    kw: usize,
    c_out: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c_in
    }

    fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn kernel_dims(k: &Tensor) -> Result<(usize, usize, usize, usize)> {
    k.dims4()
        .map_err(|_| Error::shape("conv kernel", k.dims(), &[0, 0, 0, 0]))
}

fn conv_geometry(x_dims: &[usize], k: &Tensor, stride: usize, pad: usize) -> Result<Geometry> {
    let (batch, in_h, in_w, c_in) = match *x_dims {
        [a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape("conv2d input", x_dims, k.dims())),
    };
    let (kh, kw, kc, c_out) = kernel_dims(k)?;
    if kc != c_in {
        return Err(Error::shape("conv2d channels", x_dims, k.dims()));
    }
    if stride == 0 {
        return Err(Error::Param("conv stride must be >= 1".into()));
    }
    if kh > in_h + 2 * pad || kw > in_w + 2 * pad || kh == 0 || kw == 0 {
        return Err(Error::shape("conv2d kernel exceeds padded input", x_dims, k.dims()));
    }
    Ok(Geometry {
        batch,
        in_h,
        in_w,
        c_in,
        kh,
        kw,
        c_out,
        stride,
        pad,
        out_h: (in_h + 2 * pad - kh) / stride + 1,
        out_w: (in_w + 2 * pad - kw) / stride + 1,
    })
}

fn im2col(x: &[f64], g: &Geometry) -> Vec<f64> {
    let patch = g.patch();
    let mut cols = vec![0.0; g.rows() * patch];
    let row_span = g.kw * g.c_in;
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (n * g.out_h + oy) * g.out_w + ox;
                let dst = &mut cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let ix0 = (ox * g.stride) as isize - g.pad as isize;
                    let line = &mut dst[ky * row_span..(ky + 1) * row_span];
                    let src_row = (n * g.in_h + iy as usize) * g.in_w;
                    if ix0 >= 0 && ix0 as usize + g.kw <= g.in_w {
                        let s = (src_row + ix0 as usize) * g.c_in;
                        line.copy_from_slice(&x[s..s + row_span]);
                    } else {
                        for kx in 0..g.kw {
                            let ix = ix0 + kx as isize;
                            if ix < 0 || ix >= g.in_w as isize {
                                continue;
                            }
                            let s = (src_row + ix as usize) * g.c_in;
                            line[kx * g.c_in..(kx + 1) * g.c_in].copy_from_slice(&x[s..s + g.c_in]);
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &Geometry) -> Vec<f64> {
    let patch = g.patch();
    let mut x = vec![0.0; g.batch * g.in_h * g.in_w * g.c_in];
    for n in 0..g.batch {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let r = (n * g.out_h + oy) * g.out_w + ox;
                let src = &cols[r * patch..(r + 1) * patch];
                for ky in 0..g.kh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for kx in 0..g.kw {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let d = ((n * g.in_h + iy as usize) * g.in_w + ix as usize) * g.c_in;
                        let s = (ky * g.kw + kx) * g.c_in;
                        x[d..d + g.c_in]
                            .iter_mut()
                            .zip(&src[s..s + g.c_in])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
        }
    }
    x
}

/// Strided, zero-padded cross-correlation (no kernel flip).
pub fn conv2d(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = conv_geometry(x.dims(), k, stride, pad)?;
    let mut out = vec![0.0; g.rows() * g.c_out];
    let kmat = Mat::new(k.data(), g.patch(), g.c_out);
    if g.is_pointwise() {
        gemm(Mat::new(x.data(), g.rows(), g.patch()), kmat, 0.0, &mut out);
    } else {
        let cols = im2col(x.data(), &g);
        gemm(Mat::new(&cols, g.rows(), g.patch()), kmat, 0.0, &mut out);
    }
    Tensor::new(&[g.batch, g.out_h, g.out_w, g.c_out], out)
}

/// Input and kernel gradients of [`conv2d`].
pub fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let g = conv_geometry(x.dims(), k, stride, pad)?;
    if grad_out.dims() != [g.batch, g.out_h, g.out_w, g.c_out] {
        return Err(Error::shape("conv2d_backward", x.dims(), grad_out.dims()));
    }
    let gmat = Mat::new(grad_out.data(), g.rows(), g.c_out);
    let mut gk = vec![0.0; g.patch() * g.c_out];
    let mut gcols = vec![0.0; g.rows() * g.patch()];
    gemm(gmat, Mat::new(k.data(), g.patch(), g.c_out).t(), 0.0, &mut gcols);
    let gx = if g.is_pointwise() {
        gemm(Mat::new(x.data(), g.rows(), g.patch()).t(), gmat, 0.0, &mut gk);
        gcols
    } else {
        let cols = im2col(x.data(), &g);
        gemm(Mat::new(&cols, g.rows(), g.patch()).t(), gmat, 0.0, &mut gk);
        col2im(&gcols, &g)
    };
    Ok((Tensor::new(x.dims(), gx)?, Tensor::new(k.dims(), gk)?))
}

fn transpose_geometry(x: &Tensor, k: &Tensor, stride: usize) -> Result<Geometry> {
    let (batch, h, w, c) = x
        .dims4()
        .map_err(|_| Error::shape("conv_transpose2d input", x.dims(), k.dims()))?;
    let (kh, kw, c_in, c_out) = kernel_dims(k)?;
    if c != c_out {
        return Err(Error::shape("conv_transpose2d channels", x.dims(), k.dims()));
    }
    if stride == 0 {
        return Err(Error::Param("conv_transpose2d stride must be >= 1".into()));
    }
    if h == 0 || w == 0 || kh == 0 || kw == 0 {
        return Err(Error::shape("conv_transpose2d extents", x.dims(), k.dims()));
    }
    let in_h = (h - 1) * stride + kh;
    let in_w = (w - 1) * stride + kw;
    conv_geometry(&[batch, in_h, in_w, c_in], k, stride, 0)
}

/// Adjoint of [`conv2d`] with zero padding: maps `c_out` channels back to
/// `c_in`, output extent `(h - 1) * stride + kh`.
pub fn conv_transpose2d(x: &Tensor, k: &Tensor, stride: usize) -> Result<Tensor> {
    let g = transpose_geometry(x, k, stride)?;
    let mut cols = vec![0.0; g.rows() * g.patch()];
    gemm(
        Mat::new(x.data(), g.rows(), g.c_out),
        Mat::new(k.data(), g.patch(), g.c_out).t(),
        0.0,
        &mut cols,
    );
    Tensor::new(&[g.batch, g.in_h, g.in_w, g.c_in], col2im(&cols, &g))
}

/// Input and kernel gradients of [`conv_transpose2d`].
pub fn conv_transpose2d_backward(x: &Tensor, k: &Tensor, stride: usize, grad_out: &Tensor) -> Result<(Tensor, Tensor)> {
    let g = transpose_geometry(x, k, stride)?;
    if grad_out.dims() != [g.batch, g.in_h, g.in_w, g.c_in] {
        return Err(Error::shape("conv_transpose2d_backward", x.dims(), grad_out.dims()));
    }
    let gcols = im2col(grad_out.data(), &g);
    let gc = Mat::new(&gcols, g.rows(), g.patch());
    let mut gx = vec![0.0; g.rows() * g.c_out];
    gemm(gc, Mat::new(k.data(), g.patch(), g.c_out), 0.0, &mut gx);
    let mut gk = vec![0.0; g.patch() * g.c_out];
    gemm(gc.t(), Mat::new(x.data(), g.rows(), g.c_out), 0.0, &mut gk);
    Ok((Tensor::new(x.dims(), gx)?, Tensor::new(k.dims(), gk)?))
}

/// Adds a per-channel bias to the last axis.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if bias.dims() != [c] {
        return Err(Error::shape("add_channel_bias", x.dims(), bias.dims()));
    }
    let mut out = x.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        px.iter_mut().zip(bias.data()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}

/// Bias gradient: sum of the upstream gradient over every axis but the last.
pub fn channel_sum(grad: &Tensor) -> Tensor {
    let c = grad.last_dim();
    let mut g = vec![0.0; c];
    for px in grad.data().chunks_exact(c) {
        g.iter_mut().zip(px).for_each(|(a, b)| *a += b);
    }
    Tensor::new(&[c], g).expect("channel_sum dims")
}
