use super::Tensor;
use crate::error::{Error, Result};

/// Concatenates two NHWC tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, h, w, ca) = a.dims4()?;
    let (n2, h2, w2, cb) = b.dims4()?;
    if (n, h, w) != (n2, h2, w2) {
        return Err(Error::shape("concat_channels", a.dims(), b.dims()));
    }
    let mut out = Vec::with_capacity(a.len() + b.len());
    for (pa, pb) in a.data().chunks_exact(ca).zip(b.data().chunks_exact(cb)) {
        out.extend_from_slice(pa);
        out.extend_from_slice(pb);
    }
    Tensor::new(&[n, h, w, ca + cb], out)
}

/// Inverse of [`concat_channels`]: the first `ca` channels and the rest.
pub fn split_channels(x: &Tensor, ca: usize) -> Result<(Tensor, Tensor)> {
    let (n, h, w, c) = x.dims4()?;
    if ca > c {
        return Err(Error::shape("split_channels", x.dims(), &[ca]));
    }
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * h * w * ca);
    let mut b = Vec::with_capacity(n * h * w * cb);
    for px in x.data().chunks_exact(c) {
        a.extend_from_slice(&px[..ca]);
        b.extend_from_slice(&px[ca..]);
    }
    Ok((Tensor::new(&[n, h, w, ca], a)?, Tensor::new(&[n, h, w, cb], b)?))
}

/// `(b,h,w,c)` to `(b,c,h,w)`.
pub fn nhwc_to_nchw(x: &Tensor) -> Result<Tensor> {
    let (n, h, w, c) = x.dims4()?;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for p in 0..h * w {
            for ch in 0..c {
                out[(b * c + ch) * h * w + p] = src[(b * h * w + p) * c + ch];
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

/// `(b,c,h,w)` to `(b,h,w,c)`.
pub fn nchw_to_nhwc(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let src = x.data();
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..h * w {
                out[(b * h * w + p) * c + ch] = src[(b * c + ch) * h * w + p];
            }
        }
    }
    Tensor::new(&[n, h, w, c], out)
}
