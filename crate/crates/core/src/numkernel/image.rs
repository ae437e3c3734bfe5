//! Spatial resampling and smoothing kernels.

use super::Tensor;
use crate::error::{Error, Result};

/// One output sample of a 1-D linear interpolation: two taps and the weight of
/// the second.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    w1: f64,
}

/// Corner-anchored taps: output `j` samples source position
/// `j * (n_in - 1) / (n_out - 1)`.
fn taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    taps_at(n_in, n_out, |j| {
        if n_out > 1 {
            j as f64 * (n_in - 1) as f64 / (n_out - 1) as f64
        } else {
            0.0
        }
    })
}

/// Pixel-centre taps: output `j` samples `(j + 0.5) * n_in / n_out - 0.5`,
/// clamped to the source extent.
fn centered_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    taps_at(n_in, n_out, |j| {
        ((j as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64)
    })
}

fn taps_at(n_in: usize, n_out: usize, pos_of: impl Fn(usize) -> f64) -> Vec<Tap> {
    (0..n_out)
        .map(|j| {
            let pos = pos_of(j);
            let i0 = (pos.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                w1: pos - i0 as f64,
            }
        })
        .collect()
}

/// Shape of a resizable tensor as `(outer, h, w, inner)` with row-major
/// layout `[outer][h][w][inner]`.
fn resize_layout(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [h, w] => Ok((1, h, w, 1)),
        [c, h, w] => Ok((c, h, w, 1)),
        _ => Err(Error::shape("bilinear_resize expects (h,w) or (c,h,w)", dims, &[])),
    }
}

fn resize_generic(data: &[f64], layout: (usize, usize, usize, usize), out_h: usize, out_w: usize) -> Vec<f64> {
    resize_with(data, layout, &taps(layout.1, out_h), &taps(layout.2, out_w))
}

fn resize_with(data: &[f64], (outer, h, w, inner): (usize, usize, usize, usize), ty: &[Tap], tx: &[Tap]) -> Vec<f64> {
    let (out_h, out_w) = (ty.len(), tx.len());
    let mut out = vec![0.0; outer * out_h * out_w * inner];
    for o in 0..outer {
        let src = &data[o * h * w * inner..(o + 1) * h * w * inner];
        let dst = &mut out[o * out_h * out_w * inner..(o + 1) * out_h * out_w * inner];
        for (y, t_y) in ty.iter().enumerate() {
            for (x, t_x) in tx.iter().enumerate() {
                let d = (y * out_w + x) * inner;
                let a = (t_y.i0 * w + t_x.i0) * inner;
                let b = (t_y.i0 * w + t_x.i1) * inner;
                let c = (t_y.i1 * w + t_x.i0) * inner;
                let e = (t_y.i1 * w + t_x.i1) * inner;
                let (wy, wx) = (t_y.w1, t_x.w1);
                for k in 0..inner {
                    let top = src[a + k] * (1.0 - wx) + src[b + k] * wx;
                    let bot = src[c + k] * (1.0 - wx) + src[e + k] * wx;
                    dst[d + k] = top * (1.0 - wy) + bot * wy;
                }
            }
        }
    }
    out
}

fn resize_generic_backward(
    grad: &[f64],
    (outer, h, w, inner): (usize, usize, usize, usize),
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let ty = taps(h, out_h);
    let tx = taps(w, out_w);
    let mut gx = vec![0.0; outer * h * w * inner];
    for o in 0..outer {
        let g = &grad[o * out_h * out_w * inner..(o + 1) * out_h * out_w * inner];
        let dst = &mut gx[o * h * w * inner..(o + 1) * h * w * inner];
        for (y, t_y) in ty.iter().enumerate() {
            for (x, t_x) in tx.iter().enumerate() {
                let s = (y * out_w + x) * inner;
                let (wy, wx) = (t_y.w1, t_x.w1);
                let corners = [
                    ((t_y.i0 * w + t_x.i0) * inner, (1.0 - wy) * (1.0 - wx)),
                    ((t_y.i0 * w + t_x.i1) * inner, (1.0 - wy) * wx),
                    ((t_y.i1 * w + t_x.i0) * inner, wy * (1.0 - wx)),
                    ((t_y.i1 * w + t_x.i1) * inner, wy * wx),
                ];
                for (base, wt) in corners {
                    for k in 0..inner {
                        dst[base + k] += wt * g[s + k];
                    }
                }
            }
        }
    }
    gx
}

fn check_target(out_h: usize, out_w: usize, dims: &[usize]) -> Result<()> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param(format!("resize target {out_h}x{out_w} must be >= 1")));
    }
    if dims.contains(&0) {
        return Err(Error::shape("resize of empty tensor", dims, &[out_h, out_w]));
    }
    Ok(())
}

/// Bilinear resize of an `(h,w)` or `(c,h,w)` map, corner-anchored.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let layout = resize_layout(x.dims())?;
    check_target(out_h, out_w, x.dims())?;
    let mut dims = x.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = out_h;
    dims[r - 1] = out_w;
    if x.dims()[r - 2..] == [out_h, out_w] {
        return Ok(x.clone());
    }
    Tensor::new(&dims, resize_generic(x.data(), layout, out_h, out_w))
}

/// Bilinear resize of an `(h,w)` or `(c,h,w)` map treating samples as
/// pixel centres, so a stride-`s` grid lands on the centres of its cells.
pub fn bilinear_resize_centered(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let layout = resize_layout(x.dims())?;
    check_target(out_h, out_w, x.dims())?;
    let mut dims = x.dims().to_vec();
    let r = dims.len();
    dims[r - 2] = out_h;
    dims[r - 1] = out_w;
    let ty = centered_taps(layout.1, out_h);
    let tx = centered_taps(layout.2, out_w);
    Tensor::new(&dims, resize_with(x.data(), layout, &ty, &tx))
}

/// Adjoint of [`bilinear_resize`].
pub fn bilinear_resize_backward(in_dims: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let layout = resize_layout(in_dims)?;
    let r = grad_out.rank();
    let (out_h, out_w) = (grad_out.dims()[r - 2], grad_out.dims()[r - 1]);
    Tensor::new(in_dims, resize_generic_backward(grad_out.data(), layout, out_h, out_w))
}

fn nhwc_layout(dims: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *dims {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape("resize_nhwc expects (b,h,w,c)", dims, &[])),
    }
}

/// Corner-anchored bilinear resize of the spatial axes of an NHWC tensor.
pub fn resize_nhwc(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let layout = nhwc_layout(x.dims())?;
    check_target(out_h, out_w, x.dims())?;
    let (b, h, w, c) = layout;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    Tensor::new(&[b, out_h, out_w, c], resize_generic(x.data(), layout, out_h, out_w))
}

pub fn resize_nhwc_backward(in_dims: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let layout = nhwc_layout(in_dims)?;
    let (_, out_h, out_w, _) = grad_out.dims4()?;
    Tensor::new(in_dims, resize_generic_backward(grad_out.data(), layout, out_h, out_w))
}

/// Normalized 1-D Gaussian taps over `[-r, r]`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("gaussian sigma must be > 0, got {sigma}")));
    }
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= z);
    Ok(k)
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

/// Separable Gaussian smoothing of an `(h,w)` map with reflect padding.
pub fn gaussian_blur(x: &Tensor, sigma: f64) -> Result<Tensor> {
    let k = gaussian_kernel(sigma)?;
    let (h, w) = match *x.dims() {
        [h, w] => (h, w),
        _ => return Err(Error::shape("gaussian_blur expects (h,w)", x.dims(), &[])),
    };
    let r = (k.len() / 2) as i64;
    let src = x.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sx = reflect(xx as i64 + t as i64 - r, w);
                acc += kv * src[y * w + sx];
            }
            tmp[y * w + xx] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let sy = reflect(y as i64 + t as i64 - r, h);
                acc += kv * tmp[sy * w + xx];
            }
            out[y * w + xx] = acc;
        }
    }
    Tensor::new(&[h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_resize_hits_cell_centres() {
        let x = Tensor::new(&[1, 2], vec![0.0, 4.0]).unwrap();
        let y = bilinear_resize_centered(&x, 1, 8).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.5, 1.5, 2.5, 3.5, 4.0, 4.0]);
        let c = Tensor::full(&[2, 3, 3], 1.5);
        assert!(bilinear_resize_centered(&c, 7, 5)
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.5));
        assert_eq!(bilinear_resize_centered(&x, 1, 2).unwrap(), x);
    }

    #[test]
    fn constant_map_resizes_to_constant() {
        let x = Tensor::full(&[3, 5], 5.0);
        let y = bilinear_resize(&x, 11, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn two_by_two_to_four_by_four() {
        let x = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = bilinear_resize(&x, 4, 4).unwrap();
        let want = [1.0, 4.0 / 3.0, 5.0 / 3.0, 2.0];
        for (a, b) in y.data()[..4].iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert_eq!(y.at(&[3, 3]), 4.0);
    }

    #[test]
    fn identity_size_is_noop() {
        let x = Tensor::new(&[2, 2, 3], (0..12).map(f64::from).collect()).unwrap();
        assert_eq!(bilinear_resize(&x, 2, 3).unwrap(), x);
    }

    #[test]
    fn kernel_sums_to_one() {
        for s in [0.3, 1.0, 2.0, 5.5] {
            let k = gaussian_kernel(s).unwrap();
            assert_eq!(k.len(), 2 * (3.0 * s).ceil() as usize + 1);
            assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn impulse_gives_outer_product() {
        let mut x = Tensor::zeros(&[21, 21]);
        x.set(&[10, 10], 1.0);
        let y = gaussian_blur(&x, 2.0).unwrap();
        let z: f64 = (-6..=6).map(|i: i32| (-(i * i) as f64 / 8.0).exp()).sum();
        for (dy, dx) in [(0i32, 0i32), (1, 0), (2, 3), (6, 6), (-4, 1)] {
            let want = (-(dy * dy) as f64 / 8.0).exp() / z * (-(dx * dx) as f64 / 8.0).exp() / z;
            let got = y.at(&[(10 + dy) as usize, (10 + dx) as usize]);
            assert!((got - want).abs() < 1e-12);
        }
        assert!((y.sum() - 1.0).abs() < 1e-6);
        assert_eq!(y.at(&[10, 3]), 0.0);
    }

    #[test]
    fn blur_preserves_constant_and_rejects_bad_sigma() {
        let x = Tensor::full(&[7, 4], 0.25);
        let y = gaussian_blur(&x, 2.0).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(gaussian_blur(&x, 0.0), Err(Error::Param(_))));
        assert!(matches!(gaussian_blur(&x, -1.0), Err(Error::Param(_))));
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (-4..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
    }
}
