use super::Tensor;
use crate::error::{Error, Result};

/// Running-statistics momentum used when train-mode batches are committed.
pub const BN_MOMENTUM: f64 = 0.1;

/// Normalization mode for [`batchnorm2d`].
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with previously accumulated running statistics.
    Eval { mean: &'a Tensor, var: &'a Tensor },
}

/// Saved intermediates of a batchnorm forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Tensor,
    pub inv_std: Vec<f64>,
    /// Batch mean and biased variance (train mode only).
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub train: bool,
}

/// Per-channel normalization of an NHWC tensor over `(b, h, w)`.
pub fn batchnorm2d(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64, mode: BnMode<'_>) -> Result<(Tensor, BnCache)> {
    if !(eps > 0.0) {
        return Err(Error::Param(format!("batchnorm eps must be > 0, got {eps}")));
    }
    let c = x.last_dim();
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape("batchnorm2d affine", x.dims(), gamma.dims()));
    }
    let n = x.len() / c.max(1);
    let (mean, var, train) = match mode {
        BnMode::Train => {
            if n == 0 {
                return Err(Error::Param("batchnorm over empty batch".into()));
            }
            let mut mean = vec![0.0; c];
            for px in x.data().chunks_exact(c) {
                mean.iter_mut().zip(px).for_each(|(m, v)| *m += v);
            }
            mean.iter_mut().for_each(|m| *m /= n as f64);
            let mut var = vec![0.0; c];
            for px in x.data().chunks_exact(c) {
                for ch in 0..c {
                    let d = px[ch] - mean[ch];
                    var[ch] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= n as f64);
            (mean, var, true)
        }
        BnMode::Eval { mean, var } => {
            if mean.dims() != [c] || var.dims() != [c] {
                return Err(Error::shape("batchnorm2d running stats", x.dims(), mean.dims()));
            }
            (mean.data().to_vec(), var.data().to_vec(), false)
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut xhat = x.clone();
    let mut out = x.clone();
    for (hx, o) in xhat
        .data_mut()
        .chunks_exact_mut(c)
        .zip(out.data_mut().chunks_exact_mut(c))
    {
        for ch in 0..c {
            let h = (hx[ch] - mean[ch]) * inv_std[ch];
            hx[ch] = h;
            o[ch] = gamma.data()[ch] * h + beta.data()[ch];
        }
    }
    let cache = BnCache {
        xhat,
        inv_std,
        batch_mean: if train { mean } else { Vec::new() },
        batch_var: if train { var } else { Vec::new() },
        train,
    };
    Ok((out, cache))
}

/// Gradients `(x, gamma, beta)` of [`batchnorm2d`].
pub fn batchnorm2d_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c = gamma.len();
    let n = (grad_out.len() / c) as f64;
    let mut g_gamma = vec![0.0; c];
    let mut g_beta = vec![0.0; c];
    for (g, h) in grad_out.data().chunks_exact(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            g_beta[ch] += g[ch];
            g_gamma[ch] += g[ch] * h[ch];
        }
    }
    let mut gx = grad_out.clone();
    for (gxp, h) in gx.data_mut().chunks_exact_mut(c).zip(cache.xhat.data().chunks_exact(c)) {
        for ch in 0..c {
            let scale = gamma.data()[ch] * cache.inv_std[ch];
            gxp[ch] = if cache.train {
                scale * (gxp[ch] - g_beta[ch] / n - h[ch] * g_gamma[ch] / n)
            } else {
                scale * gxp[ch]
            };
        }
    }
    (
        gx,
        Tensor::new(&[c], g_gamma).expect("gamma grad"),
        Tensor::new(&[c], g_beta).expect("beta grad"),
    )
}

/// Exponential update of running statistics from a train-mode cache.
/// Variance is stored unbiased.
pub fn update_running_stats(cache: &BnCache, count: usize, mean: &mut Tensor, var: &mut Tensor) {
    if !cache.train {
        return;
    }
    let unbias = if count > 1 {
        count as f64 / (count as f64 - 1.0)
    } else {
        1.0
    };
    for ch in 0..mean.len() {
        let m = &mut mean.data_mut()[ch];
        *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * cache.batch_mean[ch];
        let v = &mut var.data_mut()[ch];
        *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * cache.batch_var[ch] * unbias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[2, 3, 3, 2], 4.2);
        let (y, _) = batchnorm2d(&x, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-5, BnMode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn two_values_unit_spread() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (y, _) = batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-12, BnMode::Train).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gamma_gives_beta() {
        let x = Tensor::new(&[1, 2, 1, 2], vec![1.0, -2.0, 5.0, 0.5]).unwrap();
        let beta = Tensor::new(&[2], vec![0.3, -0.7]).unwrap();
        let (y, _) = batchnorm2d(&x, &Tensor::zeros(&[2]), &beta, 1e-5, BnMode::Train).unwrap();
        assert_eq!(y.data(), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn nonpositive_eps_rejected() {
        let x = Tensor::zeros(&[1, 1, 1, 1]);
        let g = Tensor::zeros(&[1]);
        assert!(matches!(
            batchnorm2d(&x, &g, &g, 0.0, BnMode::Train),
            Err(Error::Param(_))
        ));
    }

    #[test]
    fn eval_uses_running_stats() {
        let x = Tensor::new(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let mean = Tensor::new(&[1], vec![1.0]).unwrap();
        let var = Tensor::new(&[1], vec![4.0]).unwrap();
        let (y, _) = batchnorm2d(
            &x,
            &Tensor::full(&[1], 1.0),
            &Tensor::zeros(&[1]),
            1e-12,
            BnMode::Eval { mean: &mean, var: &var },
        )
        .unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn running_stats_momentum() {
        let x = Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let (_, cache) = batchnorm2d(&x, &Tensor::full(&[1], 1.0), &Tensor::zeros(&[1]), 1e-5, BnMode::Train).unwrap();
        let mut mean = Tensor::zeros(&[1]);
        let mut var = Tensor::full(&[1], 1.0);
        update_running_stats(&cache, 2, &mut mean, &mut var);
        assert!((mean.data()[0] - 0.2).abs() < 1e-12);
        // unbiased batch variance 2
        assert!((var.data()[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }
}
