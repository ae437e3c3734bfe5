use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nexvitad::cli::RunConfig;
use nexvitad::datagen::synth_class_with;
use nexvitad::decoder::{make_pseudo_labels, Mode};
use nexvitad::fusion::{adapter_backward, adapter_forward_cached, AdapterParams, FusedPyramid};
use nexvitad::inference::{
    build_bank, min_distance_grid, score_batch, sinkhorn_kmeans_from, sinkhorn_plan, sq_dist_matrix, KMeansOptions,
    MemoryBank,
};
use nexvitad::metrics::{auc, average_precision, pro_mean_iou, ThresholdMode, SWEEP_STEPS};
use nexvitad::model::Model;
use nexvitad::numkernel::{
    affine, affine_backward, batchnorm2d, batchnorm2d_backward, bilinear_resize, bilinear_resize_backward, conv2d,
    conv2d_backward, conv_transpose2d, conv_transpose2d_backward, gelu, gelu_backward, relative_error, relu,
    relu_backward, resize_nhwc, resize_nhwc_backward, softmax_channel, softmax_channel_backward, BnMode, Parameterized,
    Tensor,
};
use nexvitad::trainer::tiny_model_config;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Worst relative error between `analytic` and central differences of `f`
/// over every entry of every input.
fn fd_error(f: &dyn Fn(&[Tensor]) -> f64, inputs: &[Tensor], analytic: &[Tensor]) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, g) in analytic.iter().enumerate() {
        assert_eq!(g.dims(), inputs[i].dims());
        for j in 0..inputs[i].len() {
            let mut probe = inputs.to_vec();
            probe[i].data_mut()[j] += H;
            let up = f(&probe);
            probe[i].data_mut()[j] -= 2.0 * H;
            let down = f(&probe);
            let numeric = (up - down) / (2.0 * H);
            worst = worst.max(relative_error(g.data()[j], numeric, FLOOR));
        }
    }
    worst
}

fn cases(n: u32) -> ProptestConfig {
    ProptestConfig {
        cases: n,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(cases(100))]

    #[test]
    fn gelu_gradient(seed: u64, n in 1usize..24) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[n], 2.0, &mut r);
        let w = Tensor::randn(&[n], 1.0, &mut r);
        let f = |t: &[Tensor]| gelu(&t[0]).dot(&w);
        prop_assert!(fd_error(&f, std::slice::from_ref(&x), &[gelu_backward(&x, &w)]) < TOL);
    }

    #[test]
    fn relu_gradient_away_from_kink(seed: u64, n in 1usize..24) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[n], 1.0, &mut r).map(|v| v + 1e-3 * v.signum());
        let w = Tensor::randn(&[n], 1.0, &mut r);
        let f = |t: &[Tensor]| relu(&t[0]).dot(&w);
        prop_assert!(fd_error(&f, std::slice::from_ref(&x), &[relu_backward(&x, &w)]) < TOL);
    }

    #[test]
    fn softmax_gradient_and_simplex(seed: u64, b in 1usize..3, c in 2usize..5, hw in 1usize..4) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[b, c, hw, hw], 2.0, &mut r);
        let w = Tensor::randn(x.dims(), 1.0, &mut r);
        let p = softmax_channel(&x).unwrap();
        for n in 0..b {
            for px in 0..hw * hw {
                let s: f64 = (0..c).map(|ch| p.data()[(n * c + ch) * hw * hw + px]).sum();
                prop_assert!((s - 1.0).abs() < 1e-6);
            }
        }
        prop_assert!(p.data().iter().all(|&v| v > 0.0 && v < 1.0));
        let g = softmax_channel_backward(&p, &w).unwrap();
        let f = |t: &[Tensor]| softmax_channel(&t[0]).unwrap().dot(&w);
        prop_assert!(fd_error(&f, &[x], &[g]) < TOL);
    }

    #[test]
    fn affine_gradient(seed: u64, rows in 1usize..5, d_in in 1usize..5, d_out in 1usize..5) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[rows, d_in], 1.0, &mut r);
        let w = Tensor::randn(&[d_in, d_out], 1.0, &mut r);
        let b = Tensor::randn(&[d_out], 1.0, &mut r);
        let go = Tensor::randn(&[rows, d_out], 1.0, &mut r);
        let g = affine_backward(&x, &w, &go).unwrap();
        let f = |t: &[Tensor]| affine(&t[0], &t[1], &t[2]).unwrap().dot(&go);
        prop_assert!(fd_error(&f, &[x, w, b], &[g.x, g.w, g.b]) < TOL);
    }

    #[test]
    fn conv2d_gradient(
        seed: u64,
        hw in 3usize..6,
        ci in 1usize..3,
        co in 1usize..3,
        kk in 1usize..4,
        stride in 1usize..3,
        pad in 0usize..2,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[2, hw, hw, ci], 1.0, &mut r);
        let k = Tensor::randn(&[kk, kk, ci, co], 1.0, &mut r);
        let out = conv2d(&x, &k, stride, pad).unwrap();
        let go = Tensor::randn(out.dims(), 1.0, &mut r);
        let (gx, gk) = conv2d_backward(&x, &k, stride, pad, &go).unwrap();
        let f = |t: &[Tensor]| conv2d(&t[0], &t[1], stride, pad).unwrap().dot(&go);
        prop_assert!(fd_error(&f, &[x, k], &[gx, gk]) < TOL);
    }

    #[test]
    fn conv_transpose2d_gradient(
        seed: u64,
        hw in 1usize..4,
        ci in 1usize..3,
        co in 1usize..3,
        kk in 1usize..4,
        stride in 1usize..3,
    ) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[1, hw, hw, co], 1.0, &mut r);
        let k = Tensor::randn(&[kk, kk, ci, co], 1.0, &mut r);
        let out = conv_transpose2d(&x, &k, stride).unwrap();
        let go = Tensor::randn(out.dims(), 1.0, &mut r);
        let (gx, gk) = conv_transpose2d_backward(&x, &k, stride, &go).unwrap();
        let f = |t: &[Tensor]| conv_transpose2d(&t[0], &t[1], stride).unwrap().dot(&go);
        prop_assert!(fd_error(&f, &[x, k], &[gx, gk]) < TOL);
    }

    #[test]
    fn conv_transpose_is_adjoint(seed: u64, hw in 3usize..7, ci in 1usize..4, co in 1usize..4, kk in 1usize..4, stride in 1usize..3) {
        let mut r = rng(seed);
        let k = Tensor::randn(&[kk, kk, ci, co], 1.0, &mut r);
        let x = Tensor::randn(&[2, hw, hw, ci], 1.0, &mut r);
        let y = conv2d(&x, &k, stride, 0).unwrap();
        let v = Tensor::randn(y.dims(), 1.0, &mut r);
        let back = conv_transpose2d(&v, &k, stride).unwrap();
        let (bh, bw) = (back.dims()[1], back.dims()[2]);
        let mut lhs = 0.0;
        for n in 0..2 {
            for i in 0..bh {
                for j in 0..bw {
                    for c in 0..ci {
                        lhs += x.at(&[n, i, j, c]) * back.at(&[n, i, j, c]);
                    }
                }
            }
        }
        let rhs = y.dot(&v);
        prop_assert!((lhs - rhs).abs() <= 1e-6 * rhs.abs().max(1.0));
    }

    #[test]
    fn batchnorm_train_gradient(seed: u64, b in 1usize..3, hw in 1usize..4, c in 1usize..4) {
        prop_assume!(b * hw * hw >= 4);
        let mut r = rng(seed);
        let x = Tensor::randn(&[b, hw, hw, c], 1.5, &mut r);
        let gamma = Tensor::randn(&[c], 1.0, &mut r);
        let beta = Tensor::randn(&[c], 1.0, &mut r);
        let go = Tensor::randn(x.dims(), 1.0, &mut r);
        let (_, cache) = batchnorm2d(&x, &gamma, &beta, 1e-5, BnMode::Train).unwrap();
        let (gx, gg, gb) = batchnorm2d_backward(&cache, &gamma, &go);
        let f = |t: &[Tensor]| batchnorm2d(&t[0], &t[1], &t[2], 1e-5, BnMode::Train).unwrap().0.dot(&go);
        prop_assert!(fd_error(&f, &[x, gamma, beta], &[gx, gg, gb]) < TOL);
    }

    #[test]
    fn resize_gradients(seed: u64, c in 1usize..3, h in 1usize..6, w in 1usize..6, oh in 1usize..9, ow in 1usize..9) {
        let mut r = rng(seed);
        let x = Tensor::randn(&[c, h, w], 1.0, &mut r);
        let go = Tensor::randn(&[c, oh, ow], 1.0, &mut r);
        let g = bilinear_resize_backward(x.dims(), &go).unwrap();
        let f = |t: &[Tensor]| bilinear_resize(&t[0], oh, ow).unwrap().dot(&go);
        prop_assert!(fd_error(&f, &[x], &[g]) < TOL);

        let x4 = Tensor::randn(&[1, h, w, c], 1.0, &mut r);
        let go4 = Tensor::randn(&[1, oh, ow, c], 1.0, &mut r);
        let g4 = resize_nhwc_backward(x4.dims(), &go4).unwrap();
        let f4 = |t: &[Tensor]| resize_nhwc(&t[0], oh, ow).unwrap().dot(&go4);
        prop_assert!(fd_error(&f4, &[x4], &[g4]) < TOL);
    }

    #[test]
    fn adapter_gradient(seed: u64, rows in 1usize..4, quarter in 1usize..3) {
        let d = 4 * quarter;
        let mut r = rng(seed);
        let mut p = AdapterParams::new(d, &mut r).unwrap();
        p.w_down.value = Tensor::randn(&[d, quarter], 0.7, &mut r);
        p.w_up.value = Tensor::randn(&[quarter, d], 0.7, &mut r);
        p.b_down.value = Tensor::randn(&[quarter], 0.5, &mut r);
        let x = Tensor::randn(&[rows, d], 1.0, &mut r);
        let go = Tensor::randn(&[rows, d], 1.0, &mut r);
        let (_, cache) = adapter_forward_cached(&x, &p).unwrap();
        let gx = adapter_backward(&x, &mut p, &cache, &go).unwrap();
        let template = p.clone();
        let f = |t: &[Tensor]| {
            let mut q = template.clone();
            q.w_down.value = t[1].clone();
            q.b_down.value = t[2].clone();
            q.w_up.value = t[3].clone();
            q.b_up.value = t[4].clone();
            adapter_forward_cached(&t[0], &q).unwrap().0.dot(&go)
        };
        let inputs = [
            x,
            p.w_down.value.clone(),
            p.b_down.value.clone(),
            p.w_up.value.clone(),
            p.b_up.value.clone(),
        ];
        let grads = [gx, p.w_down.grad, p.b_down.grad, p.w_up.grad, p.b_up.grad];
        prop_assert!(fd_error(&f, &inputs, &grads) < TOL);
    }

    #[test]
    fn sinkhorn_dual_never_decreases(seed: u64, n in 2usize..60, k in 2usize..12, d in 1usize..5, eps_scale in 0.02f64..1.0) {
        let mut r = rng(seed);
        let z = Tensor::randn(&[n, d], 1.0, &mut r);
        let p = Tensor::randn(&[k, d], 1.5, &mut r);
        let c = sq_dist_matrix(&z, &p).unwrap();
        let eps = eps_scale * c.sum() / c.len() as f64;
        let plan = sinkhorn_plan(&c, eps, 300, 1e-12, None).unwrap();
        for w in plan.dual_trace.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-10 * w[0].abs().max(1.0), "{} -> {}", w[0], w[1]);
        }
        prop_assert!(plan.t.data().iter().all(|&v| v >= 0.0 && v.is_finite()));
    }

    #[test]
    fn kmeans_ignores_row_order(seed: u64, k in 2usize..5, per in 5usize..12) {
        let mut r = rng(seed);
        let mut rows = Vec::new();
        for c in 0..k {
            for _ in 0..per {
                rows.push(vec![6.0 * c as f64 + 0.3 * r.random::<f64>(), 0.3 * r.random::<f64>() - 3.0 * c as f64]);
            }
        }
        let init = Tensor::new(&[k, 2], (0..k).flat_map(|c| [6.0 * c as f64 + 0.5, -3.0 * c as f64 + 0.5]).collect()).unwrap();
        let z = Tensor::new(&[rows.len(), 2], rows.concat()).unwrap();
        let mut order: Vec<usize> = (0..rows.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let zp = Tensor::new(&[rows.len(), 2], order.iter().flat_map(|&i| rows[i].clone()).collect()).unwrap();
        let opts = KMeansOptions::default();
        let a = sinkhorn_kmeans_from(&z, init.clone(), &opts).unwrap();
        let b = sinkhorn_kmeans_from(&zp, init, &opts).unwrap();
        for (x, y) in a.prototypes.data().iter().zip(b.prototypes.data()) {
            prop_assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn scores_ignore_prototype_order(seed: u64, h in 1usize..5, w in 1usize..5, c in 1usize..5, k in 1usize..8) {
        let mut r = rng(seed);
        let f = Tensor::randn(&[h, w, c], 1.0, &mut r);
        let p = Tensor::randn(&[k, c], 1.0, &mut r);
        let mut order: Vec<usize> = (0..k).collect();
        order.reverse();
        order.rotate_left(seed as usize % k);
        let pp = Tensor::new(&[k, c], order.iter().flat_map(|&i| p.data()[i * c..(i + 1) * c].to_vec()).collect()).unwrap();
        prop_assert_eq!(min_distance_grid(&f, &p).unwrap(), min_distance_grid(&f, &pp).unwrap());
    }

    #[test]
    fn pseudo_coverage_shrinks_with_theta(seed: u64, hw in 1usize..8, t1 in 0.5f64..1.0, t2 in 0.5f64..1.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let logits = Tensor::randn(&[2, hw, hw], 2.0, &mut rng(seed));
        let a = make_pseudo_labels(&logits, lo).unwrap();
        let b = make_pseudo_labels(&logits, hi).unwrap();
        for (la, lb) in a.labels.iter().zip(&b.labels) {
            prop_assert!(*lb == nexvitad::decoder::IGNORE || la == lb);
        }
    }
}

fn labels_with_both(r: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    let mut l: Vec<u8> = (0..n).map(|_| r.random_bool(0.4) as u8).collect();
    l[0] = 1;
    l[n - 1] = 0;
    l
}

proptest! {
    #![proptest_config(cases(200))]

    #[test]
    fn auc_survives_monotone_transforms(seed: u64, n in 2usize..200, levels in 2u32..50) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(0..levels) as f64 / levels as f64).collect();
        let labels = labels_with_both(&mut r, n);
        let base = auc(&scores, &labels).unwrap();
        for t in [
            scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect::<Vec<_>>(),
            scores.iter().map(|s| s * s * s + s).collect(),
            scores.iter().map(|s| 1e-3 * s).collect(),
        ] {
            prop_assert!((auc(&t, &labels).unwrap() - base).abs() < 1e-12);
        }
        prop_assert!((0.0..=1.0).contains(&average_precision(&scores, &labels).unwrap()));
    }

    #[test]
    fn negated_scores_complement_auc(seed: u64, n in 2usize..100) {
        let mut r = rng(seed);
        let scores: Vec<f64> = (0..n).map(|_| r.random::<f64>()).collect();
        let labels = labels_with_both(&mut r, n);
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let sum = auc(&scores, &labels).unwrap() + auc(&neg, &labels).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn best_sweep_dominates_fixed(seed: u64, images in 1usize..4, hw in 2usize..8, step in 0usize..SWEEP_STEPS) {
        let mut r = rng(seed);
        let maps: Vec<Tensor> = (0..images).map(|_| Tensor::randn(&[hw, hw], 1.0, &mut r)).collect();
        let masks: Vec<Tensor> = (0..images)
            .map(|_| {
                let mut m = Tensor::from_fn(&[hw, hw], |_| r.random_bool(0.3) as u8 as f64);
                m.data_mut()[0] = 1.0;
                m
            })
            .collect();
        let tau = step as f64 / (SWEEP_STEPS - 1) as f64;
        let best = pro_mean_iou(&maps, &masks, ThresholdMode::BestSweep).unwrap();
        let fixed = pro_mean_iou(&maps, &masks, ThresholdMode::Fixed(tau)).unwrap();
        prop_assert!(best.pro >= fixed.pro);
    }
}

fn permuted_bank(bank: &MemoryBank) -> MemoryBank {
    let mut out = bank.clone();
    for p in &mut out.prototypes {
        let c = p.last_dim();
        let rows: Vec<&[f64]> = p.data().chunks_exact(c).rev().collect();
        *p = Tensor::new(p.dims(), rows.concat()).unwrap();
    }
    out
}

#[test]
fn bank_images_score_below_defective_ones() {
    for seed in 0..3u64 {
        let run = RunConfig::new("unused", seed, 1).unwrap();
        let model = Model::new(&run.model_config()).unwrap();
        let class = *run.split.target_classes.iter().next().unwrap();
        let cfg = run.bank_config(run.inference.k);
        let samples = synth_class_with(class, seed, cfg.m, 6, run.data.size, 0.0, 0.0).unwrap();
        let bank_imgs: Vec<Tensor> = samples[..cfg.m].iter().map(|s| s.image.clone()).collect();
        let defective: Vec<Tensor> = samples[cfg.m..].iter().map(|s| s.image.clone()).collect();
        let bank = build_bank(&model, class, &bank_imgs, &cfg).unwrap();
        let mean_raw = |imgs: &[Tensor], bank: &MemoryBank| -> f64 {
            let maps = score_batch(&model, bank, &Tensor::stack(imgs).unwrap(), 2.0).unwrap();
            let vals: Vec<f64> = maps
                .iter()
                .flat_map(|m| m.coarse.iter().flat_map(|g| g.data().to_vec()))
                .collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        };
        let (normal, anomalous) = (mean_raw(&bank_imgs, &bank), mean_raw(&defective, &bank));
        assert!(
            normal < anomalous,
            "seed {seed}: bank {normal} vs defective {anomalous}"
        );

        let stack = Tensor::stack(&defective).unwrap();
        assert_eq!(
            score_batch(&model, &bank, &stack, 2.0).unwrap(),
            score_batch(&model, &permuted_bank(&bank), &stack, 2.0).unwrap()
        );
    }
}

#[test]
fn source_heads_are_independent() {
    let mut cfg = tiny_model_config(3);
    cfg.source_classes = vec![0, 2, 4];
    let mut model = Model::new(&cfg).unwrap();
    let mut r = rng(9);
    let pyr = FusedPyramid {
        scales: [(16, 8), (8, 8), (4, 16), (2, 16)]
            .iter()
            .map(|&(s, c)| Tensor::randn(&[2, s, s, c], 1.0, &mut r))
            .collect(),
    };
    let outputs = |m: &Model| -> Vec<Tensor> {
        let heads = m.heads.source_heads.iter().chain(&m.heads.target_seg_heads);
        heads
            .map(|h| h.forward(&pyr, (32, 32), Mode::Eval).unwrap().0)
            .collect()
    };
    let before = outputs(&model);
    model.heads.source_heads[1]
        .visit_params_mut("", &mut |_, p| p.value.data_mut().iter_mut().for_each(|v| *v += 0.25));
    let after = outputs(&model);
    assert_eq!(before.len(), 4);
    for (i, (a, b)) in before.iter().zip(&after).enumerate() {
        if i == 1 {
            assert_ne!(a, b);
        } else {
            assert_eq!(a, b, "head {i} changed");
        }
    }
}
