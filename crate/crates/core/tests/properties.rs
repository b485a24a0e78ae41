use decodet::dataset::{average_ranks, spearman, split_quotas};
use decodet::eval::{ap_from_flags, iou};
use decodet::kernels::{dck_modulate, DckConfig, KernelField};
use decodet::losses::{scale_invariant_error, sir_loss};
use decodet::tensor::{avg_pool2d, conv2d, upsample_nearest, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Direct nested-loop cross-correlation.
fn conv_naive(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, h, wd) = x.dims3().unwrap();
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = b.data()[o];
                for c in 0..ci {
                    for u in 0..k {
                        for v in 0..k {
                            let y = (i * stride + u) as isize - pad as isize;
                            let xx = (j * stride + v) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += w.data()[((o * ci + c) * k + u) * k + v]
                                    * x.data()[(c * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    Tensor::from_vec(&[co, ho, wo], out).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv2d_matches_naive_and_is_linear(
        seed in any::<u64>(),
        ci in 1usize..4, co in 1usize..4, hw in 3usize..9,
        k in prop::sample::select(vec![1usize, 3]), stride in 1usize..3,
        a in -2.0f64..2.0, b in -2.0f64..2.0,
    ) {
        let mut r = rng(seed);
        let pad = k / 2;
        let x = Tensor::randn(&[ci, hw, hw], 1.0, &mut r);
        let y = Tensor::randn(&[ci, hw, hw], 1.0, &mut r);
        let w = Tensor::randn(&[co, ci, k, k], 1.0, &mut r);
        let bias = Tensor::randn(&[co], 1.0, &mut r);
        let zero = Tensor::zeros(&[co]);
        let got = conv2d(&x, &w, &bias, stride, pad).unwrap();
        prop_assert!(max_diff(&got, &conv_naive(&x, &w, &bias, stride, pad)) < 1e-12);

        let mix = x.scale(a).add(&y.scale(b)).unwrap();
        let lhs = conv2d(&mix, &w, &zero, stride, pad).unwrap();
        let rhs = conv2d(&x, &w, &zero, stride, pad).unwrap().scale(a)
            .add(&conv2d(&y, &w, &zero, stride, pad).unwrap().scale(b)).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-11);
    }

    #[test]
    fn pool_of_upsample_is_identity(seed in any::<u64>(), c in 1usize..4, hw in 1usize..6, f in 1usize..4) {
        let x = Tensor::randn(&[c, hw, hw], 1.0, &mut rng(seed));
        let back = avg_pool2d(&upsample_nearest(&x, f).unwrap(), f).unwrap();
        prop_assert!(max_diff(&back, &x) < 1e-12);
    }

    #[test]
    fn dck_modulation_is_linear_in_kernels_and_features(
        seed in any::<u64>(), groups in prop::sample::select(vec![1usize, 2, 4]),
        k in prop::sample::select(vec![1usize, 3, 5]), h in 1usize..7, w in 1usize..7,
    ) {
        let cfg = DckConfig { kernel_size: k, groups, reduction: 1, channels: 4 };
        let mut r = rng(seed);
        let f = Tensor::randn(&[4, h, w], 1.0, &mut r);
        let g = Tensor::randn(&[4, h, w], 1.0, &mut r);
        let mut k1 = KernelField::zeros(h, w, k, groups);
        let mut k2 = k1.clone();
        k1.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        k2.data.iter_mut().for_each(|v| *v = r.random_range(-1.0..1.0));
        let mut sum = k1.clone();
        sum.data.iter_mut().zip(&k2.data).for_each(|(a, b)| *a += b);

        let lhs = dck_modulate(&f, &sum, &cfg).unwrap();
        let rhs = dck_modulate(&f, &k1, &cfg).unwrap().add(&dck_modulate(&f, &k2, &cfg).unwrap()).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-12);

        let lhs = dck_modulate(&f.add(&g).unwrap(), &k1, &cfg).unwrap();
        let rhs = dck_modulate(&f, &k1, &cfg).unwrap().add(&dck_modulate(&g, &k1, &cfg).unwrap()).unwrap();
        prop_assert!(max_diff(&lhs, &rhs) < 1e-12);

        let id = dck_modulate(&f, &KernelField::delta(h, w, k, groups), &cfg).unwrap();
        prop_assert_eq!(id, f);
    }

    #[test]
    fn scale_invariant_error_is_shift_invariant_and_nonnegative(
        d in prop::collection::vec(-10.0f64..10.0, 1..50), c in -100.0f64..100.0,
    ) {
        let e = scale_invariant_error(&d);
        prop_assert!(e >= 0.0);
        let moved: Vec<f64> = d.iter().map(|v| v + c).collect();
        prop_assert!((scale_invariant_error(&moved) - e).abs() <= 1e-9 * (1.0 + e));
    }

    #[test]
    fn sir_loss_ignores_global_scale_when_alpha_is_one(
        y in prop::collection::vec(0.1f64..100.0, 1..30), s in 0.01f64..100.0,
    ) {
        let pred = Tensor::from_vec(&[1, 1, y.len()], y.clone()).unwrap();
        let label = pred.scale(s);
        let (loss, grad) = sir_loss(&pred, &label, 1.0).unwrap();
        prop_assert!(loss.abs() < 1e-12);
        prop_assert!(grad.max_abs() < 1e-9);
    }

    #[test]
    fn spearman_matches_rank_difference_formula(seed in any::<u64>(), n in 2usize..40) {
        let mut r = rng(seed);
        let mut a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let mut b = a.clone();
        for i in (1..n).rev() {
            a.swap(i, r.random_range(0..=i));
            b.swap(i, r.random_range(0..=i));
        }
        let d2: f64 = average_ranks(&a).iter().zip(average_ranks(&b)).map(|(x, y)| (x - y).powi(2)).sum();
        let nf = n as f64;
        let expected = 1.0 - 6.0 * d2 / (nf * (nf * nf - 1.0));
        prop_assert!((spearman(&a, &b).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn quotas_sum_and_track_ratios(n in 0usize..20_000, ratios in prop::collection::vec(1u32..10, 1..5)) {
        let q = split_quotas(n, &ratios);
        prop_assert_eq!(q.iter().sum::<usize>(), n);
        let total: u32 = ratios.iter().sum();
        for (i, (&qi, &ri)) in q.iter().zip(&ratios).enumerate().skip(1) {
            prop_assert_eq!(qi, n * ri as usize / total as usize, "part {}", i);
        }
    }

    #[test]
    fn ap_is_a_fraction(flags in prop::collection::vec(any::<bool>(), 0..30), extra in 0usize..5) {
        let tp = flags.iter().filter(|&&f| f).count();
        let ap = ap_from_flags(&flags, tp + extra);
        prop_assert!((0.0..=1.0).contains(&ap));
        if extra == 0 && tp > 0 && flags.iter().take(tp).all(|&f| f) {
            prop_assert!((ap - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(
        a in prop::array::uniform4(0.0f64..20.0), b in prop::array::uniform4(0.0f64..20.0),
    ) {
        let (a, b) = ([a[0], a[1], a[2] + 0.1, a[3] + 0.1], [b[0], b[1], b[2] + 0.1, b[3] + 0.1]);
        let o = iou(&a, &b);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&o));
        prop_assert_eq!(o, iou(&b, &a));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }
}
