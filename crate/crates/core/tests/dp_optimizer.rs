use dpsc::data::{synth_blobs, BlobConfig, Dataset};
use dpsc::dp::*;
use dpsc::nn::{mlp, tiny, GroupSpec, Model};
use dpsc::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn blobs(n: usize) -> Dataset<f32> {
    synth_blobs(&BlobConfig {
        n,
        ..Default::default()
    })
    .unwrap()
}

fn tiny_model(seed: u64) -> Model<f32> {
    Model::init(tiny(true, GroupSpec::Count(4), 8), seed).unwrap()
}

#[test]
fn lot_sampling_edges() {
    let mut r = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        assert!(poisson_sample_lot(100, 0.0, &mut r).unwrap().is_empty());
        assert_eq!(
            poisson_sample_lot(100, 1.0, &mut r).unwrap(),
            (0..100).collect::<Vec<_>>()
        );
    }
    assert!(poisson_sample_lot(10, 1.5, &mut r).is_err());
}

#[test]
fn lot_size_statistics() {
    let (n, q) = (50_000usize, 1024.0 / 50_000.0);
    let draws = 10_000;
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let total: usize = (0..draws)
        .map(|_| poisson_sample_lot(n, q, &mut r).unwrap().len())
        .sum();
    let mean = total as f64 / draws as f64;
    let bound = 3.0 * (n as f64 * q * (1.0 - q) / draws as f64).sqrt();
    assert!((mean - 1024.0).abs() < bound, "mean {mean}, bound {bound}");
}

#[test]
fn per_sample_sum_matches_batch_gradient() {
    let data = blobs(16).cast::<f64>();
    let model = Model::<f64>::init(tiny(false, GroupSpec::Count(2), 4), 2).unwrap();
    let lot: Vec<usize> = (0..16).collect();
    let key = StepKey { seed: 0, step: 0 };
    let grads = per_sample_gradients(&model, &data, &lot, 1, None, key).unwrap();
    let mut sum = vec![0.0; model.params.numel()];
    for g in &grads {
        for (s, v) in sum.iter_mut().zip(&g.grad) {
            *s += v;
        }
    }
    let (_, batch_mean) = model.loss_and_grad(&data.images, &data.labels).unwrap();
    for (s, b) in sum.iter().zip(&batch_mean) {
        assert!((s - 16.0 * b).abs() < 1e-5, "{s} vs {}", 16.0 * b);
    }
}

#[test]
fn identical_samples_identical_gradients() {
    let base = blobs(4);
    let img = base.images.sample(1).unwrap();
    let images = Tensor::concat(&[img.clone(), img]).unwrap();
    let data = Dataset::new(images, vec![1, 1], 2, base.split, String::new()).unwrap();
    let model = tiny_model(3);
    let g = per_sample_gradients(&model, &data, &[0, 1], 1, None, StepKey { seed: 0, step: 0 }).unwrap();
    assert_eq!(g[0].grad, g[1].grad);
}

#[test]
fn multiplicity_with_identity_augmentation_is_exact() {
    let data = blobs(8);
    let model = tiny_model(4);
    let id = |x: &Tensor<f32>, _: &mut ChaCha8Rng| Ok(x.clone());
    let key = StepKey { seed: 9, step: 3 };
    let lot = [0, 3, 5];
    let one = per_sample_gradients(&model, &data, &lot, 1, Some(&id), key).unwrap();
    let four = per_sample_gradients(&model, &data, &lot, 4, Some(&id), key).unwrap();
    assert_eq!(one, four);
    let bad = |_: &Tensor<f32>, _: &mut ChaCha8Rng| Ok(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(per_sample_gradients(&model, &data, &lot, 2, Some(&bad), key).is_err());
}

#[test]
fn augmented_gradients_do_not_depend_on_lot_composition() {
    let data = blobs(8);
    let model = tiny_model(5);
    let aug = |x: &Tensor<f32>, r: &mut ChaCha8Rng| dpsc::data::augment(x, r);
    let key = StepKey { seed: 1, step: 7 };
    let a = per_sample_gradients(&model, &data, &[2, 6], 3, Some(&aug), key).unwrap();
    let b = per_sample_gradients(&model, &data, &[6, 0, 1, 2], 3, Some(&aug), key).unwrap();
    assert_eq!(a[0], b[3]);
    assert_eq!(a[1], b[0]);
}

#[test]
fn clip_examples() {
    let mut g = vec![3.0f64, 4.0];
    assert_eq!(clip(&mut g, 1.5).unwrap(), 5.0);
    assert!((g[0] - 0.9).abs() < 1e-15 && (g[1] - 1.2).abs() < 1e-15);
    let mut unit = vec![0.6f32, 0.8];
    let before = unit.clone();
    clip(&mut unit, 1.5).unwrap();
    assert_eq!(unit, before);
    let mut zero = vec![0.0f32; 5];
    clip(&mut zero, 1.5).unwrap();
    assert!(zero.iter().all(|&v| v == 0.0));
    let mut r = ChaCha8Rng::seed_from_u64(6);
    for scale in [0.001, 0.1, 1.0, 10.0] {
        let t = Tensor::<f32>::randn(&[10_000], scale, &mut r);
        let mut g = t.data().to_vec();
        let n = norm(&g);
        clip(&mut g, 1.5).unwrap();
        assert!((norm(&g) - n.min(1.5)).abs() < 1e-5);
    }
}

#[test]
fn privatize_without_noise_is_the_mean() {
    let clipped = vec![vec![0.5f64, -0.25], vec![1.0, 0.5]];
    let mut r = ChaCha8Rng::seed_from_u64(0);
    let out = privatize(&clipped, 2, 0.0, 1.5, 4.0, &mut r).unwrap();
    assert_eq!(out, vec![1.5 / 4.0, 0.25 / 4.0]);
    let unclipped = vec![vec![3.0f64, 4.0]];
    assert!(matches!(
        privatize(&unclipped, 2, 1.0, 1.5, 4.0, &mut r),
        Err(dpsc::Error::Contract(_))
    ));
}

#[test]
fn noise_variance_matches() {
    let (sigma, c, l) = (0.8, 1.5, 64.0);
    let draws = 100_000;
    let mut r = ChaCha8Rng::seed_from_u64(7);
    // empty lot over a 4-dimensional parameter: 4·10⁵ coordinates in total
    let mut sq = [0.0f64; 4];
    for _ in 0..draws {
        let z = privatize::<f64, _>(&[], 4, sigma, c, l, &mut r).unwrap();
        for (s, v) in sq.iter_mut().zip(&z) {
            *s += v * v;
        }
    }
    let target = (sigma * c / l).powi(2);
    for s in sq {
        let var = s / draws as f64;
        assert!((var / target - 1.0).abs() < 0.02, "{var} vs {target}");
    }
}

#[test]
fn noise_is_independent_of_lot_contents() {
    let a = vec![vec![0.1f64, 0.2, 0.3]];
    let b = vec![vec![-0.5f64, 0.0, 0.7], vec![0.2, 0.2, 0.2]];
    let za = privatize(&a, 3, 1.0, 1.5, 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    let zb = privatize(&b, 3, 1.0, 1.5, 1.0, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
    for i in 0..3 {
        let sa: f64 = a.iter().map(|g| g[i]).sum();
        let sb: f64 = b.iter().map(|g| g[i]).sum();
        assert!(((za[i] - sa) - (zb[i] - sb)).abs() < 1e-12);
    }
}

#[test]
fn swapping_one_sample_moves_sum_by_at_most_2c() {
    let data = blobs(32);
    let model = tiny_model(9);
    let key = StepKey { seed: 0, step: 0 };
    let mut r = ChaCha8Rng::seed_from_u64(10);
    for trial in 0..5 {
        let lot = poisson_sample_lot(32, 0.3, &mut r).unwrap();
        if lot.is_empty() {
            continue;
        }
        let mut swapped = lot.clone();
        let out = (0..32).find(|i| !lot.contains(i)).unwrap();
        swapped[trial % lot.len()] = out;
        swapped.sort();
        let s1 = lot_sum(&model, &data, &lot, 1, None, key, Some(1.5)).unwrap();
        let s2 = lot_sum(&model, &data, &swapped, 1, None, key, Some(1.5)).unwrap();
        let diff: Vec<f32> = s1.sum.iter().zip(&s2.sum).map(|(a, b)| a - b).collect();
        assert!(norm(&diff) <= 3.0 + 1e-5);
    }
}

/// Scalar transcription of the NAdam update for one coordinate.
fn nadam_reference(grads: &[f64], lr: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut theta) = (0.0, 0.0, 0.0);
    for (i, &g) in grads.iter().enumerate() {
        let t = (i + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let m_hat = m / (1.0 - b1.powi(t));
        let v_hat = v / (1.0 - b2.powi(t));
        let m_bar = b1 * m_hat + (1.0 - b1) * g / (1.0 - b1.powi(t));
        theta -= lr * m_bar / (v_hat.sqrt() + eps);
    }
    theta
}

#[test]
fn nadam_examples() {
    let mut opt = Nadam::<f64>::new(3, 1e-3);
    let mut p = vec![1.0, 2.0, 3.0];
    opt.step(&mut p, &[0.0; 3]).unwrap();
    assert_eq!(p, vec![1.0, 2.0, 3.0]);
    assert_eq!(opt.t, 1);

    let seq = [0.5, -0.2, 0.9, 0.1];
    let mut opt = Nadam::<f64>::new(1, 1e-3);
    let mut p = vec![0.0];
    opt.step(&mut p, &seq[..1]).unwrap();
    assert!((p[0] - nadam_reference(&seq[..1], 1e-3)).abs() < 1e-15);
    for g in &seq[1..] {
        opt.step(&mut p, &[*g]).unwrap();
    }
    assert!((p[0] - nadam_reference(&seq, 1e-3)).abs() < 1e-15);

    let run = || {
        let mut o = Nadam::<f32>::new(2, 1e-3);
        let mut p = vec![0.3f32, -0.1];
        for g in [[0.1f32, 0.2], [-0.3, 0.05], [0.7, -0.9]] {
            o.step(&mut p, &g).unwrap();
        }
        p
    };
    assert_eq!(run(), run());

    let mut o = Nadam::<f32>::new(1, 1e-3);
    let mut p = vec![1.0f32];
    assert!(matches!(o.step(&mut p, &[f32::NAN]), Err(dpsc::Error::NonFinite(_))));
    assert_eq!((p[0], o.t), (1.0, 0));
}

#[test]
fn plateau_schedule() {
    let mut s = Plateau::new(1e-3);
    for l in [1.0, 0.9, 0.8, 0.7, 0.6, 0.5] {
        assert_eq!(s.observe(l), 1e-3);
    }
    let mut s = Plateau::new(1e-3);
    let lrs: Vec<f64> = (0..5).map(|_| s.observe(1.0)).collect();
    assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 1e-3, 5e-4]);
    let lrs: Vec<f64> = (0..4).map(|_| s.observe(1.0)).collect();
    assert_eq!(lrs, vec![5e-4, 5e-4, 5e-4, 2.5e-4]);
}

#[test]
fn ema_examples() {
    let mut e = Ema::new(&[5.0f64, -1.0], 0.0).unwrap();
    e.update(&[1.0, 2.0]).unwrap();
    assert_eq!(e.shadow, vec![1.0, 2.0]);

    let tau = 0.9999;
    let (s0, p) = (3.0f64, 1.0f64);
    let mut e = Ema::new(&[s0], tau).unwrap();
    let mut gap = (s0 - p).abs();
    for _ in 0..100 {
        e.update(&[p]).unwrap();
        let g = (e.shadow[0] - p).abs();
        assert!(g < gap);
        gap = g;
    }
    assert!((e.shadow[0] - (p + tau.powi(100) * (s0 - p))).abs() < 1e-6);
    assert!(e.update(&[1.0, 2.0]).is_err());
    assert!(Ema::new(&[0.0f64], 1.0).is_err());
}

fn run_training(data: &Dataset<f32>, cfg: &TrainConfig, seed: u64) -> (Model<f32>, TrainOutcome) {
    let mut model = tiny_model(seed);
    let mut st = OptimizerState::new(&model.params.to_flat(), 1e-3, Some(0.9999)).unwrap();
    let out = train_epochs(&mut model, data, None, cfg, &mut st, |_, _, _| Ok(())).unwrap();
    (model, out)
}

#[test]
fn degenerate_dp_matches_plain_training_bitwise() {
    let data = blobs(48);
    let degenerate = DpConfig {
        enabled: true,
        clip_bound: f64::INFINITY,
        noise_multiplier: 0.0,
        expected_lot_size: 48,
        multiplicity: 1,
    };
    let plain = DpConfig {
        enabled: false,
        ..degenerate
    };
    let (m1, o1) = run_training(&data, &TrainConfig::new(3, 11, degenerate), 11);
    let (m2, o2) = run_training(&data, &TrainConfig::new(3, 11, plain), 11);
    assert_eq!(m1.params.to_flat(), m2.params.to_flat());
    let losses = |o: &TrainOutcome| o.records.iter().map(|r| r.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&o1), losses(&o2));
    assert!(o1.records.iter().all(|r| r.epsilon_spent.is_infinite()));
}

#[test]
fn dp_off_gradient_is_the_minibatch_gradient() {
    let data = blobs(20);
    let model = tiny_model(12);
    let lot: Vec<usize> = (0..20).collect();
    let s = lot_sum(&model, &data, &lot, 1, None, StepKey { seed: 0, step: 0 }, None).unwrap();
    let mean = scale_mean(&s.sum, 20.0);
    let (_, batch) = model.loss_and_grad(&data.images, &data.labels).unwrap();
    for (a, b) in mean.iter().zip(&batch) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn blob_training_reaches_ninety_percent() {
    let data = blobs(512);
    let dp = DpConfig {
        enabled: true,
        clip_bound: 1.5,
        noise_multiplier: 0.5,
        expected_lot_size: 64,
        multiplicity: 1,
    };
    let cfg = TrainConfig::new(10, 0, dp);
    let (model, out) = run_training(&data, &cfg, 0);
    let (_, acc) = model.evaluate(&data.images, &data.labels, 256).unwrap();
    assert!(acc >= 0.9, "train accuracy {acc}");
    assert_eq!(out.clip_audit.violations, 0);
    assert!(out.clip_audit.max_norm_after <= 1.5 + 1e-6);
    assert!(out.clip_audit.samples > 4000);
    let eps: Vec<f64> = out.records.iter().map(|r| r.epsilon_spent).collect();
    assert!(eps.windows(2).all(|w| w[1] > w[0]) && eps[0].is_finite());
    assert!(out.records.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(out.unaccounted_feedback);

    let (_, again) = run_training(&data, &cfg, 0);
    assert_eq!(out, again);
}

#[test]
fn budget_ceiling_halts_training() {
    let data = blobs(64);
    let dp = DpConfig {
        enabled: true,
        clip_bound: 1.5,
        noise_multiplier: 0.7,
        expected_lot_size: 16,
        multiplicity: 1,
    };
    let mut cfg = TrainConfig::new(50, 0, dp);
    cfg.epsilon_ceiling = Some(5.0);
    let mut model = tiny_model(0);
    let mut st = OptimizerState::new(&model.params.to_flat(), 1e-3, None).unwrap();
    let mut seen = Vec::new();
    let err = train_epochs(&mut model, &data, None, &cfg, &mut st, |r, _, _| {
        seen.push(r.epsilon_spent);
        Ok(())
    })
    .unwrap_err();
    match err {
        dpsc::Error::BudgetExceeded { spent, ceiling } => {
            assert!(spent > 5.0 && ceiling == 5.0);
            assert!(seen.iter().all(|&e| e <= 5.0));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn config_validation() {
    let ok = DpConfig::default();
    assert!(ok.validate(50_000).is_ok());
    assert!(ok.validate(100).is_err());
    assert!(DpConfig { clip_bound: 0.0, ..ok }.validate(50_000).is_err());
    assert!(DpConfig { multiplicity: 0, ..ok }.validate(50_000).is_err());
    assert!(DpConfig {
        clip_bound: f64::INFINITY,
        ..ok
    }
    .validate(50_000)
    .is_err());
}

#[test]
fn mlp_trains_without_dp() {
    let data = blobs(64);
    let mut model = Model::<f32>::init(mlp([3, 8, 8], 8, 2), 1).unwrap();
    let dp = DpConfig {
        enabled: false,
        expected_lot_size: 16,
        ..DpConfig::default()
    };
    let mut st = OptimizerState::new(&model.params.to_flat(), 1e-2, None).unwrap();
    let out = train_epochs(
        &mut model,
        &data,
        None,
        &TrainConfig::new(5, 2, dp),
        &mut st,
        |_, _, _| Ok(()),
    )
    .unwrap();
    assert!(out.records.last().unwrap().val_acc > 0.9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn clipped_norm_never_exceeds_bound(
        v in prop::collection::vec(-1e3f32..1e3, 1..200),
        c in 0.01f64..10.0,
    ) {
        let mut g = v.clone();
        let before = clip(&mut g, c).unwrap();
        let after = norm(&g);
        prop_assert!(after <= c + 1e-6);
        prop_assert!((after - before.min(c)).abs() <= 1e-5 * before.max(1.0));
        // direction preserved
        let dot: f64 = v.iter().zip(&g).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!(dot >= 0.0);
    }
}
