use dpsc::nn::{
    mlp, predictions, resnet9, tiny, wrn16_4, ConvBlockConfig, GroupSpec, LayerSpec, Model, NetworkSpec,
    ResidualBlockConfig,
};
use dpsc::{Error, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const G32: GroupSpec = GroupSpec::Count(32);

fn batch(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn rel_diff(a: usize, b: usize) -> f64 {
    (a as f64 - b as f64).abs() / b as f64
}

#[test]
fn conv_block_parameter_counts() {
    assert_eq!(ConvBlockConfig::new(3, 64, G32).param_count(), 1920);
    assert_eq!(ConvBlockConfig::new(64, 128, G32).param_count(), 74_112);
}

#[test]
fn conv_block_forward_shape() {
    let spec = NetworkSpec {
        name: "block".into(),
        input: [3, 32, 32],
        layers: vec![LayerSpec::ConvBlock(ConvBlockConfig::new(3, 64, G32))],
    };
    let m = Model::<f32>::init(spec, 0).unwrap();
    assert_eq!(m.logits(&batch(&[1, 3, 32, 32], 1)).unwrap().shape(), &[1, 64, 32, 32]);
}

#[test]
fn scale_norm_adds_one_affine_pair() {
    for c in [16, 128, 256] {
        let off = ResidualBlockConfig {
            channels: c,
            groups: G32,
            scale_norm: false,
        };
        let on = ResidualBlockConfig {
            scale_norm: true,
            ..off
        };
        assert_eq!(on.param_count() - off.param_count(), 2 * c);
    }
}

#[test]
fn resnet9_parameter_count() {
    let off = resnet9(false, G32).param_count();
    let on = resnet9(true, G32).param_count();
    assert_eq!(off, 2_441_738);
    assert!(rel_diff(off, 2_447_946) < 0.01);
    assert_eq!(on - off, 768);
    // rebuilt networks give identical counts
    assert_eq!(resnet9(false, G32).param_count(), off);
}

#[test]
fn wrn16_4_parameter_count() {
    let off = wrn16_4(false, G32).param_count();
    let on = wrn16_4(true, G32).param_count();
    assert_eq!(off, 2_751_146);
    assert!(rel_diff(off, 2_752_506) < 0.01);
    // six blocks: two at each width
    assert_eq!(on - off, 2 * 2 * (64 + 128 + 256));
}

#[test]
fn resnet9_forward_shape() {
    let m = Model::<f32>::init(resnet9(true, G32), 3).unwrap();
    assert_eq!(m.logits(&batch(&[4, 3, 32, 32], 4)).unwrap().shape(), &[4, 10]);
}

#[test]
fn wrn16_4_forward_shape() {
    let m = Model::<f32>::init(wrn16_4(true, G32), 5).unwrap();
    assert_eq!(m.logits(&batch(&[2, 3, 32, 32], 6)).unwrap().shape(), &[2, 10]);
}

#[test]
fn residual_output_is_sum_of_paths() {
    let m = Model::<f32>::init(tiny(false, GroupSpec::Count(4), 8), 7).unwrap();
    let x = batch(&[3, 3, 8, 8], 8);
    let (_, taps) = m.forward_with_taps(&x, &["1.V_R", "1.V_F", "1.V_A"]).unwrap();
    let get = |n: &str| &taps.iter().find(|(k, _)| k == n).unwrap().1;
    let (r, f, a) = (get("1.V_R"), get("1.V_F"), get("1.V_A"));
    assert_eq!(a.shape(), r.shape());
    let sum = r.zip_map(f, |p, q| p + q).unwrap();
    assert_eq!(sum.data(), a.data());
}

#[test]
fn taps_do_not_perturb_logits() {
    let m = Model::<f32>::init(tiny(true, GroupSpec::Count(4), 8), 9).unwrap();
    let x = batch(&[2, 3, 8, 8], 10);
    let plain = m.logits(&x).unwrap();
    let (none, _) = m.forward_with_taps::<&str>(&x, &[]).unwrap();
    let (all, taps) = m.forward_with_taps(&x, &m.spec.taps()).unwrap();
    assert_eq!(plain, none);
    assert_eq!(plain, all);
    assert_eq!(taps.len(), 4);
    assert!(matches!(m.forward_with_taps(&x, &["7.V_R"]), Err(Error::UnknownTap(_))));
}

#[test]
fn scale_norm_tap_statistics_at_init() {
    let m = Model::<f32>::init(resnet9(true, G32), 11).unwrap();
    let x = batch(&[2, 3, 32, 32], 12);
    let (_, taps) = m.forward_with_taps(&x, &["2.V_A^S", "2.V_A", "2.V_F"]).unwrap();
    let get = |n: &str| &taps.iter().find(|(k, _)| k == n).unwrap().1;
    let s = get("2.V_AS");
    let per_group = s.numel() / (2 * 32);
    for slice in s.data().chunks(per_group) {
        let mean = slice.iter().map(|&v| v as f64).sum::<f64>() / per_group as f64;
        let var = slice.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per_group as f64;
        assert!(mean.abs() < 1e-5, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-3, "var {var}");
    }
    let std = |t: &Tensor<f32>| {
        let n = t.numel() as f64;
        let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
        (t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    // scale mixing: the un-normalised sum is wider than either normalised input
    assert!(std(get("2.V_A")) > 1.0);
    assert!(std(get("2.V_A")) > std(get("2.V_F")));
}

#[test]
fn group_sweep_is_legal() {
    for g in [
        GroupSpec::Count(1),
        GroupSpec::Count(16),
        GroupSpec::Count(32),
        GroupSpec::Count(64),
        GroupSpec::PerChannel,
    ] {
        for sn in [false, true] {
            resnet9(sn, g).validate().unwrap();
            wrn16_4(sn, g).validate().unwrap();
        }
        let m = Model::<f32>::init(tiny(true, g, 8), 13).unwrap();
        assert_eq!(m.logits(&batch(&[1, 3, 8, 8], 14)).unwrap().shape(), &[1, 2]);
    }
    assert!(resnet9(false, GroupSpec::Count(48)).validate().is_err());
}

#[test]
fn argmax_is_scale_invariant() {
    let m = Model::<f32>::init(mlp([3, 8, 8], 16, 5), 15).unwrap();
    let logits = m.logits(&batch(&[6, 3, 8, 8], 16)).unwrap();
    let p = predictions(&logits);
    for c in [0.01f32, 3.0, 1e3] {
        assert_eq!(predictions(&logits.map(|v| v * c)), p);
    }
}

#[test]
fn checkpoint_naming_convention() {
    let layout = resnet9(true, G32).param_layout();
    let names: Vec<_> = layout.iter().map(|p| p.name.as_str()).collect();
    assert_eq!(&names[..2], &["0.conv.weight", "0.conv.bias"]);
    assert!(names.contains(&"2.sn.weight"));
    assert!(names
        .iter()
        .all(|n| n.split('.').next().unwrap().parse::<usize>().is_ok()));
}

#[test]
fn init_is_seeded() {
    let a = Model::<f32>::init(tiny(false, G32, 8), 1).unwrap();
    let b = Model::<f32>::init(tiny(false, G32, 8), 1).unwrap();
    let c = Model::<f32>::init(tiny(false, G32, 8), 2).unwrap();
    assert_eq!(a.params.to_flat(), b.params.to_flat());
    assert_ne!(a.params.to_flat(), c.params.to_flat());
    assert!(a.params.get("1.f1.gn.weight").unwrap().data().iter().all(|&v| v == 1.0));
}

#[test]
fn model_gradient_matches_graph() {
    let m = Model::<f64>::init(tiny(true, GroupSpec::Count(2), 4), 17).unwrap();
    let x = Tensor::randn(&[2, 3, 8, 8], 1.0, &mut ChaCha8Rng::seed_from_u64(18));
    let (loss, flat) = m.loss_and_grad(&x, &[0, 1]).unwrap();
    assert_eq!(flat.len(), m.params.numel());
    let g = Graph::new();
    let p = m.leaves(&g);
    let l = dpsc::nn::forward(&m.spec, &p, g.constant(x), None)
        .unwrap()
        .softmax_cross_entropy(&[0, 1])
        .unwrap();
    assert_eq!(l.value().item().unwrap(), loss);
}
