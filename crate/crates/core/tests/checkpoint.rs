use dpsc::checkpoint;
use dpsc::container::{decode, encode, Entry, Payload};
use dpsc::nn::{resnet9, tiny, wrn16_4, GroupSpec, Model, NetworkSpec};
use dpsc::Tensor;
use proptest::prelude::*;

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dpsc");
    let model = Model::<f32>::init(tiny(true, GroupSpec::Count(4), 8), 1).unwrap();
    let ema = model
        .params
        .with_flat(&model.params.to_flat().iter().map(|v| v * 0.5).collect::<Vec<_>>())
        .unwrap();
    checkpoint::save(&path, &model, Some(&ema)).unwrap();
    let back = checkpoint::load::<f32>(&path).unwrap();
    assert_eq!(back.model.spec, model.spec);
    assert_eq!(back.model.params, model.params);
    assert_eq!(back.ema.as_ref(), Some(&ema));
    assert_eq!(back.eval_model().params, ema);
    // identical inputs give identical bytes
    let again = dir.path().join("m2.dpsc");
    checkpoint::save(&again, &model, Some(&ema)).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert!(!dir.path().join(".m.dpsc.tmp").exists());
}

#[test]
fn architecture_text_survives_for_every_builder() {
    for spec in [
        resnet9(true, GroupSpec::Count(16)),
        wrn16_4(false, GroupSpec::PerChannel),
        tiny(false, GroupSpec::Count(1), 4),
    ] {
        assert_eq!(NetworkSpec::from_text(&spec.to_text()).unwrap(), spec);
    }
}

#[test]
fn checkpoint_missing_tensor_fails() {
    let model = Model::<f32>::init(tiny(false, GroupSpec::Count(2), 4), 0).unwrap();
    let mut entries = checkpoint::to_entries(&model, None);
    entries.pop();
    assert!(checkpoint::from_entries::<f32>(&entries).is_err());
}

#[test]
fn duplicate_names_rejected() {
    let t = || Payload::F32(Tensor::zeros(&[1]));
    assert!(encode(&[Entry::new("a", t()), Entry::new("a", t())]).is_err());
}

fn payload() -> impl Strategy<Value = Payload> {
    prop_oneof![
        prop::collection::vec(0usize..4, 0..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<f32>(), n)
                .prop_map(move |data| Payload::F32(Tensor::new(shape.clone(), data).unwrap()))
        }),
        prop::collection::vec(any::<u8>(), 0..16).prop_map(|bytes| Payload::U8 {
            shape: vec![bytes.len()],
            bytes
        }),
    ]
}

proptest! {
    #[test]
    fn container_round_trip(items in prop::collection::btree_map("[a-z.]{1,12}", payload(), 0..6)) {
        let entries: Vec<Entry> = items.into_iter().map(|(n, p)| Entry::new(n, p)).collect();
        let bytes = encode(&entries).unwrap();
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(back.len(), entries.len());
        for (a, b) in back.iter().zip(&entries) {
            prop_assert_eq!(&a.name, &b.name);
            match (&a.payload, &b.payload) {
                (Payload::F32(x), Payload::F32(y)) => {
                    prop_assert_eq!(x.shape(), y.shape());
                    let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
                    let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
                    prop_assert_eq!(xb, yb);
                }
                (p, q) => prop_assert_eq!(p, q),
            }
        }
        prop_assert_eq!(encode(&back).unwrap(), bytes);
    }
}
