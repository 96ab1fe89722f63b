//! Quantization round-trips and bit-exact feature-store persistence.

use amortenc::quant::{
    calibrate_affine, dequantize, payload_len, quantize, round_trip, QuantMode, QuantParams,
    QuantScheme,
};
use amortenc::store::{read_features, write_features, FeatureRecord, FeatureStore, PoolingStage};
use amortenc::tensor::Tensor;
use proptest::prelude::*;

fn t(shape: Vec<usize>, data: Vec<f32>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

#[test]
fn calibration_of_symmetric_range() {
    let p = calibrate_affine(&[-1.0, 0.3, 1.0]).unwrap();
    assert_eq!(p.zero_point, 128);
    assert!((p.scale - 2.0 / 255.0).abs() < 1e-9);
    let q = quantize(&t(vec![1, 2], vec![0.0, 1.0]), &QuantScheme::U8(p)).unwrap();
    assert_eq!(q.payload(), &[128, 255]);
}

#[test]
fn exact_ties_round_away_from_zero() {
    // scale 1, zero point 3: x/scale lands exactly on .5
    let p = calibrate_affine(&[-3.0, 252.0]).unwrap();
    assert_eq!((p.scale, p.zero_point), (1.0, 3));
    let q = quantize(&t(vec![1, 4], vec![-2.5, -0.5, 0.5, 1.5]), &QuantScheme::U8(p)).unwrap();
    assert_eq!(q.payload(), &[0, 2, 4, 5]);
}

#[test]
fn range_starting_at_zero_has_zero_offset() {
    for s in [0.01f32, 0.5, 3.0] {
        assert_eq!(calibrate_affine(&[0.0, 255.0 * s]).unwrap().zero_point, 0);
    }
}

#[test]
fn constant_samples() {
    let p = calibrate_affine(&[0.0; 8]).unwrap();
    assert_eq!(p.zero_point, 0);
    assert_eq!(p.scale as f64, amortenc::quant::MIN_SCALE as f32 as f64);
    assert_eq!(round_trip(&Tensor::zeros(vec![2, 2]), &QuantScheme::U8(p)).unwrap().data(), &[0.0; 4]);

    let p = calibrate_affine(&[3.0; 8]).unwrap();
    assert_eq!(p.zero_point, 0);
    let back = round_trip(&Tensor::full(vec![1, 4], 3.0), &QuantScheme::U8(p)).unwrap();
    for v in back.data() {
        assert!((v - 3.0).abs() <= 1e-6, "{v}");
    }
    assert!(calibrate_affine(&[]).is_err());
    assert!(calibrate_affine(&[f32::NAN]).is_err());
}

#[test]
fn out_of_range_values_clamp() {
    let p = calibrate_affine(&[-1.0, 1.0]).unwrap();
    let q = quantize(&t(vec![1, 4], vec![-9.0, -1.5, 1.5, 9.0]), &QuantScheme::U8(p)).unwrap();
    assert_eq!(q.payload(), &[0, 0, 255, 255]);
}

#[test]
fn f32_round_trip_is_bit_identical() {
    let x = t(vec![1, 3], vec![0.1, -0.0, f32::MIN_POSITIVE]);
    let back = round_trip(&x, &QuantScheme::F32).unwrap();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&x));
}

#[test]
fn bit1_packs_msb_first() {
    let x = t(vec![2, 10], {
        let mut v = vec![-1.0; 20];
        v[0] = 0.5;
        v[9] = 0.0;
        v[10 + 7] = 2.0;
        v
    });
    let q = quantize(&x, &QuantScheme::Bit1).unwrap();
    // rows are padded to whole bytes independently
    assert_eq!(q.payload(), &[0b1000_0000, 0b0100_0000, 0b0000_0001, 0]);
    assert_eq!(payload_len(&[2, 10], &QuantScheme::Bit1), 4);
    let back = dequantize(&q).unwrap();
    assert_eq!(back.data()[..10], [1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, -1.0, 1.0]);
}

#[test]
fn storage_sizes() {
    let shape = [24, 50, 1024];
    assert_eq!(payload_len(&shape, &QuantScheme::F16), 2_457_600);
    assert_eq!(payload_len(&shape, &QuantScheme::F32), 4_915_200);
    assert_eq!(payload_len(&[50, 1024], &QuantScheme::Bit1) * 8, 50 * 1024);
    assert_eq!(QuantMode::F16.bits_per_element() / QuantMode::Bit1.bits_per_element(), 16);
}

#[test]
fn non_finite_input_rejected() {
    let x = t(vec![1, 2], vec![1.0, f32::INFINITY]);
    assert!(quantize(&x, &QuantScheme::F32).is_err());
    let bad = QuantScheme::U8(QuantParams { scale: 0.0, zero_point: 0 });
    assert!(quantize(&t(vec![1, 1], vec![1.0]), &bad).is_err());
}

#[test]
fn store_files_are_named_by_document() {
    let dir = tempfile::tempdir().unwrap();
    let store = FeatureStore::create(dir.path().join("s")).unwrap();
    let x = t(vec![2, 3], vec![0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
    for id in ["b", "a"] {
        let r = FeatureRecord::new(id, 1, PoolingStage::LayerPooled, quantize(&x, &QuantScheme::F16).unwrap()).unwrap();
        store.write(&r).unwrap();
    }
    assert_eq!(store.doc_ids().unwrap(), ["a", "b"]);
    assert!(store.read_checked("a", Some(2)).is_err());
    assert!(store.read("missing").is_err());
    assert!(FeatureStore::open(dir.path().join("nope")).is_err());
}

fn tensor2() -> impl Strategy<Value = Tensor> {
    (1usize..6, 1usize..20).prop_flat_map(|(r, c)| {
        proptest::collection::vec(-50.0f32..50.0, r * c).prop_map(move |v| t(vec![r, c], v))
    })
}

fn scheme_for(x: &Tensor, which: u8) -> QuantScheme {
    match which % 4 {
        0 => QuantScheme::F32,
        1 => QuantScheme::F16,
        2 => QuantScheme::U8(calibrate_affine(x.data()).unwrap()),
        _ => QuantScheme::Bit1,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn u8_error_is_at_most_half_a_step(x in tensor2()) {
        let p = calibrate_affine(x.data()).unwrap();
        let back = round_trip(&x, &QuantScheme::U8(p)).unwrap();
        let half = p.scale as f64 / 2.0;
        for (a, b) in x.data().iter().zip(back.data()) {
            let err = (*a as f64 - *b as f64).abs();
            // f32 dequantization adds at most a few ulps of the value
            prop_assert!(err <= half + 1e-6 * a.abs().max(1.0) as f64,
                "{a} -> {b}, scale {}", p.scale);
        }
    }

    #[test]
    fn bit1_preserves_signs(x in tensor2()) {
        let back = round_trip(&x, &QuantScheme::Bit1).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert_eq!(*b, if *a >= 0.0 { 1.0 } else { -1.0 });
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn f16_relative_error(x in tensor2()) {
        let back = round_trip(&x, &QuantScheme::F16).unwrap();
        for (a, b) in x.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= a.abs() * 2f32.powi(-11) + 1e-7);
        }
    }

    #[test]
    fn quantize_is_idempotent_after_round_trip(x in tensor2(), which in 0u8..4) {
        let s = scheme_for(&x, which);
        let once = round_trip(&x, &s).unwrap();
        let twice = round_trip(&once, &s).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn payload_length_matches_formula(x in tensor2(), which in 0u8..4) {
        let s = scheme_for(&x, which);
        let q = quantize(&x, &s).unwrap();
        let (r, c) = (x.shape()[0], x.shape()[1]);
        let want = match which % 4 { 0 => 4 * r * c, 1 => 2 * r * c, 2 => r * c, _ => r * c.div_ceil(8) };
        prop_assert_eq!(q.payload().len(), want);
    }
}

fn record() -> impl Strategy<Value = FeatureRecord> {
    (
        "[a-z0-9_-]{1,12}",
        any::<u64>(),
        any::<bool>(),
        0u8..4,
        1usize..4,
        1usize..7,
        1usize..12,
        any::<u64>(),
    )
        .prop_map(|(id, fp, raw, which, l, n, d, seed)| {
            let shape = if raw { vec![l, n, d] } else { vec![n, d] };
            let len: usize = shape.iter().product();
            let mut r = amortenc::rng::seeded(seed);
            let x = amortenc::rng::normal_tensor(&mut r, shape.clone(), 1.0);
            let x = t(shape, x.into_data()[..len].to_vec());
            let s = scheme_for(&x, which);
            let stage = if raw { PoolingStage::RawLayers } else { PoolingStage::LayerPooled };
            FeatureRecord::new(format!("d{id}"), fp, stage, quantize(&x, &s).unwrap()).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn store_round_trip_is_bit_exact(rec in record()) {
        let mut bytes = Vec::new();
        write_features(&mut bytes, &rec).unwrap();
        let back = read_features(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &rec);
        let mut again = Vec::new();
        write_features(&mut again, &back).unwrap();
        prop_assert_eq!(&again, &bytes);

        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::create(dir.path()).unwrap();
        store.write(&rec).unwrap();
        prop_assert_eq!(std::fs::read(store.path_for(rec.doc_id())).unwrap(), bytes);
        prop_assert_eq!(store.read_checked(rec.doc_id(), Some(rec.encoder_fingerprint())).unwrap(), rec);
    }

    #[test]
    fn any_truncation_is_a_format_error(rec in record(), cut in any::<prop::sample::Index>()) {
        let mut bytes = Vec::new();
        write_features(&mut bytes, &rec).unwrap();
        let keep = cut.index(bytes.len());
        let err = read_features(&bytes[..keep]).unwrap_err();
        prop_assert!(matches!(err, amortenc::Error::Format { .. }), "{}", err);
    }
}
