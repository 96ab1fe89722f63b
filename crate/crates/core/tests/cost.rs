//! FLOPs, storage and break-even arithmetic.

use amortenc::cost::{
    break_even_from_flops, break_even_tasks, cumulative_flops, encoder_flops, payload_bytes,
    storage_per_token, CostReport, CostScenario,
};
use amortenc::encoder::EncoderConfig;
use amortenc::quant::{quantize, QuantMode};
use amortenc::store::{write_features, FeatureRecord, PoolingStage};
use amortenc::tensor::Tensor;
use proptest::prelude::*;

fn large() -> EncoderConfig {
    EncoderConfig::new(24, 1024, 16)
}

fn distilled() -> EncoderConfig {
    EncoderConfig::new(6, 768, 12)
}

fn scenario(head: f64) -> CostScenario {
    CostScenario {
        full_config: large(),
        distilled_config: distilled(),
        head_cost_fraction: head,
        seq_len: 128,
        num_tasks: 20,
    }
}

#[test]
fn unit_config_costs_28() {
    assert_eq!(encoder_flops(&EncoderConfig::new(1, 1, 1), 1), 28);
}

#[test]
fn large_to_distilled_ratio() {
    for n in [64, 128, 512] {
        let r = encoder_flops(&large(), n) as f64 / encoder_flops(&distilled(), n) as f64;
        assert!((6.5..=7.6).contains(&r), "n={n}: {r}");
    }
    // 24·(24·128·1024² + 4·128²·1024) / 6·(24·128·768² + 4·128²·768)
    let want = (24.0 * (24.0 * 128.0 * 1024f64.powi(2) + 4.0 * 128f64.powi(2) * 1024.0))
        / (6.0 * (24.0 * 128.0 * 768f64.powi(2) + 4.0 * 128f64.powi(2) * 768.0));
    assert!((scenario(0.0).ratio() - want).abs() < 1e-12);
    assert!((want - 7.06).abs() < 0.005);
}

#[test]
fn storage_table_values() {
    assert_eq!(payload_bytes(PoolingStage::RawLayers, &large(), QuantMode::F16, 50), 2_457_600);
    assert_eq!(storage_per_token(PoolingStage::LayerPooled, &large(), QuantMode::Bit1), 1024);
    let f16 = storage_per_token(PoolingStage::LayerPooled, &large(), QuantMode::F16);
    assert_eq!(f16, 16 * 1024);
    assert_eq!(storage_per_token(PoolingStage::RawLayers, &large(), QuantMode::F16) * 50 / 8, 2_457_600);
}

#[test]
fn break_even_with_large_and_distilled_configs() {
    for head in [0.0, 0.001, 0.005, 0.01] {
        assert_eq!(break_even_tasks(&scenario(head)).unwrap(), Some(8), "head {head}");
    }
    // at or above 1/ratio the shared slope never loses
    let r = scenario(0.0).ratio();
    assert_eq!(break_even_tasks(&scenario(1.0 / r)).unwrap(), None);
    assert_eq!(break_even_tasks(&scenario(0.5)).unwrap(), None);
}

#[test]
fn ratio_seven_breaks_even_at_eight() {
    assert_eq!(break_even_from_flops(7.0, 1.0, 0.0, 20), Some(8));
    let s = CostScenario {
        full_config: EncoderConfig::new(7, 64, 4),
        distilled_config: EncoderConfig::new(1, 64, 4),
        head_cost_fraction: 0.0,
        seq_len: 32,
        num_tasks: 20,
    };
    assert_eq!(s.ratio(), 7.0);
    assert_eq!(break_even_tasks(&s).unwrap(), Some(8));
    assert_eq!(break_even_tasks(&CostScenario { num_tasks: 7, ..s }).unwrap(), None);
}

#[test]
fn curves() {
    let pts = cumulative_flops(&scenario(0.005)).unwrap();
    assert_eq!(pts.len(), 20);
    assert!(pts[0].shared >= pts[0].single_distilled);
    for w in pts.windows(2) {
        assert!(w[1].single_full >= w[0].single_full);
        assert!(w[1].single_distilled >= w[0].single_distilled);
        let slope = w[1].shared - w[0].shared;
        assert!((slope - 0.005 * scenario(0.0).full_flops()).abs() <= 1.0);
    }
    for p in &pts[1..] {
        assert!(p.shared < p.single_full);
    }
    let flat = cumulative_flops(&scenario(0.0)).unwrap();
    assert!(flat.iter().all(|p| p.shared == flat[0].shared));
    assert!(cumulative_flops(&scenario(1.0)).is_err());
}

#[test]
fn csv_ends_with_break_even_row() {
    let report = CostReport::build(&scenario(0.005), 50).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "k,strategy,flops");
    assert_eq!(lines.len(), 1 + 3 * 20 + 1);
    assert!(lines.last().unwrap().starts_with("8,break-even,"));
    assert!(report.storage_text().contains("2457600"));
}

/// What the cost model says a record holds is what the store writes.
#[test]
fn storage_accounting_matches_store_payload() {
    let config = EncoderConfig::new(3, 20, 4);
    for stage in [PoolingStage::RawLayers, PoolingStage::LayerPooled] {
        for mode in [QuantMode::F32, QuantMode::F16, QuantMode::U8, QuantMode::Bit1] {
            let tokens = 7;
            let shape = match stage {
                PoolingStage::RawLayers => vec![3, tokens, 20],
                PoolingStage::LayerPooled => vec![tokens, 20],
            };
            let x = Tensor::full(shape, 0.25);
            let scheme = mode.calibrate(x.data()).unwrap();
            let q = quantize(&x, &scheme).unwrap();
            assert_eq!(q.payload().len() as u64, payload_bytes(stage, &config, mode, tokens));
            if mode != QuantMode::Bit1 {
                assert_eq!(
                    q.payload().len() as u64 * 8,
                    storage_per_token(stage, &config, mode) * tokens as u64
                );
            }
            let rec = FeatureRecord::new("doc", 0, stage, q).unwrap();
            let mut bytes = Vec::new();
            write_features(&mut bytes, &rec).unwrap();
            assert!(bytes.len() as u64 > payload_bytes(stage, &config, mode, tokens));
        }
    }
}

proptest! {
    #[test]
    fn flops_linear_in_layers_and_quadratic_in_width(l in 1usize..30, d in 1usize..300, n in 1usize..600) {
        let base = encoder_flops(&EncoderConfig::new(l, d, 1), n);
        prop_assert_eq!(encoder_flops(&EncoderConfig::new(2 * l, d, 1), n), 2 * base);
        // 24·n·d² is quadratic, 4·n²·d linear in d
        let wide = encoder_flops(&EncoderConfig::new(l, 2 * d, 1), n);
        let (l, d, n) = (l as u64, d as u64, n as u64);
        prop_assert_eq!(wide, 4 * l * 24 * n * d * d + 2 * l * 4 * n * n * d);
    }

    #[test]
    fn break_even_is_first_strict_crossing(ratio in 1.5f64..20.0, head in 0.0f64..0.05) {
        prop_assume!(head < 1.0 / ratio);
        let k = break_even_from_flops(ratio, 1.0, head, 10_000).unwrap();
        let shared = |k: usize| ratio + k as f64 * head * ratio;
        prop_assert!(shared(k) < k as f64);
        prop_assert!(k == 1 || shared(k - 1) >= (k - 1) as f64);
    }
}
