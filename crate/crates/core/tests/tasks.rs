//! Planted suites, text encoding and TSV ingestion.

use std::fs;

use amortenc::pooling::{LayerPooling, PoolingSpec, PositionFeatures, PositionPooling};
use amortenc::quant::{QuantOrder, QuantScheme};
use amortenc::tasks::{
    encode_example, generate_task_suite, load_dataset, plant_task_suite, Example, PlantedSuite,
    Schema, SuiteOptions, TaskKind, Vocab,
};
use amortenc::tensor::Tensor;
use amortenc::training::{train_head_on, FeatureSet, Prepared, TrainConfig};
use amortenc::Error;
use proptest::prelude::*;

fn suite(seed: u64) -> PlantedSuite {
    plant_task_suite(6, seed, &[1000; 6], SuiteOptions::default()).unwrap()
}

fn gold(suite: &PlantedSuite, examples: &[Example]) -> Vec<Prepared> {
    examples
        .iter()
        .map(|ex| {
            let f = suite.motif_indicators(ex);
            let x = Tensor::new(vec![1, f.len()], f).unwrap();
            Prepared::Positions(PositionFeatures::new(x).unwrap())
        })
        .collect()
}

/// A head on exact motif counts must be able to fit each planted rule; this
/// checks the labels are a learnable function of the motifs alone.
#[test]
fn heads_on_gold_motif_features_reach_95_percent() {
    for seed in [3, 8] {
        let s = suite(seed);
        for task in &s.tasks {
            let features = FeatureSet {
                train: gold(&s, &task.train),
                train_labels: task.train.iter().map(|e| e.label).collect(),
                dev: gold(&s, &task.dev),
                dev_labels: task.dev.iter().map(|e| e.label).collect(),
                num_classes: task.num_classes,
                scheme: QuantScheme::F32,
                order: QuantOrder::AfterLayerPooling,
            };
            let spec = PoolingSpec::new(LayerPooling::Last, PositionPooling::Cls);
            let cfg = TrainConfig {
                steps: 1500,
                learning_rate: 1e-2,
                seed,
                ..TrainConfig::default()
            };
            let acc = train_head_on(&features, &spec, &cfg).unwrap().dev_accuracy;
            assert!(acc >= 0.95, "seed {seed} {}: gold accuracy {acc}", task.name);
        }
    }
}

#[test]
fn majority_class_at_most_65_percent() {
    for seed in 0..4 {
        for t in suite(seed).tasks {
            assert!(t.majority_rate() <= 0.65, "{} {}", t.name, t.majority_rate());
            let dev_major = (0..t.num_classes)
                .map(|c| t.dev.iter().filter(|e| e.label == c).count())
                .max()
                .unwrap() as f64
                / t.dev.len() as f64;
            assert!(dev_major <= 0.75, "{} dev {dev_major}", t.name);
        }
    }
}

#[test]
fn suite_shape() {
    let s = suite(1);
    assert!(s.tasks.iter().any(|t| t.kind == TaskKind::Pair));
    assert!(s.shared_motif_fractions().iter().all(|&f| f >= 0.5));
    for (t, r) in s.tasks.iter().zip(&s.rules) {
        t.validate().unwrap();
        assert_eq!(t.train.len(), 1000);
        assert_eq!(t.dev.len(), 200);
        for ex in t.train.iter().chain(&t.dev) {
            assert_eq!(ex.b.is_some(), t.kind == TaskKind::Pair);
            assert_eq!(r.label(&s.motifs, ex), ex.label);
        }
    }
    let names: Vec<_> = s.tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names[0], "task00-motif-presence");
}

#[test]
fn generation_errors() {
    assert!(matches!(generate_task_suite(3, 0, &[10, 0, 10]), Err(Error::Param(_))));
    assert!(generate_task_suite(1, 0, &[10]).is_err());
    assert!(generate_task_suite(3, 0, &[10, 10]).is_err());
}

#[test]
fn encode_example_layout() {
    let vocab = Vocab::build(["z a b c"], 64);
    assert_eq!((vocab.id("a"), vocab.id("b"), vocab.id("c")), (5, 6, 7));
    assert_eq!(encode_example("a b", Some("c"), &vocab, 16).unwrap().ids(), &[0, 5, 6, 1, 7]);
    assert_eq!(encode_example("a", None, &vocab, 16).unwrap().ids(), &[0, 5]);
    assert_eq!(vocab.id("never-seen"), 3);
    assert!(encode_example("", None, &vocab, 16).is_err());
    assert!(encode_example("a", Some("  "), &vocab, 16).is_err());
    // longest segment loses its tail first
    let seq = encode_example("a b c a b c", Some("c b"), &vocab, 7).unwrap();
    assert_eq!(seq.ids(), &[0, 5, 6, 7, 1, 7, 6]);
}

#[test]
fn tsv_ingestion() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    let vocab = Vocab::build(["a b c d"], 32);
    fs::write(p("s.train"), "pos\ta b\nneg\tc\npos\td a\n").unwrap();
    fs::write(p("s.dev"), "neg\tb\n").unwrap();
    let t = load_dataset(&p("s.train"), &p("s.dev"), Schema::Auto, &vocab).unwrap();
    assert_eq!((t.kind, t.num_classes), (TaskKind::Single, 2));
    assert_eq!(t.label_names, ["neg", "pos"]);
    assert_eq!(t.train[0], Example::single(vec![4, 5], 1));

    fs::write(p("p.train"), "1\ta\tb\n0\tc\td\n").unwrap();
    fs::write(p("p.dev"), "0\ta\tc\n").unwrap();
    let t = load_dataset(&p("p.train"), &p("p.dev"), Schema::Auto, &vocab).unwrap();
    assert_eq!(t.kind, TaskKind::Pair);
    assert_eq!(t.dev[0], Example::pair(vec![4], vec![6], 0));

    fs::write(p("one.train"), "x\ta\nx\tb\n").unwrap();
    let err = load_dataset(&p("one.train"), &p("s.dev"), Schema::Auto, &vocab).unwrap_err();
    assert!(matches!(err, Error::Ingest { .. }), "{err}");

    fs::write(p("ragged.train"), "1\ta\n0\tb\tc\n").unwrap();
    let err = load_dataset(&p("ragged.train"), &p("s.dev"), Schema::Auto, &vocab).unwrap_err();
    assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");

    fs::write(p("unk.dev"), "pos\ta\nmaybe\tb\n").unwrap();
    let err = load_dataset(&p("s.train"), &p("unk.dev"), Schema::Auto, &vocab).unwrap_err();
    assert!(matches!(err, Error::Ingest { line: 2, .. }), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let a = generate_task_suite(3, seed, &[60, 40, 50]).unwrap();
        let b = generate_task_suite(3, seed, &[60, 40, 50]).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn encoded_pairs_fit_max_positions(
        a in proptest::collection::vec(4u32..30, 1..20),
        b in proptest::collection::vec(4u32..30, 1..20),
        max in 4usize..24,
    ) {
        let seq = amortenc::tasks::encode_ids(&a, Some(&b), max).unwrap();
        prop_assert_eq!(seq.len(), (a.len() + b.len() + 2).min(max));
        prop_assert_eq!(seq.ids().iter().filter(|&&t| t == 1).count(), 1);
    }
}
