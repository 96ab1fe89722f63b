use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::*;
use crate::cost::{CostReport, CostScenario};
use crate::encoder::{init_model, EncoderModel, LayerFeatures};
use crate::pooling::{pool_layers, LayerChoice, LayerPooling};
use crate::quant::DEFAULT_CALIBRATION_VECTORS;
use crate::rng;
use crate::store::{FeatureRecord, FeatureStore};
use crate::tasks::{load_suite, plant_task_suite, write_suite, SuiteOptions, TaskDataset, Vocab};
use crate::training::{
    calibrate_features, evaluate, extract_layers, leave_one_task_out, multitask_pretrain,
    prepare_features, read_task_head, train_head, train_head_on, write_task_head, FeatureSet,
    HoldOut, LotoConfig, LotoReport, Prepared,
};

pub(super) fn dispatch(command: Command, argv: &[String]) -> Result<()> {
    match command {
        Command::GenTasks(a) => gen_tasks(a, argv),
        Command::PretrainMt(a) => pretrain(a, argv),
        Command::Extract(a) => extract(a, argv),
        Command::TrainHead(a) => train_head_cmd(a, argv),
        Command::Eval(a) => eval(a, argv),
        Command::Loto(a) => loto(a, argv),
        Command::CostReport(a) => cost_report(a, argv),
    }
}

fn manifest(
    command: &str,
    argv: &[String],
    config: impl Serialize,
    seed: Option<u64>,
    inputs: &[&Path],
    outputs: &[&str],
) -> Result<RunManifest> {
    Ok(RunManifest {
        command: command.into(),
        argv: argv.to_vec(),
        config: serde_json::to_value(config).map_err(|e| Error::Param(e.to_string()))?,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: outputs.iter().map(|s| s.to_string()).collect(),
        version: version_string(),
    })
}

fn load_encoder(path: &Path) -> Result<EncoderModel> {
    let file = File::open(path)
        .map_err(|e| Error::Input(format!("cannot open encoder {}: {e}", path.display())))?;
    EncoderModel::read_checkpoint(BufReader::new(file))
}

fn load_tasks(suite: &Path, vocab: usize) -> Result<Vec<TaskDataset>> {
    Ok(load_suite(suite, &Vocab::synthetic(vocab))?.1)
}

fn find_task<'a>(tasks: &'a [TaskDataset], name: &str) -> Result<&'a TaskDataset> {
    tasks
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Input(format!("no task named {name:?} in the suite")))
}

fn gen_tasks(a: GenTasksArgs, argv: &[String]) -> Result<()> {
    let options = SuiteOptions {
        vocab_size: a.vocab,
        dev_size: a.dev_size,
        ..SuiteOptions::default()
    };
    let suite = plant_task_suite(a.num, a.seed, &a.sizes, options)?;
    write_suite(&a.out, &suite)?;
    let mut outputs: Vec<String> = vec![crate::tasks::SUITE_MANIFEST.into()];
    for t in &suite.tasks {
        outputs.push(format!("{}.train.tsv", t.name));
        outputs.push(format!("{}.dev.tsv", t.name));
    }
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    write_manifest(&a.out, &manifest("gen-tasks", argv, &a, Some(a.seed), &[], &outputs)?)?;
    for t in &suite.tasks {
        println!(
            "{}\t{}\t{} classes\ttrain {}\tdev {}",
            t.name,
            t.family,
            t.num_classes,
            t.train.len(),
            t.dev.len()
        );
    }
    Ok(())
}

fn pretrain(a: PretrainArgs, argv: &[String]) -> Result<()> {
    let config = a.encoder.config(a.seed);
    let tasks = load_tasks(&a.suite, config.vocab_size)?;
    for h in &a.hold_out {
        find_task(&tasks, h)?;
    }
    let chosen: Vec<&TaskDataset> = tasks.iter().filter(|t| !a.hold_out.contains(&t.name)).collect();
    let model = init_model(config)?;
    let out = multitask_pretrain(model, &chosen, &a.pooling, &a.train.config(a.seed))?;

    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("encoder.amtm"))?);
    out.model.write_checkpoint(&mut w)?;
    w.flush()?;
    let mut losses = BufWriter::new(File::create(a.out.join("losses.csv"))?);
    writeln!(losses, "step,task,loss")?;
    for (s, row) in out.losses.iter().enumerate() {
        for (t, l) in chosen.iter().zip(row) {
            writeln!(losses, "{},{},{l:.6}", s + 1, t.name)?;
        }
    }
    losses.flush()?;
    let mut batches = BufWriter::new(File::create(a.out.join("batches.csv"))?);
    writeln!(batches, "task,weight,batches")?;
    for (t, w) in chosen.iter().zip(&out.weights) {
        writeln!(batches, "{},{w:.9},{}", t.name, out.log.batches_for(&t.name))?;
    }
    batches.flush()?;
    write_manifest(
        &a.out,
        &manifest(
            "pretrain-mt",
            argv,
            &a,
            Some(a.seed),
            &[&a.suite],
            &["encoder.amtm", "losses.csv", "batches.csv"],
        )?,
    )?;
    println!(
        "pretrained on {} tasks; encoder fingerprint {:016x}",
        chosen.len(),
        out.model.fingerprint()
    );
    Ok(())
}

fn doc_id(task: &str, split: &str, i: usize) -> String {
    format!("{task}.{split}.{i}")
}

fn fixed_layer_pooling(choice: &PoolingChoice, num_layers: usize) -> Result<LayerPooling> {
    match choice.layer {
        LayerChoice::LearnedComb => Err(Error::Config(
            "learned-comb weights are per task; store raw layers instead".into(),
        )),
        LayerChoice::Last => Ok(LayerPooling::Last),
        LayerChoice::Avg(m) => Ok(LayerPooling::Avg {
            m: m.unwrap_or(16.min(num_layers)),
        }),
    }
}

#[derive(Serialize, serde::Deserialize)]
struct StoreInfo {
    stage: String,
    layer_pooling: Option<String>,
    quant: String,
    fingerprint: String,
    // shape of the encoder that wrote the store, so heads can be rebuilt without it
    num_layers: usize,
    num_heads: usize,
    vocab_size: usize,
}

fn extract(a: ExtractArgs, argv: &[String]) -> Result<()> {
    let model = load_encoder(&a.encoder)?;
    let c = *model.config();
    let tasks = load_tasks(&a.suite, c.vocab_size)?;
    let selected: Vec<&TaskDataset> = if a.tasks.is_empty() {
        tasks.iter().collect()
    } else {
        a.tasks
            .iter()
            .map(|n| find_task(&tasks, n))
            .collect::<Result<_>>()?
    };
    let stage: PoolingStage = a.stage.into();
    let layer = match stage {
        PoolingStage::LayerPooled => Some(fixed_layer_pooling(&a.pooling, c.num_layers)?),
        PoolingStage::RawLayers => None,
    };
    let store = FeatureStore::create(&a.out)?;
    let fp = model.fingerprint();
    let mut count = 0;
    for task in &selected {
        let train = extract_layers(&model, &task.train)?;
        let dev = extract_layers(&model, &task.dev)?;
        let (cal_layer, order) = match &layer {
            Some(l) => (l.clone(), QuantOrder::AfterLayerPooling),
            None => (LayerPooling::Last, QuantOrder::BeforeLayerPooling),
        };
        let scheme = calibrate_features(a.quant, &train, &cal_layer, order, DEFAULT_CALIBRATION_VECTORS)?;
        for (split, feats) in [("train", &train), ("dev", &dev)] {
            for (i, f) in feats.iter().enumerate() {
                let id = doc_id(&task.name, split, i);
                let record = match &layer {
                    Some(l) => FeatureRecord::from_positions(id, fp, &pool_layers(f, l)?, &scheme)?,
                    None => FeatureRecord::from_layers(id, fp, f, &scheme)?,
                };
                store.write(&record)?;
                count += 1;
            }
        }
    }
    let info = StoreInfo {
        stage: format!("{:?}", a.stage).to_lowercase(),
        layer_pooling: layer.as_ref().map(|_| a.pooling.to_string()),
        quant: a.quant.to_string(),
        fingerprint: format!("{fp:016x}"),
        num_layers: c.num_layers,
        num_heads: c.num_heads,
        vocab_size: c.vocab_size,
    };
    let mut m = manifest(
        "extract",
        argv,
        &a,
        None,
        &[&a.suite, &a.encoder],
        &["*.amtf"],
    )?;
    m.config["store"] = serde_json::to_value(&info).map_err(|e| Error::Param(e.to_string()))?;
    write_manifest(&a.out, &m)?;
    println!("wrote {count} feature records to {}", a.out.display());
    Ok(())
}

fn read_store_info(dir: &Path) -> Result<StoreInfo> {
    let text = fs::read_to_string(dir.join(MANIFEST))
        .map_err(|e| Error::Input(format!("feature store has no readable manifest: {e}")))?;
    let m: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Input(e.to_string()))?;
    serde_json::from_value(m.config["store"].clone())
        .map_err(|e| Error::Input(format!("feature store manifest: {e}")))
}

fn store_features(a: &TrainHeadArgs, dir: &Path, task: &TaskDataset) -> Result<FeatureSet> {
    let info = read_store_info(dir)?;
    let store = FeatureStore::open(dir)?;
    let expected = match &a.encoder {
        Some(p) => Some(load_encoder(p)?.fingerprint()),
        None => None,
    };
    let pooled = info.stage == "pooled";
    if pooled
        && info.layer_pooling.as_deref().map(|s| s.split(',').next()) != Some(Some(&*layer_tag(&a.pooling)))
    {
        return Err(Error::Config(format!(
            "store was layer-pooled with {:?}; requested {}",
            info.layer_pooling, a.pooling
        )));
    }
    let mut scheme = None;
    let mut load = |split: &str, n: usize| -> Result<Vec<Prepared>> {
        (0..n)
            .map(|i| {
                let r = store.read_checked(&doc_id(&task.name, split, i), expected)?;
                let s = *r.quantized().scheme();
                if *scheme.get_or_insert(s) != s {
                    return Err(Error::Input("mixed quantization schemes in store".into()));
                }
                Ok(if pooled {
                    Prepared::Positions(r.position_features()?)
                } else {
                    Prepared::Layers(r.layer_features()?)
                })
            })
            .collect()
    };
    let train = load("train", task.train.len())?;
    let dev = load("dev", task.dev.len())?;
    let scheme = scheme.expect("non-empty splits");
    let (train, dev, order) = if pooled {
        (train, dev, QuantOrder::AfterLayerPooling)
    } else {
        // Stored values are already quantized; pool fixed layer weights now.
        let spec = a.pooling.instantiate(1, 1, 1, 1, &mut rng::seeded(0));
        let unwrap = |v: Vec<Prepared>| -> Vec<LayerFeatures> {
            v.into_iter()
                .map(|p| match p {
                    Prepared::Layers(f) => f,
                    Prepared::Positions(_) => unreachable!("raw store"),
                })
                .collect()
        };
        let layer = match spec.layer {
            LayerPooling::Avg { .. } => LayerPooling::Avg {
                m: match a.pooling.layer {
                    LayerChoice::Avg(Some(m)) => m,
                    _ => 16,
                },
            },
            other => other,
        };
        let f32s = crate::quant::QuantScheme::F32;
        (
            prepare_features(unwrap(train), &layer, &f32s, QuantOrder::BeforeLayerPooling)?,
            prepare_features(unwrap(dev), &layer, &f32s, QuantOrder::BeforeLayerPooling)?,
            QuantOrder::BeforeLayerPooling,
        )
    };
    Ok(FeatureSet {
        train,
        train_labels: task.train.iter().map(|e| e.label).collect(),
        dev,
        dev_labels: task.dev.iter().map(|e| e.label).collect(),
        num_classes: task.num_classes,
        scheme,
        order,
    })
}

fn layer_tag(choice: &PoolingChoice) -> String {
    choice.to_string().split(',').next().unwrap_or_default().to_string()
}

fn train_head_cmd(a: TrainHeadArgs, argv: &[String]) -> Result<()> {
    let cfg = a.train.config(a.seed);
    let (trained, inputs) = if let Some(enc) = &a.from_encoder {
        let model = load_encoder(enc)?;
        let c = *model.config();
        let tasks = load_tasks(&a.suite, c.vocab_size)?;
        let task = find_task(&tasks, &a.task)?;
        let spec = a.pooling.instantiate(
            c.num_layers,
            c.num_layers,
            c.model_dim,
            c.num_heads,
            &mut rng::derive(a.seed, 0x504f_4f4c),
        );
        let t = train_head(&model, task, &spec, a.quant, a.order, &cfg)?;
        (t, vec![a.suite.clone(), enc.clone()])
    } else {
        let dir = a.from_store.clone().expect("clap enforces one source");
        let first = FeatureStore::open(&dir)?
            .doc_ids()?
            .into_iter()
            .next()
            .ok_or_else(|| Error::Input("feature store is empty".into()))?;
        let sample = FeatureStore::open(&dir)?.read(&first)?;
        let d = *sample.quantized().shape().last().expect("non-empty shape");
        let info = read_store_info(&dir)?;
        if let Some(p) = &a.encoder {
            let c = *load_encoder(p)?.config();
            if (c.num_layers, c.num_heads, c.model_dim) != (info.num_layers, info.num_heads, d) {
                return Err(Error::Input("encoder shape does not match the feature store".into()));
            }
        }
        let (layers, heads, vocab) = (info.num_layers, info.num_heads, info.vocab_size);
        let tasks = load_tasks(&a.suite, vocab)?;
        let task = find_task(&tasks, &a.task)?;
        let features = store_features(&a, &dir, task)?;
        let spec = a.pooling.instantiate(
            layers,
            layers,
            d,
            heads,
            &mut rng::derive(a.seed, 0x504f_4f4c),
        );
        let t = train_head_on(&features, &spec, &cfg)?;
        (t, vec![a.suite.clone(), dir])
    };
    fs::create_dir_all(&a.out)?;
    let accuracy = trained.dev_accuracy;
    let best_step = trained.best_step;
    let th = trained.into_task_head(a.task.clone());
    let mut w = BufWriter::new(File::create(a.out.join("head.amth"))?);
    write_task_head(&mut w, &th)?;
    w.flush()?;
    let result = serde_json::json!({
        "task": a.task,
        "dev_accuracy": accuracy,
        "best_step": best_step,
        "quant": th.scheme.mode().to_string(),
        "order": th.order.to_string(),
    });
    fs::write(a.out.join("result.json"), format!("{result:#}\n"))?;
    let inputs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    write_manifest(
        &a.out,
        &manifest("train-head", argv, &a, Some(a.seed), &inputs, &["head.amth", "result.json"])?,
    )?;
    println!("{}\tdev accuracy {accuracy:.4}", a.task);
    Ok(())
}

fn eval(a: EvalArgs, argv: &[String]) -> Result<()> {
    let model = load_encoder(&a.encoder)?;
    let tasks = load_tasks(&a.suite, model.config().vocab_size)?;
    let task = find_task(&tasks, &a.task)?;
    let file = File::open(&a.head)
        .map_err(|e| Error::Input(format!("cannot open head {}: {e}", a.head.display())))?;
    let th = read_task_head(BufReader::new(file))?;
    if th.head.num_classes() != task.num_classes {
        return Err(Error::Input(format!(
            "head has {} classes, task {} has {}",
            th.head.num_classes(),
            task.name,
            task.num_classes
        )));
    }
    let accuracy = evaluate(&th, &model, task)?;
    fs::create_dir_all(&a.out)?;
    let result = serde_json::json!({ "task": a.task, "accuracy": accuracy });
    fs::write(a.out.join("eval.json"), format!("{result:#}\n"))?;
    write_manifest(
        &a.out,
        &manifest("eval", argv, &a, None, &[&a.suite, &a.encoder, &a.head], &["eval.json"])?,
    )?;
    println!("{}\taccuracy {accuracy:.4}", a.task);
    Ok(())
}

fn loto(a: LotoArgs, argv: &[String]) -> Result<()> {
    let config = a.encoder.config(0);
    let tasks = load_tasks(&a.suite, config.vocab_size)?;
    let cfg = LotoConfig {
        encoder: config,
        pooling: a.pooling,
        quants: a.quant.clone(),
        order: a.order,
        pretrain: a.train.config(0),
        head: a.head.config(0),
        hold_out: if a.all_tasks {
            HoldOut::None
        } else if a.hold_out_family {
            HoldOut::Family
        } else {
            HoldOut::Task
        },
        random_encoder: a.random_encoder,
    };
    if a.seeds == 0 {
        return Err(Error::Config("--seeds must be at least 1".into()));
    }
    let mut report = LotoReport::default();
    for seed in 0..a.seeds {
        report.entries.extend(leave_one_task_out(&tasks, &cfg, seed)?.entries);
    }
    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("loto.csv"))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    write_manifest(
        &a.out,
        &manifest("loto", argv, &a, None, &[&a.suite], &["loto.csv"])?,
    )?;
    for q in &cfg.quants {
        if let Some(m) = report.mean_accuracy(*q) {
            println!("{q}\tmean held-out accuracy {m:.4}");
        }
    }
    Ok(())
}

fn cost_report(a: CostArgs, argv: &[String]) -> Result<()> {
    let enc = |v: &[usize]| EncoderConfig::new(v[0], v[1], v[2]);
    let (full, distilled) = (enc(&a.full), enc(&a.distilled));
    full.validate()?;
    distilled.validate()?;
    let scenario = CostScenario {
        full_config: full,
        distilled_config: distilled,
        head_cost_fraction: a.head_frac,
        seq_len: a.seq_len,
        num_tasks: a.max_k,
    };
    let report = CostReport::build(&scenario, a.ref_tokens)?;
    fs::create_dir_all(&a.out)?;
    let mut w = BufWriter::new(File::create(a.out.join("cost.csv"))?);
    report.write_csv(&mut w)?;
    w.flush()?;
    fs::write(a.out.join("storage.txt"), report.storage_text())?;
    write_manifest(
        &a.out,
        &manifest("cost-report", argv, &a, None, &[], &["cost.csv", "storage.txt"])?,
    )?;
    println!("flops ratio full/distilled: {:.3}", scenario.ratio());
    match report.break_even_k {
        Some(k) => println!("break-even: shared encoder cheaper from {k} tasks"),
        None => println!("break-even: none <= {}", a.max_k),
    }
    Ok(())
}
