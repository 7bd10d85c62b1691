use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use hlmg::dataset::{self, build_dataset, Dataset, Sample};
use hlmg::graph::Task;
use hlmg::interpret::{self, Method};
use hlmg::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use hlmg::train::{self, evaluate, model_grad_check, Precision};
use hlmg_tensor::GradCheckConfig;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let json = serde_json::to_string_pretty(value).expect("report serializes");
    std::fs::write(path, json + "\n").map_err(|e| CliError::from_io(path, e))
}

fn dataset_for(rc: &RunConfig) -> Result<Dataset, CliError> {
    if let Some(path) = &rc.data {
        let d = dataset::load(path)?;
        if let Some(t) = rc.task.filter(|t| *t != d.spec.task) {
            return Err(CliError::Mismatch(format!(
                "--task {t} but {} holds {}",
                path.display(),
                d.spec.task
            )));
        }
        return Ok(d);
    }
    let spec = rc
        .spec
        .as_ref()
        .ok_or_else(|| CliError::Usage("either --task or --data is required".into()))?;
    Ok(build_dataset(spec, &rc.gen, rc.seed)?)
}

fn checkpoint_path(rc: &RunConfig) -> Result<&PathBuf, CliError> {
    rc.checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Usage("--checkpoint is required".into()))
}

/// Loads the checkpoint and checks it against the dataset and any model
/// settings given explicitly for this run.
fn model_for(rc: &mut RunConfig, d: &Dataset) -> Result<Model<f32>, CliError> {
    let path = checkpoint_path(rc)?.clone();
    let ck = load_checkpoint(&path, None)?;
    let cfg = &ck.model.config;
    if let Some(v) = &ck.vocab {
        if v != &d.vocab {
            return Err(CliError::Mismatch(format!(
                "{} was trained with a different vocabulary than the dataset",
                path.display()
            )));
        }
    }
    if cfg.num_classes != d.spec.num_classes {
        return Err(CliError::Mismatch(format!(
            "{} has {} classes, the dataset has {}",
            path.display(),
            cfg.num_classes,
            d.spec.num_classes
        )));
    }
    let want = &rc.model;
    let checks: [(&str, bool); 7] = [
        ("dim", want.dim == cfg.dim),
        ("heads", want.heads == cfg.heads),
        ("local_layers", want.local_layers == cfg.local_layers),
        ("global_layers", want.global_layers == cfg.global_layers),
        ("hidden_dim", want.hidden_dim == cfg.hidden_dim),
        ("pooling", want.pooling == cfg.pooling),
        ("use_global_positional", want.use_global_positional == cfg.use_global_positional),
    ];
    if let Some((k, _)) = checks.iter().find(|(k, same)| !same && rc.is_explicit(k)) {
        return Err(CliError::Mismatch(format!(
            "`{k}` differs between the run config and {}",
            path.display()
        )));
    }
    rc.model = cfg.clone();
    Ok(ck.model)
}

fn cap<'a>(rc: &RunConfig, samples: Vec<&'a Sample>) -> Vec<&'a Sample> {
    let n = rc.max_samples.unwrap_or(samples.len()).min(samples.len());
    samples.into_iter().take(n).collect()
}

pub fn gen(rc: RunConfig) -> Result<(), CliError> {
    if rc.spec.is_none() {
        return Err(CliError::Usage("gen requires --task".into()));
    }
    let d = dataset_for(&rc)?;
    rc.write_provenance()?;
    let path = rc.out.join("dataset.jsonl");
    dataset::save(&d, &path)?;
    println!(
        "wrote {} samples ({} classes, vocabulary {}) to {}",
        d.samples.len(),
        d.spec.num_classes,
        d.vocab.len(),
        path.display()
    );
    Ok(())
}

pub fn train(mut rc: RunConfig) -> Result<(), CliError> {
    let d = dataset_for(&rc)?;
    rc.model.vocab_size = d.vocab.len();
    rc.model.num_classes = d.spec.num_classes;
    rc.model.validate()?;
    rc.write_provenance()?;
    let progress = |e: &train::EpochMetrics| {
        eprintln!(
            "epoch {} loss {:.4} val {:.4} alpha {:.3}",
            e.epoch, e.train_loss, e.val_accuracy, e.alpha
        );
    };
    let (model, report) = match rc.train.precision {
        Precision::F32 => train::train_with_progress::<f32>(&d, rc.model.clone(), &rc.train, progress)?,
        Precision::F64 => {
            let (m, r) = train::train_with_progress::<f64>(&d, rc.model.clone(), &rc.train, progress)?;
            (m.cast(), r)
        }
    };
    let ckpt = rc.out.join("model.ckpt");
    save_checkpoint(&model, Some(&d.vocab), &ckpt)?;
    report.write(&rc.out)?;
    println!(
        "best epoch {} val {:.4} test {} -> {}",
        report.best_epoch,
        report.best_val_accuracy,
        report
            .test_accuracy
            .map_or("n/a".to_string(), |a| format!("{a:.4}")),
        ckpt.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    task: Task,
    split: String,
    samples: usize,
    accuracy: f64,
}

pub fn eval(mut rc: RunConfig) -> Result<(), CliError> {
    let d = dataset_for(&rc)?;
    let model = model_for(&mut rc, &d)?;
    rc.write_provenance()?;
    let set = d.tokens(rc.split);
    let accuracy = evaluate(&set, &model)?;
    let report = EvalReport {
        task: d.spec.task,
        split: rc.split.to_string(),
        samples: set.len(),
        accuracy,
    };
    write_json(&rc.out.join("eval.json"), &report)?;
    println!("{} {} accuracy {accuracy:.4} over {} samples", report.task, report.split, set.len());
    Ok(())
}

pub fn robustness(mut rc: RunConfig) -> Result<(), CliError> {
    let d = dataset_for(&rc)?;
    let model = model_for(&mut rc, &d)?;
    rc.write_provenance()?;
    let r = train::robustness_eval(&d, &model, rc.permutations, rc.seed)?;
    write_json(&rc.out.join("robustness.json"), &r)?;
    println!(
        "baseline {:.4} mean drop {:.4} max drop {:.4} over {} relabelings",
        r.baseline, r.mean_drop, r.max_drop, rc.permutations
    );
    Ok(())
}

#[derive(Serialize)]
struct InterpretSummary {
    method: Method,
    samples: usize,
    mean_recall_at_2: f64,
    random_recall_at_2: f64,
    /// Correct predictions whose two ground-truth nodes both rank in the
    /// top two, over correct predictions with exactly two ground-truth nodes.
    top2_hit_rate: Option<f64>,
    fidelity_notes: Vec<String>,
}

pub fn interpret(mut rc: RunConfig) -> Result<(), CliError> {
    let d = dataset_for(&rc)?;
    let model = model_for(&mut rc, &d)?;
    rc.write_provenance()?;
    let samples = cap(&rc, d.split(rc.split));
    let mut curves = Vec::new();
    let (mut r2, mut base2, mut with_gt) = (0.0, 0.0, 0usize);
    let (mut hits, mut pairs) = (0usize, 0usize);
    for s in &samples {
        let Some(gt) = s.gt_nodes().filter(|g| !g.is_empty()) else {
            continue;
        };
        let result = interpret::explain(&s.tokens, &model, rc.method, rc.layer_policy, s.id as u64)?;
        let curve = interpret::recall_at_k(&result, gt)?;
        let n = curve.len();
        r2 += curve[1.min(n - 1)];
        base2 += (2.min(n) as f64 / n as f64).min(1.0);
        with_gt += 1;
        if gt.len() == 2 && model.predict(&s.tokens)? == s.label() {
            pairs += 1;
            let top: BTreeSet<usize> = result.top_k(2).iter().copied().collect();
            if &top == gt {
                hits += 1;
            }
        }
        curves.push((s.id, curve));
    }
    interpret::write_recall_csv(&curves, &rc.out.join("recall.csv"))?;

    let method = rc.method;
    let policy = rc.layer_policy;
    let fid = interpret::fidelity(
        &d,
        &samples,
        &model,
        |s| interpret::explain(&s.tokens, &model, method, policy, s.id as u64),
        &rc.fidelity,
    )?;
    interpret::write_fidelity_csv(&fid, &rc.out.join("fidelity.csv"))?;

    let tokens: Vec<_> = samples.iter().map(|s| &s.tokens).collect();
    let layers = interpret::layerwise_attention_curve(&tokens, &model)?;
    interpret::write_layer_csv(&layers, &rc.out.join("layers.csv"))?;

    let k = with_gt.max(1) as f64;
    let summary = InterpretSummary {
        method,
        samples: with_gt,
        mean_recall_at_2: r2 / k,
        random_recall_at_2: base2 / k,
        top2_hit_rate: (pairs > 0).then(|| hits as f64 / pairs as f64),
        fidelity_notes: fid.notes.clone(),
    };
    write_json(&rc.out.join("interpret.json"), &summary)?;
    println!(
        "{}: recall@2 {:.4} (random {:.4}) over {} samples",
        method.name(),
        summary.mean_recall_at_2,
        summary.random_recall_at_2,
        with_gt
    );
    Ok(())
}

pub fn bench(rc: RunConfig) -> Result<(), CliError> {
    rc.write_provenance()?;
    let rows = train::complexity_benchmark(&rc.model, &rc.bench_nodes, rc.tokens_per_node, rc.reps, rc.seed)?;
    train::write_benchmark_csv(&rows, &rc.out.join("bench.csv"))?;
    for r in &rows {
        println!(
            "nodes {:>5} local {:>9.3} ms full {:>10.3} ms",
            r.nodes, r.local_ms, r.full_ms
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct GradCheckSummary {
    samples: usize,
    max_rel_error: f64,
    tolerance: f64,
    passed: bool,
}

pub fn grad_check(mut rc: RunConfig) -> Result<(), CliError> {
    if rc.data.is_none() && rc.spec.is_none() {
        let mut spec = dataset::TaskSpec::desk(Task::EdgeExistence);
        spec.size = 40;
        rc.spec = Some(spec);
    }
    let d = dataset_for(&rc)?;
    rc.model = ModelConfig::tiny(d.vocab.len(), d.spec.num_classes);
    rc.write_provenance()?;
    let model: Model<f64> = Model::init(rc.model.clone(), rc.seed)?;
    let cfg = GradCheckConfig {
        tol: rc.tolerance,
        max_coords_per_tensor: rc.coords,
        seed: rc.seed,
        ..GradCheckConfig::default()
    };
    let mut worst = 0.0f64;
    let count = rc.grad_samples.min(d.samples.len());
    for s in d.samples.iter().take(count) {
        let r = model_grad_check(&model, &s.tokens, &cfg)?;
        worst = worst.max(r.max_rel_error);
    }
    let summary = GradCheckSummary {
        samples: count,
        max_rel_error: worst,
        tolerance: rc.tolerance,
        passed: worst < rc.tolerance,
    };
    write_json(&rc.out.join("grad_check.json"), &summary)?;
    println!(
        "{} max relative error {worst:.3e} over {count} samples",
        if summary.passed { "PASS" } else { "FAIL" }
    );
    if summary.passed {
        Ok(())
    } else {
        Err(CliError::Other(format!(
            "gradient check failed: {worst:.3e} >= {}",
            rc.tolerance
        )))
    }
}
