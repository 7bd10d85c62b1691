//! AdamW training, accuracy evaluation and the robustness, embedding and
//! complexity analyses built on trained models.

mod analysis;
mod optim;

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use hlmg_tensor::{grad_check, GradCheckConfig, GradCheckReport, Scalar, Tape, TensorError, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, DatasetError, Preset, Split};
use crate::model::{Model, ModelConfig, ModelError};
use crate::text::TokenizedSample;

pub use analysis::{
    complexity_benchmark, embedding_similarity_analysis, robustness_eval, robustness_eval_with,
    write_benchmark_csv, BenchRow, RobustnessReport, SimilarityGroup, SimilarityTable,
};
pub use optim::AdamW;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("loss became non-finite at step {step}; last finite step was {last_finite:?}")]
    Diverged {
        step: usize,
        last_finite: Option<usize>,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(format!("unknown precision `{s}` (expected f32 or f64)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Decay the learning rate linearly to zero after warmup.
    pub linear_decay: bool,
}

impl TrainConfig {
    /// Settings for small randomly initialized models.
    pub fn desk() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            epochs: 10,
            batch_size: 16,
            seed: 0,
            precision: Precision::F32,
            clip_norm: Some(1.0),
            warmup_steps: 100,
            linear_decay: true,
        }
    }

    /// Published fine-tuning settings.
    pub fn paper() -> Self {
        Self {
            lr: 5e-6,
            weight_decay: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            epochs: 5,
            batch_size: 16,
            seed: 0,
            precision: Precision::F32,
            clip_norm: Some(1.0),
            warmup_steps: 0,
            linear_decay: false,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::Paper => Self::paper(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr must be finite and non-negative");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.weight_decay < 0.0 || self.eps <= 0.0 {
            return bad("weight_decay must be non-negative and eps positive");
        }
        Ok(())
    }

    /// Learning rate at optimizer step `step` (0-based) of `total`.
    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        let warm = if self.warmup_steps > 0 && step < self.warmup_steps {
            (step + 1) as f64 / self.warmup_steps as f64
        } else {
            1.0
        };
        let decay = if self.linear_decay && total > self.warmup_steps {
            let t = step.saturating_sub(self.warmup_steps) as f64
                / (total - self.warmup_steps) as f64;
            (1.0 - t).max(0.0)
        } else {
            1.0
        };
        self.lr * warm * decay
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub epochs: Vec<EpochMetrics>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
    pub steps: usize,
}

impl MetricsReport {
    /// Rows `epoch,split,metric,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,split,metric,value\n");
        for e in &self.epochs {
            let _ = writeln!(out, "{},train,loss,{}", e.epoch, e.train_loss);
            let _ = writeln!(out, "{},val,accuracy,{}", e.epoch, e.val_accuracy);
            let _ = writeln!(out, "{},train,alpha,{}", e.epoch, e.alpha);
        }
        if let Some(t) = self.test_accuracy {
            let _ = writeln!(out, "{},test,accuracy,{t}", self.best_epoch);
        }
        out
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("metrics.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| io_err(&csv, e))?;
        let json = dir.join("metrics.json");
        let text = serde_json::to_string_pretty(self).expect("metrics serialize");
        std::fs::write(&json, text).map_err(|e| io_err(&json, e))
    }
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    x ^= x >> 31;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^ (x >> 29)
}

/// Loss of one sample and the gradient of every parameter.
pub fn sample_gradients<T: Scalar>(
    model: &Model<T>,
    sample: &TokenizedSample,
    train: bool,
    seed: u64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut tape = Tape::new();
    let vars = model.register(&mut tape);
    let f = crate::model::forward(&model.config, model.layout(), &mut tape, &vars, sample, train, seed)?;
    let loss = tape.cross_entropy(f.logits, &[sample.label])?;
    let value = tape.value(loss)[0].to_f64().unwrap_or(f64::NAN);
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(&model.params)
        .map(|(v, p)| {
            tape.grad(*v)
                .map(<[T]>::to_vec)
                .unwrap_or_else(|| vec![T::zero(); p.len()])
        })
        .collect();
    Ok((value, grads))
}

/// Central finite differences against the analytic gradient of one
/// sample's cross-entropy loss, dropout off.
pub fn model_grad_check(
    model: &Model<f64>,
    sample: &TokenizedSample,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let f = |tape: &mut Tape<'_, f64>, vars: &[Var]| -> hlmg_tensor::Result<Var> {
        let out = crate::model::forward(&model.config, model.layout(), tape, vars, sample, false, 0)
            .map_err(|e| match e {
                ModelError::Tensor(t) => t,
                other => TensorError::InvalidArgument {
                    op: "forward",
                    msg: other.to_string(),
                },
            })?;
        tape.cross_entropy(out.logits, &[sample.label])
    };
    Ok(grad_check(&model.params, f, cfg)?)
}

/// Mean loss and gradients over a batch.
pub fn batch_gradients<T: Scalar>(
    model: &Model<T>,
    batch: &[&TokenizedSample],
    seed: u64,
) -> Result<(f64, Vec<Vec<T>>)> {
    let mut total: Vec<Vec<T>> = model.params.iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut loss = 0.0;
    let inv = T::one() / T::from_usize(batch.len()).expect("usize fits");
    for (i, s) in batch.iter().enumerate() {
        let (l, g) = sample_gradients(model, s, true, mix(seed, i as u64, 0))?;
        loss += l;
        for (acc, gi) in total.iter_mut().zip(g) {
            for (a, x) in acc.iter_mut().zip(gi) {
                *a = *a + x * inv;
            }
        }
    }
    Ok((loss / batch.len() as f64, total))
}

/// Fraction of samples whose eval-mode prediction equals the label.
pub fn evaluate<T: Scalar>(samples: &[&TokenizedSample], model: &Model<T>) -> Result<f64> {
    if samples.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut correct = 0;
    for s in samples {
        if model.predict(s)? == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Trains `model` on `train_set`, keeping the parameters with the best
/// validation accuracy (earliest epoch on ties).
pub fn train_model<T: Scalar>(
    mut model: Model<T>,
    train_set: &[&TokenizedSample],
    val_set: &[&TokenizedSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model<T>, MetricsReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let start = Instant::now();
    let mut opt = AdamW::new(cfg, &model.params);
    let steps_per_epoch = train_set.len().div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.epochs;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, usize, Vec<hlmg_tensor::Tensor<T>>)> = None;
    let mut report = MetricsReport::default();
    let mut step = 0;
    let mut last_finite = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64, 1));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&TokenizedSample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, mix(cfg.seed, step as u64, 2))?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, last_finite });
            }
            last_finite = Some(step);
            loss_sum += loss * batch.len() as f64;
            opt.step(&mut model.params, grads, cfg.lr_at(step, total_steps));
            step += 1;
        }
        let val_accuracy = evaluate(val_set, &model)?;
        let m = EpochMetrics {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_accuracy,
            alpha: model.alpha(),
        };
        on_epoch(&m);
        report.epochs.push(m);
        if best.as_ref().is_none_or(|b| val_accuracy > b.0) {
            best = Some((val_accuracy, epoch, model.params.clone()));
        }
    }
    if let Some((acc, epoch, params)) = best {
        model.params = params;
        report.best_epoch = epoch;
        report.best_val_accuracy = acc;
    }
    report.steps = step;
    report.wall_seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

/// Builds a model from `model_cfg`, trains it on the dataset's train split
/// with validation-based selection, and reports test accuracy.
pub fn train<T: Scalar>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
) -> Result<(Model<T>, MetricsReport)> {
    train_with_progress(dataset, model_cfg, cfg, |_| {})
}

pub fn train_with_progress<T: Scalar>(
    dataset: &Dataset,
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics),
) -> Result<(Model<T>, MetricsReport)> {
    if model_cfg.num_classes < dataset.spec.num_classes {
        return Err(TrainError::Config(format!(
            "model has {} classes but the task needs {}",
            model_cfg.num_classes, dataset.spec.num_classes
        )));
    }
    let model = Model::init(model_cfg, mix(cfg.seed, 0, 3))?;
    let train_set = dataset.tokens(Split::Train);
    let val_set = dataset.tokens(Split::Val);
    let (model, mut report) = train_model(model, &train_set, &val_set, cfg, on_epoch)?;
    let test_set = dataset.tokens(Split::Test);
    if !test_set.is_empty() {
        report.test_accuracy = Some(evaluate(&test_set, &model)?);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::{Owner, Span, SpanKind};

    fn toy(label: usize) -> TokenizedSample {
        TokenizedSample {
            ids: vec![2, 3, 4, 5, 6],
            spans: vec![
                Span {
                    start: 0,
                    end: 3,
                    owner: Owner::Node(0),
                    kind: SpanKind::Structure,
                },
                Span {
                    start: 3,
                    end: 5,
                    owner: Owner::Query,
                    kind: SpanKind::Query,
                },
            ],
            label,
            gt_nodes: None,
        }
    }

    fn no_schedule() -> TrainConfig {
        TrainConfig {
            warmup_steps: 0,
            linear_decay: false,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn one_step_lowers_the_loss() {
        let model: Model<f64> = Model::init(ModelConfig::tiny(10, 3), 1).unwrap();
        let s = toy(2);
        let (before, grads) = sample_gradients(&model, &s, false, 0).unwrap();
        let cfg = TrainConfig {
            lr: 1e-3,
            ..no_schedule()
        };
        let mut opt = AdamW::new(&cfg, &model.params);
        let mut after_model = model.clone();
        opt.step(&mut after_model.params, grads, cfg.lr);
        let (after, _) = sample_gradients(&after_model, &s, false, 0).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(10, 2), 1).unwrap();
        let data = [toy(0), toy(1)];
        let set: Vec<&TokenizedSample> = data.iter().collect();
        let cfg = TrainConfig {
            lr: 0.0,
            epochs: 2,
            ..no_schedule()
        };
        let (trained, _) = train_model(model.clone(), &set, &set, &cfg, |_| {}).unwrap();
        assert_eq!(trained.params, model.params);
    }

    #[test]
    fn evaluate_counts_and_rejects_empty() {
        let model: Model<f32> = Model::init(ModelConfig::tiny(10, 2), 1).unwrap();
        let pred = model.predict(&toy(0)).unwrap();
        let data = [toy(pred), toy(1 - pred)];
        let set: Vec<&TokenizedSample> = data.iter().collect();
        assert_eq!(evaluate(&set, &model).unwrap(), 0.5);
        assert!(matches!(evaluate(&[], &model), Err(TrainError::EmptySplit(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let data = [toy(0), toy(1), toy(1)];
        let set: Vec<&TokenizedSample> = data.iter().collect();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            ..TrainConfig::desk()
        };
        let run = || {
            let m: Model<f32> = Model::init(ModelConfig::tiny(10, 2), 3).unwrap();
            let (m, mut r) = train_model(m, &set, &set, &cfg, |_| {}).unwrap();
            r.wall_seconds = 0.0;
            (m, r)
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn schedule_warms_up_and_decays() {
        let cfg = TrainConfig {
            lr: 1.0,
            warmup_steps: 4,
            linear_decay: true,
            ..TrainConfig::desk()
        };
        assert_eq!(cfg.lr_at(0, 14), 0.25);
        assert_eq!(cfg.lr_at(4, 14), 1.0);
        assert_eq!(cfg.lr_at(9, 14), 0.5);
    }
}
