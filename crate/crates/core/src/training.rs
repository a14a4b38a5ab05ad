//! Training loops for the three phases (ancestry pretraining, super-network
//! search, descendant fine-tuning) and evaluation.

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Module, Parameter, Tape};
use crate::dad::RoutingMode;
use crate::data::{Batch, Dataset, SplitKind};
use crate::error::{Error, Result};
use crate::optim::{optimizer_step, OptimizerConfig};
use crate::supernet::{RouteOptions, SuperAnsNet};
use crate::tensor::Tensor;
use crate::vit::VitModel;

/// Batch size used for evaluation passes; results do not depend on it.
const EVAL_BATCH: usize = 128;

/// Relative initial learning rates per dataset, following the order of
/// magnitude spread (5e-4 down to 1e-6) of the reference per-dataset table.
pub const REFERENCE_LR_PATTERN: [f32; 12] = [1.0, 0.002, 0.02, 0.02, 0.02, 1.0, 1.0, 0.02, 0.2, 0.02, 0.02, 0.02];

/// `lr0 * (1 - step / total_steps)^power`.
pub fn poly_lr(step: usize, total_steps: usize, lr0: f32, power: f32) -> Result<f32> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidConfig(format!(
            "poly schedule needs 0 <= step <= total_steps and total_steps >= 1, got step {step} of {total_steps}"
        )));
    }
    if !(lr0 > 0.0 && lr0.is_finite()) {
        return Err(Error::InvalidLearningRate(lr0));
    }
    if !(power >= 0.0 && power.is_finite()) {
        return Err(Error::InvalidConfig(format!("poly power must be >= 0, got {power}")));
    }
    let frac = 1.0 - step as f64 / total_steps as f64;
    Ok((lr0 as f64 * frac.powf(power as f64)) as f32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub poly_power: f32,
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    /// Per-dataset multipliers on `lr`, indexed by dataset id - 1 and cycled;
    /// empty means every dataset uses `lr`.
    pub lr_multipliers: Vec<f32>,
    /// Dataset ids in round-robin order; empty means ascending.
    pub dataset_order: Vec<usize>,
    /// Evaluate on the test split every this many epochs (0: only after the last).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            poly_power: 0.9,
            seed: 0,
            optimizer: OptimizerConfig::default(),
            lr_multipliers: Vec::new(),
            dataset_order: Vec::new(),
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// Batch size of the original large-scale runs, kept for reference.
    pub const REFERENCE_BATCH_SIZE: usize = 128;

    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            out.push(format!("lr must be a positive number, got {}", self.lr));
        }
        if self.batch_size == 0 {
            out.push("batch_size must be at least 1".into());
        }
        if !(self.poly_power >= 0.0 && self.poly_power.is_finite()) {
            out.push(format!("poly_power must be >= 0, got {}", self.poly_power));
        }
        if let Some(m) = self.lr_multipliers.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            out.push(format!("lr_multipliers entries must be positive, got {m}"));
        }
        if let Err(e) = self.optimizer.validate() {
            out.push(format!("optimizer: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidConfig(p.join("; ")))
        }
    }

    fn multiplier(&self, dataset_id: usize) -> f32 {
        if self.lr_multipliers.is_empty() {
            1.0
        } else {
            self.lr_multipliers[(dataset_id - 1) % self.lr_multipliers.len()]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    /// `None` for records aggregated over every dataset.
    pub dataset_id: Option<usize>,
    pub loss: f64,
    pub accuracy: f64,
    pub lr: f32,
    pub wall_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetAccuracy {
    pub dataset_id: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub records: Vec<EpochRecord>,
    pub final_accuracies: Vec<DatasetAccuracy>,
}

impl Metrics {
    pub fn train_losses(&self) -> Vec<f64> {
        self.records.iter().filter(|r| r.split == "train").map(|r| r.loss).collect()
    }

    /// Test accuracy after each evaluated epoch, as `(epoch, accuracy)`.
    pub fn test_curve(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter(|r| r.split == "test" && r.dataset_id.is_none())
            .map(|r| (r.epoch, r.accuracy))
            .collect()
    }

    pub fn mean_final_accuracy(&self) -> f64 {
        if self.final_accuracies.is_empty() {
            return 0.0;
        }
        self.final_accuracies.iter().map(|a| a.accuracy).sum::<f64>() / self.final_accuracies.len() as f64
    }

    /// Copy with wall-clock fields zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Metrics {
        let mut m = self.clone();
        for r in &mut m.records {
            r.wall_ms = 0;
        }
        m
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Index of the largest logit per row; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.last_dim();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Sum of per-sample losses and number of correct predictions.
struct Tally {
    loss_sum: f64,
    correct: usize,
    count: usize,
}

impl Tally {
    fn new() -> Self {
        Self {
            loss_sum: 0.0,
            correct: 0,
            count: 0,
        }
    }

    fn add(&mut self, loss: f32, logits: &Tensor, labels: &[usize]) {
        self.loss_sum += loss as f64 * labels.len() as f64;
        self.correct += argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count();
        self.count += labels.len();
    }

    fn loss(&self) -> f64 {
        self.loss_sum / self.count.max(1) as f64
    }

    fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count.max(1) as f64
    }
}

/// Only parameters that received a gradient this step are updated, so an
/// idle head or block keeps its optimizer state untouched.
fn step_touched<'a>(
    params: impl IntoIterator<Item = &'a mut Parameter>,
    grads: &Gradients,
    lr: f32,
    cfg: &OptimizerConfig,
) -> Result<()> {
    let mut touched = Vec::new();
    for p in params {
        if grads.param(p.id()).is_some() {
            p.accumulate(grads);
            touched.push(p);
        }
    }
    optimizer_step(touched, lr, cfg)
}

/// Round-robin interleaving: one batch from each dataset in turn.
fn interleave(datasets: &[&Dataset], order: &[usize], epoch: usize, batch_size: usize) -> Vec<Batch> {
    let mut queues: Vec<std::vec::IntoIter<Batch>> = order
        .iter()
        .map(|&id| datasets[id - 1].train_batches(epoch, batch_size).into_iter())
        .collect();
    let mut out = Vec::new();
    loop {
        let before = out.len();
        for q in &mut queues {
            out.extend(q.next());
        }
        if out.len() == before {
            return out;
        }
    }
}

fn resolve_order(cfg: &TrainConfig, m: usize) -> Result<Vec<usize>> {
    if cfg.dataset_order.is_empty() {
        return Ok((1..=m).collect());
    }
    let mut sorted = cfg.dataset_order.clone();
    sorted.sort_unstable();
    if sorted != (1..=m).collect::<Vec<_>>() {
        return Err(Error::InvalidConfig(format!(
            "dataset_order must be a permutation of 1..={m}, got {:?}",
            cfg.dataset_order
        )));
    }
    Ok(cfg.dataset_order.clone())
}

fn check_dataset_ids(datasets: &[Dataset]) -> Result<()> {
    for (i, d) in datasets.iter().enumerate() {
        if d.id as usize != i + 1 {
            return Err(Error::InvalidConfig(format!(
                "datasets must be given in id order 1..={}, position {} holds id {}",
                datasets.len(),
                i + 1,
                d.id
            )));
        }
    }
    Ok(())
}

fn elapsed_ms(start: Instant) -> u64 {
    start.elapsed().as_millis() as u64
}

/// Shared driver: runs `step` on every scheduled batch and `eval` at the
/// configured epochs.
fn run_schedule(
    datasets: &[&Dataset],
    cfg: &TrainConfig,
    mut step: impl FnMut(&Batch, f32) -> Result<(f32, Tensor)>,
    mut eval: impl FnMut() -> Result<Vec<(usize, f64, f64)>>,
) -> Result<Metrics> {
    cfg.validate()?;
    let order = resolve_order(cfg, datasets.len())?;
    let steps_per_epoch: usize = datasets.iter().map(|d| d.train.len().div_ceil(cfg.batch_size)).sum();
    let total = cfg.epochs * steps_per_epoch;
    let mut metrics = Metrics::default();
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut tally = Tally::new();
        let mut last_lr = 0.0;
        for batch in interleave(datasets, &order, epoch, cfg.batch_size) {
            let lr = poly_lr(global, total, cfg.lr * cfg.multiplier(batch.dataset_id), cfg.poly_power)?;
            let (loss, logits) = step(&batch, lr)?;
            tally.add(loss, &logits, &batch.labels);
            last_lr = lr;
            global += 1;
        }
        metrics.records.push(EpochRecord {
            epoch: epoch + 1,
            split: "train".into(),
            dataset_id: None,
            loss: tally.loss(),
            accuracy: tally.accuracy(),
            lr: last_lr,
            wall_ms: elapsed_ms(start),
        });
        let last = epoch + 1 == cfg.epochs;
        if last || (cfg.eval_every > 0 && (epoch + 1) % cfg.eval_every == 0) {
            let start = Instant::now();
            let results = eval()?;
            push_eval(&mut metrics, epoch + 1, last_lr, &results, start);
            if last {
                metrics.final_accuracies = final_accuracies(&results);
            }
        }
    }
    if cfg.epochs == 0 {
        metrics.final_accuracies = final_accuracies(&eval()?);
    }
    Ok(metrics)
}

fn push_eval(metrics: &mut Metrics, epoch: usize, lr: f32, results: &[(usize, f64, f64)], start: Instant) {
    let wall_ms = elapsed_ms(start);
    if results.len() > 1 {
        for &(id, loss, acc) in results {
            metrics.records.push(EpochRecord {
                epoch,
                split: "test".into(),
                dataset_id: Some(id),
                loss,
                accuracy: acc,
                lr,
                wall_ms,
            });
        }
    }
    let n = results.len().max(1) as f64;
    metrics.records.push(EpochRecord {
        epoch,
        split: "test".into(),
        dataset_id: None,
        loss: results.iter().map(|r| r.1).sum::<f64>() / n,
        accuracy: results.iter().map(|r| r.2).sum::<f64>() / n,
        lr,
        wall_ms,
    });
}

fn final_accuracies(results: &[(usize, f64, f64)]) -> Vec<DatasetAccuracy> {
    results
        .iter()
        .map(|&(dataset_id, _, accuracy)| DatasetAccuracy { dataset_id, accuracy })
        .collect()
}

fn check_head(net: &VitModel, ds: &Dataset) -> Result<()> {
    if net.head.num_classes() < ds.num_classes {
        return Err(Error::InvalidConfig(format!(
            "head has {} classes but dataset {} has {}",
            net.head.num_classes(),
            ds.id,
            ds.num_classes
        )));
    }
    if net.config.input.num_tokens() != ds.tokens || net.config.input.token_dim() != ds.input_dim {
        return Err(Error::InvalidConfig(format!(
            "model expects {}x{} inputs, dataset {} has {}x{}",
            net.config.input.num_tokens(),
            net.config.input.token_dim(),
            ds.id,
            ds.tokens,
            ds.input_dim
        )));
    }
    Ok(())
}

fn vit_step(net: &mut VitModel, batch: &Batch, lr: f32, opt: &OptimizerConfig) -> Result<(f32, Tensor)> {
    let mut tape = Tape::new();
    let logits = net.forward(&mut tape, &batch.inputs)?;
    let loss = tape.cross_entropy(logits, &batch.labels)?;
    let grads = tape.backward(loss)?;
    let out = (tape.value(loss).item(), tape.value(logits).clone());
    step_touched(net.parameters_mut(), &grads, lr, opt)?;
    Ok(out)
}

/// Test loss and accuracy of a plain network on one dataset.
pub fn evaluate_full(net: &VitModel, dataset: &Dataset) -> Result<(f64, f64)> {
    check_head(net, dataset)?;
    let mut tally = Tally::new();
    for batch in dataset.ordered_batches(SplitKind::Test, EVAL_BATCH) {
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &batch.inputs)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tally.add(tape.value(loss).item(), tape.value(logits), &batch.labels);
    }
    Ok((tally.loss(), tally.accuracy()))
}

/// Top-1 test accuracy.
pub fn evaluate(net: &VitModel, dataset: &Dataset) -> Result<f64> {
    Ok(evaluate_full(net, dataset)?.1)
}

/// Top-1 accuracy on the chosen split.
pub fn evaluate_split(net: &VitModel, dataset: &Dataset, kind: SplitKind) -> Result<f64> {
    check_head(net, dataset)?;
    let mut tally = Tally::new();
    for batch in dataset.ordered_batches(kind, EVAL_BATCH) {
        let mut tape = Tape::new();
        let logits = net.forward(&mut tape, &batch.inputs)?;
        tally.add(0.0, tape.value(logits), &batch.labels);
    }
    Ok(tally.accuracy())
}

/// Trains the ancestry network on the union of datasets, which share one
/// label space and one head.
pub fn pretrain_ans(net: &mut VitModel, datasets: &[Dataset], cfg: &TrainConfig) -> Result<Metrics> {
    if datasets.is_empty() {
        return Err(Error::Empty("datasets"));
    }
    check_dataset_ids(datasets)?;
    for ds in datasets {
        check_head(net, ds)?;
    }
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let opt = cfg.optimizer;
    let cell = std::cell::RefCell::new(net);
    run_schedule(
        &refs,
        cfg,
        |batch, lr| vit_step(&mut cell.borrow_mut(), batch, lr, &opt),
        || {
            let net = cell.borrow();
            datasets
                .iter()
                .map(|ds| evaluate_full(&net, ds).map(|(l, a)| (ds.id as usize, l, a)))
                .collect()
        },
    )
}

/// Fine-tunes every parameter of a descendant network on one dataset.
pub fn finetune_desnet(net: &mut VitModel, dataset: &Dataset, cfg: &TrainConfig) -> Result<Metrics> {
    if net.head.num_classes() != dataset.num_classes {
        return Err(Error::InvalidConfig(format!(
            "head has {} classes but dataset {} has {}",
            net.head.num_classes(),
            dataset.id,
            dataset.num_classes
        )));
    }
    check_head(net, dataset)?;
    net.set_trainable(true);
    // A single dataset is always scheduled under id 1.
    let mut single = dataset.clone();
    single.id = 1;
    let opt = cfg.optimizer;
    let cell = std::cell::RefCell::new(net);
    run_schedule(
        &[&single],
        &TrainConfig {
            lr_multipliers: Vec::new(),
            dataset_order: Vec::new(),
            ..cfg.clone()
        },
        |batch, lr| vit_step(&mut cell.borrow_mut(), batch, lr, &opt),
        || {
            let net = cell.borrow();
            evaluate_full(&net, dataset).map(|(l, a)| vec![(dataset.id as usize, l, a)])
        },
    )
}

/// Test loss and accuracy of the super-network on dataset `dataset.id`.
pub fn evaluate_supernet_full(net: &SuperAnsNet, dataset: &Dataset, mode: RoutingMode) -> Result<(f64, f64)> {
    let id = dataset.id as usize;
    let opts = RouteOptions::eval(mode);
    let mut tally = Tally::new();
    for batch in dataset.ordered_batches(SplitKind::Test, EVAL_BATCH) {
        let mut tape = Tape::new();
        let (logits, _) = net.forward::<ChaCha8Rng>(&mut tape, &batch.inputs, id, &opts, None)?;
        let loss = tape.cross_entropy(logits, &batch.labels)?;
        tally.add(tape.value(loss).item(), tape.value(logits), &batch.labels);
    }
    Ok((tally.loss(), tally.accuracy()))
}

pub fn evaluate_supernet(net: &SuperAnsNet, dataset: &Dataset, mode: RoutingMode) -> Result<f64> {
    Ok(evaluate_supernet_full(net, dataset, mode)?.1)
}

/// Trains dataset-specific blocks, adapters and heads; the embedding and
/// base blocks are frozen and never change.
pub fn train_supernet(net: &mut SuperAnsNet, datasets: &[Dataset], cfg: &TrainConfig, mode: RoutingMode) -> Result<Metrics> {
    if datasets.len() != net.num_datasets() {
        return Err(Error::InvalidConfig(format!(
            "super-network has {} heads but {} datasets were given",
            net.num_datasets(),
            datasets.len()
        )));
    }
    check_dataset_ids(datasets)?;
    for ds in datasets {
        let head = net.head(ds.id as usize)?;
        if head.num_classes() < ds.num_classes {
            return Err(Error::InvalidConfig(format!(
                "head {} has {} classes but the dataset has {}",
                ds.id,
                head.num_classes(),
                ds.num_classes
            )));
        }
    }
    let refs: Vec<&Dataset> = datasets.iter().collect();
    let opt = cfg.optimizer;
    let opts = RouteOptions::train(mode);
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    let cell = std::cell::RefCell::new(net);
    run_schedule(
        &refs,
        cfg,
        |batch, lr| {
            let mut net = cell.borrow_mut();
            let mut tape = Tape::new();
            let (logits, _) = net.forward(&mut tape, &batch.inputs, batch.dataset_id, &opts, Some(&mut noise))?;
            let loss = tape.cross_entropy(logits, &batch.labels)?;
            let grads = tape.backward(loss)?;
            let out = (tape.value(loss).item(), tape.value(logits).clone());
            step_touched(net.parameters_mut(), &grads, lr, &opt)?;
            Ok(out)
        },
        || {
            let net = cell.borrow();
            datasets
                .iter()
                .map(|ds| evaluate_supernet_full(&net, ds, mode).map(|(l, a)| (ds.id as usize, l, a)))
                .collect()
        },
    )
}
