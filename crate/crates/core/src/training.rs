//! Mini-batch SGD over cross-entropy plus an optional L1 term, evaluation with
//! background-logit masking, and multi-seed regime comparison.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::datasets::{append_background, augment, split_indices, AugmentSpec, Dataset, Label};
use crate::dff::{self, DEFAULT_ITERS, DEFAULT_RANK};
use crate::error::{Error, Result};
use crate::kernels::{argmax, softmax_cross_entropy};
use crate::model::{build_model, ConvBlock, HeadMode, Model, ModelConfig};
use crate::seed::derive_seed;
use crate::tensor::sgd_step;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Baseline,
    Background,
    Multitask,
}

impl Regime {
    pub fn name(&self) -> &'static str {
        match self {
            Regime::Baseline => "baseline",
            Regime::Background => "background",
            Regime::Multitask => "multitask",
        }
    }
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Regime::Baseline),
            "background" => Ok(Regime::Background),
            "multitask" => Ok(Regime::Multitask),
            other => Err(Error::invalid(format!(
                "unknown regime {other:?} (expected baseline, background or multitask)"
            ))),
        }
    }
}

/// A run of `epochs` epochs at learning rate `lr`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub epochs: usize,
    pub lr: f64,
}

/// Missing fields take their [`Default`] values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Regime,
    pub lr: f64,
    pub epochs: usize,
    /// When non-empty, replaces `lr`/`epochs` with consecutive stages.
    pub schedule: Vec<Stage>,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_l1: f64,
    pub augment: AugmentSpec,
    pub eval_mask_background: bool,
    /// Train only the head; conv kernels stay fixed.
    pub freeze_features: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mode: Regime::Baseline,
            lr: 0.05,
            epochs: 10,
            schedule: Vec::new(),
            batch_size: 32,
            seed: 0,
            lambda_l1: 0.0,
            augment: AugmentSpec::IDENTITY,
            eval_mask_background: true,
            freeze_features: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let lr_ok = |lr: f64| lr > 0.0 && lr.is_finite();
        if !lr_ok(self.lr) || !self.schedule.iter().all(|s| lr_ok(s.lr)) {
            return Err(Error::invalid("learning rates must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return Err(Error::invalid(format!("lambda_l1 must be >= 0, got {}", self.lambda_l1)));
        }
        self.augment.validate()
    }

    pub fn total_epochs(&self) -> usize {
        if self.schedule.is_empty() {
            self.epochs
        } else {
            self.schedule.iter().map(|s| s.epochs).sum()
        }
    }

    /// Learning rate of zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut start = 0;
        for s in &self.schedule {
            if epoch < start + s.epochs {
                return s.lr;
            }
            start += s.epochs;
        }
        self.schedule.last().map_or(self.lr, |s| s.lr)
    }

    /// Head layout this mode needs for `dataset`.
    pub fn head_for(&self, dataset: &Dataset) -> HeadMode {
        let classes = dataset.num_classes();
        match self.mode {
            Regime::Baseline => HeadMode::Baseline { classes },
            Regime::Background => HeadMode::Background { classes },
            Regime::Multitask => HeadMode::Multitask {
                task_classes: dataset.tasks().iter().map(|t| t.end - t.start).collect(),
            },
        }
    }
}

/// Training diagnostics of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    /// Mean over steps of the full objective.
    pub loss: f64,
    /// Mean over steps of the batch cross-entropy.
    pub cross_entropy: f64,
}

/// Objective of one optimizer step, evaluated at the pre-step parameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepRecord {
    pub loss: f64,
    pub cross_entropy: f64,
    pub l1: f64,
    pub batch: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn loss_history(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Rejects a model whose head does not match the dataset for `mode`.
pub fn check_compatible(model: &Model, dataset: &Dataset, mode: Regime) -> Result<()> {
    let head = &model.config().head;
    let ok = match (mode, head) {
        (Regime::Baseline, HeadMode::Baseline { classes }) => {
            *classes == dataset.num_classes() && !dataset.has_background()
        }
        (Regime::Background, HeadMode::Background { classes }) => {
            *classes == dataset.num_classes() && dataset.has_background()
        }
        (Regime::Multitask, HeadMode::Multitask { task_classes }) => {
            !dataset.tasks().is_empty()
                && !dataset.has_background()
                && task_classes.len() == dataset.tasks().len()
                && task_classes
                    .iter()
                    .zip(dataset.tasks())
                    .all(|(&n, t)| n == t.end - t.start)
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{} regime: model head {head:?} does not match dataset with {} classes (background: {}, tasks: {})",
            mode.name(),
            dataset.num_classes(),
            dataset.has_background(),
            dataset.tasks().len()
        )))
    }
}

/// Loss, gradients and SGD update for one mini-batch.
///
/// The objective is the batch-mean cross-entropy plus `lambda * sum |w|` over all
/// parameters (frozen ones contribute a constant).
pub fn train_step(model: &mut Model, dataset: &Dataset, batch: &[usize], config: &RunConfig, lr: f64, epoch: usize) -> Result<StepRecord> {
    let mut tape = Tape::new();
    let params = model.register(&mut tape, config.freeze_features);
    let mut losses = Vec::with_capacity(batch.len());
    for &i in batch {
        let item = &dataset.items()[i];
        let image = if config.augment.is_identity() {
            item.image.clone()
        } else {
            augment(&item.image, &config.augment, derive_seed(config.seed, &[20, epoch as u64, i as u64]))
        };
        let (_, logits) = model.forward_on_tape(&mut tape, &params, &image)?;
        losses.push(tape.softmax_cross_entropy(logits, dataset.output_index(item.label))?);
    }
    let sum = tape.sum(&losses)?;
    let ce = tape.scale(sum, 1.0 / batch.len() as f64);
    let all = params.all();
    let l1 = tape.l1_penalty(&all, config.lambda_l1)?;
    let loss = tape.add(ce, l1)?;
    tape.backward(loss)?;

    let record = StepRecord {
        loss: tape.value(loss).data()[0],
        cross_entropy: tape.value(ce).data()[0],
        l1: tape.value(l1).data()[0],
        batch: batch.to_vec(),
    };
    let trainable: Vec<_> = if config.freeze_features {
        vec![params.head_weight, params.head_bias]
    } else {
        all
    };
    let grads: Vec<Vec<f64>> = trainable.iter().map(|&v| tape.grad(v)).collect();
    let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
    let mut targets = model.params_mut();
    if config.freeze_features {
        let n = targets.len();
        targets.drain(..n - 2);
    }
    sgd_step(&mut targets, &grad_refs, lr)?;
    Ok(record)
}

/// Trains in place. Each epoch visits a seeded permutation in batches of
/// `batch_size` (the last batch may be short). `on_epoch` runs after every epoch.
pub fn train_with(
    model: &mut Model,
    dataset: &Dataset,
    config: &RunConfig,
    mut on_epoch: impl FnMut(&EpochRecord, &Model) -> Result<()>,
) -> Result<TrainReport> {
    config.validate()?;
    check_compatible(model, dataset, config.mode)?;
    if dataset.is_empty() {
        return Err(Error::invalid("cannot train on an empty dataset"));
    }
    let mut report = TrainReport::default();
    for epoch in 0..config.total_epochs() {
        let lr = config.lr_at(epoch);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[10, epoch as u64])));
        let (mut loss, mut ce, mut steps) = (0.0, 0.0, 0);
        for batch in order.chunks(config.batch_size) {
            let step = train_step(model, dataset, batch, config, lr, epoch)?;
            loss += step.loss;
            ce += step.cross_entropy;
            steps += 1;
            report.steps.push(step);
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            steps,
            loss: loss / steps as f64,
            cross_entropy: ce / steps as f64,
        };
        log::debug!("epoch {} loss {:.6}", rec.epoch, rec.loss);
        on_epoch(&rec, model)?;
        report.epochs.push(rec);
    }
    Ok(report)
}

pub fn train(model: &mut Model, dataset: &Dataset, config: &RunConfig) -> Result<TrainReport> {
    train_with(model, dataset, config, |_, _| Ok(()))
}

/// Predicted output index. With masking and a background slot at `num_targets`,
/// only the first `num_targets` logits compete.
pub fn masked_prediction(logits: &[f64], num_targets: usize, mask_background: bool) -> usize {
    if mask_background && logits.len() > num_targets {
        argmax(&logits[..num_targets])
    } else {
        argmax(logits)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TaskAccuracy {
    pub task: String,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoverageSummary {
    pub images: usize,
    pub rank: usize,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub items: usize,
    pub accuracy: f64,
    /// Accuracy per output index; `None` where the class has no items.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// Mean per-item cross-entropy over all logits.
    pub empirical_error: f64,
    pub per_item_loss: Vec<f64>,
    pub loss_history: Vec<f64>,
    /// Multitask only: accuracy with the argmax restricted to each task's outputs.
    pub task_accuracy: Vec<TaskAccuracy>,
    pub coverage: Option<CoverageSummary>,
}

/// Mean of per-sample losses.
pub fn empirical_error(losses: &[f64]) -> f64 {
    if losses.is_empty() {
        0.0
    } else {
        losses.iter().sum::<f64>() / losses.len() as f64
    }
}

pub fn evaluate(model: &Model, dataset: &Dataset, mask_background: bool) -> Result<Metrics> {
    let head = &model.config().head;
    let targets = head.num_target_outputs();
    if targets != dataset.num_classes() || dataset.num_outputs() > model.num_outputs() {
        return Err(Error::invalid(format!(
            "model has {targets} target outputs, dataset has {} classes{}",
            dataset.num_classes(),
            if dataset.has_background() { " plus background" } else { "" }
        )));
    }
    let n = model.num_outputs();
    let ranges = head.task_ranges();
    let mut correct = vec![0usize; n];
    let mut seen = vec![0usize; n];
    let mut task_hits = vec![(0usize, 0usize); ranges.len()];
    let mut losses = Vec::with_capacity(dataset.len());
    for item in dataset.items() {
        let logits = model.forward(&item.image)?.logits;
        let label = match item.label {
            Label::Class(c) => c,
            Label::Background(_) => head
                .background_index()
                .ok_or_else(|| Error::invalid("background item but the model has no background output"))?,
        };
        losses.push(softmax_cross_entropy(&logits, label)?.0);
        let pred = masked_prediction(&logits, targets, mask_background);
        seen[label] += 1;
        correct[label] += usize::from(pred == label);
        if matches!(head, HeadMode::Multitask { .. }) {
            if let Some(t) = ranges.iter().position(|&(s, e)| (s..e).contains(&label)) {
                let (s, e) = ranges[t];
                let p = s + argmax(&logits[s..e]);
                task_hits[t].0 += usize::from(p == label);
                task_hits[t].1 += 1;
            }
        }
    }
    let total: usize = seen.iter().sum();
    let accuracy = if total == 0 {
        0.0
    } else {
        correct.iter().sum::<usize>() as f64 / total as f64
    };
    let task_accuracy = if matches!(head, HeadMode::Multitask { .. }) {
        dataset
            .tasks()
            .iter()
            .zip(&task_hits)
            .map(|(t, &(hit, all))| TaskAccuracy {
                task: t.name.clone(),
                accuracy: if all == 0 { 0.0 } else { hit as f64 / all as f64 },
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Metrics {
        items: total,
        accuracy,
        per_class_accuracy: correct
            .iter()
            .zip(&seen)
            .map(|(&c, &s)| (s > 0).then(|| c as f64 / s as f64))
            .collect(),
        empirical_error: empirical_error(&losses),
        per_item_loss: losses,
        loss_history: Vec::new(),
        task_accuracy,
        coverage: None,
    })
}

/// How DFF coverage is measured on a test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverageConfig {
    /// Uses the first `images` non-background test items.
    pub images: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
    #[serde(default = "default_iters")]
    pub iters: usize,
}

fn default_rank() -> usize {
    DEFAULT_RANK
}

fn default_iters() -> usize {
    DEFAULT_ITERS
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self {
            images: 200,
            rank: DEFAULT_RANK,
            iters: DEFAULT_ITERS,
        }
    }
}

/// Mean target-class coverage, with each image's true class as the target.
pub fn mean_coverage(model: &Model, dataset: &Dataset, cfg: &CoverageConfig, mask_background: bool, seed: u64) -> Result<CoverageSummary> {
    let excluded: Vec<usize> = match model.config().head.background_index() {
        Some(b) if mask_background => vec![b],
        _ => vec![],
    };
    let mut total = 0.0;
    let mut count = 0;
    for (i, item) in dataset.items().iter().enumerate() {
        if count == cfg.images {
            break;
        }
        let Label::Class(target) = item.label else { continue };
        let features = model.features(&item.image)?;
        let f = dff::dff(&features, cfg.rank, cfg.iters, derive_seed(seed, &[30, i as u64]))?;
        total += dff::coverage(&f, model.head(), target, &excluded)?.coverage;
        count += 1;
    }
    Ok(CoverageSummary {
        images: count,
        rank: cfg.rank,
        mean: if count == 0 { 0.0 } else { total / count as f64 },
    })
}

/// Training data plus held-out data shared by every regime.
#[derive(Debug, Clone)]
pub struct Bundle {
    pub name: String,
    /// Target-class items only.
    pub train: Dataset,
    pub test: Dataset,
    /// Appended to the training split in the background regime.
    pub background: Option<Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareOptions {
    pub split_fraction: f64,
    pub blocks: Vec<ConvBlock>,
    pub coverage: Option<CoverageConfig>,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            split_fraction: 0.9,
            blocks: ModelConfig::desk(crate::raster::Resolution::new(1, 28, 28), HeadMode::Baseline { classes: 1 }).blocks,
            coverage: Some(CoverageConfig::default()),
        }
    }
}

/// One (regime, seed) run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Cell {
    pub regime: String,
    pub seed: u64,
    pub split_hash: String,
    pub history: Vec<EpochRecord>,
    /// Validation accuracy after each epoch.
    pub val_accuracy: Vec<f64>,
    pub test: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegimeSummary {
    pub regime: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_coverage: Option<f64>,
    pub std_coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    /// Sorted by (regime, seed).
    pub cells: Vec<Cell>,
    pub summaries: Vec<RegimeSummary>,
}

/// Arithmetic mean and sample standard deviation (n - 1 denominator).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs one regime for one seed. The split, model initialization and shuffling
/// all derive from `seed`, so regimes sharing a seed see identical splits.
pub fn run_cell(bundle: &Bundle, regime: &str, run: &RunConfig, seed: u64, opts: &CompareOptions) -> Result<Cell> {
    run_cell_with_model(bundle, regime, run, seed, opts).map(|(cell, _)| cell)
}

/// [`run_cell`], also returning the trained model.
pub fn run_cell_with_model(
    bundle: &Bundle,
    regime: &str,
    run: &RunConfig,
    seed: u64,
    opts: &CompareOptions,
) -> Result<(Cell, Model)> {
    let split = split_indices(&bundle.train, opts.split_fraction, seed)?;
    let train = bundle.train.subset(&split.train);
    let val = bundle.train.subset(&split.val);
    let train = match run.mode {
        Regime::Background => {
            let bg = bundle
                .background
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("regime {regime}: background mode needs a background set")))?;
            append_background(&train, bg)?
        }
        _ => train,
    };
    let config = RunConfig {
        seed,
        ..run.clone()
    };
    let model_cfg = ModelConfig {
        input: bundle.train.resolution(),
        blocks: opts.blocks.clone(),
        head: config.head_for(&train),
    };
    let mut model = build_model(model_cfg, seed)?;
    let mut val_accuracy = Vec::new();
    let report = train_with(&mut model, &train, &config, |_, m| {
        if !val.is_empty() {
            val_accuracy.push(evaluate(m, &val, config.eval_mask_background)?.accuracy);
        }
        Ok(())
    })?;
    let mut test = evaluate(&model, &bundle.test, config.eval_mask_background)?;
    test.loss_history = report.loss_history();
    if let Some(cov) = &opts.coverage {
        test.coverage = Some(mean_coverage(&model, &bundle.test, cov, config.eval_mask_background, seed)?);
    }
    let cell = Cell {
        regime: regime.to_string(),
        seed,
        split_hash: split.hash(),
        history: report.epochs,
        val_accuracy,
        test,
    };
    Ok((cell, model))
}

/// Every (regime, seed) cell, run on the current rayon pool and sorted by (regime, seed).
pub fn compare_regimes(bundle: &Bundle, seeds: &[u64], regimes: &[(String, RunConfig)], opts: &CompareOptions) -> Result<Comparison> {
    if seeds.len() < 2 {
        return Err(Error::invalid("a comparison needs at least two seeds"));
    }
    let jobs: Vec<(&str, &RunConfig, u64)> = regimes
        .iter()
        .flat_map(|(name, run)| seeds.iter().map(move |&s| (name.as_str(), run, s)))
        .collect();
    let mut cells = jobs
        .par_iter()
        .map(|&(name, run, seed)| run_cell(bundle, name, run, seed, opts))
        .collect::<Result<Vec<_>>>()?;
    cells.sort_by(|a, b| a.regime.cmp(&b.regime).then(a.seed.cmp(&b.seed)));
    Ok(Comparison {
        summaries: summarize(&cells),
        cells,
    })
}

pub fn summarize(cells: &[Cell]) -> Vec<RegimeSummary> {
    let mut names: Vec<&str> = cells.iter().map(|c| c.regime.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    names
        .into_iter()
        .map(|name| {
            let mine: Vec<&Cell> = cells.iter().filter(|c| c.regime == name).collect();
            let acc: Vec<f64> = mine.iter().map(|c| c.test.accuracy).collect();
            let cov: Option<Vec<f64>> = mine
                .iter()
                .map(|c| c.test.coverage.as_ref().map(|s| s.mean))
                .collect();
            let (mean_accuracy, std_accuracy) = mean_std(&acc);
            let (mean_coverage, std_coverage) = match cov {
                Some(v) => {
                    let (m, s) = mean_std(&v);
                    (Some(m), Some(s))
                }
                None => (None, None),
            };
            RegimeSummary {
                regime: name.to_string(),
                runs: mine.len(),
                mean_accuracy,
                std_accuracy,
                mean_coverage,
                std_coverage,
            }
        })
        .collect()
}
