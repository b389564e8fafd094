//! Experiment files, metrics tables and reproducibility records.
//!
//! Metrics CSV columns, one row per (dataset, regime, seed, epoch):
//! `dataset, regime, seed, epoch, lr, steps, train_loss, train_cross_entropy,
//! val_accuracy, test_accuracy, empirical_error, coverage`. The last three are
//! filled on the final epoch only.
//!
//! Comparison CSV columns: `regime, seed, accuracy, coverage`. After each
//! regime's per-seed rows come two summary rows whose `seed` is `mean` and `std`
//! (sample standard deviation).

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::{generate_confounded, load_dataset_dir, load_idx, ConfoundSpec};
use crate::error::{Error, Result};
use crate::model::{ConvBlock, HeadMode, ModelConfig};
use crate::raster::Resolution;
use crate::training::{compare_regimes, Bundle, Cell, Comparison, CompareOptions, CoverageConfig, RunConfig};

pub const THREADS_ENV: &str = "BACKDROP_THREADS";
pub const RECORD_FORMAT: &str = "backdrop-run-record";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSection {
    /// Generated in memory from `spec` and `seed`.
    Synthetic {
        spec: ConfoundSpec,
        #[serde(default)]
        seed: u64,
    },
    /// Dataset directories; `background` items must carry the background label.
    Directory {
        train: PathBuf,
        test: PathBuf,
        background: Option<PathBuf>,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        background: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub blocks: Vec<ConvBlock>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            blocks: ModelConfig::desk(Resolution::new(1, 28, 28), HeadMode::Baseline { classes: 1 }).blocks,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSection {
    pub name: String,
    #[serde(default)]
    pub run: RunConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3, 4, 5]
}

fn default_fraction() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub dataset: DatasetSection,
    #[serde(default)]
    pub model: ModelSection,
    pub regimes: Vec<RegimeSection>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_fraction")]
    pub split_fraction: f64,
    #[serde(default)]
    pub coverage: Option<CoverageConfig>,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn default_name() -> String {
    "experiment".into()
}

fn config_err(path: &str, message: impl Into<String>) -> Error {
    Error::Config {
        path: path.into(),
        message: message.into(),
    }
}

impl ExperimentConfig {
    /// Checks ranges, name uniqueness and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        let must_exist = |field: &str, p: &Path| {
            if p.exists() {
                Ok(())
            } else {
                Err(config_err(field, format!("{} does not exist", p.display())))
            }
        };
        match &self.dataset {
            DatasetSection::Synthetic { spec, .. } => spec
                .validate()
                .map_err(|e| config_err("dataset.spec", e.to_string()))?,
            DatasetSection::Directory {
                train,
                test,
                background,
            } => {
                must_exist("dataset.train", train)?;
                must_exist("dataset.test", test)?;
                if let Some(b) = background {
                    must_exist("dataset.background", b)?;
                }
            }
            DatasetSection::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
                background,
            } => {
                must_exist("dataset.train_images", train_images)?;
                must_exist("dataset.train_labels", train_labels)?;
                must_exist("dataset.test_images", test_images)?;
                must_exist("dataset.test_labels", test_labels)?;
                if let Some(b) = background {
                    must_exist("dataset.background", b)?;
                }
            }
        }
        if self.model.blocks.is_empty() {
            return Err(config_err("model.blocks", "at least one conv block is required"));
        }
        if self.regimes.is_empty() {
            return Err(config_err("regimes", "at least one regime is required"));
        }
        for (i, r) in self.regimes.iter().enumerate() {
            if self.regimes[..i].iter().any(|o| o.name == r.name) {
                return Err(config_err(&format!("regimes[{i}].name"), format!("duplicate regime {:?}", r.name)));
            }
            r.run
                .validate()
                .map_err(|e| config_err(&format!("regimes[{i}].run"), e.to_string()))?;
        }
        if self.seeds.is_empty() {
            return Err(config_err("seeds", "at least one seed is required"));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return Err(config_err("split_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }

    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            split_fraction: self.split_fraction,
            blocks: self.model.blocks.clone(),
            coverage: self.coverage.clone(),
        }
    }

    pub fn regime(&self, name: &str) -> Result<&RegimeSection> {
        self.regimes.iter().find(|r| r.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.regimes.iter().map(|r| r.name.as_str()).collect();
            config_err("regimes", format!("no regime named {name:?} (have {known:?})"))
        })
    }
}

/// Parses JSON into `T`; failures report the offending field path.
pub fn parse_json<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::Config {
            path: if path == "." { origin.display().to_string() } else { path },
            message: e.into_inner().to_string(),
        }
    })
}

/// Reads JSON of type `T`, or the `config` section of a run record.
pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| config_err(&path.display().to_string(), e.to_string()))?;
    if value.get("format").and_then(|f| f.as_str()) == Some(RECORD_FORMAT) {
        let inner = value
            .get("config")
            .ok_or_else(|| config_err("config", "run record has no config section"))?;
        return parse_json(&inner.to_string(), path);
    }
    parse_json(&text, path)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    load_json(path)
}

/// Materializes the train/test/background sets of an experiment.
pub fn load_bundle(cfg: &ExperimentConfig) -> Result<Bundle> {
    let (train, test, background) = match &cfg.dataset {
        DatasetSection::Synthetic { spec, seed } => {
            let set = generate_confounded(spec, *seed)?;
            let bg = (!set.background_pool.is_empty()).then_some(set.background_pool);
            (set.train, set.test, bg)
        }
        DatasetSection::Directory {
            train,
            test,
            background,
        } => (
            load_dataset_dir(train)?,
            load_dataset_dir(test)?,
            background.as_deref().map(load_dataset_dir).transpose()?,
        ),
        DatasetSection::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            background,
        } => (
            load_idx(train_images, train_labels)?,
            load_idx(test_images, test_labels)?,
            background.as_deref().map(load_dataset_dir).transpose()?,
        ),
    };
    Ok(Bundle {
        name: cfg.name.clone(),
        train,
        test,
        background,
    })
}

/// Worker pool capped by `BACKDROP_THREADS` (unset: rayon's default).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::invalid(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::invalid(format!("thread pool: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub dataset: String,
    pub regime: String,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    pub train_loss: f64,
    pub train_cross_entropy: f64,
    pub val_accuracy: Option<f64>,
    pub test_accuracy: Option<f64>,
    pub empirical_error: Option<f64>,
    pub coverage: Option<f64>,
}

pub fn metrics_rows(dataset: &str, cells: &[Cell]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for c in cells {
        let last = c.history.len();
        for (i, e) in c.history.iter().enumerate() {
            let fin = i + 1 == last;
            rows.push(MetricsRow {
                dataset: dataset.to_string(),
                regime: c.regime.clone(),
                seed: c.seed,
                epoch: e.epoch,
                lr: e.lr,
                steps: e.steps,
                train_loss: e.loss,
                train_cross_entropy: e.cross_entropy,
                val_accuracy: c.val_accuracy.get(i).copied(),
                test_accuracy: fin.then_some(c.test.accuracy),
                empirical_error: fin.then_some(c.test.empirical_error),
                coverage: if fin { c.test.coverage.as_ref().map(|s| s.mean) } else { None },
            });
        }
    }
    rows
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct ComparisonRow {
    regime: String,
    seed: String,
    accuracy: f64,
    coverage: Option<f64>,
}

pub fn write_comparison_csv(path: &Path, cmp: &Comparison) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for s in &cmp.summaries {
        for c in cmp.cells.iter().filter(|c| c.regime == s.regime) {
            w.serialize(ComparisonRow {
                regime: c.regime.clone(),
                seed: c.seed.to_string(),
                accuracy: c.test.accuracy,
                coverage: c.test.coverage.as_ref().map(|v| v.mean),
            })?;
        }
        w.serialize(ComparisonRow {
            regime: s.regime.clone(),
            seed: "mean".into(),
            accuracy: s.mean_accuracy,
            coverage: s.mean_coverage,
        })?;
        w.serialize(ComparisonRow {
            regime: s.regime.clone(),
            seed: "std".into(),
            accuracy: s.std_accuracy,
            coverage: s.std_coverage,
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Aligned plain-text rendering of the regime summaries, in percent.
pub fn render_table(cmp: &Comparison) -> String {
    let pct = |m: f64, s: f64| format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * s);
    let mut rows = vec![[
        "regime".to_string(),
        "runs".to_string(),
        "accuracy %".to_string(),
        "coverage %".to_string(),
    ]];
    for s in &cmp.summaries {
        rows.push([
            s.regime.clone(),
            s.runs.to_string(),
            pct(s.mean_accuracy, s.std_accuracy),
            match (s.mean_coverage, s.std_coverage) {
                (Some(m), Some(sd)) => pct(m, sd),
                _ => "-".into(),
            },
        ]);
    }
    let widths: Vec<usize> = (0..4)
        .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (n, r) in rows.iter().enumerate() {
        let cells: Vec<String> = r
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(i, (c, &w))| {
                let pad = w - c.chars().count();
                if i == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if n == 0 {
            let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
            out.push_str(&"-".repeat(total));
            out.push('\n');
        }
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(hex::encode(h.finalize()))
}

/// Written next to every run's artifacts as `run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// File name to SHA-256 hex digest.
    pub artifacts: BTreeMap<String, String>,
}

/// Hashes `artifacts` (relative to `dir`) and writes `dir/run.json`.
pub fn write_record(dir: &Path, command: &str, config: &impl Serialize, seeds: &[u64], artifacts: &[&str]) -> Result<RunRecord> {
    let mut hashes = BTreeMap::new();
    for name in artifacts {
        hashes.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }
    let record = RunRecord {
        format: RECORD_FORMAT.into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config: serde_json::to_value(config)?,
        seeds: seeds.to_vec(),
        artifacts: hashes,
    };
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(record)
}

pub const METRICS_CSV: &str = "metrics.csv";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";

/// Runs every (regime, seed) cell and writes metrics, comparison and record files into `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<Comparison> {
    cfg.validate()?;
    let bundle = load_bundle(cfg)?;
    let regimes: Vec<(String, RunConfig)> = cfg.regimes.iter().map(|r| (r.name.clone(), r.run.clone())).collect();
    let pool = thread_pool()?;
    let opts = cfg.compare_options();
    let cmp = pool.install(|| compare_regimes(&bundle, &cfg.seeds, &regimes, &opts))?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_metrics_csv(&out.join(METRICS_CSV), &metrics_rows(&cfg.name, &cmp.cells))?;
    write_comparison_csv(&out.join(COMPARISON_CSV), &cmp)?;
    let txt = out.join(COMPARISON_TXT);
    std::fs::write(&txt, render_table(&cmp)).map_err(|e| Error::io(&txt, e))?;
    write_record(out, "compare", cfg, &cfg.seeds, &[METRICS_CSV, COMPARISON_CSV, COMPARISON_TXT])?;
    Ok(cmp)
}
