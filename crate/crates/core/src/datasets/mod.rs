//! Labeled image collections, splits, merging and the synthetic generator.

mod augment;
mod idx;
mod store;
mod synth;

pub use augment::{augment, hflip, rotate, AugmentSpec};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx};
pub use store::{load_dataset_dir, read_manifest, save_dataset_dir, ManifestRecord, DATASET_HEADER, MANIFEST_FILE};
pub use synth::{generate_confounded, render_shape, render_texture, texture_of, ConfoundSet, ConfoundSpec, Shape};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::raster::{Image, Resolution};

/// A class index, or the reserved background label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Class(usize),
    Background(BackgroundTag),
}

/// Serializes as the string `"background"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackgroundTag {
    Background,
}

impl Label {
    pub const BACKGROUND: Label = Label::Background(BackgroundTag::Background);

    pub fn is_background(&self) -> bool {
        matches!(self, Label::Background(_))
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Label::Class(c) => write!(f, "{c}"),
            Label::Background(_) => f.write_str("background"),
        }
    }
}

/// Where an item came from and what was done to it.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub source_index: usize,
    #[serde(default)]
    pub transforms: Vec<String>,
    #[serde(default)]
    pub source_labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image: Image,
    pub label: Label,
    #[serde(default)]
    pub provenance: Provenance,
}

/// `[start, end)` class-index range contributed by one merged dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRange {
    pub name: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    resolution: Resolution,
    class_names: Vec<String>,
    has_background: bool,
    items: Vec<LabeledImage>,
    #[serde(default)]
    tasks: Vec<TaskRange>,
}

impl Dataset {
    /// Validates labels against `class_names` and the background flag.
    pub fn new(
        resolution: Resolution,
        class_names: Vec<String>,
        has_background: bool,
        items: Vec<LabeledImage>,
    ) -> Result<Self> {
        let n = class_names.len();
        let mut saw_background = false;
        for (i, it) in items.iter().enumerate() {
            if it.image.resolution() != resolution {
                return Err(Error::invalid(format!(
                    "item {i}: resolution {} differs from dataset {resolution}",
                    it.image.resolution()
                )));
            }
            match it.label {
                Label::Class(c) if c >= n => {
                    return Err(Error::invalid(format!("item {i}: label {c} outside {n} classes")))
                }
                Label::Background(_) if !has_background => {
                    return Err(Error::invalid(format!(
                        "item {i}: background label in a dataset without background"
                    )))
                }
                Label::Background(_) => saw_background = true,
                _ => {}
            }
        }
        if has_background && !saw_background && !items.is_empty() {
            return Err(Error::invalid("has_background set but no background items"));
        }
        Ok(Self {
            resolution,
            class_names,
            has_background,
            items,
            tasks: Vec::new(),
        })
    }

    pub fn resolution(&self) -> Resolution {
        self.resolution
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    /// Number of target classes N_c (the background class is not counted).
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn has_background(&self) -> bool {
        self.has_background
    }

    pub fn items(&self) -> &[LabeledImage] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn tasks(&self) -> &[TaskRange] {
        &self.tasks
    }

    /// Output index of `label`: classes map to themselves, background to N_c.
    pub fn output_index(&self, label: Label) -> usize {
        match label {
            Label::Class(c) => c,
            Label::Background(_) => self.num_classes(),
        }
    }

    /// Number of head outputs a model needs for this dataset.
    pub fn num_outputs(&self) -> usize {
        self.num_classes() + usize::from(self.has_background)
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let items: Vec<LabeledImage> = indices.iter().map(|&i| self.items[i].clone()).collect();
        let has_background = self.has_background && items.iter().any(|it| it.label.is_background());
        Dataset {
            resolution: self.resolution,
            class_names: self.class_names.clone(),
            has_background,
            items,
            tasks: self.tasks.clone(),
        }
    }

    /// Items without background labels.
    pub fn without_background(&self) -> Dataset {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| !self.items[i].label.is_background())
            .collect();
        let mut d = self.subset(&idx);
        d.has_background = false;
        d
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_outputs()];
        for it in &self.items {
            counts[self.output_index(it.label)] += 1;
        }
        counts
    }
}

/// Index sets produced by [`split_indices`], in ascending order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl SplitIndices {
    /// SHA-256 over the train index list, hex encoded.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for &i in &self.train {
            h.update((i as u64).to_le_bytes());
        }
        h.update(b"|");
        for &i in &self.val {
            h.update((i as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

/// Stratified train/validation partition.
///
/// Each stratum (class, plus background when present) gets `floor(fraction * m_c)`
/// training items; the remaining `round(fraction * m) - sum floor` slots go to the
/// strata with the largest fractional parts, lowest output index first on ties.
pub fn split_indices(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SplitIndices> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("split fraction must be in (0, 1], got {fraction}")));
    }
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_outputs()];
    for (i, it) in dataset.items.iter().enumerate() {
        strata[dataset.output_index(it.label)].push(i);
    }
    for (c, s) in strata.iter().enumerate() {
        if s.len() == 1 {
            return Err(Error::invalid(format!(
                "class {c} has a single item and cannot be stratified"
            )));
        }
    }

    let quotas: Vec<f64> = strata.iter().map(|s| fraction * s.len() as f64).collect();
    let mut take: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let total = (fraction * dataset.len() as f64).round() as usize;
    let mut remainder = total.saturating_sub(take.iter().sum());
    let mut order: Vec<usize> = (0..strata.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for c in order {
        if remainder == 0 {
            break;
        }
        if take[c] < strata[c].len() && quotas[c] > quotas[c].floor() {
            take[c] += 1;
            remainder -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (s, &n) in strata.iter_mut().zip(&take) {
        s.shuffle(&mut rng);
        train.extend_from_slice(&s[..n]);
        val.extend_from_slice(&s[n..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok(SplitIndices { train, val })
}

pub fn split_train_val(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let idx = split_indices(dataset, fraction, seed)?;
    Ok((dataset.subset(&idx.train), dataset.subset(&idx.val)))
}

/// Adds a background class as output index N_c.
pub fn append_background(dataset: &Dataset, background: &Dataset) -> Result<Dataset> {
    if dataset.has_background {
        return Err(Error::invalid("dataset already has a background class"));
    }
    if background.is_empty() {
        return Err(Error::invalid(
            "background set is empty; train the baseline regime instead",
        ));
    }
    if background.resolution != dataset.resolution {
        return Err(Error::invalid(format!(
            "background resolution {} differs from dataset {}",
            background.resolution, dataset.resolution
        )));
    }
    if let Some(i) = background.items.iter().position(|it| !it.label.is_background()) {
        return Err(Error::invalid(format!("background item {i} is not labeled background")));
    }
    let mut items = dataset.items.clone();
    items.extend(background.items.iter().cloned());
    Ok(Dataset {
        resolution: dataset.resolution,
        class_names: dataset.class_names.clone(),
        has_background: true,
        items,
        tasks: dataset.tasks.clone(),
    })
}

/// Concatenates datasets for a shared head, offsetting labels of dataset `t`
/// by the class counts of all earlier datasets.
pub fn merge_for_multitask(datasets: &[(&str, &Dataset)]) -> Result<Dataset> {
    let (_, first) = datasets
        .first()
        .ok_or_else(|| Error::invalid("multitask merge needs at least one dataset"))?;
    let resolution = first.resolution;
    let mut class_names = Vec::new();
    let mut items = Vec::new();
    let mut tasks = Vec::new();
    for (name, d) in datasets {
        if d.resolution != resolution {
            return Err(Error::invalid(format!(
                "dataset {name}: resolution {} differs from {resolution}",
                d.resolution
            )));
        }
        if d.has_background {
            return Err(Error::invalid(format!("dataset {name}: cannot merge a background class")));
        }
        let offset = class_names.len();
        class_names.extend(d.class_names.iter().map(|c| format!("{name}/{c}")));
        tasks.push(TaskRange {
            name: name.to_string(),
            start: offset,
            end: class_names.len(),
        });
        items.extend(d.items.iter().map(|it| {
            let mut it = it.clone();
            if let Label::Class(c) = it.label {
                it.label = Label::Class(c + offset);
            }
            it
        }));
    }
    let mut merged = Dataset::new(resolution, class_names, false, items)?;
    merged.tasks = tasks;
    Ok(merged)
}
