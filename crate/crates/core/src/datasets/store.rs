//! Dataset directories: `dataset.json` header, `manifest.jsonl` records and
//! 8-bit PNG images under `images/`.
//!
//! Manifest records are one JSON object per line with fields in this order:
//! `path`, `label`, `source`, `source_index`, `transforms`, `source_labels`.
//! `label` is a class index or the string `"background"`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabeledImage, Provenance, TaskRange};
use crate::error::{Error, Result};
use crate::raster::{Image, Resolution};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const DATASET_HEADER: &str = "dataset.json";
const FORMAT: &str = "backdrop-dataset";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub path: String,
    pub label: Label,
    pub source: String,
    pub source_index: usize,
    #[serde(default)]
    pub transforms: Vec<String>,
    #[serde(default)]
    pub source_labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    resolution: Resolution,
    class_names: Vec<String>,
    has_background: bool,
    #[serde(default)]
    tasks: Vec<TaskRange>,
    count: usize,
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn save_dataset_dir(dataset: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let header = Header {
        format: FORMAT.into(),
        version: 1,
        resolution: dataset.resolution,
        class_names: dataset.class_names.clone(),
        has_background: dataset.has_background,
        tasks: dataset.tasks.clone(),
        count: dataset.len(),
    };
    let header_path = dir.join(DATASET_HEADER);
    let text = serde_json::to_string_pretty(&header)?;
    std::fs::write(&header_path, text + "\n").map_err(|e| Error::io(&header_path, e))?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for (i, it) in dataset.items.iter().enumerate() {
        let rel = format!("images/{i:06}.png");
        it.image.save_png(&dir.join(&rel))?;
        let rec = ManifestRecord {
            path: rel,
            label: it.label,
            source: it.provenance.source.clone(),
            source_index: it.provenance.source_index,
            transforms: it.provenance.transforms.clone(),
            source_labels: it.provenance.source_labels.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

/// Reads the records of a manifest file.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Config {
            path: path.display().to_string(),
            message: format!("line {}: {e}", n + 1),
        })?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads a directory written by [`save_dataset_dir`].
pub fn load_dataset_dir(dir: &Path) -> Result<Dataset> {
    let header_path = dir.join(DATASET_HEADER);
    let text = std::fs::read_to_string(&header_path).map_err(|e| Error::io(&header_path, e))?;
    let header: Header = serde_json::from_str(&text).map_err(|e| Error::Config {
        path: header_path.display().to_string(),
        message: e.to_string(),
    })?;
    if header.format != FORMAT {
        return Err(Error::Config {
            path: header_path.display().to_string(),
            message: format!("format is {:?}, expected {FORMAT:?}", header.format),
        });
    }
    let records = read_manifest(&dir.join(MANIFEST_FILE))?;
    if records.len() != header.count {
        return Err(Error::invalid(format!(
            "{}: header declares {} items, manifest has {}",
            dir.display(),
            header.count,
            records.len()
        )));
    }
    let res = header.resolution;
    let items = records
        .into_iter()
        .map(|r| {
            let image = Image::load(&dir.join(&r.path), res.channels)?;
            Ok(LabeledImage {
                image,
                label: r.label,
                provenance: Provenance {
                    source: r.source,
                    source_index: r.source_index,
                    transforms: r.transforms,
                    source_labels: r.source_labels,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut d = Dataset::new(res, header.class_names, header.has_background, items)?;
    d.tasks = header.tasks;
    Ok(d)
}
