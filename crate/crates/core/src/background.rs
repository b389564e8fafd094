//! Background-class assembly from labeled or unlabeled image pools.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_dataset_dir, read_idx_images, read_idx_labels, Dataset, Label, LabeledImage, Provenance};
use crate::error::{Error, Result, Shortfall};
use crate::raster::{convert_channels, crop, resize, Image, Resolution};
use crate::seed::derive_seed;

/// How many items a pool contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleCount {
    /// Every eligible item.
    All,
    Total(usize),
    /// The same number from each label (an item's first label is its group).
    PerLabel(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Pool { pool: String, count: SampleCount },
    Monochrome { count: usize, palette_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    Resize { height: usize, width: usize },
    CenterCrop { height: usize, width: usize },
    RandomCrop { height: usize, width: usize },
    Invert,
    /// Grid of patches; each patch becomes its own candidate. Stride defaults to the patch size.
    Patches { size: usize, stride: Option<usize> },
}

/// Where a named pool lives on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PoolLocation {
    Idx { images: PathBuf, labels: PathBuf },
    /// Image files; `labels` is an optional JSONL manifest of `{"path", "labels"}` records.
    Dir { dir: PathBuf, labels: Option<PathBuf> },
    /// A dataset directory as written by `save_dataset_dir`.
    Dataset { dir: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolDecl {
    pub id: String,
    #[serde(flatten)]
    pub location: PoolLocation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundSpec {
    #[serde(default)]
    pub pools: Vec<PoolDecl>,
    pub sources: Vec<SourceSpec>,
    /// Applied in order to every pool item; monochrome images are generated at the output resolution.
    #[serde(default)]
    pub transforms: Vec<Transform>,
    #[serde(default)]
    pub excluded_labels: Vec<String>,
    pub target_size: usize,
    pub resolution: Resolution,
    #[serde(default)]
    pub allow_replacement: bool,
}

impl BackgroundSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::invalid("target_size must be positive"));
        }
        if self.resolution.is_empty() || !matches!(self.resolution.channels, 1 | 3) {
            return Err(Error::invalid(format!("unsupported output resolution {}", self.resolution)));
        }
        let patches = self
            .transforms
            .iter()
            .filter(|t| matches!(t, Transform::Patches { .. }))
            .count();
        if patches > 1 {
            return Err(Error::invalid("at most one patch extraction step is allowed"));
        }
        for t in &self.transforms {
            let ok = match *t {
                Transform::Resize { height, width }
                | Transform::CenterCrop { height, width }
                | Transform::RandomCrop { height, width } => height > 0 && width > 0,
                Transform::Patches { size, stride } => size > 0 && stride != Some(0),
                Transform::Invert => true,
            };
            if !ok {
                return Err(Error::invalid(format!("transform {t:?} has a zero extent")));
            }
        }
        Ok(())
    }
}

enum PoolImages {
    Bytes { res: Resolution, pixels: Vec<u8> },
    Files(Vec<PathBuf>),
    Memory(Vec<Image>),
}

/// An indexable collection of source images with optional labels.
pub struct SourcePool {
    id: String,
    source: String,
    images: PoolImages,
    labels: Vec<Vec<String>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    path: String,
    #[serde(default)]
    labels: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "pgm", "ppm", "pnm"];

impl SourcePool {
    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self, index: usize) -> &[String] {
        &self.labels[index]
    }

    /// IDX pair; labels are the decimal class indices.
    pub fn from_idx(id: &str, images: &Path, labels: &Path) -> Result<Self> {
        let (rows, cols, pixels) = read_idx_images(images)?;
        let lbl = read_idx_labels(labels)?;
        if pixels.len() != lbl.len() * rows * cols {
            return Err(Error::invalid(format!(
                "pool {id}: {} images but {} labels",
                pixels.len() / (rows * cols).max(1),
                lbl.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            source: images.display().to_string(),
            images: PoolImages::Bytes {
                res: Resolution::new(1, rows, cols),
                pixels,
            },
            labels: lbl.iter().map(|l| vec![l.to_string()]).collect(),
        })
    }

    /// Image directory. Without a label manifest every image file (sorted by name) is used, unlabeled.
    pub fn from_dir(id: &str, dir: &Path, labels: Option<&Path>) -> Result<Self> {
        let (files, labels) = match labels {
            Some(manifest) => {
                let text = std::fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
                let mut files = Vec::new();
                let mut lbls = Vec::new();
                for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let rec: LabelRecord = serde_json::from_str(line).map_err(|e| Error::Config {
                        path: manifest.display().to_string(),
                        message: format!("line {}: {e}", n + 1),
                    })?;
                    files.push(dir.join(rec.path));
                    lbls.push(rec.labels);
                }
                (files, lbls)
            }
            None => {
                let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                    .map_err(|e| Error::io(dir, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| {
                        p.extension()
                            .and_then(|e| e.to_str())
                            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
                    })
                    .collect();
                files.sort();
                let n = files.len();
                (files, vec![Vec::new(); n])
            }
        };
        Ok(Self {
            id: id.into(),
            source: dir.display().to_string(),
            images: PoolImages::Files(files),
            labels,
        })
    }

    /// In-memory dataset; labels are class names (or `"background"`).
    pub fn from_dataset(id: &str, dataset: &Dataset) -> Self {
        let labels = dataset
            .items()
            .iter()
            .map(|it| match it.label {
                Label::Class(c) => vec![dataset.class_names()[c].clone()],
                Label::Background(_) => vec!["background".to_string()],
            })
            .collect();
        Self {
            id: id.into(),
            source: id.into(),
            images: PoolImages::Memory(dataset.items().iter().map(|it| it.image.clone()).collect()),
            labels,
        }
    }

    pub fn load(decl: &PoolDecl) -> Result<Self> {
        match &decl.location {
            PoolLocation::Idx { images, labels } => Self::from_idx(&decl.id, images, labels),
            PoolLocation::Dir { dir, labels } => Self::from_dir(&decl.id, dir, labels.as_deref()),
            PoolLocation::Dataset { dir } => Ok(Self::from_dataset(&decl.id, &load_dataset_dir(dir)?)),
        }
    }

    fn extent(&self, index: usize) -> Result<(usize, usize)> {
        match &self.images {
            PoolImages::Bytes { res, .. } => Ok((res.height, res.width)),
            PoolImages::Memory(v) => Ok((v[index].resolution().height, v[index].resolution().width)),
            PoolImages::Files(f) => {
                let (w, h) = image::image_dimensions(&f[index]).map_err(|source| Error::Image {
                    path: f[index].clone(),
                    source,
                })?;
                Ok((h as usize, w as usize))
            }
        }
    }

    pub fn image(&self, index: usize, channels: usize) -> Result<Image> {
        let img = match &self.images {
            PoolImages::Bytes { res, pixels } => {
                let n = res.len();
                Image::from_bytes_interleaved(*res, &pixels[index * n..(index + 1) * n])?
            }
            PoolImages::Files(f) => Image::load(&f[index], channels)?,
            PoolImages::Memory(v) => v[index].clone(),
        };
        if img.resolution().channels == channels {
            Ok(img)
        } else {
            convert_channels(&img, channels)
        }
    }
}

pub fn load_pools(spec: &BackgroundSpec) -> Result<Vec<SourcePool>> {
    spec.pools.iter().map(SourcePool::load).collect()
}

pub fn invert_colors(img: &Image) -> Image {
    let mut out = img.clone();
    out.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v);
    out
}

/// Single-color image.
pub fn monochrome_image(res: Resolution, color: &[f64]) -> Result<Image> {
    Image::solid(res, color)
}

/// `count` constant images with pairwise distinct colors: 24-bit RGB for three
/// channels, 8-bit levels for one.
pub fn make_monochrome(count: usize, res: Resolution, palette_seed: u64) -> Result<Vec<Image>> {
    let bits = match res.channels {
        1 => 8,
        3 => 24,
        n => return Err(Error::invalid(format!("monochrome images need 1 or 3 channels, not {n}"))),
    };
    if count == 0 || count > 1usize << bits {
        return Err(Error::invalid(format!(
            "monochrome count must be in 1..={}",
            1usize << bits
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(palette_seed);
    let mut seen = HashSet::with_capacity(count);
    let mut colors = Vec::with_capacity(count);
    if count > (1usize << bits) / 2 {
        // dense request: shuffle the whole palette instead of rejection sampling
        let mut all: Vec<u32> = (0..1u32 << bits).collect();
        all.shuffle(&mut rng);
        colors.extend_from_slice(&all[..count]);
    } else {
        while colors.len() < count {
            let c = rng.gen_range(0..1u32 << bits);
            if seen.insert(c) {
                colors.push(c);
            }
        }
    }
    colors
        .iter()
        .map(|&c| {
            let rgb: Vec<f64> = if bits == 8 {
                vec![c as f64 / 255.0]
            } else {
                vec![
                    ((c >> 16) & 0xFF) as f64 / 255.0,
                    ((c >> 8) & 0xFF) as f64 / 255.0,
                    (c & 0xFF) as f64 / 255.0,
                ]
            };
            Image::solid(res, &rgb)
        })
        .collect()
}

/// Recommended background size range: one class's worth up to the whole training set.
pub fn size_heuristic(train_size: usize, num_classes: usize) -> Result<(usize, usize)> {
    if num_classes == 0 || train_size < num_classes {
        return Err(Error::invalid(format!(
            "size heuristic needs train_size >= num_classes >= 1, got {train_size} and {num_classes}"
        )));
    }
    let lo = (train_size as f64 / num_classes as f64).round() as usize;
    Ok((lo, train_size))
}

/// One selectable unit: an item, or one patch of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Candidate {
    item: usize,
    patch: usize,
}

/// Extent before the patch step, and the patch grid origin list.
fn patch_grid(transforms: &[Transform], mut h: usize, mut w: usize) -> Result<Option<Vec<(usize, usize)>>> {
    for t in transforms {
        match *t {
            Transform::Resize { height, width } => (h, w) = (height, width),
            Transform::CenterCrop { height, width } | Transform::RandomCrop { height, width } => {
                if height > h || width > w {
                    return Err(Error::invalid(format!("crop {height}x{width} exceeds image {h}x{w}")));
                }
                (h, w) = (height, width);
            }
            Transform::Invert => {}
            Transform::Patches { size, stride } => {
                let stride = stride.unwrap_or(size);
                if size > h || size > w {
                    return Ok(Some(Vec::new()));
                }
                let mut origins = Vec::new();
                for y in (0..=h - size).step_by(stride) {
                    for x in (0..=w - size).step_by(stride) {
                        origins.push((y, x));
                    }
                }
                return Ok(Some(origins));
            }
        }
    }
    Ok(None)
}

fn run_chain(mut img: Image, transforms: &[Transform], patch: usize, seed: u64) -> Result<(Image, Vec<String>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut log = Vec::new();
    for t in transforms {
        let r = img.resolution();
        match *t {
            Transform::Resize { height, width } => {
                img = resize(&img, height, width);
                log.push(format!("resize:{height}x{width}"));
            }
            Transform::CenterCrop { height, width } => {
                let (top, left) = ((r.height - height) / 2, (r.width - width) / 2);
                img = crop(&img, top, left, height, width)?;
                log.push(format!("center_crop:{height}x{width}"));
            }
            Transform::RandomCrop { height, width } => {
                let top = rng.gen_range(0..=r.height - height);
                let left = rng.gen_range(0..=r.width - width);
                img = crop(&img, top, left, height, width)?;
                log.push(format!("random_crop:{height}x{width}@{top},{left}"));
            }
            Transform::Invert => {
                img = invert_colors(&img);
                log.push("invert".into());
            }
            Transform::Patches { size, .. } => {
                let origins = patch_grid(std::slice::from_ref(t), r.height, r.width)?.unwrap_or_default();
                let (top, left) = origins[patch];
                img = crop(&img, top, left, size, size)?;
                log.push(format!("patch:{size}x{size}@{top},{left}"));
            }
        }
    }
    Ok((img, log))
}

struct Selection {
    pool: usize,
    picks: Vec<Candidate>,
}

/// Builds the background class. Output order is (pool id, item index, patch index),
/// monochrome sources last in declaration order; the result depends only on `(spec, pools, seed)`.
pub fn assemble(spec: &BackgroundSpec, pools: &[SourcePool], seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let excluded: HashSet<&str> = spec.excluded_labels.iter().map(String::as_str).collect();
    let mut selections = Vec::new();
    let mut shortfalls = Vec::new();
    let mut total = 0usize;

    for (s, source) in spec.sources.iter().enumerate() {
        let SourceSpec::Pool { pool: id, count } = source else {
            if let SourceSpec::Monochrome { count, .. } = source {
                total += count;
            }
            continue;
        };
        let p = pools
            .iter()
            .position(|p| p.id == *id)
            .ok_or_else(|| Error::invalid(format!("source {s}: unknown pool {id:?}")))?;
        let pool = &pools[p];
        let mut eligible = Vec::new();
        for item in 0..pool.len() {
            if pool.labels[item].iter().any(|l| excluded.contains(l.as_str())) {
                continue;
            }
            let (h, w) = pool.extent(item)?;
            match patch_grid(&spec.transforms, h, w)? {
                Some(origins) => eligible.extend((0..origins.len()).map(|patch| Candidate { item, patch })),
                None => eligible.push(Candidate { item, patch: 0 }),
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1, s as u64]));
        let mut draw = |group: &[Candidate], n: usize, name: String| -> Vec<Candidate> {
            if n > group.len() && !(spec.allow_replacement && !group.is_empty()) {
                shortfalls.push(Shortfall {
                    source: name,
                    requested: n,
                    eligible: group.len(),
                });
                return Vec::new();
            }
            if n <= group.len() {
                let mut g = group.to_vec();
                g.partial_shuffle(&mut rng, n);
                g.truncate(n);
                g
            } else {
                (0..n).map(|_| group[rng.gen_range(0..group.len())]).collect()
            }
        };
        let picks = match *count {
            SampleCount::All => eligible.clone(),
            SampleCount::Total(n) => draw(&eligible, n, id.clone()),
            SampleCount::PerLabel(n) => {
                let mut groups: BTreeMap<&str, Vec<Candidate>> = BTreeMap::new();
                for c in &eligible {
                    let Some(first) = pool.labels[c.item].first() else {
                        return Err(Error::invalid(format!(
                            "pool {id}: item {} has no label; per-label sampling needs labels",
                            c.item
                        )));
                    };
                    groups.entry(first).or_default().push(*c);
                }
                let mut picks = Vec::new();
                for (label, g) in &groups {
                    picks.extend(draw(g, n, format!("{id}/{label}")));
                }
                picks
            }
        };
        total += picks.len();
        selections.push(Selection { pool: p, picks });
    }

    if !shortfalls.is_empty() {
        return Err(Error::Shortfall(shortfalls));
    }
    if total != spec.target_size {
        return Err(Error::invalid(format!(
            "sources yield {total} images but target_size is {}",
            spec.target_size
        )));
    }

    selections.sort_by(|a, b| pools[a.pool].id.cmp(&pools[b.pool].id).then(a.pool.cmp(&b.pool)));
    let res = spec.resolution;
    let mut items = Vec::with_capacity(total);
    for sel in &mut selections {
        sel.picks.sort();
        let pool = &pools[sel.pool];
        let built: Vec<LabeledImage> = sel
            .picks
            .par_iter()
            .enumerate()
            .map(|(k, c)| {
                let img = pool.image(c.item, res.channels)?;
                let item_seed = derive_seed(seed, &[2, sel.pool as u64, c.item as u64, c.patch as u64, k as u64]);
                let (mut img, mut log) = run_chain(img, &spec.transforms, c.patch, item_seed)?;
                let r = img.resolution();
                if (r.height, r.width) != (res.height, res.width) {
                    img = resize(&img, res.height, res.width);
                    log.push(format!("resize:{}x{}", res.height, res.width));
                }
                Ok(LabeledImage {
                    image: img,
                    label: Label::BACKGROUND,
                    provenance: Provenance {
                        source: format!("{}:{}", pool.id, pool.source),
                        source_index: c.item,
                        transforms: log,
                        source_labels: pool.labels[c.item].clone(),
                    },
                })
            })
            .collect::<Result<_>>()?;
        items.extend(built);
    }
    for source in &spec.sources {
        if let SourceSpec::Monochrome { count, palette_seed } = *source {
            for (i, img) in make_monochrome(count, res, palette_seed)?.into_iter().enumerate() {
                items.push(LabeledImage {
                    image: img,
                    label: Label::BACKGROUND,
                    provenance: Provenance {
                        source: format!("monochrome:{palette_seed}"),
                        source_index: i,
                        transforms: vec!["monochrome".into()],
                        source_labels: vec![],
                    },
                });
            }
        }
    }
    Dataset::new(res, Vec::new(), true, items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::write_idx;

    fn labeled_pool(classes: usize, per_class: usize, side: usize) -> SourcePool {
        let res = Resolution::new(1, side, side);
        let items = (0..classes * per_class)
            .map(|i| LabeledImage {
                image: Image::filled(res, (i % 256) as f64 / 255.0),
                label: Label::Class(i % classes),
                provenance: Provenance::default(),
            })
            .collect();
        let names = (0..classes).map(|c| c.to_string()).collect();
        SourcePool::from_dataset("src", &Dataset::new(res, names, false, items).unwrap())
    }

    fn spec(sources: Vec<SourceSpec>, target: usize, side: usize) -> BackgroundSpec {
        BackgroundSpec {
            pools: vec![],
            sources,
            transforms: vec![],
            excluded_labels: vec![],
            target_size: target,
            resolution: Resolution::new(1, side, side),
            allow_replacement: false,
        }
    }

    fn pool_source(count: SampleCount) -> SourceSpec {
        SourceSpec::Pool {
            pool: "src".into(),
            count,
        }
    }

    #[test]
    fn invert_examples() {
        let img = Image::new(Resolution::new(1, 1, 2), vec![0.25, 0.0]).unwrap();
        assert_eq!(invert_colors(&img).data(), &[0.75, 1.0]);
        assert_eq!(invert_colors(&invert_colors(&img)), img);
    }

    #[test]
    fn monochrome_palettes() {
        let res = Resolution::new(3, 4, 4);
        let one = monochrome_image(res, &[0.5, 0.5, 0.5]).unwrap();
        assert!(one.data().iter().all(|&v| v == 0.5));
        let a = make_monochrome(5, res, 9).unwrap();
        assert_eq!(a, make_monochrome(5, res, 9).unwrap());
        let colors: HashSet<Vec<u64>> = a
            .iter()
            .map(|im| (0..3).map(|c| im.get(c, 0, 0).to_bits()).collect())
            .collect();
        assert_eq!(colors.len(), 5);
        assert_eq!(make_monochrome(256, Resolution::new(1, 2, 2), 1).unwrap().len(), 256);
        assert!(make_monochrome(257, Resolution::new(1, 2, 2), 1).is_err());
        assert!(make_monochrome(0, res, 1).is_err());
    }

    #[test]
    fn heuristic_ranges() {
        assert_eq!(size_heuristic(4500, 10).unwrap(), (450, 4500));
        assert_eq!(size_heuristic(77, 1).unwrap(), (77, 77));
        assert_eq!(size_heuristic(100, 4).unwrap(), (25, 100));
        assert!(size_heuristic(3, 4).is_err());
    }

    #[test]
    fn per_label_recipe_counts() {
        let pool = labeled_pool(47, 510, 2);
        let d = assemble(&spec(vec![pool_source(SampleCount::PerLabel(500))], 23_500, 2), &[pool], 1).unwrap();
        assert_eq!(d.len(), 23_500);
        assert!(d.items().iter().all(|it| it.label.is_background()));
    }

    #[test]
    fn shortfall_reported_per_source() {
        let pool = labeled_pool(1, 10, 2);
        let err = assemble(&spec(vec![pool_source(SampleCount::Total(20))], 20, 2), &[pool], 1).unwrap_err();
        match err {
            Error::Shortfall(v) => assert_eq!(v, vec![Shortfall { source: "src".into(), requested: 20, eligible: 10 }]),
            e => panic!("{e}"),
        }
        let pool = labeled_pool(1, 10, 2);
        let mut s = spec(vec![pool_source(SampleCount::Total(20))], 20, 2);
        s.allow_replacement = true;
        assert_eq!(assemble(&s, &[pool], 1).unwrap().len(), 20);
    }

    #[test]
    fn exclusion_and_determinism() {
        let pool = labeled_pool(4, 20, 3);
        let mut s = spec(vec![pool_source(SampleCount::Total(30))], 30, 3);
        s.excluded_labels = vec!["1".into(), "2".into()];
        s.transforms = vec![Transform::Invert];
        let a = assemble(&s, &[pool], 5).unwrap();
        assert!(a
            .items()
            .iter()
            .all(|it| !it.provenance.source_labels.iter().any(|l| l == "1" || l == "2")));
        assert!(a.items().iter().all(|it| it.provenance.transforms == vec!["invert".to_string()]));
        let b = assemble(&s, &[labeled_pool(4, 20, 3)], 5).unwrap();
        assert_eq!(a, b);
        // 40 eligible after exclusion
        s.target_size = 41;
        s.sources = vec![pool_source(SampleCount::Total(41))];
        assert!(matches!(assemble(&s, &[labeled_pool(4, 20, 3)], 5), Err(Error::Shortfall(_))));
    }

    #[test]
    fn patches_crops_and_output_resolution() {
        let pool = labeled_pool(1, 3, 8);
        let mut s = spec(vec![pool_source(SampleCount::All)], 12, 4);
        s.transforms = vec![Transform::Patches { size: 4, stride: None }];
        let d = assemble(&s, &[pool], 0).unwrap();
        assert_eq!(d.len(), 12);
        assert_eq!(d.items()[1].provenance.transforms, vec!["patch:4x4@0,4".to_string()]);

        let mut s = spec(vec![pool_source(SampleCount::Total(2))], 2, 4);
        s.transforms = vec![Transform::RandomCrop { height: 6, width: 6 }];
        let d = assemble(&s, &[labeled_pool(1, 3, 8)], 0).unwrap();
        assert!(d.items().iter().all(|it| it.image.resolution() == Resolution::new(1, 4, 4)));
        assert_eq!(d.items()[0].provenance.transforms.last().unwrap(), "resize:4x4");
    }

    #[test]
    fn mixed_sources_and_target_mismatch() {
        let s = spec(
            vec![
                pool_source(SampleCount::Total(3)),
                SourceSpec::Monochrome {
                    count: 2,
                    palette_seed: 4,
                },
            ],
            5,
            2,
        );
        let d = assemble(&s, &[labeled_pool(2, 4, 2)], 0).unwrap();
        assert_eq!(d.len(), 5);
        assert_eq!(d.items()[4].provenance.source, "monochrome:4");
        let mut bad = s.clone();
        bad.target_size = 6;
        assert!(assemble(&bad, &[labeled_pool(2, 4, 2)], 0).is_err());
    }

    #[test]
    fn idx_pool_loads() {
        let dir = tempfile::tempdir().unwrap();
        let pool = labeled_pool(3, 2, 4);
        let res = Resolution::new(1, 4, 4);
        let items = (0..6)
            .map(|i| LabeledImage {
                image: Image::filled(res, 0.0),
                label: Label::Class(i % 3),
                provenance: Provenance::default(),
            })
            .collect();
        let ds = Dataset::new(res, vec!["a".into(), "b".into(), "c".into()], false, items).unwrap();
        let (ip, lp) = (dir.path().join("i"), dir.path().join("l"));
        write_idx(&ds, &ip, &lp).unwrap();
        let idx_pool = SourcePool::from_idx("src", &ip, &lp).unwrap();
        assert_eq!(idx_pool.len(), pool.len());
        assert_eq!(idx_pool.labels(4), &["1".to_string()]);
    }
}
