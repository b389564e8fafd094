//! Synthetic confounded datasets: a foreground shape identifies the class, and a
//! background texture agrees with the class at a configurable rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Dataset, Label, LabeledImage, Provenance};
use crate::error::{Error, Result};
use crate::raster::{Image, Resolution};
use crate::seed::derive_seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    Disk,
    Cross,
    Bar,
    Ring,
    Square,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 6] = [
        Shape::Disk,
        Shape::Cross,
        Shape::Bar,
        Shape::Ring,
        Shape::Square,
        Shape::Triangle,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Shape::Disk => "disk",
            Shape::Cross => "cross",
            Shape::Bar => "bar",
            Shape::Ring => "ring",
            Shape::Square => "square",
            Shape::Triangle => "triangle",
        }
    }

    /// Membership in normalized coordinates (unit radius).
    fn contains(&self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Disk => r2 <= 1.0,
            Shape::Ring => (0.36..=1.0).contains(&r2),
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Bar => u.abs() <= 1.0 && v.abs() <= 0.35,
            Shape::Triangle => (-0.9..=0.8).contains(&v) && u.abs() <= 0.55 * (v + 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfoundSpec {
    pub num_classes: usize,
    /// Shape of class `c` is `shapes[c]`.
    pub shapes: Vec<Shape>,
    pub num_textures: usize,
    /// Probability that a train item sits on its class's home texture
    /// (`class mod num_textures`); otherwise the texture is uniform over all ids.
    pub rho_train: f64,
    pub rho_test: f64,
    pub train_count: usize,
    pub test_count: usize,
    pub background_count: usize,
    /// Amplitude of additive uniform noise.
    pub noise: f64,
    pub resolution: Resolution,
    /// Shape radius range as a fraction of the shorter image side.
    pub shape_radius: (f64, f64),
    /// Foreground intensity.
    pub foreground: f64,
    /// Texture pixel range `[texture_low, texture_low + texture_contrast]`.
    pub texture_low: f64,
    pub texture_contrast: f64,
}

impl Default for ConfoundSpec {
    fn default() -> Self {
        Self {
            num_classes: 2,
            shapes: vec![Shape::Disk, Shape::Cross],
            num_textures: 4,
            rho_train: 0.95,
            rho_test: 0.0,
            train_count: 4000,
            test_count: 2000,
            background_count: 2000,
            noise: 0.1,
            resolution: Resolution::new(1, 28, 28),
            shape_radius: (0.2, 0.3),
            foreground: 0.9,
            texture_low: 0.1,
            texture_contrast: 0.5,
        }
    }
}

impl ConfoundSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(format!("confound spec: {m}")));
        if self.num_classes == 0 || self.shapes.len() < self.num_classes {
            return bad("need one shape per class");
        }
        if self.num_textures == 0 {
            return bad("need at least one texture");
        }
        if !(0.0..=1.0).contains(&self.rho_train) || !(0.0..=1.0).contains(&self.rho_test) {
            return bad("rho values must lie in [0, 1]");
        }
        if !matches!(self.resolution.channels, 1 | 3) || self.resolution.height < 4 || self.resolution.width < 4 {
            return bad("resolution must be 1 or 3 channels and at least 4x4");
        }
        let (lo, hi) = self.shape_radius;
        if !(lo > 0.0 && lo <= hi && hi < 0.5) {
            return bad("shape radius must satisfy 0 < lo <= hi < 0.5");
        }
        if !(0.0..=1.0).contains(&self.foreground) || self.noise < 0.0 {
            return bad("foreground must lie in [0, 1] and noise must be nonnegative");
        }
        if self.texture_low < 0.0 || self.texture_contrast < 0.0 || self.texture_low + self.texture_contrast > 1.0 {
            return bad("texture range must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        self.shapes[..self.num_classes].iter().map(|s| s.name().to_string()).collect()
    }

    pub fn home_texture(&self, class: usize) -> usize {
        class % self.num_textures
    }
}

/// Output of [`generate_confounded`].
#[derive(Debug, Clone)]
pub struct ConfoundSet {
    pub train: Dataset,
    pub test: Dataset,
    /// Texture-only images labeled background.
    pub background_pool: Dataset,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_BACKGROUND: u64 = 3;

/// Per-texture RGB tint for 3-channel outputs.
fn tint(texture: usize) -> [f64; 3] {
    const TINTS: [[f64; 3]; 6] = [
        [1.0, 0.55, 0.45],
        [0.45, 1.0, 0.55],
        [0.5, 0.6, 1.0],
        [1.0, 1.0, 0.45],
        [0.9, 0.45, 1.0],
        [0.45, 1.0, 1.0],
    ];
    TINTS[texture % TINTS.len()]
}

/// Binary pattern value of texture `id` at `(y, x)` with phase offsets.
fn pattern(id: usize, y: usize, x: usize, py: usize, px: usize) -> f64 {
    let period = if id < 6 { 2 } else { 3 };
    let (yy, xx) = (y + py, x + px);
    let on = match id % 6 {
        0 => (yy / period) % 2 == 0,
        1 => (xx / period) % 2 == 0,
        2 => (yy / period + xx / period) % 2 == 0,
        3 => ((yy + xx) / period) % 2 == 0,
        4 => ((xx + 4 * period * 8 - y) / period) % 2 == 0,
        _ => yy % (2 * period) == 0 && xx % (2 * period) == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Renders texture `id` with a random phase.
pub fn render_texture(spec: &ConfoundSpec, id: usize, rng: &mut impl Rng) -> Image {
    let res = spec.resolution;
    let (py, px) = (rng.gen_range(0..8), rng.gen_range(0..8));
    let mut img = Image::filled(res, 0.0);
    let t = tint(id);
    for y in 0..res.height {
        for x in 0..res.width {
            let v = spec.texture_low + spec.texture_contrast * pattern(id, y, x, py, px);
            for c in 0..res.channels {
                let scale = if res.channels == 3 { t[c] } else { 1.0 };
                img.set(c, y, x, v * scale);
            }
        }
    }
    img
}

/// Anti-aliased coverage mask (4x4 supersampling) of a shape.
pub fn render_shape(shape: Shape, height: usize, width: usize, cy: f64, cx: f64, radius: f64) -> Vec<f64> {
    const SS: usize = 4;
    let mut mask = vec![0.0; height * width];
    for y in 0..height {
        for x in 0..width {
            let mut hits = 0;
            for sy in 0..SS {
                for sx in 0..SS {
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    if shape.contains((px - cx) / radius, (py - cy) / radius) {
                        hits += 1;
                    }
                }
            }
            mask[y * width + x] = hits as f64 / (SS * SS) as f64;
        }
    }
    mask
}

fn add_noise(img: &mut Image, noise: f64, rng: &mut impl Rng) {
    if noise > 0.0 {
        for v in img.data_mut() {
            *v = (*v + rng.gen_range(-noise..=noise)).clamp(0.0, 1.0);
        }
    }
}

fn draw_texture(spec: &ConfoundSpec, class: usize, rho: f64, rng: &mut impl Rng) -> usize {
    if rng.gen_bool(rho) {
        spec.home_texture(class)
    } else {
        rng.gen_range(0..spec.num_textures)
    }
}

fn foreground_item(spec: &ConfoundSpec, split: &str, index: usize, rho: f64, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let class = index % spec.num_classes;
    let texture = draw_texture(spec, class, rho, &mut rng);
    let mut img = render_texture(spec, texture, &mut rng);
    let res = spec.resolution;
    let side = res.height.min(res.width) as f64;
    let (lo, hi) = spec.shape_radius;
    let radius = side * if hi > lo { rng.gen_range(lo..=hi) } else { lo };
    let cy = rng.gen_range(radius..=res.height as f64 - radius);
    let cx = rng.gen_range(radius..=res.width as f64 - radius);
    let shape = spec.shapes[class];
    let mask = render_shape(shape, res.height, res.width, cy, cx, radius);
    let plane = res.height * res.width;
    for c in 0..res.channels {
        for (i, &a) in mask.iter().enumerate() {
            let v = &mut img.data_mut()[c * plane + i];
            *v = a * spec.foreground + (1.0 - a) * *v;
        }
    }
    add_noise(&mut img, spec.noise, &mut rng);
    LabeledImage {
        image: img,
        label: Label::Class(class),
        provenance: Provenance {
            source: format!("synthetic/{split}"),
            source_index: index,
            transforms: vec![],
            source_labels: vec![format!("shape:{}", shape.name()), format!("texture:{texture}")],
        },
    }
}

fn background_item(spec: &ConfoundSpec, index: usize, seed: u64) -> LabeledImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texture = rng.gen_range(0..spec.num_textures);
    let mut img = render_texture(spec, texture, &mut rng);
    add_noise(&mut img, spec.noise, &mut rng);
    LabeledImage {
        image: img,
        label: Label::BACKGROUND,
        provenance: Provenance {
            source: "synthetic/background".into(),
            source_index: index,
            transforms: vec![],
            source_labels: vec![format!("texture:{texture}")],
        },
    }
}

/// Generates train, test and background-pool splits. Each item draws from its own
/// seed derived from `(seed, split, index)`, so splits are independent streams.
pub fn generate_confounded(spec: &ConfoundSpec, seed: u64) -> Result<ConfoundSet> {
    spec.validate()?;
    let names = spec.class_names();
    let split = |name: &str, stream: u64, count: usize, rho: f64| -> Result<Dataset> {
        let items = (0..count)
            .map(|i| foreground_item(spec, name, i, rho, derive_seed(seed, &[stream, i as u64])))
            .collect();
        Dataset::new(spec.resolution, names.clone(), false, items)
    };
    let train = split("train", STREAM_TRAIN, spec.train_count, spec.rho_train)?;
    let test = split("test", STREAM_TEST, spec.test_count, spec.rho_test)?;
    let bg_items = (0..spec.background_count)
        .map(|i| background_item(spec, i, derive_seed(seed, &[STREAM_BACKGROUND, i as u64])))
        .collect();
    let background_pool = Dataset::new(spec.resolution, names.clone(), spec.background_count > 0, bg_items)?;
    Ok(ConfoundSet {
        train,
        test,
        background_pool,
    })
}

/// Texture id recorded in an item's provenance.
pub fn texture_of(item: &LabeledImage) -> Option<usize> {
    item.provenance
        .source_labels
        .iter()
        .find_map(|l| l.strip_prefix("texture:")?.parse().ok())
}
