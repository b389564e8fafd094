//! Compact CNN ending in the CAM-compatible shape:
//! last conv feature map -> global average pool -> one dense head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeometry};
use crate::raster::{Image, Resolution};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "backdrop-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvBlock {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Defaults to `kernel / 2` ("same" padding before striding).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
}

impl ConvBlock {
    pub fn new(channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            channels,
            kernel,
            stride,
            padding: None,
        }
    }

    pub fn padding(&self) -> usize {
        self.padding.unwrap_or(self.kernel / 2)
    }
}

/// How the output layer is laid out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum HeadMode {
    /// One output per target class.
    Baseline { classes: usize },
    /// Target classes plus a trailing background output at index `classes`.
    Background { classes: usize },
    /// One shared head over the concatenated classes of several datasets.
    Multitask { task_classes: Vec<usize> },
}

impl HeadMode {
    pub fn num_outputs(&self) -> usize {
        match self {
            HeadMode::Baseline { classes } => *classes,
            HeadMode::Background { classes } => classes + 1,
            HeadMode::Multitask { task_classes } => task_classes.iter().sum(),
        }
    }

    /// Outputs that are real classes (everything except the background slot).
    pub fn num_target_outputs(&self) -> usize {
        match self {
            HeadMode::Background { classes } => *classes,
            other => other.num_outputs(),
        }
    }

    pub fn background_index(&self) -> Option<usize> {
        match self {
            HeadMode::Background { classes } => Some(*classes),
            _ => None,
        }
    }

    /// `[start, end)` output range per task; a single range for the other modes.
    pub fn task_ranges(&self) -> Vec<(usize, usize)> {
        match self {
            HeadMode::Multitask { task_classes } => {
                let mut start = 0;
                task_classes
                    .iter()
                    .map(|&n| {
                        let r = (start, start + n);
                        start += n;
                        r
                    })
                    .collect()
            }
            other => vec![(0, other.num_target_outputs())],
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadMode::Baseline { .. } => "baseline",
            HeadMode::Background { .. } => "background",
            HeadMode::Multitask { .. } => "multitask",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input: Resolution,
    pub blocks: Vec<ConvBlock>,
    pub head: HeadMode,
}

impl ModelConfig {
    /// Three ReLU conv blocks with two stride-2 stages and K = 32 feature channels.
    pub fn desk(input: Resolution, head: HeadMode) -> Self {
        Self {
            input,
            blocks: vec![
                ConvBlock::new(8, 3, 2),
                ConvBlock::new(16, 3, 2),
                ConvBlock::new(32, 3, 1),
            ],
            head,
        }
    }

    /// Number of channels K of the last convolutional feature map.
    pub fn feature_channels(&self) -> usize {
        self.blocks.last().map_or(self.input.channels, |b| b.channels)
    }

    /// Geometry of every conv block, rejecting configurations that collapse to nothing.
    pub fn geometries(&self) -> Result<Vec<ConvGeometry>> {
        if self.blocks.is_empty() {
            return Err(Error::invalid("model needs at least one conv block"));
        }
        let mut shape = [self.input.channels, self.input.height, self.input.width];
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.channels == 0 || b.kernel == 0 {
                return Err(Error::invalid(format!("block {i}: zero channels or kernel")));
            }
            let geom = ConvGeometry::new(&shape, &[b.channels, shape[0], b.kernel, b.kernel], b.stride, b.padding())
                .map_err(|_| {
                    Error::invalid(format!(
                        "block {i}: spatial extent {}x{} collapses under kernel {} stride {}",
                        shape[1], shape[2], b.kernel, b.stride
                    ))
                })?;
            shape = geom.output_shape();
            out.push(geom);
        }
        Ok(out)
    }

    /// `(h, w)` of the last feature map.
    pub fn feature_extent(&self) -> Result<(usize, usize)> {
        let g = self.geometries()?;
        let last = g.last().expect("non-empty");
        Ok((last.oh, last.ow))
    }

    fn validate(&self) -> Result<()> {
        if self.input.is_empty() {
            return Err(Error::invalid("input resolution must be non-empty"));
        }
        match &self.head {
            HeadMode::Baseline { classes } | HeadMode::Background { classes } if *classes == 0 => {
                return Err(Error::invalid("head needs at least one class"));
            }
            HeadMode::Multitask { task_classes } if task_classes.is_empty() || task_classes.contains(&0) => {
                return Err(Error::invalid("multitask head needs non-empty tasks"));
            }
            _ => {}
        }
        self.geometries().map(|_| ())
    }
}

/// Dense head: `weight` is `[K, num_outputs]` (column `c` is `w^c`), `bias` is `[num_outputs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl HeadWeights {
    pub fn new(weight: Tensor, bias: Tensor) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || ws[1] != bias.len() {
            return Err(Error::Shape {
                op: "head",
                expected: vec![ws.first().copied().unwrap_or(0), bias.len()],
                found: ws.to_vec(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn feature_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_outputs(&self) -> usize {
        self.weight.shape()[1]
    }

    /// `w^c` over the K feature channels.
    pub fn class_weights(&self, class: usize) -> Result<Vec<f64>> {
        let n = self.num_outputs();
        if class >= n {
            return Err(Error::ClassOutOfRange {
                index: class,
                count: n,
            });
        }
        Ok(self.weight.data().iter().skip(class).step_by(n).copied().collect())
    }

    pub fn apply(&self, pooled: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_outputs()];
        kernels::dense_forward(pooled, self.weight.data(), self.bias.data(), &mut out);
        out
    }
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    /// `[K, h, w]` activations of the last conv block (post-ReLU).
    pub features: Tensor,
    pub logits: Vec<f64>,
}

/// Tape handles for every parameter, in declared order.
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub kernels: Vec<Var>,
    pub head_weight: Var,
    pub head_bias: Var,
}

impl ParamVars {
    pub fn all(&self) -> Vec<Var> {
        let mut v = self.kernels.clone();
        v.push(self.head_weight);
        v.push(self.head_bias);
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    geoms: Vec<ConvGeometry>,
    kernels: Vec<Tensor>,
    head: HeadWeights,
}

/// Builds a model with seed-deterministic uniform fan-in scaled initialization.
///
/// Conv kernels draw from `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, the head from
/// `U(-1/sqrt(K), 1/sqrt(K))`; head biases start at zero. Conv blocks carry no
/// bias so an all-zero image produces all-zero features.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let geoms = config.geometries()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut kernels = Vec::with_capacity(geoms.len());
    for g in &geoms {
        let fan_in = g.cin * g.kh * g.kw;
        let bound = (6.0 / fan_in as f64).sqrt();
        let n = g.cout * fan_in;
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        kernels.push(Tensor::new(vec![g.cout, g.cin, g.kh, g.kw], data)?);
    }
    let k = config.feature_channels();
    let n = config.head.num_outputs();
    let bound = 1.0 / (k as f64).sqrt();
    let w = (0..k * n).map(|_| rng.gen_range(-bound..bound)).collect();
    let head = HeadWeights::new(Tensor::new(vec![k, n], w)?, Tensor::zeros(&[n]))?;
    Ok(Model {
        config,
        geoms,
        kernels,
        head,
    })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> &HeadWeights {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut HeadWeights {
        &mut self.head
    }

    pub fn kernels(&self) -> &[Tensor] {
        &self.kernels
    }

    pub fn num_outputs(&self) -> usize {
        self.head.num_outputs()
    }

    /// All parameters in declared order: conv kernels, head weight, head bias.
    pub fn params(&self) -> Vec<&Tensor> {
        let mut v: Vec<&Tensor> = self.kernels.iter().collect();
        v.push(&self.head.weight);
        v.push(&self.head.bias);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v: Vec<&mut Tensor> = self.kernels.iter_mut().collect();
        v.push(&mut self.head.weight);
        v.push(&mut self.head.bias);
        v
    }

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.resolution() != self.config.input {
            let r = image.resolution();
            let e = self.config.input;
            return Err(Error::Shape {
                op: "forward",
                expected: vec![e.channels, e.height, e.width],
                found: vec![r.channels, r.height, r.width],
            });
        }
        Ok(())
    }

    /// Last-layer features of `image`.
    pub fn features(&self, image: &Image) -> Result<Tensor> {
        self.check_input(image)?;
        let mut x = image.data().to_vec();
        for (g, k) in self.geoms.iter().zip(&self.kernels) {
            let mut out = vec![0.0; g.cout * g.oh * g.ow];
            kernels::conv2d_forward(g, &x, k.data(), &mut out);
            kernels::relu_inplace(&mut out);
            x = out;
        }
        let g = self.geoms.last().expect("validated");
        Tensor::new(vec![g.cout, g.oh, g.ow], x)
    }

    pub fn forward(&self, image: &Image) -> Result<Forward> {
        let features = self.features(image)?;
        let pooled = kernels::global_avg_pool(features.data(), features.shape()[0]);
        let logits = self.head.apply(&pooled);
        Ok(Forward { features, logits })
    }

    /// Registers the parameters on `tape`. Frozen conv kernels become constants.
    pub fn register(&self, tape: &mut Tape, freeze_features: bool) -> ParamVars {
        let kernels = self
            .kernels
            .iter()
            .map(|k| {
                if freeze_features {
                    tape.constant(k.clone())
                } else {
                    tape.leaf(k.clone())
                }
            })
            .collect();
        ParamVars {
            kernels,
            head_weight: tape.leaf(self.head.weight.clone()),
            head_bias: tape.leaf(self.head.bias.clone()),
        }
    }

    /// Differentiable forward pass; returns `(features, logits)`.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &ParamVars, image: &Image) -> Result<(Var, Var)> {
        self.check_input(image)?;
        let mut x = tape.constant(image.to_tensor());
        for (g, &k) in self.geoms.iter().zip(&params.kernels) {
            let y = tape.conv2d(x, k, g.stride, g.padding)?;
            x = tape.relu(y);
        }
        let pooled = tape.global_avg_pool(x)?;
        let logits = tape.dense(pooled, params.head_weight, params.head_bias)?;
        Ok((x, logits))
    }

    /// `(total, head)` trainable parameter counts.
    pub fn parameter_count(&self) -> (usize, usize) {
        let head = self.head.weight.len() + self.head.bias.len();
        let conv: usize = self.kernels.iter().map(Tensor::len).sum();
        (conv + head, head)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .params()
                .iter()
                .zip(self.param_names())
                .map(|(t, name)| NamedParam {
                    name,
                    shape: t.shape().to_vec(),
                    values: t.data().to_vec(),
                })
                .collect(),
        };
        let text = serde_json::to_string(&ckpt)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ckpt.format,
                ckpt.version
            )));
        }
        let mut model = build_model(ckpt.config, 0)?;
        let names = model.param_names();
        if ckpt.params.len() != names.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameter arrays, model expects {}",
                ckpt.params.len(),
                names.len()
            )));
        }
        for ((dst, src), name) in model.params_mut().into_iter().zip(ckpt.params).zip(names) {
            if src.name != name || src.shape != dst.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    expected: dst.shape().to_vec(),
                    found: src.shape,
                });
            }
            *dst = Tensor::new(src.shape, src.values)?;
        }
        Ok(model)
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = (0..self.kernels.len()).map(|i| format!("conv{i}.kernel")).collect();
        v.push("head.weight".into());
        v.push("head.bias".into());
        v
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<NamedParam>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NamedParam {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}
