use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use backdrop_core::background::{self, BackgroundSpec};
use backdrop_core::cam::{compute_cam, upsample_cam, write_pgm, write_png, Grid};
use backdrop_core::datasets::{generate_confounded, load_dataset_dir, save_dataset_dir, ConfoundSpec, Label};
use backdrop_core::dff::{self, DEFAULT_ITERS, DEFAULT_RANK};
use backdrop_core::harness::{self, ExperimentConfig};
use backdrop_core::model::Model;
use backdrop_core::raster::Image;
use backdrop_core::training::{self, masked_prediction};
use backdrop_core::Error;

#[derive(Parser)]
#[command(name = "backdrop", version, about = "Train small CNNs with an optional background class and inspect them with CAM and DFF")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a confounded synthetic dataset (train, test and background pool).
    Synth(SynthArgs),
    /// Assemble a background class from source pools.
    BuildBackground(BuildBackgroundArgs),
    /// Train one regime for one seed and save a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset directory.
    Eval(EvalArgs),
    /// Export a class activation map.
    Cam(CamArgs),
    /// Factorize last-layer features and report target coverage.
    Dff(DffArgs),
    /// Run every regime over every seed and tabulate.
    Compare(CompareArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Confound spec (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BuildBackgroundArgs {
    /// Background spec (JSON).
    #[arg(long, visible_alias = "config")]
    spec: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Flags that override the run section of an experiment file.
#[derive(Args, Clone)]
struct RunOverrides {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long = "lambda-l1")]
    lambda_l1: Option<f64>,
    #[arg(long = "mask-background", num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    mask_background: Option<bool>,
}

impl RunOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        for r in &mut cfg.regimes {
            if let Some(e) = self.epochs {
                r.run.epochs = e;
                r.run.schedule.clear();
            }
            if let Some(lr) = self.lr {
                r.run.lr = lr;
                r.run.schedule.clear();
            }
            if let Some(l) = self.lambda_l1 {
                r.run.lambda_l1 = l;
            }
            if let Some(m) = self.mask_background {
                r.run.eval_mask_background = m;
            }
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Regime name from the config; the first one by default.
    #[arg(long)]
    regime: Option<String>,
    /// Run seed; the first configured seed by default.
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: PathBuf,
    /// Base seed: replaces the configured seeds with `seed, seed + 1, ...` (same count).
    #[arg(long)]
    seed: Option<u64>,
    /// Restrict to one configured regime.
    #[arg(long)]
    regime: Option<String>,
    #[command(flatten)]
    run: RunOverrides,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long = "mask-background", num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    mask_background: Option<bool>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// One input image: a file, or an item of a dataset directory.
#[derive(Args)]
struct InputArgs {
    #[arg(long, conflicts_with = "data")]
    image: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    index: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Pgm,
    Png,
    Csv,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    class: usize,
    #[arg(long, value_enum, default_value = "pgm")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DffArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    rank: usize,
    #[arg(long, default_value_t = DEFAULT_ITERS)]
    iters: usize,
    /// Target class; defaults to the item's label, else the masked prediction.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long = "mask-background", num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    mask_background: Option<bool>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Usage(String),
    Config { path: String, message: String },
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { path, message } => Failure::Config { path, message },
            other => Failure::Runtime(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

type Res<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return report(Failure::Usage(first.to_string()));
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

/// Prints a single JSON line on stderr and maps the failure to an exit code.
fn report(f: Failure) -> ExitCode {
    let (line, code) = match f {
        Failure::Usage(message) => (serde_json::json!({"error": "usage", "message": message}), 2),
        Failure::Config { path, message } => (
            serde_json::json!({"error": "config", "path": path, "message": message}),
            2,
        ),
        Failure::Runtime(message) => (serde_json::json!({"error": "runtime", "message": message}), 1),
    };
    eprintln!("{line}");
    ExitCode::from(code)
}

fn dispatch(cmd: Command) -> Res<()> {
    match cmd {
        Command::Synth(a) => synth(a),
        Command::BuildBackground(a) => build_background(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Cam(a) => cam(a),
        Command::Dff(a) => dff_cmd(a),
        Command::Compare(a) => compare(a),
    }
}

fn mkdir(dir: &Path) -> Res<()> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Res<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> Res<()> {
    let spec: ConfoundSpec = match &a.config {
        Some(p) => harness::load_json(p)?,
        None => ConfoundSpec::default(),
    };
    spec.validate().map_err(|e| Failure::Config {
        path: "spec".into(),
        message: e.to_string(),
    })?;
    let set = generate_confounded(&spec, a.seed)?;
    mkdir(&a.out)?;
    save_dataset_dir(&set.train, &a.out.join("train"))?;
    save_dataset_dir(&set.test, &a.out.join("test"))?;
    if !set.background_pool.is_empty() {
        save_dataset_dir(&set.background_pool, &a.out.join("background"))?;
    }
    let mut artifacts = vec!["train/manifest.jsonl", "test/manifest.jsonl"];
    if !set.background_pool.is_empty() {
        artifacts.push("background/manifest.jsonl");
    }
    harness::write_record(&a.out, "synth", &spec, &[a.seed], &artifacts)?;
    println!(
        "train {} test {} background {} -> {}",
        set.train.len(),
        set.test.len(),
        set.background_pool.len(),
        a.out.display()
    );
    Ok(())
}

fn build_background(a: BuildBackgroundArgs) -> Res<()> {
    let spec: BackgroundSpec = harness::load_json(&a.spec)?;
    spec.validate().map_err(|e| Failure::Config {
        path: "spec".into(),
        message: e.to_string(),
    })?;
    for (i, p) in spec.pools.iter().enumerate() {
        let paths: Vec<&Path> = match &p.location {
            background::PoolLocation::Idx { images, labels } => vec![images, labels],
            background::PoolLocation::Dir { dir, labels } => std::iter::once(dir.as_path()).chain(labels.as_deref()).collect(),
            background::PoolLocation::Dataset { dir } => vec![dir],
        };
        if let Some(missing) = paths.iter().find(|p| !p.exists()) {
            return Err(Failure::Config {
                path: format!("pools[{i}]"),
                message: format!("{} does not exist", missing.display()),
            });
        }
    }
    let pools = background::load_pools(&spec)?;
    let d = background::assemble(&spec, &pools, a.seed)?;
    save_dataset_dir(&d, &a.out)?;
    harness::write_record(&a.out, "build-background", &spec, &[a.seed], &["manifest.jsonl"])?;
    println!("{} background images -> {}", d.len(), a.out.display());
    Ok(())
}

fn resolve_out(flag: Option<PathBuf>, cfg: &ExperimentConfig) -> Res<PathBuf> {
    flag.or_else(|| cfg.output.clone())
        .ok_or_else(|| usage("no output directory: pass --out or set \"output\" in the config"))
}

fn train(a: TrainArgs) -> Res<()> {
    let mut cfg = harness::load_config(&a.config)?;
    a.run.apply(&mut cfg);
    let name = match &a.regime {
        Some(n) => n.clone(),
        None => cfg
            .regimes
            .first()
            .map(|r| r.name.clone())
            .ok_or_else(|| Failure::Config {
                path: "regimes".into(),
                message: "no regimes configured".into(),
            })?,
    };
    let regime = cfg.regime(&name)?.clone();
    let seed = a.seed.or(cfg.seeds.first().copied()).unwrap_or(0);
    cfg.regimes = vec![regime.clone()];
    cfg.seeds = vec![seed];
    cfg.validate()?;
    let out = resolve_out(a.out, &cfg)?;
    let bundle = harness::load_bundle(&cfg)?;
    let (cell, model) = training::run_cell_with_model(&bundle, &regime.name, &regime.run, seed, &cfg.compare_options())?;
    mkdir(&out)?;
    model.save(&out.join("model.json"))?;
    harness::write_metrics_csv(&out.join(harness::METRICS_CSV), &harness::metrics_rows(&cfg.name, std::slice::from_ref(&cell)))?;
    harness::write_record(&out, "train", &cfg, &[seed], &["model.json", harness::METRICS_CSV])?;
    println!(
        "{} seed {}: test accuracy {:.4}, empirical error {:.4} -> {}",
        regime.name,
        seed,
        cell.test.accuracy,
        cell.test.empirical_error,
        out.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Res<Model> {
    if !path.exists() {
        return Err(Failure::Config {
            path: "--checkpoint".into(),
            message: format!("{} does not exist", path.display()),
        });
    }
    Ok(Model::load(path)?)
}

#[derive(Serialize)]
struct EvalSummary {
    items: usize,
    mask_background: bool,
    accuracy: f64,
    empirical_error: f64,
}

fn eval(a: EvalArgs) -> Res<()> {
    let model = load_model(&a.checkpoint)?;
    let data = load_dataset_dir(&a.data)?;
    let mask = a.mask_background.unwrap_or(true);
    let m = training::evaluate(&model, &data, mask)?;
    let summary = EvalSummary {
        items: m.items,
        mask_background: mask,
        accuracy: m.accuracy,
        empirical_error: m.empirical_error,
    };
    println!("{}", serde_json::to_string(&summary).map_err(|e| Failure::Runtime(e.to_string()))?);
    if let Some(out) = a.out {
        mkdir(&out)?;
        write_json(&out.join("eval.json"), &m)?;
        let mut w = csv::Writer::from_path(out.join("eval.csv")).map_err(|e| Failure::Runtime(e.to_string()))?;
        w.serialize(&summary).map_err(|e| Failure::Runtime(e.to_string()))?;
        w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
        let resolved = serde_json::json!({
            "checkpoint": a.checkpoint, "data": a.data, "mask_background": mask
        });
        harness::write_record(&out, "eval", &resolved, &[a.seed], &["eval.json", "eval.csv"])?;
    }
    Ok(())
}

/// Returns the image and, for dataset items, its label.
fn load_input(input: &InputArgs, model: &Model) -> Res<(Image, Option<Label>)> {
    let channels = model.config().input.channels;
    match (&input.image, &input.data) {
        (Some(p), _) => Ok((Image::load(p, channels)?, None)),
        (None, Some(dir)) => {
            let d = load_dataset_dir(dir)?;
            let item = d.items().get(input.index).ok_or_else(|| {
                usage(format!("--index {} out of range for {} items", input.index, d.len()))
            })?;
            Ok((item.image.clone(), Some(item.label)))
        }
        (None, None) => Err(usage("pass --image or --data")),
    }
}

fn write_grid(grid: &Grid, path_stem: &Path, format: Format) -> Res<PathBuf> {
    let path = path_stem.with_extension(match format {
        Format::Pgm => "pgm",
        Format::Png => "png",
        Format::Csv => "csv",
    });
    match format {
        Format::Pgm => write_pgm(grid, &path)?,
        Format::Png => write_png(grid, &path)?,
        Format::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_path(&path)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            for row in grid.values.chunks(grid.width) {
                w.serialize(row).map_err(|e| Failure::Runtime(e.to_string()))?;
            }
            w.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
        }
    }
    Ok(path)
}

fn cam(a: CamArgs) -> Res<()> {
    let model = load_model(&a.checkpoint)?;
    let (image, _) = load_input(&a.input, &model)?;
    let features = model.features(&image)?;
    let cam = compute_cam(&features, model.head(), a.class)?;
    let r = image.resolution();
    let up = upsample_cam(&cam, r.height, r.width)?;
    mkdir(&a.out)?;
    let small = write_grid(&cam.map, &a.out.join(format!("cam_class{}", a.class)), a.format)?;
    let large = write_grid(&up, &a.out.join(format!("cam_class{}_upsampled", a.class)), a.format)?;
    let name = |p: &Path| p.file_name().unwrap().to_string_lossy().into_owned();
    let (s, l) = (name(&small), name(&large));
    let resolved = serde_json::json!({
        "checkpoint": a.checkpoint, "image": a.input.image, "data": a.input.data,
        "index": a.input.index, "class": a.class, "score": cam.score, "bias": cam.bias
    });
    harness::write_record(&a.out, "cam", &resolved, &[a.seed], &[&s, &l])?;
    println!(
        "class {} score {:.6}: {}x{} -> {}, {}x{} -> {}",
        a.class,
        cam.score,
        cam.map.height,
        cam.map.width,
        small.display(),
        up.height,
        up.width,
        large.display()
    );
    Ok(())
}

fn dff_cmd(a: DffArgs) -> Res<()> {
    let model = load_model(&a.checkpoint)?;
    let (image, label) = load_input(&a.input, &model)?;
    let mask = a.mask_background.unwrap_or(true);
    let head = &model.config().head;
    let fwd = model.forward(&image)?;
    let target = match (a.class, label) {
        (Some(c), _) => c,
        (None, Some(Label::Class(c))) => c,
        _ => masked_prediction(&fwd.logits, head.num_target_outputs(), mask),
    };
    let f = dff::dff(&fwd.features, a.rank, a.iters, a.seed)?;
    let excluded: Vec<usize> = match head.background_index() {
        Some(b) if mask => vec![b],
        _ => vec![],
    };
    let result = dff::coverage(&f, model.head(), target, &excluded)?;
    mkdir(&a.out)?;
    write_json(
        &a.out.join("dff.json"),
        &serde_json::json!({"factorization": f, "result": result}),
    )?;
    let mut artifacts = vec!["dff.json".to_string()];
    let (h, w) = (fwd.features.shape()[1], fwd.features.shape()[2]);
    let assignment = Grid {
        height: h,
        width: w,
        values: result.cell_assignment.iter().map(|&j| j as f64).collect(),
    };
    let p = write_grid(&assignment, &a.out.join("dff_cells"), a.format)?;
    artifacts.push(p.file_name().unwrap().to_string_lossy().into_owned());
    let trace = a.out.join("dff_trace.csv");
    let mut wtr = csv::Writer::from_path(&trace).map_err(|e| Failure::Runtime(e.to_string()))?;
    wtr.write_record(["iteration", "error"]).map_err(|e| Failure::Runtime(e.to_string()))?;
    for (i, e) in f.error_trace.iter().enumerate() {
        wtr.write_record([(i + 1).to_string(), e.to_string()])
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    wtr.flush().map_err(|e| Failure::Runtime(e.to_string()))?;
    artifacts.push("dff_trace.csv".into());
    let resolved = serde_json::json!({
        "checkpoint": a.checkpoint, "image": a.input.image, "data": a.input.data, "index": a.input.index,
        "rank": a.rank, "iters": a.iters, "class": target, "mask_background": mask
    });
    let refs: Vec<&str> = artifacts.iter().map(String::as_str).collect();
    harness::write_record(&a.out, "dff", &resolved, &[a.seed], &refs)?;
    println!(
        "target {} coverage {:.4} concepts {:?} final error {:.6}",
        target,
        result.coverage,
        result.concept_class,
        f.error_trace.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn compare(a: CompareArgs) -> Res<()> {
    let mut cfg = harness::load_config(&a.config)?;
    a.run.apply(&mut cfg);
    if let Some(base) = a.seed {
        let n = cfg.seeds.len().max(2) as u64;
        cfg.seeds = (base..base + n).collect();
    }
    if let Some(name) = &a.regime {
        let r = cfg.regime(name)?.clone();
        cfg.regimes = vec![r];
    }
    cfg.validate()?;
    let out = resolve_out(a.out, &cfg)?;
    let cmp = harness::run_experiment(&cfg, &out)?;
    print!("{}", harness::render_table(&cmp));
    Ok(())
}
