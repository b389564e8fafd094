//! Acceptance suite. Every test prints one `PASS`/`FAIL` line for its criterion
//! before asserting. The line goes straight to stdout, past the test harness
//! capture, so it shows up in a plain `cargo test` run too.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use backdrop_core::autodiff::{Tape, Var};
use backdrop_core::background::{self, BackgroundSpec, SampleCount, SourceSpec};
use backdrop_core::cam::compute_cam;
use backdrop_core::datasets::{load_idx, read_idx_images, read_idx_labels, write_idx, Dataset, Label, LabeledImage, Provenance};
use backdrop_core::dff::{frobenius_residual, nmf};
use backdrop_core::harness::{self, ExperimentConfig};
use backdrop_core::model::{build_model, HeadMode, ModelConfig};
use backdrop_core::raster::{Image, Resolution};
use backdrop_core::tensor::Tensor;
use backdrop_core::training::{self, masked_prediction, train_step, RunConfig};
use backdrop_core::Error;

fn verdict(id: u32, ok: bool, detail: impl AsRef<str>) {
    // Bypasses libtest's capture, which only hooks the print macros.
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{} criterion {id}: {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref());
    let _ = out.flush();
    assert!(ok, "criterion {id} failed: {}", detail.as_ref());
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

// ---- 1: gradients against central differences ----

const FD_EPS: f64 = 1e-4;
const FD_TOL: f64 = 1e-4;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Largest elementwise relative error between the tape gradient and central
/// differences of `f` with respect to every input.
fn gradient_error(inputs: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).data()[0]
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v);
        for j in 0..inputs[i].len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += FD_EPS;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * FD_EPS;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * FD_EPS);
            let a = analytic[j];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-8 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
        }
    }
    worst
}

/// Conv output reduced to one number by a second, full-extent convolution
/// with fixed weights (a random linear readout).
fn conv_readout(tape: &mut Tape, v: &[Var], readout: &Tensor, stride: usize, padding: usize) -> Var {
    let y = tape.conv2d(v[0], v[1], stride, padding).unwrap();
    let r = tape.constant(readout.clone());
    tape.conv2d(y, r, 1, 0).unwrap()
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let mut worst = [0.0f64; 5];
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // conv2d: [2,5,5] input, [3,2,3,3] kernel, varying stride/padding.
        let (stride, padding) = (1 + (seed % 2) as usize, (seed % 3) as usize % 2);
        let x = random_tensor(&mut rng, &[2, 5, 5]);
        let k = random_tensor(&mut rng, &[3, 2, 3, 3]);
        let o = (5 + 2 * padding - 3) / stride + 1;
        let readout = random_tensor(&mut rng, &[1, 3, o, o]);
        let e = gradient_error(&[x, k], &|t, v| conv_readout(t, v, &readout, stride, padding));
        worst[0] = worst[0].max(e);

        // dense followed by a fixed linear readout.
        let (kin, n) = (rng.gen_range(1..8), rng.gen_range(1..6));
        let x = random_tensor(&mut rng, &[kin]);
        let w = random_tensor(&mut rng, &[kin, n]);
        let b = random_tensor(&mut rng, &[n]);
        let rw = random_tensor(&mut rng, &[n, 1]);
        let e = gradient_error(&[x, w, b], &|t, v| {
            let y = t.dense(v[0], v[1], v[2]).unwrap();
            let (rw, rb) = (t.constant(rw.clone()), t.constant(Tensor::zeros(&[1])));
            t.dense(y, rw, rb).unwrap()
        });
        worst[1] = worst[1].max(e);

        // conv -> relu -> pool -> dense -> cross-entropy. Inputs whose
        // pre-activations sit within 1e-3 of the kink are redrawn.
        let (x, k) = loop {
            let x = random_tensor(&mut rng, &[2, 6, 6]);
            let k = random_tensor(&mut rng, &[4, 2, 3, 3]);
            let mut t = Tape::new();
            let (xv, kv) = (t.constant(x.clone()), t.constant(k.clone()));
            let z = t.conv2d(xv, kv, 1, 1).unwrap();
            if t.value(z).data().iter().all(|v| v.abs() > 1e-3) {
                break (x, k);
            }
        };
        let w = random_tensor(&mut rng, &[4, 3]);
        let b = random_tensor(&mut rng, &[3]);
        let label = rng.gen_range(0..3);
        let e = gradient_error(&[x, k, w, b], &|t, v| {
            let z = t.conv2d(v[0], v[1], 1, 1).unwrap();
            let a = t.relu(z);
            let p = t.global_avg_pool(a).unwrap();
            let l = t.dense(p, v[2], v[3]).unwrap();
            t.softmax_cross_entropy(l, label).unwrap()
        });
        worst[2] = worst[2].max(e);

        // softmax cross-entropy alone.
        let n = rng.gen_range(2..10);
        let mut logits = random_tensor(&mut rng, &[n]);
        logits.data_mut().iter_mut().for_each(|v| *v *= 4.0);
        let label = rng.gen_range(0..n);
        let e = gradient_error(&[logits], &|t, v| t.softmax_cross_entropy(v[0], label).unwrap());
        worst[3] = worst[3].max(e);

        // L1 over two parameter tensors, away from zero.
        let lambda = rng.gen_range(1e-4..1.0);
        let mut p1 = random_tensor(&mut rng, &[3, 4]);
        let mut p2 = random_tensor(&mut rng, &[5]);
        for v in p1.data_mut().iter_mut().chain(p2.data_mut()) {
            if v.abs() < 1e-3 {
                *v = 0.5;
            }
        }
        let e = gradient_error(&[p1, p2], &|t, v| t.l1_penalty(v, lambda).unwrap());
        worst[4] = worst[4].max(e);
    }
    let names = ["conv2d", "dense", "relu composite", "softmax cross-entropy", "l1"];
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, w)| format!("{n} {w:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(1, worst.iter().all(|&w| w < FD_TOL), format!("max relative error over 100 seeds: {detail} (tol {FD_TOL:e})"));
}

// ---- 2: score equals mean CAM plus bias ----

#[test]
fn criterion_2_cam_identity() {
    let res = Resolution::new(1, 28, 28);
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let model = build_model(ModelConfig::desk(res, HeadMode::Background { classes: 2 }), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let image = Image::new(res, (0..res.len()).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let fwd = model.forward(&image).unwrap();
        let (k, cells) = (fwd.features.shape()[0], fwd.features.shape()[1] * fwd.features.shape()[2]);
        let head = model.head();
        let n = head.num_outputs();
        for c in 0..n {
            let cam = compute_cam(&fwd.features, head, c).unwrap();
            // Independent map: sum_k w_k^c f_k(x, y).
            let manual: Vec<f64> = (0..cells)
                .map(|p| (0..k).map(|j| head.weight.data()[j * n + c] * fwd.features.data()[j * cells + p]).sum())
                .collect();
            for (a, b) in cam.map.values.iter().zip(&manual) {
                worst = worst.max((a - b).abs());
            }
            let mean = cam.map.values.iter().sum::<f64>() / cells as f64;
            worst = worst.max((fwd.logits[c] - (mean + head.bias.data()[c])).abs());
            worst = worst.max((cam.score - fwd.logits[c]).abs());
        }
    }
    verdict(2, worst < 1e-9, format!("max |S_c - (mean M_c + b_c)| = {worst:.2e} over 100 inputs x 3 classes"));
}

// ---- 3: masked prediction ignores the background slot ----

#[test]
fn criterion_3_masked_argmax_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for _ in 0..1000 {
        let nc = rng.gen_range(1..12);
        let mut logits: Vec<f64> = (0..=nc).map(|_| rng.gen_range(-10.0..10.0)).collect();
        let expected = (0..nc).fold(0, |best, i| if logits[i] > logits[best] { i } else { best });
        let base = masked_prediction(&logits, nc, true);
        ok &= base == expected && base < nc;
        for _ in 0..5 {
            logits[nc] = rng.gen_range(-1e6..1e6);
            ok &= masked_prediction(&logits, nc, true) == base;
        }
        logits[nc] = f64::MAX;
        ok &= masked_prediction(&logits, nc, true) == base;
        ok &= masked_prediction(&logits, nc, false) == nc;
    }
    verdict(3, ok, "1000 random logit vectors, background perturbed 6 times each");
}

// ---- 4: reported losses equal independent recomputation ----

fn cross_entropy(logits: &[f64], label: usize) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - logits[label]
}

#[test]
fn criterion_4_loss_recomputation() {
    use backdrop_core::datasets::{append_background, generate_confounded, ConfoundSpec};
    let spec = ConfoundSpec {
        train_count: 40,
        test_count: 30,
        background_count: 10,
        ..ConfoundSpec::default()
    };
    let set = generate_confounded(&spec, 4).unwrap();
    let train = append_background(&set.train, &set.background_pool).unwrap();
    let run = RunConfig {
        mode: training::Regime::Background,
        lambda_l1: 1e-3,
        batch_size: 8,
        seed: 4,
        ..RunConfig::default()
    };
    let mut model = build_model(ModelConfig::desk(train.resolution(), run.head_for(&train)), 4).unwrap();
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for step in 0..10 {
        let batch: Vec<usize> = (0..8).map(|_| rng.gen_range(0..train.len())).collect();
        let before = model.clone();
        let rec = train_step(&mut model, &train, &batch, &run, 0.05, step).unwrap();
        let ce = batch
            .iter()
            .map(|&i| {
                let it = &train.items()[i];
                cross_entropy(&before.forward(&it.image).unwrap().logits, train.output_index(it.label))
            })
            .sum::<f64>()
            / batch.len() as f64;
        let l1 = run.lambda_l1 * before.params().iter().flat_map(|p| p.data()).map(|w| w.abs()).sum::<f64>();
        worst = worst.max((rec.cross_entropy - ce).abs()).max((rec.l1 - l1).abs()).max((rec.loss - (ce + l1)).abs());
    }
    let metrics = training::evaluate(&model, &set.test, true).unwrap();
    let losses: Vec<f64> = set
        .test
        .items()
        .iter()
        .map(|it| cross_entropy(&model.forward(&it.image).unwrap().logits, set.test.output_index(it.label)))
        .collect();
    let emp = losses.iter().sum::<f64>() / losses.len() as f64;
    worst = worst.max((metrics.empirical_error - emp).abs());
    verdict(4, worst < 1e-9, format!("max deviation from recomputed loss terms = {worst:.2e}"));
}

// ---- 5: NMF ----

#[test]
fn criterion_5_nmf_properties() {
    let mut monotone = true;
    let mut worst_rise = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let (rows, cols) = (rng.gen_range(2..40), rng.gen_range(2..60));
        let rank = rng.gen_range(1..=rows.min(cols).min(6));
        let a: Vec<f64> = (0..rows * cols).map(|_| rng.gen::<f64>() * if rng.gen_bool(0.3) { 0.0 } else { 1.0 }).collect();
        let f = nmf(&a, rows, cols, rank, 200, seed).unwrap();
        let last = frobenius_residual(&a, &f.basis, &f.loadings, rows, rank, cols);
        monotone &= (f.error_trace.last().unwrap() - last).abs() <= 1e-12 * last.max(1.0);
        let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        for w in f.error_trace.windows(2) {
            // Lee-Seung updates never increase the residual; allow rounding noise
            // on the scale of ||A|| only.
            let rise = (w[1] - w[0]) / norm;
            worst_rise = worst_rise.max(rise);
            monotone &= w[1] <= w[0] + 1e-12 * norm;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (rows, cols) = (32, 49);
    let u: Vec<f64> = (0..rows).map(|_| rng.gen_range(0.1..2.0)).collect();
    let v: Vec<f64> = (0..cols).map(|_| rng.gen_range(0.1..2.0)).collect();
    let a: Vec<f64> = u.iter().flat_map(|x| v.iter().map(move |y| x * y)).collect();
    let f = nmf(&a, rows, cols, 1, 200, 7).unwrap();
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let rel = frobenius_residual(&a, &f.basis, &f.loadings, rows, 1, cols) / norm;
    verdict(
        5,
        monotone && rel < 1e-3,
        format!("100 matrices non-increasing (largest rise / ||A|| {worst_rise:.1e}); rank-1 relative error {rel:.2e}"),
    );
}

// ---- 6: confound experiment ----

/// Frozen from pilot runs on the fixture config; see the README.
const MIN_ACCURACY_GAIN: f64 = 0.03;
const MIN_COVERAGE_GAIN: f64 = 0.05;

#[test]
fn criterion_6_confound_experiment() {
    let cfg = harness::load_config(&fixture("confound.json")).unwrap();
    assert_eq!(cfg.seeds.len(), 5);
    assert!(cfg.regimes.iter().all(|r| r.run.total_epochs() <= 10));
    let start = std::time::Instant::now();
    let out = tempfile::tempdir().unwrap();
    let cmp = harness::run_experiment(&cfg, out.path()).unwrap();
    let get = |name: &str| cmp.summaries.iter().find(|s| s.regime == name).unwrap().clone();
    let (base, bg) = (get("baseline"), get("background"));
    let (acc_gain, cov_gain) = (
        bg.mean_accuracy - base.mean_accuracy,
        bg.mean_coverage.unwrap() - base.mean_coverage.unwrap(),
    );
    print!("{}", harness::render_table(&cmp));
    verdict(
        6,
        acc_gain >= MIN_ACCURACY_GAIN && cov_gain >= MIN_COVERAGE_GAIN,
        format!(
            "accuracy {:.2}% -> {:.2}% (+{:.2} pp, need {:.0}), coverage {:.2}% -> {:.2}% (+{:.2} pp, need {:.0}), {:.0}s",
            100.0 * base.mean_accuracy,
            100.0 * bg.mean_accuracy,
            100.0 * acc_gain,
            100.0 * MIN_ACCURACY_GAIN,
            100.0 * base.mean_coverage.unwrap(),
            100.0 * bg.mean_coverage.unwrap(),
            100.0 * cov_gain,
            100.0 * MIN_COVERAGE_GAIN,
            start.elapsed().as_secs_f64()
        ),
    );
}

// ---- 7: background class construction ----

fn labeled_pool(labels: usize, per_label: usize, rng: &mut ChaCha8Rng) -> Dataset {
    let res = Resolution::new(1, 28, 28);
    let items = (0..labels * per_label)
        .map(|i| LabeledImage {
            image: Image::new(res, (0..res.len()).map(|_| f64::from(rng.gen::<u8>()) / 255.0).collect()).unwrap(),
            label: Label::Class(i % labels),
            provenance: Provenance::default(),
        })
        .collect();
    Dataset::new(res, (0..labels).map(|l| l.to_string()).collect(), false, items).unwrap()
}

#[test]
fn criterion_7_background_construction() {
    let dir = tempfile::tempdir().unwrap();
    let (images, labels) = (dir.path().join("images.idx"), dir.path().join("labels.idx"));
    write_idx(&labeled_pool(47, 510, &mut ChaCha8Rng::seed_from_u64(7)), &images, &labels).unwrap();
    let spec: BackgroundSpec = serde_json::from_value(serde_json::json!({
        "pools": [{"id": "letters", "idx": {"images": images, "labels": labels}}],
        "sources": [],
        "target_size": 23500,
        "resolution": {"channels": 1, "height": 28, "width": 28}
    }))
    .unwrap();
    let spec = BackgroundSpec {
        sources: vec![SourceSpec::Pool {
            pool: "letters".into(),
            count: SampleCount::PerLabel(500),
        }],
        ..spec
    };
    let pools = background::load_pools(&spec).unwrap();
    let d = background::assemble(&spec, &pools, 7).unwrap();
    let mut per_label = std::collections::BTreeMap::<String, usize>::new();
    for it in d.items() {
        *per_label.entry(it.provenance.source_labels[0].clone()).or_default() += 1;
    }
    let all_background = d.items().iter().all(|it| it.label.is_background());
    let (lo, hi) = background::size_heuristic(4500, 10).unwrap();
    verdict(
        7,
        d.len() == 23_500
            && all_background
            && per_label.len() == 47
            && per_label.values().all(|&n| n == 500)
            && (lo, hi) == (450, 4500)
            && (lo..=hi).contains(&3001),
        format!("{} items over {} labels; size_heuristic(4500, 10) = [{lo}, {hi}]", d.len(), per_label.len()),
    );
}

// ---- 8: IDX ----

#[test]
fn criterion_8_idx_round_trip_and_rejection() {
    let dir = tempfile::tempdir().unwrap();
    let mut ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(800 + seed);
        let (h, w, n, classes) = (rng.gen_range(1..30), rng.gen_range(1..30), rng.gen_range(1..50), rng.gen_range(1..=10));
        let res = Resolution::new(1, h, w);
        let bytes: Vec<u8> = (0..n * h * w).map(|_| rng.gen()).collect();
        let label_bytes: Vec<u8> = (0..n).map(|_| rng.gen_range(0..classes) as u8).collect();
        let items = (0..n)
            .map(|i| LabeledImage {
                image: Image::from_bytes_interleaved(res, &bytes[i * h * w..(i + 1) * h * w]).unwrap(),
                label: Label::Class(label_bytes[i] as usize),
                provenance: Provenance::default(),
            })
            .collect();
        let d = Dataset::new(res, (0..classes).map(|c| c.to_string()).collect(), false, items).unwrap();
        let (ip, lp) = (dir.path().join(format!("i{seed}")), dir.path().join(format!("l{seed}")));
        write_idx(&d, &ip, &lp).unwrap();
        let (rows, cols, raw) = read_idx_images(&ip).unwrap();
        ok &= (rows, cols) == (h, w) && raw == bytes && read_idx_labels(&lp).unwrap() == label_bytes;
        let back = load_idx(&ip, &lp).unwrap();
        ok &= back.len() == n
            && back
                .items()
                .iter()
                .zip(d.items())
                .all(|(a, b)| a.label == b.label && a.image.data() == b.image.data());
    }

    let (ip, lp) = (dir.path().join("i0"), dir.path().join("l0"));
    let good = std::fs::read(&ip).unwrap();
    let good_labels = std::fs::read(&lp).unwrap();
    let bad = dir.path().join("bad");
    let mut rejected = Vec::new();
    let mut check = |bytes: &[u8], images: bool, needle: &str| {
        std::fs::write(&bad, bytes).unwrap();
        let r = if images {
            read_idx_images(&bad).map(|_| ())
        } else {
            read_idx_labels(&bad).map(|_| ())
        };
        let hit = matches!(&r, Err(Error::Idx { message, .. }) if message.contains(needle));
        rejected.push(hit);
        if !hit {
            println!("unexpected result for {needle:?}: {r:?}");
        }
    };
    let mut wrong_magic = good.clone();
    wrong_magic[3] = 0x01;
    check(&wrong_magic, true, "magic");
    check(&good_labels, true, "magic");
    check(&good[..6], true, "truncated");
    check(&good[..good.len() - 1], true, "truncated");
    check(&good_labels[..good_labels.len() - 1], false, "truncated");
    check(&good, false, "magic");
    ok &= rejected.iter().all(|&r| r);
    verdict(8, ok, format!("20 randomized round trips; {}/{} malformed files rejected", rejected.iter().filter(|&&r| r).count(), rejected.len()));
}

// ---- 9: determinism ----

#[test]
fn criterion_9_byte_identical_metrics() {
    std::env::set_var(harness::THREADS_ENV, "1");
    let cfg: ExperimentConfig = harness::load_config(&fixture("determinism.json")).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    harness::run_experiment(&cfg, a.path()).unwrap();
    harness::run_experiment(&cfg, b.path()).unwrap();
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    let same = [harness::METRICS_CSV, harness::COMPARISON_CSV]
        .iter()
        .all(|f| read(a.path(), f) == read(b.path(), f));
    let rows = String::from_utf8(read(a.path(), harness::METRICS_CSV)).unwrap().lines().count();
    verdict(9, same && rows > 1, format!("two single-threaded runs, {rows} metrics lines, identical bytes: {same}"));
}
