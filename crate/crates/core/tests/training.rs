use backdrop_core::datasets::{append_background, generate_confounded, ConfoundSpec};
use backdrop_core::model::{build_model, ModelConfig};
use backdrop_core::training::{masked_prediction, train_step, Regime, RunConfig};

#[test]
fn fixed_batch_loss_decreases_over_first_epochs() {
    let spec = ConfoundSpec {
        train_count: 64,
        test_count: 2,
        background_count: 2,
        ..ConfoundSpec::default()
    };
    let set = generate_confounded(&spec, 11).unwrap();
    let run = RunConfig::default();
    let mut model = build_model(ModelConfig::desk(set.train.resolution(), run.head_for(&set.train)), 11).unwrap();
    let batch: Vec<usize> = (0..run.batch_size).collect();
    let losses: Vec<f64> = (0..5)
        .map(|epoch| train_step(&mut model, &set.train, &batch, &run, run.lr_at(epoch), epoch).unwrap().loss)
        .collect();
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
}

#[test]
fn background_class_absorbs_texture_only_images() {
    let spec = ConfoundSpec {
        rho_train: 1.0,
        train_count: 1000,
        test_count: 2,
        background_count: 700,
        ..ConfoundSpec::default()
    };
    let set = generate_confounded(&spec, 12).unwrap();
    let (fit, held) = set.background_pool.items().split_at(500);
    let bg = set.background_pool.subset(&(0..fit.len()).collect::<Vec<_>>());
    let train = append_background(&set.train, &bg).unwrap();
    let run = RunConfig {
        mode: Regime::Background,
        epochs: 10,
        lr: 0.1,
        seed: 12,
        ..RunConfig::default()
    };
    let mut model = build_model(ModelConfig::desk(train.resolution(), run.head_for(&train)), 12).unwrap();
    backdrop_core::training::train(&mut model, &train, &run).unwrap();
    let hits = held
        .iter()
        .filter(|it| masked_prediction(&model.forward(&it.image).unwrap().logits, 2, false) == 2)
        .count();
    let rate = hits as f64 / held.len() as f64;
    assert!(rate >= 0.9, "background rate {rate}");
}
