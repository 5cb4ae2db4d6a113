use adarank::data::{generic_corpus, synthetic_dataset, Dataset, Split, SyntheticConfig};
use adarank::harness::{
    compare, evaluate, finetune, fit_seq_len, grid_search, CompareConfig, CompareMode, EncodedSet, GridSpace, TrainConfig,
};
use adarank::data::Tokenizer;
use adarank::lora::{attach, RankPlan, TrainableParam};
use adarank::model::{ModelConfig, ModuleKind, TransformerModel};
use adarank::numerics::RngStream;
use adarank::Error;

fn config() -> ModelConfig {
    ModelConfig {
        num_layers: 2,
        d_model: 16,
        num_heads: 2,
        d_ff: 32,
        vocab_size: 512,
        max_seq_len: 16,
        num_classes: 3,
    }
}

fn data(n: usize, seed: u64, split: Split) -> Dataset {
    synthetic_dataset(&SyntheticConfig::new(3, n, 0.0), split, &mut RngStream::new(seed, 0)).unwrap()
}

fn setup() -> (TransformerModel, RankPlan, Dataset, Dataset) {
    let model = TransformerModel::init(&config(), 4).unwrap();
    let plan = RankPlan::uniform(&model.list_modules(&ModuleKind::ALL).unwrap(), 2).unwrap();
    (model, plan, data(240, 1, Split::Train), data(90, 2, Split::Test))
}

#[test]
fn zero_learning_rate_leaves_weights_untouched() {
    let (model, plan, train, test) = setup();
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 2, seed: 3, ..TrainConfig::default() };
    let (adapted, result) = finetune(&model, &plan, &train, &test, &cfg).unwrap();
    let fresh = attach(model.clone(), &plan, &mut RngStream::derived(3, &[1])).unwrap();
    assert_eq!(adapted.adapters(), fresh.adapters());
    assert_eq!(adapted.base(), &model);

    let tok = Tokenizer::new(config().vocab_size).unwrap();
    let seq = fit_seq_len(&config(), &[&train, &test]);
    let init = evaluate(&fresh, &EncodedSet::new(&test, &tok, seq)).unwrap();
    assert_eq!(result.test_accuracy, init.accuracy);
    assert_eq!(result.epoch_losses.len(), 2);
}

#[test]
fn zero_epochs_reports_initial_metrics() {
    let (model, plan, train, test) = setup();
    let cfg = TrainConfig { epochs: 0, seed: 3, ..TrainConfig::default() };
    let (adapted, result) = finetune(&model, &plan, &train, &test, &cfg).unwrap();
    assert!(result.epoch_losses.is_empty());
    let tok = Tokenizer::new(config().vocab_size).unwrap();
    let seq = fit_seq_len(&config(), &[&train, &test]);
    let base_acc = evaluate(&adapted, &EncodedSet::new(&test, &tok, seq)).unwrap().accuracy;
    assert_eq!(result.test_accuracy, base_acc);
    assert_eq!(adapted.base().forward(&EncodedSet::new(&test, &tok, seq).batch(&[0, 1]).unwrap()).unwrap(),
        adapted.forward(&EncodedSet::new(&test, &tok, seq).batch(&[0, 1]).unwrap()).unwrap());
}

#[test]
fn one_step_only_moves_trainable_tensors() {
    let (model, plan, train, test) = setup();
    let encoder = model.encoder_checksum();
    let small = Dataset::new("one-batch", Split::Train, 3, train.records[..8].to_vec()).unwrap();
    let cfg = TrainConfig { epochs: 1, batch_size: 8, learning_rate: 1e-2, seed: 5, ..TrainConfig::default() };
    let (adapted, _) = finetune(&model, &plan, &small, &test, &cfg).unwrap();
    assert_eq!(adapted.base().encoder_checksum(), encoder);
    let fresh = attach(model.clone(), &plan, &mut RngStream::derived(5, &[1])).unwrap();
    assert_ne!(adapted.param(TrainableParam::HeadWeight), fresh.param(TrainableParam::HeadWeight));
    assert_ne!(adapted.param(TrainableParam::HeadBias), fresh.param(TrainableParam::HeadBias));
    for (path, ad) in adapted.adapters() {
        assert_ne!(&ad.b, &fresh.adapters()[path].b, "{path}");
    }
}

#[test]
fn training_is_deterministic_and_learns() {
    let (model, plan, train, test) = setup();
    let cfg = TrainConfig { epochs: 8, learning_rate: 1e-2, seed: 9, ..TrainConfig::default() };
    let (_, a) = finetune(&model, &plan, &train, &test, &cfg).unwrap();
    let (_, b) = finetune(&model, &plan, &train, &test, &cfg).unwrap();
    assert_eq!(a.epoch_losses, b.epoch_losses);
    assert_eq!(a.test_accuracy, b.test_accuracy);
    assert!(a.epoch_losses.last() < a.epoch_losses.first());
    assert!(a.test_accuracy > 0.6, "{}", a.test_accuracy);
}

#[test]
fn divergence_is_reported() {
    let (model, plan, train, test) = setup();
    let cfg = TrainConfig { learning_rate: 1e308, epochs: 2, ..TrainConfig::default() };
    match finetune(&model, &plan, &train, &test, &cfg) {
        Err(Error::Diverged { config, .. }) => assert!(config.contains("lr=1e308")),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn two_class_runs_report_auc() {
    let model = TransformerModel::init(&ModelConfig { num_classes: 2, ..config() }, 4).unwrap();
    let plan = RankPlan::uniform(&model.list_modules(&[ModuleKind::Value]).unwrap(), 2).unwrap();
    let gen = |n, s| synthetic_dataset(&SyntheticConfig::new(2, n, 0.0), Split::Train, &mut RngStream::new(s, 0)).unwrap();
    let cfg = TrainConfig { epochs: 3, learning_rate: 1e-2, ..TrainConfig::default() };
    let (_, r) = finetune(&model, &plan, &gen(120, 1), &gen(60, 2), &cfg).unwrap();
    let auc = r.test_auc.expect("two classes");
    assert!((0.0..=1.0).contains(&auc));
}

#[test]
fn grid_search_cases() {
    let (model, plan, train, _) = setup();
    let base = TrainConfig { epochs: 2, seed: 1, ..TrainConfig::default() };
    let single = GridSpace { learning_rates: vec![5e-3], batch_sizes: vec![16], base: base.clone() };
    let r = grid_search(&single, &model, &plan, &train).unwrap();
    assert_eq!((r.best.learning_rate, r.best.batch_size), (5e-3, 16));

    let with_divergent = GridSpace { learning_rates: vec![1e-2, 1e308], batch_sizes: vec![16], base: base.clone() };
    let r = grid_search(&with_divergent, &model, &plan, &train).unwrap();
    assert_eq!(r.best.learning_rate, 1e-2);
    assert!(r.points[1].validation_accuracy.is_none());

    let square = GridSpace { learning_rates: vec![1e-3, 1e-2], batch_sizes: vec![16, 32], base };
    let r = grid_search(&square, &model, &plan, &train).unwrap();
    let best_acc = r
        .points
        .iter()
        .find(|p| p.config == r.best)
        .and_then(|p| p.validation_accuracy)
        .unwrap();
    assert!(r.points.iter().all(|p| p.validation_accuracy.unwrap() <= best_acc));
    let first_best = r.points.iter().find(|p| p.validation_accuracy == Some(best_acc)).unwrap();
    assert_eq!(first_best.config, r.best);
}

#[test]
fn small_comparison_is_reproducible() {
    let (model, _, train, test) = setup();
    let cfg = CompareConfig {
        avg_rank: 4.0,
        seeds: vec![1, 2],
        train: TrainConfig { epochs: 1, ..TrainConfig::default() },
        ..CompareConfig::default()
    };
    let a = compare(&cfg, &model, &train, &test, &generic_corpus()).unwrap();
    let b = compare(&cfg, &model, &train, &test, &generic_corpus()).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    let uniform = a.plan(CompareMode::Uniform).unwrap();
    assert_eq!(uniform.plan.mean_rank(), 4.0);
    for mode in [CompareMode::AdarankSeparate, CompareMode::Random] {
        let p = a.plan(mode).unwrap();
        for kind in ModuleKind::ALL {
            assert!(p.params_by_kind[&kind] <= uniform.params_by_kind[&kind]);
        }
    }
    assert_eq!(a.runs.len(), 8);
    assert_eq!(a.to_csv().lines().count(), 1 + 8 + 4);
    assert!(a.to_table().contains("adarank-joint"));
}
