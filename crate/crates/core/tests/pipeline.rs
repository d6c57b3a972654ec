use std::fs;

use tag_head::checkpoint;
use tag_head::config::{AblationRow, DataConfig, RunConfig};
use tag_head::harness::{ablate, enumerate_params, evaluate_checkpoint, load_data, param_report, train, CHECKPOINT_FILE, METRICS_FILE};
use tag_head::model::{ModelConfig, TagHead};
use tag_head::synth::{Dataset, Split};

fn model_config(run: &RunConfig) -> ModelConfig {
    let DataConfig::Synthetic(s) = &run.data else { unreachable!() };
    run.resolve_model(s.num_classes, s.clip_shape()).unwrap()
}

fn tiny_data(run: &RunConfig) -> Dataset {
    load_data(run).unwrap()
}

fn with_synth(mut run: RunConfig, f: impl FnOnce(&mut tag_head::synth::SynthTaskConfig)) -> RunConfig {
    if let DataConfig::Synthetic(s) = &mut run.data {
        f(s);
    }
    run
}

#[test]
fn param_report_matches_enumeration_on_three_configs() {
    let mut deep = RunConfig::tiny(0);
    deep.model.backbone.depth = 2;
    deep.model.encoder.layers = 3;
    deep.model.encoder.ffn_dim = 5;
    let configs = [
        model_config(&RunConfig::tiny(0)),
        model_config(&RunConfig::acceptance(0)),
        model_config(&deep),
    ];
    for cfg in configs {
        let model = TagHead::<f64>::init(cfg.clone(), 0).unwrap();
        let closed = param_report(&cfg);
        let counted = enumerate_params(&model);
        assert_eq!(closed, counted);
        assert_eq!(closed.count("graph"), 0);

        // Independent count straight from tensor shapes; every tensor belongs to one module.
        let by_shape: usize = model.params.tensors().iter().map(|t| t.shape().iter().product::<usize>()).sum();
        assert_eq!(by_shape, closed.total);
        let modules: usize = closed.modules.iter().map(|(_, n)| n).sum();
        assert_eq!(modules, closed.total);
        assert!(model.params.names().iter().all(|n| !n.starts_with("graph.")));
    }
}

#[test]
fn graph_switches_never_change_the_parameter_count() {
    let base = RunConfig::tiny(0);
    let full = param_report(&model_config(&base.with_row(AblationRow::Full)));
    for row in [AblationRow::BTe, AblationRow::BTeIfFc, AblationRow::BTeTat] {
        assert_eq!(param_report(&model_config(&base.with_row(row))), full);
    }
    let b = param_report(&model_config(&base.with_row(AblationRow::B)));
    assert_eq!(b.count("encoder"), 0);
    assert_eq!(b.count("positional_encoding"), 0);
    assert_eq!(b.count("head"), full.count("head"));
}

#[test]
fn same_config_and_seed_give_identical_metrics() {
    let run = RunConfig::tiny(3);
    let data = tiny_data(&run);
    let dir = tempfile::tempdir().unwrap();
    let a = train::<f64>(&run, &data, &dir.path().join("a")).unwrap();
    let b = train::<f64>(&run, &data, &dir.path().join("b")).unwrap();
    let csv_a = fs::read(dir.path().join("a").join(METRICS_FILE)).unwrap();
    let csv_b = fs::read(dir.path().join("b").join(METRICS_FILE)).unwrap();
    assert_eq!(csv_a, csv_b);
    assert_eq!(a.model.params, b.model.params);

    let other = train::<f64>(&run.with_seed(4), &data, &dir.path().join("c")).unwrap();
    assert_ne!(other.model.params, a.model.params);
}

#[test]
fn checkpoint_round_trip_reproduces_evaluation() {
    for precision_f32 in [false, true] {
        let run = RunConfig::tiny(5);
        let data = tiny_data(&run);
        let dir = tempfile::tempdir().unwrap();
        let (test, params) = if precision_f32 {
            let out = train::<f32>(&run, &data, dir.path()).unwrap();
            let reloaded = evaluate_checkpoint::<f32>(&dir.path().join(CHECKPOINT_FILE), &data, Split::Test).unwrap();
            let model: TagHead<f32> = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
            assert_eq!(model.params, out.model.params);
            (out.test.unwrap(), reloaded)
        } else {
            let out = train::<f64>(&run, &data, dir.path()).unwrap();
            let reloaded = evaluate_checkpoint::<f64>(&dir.path().join(CHECKPOINT_FILE), &data, Split::Test).unwrap();
            let model: TagHead<f64> = checkpoint::load(&dir.path().join(CHECKPOINT_FILE)).unwrap();
            assert_eq!(model.params, out.model.params);
            (out.test.unwrap(), reloaded)
        };
        assert_eq!(test, params);
    }
}

#[test]
fn zero_epochs_keep_the_initial_model() {
    let mut run = RunConfig::tiny(1);
    run.optim.epochs = 0;
    let data = tiny_data(&run);
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f64>(&run, &data, dir.path()).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert!(out.test.is_none());
    assert!(out.history.is_empty());
    let init = TagHead::<f64>::init(out.model.config.clone(), run.seed).unwrap();
    assert_eq!(out.model.params, init.params);
    let csv = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut run = RunConfig::tiny(2);
    run.optim.lr_max = 0.0;
    run.optim.lr_min = 0.0;
    let data = tiny_data(&run);
    let dir = tempfile::tempdir().unwrap();
    let out = train::<f64>(&run, &data, dir.path()).unwrap();
    let init = TagHead::<f64>::init(out.model.config.clone(), run.seed).unwrap();
    assert_eq!(out.model.params, init.params);
    assert!(out.history.iter().all(|r| r.lr == 0.0));
}

#[test]
fn untrained_models_score_near_chance() {
    let run = with_synth(RunConfig::tiny(0), |s| s.samples_per_class.test = 60);
    let data = tiny_data(&run);
    let k = data.num_classes() as f64;
    let mut mean = 0.0;
    let seeds = 0..8u64;
    for seed in seeds.clone() {
        let model = TagHead::<f64>::init(model_config(&run), seed).unwrap();
        let prepared = tag_head::harness::prepare_split(&model, &data.test).unwrap();
        let report = tag_head::harness::evaluate_model(&model, &prepared).unwrap();
        assert_eq!(report.num_samples, 180);
        mean += report.top1 / seeds.clone().count() as f64;
    }
    assert!((mean - 1.0 / k).abs() < 0.15, "mean untrained top-1 {mean}");
}

#[test]
fn ablate_runs_all_five_rows_in_one_call() {
    let run = with_synth(RunConfig::tiny(0), |s| s.samples_per_class.train = 2);
    let data = tiny_data(&run);
    let dir = tempfile::tempdir().unwrap();
    let results = ablate::<f64>(&run, &data, &[0, 1], dir.path()).unwrap();
    assert_eq!(results.len(), 10);
    for row in AblationRow::ALL {
        assert_eq!(results.iter().filter(|r| r.row == row).count(), 2);
        assert!(dir.path().join(format!("{}-s0", row.slug())).join(CHECKPOINT_FILE).exists());
    }
    let csv = fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.lines().skip(1).all(|l| l.contains(",test,")));

    // The B row really runs without encoder or graph.
    let b: TagHead<f64> = checkpoint::load(&dir.path().join("b-s0").join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(b.config.encoder.layers, 0);
    assert!(b.config.propagation.is_identity());
    let full: TagHead<f64> = checkpoint::load(&dir.path().join("full-s0").join(CHECKPOINT_FILE)).unwrap();
    assert!(full.config.propagation.use_intra && full.config.propagation.use_temp);
}
