//! Cross-module pipeline tests: the two-level end-to-end gradient example,
//! external-file data loading, per-batch model selection, and the remaining
//! evaluation schemes.

use labelseq::config::{ModelConfig, RunConfig, Scheme};
use labelseq::corpus::SyntheticSpec;
use labelseq::harness::{eval_dataset, load_data, run_gradcheck, run_synth};
use labelseq::training::train;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        layers: 1,
        token_dim: 16,
        heads: 2,
        ff_dim: 32,
        label_dim: 8,
        gcn_layers: 1,
        hidden_dim: 16,
        max_arg_len: 24,
        normalize_adjacency: false,
    }
}

#[test]
fn two_level_toy_model_passes_gradient_check() {
    let mut config = RunConfig::default();
    config.gradcheck.model = tiny_model();
    config.gradcheck.samples_per_param = 3;
    config.synthetic = SyntheticSpec {
        branching: vec![2, 2],
        train: 12,
        valid: 4,
        test: 4,
        arg_len: (2, 5),
        filler_vocab: 8,
        ..Default::default()
    };
    let out = run_gradcheck(&config, None).unwrap();
    assert!(out.passed, "max rel err {:.3e}", out.report.max_rel_err);
    assert!(out.report.max_rel_err <= 1e-4);
}

#[test]
fn external_corpus_files_roundtrip_through_training() {
    // synth writes files; a file-backed config must load them and train.
    let dir = tempfile::tempdir().unwrap();
    let mut config = RunConfig::default();
    config.out_root = dir.path().to_string_lossy().to_string();
    config.model = tiny_model();
    config.synthetic = SyntheticSpec {
        branching: vec![3, 2],
        train: 40,
        valid: 12,
        test: 12,
        arg_len: (2, 5),
        ..Default::default()
    };
    let synth = run_synth(&config).unwrap();

    let mut file_config = config.clone();
    file_config.data.hierarchy =
        Some(synth.dir.join("hierarchy.json").to_string_lossy().to_string());
    file_config.data.train = Some(synth.dir.join("train.jsonl").to_string_lossy().to_string());
    file_config.data.valid = Some(synth.dir.join("valid.jsonl").to_string_lossy().to_string());
    file_config.data.test = Some(synth.dir.join("test.jsonl").to_string_lossy().to_string());
    let (h_file, train_file, valid_file, test_file) = load_data(&file_config).unwrap();
    let (h_mem, train_mem, valid_mem, test_mem) = load_data(&config).unwrap();
    assert_eq!(h_file.num_nodes(), h_mem.num_nodes());
    assert_eq!(train_file.instances, train_mem.instances);
    assert_eq!(valid_file.instances, valid_mem.instances);
    assert_eq!(test_file.instances, test_mem.instances);

    // Missing split path is a config error naming the field.
    let mut broken = file_config.clone();
    broken.data.test = None;
    let err = load_data(&broken).unwrap_err().to_string();
    assert!(err.contains("data.test"), "{err}");

    file_config.train.epochs = 2;
    file_config.train.batch_size = 16;
    let outcome = train(&file_config, h_file, &train_file, &valid_file).unwrap();
    assert_eq!(outcome.log.len(), 2);
}

#[test]
fn eval_rejects_checkpoint_from_a_different_hierarchy() {
    let dir = tempfile::tempdir().unwrap();
    let mut run = RunConfig::default();
    run.out_root = dir.path().to_string_lossy().to_string();
    run.model = tiny_model();
    run.train.epochs = 1;
    run.train.batch_size = 16;
    run.synthetic = SyntheticSpec {
        branching: vec![3, 2],
        train: 24,
        valid: 8,
        test: 8,
        arg_len: (2, 5),
        ..Default::default()
    };
    let trained = labelseq::harness::run_train(&run).unwrap();

    let mut other = run.clone();
    other.synthetic.branching = vec![2, 2];
    let err = match labelseq::harness::run_eval(&other, &trained.checkpoint_path) {
        Ok(_) => panic!("mismatched hierarchy must be rejected"),
        Err(e) => e.to_string(),
    };
    assert!(err.contains("hierarchy"), "{err}");
}

#[test]
fn per_batch_validation_selects_models_within_epochs() {
    let mut run = RunConfig::default();
    run.model = tiny_model();
    run.train.epochs = 2;
    run.train.batch_size = 8;
    run.train.per_batch_validation = true;
    run.synthetic = SyntheticSpec {
        branching: vec![2, 2],
        train: 32,
        valid: 12,
        test: 12,
        arg_len: (2, 5),
        ..Default::default()
    };
    let (hierarchy, train_ds, valid_ds, _) =
        labelseq::corpus::generate_synthetic(&run.synthetic).unwrap();
    let outcome = train(&run, hierarchy, &train_ds, &valid_ds).unwrap();
    assert!(outcome.log.iter().any(|m| m.is_best));
}

#[test]
fn all_schemes_evaluate_on_a_trained_model() {
    let mut run = RunConfig::default();
    run.model = tiny_model();
    run.train.epochs = 2;
    run.train.batch_size = 16;
    run.synthetic = SyntheticSpec {
        branching: vec![3, 2],
        train: 48,
        valid: 16,
        test: 16,
        arg_len: (2, 5),
        ..Default::default()
    };
    let (hierarchy, train_ds, valid_ds, test_ds) =
        labelseq::corpus::generate_synthetic(&run.synthetic).unwrap();
    let outcome = train(&run, hierarchy, &train_ds, &valid_ds).unwrap();
    let model = &outcome.checkpoint.model;
    for scheme in [Scheme::TopDown, Scheme::BottomUp, Scheme::Ensemble] {
        let (preds, golds, validity) = eval_dataset(model, &test_ds, scheme).unwrap();
        assert_eq!(preds.len(), test_ds.len());
        assert_eq!(golds.len(), test_ds.len());
        assert_eq!(validity.len(), test_ds.len());
        for p in &preds {
            assert_eq!(p.len(), 2);
        }
    }
    // A sequence-decoder checkpoint cannot serve the multitask scheme.
    let err = eval_dataset(model, &test_ds, Scheme::Multitask).unwrap_err().to_string();
    assert!(err.contains("multitask"), "{err}");
}
