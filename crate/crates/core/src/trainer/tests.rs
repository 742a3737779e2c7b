use super::*;
use crate::phantom::{generate_phantom_corpus, PhantomSpec};

const PHANTOM: &str = r#"
    global_seed = 9
    [[datasets]]
    name = "siteA"
    coverage = ["T1", "T2", "FLAIR"]
    case_count = 3
    holdout_cases = 1
    slices_per_case = 2
    image_size = 12
    missingness_rate = 0.3
    profile = { gamma = 1.0, gain = 0.8, noise_sigma = 0.01 }
    [[datasets]]
    name = "siteB"
    coverage = ["T1", "T2", "ADC"]
    case_count = 3
    holdout_cases = 1
    slices_per_case = 2
    image_size = 12
    profile = { gamma = 1.2, gain = 1.1, noise_sigma = 0.01 }
"#;

const CONFIG: &str = r#"
    [train]
    epochs = 3
    batch_size = 2
    lr = 1e-3
    lr_plateau_epochs = 1
    [seeds]
    global = 4
    [model]
    base_channels = 2
    levels = 2
    blocks_per_level = 1
    d_id = 4
    embed_hidden = 4
    pfm_hidden = 4
    disc_channels = 2
    disc_stages = 2
    [eval]
    tasks = ["T1->T2"]
"#;

struct Fixture {
    _dir: tempfile::TempDir,
    registry: DatasetRegistry,
    corpus: Corpus,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let spec = PhantomSpec::from_toml_str(PHANTOM).unwrap();
    generate_phantom_corpus(&spec, dir.path(), false).unwrap();
    let registry = spec.registry().unwrap();
    let corpus = Corpus::load(dir.path(), &registry).unwrap();
    Fixture {
        _dir: dir,
        registry,
        corpus,
    }
}

fn config() -> TrainConfig {
    TrainConfig::from_toml_str(CONFIG).unwrap()
}

#[test]
fn schedule_examples() {
    let mut cfg = TrainConfig::default();
    assert_eq!(lr_at_epoch(0, &cfg).unwrap(), 2e-4);
    assert!((lr_at_epoch(125, &cfg).unwrap() - 1e-4).abs() < 1e-15);
    assert_eq!(lr_at_epoch(49, &cfg).unwrap(), 2e-4);
    let step = 2e-4 / 150.0;
    assert!(lr_at_epoch(199, &cfg).unwrap() <= step + 1e-18);
    assert!(matches!(lr_at_epoch(200, &cfg), Err(Error::Schedule(_))));

    cfg.train.schedule = LrSchedule::DecayByPlateau;
    assert_eq!(lr_at_epoch(0, &cfg).unwrap(), 2e-4);
    assert!((lr_at_epoch(25, &cfg).unwrap() - 1e-4).abs() < 1e-15);
    assert_eq!(lr_at_epoch(120, &cfg).unwrap(), 0.0);
}

#[test]
fn schedule_is_monotone() {
    for schedule in [LrSchedule::PlateauThenLinear, LrSchedule::DecayByPlateau] {
        let mut cfg = TrainConfig::default();
        cfg.train.schedule = schedule;
        let lrs: Vec<f64> = (0..200).map(|e| lr_at_epoch(e, &cfg).unwrap()).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        assert!(lrs.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn config_errors_name_their_field() {
    let bad = CONFIG.replace("batch_size = 2", "batch_size = 0");
    let err = TrainConfig::from_toml_str(&bad).unwrap_err();
    assert!(err.to_string().contains("train.batch_size"), "{err}");
    let bad = CONFIG.replace("lr_plateau_epochs = 1", "lr_plateau_epochs = 9");
    assert!(TrainConfig::from_toml_str(&bad).unwrap_err().to_string().contains("lr_plateau_epochs"));
    let bad = CONFIG.replace("\"T1->T2\"", "\"T1->T1\"");
    assert!(TrainConfig::from_toml_str(&bad).unwrap_err().to_string().contains("eval.tasks[0]"));
    assert!(TrainConfig::from_toml_str("[train]\nepochz = 3").is_err());
}

#[test]
fn relative_paths_resolve_against_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, format!("[data]\nregistry = \"reg.toml\"\ncorpus = \"/abs/corpus\"\n{CONFIG}")).unwrap();
    let cfg = TrainConfig::from_file(&path).unwrap();
    assert_eq!(cfg.data.registry.unwrap(), dir.path().join("reg.toml"));
    assert_eq!(cfg.data.corpus.unwrap(), PathBuf::from("/abs/corpus"));
}

#[test]
fn training_is_deterministic_and_accounted() {
    let fx = fixture();
    let a = train(&config(), &fx.registry, &fx.corpus, TrainOptions::default()).unwrap();
    let b = train(&config(), &fx.registry, &fx.corpus, TrainOptions::default()).unwrap();
    assert_eq!(a.generator, b.generator);
    assert_eq!(a.manifest.metrics, b.manifest.metrics);
    let train_slices = fx.corpus.samples(Split::Train).count();
    for (x, y) in a.manifest.epochs.iter().zip(&b.manifest.epochs) {
        assert_eq!((x.mean_total, x.mean_d_loss), (y.mean_total, y.mean_d_loss));
        assert_eq!(x.audit_violations, 0);
        assert_eq!(x.samples + x.skipped_single_modality, train_slices);
        assert!(x.padded < 2 * x.batches);
    }
    assert!(a.manifest.epochs.iter().all(|e| e.mean_total.is_finite()));
    assert_eq!(a.manifest.metrics.len(), 2);
}

#[test]
fn resuming_matches_an_uninterrupted_run() {
    let fx = fixture();
    let full = train(&config(), &fx.registry, &fx.corpus, TrainOptions::default()).unwrap();

    let mut trainer = Trainer::new(config(), &fx.registry, &fx.corpus).unwrap();
    trainer.run_epoch(None, None).unwrap();
    let bytes = trainer.checkpoint().to_bytes();
    let ck = Checkpoint::from_bytes(&bytes).unwrap();
    let resumed = train(
        &config(),
        &fx.registry,
        &fx.corpus,
        TrainOptions {
            resume: Some(ck),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.generator, full.generator);
    assert_eq!(resumed.manifest.epochs.len(), 2);
    assert_eq!(resumed.manifest.resumed_from_epoch, Some(1));
}

#[test]
fn resume_refuses_a_different_registry() {
    let fx = fixture();
    let trainer = Trainer::new(config(), &fx.registry, &fx.corpus).unwrap();
    let mut ck = trainer.checkpoint();
    let other = DatasetRegistry::new(vec![(
        "elsewhere".into(),
        ModalityMask::FULL,
        crate::datamodel::IntensityProfile::default(),
    )])
    .unwrap();
    ck.registry = other.clone();
    assert!(matches!(
        Trainer::resume(config(), &fx.registry, &fx.corpus, ck),
        Err(Error::Checkpoint(_))
    ));
    let mut ck = trainer.checkpoint();
    ck.corpus_hash = Some("0".repeat(64));
    assert!(matches!(
        Trainer::resume(config(), &fx.registry, &fx.corpus, ck),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn outputs_and_checkpoint_round_trip() {
    let fx = fixture();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config();
    cfg.train.checkpoint_every = 1;
    cfg.eval.montage_cases = 2;
    let mut seen = Vec::new();
    let mut hook = |s: &EpochSummary| seen.push(s.epoch);
    let outcome = train(
        &cfg,
        &fx.registry,
        &fx.corpus,
        TrainOptions {
            out: Some(out.path().to_path_buf()),
            on_epoch: Some(&mut hook),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    for f in [RUN_MANIFEST_FILE, LOSS_LOG_FILE, PLAN_LOG_FILE, METRICS_FILE, FINAL_CHECKPOINT, "montage.png"] {
        assert!(out.path().join(f).is_file(), "{f}");
    }
    assert!(out.path().join("checkpoints/epoch_0001.ckpt").is_file());
    assert!(out.path().join("checkpoints/epoch_0002.ckpt").is_file());

    let log = fs::read_to_string(out.path().join(LOSS_LOG_FILE)).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next(), Some(LOSS_LOG_HEADER));
    let steps: usize = outcome.manifest.epochs.iter().map(|e| e.batches).sum();
    assert_eq!(lines.count(), steps);

    let back = Checkpoint::load(&out.path().join(FINAL_CHECKPOINT)).unwrap();
    let rows = evaluate_model(&back.generator, &fx.registry, &fx.corpus, Split::Test, &cfg.tasks().unwrap()).unwrap();
    assert_eq!(rows, outcome.manifest.metrics);
    let text = fs::read_to_string(out.path().join(RUN_MANIFEST_FILE)).unwrap();
    assert!(text.contains("\"status\": \"complete\""));
}

#[test]
fn disabling_modulation_removes_its_parameters() {
    let fx = fixture();
    let cfg = Arm::NoPfm.apply(&config());
    let outcome = train(&cfg, &fx.registry, &fx.corpus, TrainOptions::default()).unwrap();
    assert!(outcome.checkpoint.generator.params.names().all(|n| !n.contains("pfm")));
    assert_eq!(outcome.manifest.config["model"]["pfm_enabled"], false);
}

#[test]
fn disabling_the_scheduler_forces_single_batches() {
    let fx = fixture();
    let cfg = Arm::NoMcbs.apply(&config());
    assert_eq!(cfg.effective_batch_size(), 1);
    let mut trainer = Trainer::new(cfg, &fx.registry, &fx.corpus).unwrap();
    let s = trainer.run_epoch(None, None).unwrap();
    assert_eq!((s.batches, s.padded), (s.samples, 0));
}

#[test]
fn ablation_lists_one_row_per_arm_dataset_task() {
    let fx = fixture();
    let mut cfg = config();
    cfg.train.epochs = 1;
    cfg.train.lr_plateau_epochs = 0;
    cfg.ablation.seeds = vec![1, 2];
    cfg.ablation.arms = vec![Arm::Full, Arm::NoPfm, Arm::NoMcbs];
    let mut runs = 0;
    let report = run_ablation(&cfg, &fx.registry, &fx.corpus, None, &mut |_, _, _| runs += 1).unwrap();
    assert_eq!(runs, 6);
    assert_eq!(report.rows.len(), 3 * 2 * 2);
    assert_eq!(report.timings.len(), 6);
    let (_, total) = report.wins(Arm::Full, Arm::NoPfm);
    assert_eq!(total, 2);
    assert_eq!(report.to_csv().lines().count(), 13);

    cfg.ablation.arms = vec![Arm::Full];
    assert!(run_ablation(&cfg, &fx.registry, &fx.corpus, None, &mut |_, _, _| {}).is_err());
}
