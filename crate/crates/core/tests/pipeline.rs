use std::path::Path;

use privneuron::intervene::Strategy;
use privneuron::pipeline::{Pipeline, PipelineConfig, Precision, Stage};
use privneuron::train::TrainLog;
use privneuron::Error;

fn tiny(out: &Path, n_records: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_toml_str(
        r#"
        seed = 3
        [corpus]
        languages = ["en", "zh"]
        [model]
        d_model = 16
        d_ff = 32
        n_heads = 2
        [pretrain]
        epochs = 1
        [finetune]
        epochs = 1
        [selection]
        m = 2
        "#,
    )
    .unwrap();
    cfg.corpus.n_records = n_records;
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn read(dir: &Path, stage: &str, file: &str) -> Vec<u8> {
    let stage_dir = std::fs::read_dir(dir.join(stage)).unwrap().next().unwrap().unwrap().path();
    std::fs::read(stage_dir.join(file)).unwrap()
}

#[test]
fn one_record_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 1);
    let outcome = Pipeline::new(cfg.clone()).unwrap().run(Stage::Report).unwrap();
    assert_eq!(outcome.executed, Stage::ALL.to_vec());
    assert!(outcome.reused.is_empty());
    assert_eq!(outcome.manifest.stages.len(), Stage::ALL.len());
    assert_eq!(outcome.manifest.seed, 3);

    let report = Pipeline::new(cfg.clone()).unwrap().load_report().unwrap();
    assert_eq!(report.split.records, 1);
    assert_eq!(report.languages, ["en", "zh"]);
    assert_eq!(report.transfer_languages().collect::<Vec<_>>(), ["zh"]);
    assert_eq!(report.losses.finetune.len(), 2);
    assert!(report.intervention("none", "zh").unwrap().mrr.is_some());
    assert!(dir.path().join("manifest.json").exists());
    let saved = PipelineConfig::load(&dir.path().join("config.toml")).unwrap();
    assert_eq!(saved, cfg);
}

#[test]
fn runs_are_reused_and_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let first = Pipeline::new(tiny(a.path(), 8)).unwrap().run(Stage::Report).unwrap();
    let again = Pipeline::new(tiny(a.path(), 8)).unwrap().run(Stage::Report).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.reused, Stage::ALL.to_vec());
    assert_eq!(again.manifest, first.manifest);

    let fresh = Pipeline::new(tiny(b.path(), 8)).unwrap().run(Stage::Report).unwrap();
    assert_eq!(fresh.manifest, first.manifest);
    for (stage, file) in [
        ("report", "report.json"),
        ("finetune", "model.ckpt"),
        ("select", "neurons.json"),
        ("intervene", "eval_mrr.csv"),
    ] {
        assert_eq!(read(a.path(), stage, file), read(b.path(), stage, file), "{stage}/{file}");
    }
    assert_eq!(
        std::fs::read(a.path().join("manifest.json")).unwrap(),
        std::fs::read(b.path().join("manifest.json")).unwrap()
    );
}

#[test]
fn changing_strategies_reruns_only_downstream_stages() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 8);
    Pipeline::new(cfg.clone()).unwrap().run(Stage::Report).unwrap();
    let mut changed = cfg.clone();
    changed.intervene.strategies = vec![Strategy::None, Strategy::Mpnc { budget: Some(3) }];
    let outcome = Pipeline::new(changed).unwrap().run(Stage::Report).unwrap();
    assert_eq!(outcome.executed, [Stage::Intervene, Stage::Report]);
    assert_eq!(outcome.reused.len(), Stage::ALL.len() - 2);

    let mut reseeded = cfg;
    reseeded.seed = 4;
    let outcome = Pipeline::new(reseeded).unwrap().run(Stage::Pretrain).unwrap();
    assert_eq!(outcome.executed, [Stage::GenCorpus, Stage::Pretrain]);
}

#[test]
fn tampered_artifacts_are_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4);
    Pipeline::new(cfg.clone()).unwrap().run(Stage::Pretrain).unwrap();
    let pretrain_dir = Pipeline::new(cfg.clone()).unwrap().stage_dir(Stage::Pretrain).unwrap();
    let loss = pretrain_dir.join("loss.csv");
    let mut text = std::fs::read_to_string(&loss).unwrap();
    text.push_str("9,pretrain,0.5\n");
    std::fs::write(&loss, text).unwrap();
    match Pipeline::new(cfg).unwrap().run(Stage::Finetune) {
        Err(Error::StaleArtifact { path, .. }) => assert_eq!(path, loss),
        other => panic!("expected a stale artifact, got {other:?}"),
    }
}

#[test]
fn incomplete_stage_directories_are_rebuilt() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4);
    let stage_dir = Pipeline::new(cfg.clone()).unwrap().stage_dir(Stage::GenCorpus).unwrap();
    std::fs::create_dir_all(&stage_dir).unwrap();
    std::fs::write(stage_dir.join("junk"), "x").unwrap();
    let outcome = Pipeline::new(cfg).unwrap().run(Stage::GenCorpus).unwrap();
    assert_eq!(outcome.executed, [Stage::GenCorpus]);
    assert!(!stage_dir.join("junk").exists());
}

#[test]
fn precision_is_part_of_the_model_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path(), 4);
    let mut wide = cfg.clone();
    wide.precision = Precision::F64;
    let (mut a, mut b) = (Pipeline::new(cfg).unwrap(), Pipeline::new(wide).unwrap());
    assert_eq!(a.stage_dir(Stage::GenCorpus).unwrap(), b.stage_dir(Stage::GenCorpus).unwrap());
    assert_ne!(a.stage_dir(Stage::Pretrain).unwrap(), b.stage_dir(Stage::Pretrain).unwrap());
}

#[test]
fn config_overrides_and_validation() {
    let mut cfg = PipelineConfig::default();
    cfg.set("finetune.epochs", "3").unwrap();
    cfg.set("corpus.languages", r#"["en", "ja"]"#).unwrap();
    cfg.set("finetune.language", "ja").unwrap();
    cfg.set("selection.tau2", "0.45").unwrap();
    assert_eq!(cfg.finetune.epochs, 3);
    assert_eq!(cfg.corpus.languages, ["en", "ja"]);
    assert_eq!(cfg.language(), "ja");
    assert_eq!(cfg.selection.tau2, 0.45);
    assert!(cfg.set("selection.tau2", "1.5").is_err());
    assert!(cfg.set("corpus.languages", r#"["en"]"#).is_err());
    assert!(cfg.set("model.nope", "1").is_err());
    assert!(PipelineConfig::from_toml_str("[model]\nlayers = 2\n").is_err());
    let back = PipelineConfig::from_toml_str(&cfg.to_toml()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!("trace-lens".parse::<Stage>().unwrap(), Stage::TraceLens);
    assert!("lens".parse::<Stage>().is_err());
}

#[test]
fn default_pretraining_halves_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        output_dir: dir.path().to_path_buf(),
        ..PipelineConfig::default()
    };
    let mut p = Pipeline::new(cfg.clone()).unwrap();
    let loss = p.stage_dir(Stage::Pretrain).unwrap().join("loss.csv");
    Pipeline::new(cfg).unwrap().run(Stage::Pretrain).unwrap();
    let losses = TrainLog::read_csv(&loss).unwrap().losses("pretrain");
    let (first, last) = (losses[0], *losses.last().unwrap());
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    assert_eq!(PipelineConfig::load(&dir.join("desk.toml")).unwrap(), PipelineConfig::default());
    let smoke = PipelineConfig::load(&dir.join("smoke.toml")).unwrap();
    assert_eq!(smoke.corpus.n_records, 12);
}
