use asgdro::harness::{
    emit_landscape, emit_spectrum, evaluate, load_bundle, run_experiment, seed_dir, sweep,
    write_report, Checkpoint, ExperimentConfig, LandscapeParams, RunRecord,
};
use asgdro::landscape::{BallGrid, Bounds, ObjectiveId};
use asgdro::robust_opt::AlgorithmRegistry;
use asgdro::spectra::SpectrumConfig;
use asgdro::Error;

fn small(algorithm: &str) -> ExperimentConfig {
    ExperimentConfig::from_kv_str(&format!(
        "algorithm = {algorithm}
dataset.kind = hcmnist_proxy
dataset.n_train = 600
dataset.n_val = 200
dataset.n_test = 200
model.hidden = [8]
epochs = 3
batch_size = 32
seeds = [0, 1]
"
    ))
    .unwrap()
}

fn without_clock(mut r: RunRecord) -> RunRecord {
    r.wall_clock_secs = 0.0;
    r
}

#[test]
fn kv_and_json_round_trip() {
    let cfg = small("asgdro");
    let from_kv = ExperimentConfig::from_kv_str(&cfg.to_kv_string()).unwrap();
    let from_json = ExperimentConfig::from_json_str(&cfg.canonical_json()).unwrap();
    assert_eq!(from_kv, cfg);
    assert_eq!(from_json, cfg);
    assert_eq!(from_kv.fingerprint(), cfg.fingerprint());
    let mut other = cfg.clone();
    other.optim.rho = 0.5;
    assert_ne!(other.fingerprint(), cfg.fingerprint());
}

#[test]
fn shipped_presets_parse_and_validate() {
    let reg = AlgorithmRegistry::builtin();
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        ExperimentConfig::from_path(&path).unwrap().validate(&reg).unwrap();
        n += 1;
    }
    assert!(n >= 4);
}

#[test]
fn bad_configs_are_config_errors() {
    let reg = AlgorithmRegistry::builtin();
    let mut cfg = small("erm");
    cfg.epochs = 0;
    let err = run_experiment(&cfg, &reg, None).err().unwrap();
    assert!(err.is_config(), "{err}");
    assert!(ExperimentConfig::from_kv_str("algorithm = erm\nbogus = 1\n").unwrap_err().is_config());
    assert!(small("nope").validate(&reg).unwrap_err().is_config());
}

#[test]
fn training_is_deterministic_and_checkpoints_reproduce_selection() {
    let reg = AlgorithmRegistry::builtin();
    let cfg = small("asgdro");
    let dir = tempfile::tempdir().unwrap();
    let a = run_experiment(&cfg, &reg, Some(dir.path())).unwrap();
    let b = run_experiment(&cfg, &reg, None).unwrap();
    let strip = |o: &asgdro::harness::ExperimentOutput| -> Vec<RunRecord> {
        o.records().into_iter().cloned().map(without_clock).collect()
    };
    assert_eq!(strip(&a), strip(&b));
    assert_eq!(a.summary, b.summary);

    for rec in a.records() {
        let ckpt = Checkpoint::load(&seed_dir(dir.path(), rec.seed).join("checkpoint.json")).unwrap();
        assert_eq!(ckpt.epoch, rec.selected_epoch);
        let bundle = load_bundle(&ckpt.config, ckpt.seed).unwrap();
        let val = evaluate(&ckpt.model, &ckpt.params, &bundle.val).unwrap();
        assert_eq!(val, rec.selected_val);
        assert_eq!(rec.lambda_trajectory.len(), cfg.epochs);
    }
    for f in ["summary.json", "config.json", "seed_0/metrics.csv", "seed_1/record.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn zero_radius_run_matches_group_dro() {
    let reg = AlgorithmRegistry::builtin();
    let mut flat = small("asgdro");
    flat.optim.rho = 0.0;
    let gdro = small("gdro");
    let a = run_experiment(&flat, &reg, None).unwrap();
    let b = run_experiment(&gdro, &reg, None).unwrap();
    for (x, y) in a.records().into_iter().zip(b.records()) {
        assert_eq!(x.epochs, y.epochs);
        assert_eq!(x.selected_epoch, y.selected_epoch);
        assert_eq!(x.test, y.test);
        assert_eq!(x.lambda_trajectory, y.lambda_trajectory);
    }
}

#[test]
fn sweep_rows_and_singleton_grid() {
    let reg = AlgorithmRegistry::builtin();
    let mut cfg = small("asgdro");
    cfg.sweep.rho = vec![0.05, 0.5];
    let dir = tempfile::tempdir().unwrap();
    let result = sweep(&cfg, &reg, Some(dir.path())).unwrap();
    assert_eq!(result.cells.len(), 2);
    let csv = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * cfg.seeds.len());

    let mut single = small("asgdro");
    single.sweep.rho = vec![single.optim.rho];
    let s = sweep(&single, &reg, None).unwrap();
    let direct = run_experiment(&small("asgdro"), &reg, None).unwrap();
    assert_eq!(s.cells.len(), 1);
    assert_eq!(s.best_cell().summary.seeds, direct.summary.seeds);

    let report = write_report(dir.path(), dir.path()).unwrap();
    assert!(report.get("asgdro", asgdro::synthdata::TESTBED2_SHAPE).is_some());
    assert!(dir.path().join("report.md").is_file());
}

#[test]
fn landscape_files_are_reproducible() {
    let params = LandscapeParams {
        bounds: Bounds::square(5.0),
        resolution: 201,
        ball_grid: BallGrid::default(),
        svg: true,
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (summary, files) = emit_landscape("a1", ObjectiveId::Group1, &params, a.path()).unwrap();
    let (_, other) = emit_landscape("a1", ObjectiveId::Group1, &params, b.path()).unwrap();
    assert_eq!(std::fs::read(&files.csv).unwrap(), std::fs::read(&other.csv).unwrap());
    let half_cell = 5.0 / 201.0;
    assert!((summary.argmin_theta[0] + 2.0).abs() <= half_cell);
    assert!(summary.argmin_theta[1].abs() <= half_cell);
    assert!(summary.argmin_value < 1e-3);
    let csv = std::fs::read_to_string(&files.csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 201 * 201);
    assert!(std::fs::read_to_string(files.svg.unwrap()).unwrap().starts_with("<svg"));
    assert!(emit_landscape("a3", ObjectiveId::Gdro, &params, a.path()).unwrap_err().is_config());
}

#[test]
fn spectrum_output_per_group() {
    let reg = AlgorithmRegistry::builtin();
    let mut cfg = small("erm");
    cfg.seeds = vec![0];
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, &reg, Some(dir.path())).unwrap();
    let ckpt = seed_dir(dir.path(), 0).join("checkpoint.json");
    let spec = SpectrumConfig {
        max_iter: 100,
        tol: 1e-4,
        ..SpectrumConfig::default()
    };
    let a = emit_spectrum(&ckpt, &spec, &dir.path().join("a.json")).unwrap();
    let b = emit_spectrum(&ckpt, &spec, &dir.path().join("b.json")).unwrap();
    assert_eq!(a.report.per_group.len(), 4);
    assert_eq!(
        std::fs::read(dir.path().join("a.json")).unwrap(),
        std::fs::read(dir.path().join("b.json")).unwrap()
    );
    assert_eq!(a.worst_group_largest, b.worst_group_largest);
    let missing = emit_spectrum(&dir.path().join("nope.json"), &spec, &dir.path().join("c.json"));
    assert!(matches!(missing, Err(Error::MissingCheckpoint(_))));
}
