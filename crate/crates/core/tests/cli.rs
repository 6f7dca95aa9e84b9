use std::path::Path;

use cellcount::cli::run;
use cellcount::metrics::EvalReport;
use cellcount::runstore::{RunStatus, RunStore};

const TINY: &str = r#"
[synth]
image_size = [64, 64]
mean_count = 3.0
radius_range = [4.0, 7.0]

[train]
max_epochs = 2
batch_size = 4
lr = 0.003

[train.network]
base_width = 4
depth = 2
residual_blocks_per_scale = 1

[train.augment]
crop_size = [32, 32]

[registry]
promotion_threshold = 0.0
"#;

fn cmd(config: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["cellcount".to_string(), "--config".into(), config.display().to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

#[test]
fn lifecycle_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let config = root.join("pipeline.toml");
    std::fs::write(&config, TINY).unwrap();
    let data = root.join("data");
    let store_dir = root.join("store");
    let (d, s) = (data.display().to_string(), store_dir.display().to_string());

    assert_eq!(cmd(&config, &["synth", "--out", &d, "--n", "10", "--seed", "5"]), 0);
    assert!(data.join("truth.json").exists());
    assert!(data.join("images/synth_00000.png").exists());

    assert_eq!(cmd(&config, &["split", "--data", &d]), 0);
    assert!(data.join("split.json").exists());

    assert_eq!(cmd(&config, &["train", "--data", &d, "--store", &s, "--seed", "3", "--loss", "focal"]), 0);
    let store = RunStore::open(&store_dir).unwrap();
    let runs = store.list().unwrap();
    assert_eq!(runs.len(), 1);
    let run0 = &runs[0];
    assert_eq!(run0.status, RunStatus::Completed);
    assert_eq!(run0.seed, 3);
    assert_eq!(run0.config.max_epochs, 2);
    assert_eq!(run0.epoch_series.len(), 2);
    let weights = store.resolve(&run0.artifacts.as_ref().unwrap().weights_path);
    let w = weights.display().to_string();

    let report_path = root.join("eval/report.json");
    let csv = root.join("eval/report.csv");
    assert_eq!(
        cmd(
            &config,
            &["evaluate", "--weights", &w, "--data", &d, "--out", &report_path.display().to_string(), "--csv", &csv.display().to_string()]
        ),
        0
    );
    let report: EvalReport = cellcount::fsutil::read_json(&report_path).unwrap();
    assert_eq!(report.per_image.len(), 10);
    let provenance = report.config.expect("report records its configuration");
    assert_eq!(provenance["weights_hash"], run0.artifacts.as_ref().unwrap().weights_hash);
    assert!(std::fs::read_to_string(&csv).unwrap().lines().count() == 11);

    let cam = root.join("cam.png");
    let img = data.join("images/synth_00001.png").display().to_string();
    assert_eq!(cmd(&config, &["explain", "--weights", &w, "--image", &img, "--out", &cam.display().to_string(), "--view", "panel"]), 0);
    let panel = image::open(&cam).unwrap();
    assert_eq!((panel.width(), panel.height()), (192, 64));
    assert_eq!(
        cmd(&config, &["explain", "--weights", &w, "--image", &img, "--layer", "nope", "--out", &cam.display().to_string()]),
        1
    );

    let em = root.join("emissions.csv");
    assert_eq!(cmd(&config, &["emissions-report", "--runs", &s, "--out", &em.display().to_string()]), 0);
    assert_eq!(std::fs::read_to_string(&em).unwrap().lines().count(), 2);

    assert_eq!(cmd(&config, &["registry", "--store", &s, "active"]), 1);
    assert_eq!(cmd(&config, &["registry", "--store", &s, "promote", &run0.run_id, "--note", "first"]), 0);
    assert_eq!(cmd(&config, &["registry", "--store", &s, "active"]), 0);
    assert_eq!(store.active().unwrap().unwrap().run_id, run0.run_id);
    assert_eq!(cmd(&config, &["registry", "--store", &s, "promote", "missing-run"]), 1);
    assert_eq!(cmd(&config, &["registry", "--store", &s, "list"]), 0);
}

#[test]
fn ablate_writes_one_run_per_combination() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("pipeline.toml");
    std::fs::write(&config, TINY).unwrap();
    let d = dir.path().join("data").display().to_string();
    let s = dir.path().join("store").display().to_string();
    assert_eq!(cmd(&config, &["synth", "--out", &d, "--n", "8"]), 0);
    assert_eq!(
        cmd(
            &config,
            &["--set", "train.max_epochs=1", "ablate", "--data", &d, "--store", &s, "--seeds", "1,2,3", "--losses", "dice,focal", "--jobs", "2"]
        ),
        0
    );
    let runs = RunStore::open(&s).unwrap().list().unwrap();
    assert_eq!(runs.len(), 6);
    let combos: std::collections::BTreeSet<_> = runs.iter().map(|r| (r.loss(), r.seed)).collect();
    assert_eq!(combos.len(), 6);
    assert!(runs.iter().all(|r| r.config.max_epochs == 1));
}

#[test]
fn usage_and_config_errors() {
    assert_eq!(run(["cellcount", "--help"]), 0);
    assert_eq!(run(["cellcount", "no-such-command"]), 2);
    assert_eq!(run(["cellcount", "train", "--loss", "hinge"]), 2);
    assert_eq!(run(["cellcount", "--set", "train.batch_size=0", "train"]), 2);
    assert_eq!(run(["cellcount", "--config", "/nonexistent/pipeline.toml", "config"]), 2);
}
