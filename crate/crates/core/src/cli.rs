//! Command-line entry point.
//!
//! Every command resolves one [`PipelineConfig`] from an optional TOML file, dotted
//! `--set key=value` overrides, and command flags (flags win), then prints its
//! `config_hash` before doing anything else. Failures print one JSON line on stderr.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, make_split, Image, SplitSpec};
use crate::energy::{compare, compare_csv, reports_csv};
use crate::error::{Error, Result};
use crate::explain::{grad_cam, overlay, render_heatmap, side_by_side, CamTarget};
use crate::hashing::canonical_hash;
use crate::losses::LossKind;
use crate::metrics::{evaluate, TiledModel};
use crate::network::{SegmentationNetwork, DEFAULT_CAM_LAYER};
use crate::runstore::{RetrainPolicy, RunRecord, RunStatus, RunStore};
use crate::service::{self, AppState, ServiceConfig};
use crate::synth::{generate, write_dataset, SynthConfig};
use crate::trainer::{self, default_jsonl_path, new_run_id, summarize, summary_table, JsonlSink, LogSink, LrSetting, MetricSink, TrainConfig, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub data_root: PathBuf,
    pub run_store: PathBuf,
    /// Output directory for standalone artifacts (reports, heatmaps).
    pub artifacts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            run_store: "runs".into(),
            artifacts: "artifacts".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegistryConfig {
    /// Minimum detection F1 for promotion.
    pub promotion_threshold: f64,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            promotion_threshold: crate::runstore::DEFAULT_PROMOTION_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub service: ServiceConfig,
    pub retrain: RetrainPolicy,
    pub registry: RegistryConfig,
}

impl PipelineConfig {
    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }

    /// Reads `file` (if any) and applies dotted overrides such as `train.network.depth=3`.
    /// Every key must name an existing field.
    pub fn resolve(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(PipelineConfig::default())
            .map_err(|e| Error::Config(e.to_string()))?;
        let mut keys = Vec::new();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            let user = toml::from_str::<toml::Table>(&text)
                .map_err(|e| Error::Config(format!("{}: {}", p.display(), e.message())))?;
            collect_keys("", &user, &mut keys);
            merge(&mut table, user);
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            let key = key.trim();
            set_dotted(&mut table, key, parse_value(raw.trim()))?;
            keys.push(key.to_string());
        }
        let cfg: PipelineConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let resolved = serde_json::to_value(&cfg)?;
        for k in keys {
            if lookup(&resolved, &k).is_none() {
                return Err(Error::Config(format!("unknown configuration key `{k}`")));
            }
        }
        Ok(cfg)
    }
}

fn collect_keys(prefix: &str, t: &toml::Table, out: &mut Vec<String>) {
    for (k, v) in t {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(inner) if !inner.is_empty() => collect_keys(&key, inner, out),
            _ => out.push(key),
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn lookup<'a>(v: &'a serde_json::Value, dotted: &str) -> Option<&'a serde_json::Value> {
    dotted.split('.').try_fold(v, |cur, part| cur.as_object()?.get(part))
}

/// TOML literal when it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in `{key}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "cellcount", version, about = "Cell counting pipeline for fluorescence microscopy")]
pub struct Cli {
    /// TOML pipeline configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted override, e.g. `train.max_epochs=50`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with analytic ground truth.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a train/validation split of a dataset.
    Split {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model and record it in the run store.
    Train {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        loss: Option<LossKind>,
        /// Fixed learning rate; the range test picks one when absent.
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Train every loss × seed combination and print a summary table.
    Ablate {
        #[command(flatten)]
        common: TrainArgs,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "dice,focal")]
        losses: Vec<LossKind>,
        /// Runs trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate saved weights on a dataset.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Restrict to the validation ids of this split file.
        #[arg(long)]
        split: Option<PathBuf>,
        /// Also write a per-image CSV table.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Render a Grad-CAM heatmap for one image.
    Explain {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = DEFAULT_CAM_LAYER)]
        layer: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.4)]
        alpha: f32,
        #[arg(long, value_enum, default_value_t = ExplainView::Overlay)]
        view: ExplainView,
    },
    /// Summarize energy and emissions of recorded runs.
    EmissionsReport {
        /// Run store directory.
        #[arg(long)]
        runs: Option<PathBuf>,
        /// Write per-run CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect or change the model registry.
    Registry {
        #[arg(long)]
        store: Option<PathBuf>,
        #[command(subcommand)]
        action: RegistryAction,
    },
    /// Serve the active model over HTTP.
    Serve {
        #[arg(long)]
        store: Option<PathBuf>,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Print the resolved configuration as TOML.
    Config,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExplainView {
    Overlay,
    Heatmap,
    /// Image, heatmap and overlay side by side.
    Panel,
}

#[derive(Debug, Subcommand)]
pub enum RegistryAction {
    List,
    Promote {
        run_id: String,
        #[arg(long, default_value = "")]
        note: String,
    },
    Active,
    /// Report whether retraining is due under the configured policy.
    RetrainDue,
}

/// Parses `argv` and runs the command. Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let cfg = match PipelineConfig::resolve(cli.config.as_deref(), &cli.set) {
        Ok(c) => c,
        Err(e) => {
            report_error(&e);
            return 2;
        }
    };
    match execute(cli.command, cfg) {
        Ok(()) => 0,
        Err(e) => {
            report_error(&e);
            match e {
                Error::Config(_) => 2,
                _ => 1,
            }
        }
    }
}

fn report_error(e: &Error) {
    eprintln!("{}", serde_json::json!({"error": e.kind(), "message": e.to_string()}));
}

fn print_hash(cfg: &PipelineConfig) {
    println!("config_hash {}", cfg.config_hash());
}

fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))?;
    Ok(Image::from_dynamic(&img))
}

fn record_line(r: &RunRecord) -> serde_json::Value {
    serde_json::json!({
        "run_id": r.run_id,
        "status": r.status,
        "loss": r.loss(),
        "seed": r.seed,
        "lr": r.lr,
        "stopped_epoch": r.stopped_epoch,
        "best_epoch": r.best_epoch,
        "metrics": r.final_metrics,
        "co2_kg": r.emissions.as_ref().map(|e| e.co2_kg),
        "weights_hash": r.artifacts.as_ref().map(|a| a.weights_hash.clone()),
    })
}

fn train_one(samples: &[crate::dataset::Sample], cfg: &TrainConfig, store: &RunStore, run_id: Option<String>) -> Result<RunRecord> {
    let run_id = run_id.unwrap_or_else(|| new_run_id(cfg));
    let mut jsonl = JsonlSink::create(&default_jsonl_path(store, &run_id))?;
    let mut log_sink = LogSink;
    let sinks: Vec<&mut dyn MetricSink> = vec![&mut jsonl, &mut log_sink];
    trainer::train(
        samples,
        cfg,
        store,
        TrainOptions {
            sinks,
            run_id: Some(run_id),
            ..Default::default()
        },
    )
}

fn execute(command: Command, mut cfg: PipelineConfig) -> Result<()> {
    match command {
        Command::Synth { out, n, seed } => {
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            print_hash(&cfg);
            let out = out.unwrap_or_else(|| cfg.paths.data_root.clone());
            let samples = generate(&cfg.synth, n)?;
            write_dataset(&out, &cfg.synth, &samples)?;
            let total: usize = samples.iter().map(|s| s.true_count).sum();
            println!("wrote {n} images with {total} cells to {}", out.display());
        }
        Command::Split { data, out, fraction, seed } => {
            if let Some(f) = fraction {
                cfg.train.split_fraction = f;
            }
            if let Some(s) = seed {
                cfg.train.split_seed = Some(s);
            }
            print_hash(&cfg);
            let data = data.unwrap_or_else(|| cfg.paths.data_root.clone());
            let samples = load_dataset(&data)?;
            let split = make_split(&samples, cfg.train.split_fraction, cfg.train.effective_split_seed())?;
            let out = out.unwrap_or_else(|| data.join("split.json"));
            split.save(&out)?;
            println!(
                "split_hash {} train {} val {} -> {}",
                split.split_hash,
                split.train_ids.len(),
                split.val_ids.len(),
                out.display()
            );
        }
        Command::Train { common, seed, loss, lr, run_id } => {
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(l) = loss {
                cfg.train.loss.kind = l;
            }
            if let Some(lr) = lr {
                cfg.train.lr = LrSetting::Fixed(lr);
            }
            print_hash(&cfg);
            cfg.train.validate()?;
            let samples = load_dataset(&common.data.unwrap_or_else(|| cfg.paths.data_root.clone()))?;
            let store = RunStore::open(common.store.unwrap_or_else(|| cfg.paths.run_store.clone()))?;
            let record = train_one(&samples, &cfg.train, &store, run_id)?;
            println!("{}", record_line(&record));
            if record.status == RunStatus::Failed {
                return Err(Error::Diverged(record.failure.unwrap_or_else(|| "run failed".into())));
            }
        }
        Command::Ablate { common, seeds, losses, jobs } => {
            print_hash(&cfg);
            cfg.train.validate()?;
            if seeds.is_empty() || losses.is_empty() {
                return Err(Error::Config("ablation needs at least one seed and one loss".into()));
            }
            let samples = load_dataset(&common.data.unwrap_or_else(|| cfg.paths.data_root.clone()))?;
            let store = RunStore::open(common.store.unwrap_or_else(|| cfg.paths.run_store.clone()))?;
            let configs = trainer::ablation_configs(&cfg.train, &seeds, &losses);
            let records = run_parallel(&samples, &configs, &store, jobs.max(1));
            for r in &records {
                println!("{}", record_line(r));
            }
            println!("{}", summary_table(&summarize(&records)));
        }
        Command::Evaluate { weights, data, out, split, csv } => {
            print_hash(&cfg);
            let net = SegmentationNetwork::load(&weights)?;
            let mut samples = load_dataset(&data.unwrap_or_else(|| cfg.paths.data_root.clone()))?;
            if let Some(split) = split {
                let spec = SplitSpec::load(&split)?;
                samples.retain(|s| spec.val_ids.contains(&s.image_id));
            }
            let model = TiledModel {
                net: &net,
                tile: cfg.train.eval.tile,
            };
            let mut report = evaluate(&model, &samples, &cfg.train.postproc, &cfg.train.eval);
            report.config = Some(serde_json::json!({
                "config_hash": cfg.config_hash(),
                "weights": weights,
                "weights_hash": net.weights_hash(),
                "pipeline": cfg,
            }));
            crate::fsutil::write_json(&out, &report)?;
            if let Some(csv) = csv {
                report.write_csv(&csv)?;
            }
            println!("{}", serde_json::to_string(&report.aggregate)?);
        }
        Command::Explain { weights, image, layer, out, alpha, view } => {
            print_hash(&cfg);
            let net = SegmentationNetwork::load(&weights)?;
            let img = load_image(&image)?;
            let target = CamTarget::default();
            let heat = grad_cam(&net.net, &img, &layer, &target)?;
            let picture = match view {
                ExplainView::Overlay => overlay(&img, &heat, alpha)?,
                ExplainView::Heatmap => render_heatmap(&heat),
                ExplainView::Panel => {
                    let hm = render_heatmap(&heat);
                    let ov = overlay(&img, &heat, alpha)?;
                    side_by_side(&[&img, &hm, &ov])?
                }
            };
            crate::fsutil::write_atomic(&out, &picture.to_png_bytes()?)?;
            let meta = serde_json::json!({
                "config_hash": cfg.config_hash(),
                "weights_hash": net.weights_hash(),
                "image": image,
                "target_layer": heat.target_layer,
                "target": target,
                "alpha": alpha,
                "zero_map": heat.zero_map,
            });
            crate::fsutil::write_json(&out.with_extension("json"), &meta)?;
            println!("{meta}");
        }
        Command::EmissionsReport { runs, out } => {
            print_hash(&cfg);
            let store = RunStore::open(runs.unwrap_or_else(|| cfg.paths.run_store.clone()))?;
            let reports: Vec<(String, crate::energy::EmissionsReport)> = store
                .list()?
                .into_iter()
                .filter_map(|r| Some((r.run_id.clone(), r.loss(), r.emissions?)))
                .map(|(id, loss, e)| (format!("{loss}:{id}"), e))
                .collect();
            if let Some(out) = out {
                crate::fsutil::write_atomic(&out, reports_csv(&reports).as_bytes())?;
            }
            let by_loss: Vec<(String, crate::energy::EmissionsReport)> = reports
                .iter()
                .map(|(l, e)| (l.split(':').next().unwrap_or_default().to_string(), e.clone()))
                .collect();
            print!("{}", compare_csv(&compare(&by_loss)));
        }
        Command::Registry { store, action } => {
            print_hash(&cfg);
            let mut store = RunStore::open(store.unwrap_or_else(|| cfg.paths.run_store.clone()))?;
            store.promotion_threshold = cfg.registry.promotion_threshold;
            match action {
                RegistryAction::List => {
                    for e in store.registry()?.entries {
                        println!("{}", serde_json::to_string(&e)?);
                    }
                }
                RegistryAction::Promote { run_id, note } => {
                    let e = store.promote(&run_id, &note)?;
                    println!("{}", serde_json::to_string(&e)?);
                }
                RegistryAction::Active => match store.active()? {
                    Some(e) => println!("{}", serde_json::to_string(&e)?),
                    None => return Err(Error::NoModel),
                },
                RegistryAction::RetrainDue => {
                    let d = store.retrain_due(&cfg.retrain, chrono::Utc::now())?;
                    println!("{}", serde_json::to_string(&d)?);
                }
            }
        }
        Command::Serve { store, port, host } => {
            print_hash(&cfg);
            let mut store = RunStore::open(store.unwrap_or_else(|| cfg.paths.run_store.clone()))?;
            store.promotion_threshold = cfg.registry.promotion_threshold;
            let addr: std::net::SocketAddr = format!("{host}:{port}")
                .parse()
                .map_err(|e| Error::Config(format!("bad address {host}:{port}: {e}")))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| Error::Store(format!("runtime: {e}")))?;
            rt.block_on(async move {
                let state = AppState::new(store, cfg.service.clone())?;
                let monitor = service::spawn_monitor(state.clone());
                let (local, handle) = service::serve(state, addr, async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await?;
                println!("listening on http://{local}");
                let _ = handle.await;
                monitor.abort();
                Ok::<_, Error>(())
            })?;
        }
        Command::Config => {
            print_hash(&cfg);
            print!(
                "{}",
                toml::to_string_pretty(&cfg).map_err(|e| Error::Config(e.to_string()))?
            );
        }
    }
    Ok(())
}

/// Trains `configs` on up to `jobs` threads; records come back in config order.
fn run_parallel(samples: &[crate::dataset::Sample], configs: &[TrainConfig], store: &RunStore, jobs: usize) -> Vec<RunRecord> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<(usize, RunRecord)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(configs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(c) = configs.get(i) else { break };
                let run_id = new_run_id(c);
                match train_one(samples, c, store, Some(run_id.clone())) {
                    Ok(r) => results.lock().expect("results").push((i, r)),
                    Err(e) => {
                        log::warn!("run {run_id} failed: {e}");
                        if let Ok(r) = store.get(&run_id) {
                            results.lock().expect("results").push((i, r));
                        }
                    }
                }
            });
        }
    });
    let mut out = results.into_inner().expect("results");
    out.sort_by_key(|(i, _)| *i);
    out.into_iter().map(|(_, r)| r).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let cfg = PipelineConfig::resolve(
            None,
            &["train.network.depth=3".into(), "train.lr=0.002".into(), "paths.data_root=x/y".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.network.depth, 3);
        assert_eq!(cfg.train.lr, LrSetting::Fixed(0.002));
        assert_eq!(cfg.paths.data_root, PathBuf::from("x/y"));
        assert!(PipelineConfig::resolve(None, &["train.nope=1".into()]).is_err());
        assert!(PipelineConfig::resolve(None, &["train.max_epochs".into()]).is_err());
    }

    #[test]
    fn toml_round_trip_keeps_hash() {
        let mut cfg = PipelineConfig::default();
        cfg.train.seed = 9;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, toml::to_string_pretty(&cfg).unwrap()).unwrap();
        let back = PipelineConfig::resolve(Some(&p), &[]).unwrap();
        assert_eq!(back.config_hash(), cfg.config_hash());
    }

    #[test]
    fn usage_exit_codes() {
        assert_eq!(run(["cellcount", "--help"]), 0);
        assert_eq!(run(["cellcount", "frobnicate"]), 2);
        assert_eq!(run(["cellcount", "synth", "--bogus"]), 2);
        assert_eq!(run(["cellcount", "--set", "nope=1", "config"]), 2);
    }
}
