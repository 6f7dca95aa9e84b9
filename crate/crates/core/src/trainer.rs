//! Training protocol: learning-rate range test, warm-up before early stopping, best-weight
//! restoration, energy metering and run recording; plus the loss × seed ablation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::PathBuf;

use chrono::Utc;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{augment, center_crop, make_split, random_crop, AugmentConfig, Sample, SplitSpec};
use crate::drift::ReferenceProfile;
use crate::energy::{self, EnergyConfig, PowerProbe};
use crate::error::{Error, Result};
use crate::fsutil::write_json;
use crate::hashing::{canonical_hash, sha256_hex};
use crate::losses::{LossConfig, LossKind};
use crate::metrics::{evaluate, EvalConfig, EvalReport, TiledModel};
use crate::network::{NetworkConfig, SegmentationNetwork, UNet};
use crate::nn::{Mode, Tensor};
use crate::postproc::PostprocConfig;
use crate::runstore::{Artifacts, EpochMetrics, RunRecord, RunStatus, RunStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoLr {
    Auto,
}

/// A fixed learning rate, or `"auto"` to run the range test first.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSetting {
    Fixed(f64),
    Auto(AutoLr),
}

impl Default for LrSetting {
    fn default() -> Self {
        LrSetting::Auto(AutoLr::Auto)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrFindConfig {
    pub lr_min: f64,
    pub lr_max: f64,
    pub steps: usize,
    /// Exponential smoothing factor of the recorded loss.
    pub smoothing: f64,
    /// The ramp stops once the smoothed loss exceeds this multiple of its minimum.
    pub divergence_factor: f64,
}

impl Default for LrFindConfig {
    fn default() -> Self {
        Self {
            lr_min: 1e-7,
            lr_max: 10.0,
            steps: 100,
            smoothing: 0.98,
            divergence_factor: 4.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossConfig,
    pub network: NetworkConfig,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs_before_es: usize,
    pub es_patience: usize,
    /// Minimum absolute decrease of validation loss that counts as improvement.
    pub es_min_delta: f64,
    pub lr: LrSetting,
    pub lr_find: LrFindConfig,
    pub adam: AdamConfig,
    /// Seeds weight initialization, data order and augmentation.
    pub seed: u64,
    pub split_fraction: f64,
    /// Split seed; the run seed when absent.
    pub split_seed: Option<u64>,
    pub augment: AugmentConfig,
    /// Optimizer steps per epoch; one pass over the training images when absent.
    pub steps_per_epoch: Option<usize>,
    pub postproc: PostprocConfig,
    pub eval: EvalConfig,
    pub energy: EnergyConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossConfig::default(),
            network: NetworkConfig::default(),
            batch_size: 8,
            max_epochs: 400,
            warmup_epochs_before_es: 100,
            es_patience: 50,
            es_min_delta: 1e-5,
            lr: LrSetting::default(),
            lr_find: LrFindConfig::default(),
            adam: AdamConfig::default(),
            seed: 0,
            split_fraction: 0.75,
            split_seed: None,
            augment: AugmentConfig::default(),
            steps_per_epoch: None,
            postproc: PostprocConfig::default(),
            eval: EvalConfig::default(),
            energy: EnergyConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        self.network.validate()?;
        self.augment.validate()?;
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be positive".into()));
        }
        let m = self.network.size_multiple();
        let [ch, cw] = self.augment.crop_size;
        if ch == 0 || cw == 0 || ch % m != 0 || cw % m != 0 {
            return Err(Error::Config(format!(
                "crop size {ch}x{cw} must be a positive multiple of {m} (2^depth)"
            )));
        }
        if let LrSetting::Fixed(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
            }
        }
        let f = &self.lr_find;
        if !(f.lr_min > 0.0 && f.lr_max > f.lr_min && f.steps >= 2) {
            return Err(Error::Config("lr_find needs 0 < lr_min < lr_max and steps >= 2".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        canonical_hash(self)
    }

    pub fn effective_split_seed(&self) -> u64 {
        self.split_seed.unwrap_or(self.seed)
    }
}

/// Independent deterministic seed for a named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let digest = sha256_hex(format!("{seed}/{stream}/{index}").as_bytes());
    u64::from_str_radix(&digest[..16], 16).expect("hex digest")
}

// ---------------------------------------------------------------------------------------
// Early stopping and the epoch loop

/// Early stopping with a head start: epochs up to `warmup` never count against patience.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub warmup: usize,
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(warmup: usize, patience: usize, min_delta: f64) -> Self {
        Self {
            warmup,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records the validation loss of 1-based `epoch`; returns whether to stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.wait = 0;
        } else if epoch > self.warmup {
            self.wait += 1;
        }
        epoch >= self.warmup && self.wait >= self.patience
    }
}

/// What the epoch loop needs from a model.
pub trait EpochModel {
    /// One epoch of optimization; returns the mean training loss.
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64>;
    fn validate(&mut self) -> Result<f64>;
    /// Remember the current weights as the best so far.
    fn snapshot_best(&mut self);
    fn restore_best(&mut self);
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOutcome {
    pub series: Vec<EpochMetrics>,
    pub stopped_epoch: usize,
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub reason: StopReason,
    pub failure: Option<String>,
}

#[derive(Clone, Debug)]
pub struct FitConfig {
    pub max_epochs: usize,
    pub warmup: usize,
    pub patience: usize,
    pub min_delta: f64,
}

impl From<&TrainConfig> for FitConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            max_epochs: c.max_epochs,
            warmup: c.warmup_epochs_before_es,
            patience: c.es_patience,
            min_delta: c.es_min_delta,
        }
    }
}

/// Runs epochs until early stopping, the epoch cap, or divergence, then restores the
/// weights with the lowest validation loss.
pub fn fit<M: EpochModel + ?Sized>(
    model: &mut M,
    cfg: &FitConfig,
    lr: f64,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> FitOutcome {
    let mut es = EarlyStopping::new(cfg.warmup, cfg.patience, cfg.min_delta);
    let mut series = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_epoch = None;
    let mut reason = StopReason::MaxEpochs;
    let mut failure = None;
    let mut stopped = 0;
    for epoch in 1..=cfg.max_epochs {
        stopped = epoch;
        let step = model
            .train_epoch(epoch, lr)
            .and_then(|t| model.validate().map(|v| (t, v)));
        let (train_loss, val_loss) = match step {
            Ok(v) => v,
            Err(e) => {
                reason = StopReason::Diverged;
                failure = Some(format!("epoch {epoch}: {e}"));
                break;
            }
        };
        let m = EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr,
        };
        on_epoch(&m);
        series.push(m);
        if !val_loss.is_finite() || !train_loss.is_finite() {
            reason = StopReason::Diverged;
            failure = Some(format!(
                "non-finite loss at epoch {epoch} (train {train_loss}, val {val_loss})"
            ));
            break;
        }
        if val_loss < best {
            best = val_loss;
            best_epoch = Some(epoch);
            model.snapshot_best();
        }
        if es.observe(epoch, val_loss) {
            reason = StopReason::EarlyStop;
            break;
        }
    }
    if best_epoch.is_some() {
        model.restore_best();
    }
    FitOutcome {
        series,
        stopped_epoch: stopped,
        best_epoch,
        best_val_loss: best,
        reason,
        failure,
    }
}

// ---------------------------------------------------------------------------------------
// Learning-rate range test

pub trait LrProbe {
    /// One optimization step at `lr`; returns the loss measured before the update.
    fn step(&mut self, lr: f64) -> Result<f64>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrFindResult {
    pub suggested_lr: f64,
    pub lrs: Vec<f64>,
    pub smoothed_losses: Vec<f64>,
    pub fallback: bool,
}

/// `lr_i = lr_min · (lr_max / lr_min)^(i / (steps − 1))`.
pub fn lr_schedule(cfg: &LrFindConfig) -> Vec<f64> {
    let n = cfg.steps;
    (0..n)
        .map(|i| cfg.lr_min * (cfg.lr_max / cfg.lr_min).powf(i as f64 / (n - 1) as f64))
        .collect()
}

/// Geometric learning-rate ramp; suggests the rate of steepest smoothed-loss descent / 10.
pub fn lr_find<P: LrProbe + ?Sized>(probe: &mut P, cfg: &LrFindConfig) -> Result<LrFindResult> {
    let schedule = lr_schedule(cfg);
    let mut lrs = Vec::new();
    let mut smoothed = Vec::new();
    let mut avg = 0.0;
    let mut min_seen = f64::INFINITY;
    for (i, &lr) in schedule.iter().enumerate() {
        let loss = probe.step(lr)?;
        if !loss.is_finite() {
            if i == 0 {
                return Err(Error::Diverged(
                    "loss is NaN at the first learning-rate step; check input normalization and labels"
                        .into(),
                ));
            }
            break;
        }
        avg = cfg.smoothing * avg + (1.0 - cfg.smoothing) * loss;
        let s = avg / (1.0 - cfg.smoothing.powi(i as i32 + 1));
        lrs.push(lr);
        smoothed.push(s);
        min_seen = min_seen.min(s);
        if s > cfg.divergence_factor * min_seen {
            break;
        }
    }
    // Slope of smoothed loss against log10(lr), by finite differences.
    let mut best: Option<(usize, f64)> = None;
    let scale = smoothed.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-12);
    for i in 1..smoothed.len() {
        let slope = (smoothed[i] - smoothed[i - 1]) / (lrs[i].log10() - lrs[i - 1].log10());
        if slope < -1e-9 * scale && best.is_none_or(|(_, b)| slope < b) {
            best = Some((i, slope));
        }
    }
    let (suggested, fallback) = match best {
        Some((i, _)) => ((lrs[i] / 10.0).clamp(cfg.lr_min, cfg.lr_max), false),
        None => {
            let lr = (cfg.lr_min * 100.0).clamp(cfg.lr_min, cfg.lr_max);
            log::warn!("learning-rate test found no descending region; falling back to {lr:e}");
            (lr, true)
        }
    };
    Ok(LrFindResult {
        suggested_lr: suggested,
        lrs,
        smoothed_losses: smoothed,
        fallback,
    })
}

// ---------------------------------------------------------------------------------------
// Optimizer

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: Vec<&mut Vec<f32>>, grads: Vec<&mut Vec<f32>>, lr: f64) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.cfg.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                let gi = g[i];
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                p[i] -= step * m[i] / (v[i].sqrt() + eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------------------
// Network training

fn batch_tensor(samples: &[Sample]) -> (Tensor, Vec<f64>) {
    let (h, w) = (samples[0].height(), samples[0].width());
    let mut x = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut t = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        x.extend_from_slice(&s.image.data);
        t.extend(s.mask.data.iter().map(|&v| f64::from(v)));
    }
    (Tensor::from_vec(samples.len(), 3, h, w, x), t)
}

/// Largest window no bigger than `crop` or the image that the network accepts.
fn val_window(s: &Sample, crop: [usize; 2], m: usize) -> (usize, usize) {
    (
        crop[0].min(s.height()) / m * m,
        crop[1].min(s.width()) / m * m,
    )
}

/// Network, optimizer state and data for one run.
pub struct NetTrainer<'a> {
    pub net: UNet,
    grads: UNet,
    adam: Adam,
    best: Option<UNet>,
    cfg: &'a TrainConfig,
    train: Vec<&'a Sample>,
    val: Vec<(Tensor, Vec<f64>)>,
    probe_rng: ChaCha8Rng,
}

impl<'a> NetTrainer<'a> {
    pub fn new(cfg: &'a TrainConfig, train: Vec<&'a Sample>, val: &[&Sample]) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Dataset("no training samples".into()));
        }
        let [ch, cw] = cfg.augment.crop_size;
        for s in &train {
            if s.height() < ch || s.width() < cw {
                return Err(Error::Shape(format!(
                    "training image {} ({}x{}) is smaller than the {ch}x{cw} crop",
                    s.image_id,
                    s.height(),
                    s.width()
                )));
            }
        }
        let m = cfg.network.size_multiple();
        let mut val_batches = Vec::new();
        for s in val {
            let (h, w) = val_window(s, cfg.augment.crop_size, m);
            if h == 0 || w == 0 {
                return Err(Error::Shape(format!("validation image {} is too small", s.image_id)));
            }
            val_batches.push(batch_tensor(&[center_crop(s, (h, w))?]));
        }
        let net = UNet::new(&cfg.network, derive_seed(cfg.seed, "init", 0))?;
        Ok(Self {
            grads: net.zeros_like(),
            net,
            adam: Adam::new(cfg.adam.clone()),
            best: None,
            cfg,
            train,
            val: val_batches,
            probe_rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "lr-find", 0)),
        })
    }

    fn make_batch(&self, rng: &mut ChaCha8Rng, idx: &[usize]) -> Result<(Tensor, Vec<f64>)> {
        let [ch, cw] = self.cfg.augment.crop_size;
        let mut items = Vec::with_capacity(idx.len());
        for &i in idx {
            let (c, _) = random_crop(self.train[i], (ch, cw), rng)?;
            items.push(augment(&c, &self.cfg.augment, rng)?);
        }
        Ok(batch_tensor(&items))
    }

    /// One optimizer step on a batch; returns the batch loss before the update.
    pub fn train_step(&mut self, x: &Tensor, target: &[f64], lr: f64) -> Result<f64> {
        let (logits, trace) = self.net.forward_traced(x, Mode::Train)?;
        let (loss, dz) = self.cfg.loss.on_logits(&logits.data, target)?;
        if !loss.is_finite() {
            return Ok(loss);
        }
        let dl = Tensor::from_vec(logits.n, 1, logits.h, logits.w, dz);
        self.grads.zero_grads();
        self.net.backward(&trace, &dl, Some(&mut self.grads), &[]);
        self.net.commit_running_stats(&trace);
        self.adam.step(self.net.params_mut(), self.grads.params_mut(), lr);
        Ok(loss)
    }

    /// Training-mode loss on a batch without updating anything.
    pub fn batch_loss(&self, x: &Tensor, target: &[f64]) -> Result<f64> {
        let (logits, _) = self.net.forward_traced(x, Mode::Train)?;
        Ok(self.cfg.loss.on_logits(&logits.data, target)?.0)
    }

    /// Draws a training batch from the range-test stream.
    pub fn sample_batch(&mut self) -> Result<(Tensor, Vec<f64>)> {
        let mut rng = self.probe_rng.clone();
        let n = self.train.len();
        let idx: Vec<usize> = (0..self.cfg.batch_size)
            .map(|_| rand::Rng::random_range(&mut rng, 0..n))
            .collect();
        let out = self.make_batch(&mut rng, &idx);
        self.probe_rng = rng;
        out
    }

    fn steps_per_epoch(&self) -> usize {
        self.cfg
            .steps_per_epoch
            .unwrap_or_else(|| self.train.len().div_ceil(self.cfg.batch_size))
            .max(1)
    }

    /// Evaluation-mode loss over every validation crop taken together.
    pub fn val_loss(&self) -> Result<f64> {
        if self.val.is_empty() {
            return Ok(f64::NAN);
        }
        let mut logits = Vec::new();
        let mut target = Vec::new();
        for (x, t) in &self.val {
            logits.extend(self.net.forward(x)?.data);
            target.extend_from_slice(t);
        }
        Ok(self.cfg.loss.on_logits(&logits, &target)?.0)
    }
}

impl EpochModel for NetTrainer<'_> {
    fn train_epoch(&mut self, epoch: usize, lr: f64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, "epoch", epoch as u64));
        let n = self.train.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let b = self.cfg.batch_size;
        let steps = self.steps_per_epoch();
        let mut total = 0.0;
        for k in 0..steps {
            let idx: Vec<usize> = (0..b).map(|j| order[(k * b + j) % n]).collect();
            let (x, t) = self.make_batch(&mut rng, &idx)?;
            let loss = self.train_step(&x, &t, lr)?;
            if !loss.is_finite() {
                return Ok(loss);
            }
            total += loss;
        }
        Ok(total / steps as f64)
    }

    fn validate(&mut self) -> Result<f64> {
        self.val_loss()
    }

    fn snapshot_best(&mut self) {
        self.best = Some(self.net.clone());
    }

    fn restore_best(&mut self) {
        if let Some(b) = &self.best {
            self.net = b.clone();
        }
    }
}

impl LrProbe for NetTrainer<'_> {
    fn step(&mut self, lr: f64) -> Result<f64> {
        let (x, t) = self.sample_batch()?;
        self.train_step(&x, &t, lr)
    }
}

/// Runs the range test on a throwaway copy of the freshly initialized network.
pub fn find_lr(cfg: &TrainConfig, train: &[&Sample]) -> Result<LrFindResult> {
    let mut probe = NetTrainer::new(cfg, train.to_vec(), &[])?;
    lr_find(&mut probe, &cfg.lr_find)
}

// ---------------------------------------------------------------------------------------
// Sinks

/// Receives per-epoch metrics and lifecycle events while a run is in progress.
pub trait MetricSink {
    fn on_epoch(&mut self, run_id: &str, m: &EpochMetrics);
    fn on_event(&mut self, _run_id: &str, _event: &serde_json::Value) {}
}

/// Appends every epoch and event as one JSON line.
pub struct JsonlSink {
    file: std::fs::File,
}

impl JsonlSink {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        if let Some(d) = path.parent() {
            std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    fn write(&mut self, v: serde_json::Value) {
        let _ = writeln!(self.file, "{v}");
    }
}

impl MetricSink for JsonlSink {
    fn on_epoch(&mut self, run_id: &str, m: &EpochMetrics) {
        self.write(serde_json::json!({"run_id": run_id, "type": "epoch", "metrics": m}));
    }

    fn on_event(&mut self, run_id: &str, event: &serde_json::Value) {
        self.write(serde_json::json!({"run_id": run_id, "type": "event", "event": event}));
    }
}

pub struct LogSink;

impl MetricSink for LogSink {
    fn on_epoch(&mut self, run_id: &str, m: &EpochMetrics) {
        log::info!(
            "{run_id} epoch {} train {:.5} val {:.5} lr {:.2e}",
            m.epoch,
            m.train_loss,
            m.val_loss,
            m.lr
        );
    }

    fn on_event(&mut self, run_id: &str, event: &serde_json::Value) {
        log::info!("{run_id} {event}");
    }
}

#[derive(Default)]
pub struct MemorySink {
    pub epochs: Vec<EpochMetrics>,
    pub events: Vec<serde_json::Value>,
}

impl MetricSink for MemorySink {
    fn on_epoch(&mut self, _run_id: &str, m: &EpochMetrics) {
        self.epochs.push(m.clone());
    }

    fn on_event(&mut self, _run_id: &str, event: &serde_json::Value) {
        self.events.push(event.clone());
    }
}

// ---------------------------------------------------------------------------------------
// Runs

pub struct TrainOptions<'s> {
    pub sinks: Vec<&'s mut dyn MetricSink>,
    pub probe: Box<dyn Fn() -> Box<dyn PowerProbe> + 's>,
    /// Overrides the generated run id.
    pub run_id: Option<String>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            sinks: Vec::new(),
            probe: Box::new(energy::default_probe),
            run_id: None,
        }
    }
}

pub fn new_run_id(cfg: &TrainConfig) -> String {
    let now = Utc::now();
    let tag = &sha256_hex(format!("{}{}", cfg.config_hash(), now.timestamp_nanos_opt().unwrap_or(0)).as_bytes())[..6];
    format!(
        "{}-s{}-{}-{tag}",
        cfg.loss.kind,
        cfg.seed,
        now.format("%Y%m%dT%H%M%S")
    )
}

struct RunOutput {
    lr: f64,
    outcome: FitOutcome,
    net: Option<UNet>,
    report: Option<EvalReport>,
}

fn run_training(
    cfg: &TrainConfig,
    train: &[&Sample],
    val: &[&Sample],
    run_id: &str,
    sinks: &mut [&mut dyn MetricSink],
) -> Result<RunOutput> {
    let lr = match cfg.lr {
        LrSetting::Fixed(lr) => lr,
        LrSetting::Auto(_) => {
            let found = find_lr(cfg, train)?;
            for s in sinks.iter_mut() {
                s.on_event(
                    run_id,
                    &serde_json::json!({"lr_find": {"suggested_lr": found.suggested_lr, "fallback": found.fallback, "steps": found.lrs.len()}}),
                );
            }
            found.suggested_lr
        }
    };
    let mut trainer = NetTrainer::new(cfg, train.to_vec(), val)?;
    let outcome = fit(&mut trainer, &FitConfig::from(cfg), lr, |m| {
        for s in sinks.iter_mut() {
            s.on_epoch(run_id, m);
        }
    });
    if outcome.reason == StopReason::Diverged {
        return Ok(RunOutput {
            lr,
            outcome,
            net: None,
            report: None,
        });
    }
    let seg = SegmentationNetwork {
        net: trainer.net.clone(),
        training_run_id: Some(run_id.to_string()),
    };
    let val_owned: Vec<Sample> = val.iter().map(|s| (*s).clone()).collect();
    let report = evaluate(
        &TiledModel {
            net: &seg,
            tile: cfg.eval.tile,
        },
        &val_owned,
        &cfg.postproc,
        &cfg.eval,
    );
    Ok(RunOutput {
        lr,
        outcome,
        net: Some(trainer.net),
        report: Some(report),
    })
}

/// Splits `samples`, trains one network under `cfg` with energy metering, evaluates it on
/// the validation split, and persists the record and artifacts in `store`.
///
/// Divergence does not return an error: the record is stored with status `failed`.
pub fn train(samples: &[Sample], cfg: &TrainConfig, store: &RunStore, mut opts: TrainOptions<'_>) -> Result<RunRecord> {
    cfg.validate()?;
    let split = make_split(samples, cfg.split_fraction, cfg.effective_split_seed())?;
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.image_id.as_str(), s)).collect();
    let pick = |ids: &[String]| ids.iter().map(|id| by_id[id.as_str()]).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&split.train_ids), pick(&split.val_ids));

    let run_id = opts.run_id.clone().unwrap_or_else(|| new_run_id(cfg));
    let mut record = RunRecord {
        run_id: run_id.clone(),
        created_at: Utc::now(),
        status: RunStatus::Running,
        config: cfg.clone(),
        config_hash: cfg.config_hash(),
        split_hash: split.split_hash.clone(),
        seed: cfg.seed,
        lr: None,
        epoch_series: Vec::new(),
        stopped_epoch: None,
        best_epoch: None,
        final_metrics: None,
        emissions: None,
        artifacts: None,
        failure: None,
    };
    store.append(&record)?;
    let art_rel = store.artifact_dir(&run_id);
    let art_dir = store.resolve(&art_rel);
    split.save(&art_dir.join("split.json"))?;

    let probe = (opts.probe)();
    let (result, emissions) = energy::meter(
        || run_training(cfg, &train_set, &val_set, &run_id, &mut opts.sinks),
        probe,
        &cfg.energy,
    );
    record.emissions = Some(emissions);
    let out = match result {
        Ok(o) => o,
        Err(e) => {
            record.status = RunStatus::Failed;
            record.failure = Some(e.to_string());
            store.update(&record)?;
            return Err(e);
        }
    };
    record.lr = Some(out.lr);
    record.epoch_series = out.outcome.series.clone();
    record.stopped_epoch = Some(out.outcome.stopped_epoch);
    record.best_epoch = out.outcome.best_epoch;
    let (Some(net), Some(report)) = (out.net, out.report) else {
        record.status = RunStatus::Failed;
        record.failure = out.outcome.failure.clone();
        log::warn!("run {run_id} failed: {}", record.failure.as_deref().unwrap_or("diverged"));
        store.update(&record)?;
        return Ok(record);
    };

    let seg = SegmentationNetwork {
        net,
        training_run_id: Some(run_id.clone()),
    };
    let weights_rel = format!("{art_rel}/weights.bin");
    let sidecar = seg.save(&store.resolve(&weights_rel))?;
    let report_rel = format!("{art_rel}/report.json");
    let report_bytes = serde_json::to_vec_pretty(&report)?;
    crate::fsutil::write_atomic(&store.resolve(&report_rel), &report_bytes)?;
    report.write_csv(&art_dir.join("report.csv"))?;
    let reference = ReferenceProfile::build(
        &train_set.iter().map(|s| &s.image).collect::<Vec<_>>(),
        &report.per_image.iter().map(|r| r.pred_count).collect::<Vec<_>>(),
    );
    let reference_rel = format!("{art_rel}/reference.json");
    write_json(&store.resolve(&reference_rel), &reference)?;

    record.final_metrics = Some(report.aggregate.clone());
    record.artifacts = Some(Artifacts {
        weights_path: weights_rel,
        weights_hash: sidecar.weights_hash,
        report_path: report_rel,
        report_hash: sha256_hex(&report_bytes),
        reference_path: Some(reference_rel),
    });
    record.status = RunStatus::Completed;
    store.update(&record)?;
    for s in opts.sinks.iter_mut() {
        s.on_event(&run_id, &serde_json::json!({"completed": {"stop": out.outcome.reason, "best_epoch": out.outcome.best_epoch}}));
    }
    Ok(record)
}

/// The split a run would use, without training.
pub fn split_for(samples: &[Sample], cfg: &TrainConfig) -> Result<SplitSpec> {
    make_split(samples, cfg.split_fraction, cfg.effective_split_seed())
}

// ---------------------------------------------------------------------------------------
// Ablation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Self {
            mean,
            std,
            n: values.len(),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub loss: LossKind,
    pub runs: usize,
    pub failed_runs: Vec<String>,
    pub metrics: BTreeMap<String, MeanStd>,
}

/// Per-loss mean ± std of every evaluation and emissions metric over completed runs.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut losses: Vec<LossKind> = Vec::new();
    for r in records {
        if !losses.contains(&r.loss()) {
            losses.push(r.loss());
        }
    }
    losses
        .into_iter()
        .map(|loss| {
            let group: Vec<&RunRecord> = records.iter().filter(|r| r.loss() == loss).collect();
            let ok: Vec<&RunRecord> = group
                .iter()
                .copied()
                .filter(|r| r.status == RunStatus::Completed && r.final_metrics.is_some())
                .collect();
            let failed: Vec<String> = group
                .iter()
                .filter(|r| r.status != RunStatus::Completed)
                .map(|r| r.run_id.clone())
                .collect();
            if !failed.is_empty() {
                log::warn!("{loss}: {} failed run(s) excluded from the summary", failed.len());
            }
            let mut metrics = BTreeMap::new();
            let mut put = |name: &str, vals: Vec<f64>| {
                if let Some(ms) = MeanStd::of(&vals) {
                    metrics.insert(name.to_string(), ms);
                }
            };
            let fm = |f: fn(&crate::metrics::Aggregate) -> Option<f64>| {
                ok.iter()
                    .filter_map(|r| r.final_metrics.as_ref().and_then(f))
                    .collect::<Vec<_>>()
            };
            put("seg_f1", fm(|m| Some(m.seg_f1)));
            put("det_f1", fm(|m| Some(m.det_f1)));
            put("mpe_signed", fm(|m| m.mpe_signed));
            put("mape", fm(|m| m.mape));
            let em = |f: fn(&crate::energy::EmissionsReport) -> f64| {
                ok.iter()
                    .filter_map(|r| r.emissions.as_ref().map(f))
                    .collect::<Vec<_>>()
            };
            put("cpu_kwh", em(|e| e.cpu_kwh));
            put("gpu_kwh", em(|e| e.gpu_kwh));
            put("co2_kg", em(|e| e.co2_kg));
            put("duration_s", em(|e| e.duration_s));
            SummaryRow {
                loss,
                runs: ok.len(),
                failed_runs: failed,
                metrics,
            }
        })
        .collect()
}

pub fn summary_table(rows: &[SummaryRow]) -> String {
    let names = ["seg_f1", "det_f1", "mpe_signed", "mape", "co2_kg"];
    let mut out = format!("{:<6} {:>4}", "loss", "runs");
    for n in names {
        out.push_str(&format!(" {n:>22}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{:<6} {:>4}", r.loss.as_str(), r.runs));
        for n in names {
            let cell = r
                .metrics
                .get(n)
                .map(|m| format!("{:.4} ± {:.4}", m.mean, m.std))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {cell:>22}"));
        }
        if !r.failed_runs.is_empty() {
            out.push_str(&format!("  ({} failed)", r.failed_runs.len()));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
}

/// Every `(loss, seed)` combination of `base`, with the same seeds reused for each loss.
pub fn ablation_configs(base: &TrainConfig, seeds: &[u64], losses: &[LossKind]) -> Vec<TrainConfig> {
    let mut out = Vec::new();
    for &loss in losses {
        for &seed in seeds {
            let mut c = base.clone();
            c.loss.kind = loss;
            c.seed = seed;
            out.push(c);
        }
    }
    out
}

pub fn ablation(
    samples: &[Sample],
    seeds: &[u64],
    losses: &[LossKind],
    base: &TrainConfig,
    store: &RunStore,
    mut make_opts: impl FnMut(&TrainConfig) -> TrainOptions<'static>,
) -> Result<AblationResult> {
    let mut records = Vec::new();
    for cfg in ablation_configs(base, seeds, losses) {
        match train(samples, &cfg, store, make_opts(&cfg)) {
            Ok(r) => records.push(r),
            Err(e) => {
                log::warn!("run {} / seed {} failed: {e}", cfg.loss.kind, cfg.seed);
                // The store keeps the failed record; pick it up for the summary.
                if let Some(r) = store
                    .query(&crate::runstore::RunFilter {
                        loss: Some(cfg.loss.kind),
                        seed: Some(cfg.seed),
                        status: Some(RunStatus::Failed),
                        ..Default::default()
                    })?
                    .pop()
                {
                    records.push(r);
                }
            }
        }
    }
    let summary = summarize(&records);
    Ok(AblationResult { records, summary })
}

fn flatten(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, x) in map {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, x, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// Dotted paths of every leaf field that differs between two serializable configs.
pub fn config_diff<T: Serialize>(a: &T, b: &T) -> Result<BTreeSet<String>> {
    let (mut fa, mut fb) = (BTreeMap::new(), BTreeMap::new());
    flatten("", &serde_json::to_value(a)?, &mut fa);
    flatten("", &serde_json::to_value(b)?, &mut fb);
    let keys: BTreeSet<&String> = fa.keys().chain(fb.keys()).collect();
    Ok(keys
        .into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .cloned()
        .collect())
}

pub fn default_jsonl_path(store: &RunStore, run_id: &str) -> PathBuf {
    store.resolve(&format!("{}/metrics.jsonl", store.artifact_dir(run_id)))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Scripted validation losses; "weights" are the epoch number.
    struct Scripted {
        losses: Vec<f64>,
        epoch: usize,
        best: usize,
    }

    impl EpochModel for Scripted {
        fn train_epoch(&mut self, epoch: usize, _lr: f64) -> Result<f64> {
            self.epoch = epoch;
            Ok(1.0)
        }
        fn validate(&mut self) -> Result<f64> {
            Ok(self.losses[(self.epoch - 1).min(self.losses.len() - 1)])
        }
        fn snapshot_best(&mut self) {
            self.best = self.epoch;
        }
        fn restore_best(&mut self) {
            self.epoch = self.best;
        }
    }

    fn paper_fit(max_epochs: usize) -> FitConfig {
        FitConfig {
            max_epochs,
            warmup: 100,
            patience: 50,
            min_delta: 1e-5,
        }
    }

    #[test]
    fn plateau_from_first_epoch_stops_at_150() {
        let mut m = Scripted {
            losses: vec![0.5],
            epoch: 0,
            best: 0,
        };
        let out = fit(&mut m, &paper_fit(400), 1e-3, |_| {});
        assert_eq!(out.stopped_epoch, 150);
        assert_eq!(out.reason, StopReason::EarlyStop);
        assert_eq!(out.best_epoch, Some(1));
        assert_eq!(m.epoch, 1);
    }

    #[test]
    fn decreasing_loss_runs_to_cap() {
        let mut m = Scripted {
            losses: (0..400).map(|i| 1.0 - i as f64 * 1e-3).collect(),
            epoch: 0,
            best: 0,
        };
        let out = fit(&mut m, &paper_fit(400), 1e-3, |_| {});
        assert_eq!(out.stopped_epoch, 400);
        assert_eq!(out.reason, StopReason::MaxEpochs);
        assert_eq!(m.epoch, 400);
    }

    #[test]
    fn best_weights_are_restored() {
        let mut losses: Vec<f64> = (0..120).map(|i| 1.0 - i as f64 * 0.005).collect();
        losses.extend(std::iter::repeat_n(0.9, 200));
        let mut m = Scripted {
            losses,
            epoch: 0,
            best: 0,
        };
        let out = fit(&mut m, &paper_fit(400), 1e-3, |_| {});
        assert_eq!(out.best_epoch, Some(120));
        assert_eq!(out.stopped_epoch, 170);
        assert_eq!(m.epoch, 120);
        let min = out.series.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best_val_loss, min);
    }

    #[test]
    fn nan_validation_loss_marks_divergence() {
        let mut m = Scripted {
            losses: vec![0.5, 0.4, f64::NAN],
            epoch: 0,
            best: 0,
        };
        let out = fit(&mut m, &paper_fit(400), 1e-3, |_| {});
        assert_eq!(out.reason, StopReason::Diverged);
        assert_eq!(out.series.len(), 3);
        assert_eq!(m.epoch, 2);
    }

    struct Constant;
    impl LrProbe for Constant {
        fn step(&mut self, _lr: f64) -> Result<f64> {
            Ok(0.7)
        }
    }

    /// Loss falls fastest around lr = 1e-3 and blows up beyond 1.
    struct Bowl;
    impl LrProbe for Bowl {
        fn step(&mut self, lr: f64) -> Result<f64> {
            let x = lr.log10();
            Ok(if x < 0.0 { 1.0 - 0.5 * (1.0 + ((x + 3.0) * 2.0).tanh()) + 0.01 } else { 1.0 + 10.0 * x })
        }
    }

    #[test]
    fn schedule_endpoints() {
        let s = lr_schedule(&LrFindConfig::default());
        assert_eq!(s.len(), 100);
        assert!((s[0] - 1e-7).abs() < 1e-20);
        assert!((s[99] - 10.0).abs() < 1e-9);
        let expect = 1e-7 * 1e8f64.powf(50.0 / 99.0);
        assert!((s[50] - expect).abs() < 1e-15);
        assert!((s[50] - 1.10e-3).abs() < 0.01e-3);
    }

    #[test]
    fn constant_loss_falls_back() {
        let r = lr_find(&mut Constant, &LrFindConfig::default()).unwrap();
        assert!(r.fallback);
        assert!((r.suggested_lr - 1e-5).abs() < 1e-18);
    }

    #[test]
    fn suggestion_is_in_range_and_near_the_steepest_descent() {
        let cfg = LrFindConfig {
            smoothing: 0.0,
            ..Default::default()
        };
        let r = lr_find(&mut Bowl, &cfg).unwrap();
        assert!(!r.fallback);
        assert!(r.suggested_lr >= cfg.lr_min && r.suggested_lr <= cfg.lr_max);
        assert!((r.suggested_lr.log10() + 4.0).abs() < 0.2, "{}", r.suggested_lr);
        assert!(r.lrs.len() < 100, "ramp should stop on divergence");
    }

    #[test]
    fn nan_at_first_step_is_an_error() {
        struct Nan;
        impl LrProbe for Nan {
            fn step(&mut self, _lr: f64) -> Result<f64> {
                Ok(f64::NAN)
            }
        }
        assert!(lr_find(&mut Nan, &LrFindConfig::default()).is_err());
    }

    #[test]
    fn lr_setting_serde() {
        #[derive(Serialize, Deserialize)]
        struct W {
            lr: LrSetting,
        }
        let a: W = toml::from_str("lr = \"auto\"").unwrap();
        assert_eq!(a.lr, LrSetting::Auto(AutoLr::Auto));
        let b: W = toml::from_str("lr = 0.001").unwrap();
        assert_eq!(b.lr, LrSetting::Fixed(0.001));
    }

    #[test]
    fn ablation_configs_differ_only_in_loss_and_seed() {
        let cfgs = ablation_configs(&TrainConfig::default(), &[1, 2, 3], &[LossKind::Dice, LossKind::Focal]);
        assert_eq!(cfgs.len(), 6);
        let allowed: BTreeSet<String> = ["loss.kind", "seed"].iter().map(|s| s.to_string()).collect();
        for a in &cfgs {
            for b in &cfgs {
                assert!(config_diff(a, b).unwrap().is_subset(&allowed));
            }
        }
    }

    #[test]
    fn mean_std() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[4.0]).unwrap().std, 0.0);
    }
}
