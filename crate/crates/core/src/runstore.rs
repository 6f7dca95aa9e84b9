//! Local experiment tracking and model registry.
//!
//! Layout under the store root:
//!
//! ```text
//! runs/<run_id>.json          one record per run
//! artifacts/<run_id>/...      weights, sidecar, evaluation report, reference profile
//! registry.json               promoted model versions
//! monitor/drift.json          drift flag raised by the serving monitor
//! .lock                       writer lock, held per operation
//! ```
//!
//! Every write goes through a temporary file and a rename, so a crash leaves either the old
//! or the new document, never a partial one.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::energy::EmissionsReport;
use crate::error::{Error, Result};
use crate::fsutil::{read_json, write_json, TMP_SUFFIX};
use crate::hashing::sha256_hex;
use crate::losses::LossKind;
use crate::metrics::Aggregate;
use crate::network::SegmentationNetwork;
use crate::trainer::TrainConfig;

pub const DEFAULT_PROMOTION_THRESHOLD: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifacts {
    /// Paths are relative to the store root.
    pub weights_path: String,
    pub weights_hash: String,
    pub report_path: String,
    pub report_hash: String,
    pub reference_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    pub config: TrainConfig,
    pub config_hash: String,
    pub split_hash: String,
    pub seed: u64,
    pub lr: Option<f64>,
    pub epoch_series: Vec<EpochMetrics>,
    pub stopped_epoch: Option<usize>,
    pub best_epoch: Option<usize>,
    pub final_metrics: Option<Aggregate>,
    pub emissions: Option<EmissionsReport>,
    pub artifacts: Option<Artifacts>,
    pub failure: Option<String>,
}

impl RunRecord {
    pub fn loss(&self) -> LossKind {
        self.config.loss.kind
    }

    pub fn det_f1(&self) -> Option<f64> {
        self.final_metrics.as_ref().map(|m| m.det_f1)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunFilter {
    pub loss: Option<LossKind>,
    pub seed: Option<u64>,
    pub status: Option<RunStatus>,
    pub min_det_f1: Option<f64>,
}

impl RunFilter {
    pub fn matches(&self, r: &RunRecord) -> bool {
        self.loss.is_none_or(|l| r.loss() == l)
            && self.seed.is_none_or(|s| r.seed == s)
            && self.status.is_none_or(|s| r.status == s)
            && self.min_det_f1.is_none_or(|m| r.det_f1().is_some_and(|f| f >= m))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_version: u64,
    pub run_id: String,
    pub promoted_at: DateTime<Utc>,
    pub promotion_note: String,
    pub active: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Registry {
    pub entries: Vec<RegistryEntry>,
}

impl Registry {
    pub fn active(&self) -> Option<&RegistryEntry> {
        self.entries.iter().find(|e| e.active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftFlag {
    pub set: bool,
    pub updated_at: DateTime<Utc>,
    pub window_id: Option<u64>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrainPolicy {
    pub periodic_days: Option<f64>,
    /// Honour the drift flag raised by the serving monitor.
    pub drift: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainDecision {
    pub due: bool,
    pub reason: Option<String>,
}

/// Exclusive writer lock on the store; released on drop.
struct LockGuard(File);

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = self.0.unlock();
    }
}

#[derive(Clone, Debug)]
pub struct RunStore {
    root: PathBuf,
    pub promotion_threshold: f64,
}

fn valid_run_id(id: &str) -> bool {
    !id.is_empty()
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.')
}

impl RunStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        for d in [root.join("runs"), root.join("artifacts"), root.join("monitor")] {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        Ok(Self {
            root,
            promotion_threshold: DEFAULT_PROMOTION_THRESHOLD,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Directory for a run's artifacts, relative to the root.
    pub fn artifact_dir(&self, run_id: &str) -> String {
        format!("artifacts/{run_id}")
    }

    fn lock(&self) -> Result<LockGuard> {
        let path = self.root.join(".lock");
        let f = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        f.lock().map_err(|e| Error::io(&path, e))?;
        Ok(LockGuard(f))
    }

    fn run_path(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(format!("{run_id}.json"))
    }

    pub fn append(&self, record: &RunRecord) -> Result<String> {
        if !valid_run_id(&record.run_id) {
            return Err(Error::Store(format!("invalid run id `{}`", record.run_id)));
        }
        let _g = self.lock()?;
        let path = self.run_path(&record.run_id);
        if path.exists() {
            return Err(Error::Store(format!("run `{}` already exists", record.run_id)));
        }
        write_json(&path, record)?;
        Ok(record.run_id.clone())
    }

    /// Replaces a record that is still running. Completed and failed records are immutable.
    pub fn update(&self, record: &RunRecord) -> Result<()> {
        let _g = self.lock()?;
        let current = self.get(&record.run_id)?;
        if current.status != RunStatus::Running {
            return Err(Error::Store(format!(
                "run `{}` is {:?} and can no longer be modified",
                record.run_id, current.status
            )));
        }
        write_json(&self.run_path(&record.run_id), record)
    }

    pub fn get(&self, run_id: &str) -> Result<RunRecord> {
        let path = self.run_path(run_id);
        if !path.exists() {
            return Err(Error::Store(format!("no run `{run_id}`")));
        }
        read_json(&path)
    }

    /// All records ordered by creation time (then id). Leftover temporary files from
    /// interrupted writes are ignored.
    pub fn list(&self) -> Result<Vec<RunRecord>> {
        let dir = self.root.join("runs");
        let mut out = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let path = entry.map_err(|e| Error::io(&dir, e))?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
            if name.ends_with(TMP_SUFFIX) || !name.ends_with(".json") {
                continue;
            }
            out.push(read_json::<RunRecord>(&path)?);
        }
        out.sort_by(|a, b| (a.created_at, &a.run_id).cmp(&(b.created_at, &b.run_id)));
        Ok(out)
    }

    pub fn query(&self, filter: &RunFilter) -> Result<Vec<RunRecord>> {
        Ok(self.list()?.into_iter().filter(|r| filter.matches(r)).collect())
    }

    /// Checks that every artifact a record references exists and matches its hash.
    pub fn verify_artifacts(&self, record: &RunRecord) -> Result<()> {
        let a = record
            .artifacts
            .as_ref()
            .ok_or_else(|| Error::Store(format!("run `{}` has no artifacts", record.run_id)))?;
        let net = SegmentationNetwork::load(&self.resolve(&a.weights_path))?;
        if net.weights_hash() != a.weights_hash {
            return Err(Error::Corrupt(format!(
                "weights of run `{}` do not match the recorded hash",
                record.run_id
            )));
        }
        let report_path = self.resolve(&a.report_path);
        let bytes = fs::read(&report_path).map_err(|e| Error::io(&report_path, e))?;
        if sha256_hex(&bytes) != a.report_hash {
            return Err(Error::Corrupt(format!(
                "report of run `{}` does not match the recorded hash",
                record.run_id
            )));
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<Registry> {
        let path = self.root.join("registry.json");
        if !path.exists() {
            return Ok(Registry::default());
        }
        read_json(&path)
    }

    pub fn active(&self) -> Result<Option<RegistryEntry>> {
        Ok(self.registry()?.active().cloned())
    }

    /// Loads the weights of the active model version.
    pub fn load_active(&self) -> Result<Option<(RegistryEntry, SegmentationNetwork)>> {
        let Some(entry) = self.active()? else {
            return Ok(None);
        };
        let record = self.get(&entry.run_id)?;
        let a = record
            .artifacts
            .ok_or_else(|| Error::Store(format!("active run `{}` has no artifacts", entry.run_id)))?;
        let net = SegmentationNetwork::load(&self.resolve(&a.weights_path))?;
        Ok(Some((entry, net)))
    }

    /// Registers a completed run as the new active model version.
    pub fn promote(&self, run_id: &str, note: &str) -> Result<RegistryEntry> {
        let record = self.get(run_id)?;
        if record.status != RunStatus::Completed {
            return Err(Error::PromotionRefused(format!(
                "run `{run_id}` is {:?}, not completed",
                record.status
            )));
        }
        let det_f1 = record.det_f1().ok_or_else(|| {
            Error::PromotionRefused(format!("run `{run_id}` has no evaluation metrics"))
        })?;
        if !(det_f1 >= self.promotion_threshold) {
            return Err(Error::PromotionRefused(format!(
                "det_f1 {det_f1:.4} is below the promotion threshold {:.4}",
                self.promotion_threshold
            )));
        }
        self.verify_artifacts(&record)
            .map_err(|e| Error::PromotionRefused(format!("artifact check failed: {e}")))?;
        let _g = self.lock()?;
        let mut reg = self.registry()?;
        for e in &mut reg.entries {
            e.active = false;
        }
        let entry = RegistryEntry {
            model_version: reg.entries.len() as u64 + 1,
            run_id: run_id.to_string(),
            promoted_at: Utc::now(),
            promotion_note: note.to_string(),
            active: true,
        };
        reg.entries.push(entry.clone());
        write_json(&self.root.join("registry.json"), &reg)?;
        log::info!(
            "{}",
            serde_json::json!({"event": "promotion", "model_version": entry.model_version, "run_id": run_id, "det_f1": det_f1})
        );
        Ok(entry)
    }

    fn drift_path(&self) -> PathBuf {
        self.root.join("monitor").join("drift.json")
    }

    pub fn set_drift_flag(&self, flag: &DriftFlag) -> Result<()> {
        let _g = self.lock()?;
        write_json(&self.drift_path(), flag)
    }

    pub fn drift_flag(&self) -> Result<Option<DriftFlag>> {
        let p = self.drift_path();
        if !p.exists() {
            return Ok(None);
        }
        read_json(&p).map(Some)
    }

    /// Whether a new training run is due at `now`, and why.
    pub fn retrain_due(&self, policy: &RetrainPolicy, now: DateTime<Utc>) -> Result<RetrainDecision> {
        if policy.drift && self.drift_flag()?.is_some_and(|f| f.set) {
            return Ok(RetrainDecision {
                due: true,
                reason: Some("drift".into()),
            });
        }
        if let Some(days) = policy.periodic_days {
            let last = self
                .query(&RunFilter {
                    status: Some(RunStatus::Completed),
                    ..Default::default()
                })?
                .into_iter()
                .map(|r| r.created_at)
                .max();
            let stale = match last {
                Some(t) => (now - t).num_milliseconds() as f64 / 86_400_000.0 >= days,
                None => true,
            };
            if stale {
                return Ok(RetrainDecision {
                    due: true,
                    reason: Some("periodic".into()),
                });
            }
        }
        Ok(RetrainDecision {
            due: false,
            reason: None,
        })
    }
}
