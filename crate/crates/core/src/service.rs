//! HTTP inference service with request logging and drift monitoring.
//!
//! The active registry version is checked on every request. When it changes, the new weights
//! are loaded and swapped in as one immutable snapshot; a request holds its snapshot from
//! start to finish, so no response mixes versions.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use chrono::Utc;
use serde::{Deserialize, Serialize};

use crate::dataset::{Image, Mask};
use crate::drift::{self, DriftConfig, DriftReport, DriftStatus, Monitor, ReferenceProfile, RequestStats};
use crate::error::{Error, Result};
use crate::explain::{grad_cam, overlay, CamTarget};
use crate::network::{SegmentationNetwork, DEFAULT_CAM_LAYER};
use crate::postproc::{count_cells, CountResult, PostprocConfig};
use crate::runstore::{DriftFlag, RunStore};

/// Row-major run-length encoding. Runs alternate background/foreground, starting with a
/// (possibly empty) background run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RleMask {
    pub height: usize,
    pub width: usize,
    pub runs: Vec<u32>,
}

impl RleMask {
    pub fn encode(mask: &Mask) -> Self {
        let mut runs = Vec::new();
        let mut current = 0u8;
        let mut len = 0u32;
        for &v in &mask.data {
            let v = u8::from(v != 0);
            if v != current {
                runs.push(len);
                current = v;
                len = 0;
            }
            len += 1;
        }
        runs.push(len);
        Self {
            height: mask.height,
            width: mask.width,
            runs,
        }
    }

    pub fn decode(&self) -> Result<Mask> {
        let total: u64 = self.runs.iter().map(|&r| u64::from(r)).sum();
        if total != (self.height * self.width) as u64 {
            return Err(Error::Decode(format!(
                "run lengths sum to {total}, expected {}",
                self.height * self.width
            )));
        }
        let mut data = Vec::with_capacity(self.height * self.width);
        for (i, &r) in self.runs.iter().enumerate() {
            data.extend(std::iter::repeat_n((i % 2) as u8, r as usize));
        }
        Ok(Mask {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PredictRequest {
    /// Base64-encoded PNG.
    pub image: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictResponse {
    pub count: usize,
    pub mask: RleMask,
    pub centroids: Vec<(f64, f64)>,
    pub model_version: u64,
    pub latency_ms: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExplainRequest {
    pub image: String,
    pub layer: Option<String>,
    pub alpha: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub model_version: Option<u64>,
    pub uptime_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServiceConfig {
    pub postproc: PostprocConfig,
    pub tile: usize,
    pub drift: DriftConfig,
    pub monitor_interval_ms: u64,
    pub explain_alpha: f32,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            postproc: PostprocConfig::default(),
            tile: 512,
            drift: DriftConfig::default(),
            monitor_interval_ms: 1000,
            explain_alpha: 0.4,
        }
    }
}

/// The exact offline inference path: native-resolution logits, then post-processing.
pub fn predict_counts(net: &SegmentationNetwork, image: &Image, postproc: &PostprocConfig, tile: usize) -> Result<CountResult> {
    let logits = net.predict_image(image, tile)?;
    Ok(count_cells(&logits, image.height, image.width, postproc))
}

pub fn encode_png_b64(image: &Image) -> Result<String> {
    Ok(base64::engine::general_purpose::STANDARD.encode(image.to_png_bytes()?))
}

pub fn decode_png_b64(payload: &str) -> Result<Image> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(payload.trim())
        .map_err(|e| Error::Decode(format!("payload is not base64: {e}")))?;
    Image::from_png_bytes(&bytes)
}

struct Snapshot {
    version: u64,
    run_id: String,
    net: SegmentationNetwork,
    reference: Option<ReferenceProfile>,
}

#[derive(Default)]
struct Counters {
    predict: u64,
    explain: u64,
    errors: u64,
    latency_ms_sum: f64,
}

pub struct AppState {
    store: RunStore,
    cfg: ServiceConfig,
    started: Instant,
    snapshot: RwLock<Option<Arc<Snapshot>>>,
    swap_lock: Mutex<()>,
    monitor: Mutex<Option<(u64, Monitor)>>,
    last_drift: Mutex<Option<DriftReport>>,
    counters: Mutex<Counters>,
    request_log: Mutex<File>,
    drift_log: Mutex<File>,
}

fn open_log(path: &PathBuf) -> Result<File> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

impl AppState {
    pub fn new(store: RunStore, cfg: ServiceConfig) -> Result<Arc<Self>> {
        let monitor_dir = store.root().join("monitor");
        let state = Arc::new(Self {
            request_log: Mutex::new(open_log(&monitor_dir.join("requests.jsonl"))?),
            drift_log: Mutex::new(open_log(&monitor_dir.join("drift.jsonl"))?),
            store,
            cfg,
            started: Instant::now(),
            snapshot: RwLock::new(None),
            swap_lock: Mutex::new(()),
            monitor: Mutex::new(None),
            last_drift: Mutex::new(None),
            counters: Mutex::new(Counters::default()),
        });
        Ok(state)
    }

    pub fn store(&self) -> &RunStore {
        &self.store
    }

    /// The snapshot for the currently active version, loading it if the registry moved.
    fn current(&self) -> Result<Option<Arc<Snapshot>>> {
        let Some(entry) = self.store.active()? else {
            return Ok(None);
        };
        if let Some(s) = self.snapshot.read().expect("snapshot lock").as_ref() {
            if s.version == entry.model_version {
                return Ok(Some(s.clone()));
            }
        }
        let _g = self.swap_lock.lock().expect("swap lock");
        if let Some(s) = self.snapshot.read().expect("snapshot lock").as_ref() {
            if s.version == entry.model_version {
                return Ok(Some(s.clone()));
            }
        }
        let record = self.store.get(&entry.run_id)?;
        let artifacts = record
            .artifacts
            .ok_or_else(|| Error::Store(format!("active run `{}` has no artifacts", entry.run_id)))?;
        let net = SegmentationNetwork::load(&self.store.resolve(&artifacts.weights_path))?;
        let reference = match &artifacts.reference_path {
            Some(p) => Some(drift::load_reference(&self.store.resolve(p))?),
            None => None,
        };
        let snap = Arc::new(Snapshot {
            version: entry.model_version,
            run_id: entry.run_id.clone(),
            net,
            reference,
        });
        *self.snapshot.write().expect("snapshot lock") = Some(snap.clone());
        log::info!(
            "{}",
            serde_json::json!({"event": "model_swap", "model_version": snap.version, "run_id": snap.run_id})
        );
        Ok(Some(snap))
    }

    fn log_request(&self, v: serde_json::Value) {
        if let Ok(mut f) = self.request_log.lock() {
            let _ = writeln!(f, "{v}");
        }
    }

    fn record_stats(&self, snap: &Snapshot, stats: RequestStats) {
        let Some(reference) = &snap.reference else {
            return;
        };
        let mut guard = self.monitor.lock().expect("monitor lock");
        if guard.as_ref().is_none_or(|(v, _)| *v != snap.version) {
            *guard = Some((snap.version, Monitor::new(reference.clone(), self.cfg.drift.clone())));
        }
        if let Some((_, m)) = guard.as_mut() {
            m.record(stats);
        }
    }

    pub fn predict(&self, image: &Image) -> Result<PredictResponse> {
        let start = Instant::now();
        let snap = self.current()?.ok_or(Error::NoModel)?;
        let result = predict_counts(&snap.net, image, &self.cfg.postproc, self.cfg.tile)?;
        let latency_ms = start.elapsed().as_secs_f64() * 1e3;
        let input_hist = drift::intensity_histogram(image);
        self.log_request(serde_json::json!({
            "timestamp": Utc::now(),
            "endpoint": "predict",
            "model_version": snap.version,
            "latency_ms": latency_ms,
            "count": result.count,
            "height": image.height,
            "width": image.width,
            "input_mean": image.gray().iter().map(|&v| f64::from(v)).sum::<f64>() / image.plane().max(1) as f64,
            "input_hist": input_hist,
        }));
        self.record_stats(
            &snap,
            RequestStats {
                input_hist,
                count: result.count,
            },
        );
        {
            let mut c = self.counters.lock().expect("counters");
            c.predict += 1;
            c.latency_ms_sum += latency_ms;
        }
        Ok(PredictResponse {
            count: result.count,
            mask: RleMask::encode(&result.mask),
            centroids: result.centroids,
            model_version: snap.version,
            latency_ms,
        })
    }

    pub fn explain(&self, image: &Image, layer: Option<&str>, alpha: Option<f32>) -> Result<Vec<u8>> {
        let snap = self.current()?.ok_or(Error::NoModel)?;
        let heat = grad_cam(
            &snap.net.net,
            image,
            layer.unwrap_or(DEFAULT_CAM_LAYER),
            &CamTarget::default(),
        )?;
        let out = overlay(image, &heat, alpha.unwrap_or(self.cfg.explain_alpha))?;
        self.counters.lock().expect("counters").explain += 1;
        self.log_request(serde_json::json!({
            "timestamp": Utc::now(),
            "endpoint": "explain",
            "model_version": snap.version,
            "layer": heat.target_layer,
            "zero_map": heat.zero_map,
        }));
        out.to_png_bytes()
    }

    pub fn health(&self) -> Health {
        let version = self.current().ok().flatten().map(|s| s.version);
        Health {
            status: if version.is_some() { "ok" } else { "degraded" }.into(),
            model_version: version,
            uptime_s: self.started.elapsed().as_secs_f64(),
        }
    }

    /// Scores every complete window of logged requests; a trigger raises the store's drift
    /// flag.
    pub fn monitor_tick(&self) -> Result<Vec<DriftReport>> {
        let reports = {
            let mut guard = self.monitor.lock().expect("monitor lock");
            match guard.as_mut() {
                Some((_, m)) => m.drain(),
                None => Vec::new(),
            }
        };
        for r in &reports {
            if let Ok(mut f) = self.drift_log.lock() {
                let _ = writeln!(f, "{}", serde_json::json!({"timestamp": Utc::now(), "report": r}));
            }
            match r.status {
                DriftStatus::Ok => {}
                DriftStatus::Warn => log::warn!("{}", serde_json::json!({"event": "drift_warn", "report": r})),
                DriftStatus::Trigger => {
                    log::warn!("{}", serde_json::json!({"event": "drift_trigger", "report": r}));
                    self.store.set_drift_flag(&DriftFlag {
                        set: true,
                        updated_at: Utc::now(),
                        window_id: Some(r.window_id),
                        detail: format!("input_psi {:.4}, count_psi {:.4}", r.input_psi, r.count_psi),
                    })?;
                }
            }
            *self.last_drift.lock().expect("drift lock") = Some(r.clone());
        }
        Ok(reports)
    }

    /// Requests logged for the current model that no scored window has consumed yet.
    pub fn pending_requests(&self) -> usize {
        self.monitor
            .lock()
            .expect("monitor lock")
            .as_ref()
            .map_or(0, |(_, m)| m.pending())
    }

    pub fn metrics_text(&self) -> String {
        let pending = self.pending_requests();
        let c = self.counters.lock().expect("counters");
        let version = self.snapshot.read().expect("snapshot lock").as_ref().map(|s| s.version);
        let drift = self.last_drift.lock().expect("drift lock").clone();
        let mut out = String::new();
        out.push_str(&format!("uptime_s {:.3}\n", self.started.elapsed().as_secs_f64()));
        out.push_str(&format!("predict_requests {}\n", c.predict));
        out.push_str(&format!("explain_requests {}\n", c.explain));
        out.push_str(&format!("errors {}\n", c.errors));
        out.push_str(&format!("predict_latency_ms_sum {:.3}\n", c.latency_ms_sum));
        out.push_str(&format!("drift_pending_requests {pending}\n"));
        out.push_str(&format!("model_version {}\n", version.map(|v| v.to_string()).unwrap_or_else(|| "none".into())));
        if let Some(d) = drift {
            out.push_str(&format!("drift_window {}\n", d.window_id));
            out.push_str(&format!("drift_input_psi {:.6}\n", d.input_psi));
            out.push_str(&format!("drift_count_psi {:.6}\n", d.count_psi));
            out.push_str(&format!(
                "drift_status {}\n",
                serde_json::to_value(d.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
            ));
        }
        out
    }
}

fn error_response(state: &AppState, e: Error) -> Response {
    state.counters.lock().expect("counters").errors += 1;
    let status = match &e {
        Error::NoModel => StatusCode::SERVICE_UNAVAILABLE,
        Error::Decode(_) | Error::Shape(_) | Error::UnknownLayer { .. } | Error::Config(_) => StatusCode::BAD_REQUEST,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    };
    (status, Json(serde_json::json!({"error": e.to_string()}))).into_response()
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T> + Send + 'static) -> Result<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| Error::Store(format!("worker failed: {e}")))?
}

async fn predict_handler(State(st): State<Arc<AppState>>, Json(req): Json<PredictRequest>) -> Response {
    let s = st.clone();
    match blocking(move || s.predict(&decode_png_b64(&req.image)?)).await {
        Ok(r) => Json(r).into_response(),
        Err(e) => error_response(&st, e),
    }
}

async fn explain_handler(State(st): State<Arc<AppState>>, Json(req): Json<ExplainRequest>) -> Response {
    let s = st.clone();
    let res = blocking(move || {
        let img = decode_png_b64(&req.image)?;
        s.explain(&img, req.layer.as_deref(), req.alpha)
    })
    .await;
    match res {
        Ok(png) => ([(header::CONTENT_TYPE, "image/png")], png).into_response(),
        Err(e) => error_response(&st, e),
    }
}

async fn health_handler(State(st): State<Arc<AppState>>) -> Response {
    let s = st.clone();
    match blocking(move || Ok(s.health())).await {
        Ok(h) => Json(h).into_response(),
        Err(e) => error_response(&st, e),
    }
}

async fn metrics_handler(State(st): State<Arc<AppState>>) -> Response {
    ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], st.metrics_text()).into_response()
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/predict", post(predict_handler))
        .route("/explain", post(explain_handler))
        .route("/health", get(health_handler))
        .route("/metrics", get(metrics_handler))
        .layer(DefaultBodyLimit::max(256 << 20))
        .with_state(state)
}

/// Runs the monitor on its own cadence until the state is dropped by everyone else.
pub fn spawn_monitor(state: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    let every = Duration::from_millis(state.cfg.monitor_interval_ms.max(10));
    let weak = Arc::downgrade(&state);
    drop(state);
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(every);
        loop {
            tick.tick().await;
            let Some(st) = weak.upgrade() else { break };
            let res = tokio::task::spawn_blocking(move || st.monitor_tick()).await;
            if let Ok(Err(e)) = res {
                log::warn!("monitor tick failed: {e}");
            }
        }
    })
}

/// Binds `addr` and serves until `shutdown` resolves. Returns the bound address.
pub async fn serve(
    state: Arc<AppState>,
    addr: SocketAddr,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(SocketAddr, tokio::task::JoinHandle<()>)> {
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| Error::Store(format!("cannot bind {addr}: {e}")))?;
    let local = listener
        .local_addr()
        .map_err(|e| Error::Store(format!("cannot read bound address: {e}")))?;
    let app = router(state);
    let handle = tokio::spawn(async move {
        if let Err(e) = axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
            log::error!("server error: {e}");
        }
    });
    Ok((local, handle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_examples() {
        let m = Mask {
            height: 2,
            width: 3,
            data: vec![1, 1, 0, 0, 0, 1],
        };
        let r = RleMask::encode(&m);
        assert_eq!(r.runs, vec![0, 2, 3, 1]);
        assert_eq!(r.decode().unwrap(), m);
        let empty = Mask::zeros(2, 2);
        assert_eq!(RleMask::encode(&empty).runs, vec![4]);
        let bad = RleMask {
            height: 2,
            width: 2,
            runs: vec![3],
        };
        assert!(bad.decode().is_err());
    }

    proptest! {
        #[test]
        fn rle_round_trip(h in 1usize..10, w in 1usize..10, seed in any::<u64>()) {
            let data: Vec<u8> = (0..h * w).map(|i| ((seed >> (i % 64)) & 1) as u8).collect();
            let m = Mask { height: h, width: w, data };
            prop_assert_eq!(RleMask::encode(&m).decode().unwrap(), m);
        }
    }
}
