use std::sync::Arc;

use cellcount::dataset::Sample;
use cellcount::network::NetworkConfig;
use cellcount::runstore::RunStore;
use cellcount::service::{encode_png_b64, predict_counts, AppState, Health, PredictResponse, ServiceConfig};
use cellcount::synth::{generate, SynthConfig};
use cellcount::trainer::{train, LrSetting, TrainConfig, TrainOptions};
use serde_json::json;

fn tiny_samples() -> Vec<Sample> {
    let cfg = SynthConfig {
        image_size: [64, 64],
        mean_count: 3.0,
        radius_range: [4.0, 7.0],
        seed: 12,
        ..Default::default()
    };
    generate(&cfg, 8).unwrap().into_iter().map(|s| s.sample).collect()
}

fn trained_store(dir: &std::path::Path, samples: &[Sample]) -> RunStore {
    let mut cfg = TrainConfig {
        network: NetworkConfig {
            base_width: 4,
            depth: 2,
            residual_blocks_per_scale: 1,
            ..Default::default()
        },
        max_epochs: 1,
        batch_size: 4,
        lr: LrSetting::Fixed(3e-3),
        ..Default::default()
    };
    cfg.augment.crop_size = [32, 32];
    let mut store = RunStore::open(dir).unwrap();
    store.promotion_threshold = 0.0;
    train(samples, &cfg, &store, TrainOptions::default()).unwrap();
    store
}

async fn start(state: Arc<AppState>) -> (String, tokio::sync::oneshot::Sender<()>) {
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let (addr, _) = cellcount::service::serve(state, "127.0.0.1:0".parse().unwrap(), async {
        let _ = rx.await;
    })
    .await
    .unwrap();
    (format!("http://{addr}"), tx)
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn endpoints_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let samples = tiny_samples();
    let store = trained_store(dir.path(), &samples);
    let state = AppState::new(store.clone(), ServiceConfig::default()).unwrap();
    let (base, stop) = start(state.clone()).await;
    let client = reqwest::Client::new();
    let img = encode_png_b64(&samples[0].image).unwrap();

    let h: Health = client.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!(h.status, "degraded");
    let r = client.post(format!("{base}/predict")).json(&json!({"image": img})).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 503);

    let run_id = store.list().unwrap()[0].run_id.clone();
    store.promote(&run_id, "test").unwrap();

    let r = client.post(format!("{base}/predict")).json(&json!({"image": img})).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 200);
    let p: PredictResponse = r.json().await.unwrap();
    assert_eq!(p.model_version, 1);
    let (_, net) = store.load_active().unwrap().unwrap();
    let offline = predict_counts(&net, &samples[0].image, &Default::default(), 512).unwrap();
    assert_eq!(p.count, offline.count);
    assert_eq!(p.mask.decode().unwrap(), offline.mask);
    assert_eq!(p.centroids.len(), p.count);

    let r = client.post(format!("{base}/predict")).json(&json!({"image": "%%%"})).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let r = client.post(format!("{base}/predict")).json(&json!({"image": "aGVsbG8="})).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 400);

    let r = client
        .post(format!("{base}/explain"))
        .json(&json!({"image": img, "layer": "nope"}))
        .send()
        .await
        .unwrap();
    assert_eq!(r.status().as_u16(), 400);
    let body: serde_json::Value = r.json().await.unwrap();
    assert!(body["error"].as_str().unwrap().contains("decoder.out"));
    let r = client.post(format!("{base}/explain")).json(&json!({"image": img})).send().await.unwrap();
    assert_eq!(r.status().as_u16(), 200);
    assert_eq!(r.headers()["content-type"], "image/png");
    let png = r.bytes().await.unwrap();
    let decoded = image::load_from_memory(&png).unwrap();
    assert_eq!((decoded.width(), decoded.height()), (64, 64));

    let h: Health = client.get(format!("{base}/health")).send().await.unwrap().json().await.unwrap();
    assert_eq!((h.status.as_str(), h.model_version), ("ok", Some(1)));
    let m = client.get(format!("{base}/metrics")).send().await.unwrap().text().await.unwrap();
    assert!(m.contains("predict_requests 1\n"), "{m}");
    assert!(m.contains("explain_requests 1\n"), "{m}");
    assert!(m.contains("model_version 1\n"), "{m}");

    let log = std::fs::read_to_string(dir.path().join("monitor/requests.jsonl")).unwrap();
    let first: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["endpoint"], "predict");
    assert!(first["latency_ms"].as_f64().unwrap() >= 0.0);
    let _ = stop.send(());
}

#[test]
fn monitor_raises_the_drift_flag() {
    let dir = tempfile::tempdir().unwrap();
    let samples = tiny_samples();
    let store = trained_store(dir.path(), &samples);
    let run_id = store.list().unwrap()[0].run_id.clone();
    store.promote(&run_id, "test").unwrap();
    let mut cfg = ServiceConfig::default();
    cfg.drift.window_size = 10;
    let state = AppState::new(store.clone(), cfg).unwrap();
    for _ in 0..2 {
        for s in samples.iter().cycle().take(10) {
            state.predict(&s.image.scaled(1.5)).unwrap();
        }
        state.monitor_tick().unwrap();
    }
    let flag = store.drift_flag().unwrap().expect("drift flag set");
    assert!(flag.set);
    let drift_log = std::fs::read_to_string(dir.path().join("monitor/drift.jsonl")).unwrap();
    assert_eq!(drift_log.lines().count(), 2);
}
