//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits nonzero if any fails.
//!
//! Runs with a custom harness so the lines are always visible:
//! `cargo test --release --test acceptance`.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use cellcount::dataset::{load_dataset, save_sample, Mask, Sample, SplitSpec};
use cellcount::energy::{compare, EmissionsReport, EnergyAccumulator, PowerProbe, ProbeKind, StubProbe};
use cellcount::explain::{grad_cam, grad_cam_default, CamTarget, Selector};
use cellcount::losses::{dice_loss, focal_loss, LossConfig, LossKind};
use cellcount::metrics::{match_detection, match_segmentation, EvalReport, SegmentationModel, TiledModel};
use cellcount::network::{NetworkConfig, SegmentationNetwork};
use cellcount::postproc::{connected_components, count_cells, Connectivity, CountResult, PostprocConfig};
use cellcount::runstore::{RetrainPolicy, RunFilter, RunRecord, RunStatus, RunStore};
use cellcount::service::{encode_png_b64, AppState, PredictRequest, PredictResponse, ServiceConfig};
use cellcount::synth::{generate, SynthConfig};
use cellcount::trainer::{self, fit, EpochModel, FitConfig, LrSetting, StopReason, TrainConfig, TrainOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn run_criterion(n: usize, title: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into());
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (ok, detail) = match res {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    println!(
        "criterion {n:>2} {:<4} {title} ({secs:.1}s): {detail}",
        if ok { "PASS" } else { "FAIL" }
    );
    ok
}

// ---------------------------------------------------------------------------------------
// 1. Losses

fn fd_relative_error(cfg: &LossConfig, p: &[f64], g: &[f64]) -> f64 {
    let (_, grad) = cfg.value_and_grad(p, g).unwrap();
    let h = 1e-4;
    let mut worst = 0.0f64;
    for i in 0..p.len() {
        let at = |d: f64| {
            let mut q = p.to_vec();
            q[i] += d;
            cfg.value(&q, g).unwrap()
        };
        let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

fn criterion_losses() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 2];
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=8), rng.random_range(1..=8));
        let p: Vec<f64> = (0..h * w).map(|_| rng.random_range(0.02..0.98)).collect();
        let g: Vec<f64> = (0..h * w).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        worst[0] = worst[0].max(fd_relative_error(&LossConfig::with_kind(LossKind::Dice), &p, &g));
        worst[1] = worst[1].max(fd_relative_error(&LossConfig::with_kind(LossKind::Focal), &p, &g));
    }
    ensure!(worst[0] < 1e-4 && worst[1] < 1e-4, "gradient relative error dice {:.2e}, focal {:.2e}", worst[0], worst[1]);

    // Focal with gamma 0, alpha 1 against a directly computed mean cross-entropy.
    let mut bce_gap = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
        let g: Vec<f64> = (0..n).map(|_| f64::from(rng.random_bool(0.5) as u8)).collect();
        let bce = -p
            .iter()
            .zip(&g)
            .map(|(&p, &g)| g * p.ln() + (1.0 - g) * (1.0 - p).ln())
            .sum::<f64>()
            / n as f64;
        bce_gap = bce_gap.max((focal_loss(&p, &g, 1.0, 0.0).unwrap() - bce).abs());
    }
    ensure!(bce_gap < 1e-10, "focal(0, 1) differs from cross-entropy by {bce_gap:e}");

    let truth = [1.0, 0.0, 1.0, 1.0, 0.0, 0.0];
    let disjoint = [0.0, 1.0, 0.0, 0.0, 1.0, 1.0];
    for eps in [1e-2, 1e-4, 1e-6, 1e-8, 1e-12] {
        let perfect = dice_loss(&truth, &truth, eps).unwrap();
        let dis = dice_loss(&disjoint, &truth, eps).unwrap();
        ensure!(perfect.abs() < 1e-12, "perfect prediction dice {perfect} at eps {eps}");
        // 1 - eps / (6 + eps) exactly.
        ensure!((dis - (1.0 - eps / (6.0 + eps))).abs() < 1e-12, "disjoint dice {dis} at eps {eps}");
    }
    ensure!((dice_loss(&disjoint, &truth, 1e-12).unwrap() - 1.0).abs() < 1e-12, "disjoint limit is not 1");
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 10.0, "took {secs:.1}s");
    Ok(format!(
        "worst FD rel err dice {:.1e} focal {:.1e}; |focal-BCE| {:.1e}; dice limits ok",
        worst[0], worst[1], bce_gap
    ))
}

// ---------------------------------------------------------------------------------------
// 2 and 3. Matching

/// Maximum number of disjoint admissible pairs, by exhaustive search.
fn brute_force_tp(admissible: &[Vec<bool>]) -> usize {
    fn go(i: usize, used: u32, adm: &[Vec<bool>]) -> usize {
        if i == adm.len() {
            return 0;
        }
        let mut best = go(i + 1, used, adm);
        for (j, &ok) in adm[i].iter().enumerate() {
            if ok && used & (1 << j) == 0 {
                best = best.max(1 + go(i + 1, used | (1 << j), adm));
            }
        }
        best
    }
    go(0, 0, admissible)
}

type Rect = (usize, usize, usize, usize);

/// Rectangles `(top, left, h, w)` that do not touch each other, even diagonally.
fn place_rects(rng: &mut ChaCha8Rng, n: usize, size: usize, seeds: &[Rect]) -> Vec<Rect> {
    let touches = |a: &Rect, b: &Rect| {
        a.0 <= b.0 + b.2 && b.0 <= a.0 + a.2 && a.1 <= b.1 + b.3 && b.1 <= a.1 + a.3
    };
    let mut out: Vec<Rect> = Vec::new();
    let mut candidates: Vec<Rect> = seeds.to_vec();
    for _ in 0..200 {
        if out.len() == n {
            break;
        }
        let r = candidates.pop().unwrap_or_else(|| {
            let (h, w) = (rng.random_range(3..=10), rng.random_range(3..=10));
            (rng.random_range(0..size - h), rng.random_range(0..size - w), h, w)
        });
        if r.0 + r.2 <= size && r.1 + r.3 <= size && !out.iter().any(|o| touches(o, &r)) {
            out.push(r);
        }
    }
    out
}

fn rect_mask(rects: &[Rect], size: usize) -> Mask {
    let mut m = Mask::zeros(size, size);
    for &(t, l, h, w) in rects {
        for r in t..t + h {
            for c in l..l + w {
                m.set(r, c, 1);
            }
        }
    }
    m
}

fn criterion_matching() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let size = 40;
    let mut seg_nontrivial = 0;
    for inst in 0..200 {
        // Some instances get two truths one row apart and a prediction spanning both, which
        // is admissible for each of them (IoU 3/7) and so forces a choice.
        let spanning: Option<Rect> = rng.random_bool(0.4).then(|| {
            let w = rng.random_range(3..=8);
            (rng.random_range(0..size - 7), rng.random_range(0..size - w), 7, w)
        });
        let pair_seeds: Vec<Rect> = spanning.iter().flat_map(|&(t, l, _, w)| [(t, l, 3, w), (t + 4, l, 3, w)]).collect();
        let n_truth = rng.random_range(pair_seeds.len()..=6);
        let truths = place_rects(&mut rng, n_truth, size, &pair_seeds);
        let mut jittered: Vec<Rect> = Vec::new();
        for &(t, l, h, w) in &truths {
            if !rng.random_bool(0.8) {
                continue;
            }
            let dt = rng.random_range(-3i64..=3);
            let dl = rng.random_range(-3i64..=3);
            let nh = (h as i64 + rng.random_range(-2i64..=2)).max(2) as usize;
            let nw = (w as i64 + rng.random_range(-2i64..=2)).max(2) as usize;
            jittered.push(((t as i64 + dt).max(0) as usize, (l as i64 + dl).max(0) as usize, nh, nw));
        }
        jittered.reverse();
        jittered.extend(spanning);
        let n_pred = rng.random_range(0..=6);
        let preds = place_rects(&mut rng, n_pred, size, &jittered);
        let truth_objs = connected_components(&rect_mask(&truths, size), Connectivity::Eight);
        let pred_objs = connected_components(&rect_mask(&preds, size), Connectivity::Eight);
        // Independent IoU from the label maps.
        let (np, nt) = (pred_objs.count, truth_objs.count);
        let mut inter = vec![vec![0usize; nt]; np];
        let mut area_p = vec![0usize; np];
        let mut area_t = vec![0usize; nt];
        for (&a, &b) in pred_objs.label_map.iter().zip(&truth_objs.label_map) {
            if a > 0 {
                area_p[a as usize - 1] += 1;
            }
            if b > 0 {
                area_t[b as usize - 1] += 1;
            }
            if a > 0 && b > 0 {
                inter[a as usize - 1][b as usize - 1] += 1;
            }
        }
        let adm: Vec<Vec<bool>> = (0..np)
            .map(|i| {
                (0..nt)
                    .map(|j| {
                        let u = area_p[i] + area_t[j] - inter[i][j];
                        inter[i][j] as f64 / u as f64 > 0.4
                    })
                    .collect()
            })
            .collect();
        let expect = brute_force_tp(&adm);
        let got = match_segmentation(&pred_objs, &truth_objs, 0.4).map_err(|e| e.to_string())?;
        ensure!(got.tp == expect, "segmentation instance {inst}: tp {} vs brute force {expect}", got.tp);
        ensure!(got.fp == np - expect && got.fn_ == nt - expect, "segmentation instance {inst}: fp/fn inconsistent");
        if adm.iter().flatten().filter(|&&a| a).count() > expect {
            seg_nontrivial += 1;
        }
    }

    ensure!(seg_nontrivial >= 10, "only {seg_nontrivial} segmentation instances had competing pairs");

    let mut det_nontrivial = 0;
    for inst in 0..200 {
        let pts = |rng: &mut ChaCha8Rng| -> Vec<(f64, f64)> {
            let n = rng.random_range(0..=6);
            (0..n).map(|_| (rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect()
        };
        let (pred, truth) = (pts(&mut rng), pts(&mut rng));
        let adm: Vec<Vec<bool>> = pred
            .iter()
            .map(|p| truth.iter().map(|t| ((p.0 - t.0).powi(2) + (p.1 - t.1).powi(2)).sqrt() < 40.0).collect())
            .collect();
        let expect = brute_force_tp(&adm);
        let got = match_detection(&pred, &truth, 40.0);
        ensure!(got.tp == expect, "detection instance {inst}: tp {} vs brute force {expect}", got.tp);
        if adm.iter().flatten().filter(|&&a| a).count() > expect {
            det_nontrivial += 1;
        }
    }

    ensure!(det_nontrivial >= 10, "only {det_nontrivial} detection instances had competing pairs");

    // Crossed pair: nearest-first greedy takes p0-t0 (distance 5) and strands p1.
    let truth = [(0.0, 0.0), (0.0, 39.5)];
    let pred = [(0.0, 5.0), (0.0, -30.0)];
    let crossed = match_detection(&pred, &truth, 40.0);
    ensure!(crossed.tp == 2, "crossed pair matched {} of 2", crossed.tp);
    let mut pairs = crossed.pairs.clone();
    pairs.sort();
    ensure!(pairs == vec![(0, 1), (1, 0)], "crossed pair assignment {:?}", crossed.pairs);

    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 30.0, "took {secs:.1}s");
    Ok(format!(
        "400 instances agree with brute force ({seg_nontrivial} seg / {det_nontrivial} det with competing pairs); crossed pair tp 2"
    ))
}

fn criterion_thresholds() -> Check {
    // 1x5 truth and 1x2 prediction inside it: IoU = 2/5 exactly.
    let mut t = Mask::zeros(3, 8);
    let mut p = Mask::zeros(3, 8);
    for c in 1..6 {
        t.set(1, c, 1);
    }
    for c in 1..3 {
        p.set(1, c, 1);
    }
    let tl = connected_components(&t, Connectivity::Eight);
    let pl = connected_components(&p, Connectivity::Eight);
    let at = match_segmentation(&pl, &tl, 0.4).map_err(|e| e.to_string())?;
    ensure!(at.tp == 0, "IoU exactly 0.4 matched");
    p.set(1, 3, 1);
    let pl = connected_components(&p, Connectivity::Eight);
    let above = match_segmentation(&pl, &tl, 0.4).map_err(|e| e.to_string())?;
    ensure!(above.tp == 1, "IoU 0.6 did not match");

    let d40 = match_detection(&[(24.0, 32.0)], &[(0.0, 0.0)], 40.0);
    ensure!(d40.tp == 0, "distance exactly 40 matched");
    let d40b = match_detection(&[(40.0, 0.0)], &[(0.0, 0.0)], 40.0);
    ensure!(d40b.tp == 0, "axis distance exactly 40 matched");
    let below = match_detection(&[(39.999, 0.0)], &[(0.0, 0.0)], 40.0);
    ensure!(below.tp == 1, "distance 39.999 did not match");
    Ok("IoU 0.4 and d = 40.0 give no match; just inside both match".into())
}

// ---------------------------------------------------------------------------------------
// 4. Counting

fn criterion_counting() -> Check {
    let cfg = SynthConfig {
        non_overlapping: true,
        seed: 4242,
        ..Default::default()
    };
    let samples = generate(&cfg, 50).map_err(|e| e.to_string())?;
    let post = PostprocConfig::default();
    let mut total = 0;
    for s in &samples {
        let logits: Vec<f32> = s.sample.mask.data.iter().map(|&m| if m > 0 { 20.0 } else { -20.0 }).collect();
        let r = count_cells(&logits, s.sample.height(), s.sample.width(), &post);
        ensure!(
            r.count == s.true_count,
            "{}: counted {} of {}",
            s.sample.image_id,
            r.count,
            s.true_count
        );
        total += s.true_count;
    }

    // Diagonal chain: 4-connectivity sees 7 objects, 8-connectivity 3.
    let rows = ["10001", "01010", "00100", "00000", "11001"];
    let mut m = Mask::zeros(5, 5);
    for (r, row) in rows.iter().enumerate() {
        for (c, ch) in row.chars().enumerate() {
            m.set(r, c, u8::from(ch == '1'));
        }
    }
    let four = connected_components(&m, Connectivity::Four).count;
    let eight = connected_components(&m, Connectivity::Eight).count;
    ensure!((four, eight) == (7, 3), "connectivity fixture gave {four}/{eight}, expected 7/3");
    Ok(format!("50 images, {total} cells counted exactly; fixture 4-conn 7, 8-conn 3"))
}

// ---------------------------------------------------------------------------------------
// 5. Training protocol

struct Scripted {
    losses: Box<dyn Fn(usize) -> f64>,
    epoch: usize,
    weights: usize,
    best: usize,
}

impl EpochModel for Scripted {
    fn train_epoch(&mut self, epoch: usize, _lr: f64) -> cellcount::Result<f64> {
        self.epoch = epoch;
        self.weights = epoch;
        Ok(1.0)
    }
    fn validate(&mut self) -> cellcount::Result<f64> {
        Ok((self.losses)(self.epoch))
    }
    fn snapshot_best(&mut self) {
        self.best = self.weights;
    }
    fn restore_best(&mut self) {
        self.weights = self.best;
    }
}

fn scripted(f: impl Fn(usize) -> f64 + 'static) -> Scripted {
    Scripted {
        losses: Box::new(f),
        epoch: 0,
        weights: 0,
        best: 0,
    }
}

fn criterion_training_protocol() -> Check {
    let cfg = FitConfig::from(&TrainConfig::default());
    ensure!(
        (cfg.max_epochs, cfg.warmup, cfg.patience) == (400, 100, 50),
        "default protocol is {}/{}/{}",
        cfg.max_epochs,
        cfg.warmup,
        cfg.patience
    );
    let mut plateau = scripted(|_| 0.5);
    let a = fit(&mut plateau, &cfg, 1e-3, |_| {});
    ensure!(
        a.reason == StopReason::EarlyStop && a.stopped_epoch == 150,
        "plateau stopped at {} ({:?})",
        a.stopped_epoch,
        a.reason
    );
    let mut falling = scripted(|e| 1.0 / e as f64);
    let b = fit(&mut falling, &cfg, 1e-3, |_| {});
    ensure!(
        b.reason == StopReason::MaxEpochs && b.stopped_epoch == 400 && b.series.len() == 400,
        "decreasing loss stopped at {} ({:?})",
        b.stopped_epoch,
        b.reason
    );
    let mut vee = scripted(|e| (e as f64 - 120.0).abs() + 1.0);
    let c = fit(&mut vee, &cfg, 1e-3, |_| {});
    ensure!(
        c.best_epoch == Some(120) && vee.weights == 120 && c.stopped_epoch == 170,
        "best {:?}, restored {}, stopped {}",
        c.best_epoch,
        vee.weights,
        c.stopped_epoch
    );
    Ok("plateau stops at 150; decreasing runs to 400; best epoch 120 restored (stop 170)".into())
}

// ---------------------------------------------------------------------------------------
// 7. Emissions

fn criterion_emissions() -> Check {
    let mut probe = StubProbe {
        cpu_w: 100.0,
        gpu_w: 0.0,
    };
    let mut acc = EnergyAccumulator::default();
    for t in 0..=36 {
        acc.push(f64::from(t), probe.read().map_err(|e| e.to_string())?);
    }
    let r = acc.report(0.27, 1.0, probe.kind());
    ensure!((r.cpu_kwh - 0.001).abs() / 0.001 < 1e-3, "cpu_kwh {}", r.cpu_kwh);
    ensure!(r.probe_kind == ProbeKind::Stub, "probe kind {:?}", r.probe_kind);

    let dice = EmissionsReport::new(0.23, 0.49, 0.268, 0.0, 1.0, ProbeKind::Stub);
    let focal = EmissionsReport::new(0.11, 0.24, 0.274, 0.0, 1.0, ProbeKind::Stub);
    let rel = |x: f64, y: f64| (x - y).abs() / y;
    ensure!(rel(dice.co2_kg, 0.193) < 0.01, "dice CO2 {:.4}", dice.co2_kg);
    ensure!(rel(focal.co2_kg, 0.096) < 0.01, "focal CO2 {:.4}", focal.co2_kg);
    let rows = compare(&[("dice".into(), dice.clone()), ("focal".into(), focal.clone())]);
    let ratio = rows[0].co2_ratio.ok_or("no ratio")?;
    ensure!((ratio - 2.01).abs() <= 0.01, "ratio {ratio:.4}");
    Ok(format!(
        "100 W x 36 s = {:.6} kWh; CO2 {:.4} / {:.4} kg; ratio {ratio:.3}",
        r.cpu_kwh, dice.co2_kg, focal.co2_kg
    ))
}

// ---------------------------------------------------------------------------------------
// Smoke ablation shared by criteria 6, 8, 9, 10

struct Smoke {
    _dir: tempfile::TempDir,
    store: RunStore,
    samples: Vec<Sample>,
    records: Vec<RunRecord>,
    elapsed: Duration,
}

pub fn smoke_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        network: NetworkConfig {
            base_width: 4,
            depth: 2,
            residual_blocks_per_scale: 1,
            ..Default::default()
        },
        max_epochs: 10,
        lr: LrSetting::Fixed(3e-3),
        ..Default::default()
    };
    cfg.augment.crop_size = [128, 128];
    cfg
}

fn build_smoke() -> Result<Smoke, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let data_dir = dir.path().join("data");
    let synth = SynthConfig {
        image_size: [256, 256],
        non_overlapping: true,
        seed: 7,
        ..Default::default()
    };
    for s in generate(&synth, 200).map_err(|e| e.to_string())? {
        save_sample(&data_dir, &s.sample).map_err(|e| e.to_string())?;
    }
    // Train from the files on disk so serving sees the same pixels.
    let samples = load_dataset(&data_dir).map_err(|e| e.to_string())?;
    let store = RunStore::open(dir.path().join("store")).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let result = trainer::ablation(
        &samples,
        &[1, 2, 3],
        &[LossKind::Dice, LossKind::Focal],
        &smoke_config(),
        &store,
        |_| TrainOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    println!("{}", trainer::summary_table(&result.summary));
    Ok(Smoke {
        _dir: dir,
        store,
        samples,
        records: result.records,
        elapsed,
    })
}

fn criterion_smoke(smoke: &Smoke) -> Check {
    let mins = smoke.elapsed.as_secs_f64() / 60.0;
    ensure!(mins <= 30.0, "ablation took {mins:.1} min");
    ensure!(smoke.records.len() == 6, "{} records", smoke.records.len());
    let mut lines = Vec::new();
    for r in &smoke.records {
        let stored = smoke.store.get(&r.run_id).map_err(|e| e.to_string())?;
        ensure!(stored.status == RunStatus::Completed, "{} is {:?}", r.run_id, stored.status);
        let m = stored.final_metrics.as_ref().ok_or("missing metrics")?;
        let mape = m.mape.ok_or("MAPE undefined")?;
        ensure!(m.det_f1 >= 0.8, "{}: det F1 {:.3}", r.run_id, m.det_f1);
        ensure!(mape <= 15.0, "{}: MAPE {mape:.1}%", r.run_id);
        ensure!(
            !stored.epoch_series.is_empty() && Some(stored.epoch_series.len()) == stored.stopped_epoch,
            "{}: epoch series incomplete",
            r.run_id
        );
        ensure!(
            stored.epoch_series.iter().enumerate().all(|(i, e)| e.epoch == i + 1),
            "{}: epoch numbering has gaps",
            r.run_id
        );
        let em = stored.emissions.as_ref().ok_or("missing emissions")?;
        ensure!(em.duration_s > 0.0 && em.cpu_kwh > 0.0, "{}: empty emissions report", r.run_id);
        smoke.store.verify_artifacts(&stored).map_err(|e| e.to_string())?;
        let a = stored.artifacts.as_ref().ok_or("missing artifacts")?;
        let report: EvalReport =
            cellcount::fsutil::read_json(&smoke.store.resolve(&a.report_path)).map_err(|e| e.to_string())?;
        ensure!(report.per_image.len() == 50, "{}: report covers {} images", r.run_id, report.per_image.len());
        lines.push(format!("{} s{} F1 {:.3} MAPE {:.1}%", stored.loss(), stored.seed, m.det_f1, mape));
    }
    for loss in [LossKind::Dice, LossKind::Focal] {
        let q = smoke
            .store
            .query(&RunFilter {
                loss: Some(loss),
                status: Some(RunStatus::Completed),
                ..Default::default()
            })
            .map_err(|e| e.to_string())?;
        ensure!(q.len() == 3, "query for {loss} returned {}", q.len());
    }
    Ok(format!("6 runs in {mins:.1} min; {}", lines.join("; ")))
}

fn val_samples<'a>(smoke: &'a Smoke, record: &RunRecord) -> Result<Vec<&'a Sample>, String> {
    let split = SplitSpec::load(
        &smoke
            .store
            .resolve(&format!("{}/split.json", smoke.store.artifact_dir(&record.run_id))),
    )
    .map_err(|e| e.to_string())?;
    let val: BTreeSet<&String> = split.val_ids.iter().collect();
    Ok(smoke.samples.iter().filter(|s| val.contains(&s.image_id)).collect())
}

fn load_net(store: &RunStore, r: &RunRecord) -> Result<SegmentationNetwork, String> {
    let a = r.artifacts.as_ref().ok_or("no artifacts")?;
    SegmentationNetwork::load(&store.resolve(&a.weights_path)).map_err(|e| e.to_string())
}

fn best_run(smoke: &Smoke) -> Result<&RunRecord, String> {
    smoke
        .records
        .iter()
        .filter(|r| r.status == RunStatus::Completed)
        .max_by(|a, b| a.det_f1().partial_cmp(&b.det_f1()).unwrap())
        .ok_or_else(|| "no completed run".into())
}

// ---------------------------------------------------------------------------------------
// 8. Grad-CAM

fn criterion_gradcam(smoke: &Smoke) -> Check {
    let run = best_run(smoke)?;
    let net = load_net(&smoke.store, run)?;
    let val = val_samples(smoke, run)?;
    ensure!(val.len() >= 20, "only {} validation images", val.len());
    let mut passing = 0;
    let mut ratios = Vec::new();
    for (k, s) in val.iter().take(20).enumerate() {
        let heat = grad_cam_default(&net.net, &s.image).map_err(|e| e.to_string())?;
        ensure!((heat.height, heat.width) == (s.height(), s.width()), "heatmap dims differ from input");
        ensure!(heat.values.iter().all(|v| (0.0..=1.0).contains(v)), "values outside [0, 1]");
        if k < 3 {
            let scaled = grad_cam(
                &net.net,
                &s.image,
                &heat.target_layer,
                &CamTarget {
                    selector: Selector::MeanForeground,
                    scale: 7.25,
                },
            )
            .map_err(|e| e.to_string())?;
            ensure!(scaled.values == heat.values, "map changed under target scaling");
        }
        let (mut inside, mut n_in, mut outside, mut n_out) = (0.0f64, 0usize, 0.0f64, 0usize);
        for (v, &m) in heat.values.iter().zip(&s.mask.data) {
            if m > 0 {
                inside += f64::from(*v);
                n_in += 1;
            } else {
                outside += f64::from(*v);
                n_out += 1;
            }
        }
        let (mi, mo) = (inside / n_in.max(1) as f64, outside / n_out.max(1) as f64);
        let ratio = if mo > 0.0 { mi / mo } else if mi > 0.0 { f64::INFINITY } else { 0.0 };
        if n_in > 0 && ratio >= 2.0 {
            passing += 1;
        }
        ratios.push(ratio);
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ensure!(passing >= 18, "{passing}/20 images reach a 2x inside/outside ratio (median {:.2})", ratios[10]);
    Ok(format!(
        "dims/range ok, scale-invariant; {passing}/20 images with inside/outside >= 2 (min {:.2}, median {:.2})",
        ratios[0], ratios[10]
    ))
}

// ---------------------------------------------------------------------------------------
// 9. Serving

fn offline(net: &SegmentationNetwork, s: &Sample, post: &PostprocConfig, tile: usize) -> Result<CountResult, String> {
    let logits = TiledModel { net, tile }.predict_logits(&s.image).map_err(|e| e.to_string())?;
    Ok(count_cells(&logits, s.height(), s.width(), post))
}

fn criterion_serving(smoke: &Smoke) -> Check {
    let dice = smoke
        .records
        .iter()
        .find(|r| r.loss() == LossKind::Dice && r.status == RunStatus::Completed)
        .ok_or("no dice run")?;
    let focal = smoke
        .records
        .iter()
        .find(|r| r.loss() == LossKind::Focal && r.status == RunStatus::Completed)
        .ok_or("no focal run")?;
    let nets = [load_net(&smoke.store, dice)?, load_net(&smoke.store, focal)?];
    let svc = ServiceConfig {
        monitor_interval_ms: 3_600_000,
        ..Default::default()
    };
    let (post, tile) = (svc.postproc.clone(), svc.tile);
    let val = val_samples(smoke, dice)?;
    let state = AppState::new(smoke.store.clone(), svc).map_err(|e| e.to_string())?;

    let rt = tokio::runtime::Runtime::new().map_err(|e| e.to_string())?;
    rt.block_on(async {
        let (tx, rx) = tokio::sync::oneshot::channel::<()>();
        let (addr, server) = cellcount::service::serve(state.clone(), "127.0.0.1:0".parse().unwrap(), async {
            let _ = rx.await;
        })
        .await
        .map_err(|e| e.to_string())?;
        let base = format!("http://{addr}");
        let client = reqwest::Client::new();
        let predict = {
            let (client, base) = (client.clone(), base.clone());
            move |img: String| {
            let client = client.clone();
            let url = format!("{base}/predict");
            async move {
                let resp = client
                    .post(url)
                    .json(&PredictRequest { image: img })
                    .send()
                    .await
                    .map_err(|e| e.to_string())?;
                let status = resp.status().as_u16();
                if status != 200 {
                    return Err(format!("status {status}: {}", resp.text().await.unwrap_or_default()));
                }
                resp.json::<PredictResponse>().await.map_err(|e| e.to_string())
            }
            }
        };
        let health = || {
            let client = client.clone();
            let url = format!("{base}/health");
            async move {
                client
                    .get(url)
                    .send()
                    .await
                    .map_err(|e| e.to_string())?
                    .json::<cellcount::service::Health>()
                    .await
                    .map_err(|e| e.to_string())
            }
        };

        let h0 = health().await?;
        ensure!(h0.status == "degraded" && h0.model_version.is_none(), "health before promotion: {h0:?}");
        let promote = |run: &RunRecord| smoke.store.promote(&run.run_id, "acceptance").map_err(|e| e.to_string());
        ensure!(promote(dice)?.model_version == 1, "first promotion is not version 1");

        // Equivalence with the offline path on 10 images.
        for s in val.iter().take(10) {
            let resp = predict(encode_png_b64(&s.image).map_err(|e| e.to_string())?).await?;
            let off = offline(&nets[0], s, &post, tile)?;
            let mask = resp.mask.decode().map_err(|e| e.to_string())?;
            ensure!(resp.model_version == 1, "served version {}", resp.model_version);
            ensure!(resp.count == off.count, "{}: served {} vs offline {}", s.image_id, resp.count, off.count);
            ensure!(mask == off.mask, "{}: served mask differs from offline mask", s.image_id);
            let recount = cellcount::postproc::objects_from_mask(&mask, &post).count;
            ensure!(recount == resp.count, "{}: mask re-counts to {recount}", s.image_id);
        }

        // Version flip under concurrent traffic.
        let probe_img = val[0];
        let expected = [offline(&nets[0], probe_img, &post, tile)?, offline(&nets[1], probe_img, &post, tile)?];
        let payload = encode_png_b64(&probe_img.image).map_err(|e| e.to_string())?;
        let traffic = {
            let predict = predict.clone();
            let payload = payload.clone();
            tokio::spawn(async move {
                let mut seen = Vec::new();
                let mut after = 0;
                while after < 5 && seen.len() < 400 {
                    let r = predict(payload.clone()).await?;
                    if r.model_version == 2 {
                        after += 1;
                    }
                    seen.push(r);
                }
                Ok::<_, String>(seen)
            })
        };
        tokio::time::sleep(Duration::from_millis(300)).await;
        let store = smoke.store.clone();
        let focal_id = focal.run_id.clone();
        let v2 = tokio::task::spawn_blocking(move || store.promote(&focal_id, "acceptance flip"))
            .await
            .map_err(|e| e.to_string())?
            .map_err(|e| e.to_string())?;
        ensure!(v2.model_version == 2, "second promotion is version {}", v2.model_version);
        let seen = traffic.await.map_err(|e| e.to_string())??;
        let mut last = 0;
        for r in &seen {
            ensure!(r.model_version == 1 || r.model_version == 2, "unexpected version {}", r.model_version);
            ensure!(r.model_version >= last, "version went backwards");
            last = r.model_version;
            let e = &expected[r.model_version as usize - 1];
            let mask = r.mask.decode().map_err(|e| e.to_string())?;
            ensure!(r.count == e.count && mask == e.mask, "response labelled v{} does not match that model", r.model_version);
        }
        let n_v1 = seen.iter().filter(|r| r.model_version == 1).count();
        let h2 = health().await?;
        ensure!(h2.model_version == Some(2) && h2.status == "ok", "health after flip: {h2:?}");

        // Drift: top up to a window boundary and score one in-distribution window, then
        // apply a sustained 1.5x brightness shift.
        let window = 100;
        let mut i = 0;
        while state.pending_requests() % window != 0 {
            let s = &smoke.samples[i % smoke.samples.len()];
            predict(encode_png_b64(&s.image).map_err(|e| e.to_string())?).await?;
            i += 1;
        }
        state.monitor_tick().map_err(|e| e.to_string())?;
        for i in 0..window {
            let s = &smoke.samples[(i * 7) % smoke.samples.len()];
            predict(encode_png_b64(&s.image).map_err(|e| e.to_string())?).await?;
        }
        let baseline = state.monitor_tick().map_err(|e| e.to_string())?;
        ensure!(baseline.len() == 1, "{} baseline windows scored", baseline.len());
        ensure!(
            baseline[0].status != cellcount::drift::DriftStatus::Trigger,
            "in-distribution window triggered"
        );
        let mut statuses = Vec::new();
        for w in 0..2 {
            for i in 0..window {
                let s = &smoke.samples[(w * window + i * 3) % smoke.samples.len()];
                let bright = s.image.scaled(1.5);
                predict(encode_png_b64(&bright).map_err(|e| e.to_string())?).await?;
            }
            statuses.extend(state.monitor_tick().map_err(|e| e.to_string())?);
        }
        let _ = tx.send(());
        let _ = server.await;

        ensure!(statuses.len() == 2, "{} shifted windows scored", statuses.len());
        ensure!(
            statuses.last().map(|r| r.status) == Some(cellcount::drift::DriftStatus::Trigger),
            "status after two shifted windows: {:?}",
            statuses.iter().map(|r| (r.status, r.input_psi, r.count_psi)).collect::<Vec<_>>()
        );
        let decision = smoke
            .store
            .retrain_due(
                &RetrainPolicy {
                    periodic_days: None,
                    drift: true,
                },
                chrono::Utc::now(),
            )
            .map_err(|e| e.to_string())?;
        ensure!(decision.due && decision.reason.as_deref() == Some("drift"), "retrain decision {decision:?}");
        Ok(format!(
            "10/10 identical to offline; flip v1->v2 after {n_v1} v1 responses, none mixed; baseline PSI {:.3}, shifted PSI {:.2}/{:.2} -> trigger; retrain due (drift)",
            baseline[0].input_psi.max(baseline[0].count_psi),
            statuses[0].input_psi.max(statuses[0].count_psi),
            statuses[1].input_psi.max(statuses[1].count_psi),
        ))
    })
}

// ---------------------------------------------------------------------------------------
// 10. Reproducibility and crash safety

const CRASH_CHILD_ENV: &str = "CELLCOUNT_ACCEPTANCE_APPEND_LOOP";

/// Child mode: appends records to the store at `dir` until killed.
fn append_loop(dir: &Path) -> ! {
    let store = RunStore::open(dir).unwrap();
    let template: RunRecord = serde_json::from_str(&std::fs::read_to_string(dir.join("template.json")).unwrap()).unwrap();
    for i in 0.. {
        let mut r = template.clone();
        r.run_id = format!("crash-{i:06}");
        r.status = RunStatus::Running;
        store.append(&r).unwrap();
    }
    unreachable!()
}

fn criterion_reproducibility(smoke: &Smoke) -> Check {
    let original = smoke
        .records
        .iter()
        .find(|r| r.status == RunStatus::Completed)
        .ok_or("no completed run")?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fresh = RunStore::open(dir.path().join("rerun")).map_err(|e| e.to_string())?;
    let rerun = trainer::train(&smoke.samples, &original.config, &fresh, TrainOptions::default()).map_err(|e| e.to_string())?;
    ensure!(rerun.split_hash == original.split_hash, "split hash differs");
    let (wa, wb) = (
        original.artifacts.as_ref().ok_or("no artifacts")?.weights_hash.clone(),
        rerun.artifacts.as_ref().ok_or("no artifacts")?.weights_hash.clone(),
    );
    ensure!(wa == wb, "weights hash differs: {wa} vs {wb}");

    // Kill a process that appends records as fast as it can.
    let crash_dir = dir.path().join("crash");
    let store = RunStore::open(&crash_dir).map_err(|e| e.to_string())?;
    let mut template = original.clone();
    // A large record widens the window in which a write is in flight.
    template.epoch_series = std::iter::repeat_n(original.epoch_series.clone(), 200).flatten().collect();
    std::fs::write(crash_dir.join("template.json"), serde_json::to_vec(&template).unwrap()).map_err(|e| e.to_string())?;
    let mut killed_runs = 0;
    for attempt in 0..5 {
        let mut child = std::process::Command::new(std::env::current_exe().map_err(|e| e.to_string())?)
            .env(CRASH_CHILD_ENV, &crash_dir)
            .stdout(std::process::Stdio::null())
            .stderr(std::process::Stdio::null())
            .spawn()
            .map_err(|e| e.to_string())?;
        std::thread::sleep(Duration::from_millis(150 + 70 * attempt));
        child.kill().map_err(|e| e.to_string())?;
        let _ = child.wait();
        // The next child resumes from a new id range.
        let n = store.list().map_err(|e| format!("store unreadable after kill: {e}"))?.len();
        killed_runs = n;
        for entry in std::fs::read_dir(crash_dir.join("runs")).map_err(|e| e.to_string())? {
            let p = entry.map_err(|e| e.to_string())?.path();
            if p.extension().and_then(|e| e.to_str()) == Some("json") {
                cellcount::fsutil::read_json::<RunRecord>(&p).map_err(|e| format!("partial record {}: {e}", p.display()))?;
            }
        }
        // Remove the records so every child starts at crash-000000 and collides with nothing.
        for entry in std::fs::read_dir(crash_dir.join("runs")).map_err(|e| e.to_string())? {
            let _ = std::fs::remove_file(entry.map_err(|e| e.to_string())?.path());
        }
    }
    // A torn temporary file left in place is ignored and does not block later appends.
    let runs = crash_dir.join("runs");
    std::fs::write(runs.join("torn.json.tmp"), b"{\"run_id\": \"torn\", \"stat").map_err(|e| e.to_string())?;
    ensure!(store.list().map_err(|e| e.to_string())?.is_empty(), "torn temporary file listed as a record");
    let mut r = original.clone();
    r.run_id = "torn".into();
    r.status = RunStatus::Running;
    store.append(&r).map_err(|e| e.to_string())?;
    ensure!(store.get("torn").map_err(|e| e.to_string())? == r, "append after crash did not round-trip");
    Ok(format!(
        "rerun of {} reproduces split and weights hash {}; 5 killed writers left only complete records (last {killed_runs})",
        original.run_id,
        &wa[..12]
    ))
}

fn main() {
    if let Ok(dir) = std::env::var(CRASH_CHILD_ENV) {
        append_loop(Path::new(&dir));
    }
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let mut ok = Vec::new();
    ok.push(run_criterion(1, "loss correctness", criterion_losses));
    ok.push(run_criterion(2, "matching oracle equivalence", criterion_matching));
    ok.push(run_criterion(3, "threshold fidelity", criterion_thresholds));
    ok.push(run_criterion(4, "counting oracle", criterion_counting));
    ok.push(run_criterion(5, "training protocol", criterion_training_protocol));
    let smoke = catch_unwind(build_smoke).unwrap_or_else(|_| Err("smoke ablation panicked".into()));
    match &smoke {
        Ok(s) => ok.push(run_criterion(6, "smoke ablation", || criterion_smoke(s))),
        Err(e) => ok.push(run_criterion(6, "smoke ablation", || Err(e.clone()))),
    }
    ok.push(run_criterion(7, "emissions arithmetic", criterion_emissions));
    let needs_smoke = |f: fn(&Smoke) -> Check| {
        let smoke = &smoke;
        move || match smoke {
            Ok(s) => f(s),
            Err(e) => Err(format!("smoke fixture unavailable: {e}")),
        }
    };
    ok.push(run_criterion(8, "grad-cam properties", needs_smoke(criterion_gradcam)));
    ok.push(run_criterion(9, "serving equivalence and lifecycle", needs_smoke(criterion_serving)));
    ok.push(run_criterion(10, "reproducibility and crash safety", needs_smoke(criterion_reproducibility)));
    let passed = ok.iter().filter(|&&b| b).count();
    println!("acceptance: {passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
