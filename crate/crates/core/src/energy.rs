//! Energy metering and CO₂ accounting for a code region.
//!
//! A sampler thread reads instantaneous CPU/GPU power from a probe at a fixed period;
//! energy is the trapezoidal integral of power over wall time.

use std::path::Path;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_CARBON_INTENSITY: f64 = 0.27;
pub const DEFAULT_SAMPLE_PERIOD_S: f64 = 1.0;
const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProbeKind {
    Measured,
    TdpEstimate,
    Stub,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PowerSample {
    pub cpu_w: f64,
    pub gpu_w: f64,
}

pub trait PowerProbe: Send {
    fn kind(&self) -> ProbeKind;
    fn read(&mut self) -> Result<PowerSample>;
}

/// Constant power, for tests and dry runs.
#[derive(Clone, Debug)]
pub struct StubProbe {
    pub cpu_w: f64,
    pub gpu_w: f64,
}

impl PowerProbe for StubProbe {
    fn kind(&self) -> ProbeKind {
        ProbeKind::Stub
    }

    fn read(&mut self) -> Result<PowerSample> {
        Ok(PowerSample {
            cpu_w: self.cpu_w,
            gpu_w: self.gpu_w,
        })
    }
}

/// Package power from the Linux powercap (RAPL) energy counter.
pub struct RaplProbe {
    path: std::path::PathBuf,
    max_uj: u64,
    last: Option<(Instant, u64)>,
}

impl RaplProbe {
    pub fn open() -> Result<Self> {
        let dir = Path::new("/sys/class/powercap/intel-rapl:0");
        let path = dir.join("energy_uj");
        let max_uj = std::fs::read_to_string(dir.join("max_energy_range_uj"))
            .ok()
            .and_then(|s| s.trim().parse().ok())
            .unwrap_or(u64::MAX);
        let mut probe = Self {
            path,
            max_uj,
            last: None,
        };
        let v = probe.counter()?;
        probe.last = Some((Instant::now(), v));
        Ok(probe)
    }

    fn counter(&self) -> Result<u64> {
        let s = std::fs::read_to_string(&self.path).map_err(|e| Error::io(&self.path, e))?;
        s.trim()
            .parse()
            .map_err(|e| Error::Decode(format!("{}: {e}", self.path.display())))
    }
}

impl PowerProbe for RaplProbe {
    fn kind(&self) -> ProbeKind {
        ProbeKind::Measured
    }

    fn read(&mut self) -> Result<PowerSample> {
        let now = Instant::now();
        let v = self.counter()?;
        let cpu_w = match self.last {
            Some((t, prev)) => {
                let dt = now.duration_since(t).as_secs_f64();
                let de = if v >= prev { v - prev } else { self.max_uj - prev + v };
                if dt > 0.0 {
                    de as f64 * 1e-6 / dt
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        self.last = Some((now, v));
        Ok(PowerSample { cpu_w, gpu_w: 0.0 })
    }
}

/// Estimates CPU power as a per-core TDP share scaled by this process's CPU utilisation.
pub struct TdpProbe {
    pub watts_per_core: f64,
    last: Option<(Instant, f64)>,
}

/// Kernel clock ticks per second for `/proc` accounting on Linux.
const CLOCK_TICKS: f64 = 100.0;

/// User plus system CPU time of this process, from `/proc/self/stat`.
pub fn process_cpu_seconds() -> Option<f64> {
    let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
    // Fields after the parenthesised command name; utime and stime are fields 14 and 15.
    let rest = &stat[stat.rfind(')')? + 2..];
    let f: Vec<&str> = rest.split_whitespace().collect();
    let utime: f64 = f.get(11)?.parse().ok()?;
    let stime: f64 = f.get(12)?.parse().ok()?;
    Some((utime + stime) / CLOCK_TICKS)
}

impl TdpProbe {
    pub fn new(watts_per_core: f64) -> Self {
        Self {
            watts_per_core,
            last: process_cpu_seconds().map(|c| (Instant::now(), c)),
        }
    }
}

impl PowerProbe for TdpProbe {
    fn kind(&self) -> ProbeKind {
        ProbeKind::TdpEstimate
    }

    fn read(&mut self) -> Result<PowerSample> {
        let now = Instant::now();
        let Some(cpu) = process_cpu_seconds() else {
            return Ok(PowerSample::default());
        };
        let w = match self.last {
            Some((t, prev)) => {
                let dt = now.duration_since(t).as_secs_f64();
                if dt > 0.0 {
                    (cpu - prev).max(0.0) / dt * self.watts_per_core
                } else {
                    0.0
                }
            }
            None => 0.0,
        };
        self.last = Some((now, cpu));
        Ok(PowerSample { cpu_w: w, gpu_w: 0.0 })
    }
}

/// Best available probe: RAPL when readable, otherwise the TDP estimate.
pub fn default_probe() -> Box<dyn PowerProbe> {
    match RaplProbe::open() {
        Ok(p) => Box::new(p),
        Err(e) => {
            log::warn!("power counter unavailable ({e}); falling back to TDP estimate");
            Box::new(TdpProbe::new(15.0))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmissionsReport {
    pub cpu_kwh: f64,
    pub gpu_kwh: f64,
    pub co2_kg: f64,
    pub carbon_intensity_kg_per_kwh: f64,
    pub duration_s: f64,
    pub sample_period_s: f64,
    pub probe_kind: ProbeKind,
}

impl EmissionsReport {
    pub fn new(
        cpu_kwh: f64,
        gpu_kwh: f64,
        carbon_intensity: f64,
        duration_s: f64,
        sample_period_s: f64,
        probe_kind: ProbeKind,
    ) -> Self {
        Self {
            cpu_kwh,
            gpu_kwh,
            co2_kg: (cpu_kwh + gpu_kwh) * carbon_intensity,
            carbon_intensity_kg_per_kwh: carbon_intensity,
            duration_s,
            sample_period_s,
            probe_kind,
        }
    }

    pub fn total_kwh(&self) -> f64 {
        self.cpu_kwh + self.gpu_kwh
    }
}

/// Trapezoidal integration of timestamped power samples.
#[derive(Clone, Debug, Default)]
pub struct EnergyAccumulator {
    first_t: Option<f64>,
    last: Option<(f64, PowerSample)>,
    cpu_j: f64,
    gpu_j: f64,
}

impl EnergyAccumulator {
    pub fn push(&mut self, t_s: f64, s: PowerSample) {
        if let Some((t0, p)) = self.last {
            let dt = (t_s - t0).max(0.0);
            self.cpu_j += 0.5 * (p.cpu_w + s.cpu_w) * dt;
            self.gpu_j += 0.5 * (p.gpu_w + s.gpu_w) * dt;
        } else {
            self.first_t = Some(t_s);
        }
        self.last = Some((t_s, s));
    }

    pub fn duration_s(&self) -> f64 {
        match (self.first_t, self.last) {
            (Some(a), Some((b, _))) => b - a,
            _ => 0.0,
        }
    }

    pub fn report(&self, carbon_intensity: f64, sample_period_s: f64, kind: ProbeKind) -> EmissionsReport {
        EmissionsReport::new(
            self.cpu_j / JOULES_PER_KWH,
            self.gpu_j / JOULES_PER_KWH,
            carbon_intensity,
            self.duration_s(),
            sample_period_s,
            kind,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyConfig {
    pub carbon_intensity_kg_per_kwh: f64,
    pub sample_period_s: f64,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        Self {
            carbon_intensity_kg_per_kwh: DEFAULT_CARBON_INTENSITY,
            sample_period_s: DEFAULT_SAMPLE_PERIOD_S,
        }
    }
}

/// Runs `region` while a sampler thread integrates the probe's power readings.
pub fn meter<R>(
    region: impl FnOnce() -> R,
    mut probe: Box<dyn PowerProbe>,
    cfg: &EnergyConfig,
) -> (R, EmissionsReport) {
    let period = Duration::from_secs_f64(cfg.sample_period_s.max(1e-3));
    let kind = probe.kind();
    let (stop_tx, stop_rx) = mpsc::channel::<()>();
    let start = Instant::now();
    let sampler = thread::spawn(move || {
        let mut acc = EnergyAccumulator::default();
        let mut read = |acc: &mut EnergyAccumulator| {
            let t = start.elapsed().as_secs_f64();
            match probe.read() {
                Ok(s) => acc.push(t, s),
                Err(e) => log::warn!("power probe read failed: {e}"),
            }
        };
        read(&mut acc);
        loop {
            match stop_rx.recv_timeout(period) {
                Err(mpsc::RecvTimeoutError::Timeout) => read(&mut acc),
                _ => break,
            }
        }
        read(&mut acc);
        acc
    });
    let out = region();
    let _ = stop_tx.send(());
    let acc = sampler.join().unwrap_or_default();
    let elapsed = start.elapsed().as_secs_f64();
    let mut report = acc.report(cfg.carbon_intensity_kg_per_kwh, cfg.sample_period_s, kind);
    report.duration_s = elapsed;
    (out, report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub label: String,
    pub runs: usize,
    pub mean_cpu_kwh: f64,
    pub mean_gpu_kwh: f64,
    pub mean_total_kwh: f64,
    pub mean_co2_kg: f64,
    /// Mean CO₂ relative to the lowest-emitting label.
    pub co2_ratio: Option<f64>,
}

/// Per-label mean energy and CO₂, in first-appearance order of labels.
pub fn compare(reports: &[(String, EmissionsReport)]) -> Vec<CompareRow> {
    let mut labels: Vec<&str> = Vec::new();
    for (l, _) in reports {
        if !labels.contains(&l.as_str()) {
            labels.push(l);
        }
    }
    let mut rows: Vec<CompareRow> = labels
        .iter()
        .map(|&label| {
            let group: Vec<&EmissionsReport> =
                reports.iter().filter(|(l, _)| l == label).map(|(_, r)| r).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&EmissionsReport) -> f64| group.iter().map(|r| f(r)).sum::<f64>() / n;
            CompareRow {
                label: label.to_string(),
                runs: group.len(),
                mean_cpu_kwh: mean(|r| r.cpu_kwh),
                mean_gpu_kwh: mean(|r| r.gpu_kwh),
                mean_total_kwh: mean(|r| r.total_kwh()),
                mean_co2_kg: mean(|r| r.co2_kg),
                co2_ratio: None,
            }
        })
        .collect();
    let min = rows.iter().map(|r| r.mean_co2_kg).fold(f64::INFINITY, f64::min);
    if min > 0.0 && min.is_finite() {
        for r in &mut rows {
            r.co2_ratio = Some(r.mean_co2_kg / min);
        }
    }
    rows
}

pub fn reports_csv(reports: &[(String, EmissionsReport)]) -> String {
    let mut out = String::from(
        "label,cpu_kwh,gpu_kwh,co2_kg,carbon_intensity_kg_per_kwh,duration_s,sample_period_s,probe_kind\n",
    );
    for (label, r) in reports {
        let kind = serde_json::to_value(r.probe_kind)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        out.push_str(&format!(
            "{label},{},{},{},{},{},{},{kind}\n",
            r.cpu_kwh, r.gpu_kwh, r.co2_kg, r.carbon_intensity_kg_per_kwh, r.duration_s, r.sample_period_s
        ));
    }
    out
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = String::from("label,runs,mean_cpu_kwh,mean_gpu_kwh,mean_total_kwh,mean_co2_kg,co2_ratio\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            r.runs,
            r.mean_cpu_kwh,
            r.mean_gpu_kwh,
            r.mean_total_kwh,
            r.mean_co2_kg,
            r.co2_ratio.map(|v| v.to_string()).unwrap_or_default()
        ));
    }
    out
}
