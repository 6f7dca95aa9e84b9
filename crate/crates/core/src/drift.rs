//! Input and prediction drift statistics for the serving monitor.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::dataset::Image;
use crate::error::Result;

pub const INPUT_BINS: usize = 10;
pub const COUNT_BINS: usize = 5;
/// Bin mass floor applied before taking logarithms.
pub const PSI_FLOOR: f64 = 1e-4;
pub const MIN_WINDOW: usize = 10;

/// `Σ (p − q)·ln(p / q)` with each bin floored at [`PSI_FLOOR`].
pub fn psi(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| {
            let (a, b) = (a.max(PSI_FLOOR), b.max(PSI_FLOOR));
            (a - b) * (a / b).ln()
        })
        .sum()
}

fn normalize(counts: &[f64]) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return vec![0.0; counts.len()];
    }
    counts.iter().map(|c| c / total).collect()
}

/// Normalized 10-bin histogram of per-pixel gray levels over `[0, 1]`.
pub fn intensity_histogram(image: &Image) -> Vec<f64> {
    let mut h = vec![0.0; INPUT_BINS];
    for v in image.gray() {
        let b = ((v.clamp(0.0, 1.0) * INPUT_BINS as f32) as usize).min(INPUT_BINS - 1);
        h[b] += 1.0;
    }
    normalize(&h)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub input_hist: Vec<f64>,
    /// Count bins are `[k·w, (k+1)·w)` with the last bin open-ended.
    pub count_bin_width: usize,
    pub count_hist: Vec<f64>,
}

impl ReferenceProfile {
    pub fn build(images: &[&Image], counts: &[usize]) -> Self {
        let mut input = vec![0.0; INPUT_BINS];
        for img in images {
            for (a, b) in input.iter_mut().zip(intensity_histogram(img)) {
                *a += b;
            }
        }
        let max = counts.iter().copied().max().unwrap_or(0);
        let width = (max + 1).div_ceil(COUNT_BINS).max(1);
        let mut profile = Self {
            input_hist: normalize(&input),
            count_bin_width: width,
            count_hist: vec![],
        };
        profile.count_hist = profile.count_histogram(counts);
        profile
    }

    pub fn count_bin(&self, count: usize) -> usize {
        (count / self.count_bin_width).min(COUNT_BINS - 1)
    }

    pub fn count_histogram(&self, counts: &[usize]) -> Vec<f64> {
        let mut h = vec![0.0; COUNT_BINS];
        for &c in counts {
            h[self.count_bin(c)] += 1.0;
        }
        normalize(&h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftStatus {
    Ok,
    Warn,
    Trigger,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftReport {
    pub window_id: u64,
    pub input_psi: f64,
    pub count_psi: f64,
    pub status: DriftStatus,
    pub window_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftConfig {
    pub window_size: usize,
    pub warn_psi: f64,
    pub trigger_psi: f64,
    /// Consecutive windows above `trigger_psi` needed to trigger.
    pub trigger_windows: usize,
}

impl Default for DriftConfig {
    fn default() -> Self {
        Self {
            window_size: 100,
            warn_psi: 0.2,
            trigger_psi: 0.25,
            trigger_windows: 2,
        }
    }
}

/// Per-request statistics kept by the monitor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RequestStats {
    pub input_hist: Vec<f64>,
    pub count: usize,
}

/// Windowed PSI monitor. Requests accumulate until a full window is available.
#[derive(Debug)]
pub struct Monitor {
    pub cfg: DriftConfig,
    reference: ReferenceProfile,
    pending: VecDeque<RequestStats>,
    next_window: u64,
    over_trigger: usize,
}

impl Monitor {
    pub fn new(reference: ReferenceProfile, cfg: DriftConfig) -> Self {
        Self {
            cfg,
            reference,
            pending: VecDeque::new(),
            next_window: 0,
            over_trigger: 0,
        }
    }

    pub fn reference(&self) -> &ReferenceProfile {
        &self.reference
    }

    /// Requests recorded but not yet scored.
    pub fn pending(&self) -> usize {
        self.pending.len()
    }

    pub fn record(&mut self, stats: RequestStats) {
        self.pending.push_back(stats);
    }

    /// Scores one window of request statistics. Windows under [`MIN_WINDOW`] requests are
    /// deferred (`None`).
    pub fn tick(&mut self, window: &[RequestStats]) -> Option<DriftReport> {
        if window.len() < MIN_WINDOW {
            return None;
        }
        let mut input = vec![0.0; INPUT_BINS];
        for s in window {
            for (a, b) in input.iter_mut().zip(&s.input_hist) {
                *a += b;
            }
        }
        let input = normalize(&input);
        let counts: Vec<usize> = window.iter().map(|s| s.count).collect();
        let count_hist = self.reference.count_histogram(&counts);
        let input_psi = psi(&input, &self.reference.input_hist);
        let count_psi = psi(&count_hist, &self.reference.count_hist);
        let worst = input_psi.max(count_psi);
        if worst > self.cfg.trigger_psi {
            self.over_trigger += 1;
        } else {
            self.over_trigger = 0;
        }
        let status = if self.over_trigger >= self.cfg.trigger_windows {
            DriftStatus::Trigger
        } else if worst > self.cfg.warn_psi {
            DriftStatus::Warn
        } else {
            DriftStatus::Ok
        };
        let report = DriftReport {
            window_id: self.next_window,
            input_psi,
            count_psi,
            status,
            window_size: window.len(),
        };
        self.next_window += 1;
        Some(report)
    }

    /// Scores every complete window of pending requests.
    pub fn drain(&mut self) -> Vec<DriftReport> {
        let mut out = Vec::new();
        while self.pending.len() >= self.cfg.window_size.max(MIN_WINDOW) {
            let window: Vec<RequestStats> = self.pending.drain(..self.cfg.window_size.max(MIN_WINDOW)).collect();
            out.extend(self.tick(&window));
        }
        out
    }
}

pub fn load_reference(path: &std::path::Path) -> Result<ReferenceProfile> {
    crate::fsutil::read_json(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn two_bin_hand_value() {
        let v = psi(&[0.9, 0.1], &[0.5, 0.5]);
        let expect = 0.4 * 1.8f64.ln() + (-0.4) * 0.2f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.879).abs() < 1e-3);
        assert_eq!(psi(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
    }

    fn reference_two_bins() -> ReferenceProfile {
        ReferenceProfile {
            input_hist: vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            count_bin_width: 1,
            count_hist: vec![1.0, 0.0, 0.0, 0.0, 0.0],
        }
    }

    fn window(p: [f64; 2], n: usize) -> Vec<RequestStats> {
        let mut h = vec![0.0; INPUT_BINS];
        h[0] = p[0];
        h[1] = p[1];
        vec![RequestStats { input_hist: h, count: 0 }; n]
    }

    #[test]
    fn warn_then_trigger() {
        let mut m = Monitor::new(reference_two_bins(), DriftConfig::default());
        assert_eq!(m.tick(&window([0.5, 0.5], 100)).unwrap().status, DriftStatus::Ok);
        let r1 = m.tick(&window([0.9, 0.1], 100)).unwrap();
        assert_eq!(r1.status, DriftStatus::Warn);
        assert!((r1.input_psi - 0.879).abs() < 1e-3);
        assert_eq!(m.tick(&window([0.9, 0.1], 100)).unwrap().status, DriftStatus::Trigger);
        assert_eq!(m.tick(&window([0.5, 0.5], 100)).unwrap().status, DriftStatus::Ok);
        assert!(m.tick(&window([0.9, 0.1], 9)).is_none());
    }

    proptest! {
        #[test]
        fn psi_symmetric_and_nonnegative(a in proptest::collection::vec(0.0f64..1.0, 10), b in proptest::collection::vec(0.0f64..1.0, 10)) {
            let (p, q) = (normalize(&a), normalize(&b));
            let x = psi(&p, &q);
            prop_assert!(x >= 0.0);
            prop_assert!((x - psi(&q, &p)).abs() <= 1e-12 * x.max(1.0));
        }
    }
}
