//! Segmentation, detection and counting assessment.
//!
//! Predicted and true objects are paired one-to-one by a maximum-cardinality matching over
//! admissible pairs (IoU above threshold for segmentation, centroid distance below threshold
//! for detection). Among maximum matchings the one with the largest total IoU, or the
//! smallest total distance, wins.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Image, Sample};
use crate::error::{Error, Result};
use crate::network::SegmentationNetwork;
use crate::postproc::{connected_components, count_cells, LabeledObjects, PostprocConfig};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(pred, truth)` index pairs.
    pub pairs: Vec<(usize, usize)>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl MatchResult {
    fn from_pairs(mut pairs: Vec<(usize, usize)>, n_pred: usize, n_true: usize) -> Self {
        pairs.sort_unstable();
        let tp = pairs.len();
        Self {
            pairs,
            tp,
            fp: n_pred - tp,
            fn_: n_true - tp,
        }
    }
}

/// Minimum-cost assignment of every row to a distinct column (`rows <= cols`), returning the
/// column assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    let m = cost[0].len();
    debug_assert!(n <= m);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row (1-based) assigned to column j; way[j]: previous column on the augmenting path.
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

fn find(parent: &mut [usize], x: usize) -> usize {
    let mut r = x;
    while parent[r] != r {
        r = parent[r];
    }
    let mut c = x;
    while parent[c] != r {
        let next = parent[c];
        parent[c] = r;
        c = next;
    }
    r
}

/// Maximum-cardinality one-to-one matching over weighted admissible edges, maximizing total
/// weight among maximum matchings. Weights must lie in `(0, 1]`.
pub fn max_weight_max_cardinality(
    n_pred: usize,
    n_true: usize,
    edges: &[(usize, usize, f64)],
) -> Vec<(usize, usize)> {
    // Independent connected components of the bipartite graph are solved separately.
    let mut parent: Vec<usize> = (0..n_pred + n_true).collect();
    for &(p, t, _) in edges {
        let a = find(&mut parent, p);
        let b = find(&mut parent, n_pred + t);
        if a != b {
            parent[a] = b;
        }
    }
    let mut groups: HashMap<usize, Vec<(usize, usize, f64)>> = HashMap::new();
    for &e in edges {
        let root = find(&mut parent, e.0);
        groups.entry(root).or_default().push(e);
    }
    let mut roots: Vec<usize> = groups.keys().copied().collect();
    roots.sort_unstable();

    let mut pairs = Vec::new();
    for root in roots {
        let group = &groups[&root];
        let mut preds: Vec<usize> = group.iter().map(|e| e.0).collect();
        let mut truths: Vec<usize> = group.iter().map(|e| e.1).collect();
        preds.sort_unstable();
        preds.dedup();
        truths.sort_unstable();
        truths.dedup();
        let transpose = preds.len() > truths.len();
        let (rows, cols) = if transpose {
            (&truths, &preds)
        } else {
            (&preds, &truths)
        };
        // Any extra admissible pair outweighs every possible total of tie-break weights.
        let bonus = rows.len() as f64 + 1.0;
        let mut cost = vec![vec![0.0; cols.len()]; rows.len()];
        for &(p, t, w) in group {
            let (r, c) = if transpose { (t, p) } else { (p, t) };
            let ri = rows.binary_search(&r).expect("row present");
            let ci = cols.binary_search(&c).expect("col present");
            cost[ri][ci] = -(bonus + w);
        }
        let assign = hungarian(&cost);
        for (ri, &ci) in assign.iter().enumerate() {
            if ci == usize::MAX || cost[ri][ci] == 0.0 {
                continue;
            }
            let (r, c) = (rows[ri], cols[ci]);
            pairs.push(if transpose { (c, r) } else { (r, c) });
        }
    }
    pairs
}

/// Intersection-over-union of every overlapping `(pred, truth)` object pair, by index.
pub fn overlap_ious(pred: &LabeledObjects, truth: &LabeledObjects) -> Result<Vec<(usize, usize, f64)>> {
    if (pred.height, pred.width) != (truth.height, truth.width) {
        return Err(Error::Shape(format!(
            "prediction is {}x{}, truth is {}x{}",
            pred.height, pred.width, truth.height, truth.width
        )));
    }
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&a, &b) in pred.label_map.iter().zip(&truth.label_map) {
        if a != 0 && b != 0 {
            *inter.entry((a, b)).or_default() += 1;
        }
    }
    let mut out: Vec<(usize, usize, f64)> = inter
        .into_iter()
        .map(|((a, b), i)| {
            let (pa, ta) = (pred.objects[a as usize - 1].area, truth.objects[b as usize - 1].area);
            let union = pa + ta - i;
            (a as usize - 1, b as usize - 1, i as f64 / union as f64)
        })
        .collect();
    out.sort_by(|x, y| (x.0, x.1).cmp(&(y.0, y.1)));
    Ok(out)
}

/// Segmentation matching: admissible iff IoU strictly exceeds `iou_thr`.
pub fn match_segmentation(pred: &LabeledObjects, truth: &LabeledObjects, iou_thr: f64) -> Result<MatchResult> {
    let edges: Vec<(usize, usize, f64)> = overlap_ious(pred, truth)?
        .into_iter()
        .filter(|e| e.2 > iou_thr)
        .collect();
    let pairs = max_weight_max_cardinality(pred.count, truth.count, &edges);
    Ok(MatchResult::from_pairs(pairs, pred.count, truth.count))
}

pub fn distance(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dr, dc) = (a.0 - b.0, a.1 - b.1);
    (dr * dr + dc * dc).sqrt()
}

/// Detection matching: admissible iff centroid distance is strictly below `dist_thr_px`.
pub fn match_detection(pred: &[(f64, f64)], truth: &[(f64, f64)], dist_thr_px: f64) -> MatchResult {
    let mut edges = Vec::new();
    for (i, &p) in pred.iter().enumerate() {
        for (j, &t) in truth.iter().enumerate() {
            let d = distance(p, t);
            if d < dist_thr_px {
                edges.push((i, j, (dist_thr_px - d) / dist_thr_px));
            }
        }
    }
    let pairs = max_weight_max_cardinality(pred.len(), truth.len(), &edges);
    MatchResult::from_pairs(pairs, pred.len(), truth.len())
}

/// `2tp / (2tp + fp + fn)`; an empty prediction against an empty truth scores 1.
pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let den = 2 * tp + fp + fn_;
    if den == 0 {
        return 1.0;
    }
    2.0 * tp as f64 / den as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingError {
    /// Mean of `(pred − true) / true × 100`; `None` when no image has a nonzero true count.
    pub mpe_signed: Option<f64>,
    pub mape: Option<f64>,
    pub n_included: usize,
    pub n_zero_truth: usize,
}

/// Signed and absolute mean percentage counting error over `(pred, true)` pairs.
pub fn counting_error(counts: &[(usize, usize)]) -> CountingError {
    let errs: Vec<f64> = counts
        .iter()
        .filter(|(_, t)| *t > 0)
        .map(|&(p, t)| (p as f64 - t as f64) / t as f64 * 100.0)
        .collect();
    let n_zero = counts.len() - errs.len();
    if errs.is_empty() {
        if !counts.is_empty() {
            log::warn!("percentage error undefined: every image has a true count of 0");
        }
        return CountingError {
            mpe_signed: None,
            mape: None,
            n_included: 0,
            n_zero_truth: n_zero,
        };
    }
    let n = errs.len() as f64;
    CountingError {
        mpe_signed: Some(errs.iter().sum::<f64>() / n),
        mape: Some(errs.iter().map(|e| e.abs()).sum::<f64>() / n),
        n_included: errs.len(),
        n_zero_truth: n_zero,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thr: f64,
    pub dist_thr_px: f64,
    /// Inference tile edge in pixels; larger images are tiled with overlap.
    pub tile: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thr: 0.4,
            dist_thr_px: 40.0,
            tile: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub iou_thr: f64,
    pub dist_thr_px: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageEval {
    pub image_id: String,
    pub seg: MatchCounts,
    pub det: MatchCounts,
    pub seg_f1: f64,
    pub det_f1: f64,
    pub pred_count: usize,
    pub true_count: usize,
    pub pct_error: Option<f64>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl From<&MatchResult> for MatchCounts {
    fn from(m: &MatchResult) -> Self {
        Self {
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageFailure {
    pub image_id: String,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub seg_f1: f64,
    pub det_f1: f64,
    pub mpe_signed: Option<f64>,
    pub mape: Option<f64>,
    pub seg: MatchCounts,
    pub det: MatchCounts,
    pub n_images: usize,
    pub n_zero_truth: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_image: Vec<ImageEval>,
    pub failures: Vec<ImageFailure>,
    pub aggregate: Aggregate,
    pub thresholds: Thresholds,
    pub postproc: PostprocConfig,
    pub notes: Vec<String>,
    /// Resolved configuration of the command that produced the report.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from(
            "image_id,seg_tp,seg_fp,seg_fn,seg_f1,det_tp,det_fp,det_fn,det_f1,pred_count,true_count,pct_error\n",
        );
        for r in &self.per_image {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.image_id,
                r.seg.tp,
                r.seg.fp,
                r.seg.fn_,
                r.seg_f1,
                r.det.tp,
                r.det.fp,
                r.det.fn_,
                r.det_f1,
                r.pred_count,
                r.true_count,
                r.pct_error.map(|v| v.to_string()).unwrap_or_default()
            ));
        }
        crate::fsutil::write_atomic(path, out.as_bytes())
    }
}

/// Anything that maps an image to a per-pixel logit map of the same size.
pub trait SegmentationModel {
    fn predict_logits(&self, image: &Image) -> Result<Vec<f32>>;
}

/// A trained network run at native resolution with tiled inference.
pub struct TiledModel<'a> {
    pub net: &'a SegmentationNetwork,
    pub tile: usize,
}

impl SegmentationModel for TiledModel<'_> {
    fn predict_logits(&self, image: &Image) -> Result<Vec<f32>> {
        self.net.predict_image(image, self.tile)
    }
}

/// Scores one image given its predicted logits.
pub fn evaluate_image(
    sample: &Sample,
    logits: &[f32],
    postproc: &PostprocConfig,
    cfg: &EvalConfig,
) -> Result<ImageEval> {
    let (h, w) = (sample.height(), sample.width());
    if logits.len() != h * w {
        return Err(Error::Shape(format!(
            "logit map has {} values for a {h}x{w} image",
            logits.len()
        )));
    }
    let pred = count_cells(logits, h, w, postproc).objects;
    let truth = connected_components(&sample.mask, postproc.connectivity);
    let seg = match_segmentation(&pred, &truth, cfg.iou_thr)?;
    let det = match_detection(&pred.centroids(), &truth.centroids(), cfg.dist_thr_px);
    let pct_error = (truth.count > 0)
        .then(|| (pred.count as f64 - truth.count as f64) / truth.count as f64 * 100.0);
    Ok(ImageEval {
        image_id: sample.image_id.clone(),
        seg_f1: f1(seg.tp, seg.fp, seg.fn_),
        det_f1: f1(det.tp, det.fp, det.fn_),
        seg: (&seg).into(),
        det: (&det).into(),
        pred_count: pred.count,
        true_count: truth.count,
        pct_error,
    })
}

/// Pools per-image results into a report. Aggregate F1 uses pooled TP/FP/FN.
pub fn aggregate(
    per_image: Vec<ImageEval>,
    failures: Vec<ImageFailure>,
    postproc: &PostprocConfig,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut seg = MatchCounts::default();
    let mut det = MatchCounts::default();
    for r in &per_image {
        seg.tp += r.seg.tp;
        seg.fp += r.seg.fp;
        seg.fn_ += r.seg.fn_;
        det.tp += r.det.tp;
        det.fp += r.det.fp;
        det.fn_ += r.det.fn_;
    }
    let counts: Vec<(usize, usize)> = per_image.iter().map(|r| (r.pred_count, r.true_count)).collect();
    let ce = counting_error(&counts);
    let mut notes = Vec::new();
    if per_image.iter().any(|r| r.true_count == 0 && r.pred_count == 0) {
        notes.push("empty prediction vs empty truth scored as F1 = 1".to_string());
    }
    if ce.n_zero_truth > 0 {
        notes.push(format!(
            "{} image(s) with true count 0 excluded from percentage error",
            ce.n_zero_truth
        ));
    }
    if ce.mpe_signed.is_none() {
        notes.push("percentage error undefined: no image with nonzero true count".to_string());
    }
    EvalReport {
        aggregate: Aggregate {
            seg_f1: f1(seg.tp, seg.fp, seg.fn_),
            det_f1: f1(det.tp, det.fp, det.fn_),
            mpe_signed: ce.mpe_signed,
            mape: ce.mape,
            seg,
            det,
            n_images: per_image.len(),
            n_zero_truth: ce.n_zero_truth,
        },
        per_image,
        failures,
        thresholds: Thresholds {
            iou_thr: cfg.iou_thr,
            dist_thr_px: cfg.dist_thr_px,
        },
        postproc: postproc.clone(),
        notes,
        config: None,
    }
}

/// Runs the model over every sample at native resolution and scores all three tiers.
/// Per-image failures are recorded without aborting the batch.
pub fn evaluate<M: SegmentationModel + ?Sized>(
    model: &M,
    samples: &[Sample],
    postproc: &PostprocConfig,
    cfg: &EvalConfig,
) -> EvalReport {
    let mut per_image = Vec::with_capacity(samples.len());
    let mut failures = Vec::new();
    for s in samples {
        match model
            .predict_logits(&s.image)
            .and_then(|l| evaluate_image(s, &l, postproc, cfg))
        {
            Ok(r) => per_image.push(r),
            Err(e) => {
                log::warn!("evaluation of {} failed: {e}", s.image_id);
                failures.push(ImageFailure {
                    image_id: s.image_id.clone(),
                    error: e.to_string(),
                });
            }
        }
    }
    aggregate(per_image, failures, postproc, cfg)
}
