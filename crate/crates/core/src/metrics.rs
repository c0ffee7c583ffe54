//! PR curves, adaptive-threshold F-measure and MAE, with dataset-level
//! aggregation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{files_by_stem, read_mask};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BETA_SQ: f64 = 0.3;
/// The adaptive threshold is clamped to `1 − ADAPTIVE_EPS`.
pub const ADAPTIVE_EPS: f64 = 1e-9;
pub const THRESHOLDS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when the ground truth has no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f_beta(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    a.expect_shape(b.shape(), what)
}

/// Counts with `pred > 0.5` and `gt > 0.5` as the positive classes.
pub fn confusion(pred_binary: &Tensor, gt: &Tensor) -> Result<ConfusionCounts> {
    same_shape(pred_binary, gt, "confusion")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred_binary.data().iter().zip(gt.data()) {
        match (p > 0.5, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

pub fn adaptive_threshold(map: &Tensor) -> Result<f64> {
    if map.numel() == 0 {
        return Err(Error::InvalidArgument("cannot binarize an empty map".into()));
    }
    Ok((1.5 * map.mean()).min(1.0 - ADAPTIVE_EPS))
}

/// `map > min(1.5 · mean(map), 1 − ε)` as a 0/1 map.
pub fn binarize_adaptive(map: &Tensor) -> Result<Tensor> {
    let t = adaptive_threshold(map)?;
    Ok(map.map(|v| (v > t) as u8 as f64))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrF {
    pub precision: f64,
    pub recall: f64,
    pub f_beta: f64,
}

pub fn f_measure(pred_binary: &Tensor, gt: &Tensor, beta_sq: f64) -> Result<PrF> {
    let c = confusion(pred_binary, gt)?;
    let (precision, recall) = (c.precision(), c.recall());
    Ok(PrF {
        precision,
        recall,
        f_beta: f_beta(precision, recall, beta_sq),
    })
}

pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape(pred, gt, "mae")?;
    if pred.numel() == 0 {
        return Err(Error::InvalidArgument("mae of an empty map".into()));
    }
    let s: f64 = pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(s / pred.numel() as f64)
}

/// Number of thresholds `t ∈ 0..256` with `t / 255 < p`; the pixel is
/// positive at exactly those thresholds.
fn positive_thresholds(p: f64) -> usize {
    let mut k = (p * 255.0).ceil().clamp(0.0, THRESHOLDS as f64) as usize;
    while k > 0 && (k - 1) as f64 / 255.0 >= p {
        k -= 1;
    }
    while k < THRESHOLDS && (k as f64 / 255.0) < p {
        k += 1;
    }
    k
}

/// Confusion counts of `pred > t/255` for every `t ∈ 0..256`.
pub fn threshold_counts(pred: &Tensor, gt: &Tensor) -> Result<Vec<ConfusionCounts>> {
    same_shape(pred, gt, "pr_curve")?;
    let mut pos_hist = [0u64; THRESHOLDS + 1];
    let mut neg_hist = [0u64; THRESHOLDS + 1];
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let k = positive_thresholds(p);
        if g > 0.5 {
            pos_hist[k] += 1;
        } else {
            neg_hist[k] += 1;
        }
    }
    let n_pos: u64 = pos_hist.iter().sum();
    let n_neg: u64 = neg_hist.iter().sum();
    // Pixels with k > t are predicted positive at threshold t.
    let (mut tp, mut fp) = (0, 0);
    let mut out = vec![ConfusionCounts::default(); THRESHOLDS];
    for t in (0..THRESHOLDS).rev() {
        tp += pos_hist[t + 1];
        fp += neg_hist[t + 1];
        out[t] = ConfusionCounts {
            tp,
            fp,
            tn: n_neg - fp,
            fn_: n_pos - tp,
        };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

/// Per-image curves averaged over images, or, with `pooled`, curves from
/// confusion counts summed over all images.
pub fn pr_curve(samples: &[(Tensor, Tensor)], pooled: bool) -> Result<PrCurve> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("pr_curve needs at least one sample".into()));
    }
    let mut precision = vec![0.0; THRESHOLDS];
    let mut recall = vec![0.0; THRESHOLDS];
    let mut pooled_counts = vec![ConfusionCounts::default(); THRESHOLDS];
    for (pred, gt) in samples {
        for (t, c) in threshold_counts(pred, gt)?.into_iter().enumerate() {
            precision[t] += c.precision();
            recall[t] += c.recall();
            let acc = &mut pooled_counts[t];
            acc.tp += c.tp;
            acc.fp += c.fp;
            acc.tn += c.tn;
            acc.fn_ += c.fn_;
        }
    }
    if pooled {
        precision = pooled_counts.iter().map(ConfusionCounts::precision).collect();
        recall = pooled_counts.iter().map(ConfusionCounts::recall).collect();
    } else {
        let n = samples.len() as f64;
        precision.iter_mut().chain(recall.iter_mut()).for_each(|v| *v /= n);
    }
    Ok(PrCurve { precision, recall })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Latency {
    pub seconds_per_image: f64,
    pub fps: f64,
}

impl Latency {
    pub fn from_total(seconds: f64, images: usize) -> Self {
        let spi = seconds / images.max(1) as f64;
        Self {
            seconds_per_image: spi,
            fps: if spi > 0.0 { 1.0 / spi } else { f64::INFINITY },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub precision_curve: Vec<f64>,
    pub recall_curve: Vec<f64>,
    /// Mean over images of the adaptive-threshold precision.
    pub precision: f64,
    pub recall: f64,
    /// Fβ of the mean precision and mean recall.
    pub f_beta: f64,
    /// Mean over images of the per-image Fβ.
    pub f_beta_per_image: f64,
    pub mae: f64,
    pub n_images: usize,
    pub beta_sq: f64,
    pub threshold_rule: String,
    pub pr_pooled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<Latency>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub beta_sq: f64,
    pub pooled_pr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            beta_sq: BETA_SQ,
            pooled_pr: false,
        }
    }
}

/// Aggregates `(prediction, ground truth)` pairs; predictions in `[0, 1]`,
/// ground truth binary.
pub fn evaluate_maps(samples: &[(Tensor, Tensor)], opts: EvalOptions) -> Result<MetricReport> {
    let curve = pr_curve(samples, opts.pooled_pr)?;
    let n = samples.len() as f64;
    let (mut p, mut r, mut f, mut m) = (0.0, 0.0, 0.0, 0.0);
    for (pred, gt) in samples {
        let prf = f_measure(&binarize_adaptive(pred)?, gt, opts.beta_sq)?;
        p += prf.precision;
        r += prf.recall;
        f += prf.f_beta;
        m += mae(pred, gt)?;
    }
    let (precision, recall) = (p / n, r / n);
    Ok(MetricReport {
        precision_curve: curve.precision,
        recall_curve: curve.recall,
        precision,
        recall,
        f_beta: f_beta(precision, recall, opts.beta_sq),
        f_beta_per_image: f / n,
        mae: m / n,
        n_images: samples.len(),
        beta_sq: opts.beta_sq,
        threshold_rule: "adaptive: min(1.5 * mean, 1 - 1e-9)".into(),
        pr_pooled: opts.pooled_pr,
        latency: None,
    })
}

/// Reads an 8-bit prediction map as values in `[0, 1]`.
pub fn read_prediction(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Tensor::from_fn(
        crate::tensor::Shape::new(1, 1, h as usize, w as usize),
        |_, _, y, x| img.get_pixel(x as u32, y as u32)[0] as f64 / 255.0,
    ))
}

/// Evaluates `<stem>.png` or `<stem>_defocus.png` predictions against
/// `<stem>.png` masks. Predictions are resized to the mask size if needed.
pub fn evaluate_dirs(pred_dir: &Path, gt_dir: &Path, opts: EvalOptions) -> Result<MetricReport> {
    let gts = files_by_stem(gt_dir, &["png"])?;
    let mut preds = std::collections::BTreeMap::new();
    for (stem, path) in files_by_stem(pred_dir, &["png"])? {
        let key = stem.strip_suffix("_defocus").unwrap_or(&stem).to_string();
        if preds.insert(key.clone(), path).is_some() {
            return Err(Error::InvalidArgument(format!("two predictions for `{key}`")));
        }
    }
    let mut unmatched: Vec<String> = gts
        .keys()
        .filter(|k| !preds.contains_key(*k))
        .map(|k| format!("{k} (no prediction)"))
        .collect();
    unmatched.extend(
        preds
            .keys()
            .filter(|k| !gts.contains_key(*k))
            .map(|k| format!("{k} (no ground truth)")),
    );
    if !unmatched.is_empty() {
        return Err(Error::UnmatchedStems(unmatched));
    }
    let mut pairs = Vec::with_capacity(gts.len());
    for (stem, gt_path) in &gts {
        let gt = read_mask(gt_path)?;
        let mut pred = read_prediction(&preds[stem])?;
        let (gs, ps) = (gt.shape(), pred.shape());
        if (gs.h, gs.w) != (ps.h, ps.w) {
            pred = pred.resize_bilinear(gs.h, gs.w);
        }
        pairs.push((pred, gt));
    }
    evaluate_maps(&pairs, opts)
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// `threshold,precision,recall` with one row per threshold.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("threshold,precision,recall\n");
        for t in 0..self.precision_curve.len() {
            s.push_str(&format!("{t},{},{}\n", self.precision_curve[t], self.recall_curve[t]));
        }
        s
    }
}
