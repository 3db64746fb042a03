//! Detection metrics: greedy matching, precision/recall/F1, average
//! precision, and mAP over an IoU-threshold range.
//!
//! Matching is greedy by descending score with one-to-one assignment; a
//! prediction counts as a true positive when its IoU with an unmatched
//! ground-truth box is at or above the threshold. AP integrates the
//! precision envelope over recall (all-point interpolation by default,
//! eleven-point switchable).

use std::collections::BTreeSet;
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};

/// One image's predictions and ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval {
    pub image_id: String,
    /// Detector output; scores expected (missing scores rank as 0).
    pub preds: Vec<BBox>,
    pub gts: Vec<BBox>,
}

/// Intersection-over-union of two boxes. Box construction already forbids
/// zero-area boxes, so the value is always well defined.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

/// Outcome of matching one image at one threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
    /// (pred_idx, gt_idx, iou) for each true positive; indices refer to the
    /// input slices. Each side appears at most once.
    pub pairs: Vec<(usize, usize, f64)>,
}

impl MatchResult {
    pub fn prf1(&self) -> (f64, f64, f64) {
        prf1(self.tp, self.fp, self.fn_count)
    }
}

/// Greedy one-to-one matching: predictions in descending score order each
/// claim the unmatched ground truth with the highest IoU, provided that IoU
/// is at least `iou_thr`. Boundary-equal IoU counts as a match.
pub fn match_predictions(preds: &[BBox], gts: &[BBox], iou_thr: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| score_of(&preds[b]).total_cmp(&score_of(&preds[a])));

    let mut gt_taken = vec![false; gts.len()];
    let mut pairs = Vec::new();
    for &pi in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_taken[gi] || gt.class_id != preds[pi].class_id {
                continue;
            }
            let v = iou(&preds[pi], gt);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        if let Some((gi, v)) = best {
            gt_taken[gi] = true;
            pairs.push((pi, gi, v));
        }
    }
    let tp = pairs.len();
    MatchResult {
        tp,
        fp: preds.len() - tp,
        fn_count: gts.len() - tp,
        pairs,
    }
}

fn score_of(b: &BBox) -> f64 {
    b.score.unwrap_or(0.0)
}

/// Precision, recall, F1 with the zero-denominator conventions: an empty
/// denominator yields 0, and F1 is 0 when precision + recall is 0.
pub fn prf1(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fn_count == 0 { 0.0 } else { tp as f64 / (tp + fn_count) as f64 };
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    (precision, recall, f1)
}

/// How AP integrates the precision-recall curve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    /// Area under the full precision envelope.
    AllPoint,
    /// Mean of envelope precision at recalls {0.0, 0.1, ..., 1.0}.
    ElevenPoint,
}

/// AP for one class at one threshold, plus the ground-truth count that
/// normalized recall (zero means the value defaulted to 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApResult {
    pub value: f64,
    pub n_gt: usize,
}

/// Average precision for `class_id` at `iou_thr` over all images.
/// Predictions are pooled globally and swept in descending score order
/// (ties broken by image id, then by per-image index, so the sweep is
/// deterministic).
pub fn average_precision(
    images: &[ImageEval],
    class_id: u32,
    iou_thr: f64,
    interp: Interpolation,
) -> ApResult {
    let n_gt: usize = images
        .iter()
        .map(|im| im.gts.iter().filter(|g| g.class_id == class_id).count())
        .sum();
    if n_gt == 0 {
        return ApResult { value: 0.0, n_gt: 0 };
    }

    // (image_idx, pred_idx) pooled and globally ordered.
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for (ii, im) in images.iter().enumerate() {
        for (pi, p) in im.preds.iter().enumerate() {
            if p.class_id == class_id {
                entries.push((ii, pi));
            }
        }
    }
    entries.sort_by(|&(ia, pa), &(ib, pb)| {
        let sa = score_of(&images[ia].preds[pa]);
        let sb = score_of(&images[ib].preds[pb]);
        sb.total_cmp(&sa)
            .then_with(|| images[ia].image_id.cmp(&images[ib].image_id))
            .then_with(|| pa.cmp(&pb))
    });

    let mut gt_taken: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let mut tp_cum = 0usize;
    let mut fp_cum = 0usize;
    let mut recalls = Vec::with_capacity(entries.len());
    let mut precisions = Vec::with_capacity(entries.len());
    for (ii, pi) in entries {
        let image = &images[ii];
        let pred = &image.preds[pi];
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in image.gts.iter().enumerate() {
            if gt_taken[ii][gi] || gt.class_id != class_id {
                continue;
            }
            let v = iou(pred, gt);
            if v >= iou_thr && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                gt_taken[ii][gi] = true;
                tp_cum += 1;
            }
            None => fp_cum += 1,
        }
        recalls.push(tp_cum as f64 / n_gt as f64);
        precisions.push(tp_cum as f64 / (tp_cum + fp_cum) as f64);
    }

    ApResult {
        value: integrate_pr(&recalls, &precisions, interp),
        n_gt,
    }
}

/// Integrates a cumulative PR sweep into AP.
fn integrate_pr(recalls: &[f64], precisions: &[f64], interp: Interpolation) -> f64 {
    if recalls.is_empty() {
        return 0.0;
    }
    // Envelope: precision at recall r becomes the max precision at any
    // recall >= r.
    let mut envelope = precisions.to_vec();
    for i in (0..envelope.len() - 1).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    match interp {
        Interpolation::AllPoint => {
            let mut ap = 0.0;
            let mut prev_recall = 0.0;
            for (&r, &p) in recalls.iter().zip(&envelope) {
                ap += (r - prev_recall) * p;
                prev_recall = r;
            }
            ap
        }
        Interpolation::ElevenPoint => {
            let mut total = 0.0;
            for k in 0..=10 {
                let r_target = f64::from(k) / 10.0;
                let p = recalls
                    .iter()
                    .zip(&envelope)
                    .find(|(&r, _)| r >= r_target)
                    .map(|(_, &p)| p)
                    .unwrap_or(0.0);
                total += p;
            }
            total / 11.0
        }
    }
}

/// The ten thresholds 0.50, 0.55, ..., 0.95. Generated as exact hundredths
/// so every caller compares against identical f64 values.
pub fn iou_thresholds_50_95() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Distinct class ids present in ground truth, in ascending order.
fn gt_classes(images: &[ImageEval]) -> BTreeSet<u32> {
    images
        .iter()
        .flat_map(|im| im.gts.iter().map(|g| g.class_id))
        .collect()
}

/// Mean AP over ground-truth classes at one threshold.
pub fn map_at(images: &[ImageEval], iou_thr: f64, interp: Interpolation) -> f64 {
    let classes = gt_classes(images);
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| average_precision(images, c, iou_thr, interp).value)
        .sum();
    sum / classes.len() as f64
}

/// (mAP@50, mAP@50:95).
pub fn map_range(images: &[ImageEval], interp: Interpolation) -> (f64, f64) {
    let thresholds = iou_thresholds_50_95();
    let maps: Vec<f64> = thresholds.iter().map(|&t| map_at(images, t, interp)).collect();
    let map50 = maps[0];
    let map50_95 = maps.iter().sum::<f64>() / maps.len() as f64;
    (map50, map50_95)
}

/// Evaluation settings. P/R/F1 drop predictions under the score cutoff
/// before matching; AP always uses every prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub score_cutoff: f64,
    pub interpolation: Interpolation,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            score_cutoff: 0.25,
            interpolation: Interpolation::AllPoint,
        }
    }
}

/// Full metric bundle for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// AP per class per threshold: (class_id, threshold, ap).
    pub per_class_ap: Vec<(u32, f64, f64)>,
    /// Micro-averaged at IoU 0.5 over score-cutoff predictions.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    pub n_images: usize,
    pub regime: String,
}

/// Computes the full report over a set of images.
pub fn evaluate(images: &[ImageEval], config: &EvalConfig, regime: impl Into<String>) -> EvalReport {
    // Matching counts at IoU 0.5 with the score cutoff applied.
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut fn_count = 0usize;
    for im in images {
        let kept: Vec<BBox> = im
            .preds
            .iter()
            .filter(|p| score_of(p) >= config.score_cutoff)
            .copied()
            .collect();
        let m = match_predictions(&kept, &im.gts, 0.5);
        tp += m.tp;
        fp += m.fp;
        fn_count += m.fn_count;
    }
    let (precision, recall, f1) = prf1(tp, fp, fn_count);

    let classes = gt_classes(images);
    let mut per_class_ap = Vec::new();
    for &c in &classes {
        for &t in &iou_thresholds_50_95() {
            let ap = average_precision(images, c, t, config.interpolation);
            per_class_ap.push((c, t, ap.value));
        }
    }
    let (map50, map50_95) = map_range(images, config.interpolation);
    EvalReport {
        per_class_ap,
        precision,
        recall,
        f1,
        map50,
        map50_95,
        n_images: images.len(),
        regime: regime.into(),
    }
}

/// One prediction-file line.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub image_id: String,
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
}

/// Writes predictions as JSON lines, one box per line.
pub fn write_predictions_jsonl(path: &Path, images: &[ImageEval]) -> Result<()> {
    let mut out =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for im in images {
        for p in &im.preds {
            let record = PredictionRecord {
                image_id: im.image_id.clone(),
                class_id: p.class_id,
                cx: p.cx,
                cy: p.cy,
                w: p.w,
                h: p.h,
                score: score_of(p),
            };
            let line = serde_json::to_string(&record)
                .map_err(|e| Error::Decode(format!("serialize prediction: {e}")))?;
            writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a predictions file into per-image box lists, ordered by first
/// appearance of each image id.
pub fn read_predictions_jsonl(path: &Path) -> Result<Vec<(String, Vec<BBox>)>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut order: Vec<String> = Vec::new();
    let mut by_image: std::collections::HashMap<String, Vec<BBox>> = std::collections::HashMap::new();
    for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: PredictionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Decode(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        let bbox = BBox::new(r.class_id, r.cx, r.cy, r.w, r.h)?.with_score(r.score)?;
        if !by_image.contains_key(&r.image_id) {
            order.push(r.image_id.clone());
        }
        by_image.entry(r.image_id).or_default().push(bbox);
    }
    Ok(order
        .into_iter()
        .map(|id| {
            let boxes = by_image.remove(&id).unwrap_or_default();
            (id, boxes)
        })
        .collect())
}
