//! Single-class detection evaluation: greedy IoU matching, precision/recall
//! sweeps, all-points AP, AP at several IoU thresholds, and seeded dataset
//! splits.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::detect_stream::{iou_unchecked, BoundingBox, DetectionRecord};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("recall is undefined without ground-truth boxes")]
    NoGroundTruth,
    #[error("IoU thresholds must lie in (0, 1] and be strictly ascending, got {0:?}")]
    BadThresholds(Vec<f64>),
    #[error("split ratios must be non-negative and sum to 1, got ({0}, {1}, {2})")]
    BadRatios(f64, f64, f64),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Canonical text key for an image id given as a JSON string or number.
/// Integral numbers print without a fraction so `3` and `3.0` agree.
pub fn image_key(v: &serde_json::Value) -> Option<String> {
    match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => n.as_f64().map(number_key),
        _ => None,
    }
}

fn number_key(x: f64) -> String {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        format!("{}", x as i64)
    } else {
        format!("{x}")
    }
}

/// Ground-truth boxes grouped by image.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruthSet {
    images: BTreeMap<String, Vec<BoundingBox>>,
}

impl GroundTruthSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, image: impl Into<String>, b: BoundingBox) {
        self.images.entry(image.into()).or_default().push(b);
    }

    pub fn get(&self, image: &str) -> &[BoundingBox] {
        self.images.get(image).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn total(&self) -> usize {
        self.images.values().map(Vec::len).sum()
    }

    pub fn images(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    iou_thresholds: Vec<f64>,
}

impl EvalConfig {
    pub fn new(iou_thresholds: Vec<f64>) -> Result<Self, EvalError> {
        let ok = !iou_thresholds.is_empty()
            && iou_thresholds.iter().all(|&t| t > 0.0 && t <= 1.0)
            && iou_thresholds.windows(2).all(|w| w[0] < w[1]);
        if !ok {
            return Err(EvalError::BadThresholds(iou_thresholds));
        }
        Ok(Self { iou_thresholds })
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.iou_thresholds
    }
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { iou_thresholds: vec![0.5, 0.9] }
    }
}

/// A scored box attributed to one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetection {
    pub image: String,
    pub bbox: BoundingBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// `true` for a true positive, aligned with the input order.
    pub labels: Vec<bool>,
    pub false_negatives: usize,
}

impl MatchResult {
    pub fn true_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn false_positives(&self) -> usize {
        self.labels.len() - self.true_positives()
    }
}

/// Greedy matching for one image. `ranked` must already be in descending
/// confidence order; each box takes the unmatched ground truth with the
/// highest IoU at or above `iou_t` (lowest index on ties).
pub fn match_detections(ranked: &[BoundingBox], gt: &[BoundingBox], iou_t: f64) -> MatchResult {
    let mut used = vec![false; gt.len()];
    let mut labels = Vec::with_capacity(ranked.len());
    for d in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (g, gb) in gt.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou_unchecked(d, gb);
            if v >= iou_t && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((g, v));
            }
        }
        match best {
            Some((g, _)) => {
                used[g] = true;
                labels.push(true);
            }
            None => labels.push(false),
        }
    }
    let false_negatives = used.iter().filter(|&&u| !u).count();
    MatchResult { labels, false_negatives }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative precision and recall after each ranked detection.
pub fn precision_recall_curve(labels: &[bool], total_gt: usize) -> Result<Vec<PrPoint>, EvalError> {
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    let mut tp = 0usize;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            tp += usize::from(l);
            PrPoint { precision: tp as f64 / (i + 1) as f64, recall: tp as f64 / total_gt as f64 }
        })
        .collect())
}

/// All-points interpolated AP: each recall increment is weighted by the
/// best precision achieved at that recall or beyond.
pub fn average_precision(curve: &[PrPoint]) -> f64 {
    let mut envelope = vec![0.0f64; curve.len()];
    let mut running = 0.0f64;
    for i in (0..curve.len()).rev() {
        running = running.max(curve[i].precision);
        envelope[i] = running;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.iter().zip(envelope) {
        if p.recall > prev_recall {
            ap += (p.recall - prev_recall) * env;
            prev_recall = p.recall;
        }
    }
    ap.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdResult {
    pub iou_threshold: f64,
    pub ap: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl ThresholdResult {
    pub fn precision(&self) -> f64 {
        let n = self.true_positives + self.false_positives;
        if n == 0 {
            0.0
        } else {
            self.true_positives as f64 / n as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let n = self.true_positives + self.false_negatives;
        if n == 0 {
            0.0
        } else {
            self.true_positives as f64 / n as f64
        }
    }
}

/// AP per IoU threshold. With a single class this is mAP at that threshold.
/// Detections on images without ground truth count as false positives.
pub fn map_at(dets: &[ImageDetection], gt: &GroundTruthSet, cfg: &EvalConfig) -> Result<Vec<ThresholdResult>, EvalError> {
    let total_gt = gt.total();
    if total_gt == 0 {
        return Err(EvalError::NoGroundTruth);
    }
    // global rank: confidence desc, then image, then input order
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b].confidence.total_cmp(&dets[a].confidence).then_with(|| dets[a].image.cmp(&dets[b].image))
    });
    let mut per_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        per_image.entry(dets[i].image.as_str()).or_default().push(i);
    }

    let mut results = Vec::with_capacity(cfg.thresholds().len());
    for &t in cfg.thresholds() {
        let mut label = vec![false; dets.len()];
        let mut matched = 0usize;
        for (image, idx) in &per_image {
            let boxes: Vec<BoundingBox> = idx.iter().map(|&i| dets[i].bbox).collect();
            let m = match_detections(&boxes, gt.get(image), t);
            matched += m.true_positives();
            for (&i, l) in idx.iter().zip(m.labels) {
                label[i] = l;
            }
        }
        let ranked: Vec<bool> = order.iter().map(|&i| label[i]).collect();
        let curve = precision_recall_curve(&ranked, total_gt)?;
        results.push(ThresholdResult {
            iou_threshold: t,
            ap: average_precision(&curve),
            true_positives: matched,
            false_positives: dets.len() - matched,
            false_negatives: total_gt - matched,
        });
    }
    Ok(results)
}

pub fn metrics_csv(results: &[ThresholdResult]) -> String {
    let mut out = String::from("iou_threshold,ap,precision,recall,tp,fp,fn\n");
    for r in results {
        out.push_str(&format!(
            "{:.2},{:.6},{:.6},{:.6},{},{},{}\n",
            r.iou_threshold,
            r.ap,
            r.precision(),
            r.recall(),
            r.true_positives,
            r.false_positives,
            r.false_negatives
        ));
    }
    out
}

#[derive(Deserialize)]
struct GtRecord {
    image: serde_json::Value,
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

pub fn parse_ground_truth(text: &str) -> Result<GroundTruthSet, EvalError> {
    let mut set = GroundTruthSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Line { line: i + 1, message };
        let r: GtRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let key = image_key(&r.image).ok_or_else(|| err("image must be a string or number".into()))?;
        let b = BoundingBox::new(r.cx, r.cy, r.w, r.h).map_err(|e| err(e.to_string()))?;
        set.push(key, b);
    }
    Ok(set)
}

pub fn load_ground_truth(path: &Path) -> Result<GroundTruthSet, EvalError> {
    parse_ground_truth(&fs::read_to_string(path)?)
}

/// Detection JSONL for evaluation. Each record may name its `image`;
/// otherwise its timestamp `t` is the image key.
pub fn parse_eval_detections(text: &str) -> Result<Vec<ImageDetection>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| EvalError::Line { line: i + 1, message };
        let rec: DetectionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        let image = match &rec.image {
            Some(v) => image_key(v).ok_or_else(|| err("image must be a string or number".into()))?,
            None => number_key(rec.t),
        };
        let d = rec.into_detection().map_err(err)?;
        out.push(ImageDetection { image, bbox: d.bbox(), confidence: d.confidence });
    }
    Ok(out)
}

pub fn load_eval_detections(path: &Path) -> Result<Vec<ImageDetection>, EvalError> {
    parse_eval_detections(&fs::read_to_string(path)?)
}

/// Seeded shuffle into `(train, test, valid)`. Test and validation sizes
/// are floored; the remainder goes to training.
pub fn split_dataset<T: Clone>(items: &[T], ratios: (f64, f64, f64), seed: u64) -> Result<(Vec<T>, Vec<T>, Vec<T>), EvalError> {
    let (tr, te, va) = ratios;
    let finite = [tr, te, va].iter().all(|r| r.is_finite() && *r >= 0.0);
    if !finite || (tr + te + va - 1.0).abs() > 1e-9 {
        return Err(EvalError::BadRatios(tr, te, va));
    }
    let n = items.len();
    // the epsilon keeps 100 * 0.14 = 14.000000000000002 and friends stable
    let n_test = ((n as f64 * te) + 1e-9).floor() as usize;
    let n_valid = ((n as f64 * va) + 1e-9).floor() as usize;
    let n_train = n - n_test - n_valid;
    let mut shuffled = items.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let valid = shuffled.split_off(n_train + n_test);
    let test = shuffled.split_off(n_train);
    Ok((shuffled, test, valid))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bx(cx: f64, cy: f64, w: f64, h: f64) -> BoundingBox {
        BoundingBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn match_examples() {
        let g = bx(50.0, 50.0, 20.0, 20.0);
        let m = match_detections(&[g], &[g], 0.5);
        assert_eq!((m.true_positives(), m.false_positives(), m.false_negatives), (1, 0, 0));

        // 20x20 boxes offset by 5 px: IoU = 300 / 500 = 0.6
        let d = bx(55.0, 50.0, 20.0, 20.0);
        assert!((iou_unchecked(&d, &g) - 0.6).abs() < 1e-12);
        let m = match_detections(&[d], &[g], 0.9);
        assert_eq!((m.false_positives(), m.false_negatives), (1, 1));

        let m = match_detections(&[g, d], &[g], 0.5);
        assert_eq!(m.labels, vec![true, false]);
    }

    #[test]
    fn curve_examples() {
        let c = precision_recall_curve(&[true, true], 2).unwrap();
        assert!(c.iter().all(|p| p.precision == 1.0));
        assert_eq!(c.last().unwrap().recall, 1.0);

        let c = precision_recall_curve(&[false, false], 2).unwrap();
        assert!(c.iter().all(|p| p.precision == 0.0));

        let c = precision_recall_curve(&[true, false, true], 2).unwrap();
        let expect = [(1.0, 0.5), (0.5, 0.5), (2.0 / 3.0, 1.0)];
        for (p, e) in c.iter().zip(expect) {
            assert!((p.precision - e.0).abs() < 1e-12 && (p.recall - e.1).abs() < 1e-12);
        }
        assert!(matches!(precision_recall_curve(&[true], 0), Err(EvalError::NoGroundTruth)));
    }

    #[test]
    fn ap_examples() {
        let perfect = precision_recall_curve(&[true, true, true], 3).unwrap();
        assert_eq!(average_precision(&perfect), 1.0);
        assert_eq!(average_precision(&[]), 0.0);
        let mixed = precision_recall_curve(&[true, false, true], 2).unwrap();
        assert!((average_precision(&mixed) - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);

        let mut gt = GroundTruthSet::new();
        gt.push("a", bx(50.0, 50.0, 20.0, 20.0));
        let dets = vec![ImageDetection { image: "a".into(), bbox: bx(55.0, 50.0, 20.0, 20.0), confidence: 0.9 }];
        let r = map_at(&dets, &gt, &EvalConfig::default()).unwrap();
        assert_eq!(r[0].ap, 1.0);
        assert_eq!(r[1].ap, 0.0);

        let r = map_at(&[], &gt, &EvalConfig::default()).unwrap();
        assert!(r.iter().all(|t| t.ap == 0.0));
        assert!(map_at(&dets, &GroundTruthSet::new(), &EvalConfig::default()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EvalConfig::new(vec![0.5, 0.9]).is_ok());
        assert!(EvalConfig::new(vec![0.9, 0.5]).is_err());
        assert!(EvalConfig::new(vec![0.0]).is_err());
        assert!(EvalConfig::new(vec![1.2]).is_err());
        assert!(EvalConfig::new(vec![]).is_err());
    }

    #[test]
    fn split_examples() {
        let items: Vec<u32> = (0..100).collect();
        let (tr, te, va) = split_dataset(&items, (0.74, 0.14, 0.12), 0).unwrap();
        assert_eq!((tr.len(), te.len(), va.len()), (74, 14, 12));
        let mut all: Vec<u32> = tr.iter().chain(&te).chain(&va).copied().collect();
        all.sort();
        assert_eq!(all, items);

        let (tr, te, va) = split_dataset(&[1, 2, 3], (1.0, 0.0, 0.0), 9).unwrap();
        assert_eq!((tr.len(), te.len(), va.len()), (3, 0, 0));

        assert_eq!(split_dataset(&items, (0.74, 0.14, 0.12), 4).unwrap(), split_dataset(&items, (0.74, 0.14, 0.12), 4).unwrap());
        assert!(split_dataset(&items, (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&items, (1.2, -0.1, -0.1), 0).is_err());
    }

    #[test]
    fn jsonl_loaders() {
        let gt = parse_ground_truth("{\"image\": 3, \"cx\": 1, \"cy\": 1, \"w\": 2, \"h\": 2}\n{\"image\": \"b\", \"cx\": 1, \"cy\": 1, \"w\": 2, \"h\": 2}\n").unwrap();
        assert_eq!(gt.total(), 2);
        assert_eq!(gt.get("3").len(), 1);
        let dets = parse_eval_detections("{\"t\": 3.0, \"cx\": 1, \"cy\": 1, \"w\": 2, \"h\": 2, \"confidence\": 0.5}\n{\"t\": 0, \"image\": \"b\", \"cx\": 1, \"cy\": 1, \"w\": 2, \"h\": 2, \"confidence\": 0.5}\n").unwrap();
        assert_eq!(dets[0].image, "3");
        assert_eq!(dets[1].image, "b");
        assert!(matches!(parse_ground_truth("{\"image\": 1, \"cx\": 1}\n"), Err(EvalError::Line { line: 1, .. })));
    }
}
