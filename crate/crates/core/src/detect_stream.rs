//! Detection records shared by the fiducial path and external neural
//! inference: box geometry, IoU, confidence composition, NMS and the JSONL
//! interchange format.

use std::cmp::Ordering;
use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io_util::write_atomic;

#[derive(Debug, Error)]
pub enum StreamError {
    #[error("{what} = {value} is outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("box dimensions must be positive (w = {w}, h = {h})")]
    NonPositiveBox { w: f64, h: f64 },
    #[error("timestamp {0} must be finite and non-negative")]
    BadTimestamp(f64),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("box centred at ({cx}, {cy}) lies entirely outside the {width}x{height} frame")]
    OutsideFrame { cx: f64, cy: f64, width: u32, height: u32 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Axis-aligned box by centre and size, pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, StreamError> {
        // `!(w > 0)` also catches NaN
        if !(w > 0.0 && h > 0.0) || !w.is_finite() || !h.is_finite() {
            return Err(StreamError::NonPositiveBox { w, h });
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_extent(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, StreamError> {
        Self::new((x0 + x1) / 2.0, (y0 + y1) / 2.0, x1 - x0, y1 - y0)
    }

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> Result<f64, StreamError> {
    for bx in [a, b] {
        if !(bx.w > 0.0 && bx.h > 0.0) {
            return Err(StreamError::NonPositiveBox { w: bx.w, h: bx.h });
        }
    }
    Ok(iou_unchecked(a, b))
}

pub(crate) fn iou_unchecked(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x1().min(b.x1()) - a.x0().max(b.x0())).max(0.0);
    let ih = (a.y1().min(b.y1()) - a.y0().max(b.y0())).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    // extents rather than w*h, so iou(a, a) is exactly 1
    let ext = |bx: &BoundingBox| (bx.x1() - bx.x0()) * (bx.y1() - bx.y0());
    let union = ext(a) + ext(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

fn check_unit(what: &'static str, v: f64) -> Result<f64, StreamError> {
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(StreamError::OutOfRange { what, value: v })
    }
}

/// Detection confidence: objectness times class probability.
pub fn compose_confidence(objectness: f64, class_prob: f64) -> Result<f64, StreamError> {
    Ok(check_unit("objectness", objectness)? * check_unit("class_prob", class_prob)?)
}

/// One box from one frame. `confidence == objectness * class_prob`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub t: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub objectness: f64,
    pub class_prob: f64,
    pub confidence: f64,
    pub class_id: u32,
}

impl Detection {
    pub fn new(t: f64, bbox: BoundingBox, objectness: f64, class_prob: f64) -> Result<Self, StreamError> {
        if !t.is_finite() || t < 0.0 {
            return Err(StreamError::BadTimestamp(t));
        }
        let confidence = compose_confidence(objectness, class_prob)?;
        Ok(Self {
            t,
            cx: bbox.cx,
            cy: bbox.cy,
            w: bbox.w,
            h: bbox.h,
            objectness,
            class_prob,
            confidence,
            class_id: 0,
        })
    }

    pub fn bbox(&self) -> BoundingBox {
        BoundingBox { cx: self.cx, cy: self.cy, w: self.w, h: self.h }
    }
}

/// Descending confidence, then smaller `cx`, then smaller `cy`.
pub(crate) fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cx.total_cmp(&b.cx))
        .then(a.cy.total_cmp(&b.cy))
}

/// Greedy class-agnostic non-maximum suppression over one frame's boxes.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<Detection> = dets.to_vec();
    order.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in order {
        let b = d.bbox();
        if kept.iter().all(|k| iou_unchecked(&k.bbox(), &b) < iou_threshold) {
            kept.push(d);
        }
    }
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub width: u32,
    pub height: u32,
}

/// Time-ordered detections, optionally tied to a frame size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionStream {
    pub geometry: Option<FrameGeometry>,
    records: Vec<Detection>,
}

impl DetectionStream {
    /// Stable-sorts by `t`.
    pub fn new(mut records: Vec<Detection>) -> Self {
        records.sort_by(|a, b| a.t.total_cmp(&b.t));
        Self { geometry: None, records }
    }

    /// Attach a frame size and clamp every box to it.
    pub fn with_geometry(mut self, g: FrameGeometry) -> Result<Self, StreamError> {
        let (fw, fh) = (g.width as f64, g.height as f64);
        for d in &mut self.records {
            let (x0, x1) = (d.cx - d.w / 2.0, d.cx + d.w / 2.0);
            let (y0, y1) = (d.cy - d.h / 2.0, d.cy + d.h / 2.0);
            let (cx0, cx1) = (x0.max(0.0), x1.min(fw));
            let (cy0, cy1) = (y0.max(0.0), y1.min(fh));
            if cx1 <= cx0 || cy1 <= cy0 {
                return Err(StreamError::OutsideFrame { cx: d.cx, cy: d.cy, width: g.width, height: g.height });
            }
            if (cx0, cx1, cy0, cy1) != (x0, x1, y0, y1) {
                d.cx = (cx0 + cx1) / 2.0;
                d.cy = (cy0 + cy1) / 2.0;
                d.w = cx1 - cx0;
                d.h = cy1 - cy0;
            }
        }
        self.geometry = Some(g);
        Ok(self)
    }

    pub fn records(&self) -> &[Detection] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Consecutive runs of records sharing one timestamp.
    pub fn frames(&self) -> impl Iterator<Item = &[Detection]> {
        self.records.chunk_by(|a, b| a.t == b.t)
    }
}

/// On-disk form. `confidence` is only consulted when objectness or class
/// probability is missing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub(crate) struct DetectionRecord {
    pub t: f64,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objectness: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_prob: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
    #[serde(default)]
    pub class_id: u32,
    #[serde(default, skip_serializing)]
    pub image: Option<serde_json::Value>,
}

impl DetectionRecord {
    pub(crate) fn into_detection(self) -> Result<Detection, String> {
        for (name, v) in [("t", self.t), ("cx", self.cx), ("cy", self.cy), ("w", self.w), ("h", self.h)] {
            if !v.is_finite() {
                return Err(format!("{name} is not finite"));
            }
        }
        let bbox = BoundingBox::new(self.cx, self.cy, self.w, self.h).map_err(|e| e.to_string())?;
        let (objectness, class_prob) = match (self.objectness, self.class_prob, self.confidence) {
            (Some(o), Some(p), _) => (o, p),
            // a bare confidence is carried as objectness with certain class
            (_, _, Some(c)) => (c, 1.0),
            _ => return Err("needs objectness and class_prob, or confidence".into()),
        };
        if let Some(c) = self.confidence {
            check_unit("confidence", c).map_err(|e| e.to_string())?;
        }
        let mut d = Detection::new(self.t, bbox, objectness, class_prob).map_err(|e| e.to_string())?;
        d.class_id = self.class_id;
        Ok(d)
    }
}

impl From<&Detection> for DetectionRecord {
    fn from(d: &Detection) -> Self {
        Self {
            t: d.t,
            cx: d.cx,
            cy: d.cy,
            w: d.w,
            h: d.h,
            objectness: Some(d.objectness),
            class_prob: Some(d.class_prob),
            confidence: None,
            class_id: d.class_id,
            image: None,
        }
    }
}

/// Parse JSONL text; blank lines are skipped, line numbers are 1-based.
pub fn parse_detections(text: &str) -> Result<DetectionStream, StreamError> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: DetectionRecord =
            serde_json::from_str(line).map_err(|e| StreamError::Line { line: i + 1, message: e.to_string() })?;
        let d = rec.into_detection().map_err(|message| StreamError::Line { line: i + 1, message })?;
        records.push(d);
    }
    Ok(DetectionStream::new(records))
}

pub fn load_detections(path: &Path) -> Result<DetectionStream, StreamError> {
    parse_detections(&fs::read_to_string(path)?)
}

pub fn to_jsonl(records: &[Detection]) -> String {
    let mut out = String::new();
    for d in records {
        out.push_str(&serde_json::to_string(&DetectionRecord::from(d)).expect("plain struct serializes"));
        out.push('\n');
    }
    out
}

pub fn save_detections(records: &[Detection], path: &Path) -> Result<(), StreamError> {
    Ok(write_atomic(path, to_jsonl(records).as_bytes())?)
}

/// Highest-confidence detection per timestamp, if it clears `min_confidence`.
pub fn best_per_frame(s: &DetectionStream, min_confidence: f64) -> DetectionStream {
    let records = s
        .frames()
        .filter_map(|frame| {
            frame
                .iter()
                .filter(|d| d.confidence >= min_confidence)
                .min_by(|a, b| rank_order(a, b))
                .copied()
        })
        .collect();
    DetectionStream { geometry: s.geometry, records }
}
