//! Square binary fiducials: dictionary generation, rendering, and the
//! two-stage detector (quad candidates, then grid decode).

mod candidates;
mod decode;
mod dictionary;
mod homography;

use thiserror::Error;

pub use candidates::{adaptive_threshold, find_candidates, Quad};
pub use decode::{decode_candidate, Rejection};
pub use dictionary::{hamming, rotate_cw, rotations, MarkerDictionary};
pub use homography::Homography;

use std::path::PathBuf;

use rayon::prelude::*;

use crate::detect_stream::{BoundingBox, Detection, StreamError};
use crate::frames::{load_image, to_grayscale, Frame, FrameError};

#[derive(Debug, Error)]
pub enum FiducialError {
    #[error("grid size {0} unsupported (2..=8 bits per side)")]
    InvalidGrid(usize),
    #[error("cannot place {count} codes of {grid}x{grid} bits at minimum distance {min_hamming}")]
    Infeasible { grid: usize, count: usize, min_hamming: u32 },
    #[error("marker id {id} out of range (dictionary has {count})")]
    UnknownId { id: usize, count: usize },
    #[error("marker side {side} px is not divisible by {cells} cells")]
    SideNotDivisible { side: u32, cells: u32 },
    #[error("dictionary parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, o: Point) -> f64 {
        (self.x - o.x).hypot(self.y - o.y)
    }
}

/// Tunables for candidate extraction and decoding.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectorParams {
    /// Side of the adaptive-threshold averaging window, pixels (odd).
    pub window: u32,
    /// A pixel is foreground when it is at least this far below the local mean.
    pub offset: f64,
    pub min_perimeter: f64,
    /// Polygon approximation tolerance as a fraction of the contour perimeter.
    pub approx_epsilon: f64,
    /// Minimum distance between any two corners of one candidate.
    pub min_corner_distance: f64,
    /// Longest side over shortest side.
    pub max_aspect: f64,
    /// Candidates whose corners are on average closer than this are merged.
    pub min_marker_distance: f64,
    pub min_border_black: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        Self {
            window: 15,
            offset: 7.0,
            min_perimeter: 40.0,
            approx_epsilon: 0.03,
            min_corner_distance: 10.0,
            max_aspect: 4.0,
            min_marker_distance: 10.0,
            min_border_black: 0.85,
        }
    }
}

/// A decoded marker. Corners run clockwise (in image coordinates) from the
/// marker's own top-left corner.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerObservation {
    pub id: usize,
    pub corners: [Point; 4],
    pub center: Point,
    pub hamming_corrections: u32,
}

impl MarkerObservation {
    /// Axis-aligned extent of the corners: `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let xs = self.corners.map(|p| p.x);
        let ys = self.corners.map(|p| p.y);
        let fold = |v: [f64; 4], f: fn(f64, f64) -> f64| v.into_iter().reduce(f).unwrap();
        (fold(xs, f64::min), fold(ys, f64::min), fold(xs, f64::max), fold(ys, f64::max))
    }

    pub fn area(&self) -> f64 {
        polygon_area(&self.corners)
    }
}

/// Shoelace area; positive for clockwise order in image coordinates.
pub(crate) fn polygon_area(p: &[Point; 4]) -> f64 {
    let mut s = 0.0;
    for i in 0..4 {
        let (a, b) = (p[i], p[(i + 1) % 4]);
        s += a.x * b.y - b.x * a.y;
    }
    s / 2.0
}

pub(crate) fn point_in_convex(p: Point, quad: &[Point; 4]) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b) = (quad[i], quad[(i + 1) % 4]);
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        if cross != 0.0 {
            if sign != 0.0 && cross.signum() != sign {
                return false;
            }
            sign = cross.signum();
        }
    }
    true
}

/// Box centred on the marker and wide enough for all four corners. Class
/// probability drops with every corrected bit.
pub fn observation_detection(obs: &MarkerObservation, t: f64, d: &MarkerDictionary) -> Result<Detection, StreamError> {
    let c = obs.center;
    let half_w = obs.corners.iter().map(|p| (p.x - c.x).abs()).fold(0.0, f64::max);
    let half_h = obs.corners.iter().map(|p| (p.y - c.y).abs()).fold(0.0, f64::max);
    let bits = (d.grid() * d.grid()) as f64;
    let class_prob = (1.0 - obs.hamming_corrections as f64 / bits).clamp(0.0, 1.0);
    let mut det = Detection::new(t, BoundingBox::new(c.x, c.y, 2.0 * half_w, 2.0 * half_h)?, 1.0, class_prob)?;
    det.class_id = obs.id as u32;
    Ok(det)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameDetections {
    pub path: PathBuf,
    pub t: f64,
    pub detections: Vec<Detection>,
}

/// Load and detect every frame in parallel; results keep input order.
pub fn detect_frame_files(
    paths: &[PathBuf],
    d: &MarkerDictionary,
    params: &DetectorParams,
) -> Result<Vec<FrameDetections>, FrameError> {
    paths
        .par_iter()
        .map(|p| {
            let f = load_image(p)?;
            let t = f.timestamp();
            let detections = detect_markers_with(&f, d, params)
                .iter()
                .map(|o| observation_detection(o, t, d))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| FrameError::Invalid(format!("{}: {e}", p.display())))?;
            Ok(FrameDetections { path: p.clone(), t, detections })
        })
        .collect()
}

pub fn detect_markers(f: &Frame, d: &MarkerDictionary) -> Vec<MarkerObservation> {
    detect_markers_with(f, d, &DetectorParams::default())
}

/// Candidates, decode, then one observation per id (fewest corrections,
/// larger area on ties). Markers nested inside a larger decoded marker are
/// dropped. Output is sorted by id.
pub fn detect_markers_with(f: &Frame, d: &MarkerDictionary, params: &DetectorParams) -> Vec<MarkerObservation> {
    let gray = to_grayscale(f);
    let mut decoded: Vec<MarkerObservation> = find_candidates(&gray, params)
        .iter()
        .filter_map(|q| decode_candidate(&gray, q, d, params).ok())
        .collect();
    decoded.sort_by(|a, b| b.area().total_cmp(&a.area()));
    let mut kept: Vec<MarkerObservation> = Vec::new();
    for obs in decoded {
        if kept.iter().any(|k| point_in_convex(obs.center, &k.corners)) {
            continue;
        }
        kept.push(obs);
    }
    let mut best: Vec<MarkerObservation> = Vec::new();
    for obs in kept {
        match best.iter_mut().find(|b| b.id == obs.id) {
            Some(b) if obs.hamming_corrections < b.hamming_corrections => *b = obs,
            Some(_) => {}
            None => best.push(obs),
        }
    }
    best.sort_by_key(|o| o.id);
    best
}
