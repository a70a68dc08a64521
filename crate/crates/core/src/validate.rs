//! Zero-order-hold alignment of vision and sensor displacement, and the
//! tolerance report.

use std::path::Path;

use thiserror::Error;

use crate::calib::DisplacementSample;
use crate::io_util::{fmt6, write_atomic};

pub const DEFAULT_TOLERANCE: f64 = 0.026;
pub const DEFAULT_MAX_LAG: f64 = 0.15;

/// Slack for timestamps that are equal up to float formatting.
const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ValidateError {
    #[error("{0} stream is empty")]
    EmptyStream(&'static str),
    #[error("no aligned pairs to compare")]
    NoPairs,
    #[error("tolerance must be positive, got {0}")]
    BadTolerance(f64),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignedPair {
    pub t_frame: f64,
    pub vision: DisplacementSample,
    pub sensor: DisplacementSample,
    /// t_frame minus sensor time, never negative.
    pub lag: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub pairs: Vec<AlignedPair>,
    pub dropped: usize,
}

/// Pair each vision sample with the latest sensor sample at or before it.
/// Vision samples with no such sensor sample within `max_lag` are dropped.
/// Both streams must be sorted by time.
pub fn align(vision: &[DisplacementSample], sensor: &[DisplacementSample], max_lag: f64) -> Result<Alignment, ValidateError> {
    if vision.is_empty() {
        return Err(ValidateError::EmptyStream("vision"));
    }
    if sensor.is_empty() {
        return Err(ValidateError::EmptyStream("sensor"));
    }
    let mut pairs = Vec::with_capacity(vision.len());
    let mut dropped = 0;
    let mut j = 0usize;
    for v in vision {
        while j < sensor.len() && sensor[j].t <= v.t + TIME_EPS {
            j += 1;
        }
        match j.checked_sub(1).map(|k| sensor[k]) {
            Some(s) if v.t - s.t <= max_lag + TIME_EPS => {
                pairs.push(AlignedPair { t_frame: v.t, vision: *v, sensor: s, lag: (v.t - s.t).max(0.0) });
            }
            _ => dropped += 1,
        }
    }
    Ok(Alignment { pairs, dropped })
}

/// Which displacement component the errors are taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorAxis {
    #[default]
    Vertical,
    Magnitude,
}

impl ErrorAxis {
    fn value(self, s: &DisplacementSample) -> f64 {
        match self {
            ErrorAxis::Vertical => s.dy,
            ErrorAxis::Magnitude => s.magnitude(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub pairs: Vec<AlignedPair>,
    pub errors: Vec<f64>,
    pub max_error: f64,
    pub rmse: f64,
    pub mean_error: f64,
    /// Worst error on full displacement magnitude, reported regardless of axis.
    pub max_magnitude_error: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub axis: ErrorAxis,
    pub gap_count: usize,
    pub dropped: usize,
}

pub fn compare(pairs: &[AlignedPair], tolerance: f64, axis: ErrorAxis) -> Result<ValidationReport, ValidateError> {
    if !(tolerance > 0.0) {
        return Err(ValidateError::BadTolerance(tolerance));
    }
    if pairs.is_empty() {
        return Err(ValidateError::NoPairs);
    }
    let errors: Vec<f64> = pairs.iter().map(|p| (axis.value(&p.vision) - axis.value(&p.sensor)).abs()).collect();
    let n = errors.len() as f64;
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let mean_error = errors.iter().sum::<f64>() / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    // keep mean <= rmse <= max exact under rounding
    let rmse = rmse.clamp(mean_error.min(max_error), max_error);
    let max_magnitude_error = pairs
        .iter()
        .map(|p| (p.vision.magnitude() - p.sensor.magnitude()).abs())
        .fold(0.0, f64::max);
    Ok(ValidationReport {
        pairs: pairs.to_vec(),
        errors,
        max_error,
        rmse,
        mean_error,
        max_magnitude_error,
        tolerance,
        pass: max_error < tolerance,
        axis,
        gap_count: 0,
        dropped: 0,
    })
}

/// Error of a vision estimate against a tape-measured start/end pair.
pub fn manual_check(marked_start: f64, marked_end: f64, vision_estimate: f64) -> f64 {
    ((marked_end - marked_start) - vision_estimate).abs()
}

/// A validation run either yields a report or nothing to compare at all.
#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Report(ValidationReport),
    NoPairs { tolerance: f64, gap_count: usize, dropped: usize },
}

impl Outcome {
    pub fn pass(&self) -> bool {
        matches!(self, Outcome::Report(r) if r.pass)
    }
}

/// Align, compare, and attach gap and drop counts. An empty vision stream
/// (every frame a gap) is an outcome, not an error.
pub fn validate_streams(
    vision: &[DisplacementSample],
    sensor: &[DisplacementSample],
    max_lag: f64,
    tolerance: f64,
    axis: ErrorAxis,
    gap_count: usize,
) -> Result<Outcome, ValidateError> {
    if !(tolerance > 0.0) {
        return Err(ValidateError::BadTolerance(tolerance));
    }
    if sensor.is_empty() {
        return Err(ValidateError::EmptyStream("sensor"));
    }
    if vision.is_empty() {
        return Ok(Outcome::NoPairs { tolerance, gap_count, dropped: 0 });
    }
    let al = align(vision, sensor, max_lag)?;
    if al.pairs.is_empty() {
        return Ok(Outcome::NoPairs { tolerance, gap_count, dropped: al.dropped });
    }
    let mut r = compare(&al.pairs, tolerance, axis)?;
    r.gap_count = gap_count;
    r.dropped = al.dropped;
    Ok(Outcome::Report(r))
}

pub const REPORT_HEADER: &str = "t_s,vision_dy_m,sensor_dy_m,abs_error_m";

pub fn report_csv(o: &Outcome) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    match o {
        Outcome::Report(r) => {
            for (p, e) in r.pairs.iter().zip(&r.errors) {
                out.push_str(&format!("{},{},{},{}\n", fmt6(p.t_frame), fmt6(p.vision.dy), fmt6(p.sensor.dy), fmt6(*e)));
            }
            let axis = match r.axis {
                ErrorAxis::Vertical => "vertical",
                ErrorAxis::Magnitude => "magnitude",
            };
            out.push_str(&format!("max_error_m={}\n", fmt6(r.max_error)));
            out.push_str(&format!("rmse_m={}\n", fmt6(r.rmse)));
            out.push_str(&format!("mean_error_m={}\n", fmt6(r.mean_error)));
            out.push_str(&format!("max_magnitude_error_m={}\n", fmt6(r.max_magnitude_error)));
            out.push_str(&format!("error_axis={axis}\n"));
            out.push_str(&format!("tolerance_m={}\n", fmt6(r.tolerance)));
            out.push_str(&format!("pairs={}\n", r.pairs.len()));
            out.push_str(&format!("dropped={}\n", r.dropped));
            out.push_str(&format!("gap_count={}\n", r.gap_count));
            out.push_str(&format!("pass={}\n", r.pass));
        }
        Outcome::NoPairs { tolerance, gap_count, dropped } => {
            out.push_str(&format!("tolerance_m={}\n", fmt6(*tolerance)));
            out.push_str("pairs=0\n");
            out.push_str(&format!("dropped={dropped}\n"));
            out.push_str(&format!("gap_count={gap_count}\n"));
            out.push_str("pass=false\n");
        }
    }
    out
}

pub fn save_report(o: &Outcome, path: &Path) -> Result<(), ValidateError> {
    Ok(write_atomic(path, report_csv(o).as_bytes())?)
}
