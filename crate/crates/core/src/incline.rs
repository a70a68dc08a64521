//! Inclinometer traces: loading, stationary-noise characterization, and
//! angle-to-arc conversion into vertical tip displacement.

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::calib::{DisplacementSample, SampleSource};
use crate::io_util::write_atomic;

/// Feet of tip travel per degree in the legacy field conversion (18.2 m boom).
pub const LEGACY_FT_PER_DEG: f64 = 1.046;
pub const MM_PER_FT: f64 = 304.8;

#[derive(Debug, Error)]
pub enum InclineError {
    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error("duplicate timestamp {0} s")]
    DuplicateTimestamp(f64),
    #[error("no readings")]
    Empty,
    #[error("trial {0} has no readings")]
    EmptyTrial(usize),
    #[error("no secondary angle column in readings")]
    MissingSecondaryAxis,
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InclinometerReading {
    pub t: f64,
    /// degrees
    pub angle: f64,
    pub angle2: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AngleAxis {
    #[default]
    Primary,
    Secondary,
}

impl InclinometerReading {
    pub fn axis(&self, axis: AngleAxis) -> Option<f64> {
        match axis {
            AngleAxis::Primary => Some(self.angle),
            AngleAxis::Secondary => self.angle2,
        }
    }
}

/// Parse `t_s,angle_deg[,angle2_deg]` with a header. Rows come back sorted
/// by time; duplicate timestamps are rejected.
pub fn parse_readings<R: io::Read>(reader: R) -> Result<Vec<InclinometerReading>, InclineError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let names: Vec<&str> = headers.iter().collect();
    if names.len() < 2 || names[0] != "t_s" || names[1] != "angle_deg" || (names.len() == 3 && names[2] != "angle2_deg") || names.len() > 3 {
        return Err(InclineError::Row {
            row: 1,
            message: format!("expected header t_s,angle_deg[,angle2_deg], found {}", names.join(",")),
        });
    }
    let dual = names.len() == 3;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| InclineError::Row { row, message: e.to_string() })?;
        let field = |k: usize| -> Result<f64, InclineError> {
            let raw = rec.get(k).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| InclineError::Row { row, message: format!("column {} is not a number: {raw:?}", k + 1) })
        };
        let t = field(0)?;
        if t < 0.0 {
            return Err(InclineError::Row { row, message: format!("negative timestamp {t}") });
        }
        let angle = field(1)?;
        let angle2 = if dual { Some(field(2)?) } else { None };
        out.push(InclinometerReading { t, angle, angle2 });
    }
    out.sort_by(|a, b| a.t.total_cmp(&b.t));
    if let Some(w) = out.windows(2).find(|w| w[0].t == w[1].t) {
        return Err(InclineError::DuplicateTimestamp(w[0].t));
    }
    Ok(out)
}

pub fn load_readings(path: &Path) -> Result<Vec<InclinometerReading>, InclineError> {
    parse_readings(std::fs::File::open(path)?)
}

/// Full-precision CSV, so a reload reproduces the same values.
pub fn readings_csv(rs: &[InclinometerReading]) -> String {
    let dual = rs.iter().any(|r| r.angle2.is_some());
    let mut out = String::from(if dual { "t_s,angle_deg,angle2_deg\n" } else { "t_s,angle_deg\n" });
    for r in rs {
        match (dual, r.angle2) {
            (true, Some(a2)) => out.push_str(&format!("{},{},{}\n", r.t, r.angle, a2)),
            (true, None) => out.push_str(&format!("{},{},{}\n", r.t, r.angle, r.angle)),
            _ => out.push_str(&format!("{},{}\n", r.t, r.angle)),
        }
    }
    out
}

pub fn save_readings(rs: &[InclinometerReading], path: &Path) -> Result<(), InclineError> {
    Ok(write_atomic(path, readings_csv(rs).as_bytes())?)
}

/// What a stationary reading is compared against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseReference {
    /// Each trial's own mean reading.
    TrialMean,
    /// A known true angle (degrees), e.g. a level boom at 0.
    Known(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseProfile {
    pub min_deflection: f64,
    pub max_deflection: f64,
    pub trial_count: usize,
    /// Longest trial span, seconds.
    pub trial_duration: f64,
}

impl NoiseProfile {
    /// Stationary bounds measured on the field sensor: -0.07 to -0.03 degrees
    /// over ten 10-second trials.
    pub fn field() -> Self {
        Self { min_deflection: -0.07, max_deflection: -0.03, trial_count: 10, trial_duration: 10.0 }
    }

    pub fn none() -> Self {
        Self { min_deflection: 0.0, max_deflection: 0.0, trial_count: 1, trial_duration: 0.0 }
    }
}

pub fn characterize_noise(trials: &[Vec<InclinometerReading>], reference: NoiseReference) -> Result<NoiseProfile, InclineError> {
    if trials.is_empty() {
        return Err(InclineError::Empty);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut duration = 0.0f64;
    for (k, trial) in trials.iter().enumerate() {
        let (first, last) = match (trial.first(), trial.last()) {
            (Some(f), Some(l)) => (f, l),
            _ => return Err(InclineError::EmptyTrial(k)),
        };
        let base = match reference {
            NoiseReference::TrialMean => trial.iter().map(|r| r.angle).sum::<f64>() / trial.len() as f64,
            NoiseReference::Known(a) => a,
        };
        for r in trial {
            let dev = r.angle - base;
            lo = lo.min(dev);
            hi = hi.max(dev);
        }
        duration = duration.max(last.t - first.t);
    }
    Ok(NoiseProfile { min_deflection: lo, max_deflection: hi, trial_count: trials.len(), trial_duration: duration })
}

/// Arc length swept by `angle` degrees at `radius` meters.
pub fn angle_to_arc(angle: f64, radius: f64) -> Result<f64, InclineError> {
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(InclineError::NonPositiveRadius(radius));
    }
    Ok(angle.to_radians() * radius)
}

/// The legacy field chain: degrees times 1.046 ft/deg times 304.8 mm/ft.
pub fn legacy_arc_mm(angle: f64) -> f64 {
    angle * LEGACY_FT_PER_DEG * MM_PER_FT
}

pub fn legacy_arc(angle: f64) -> f64 {
    legacy_arc_mm(angle) / 1000.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ArcMode {
    #[default]
    Exact,
    /// Fixed 1.046 ft/deg constant; the radius is not used.
    Legacy,
}

/// Vertical displacement per reading, relative to the first reading.
pub fn readings_to_displacement(
    rs: &[InclinometerReading],
    radius: f64,
    mode: ArcMode,
    axis: AngleAxis,
) -> Result<Vec<DisplacementSample>, InclineError> {
    let first = rs.first().ok_or(InclineError::Empty)?;
    let a0 = first.axis(axis).ok_or(InclineError::MissingSecondaryAxis)?;
    angle_to_arc(0.0, radius)?;
    rs.iter()
        .map(|r| {
            let a = r.axis(axis).ok_or(InclineError::MissingSecondaryAxis)?;
            let arc = match mode {
                ArcMode::Exact => angle_to_arc(a - a0, radius)?,
                ArcMode::Legacy => legacy_arc(a - a0),
            };
            Ok(DisplacementSample { t: r.t, dx: 0.0, dy: arc, source: SampleSource::Inclinometer })
        })
        .collect()
}
