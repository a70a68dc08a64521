//! Pixel-to-metric calibration and reference-anchored displacement.
//!
//! The first accepted detection defines the origin. Every later detection
//! centre is differenced against it and scaled by one fixed pixel pitch.
//! Image `+x` maps to `+dx`; image `+y` points down, so it maps to `-dy`
//! and `dy` reads positive upward.

use std::fmt;
use std::fs;
use std::io;
use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::detect_stream::DetectionStream;
use crate::io_util::{fmt6, write_atomic};

#[derive(Debug, Error)]
pub enum CalibError {
    #[error("{what} must be positive and finite, got {value}")]
    NonPositive { what: &'static str, value: f64 },
    #[error("no detection was accepted; there is no reference point")]
    EmptyStream,
    #[error("unknown sample source {0:?}")]
    UnknownSource(String),
    #[error("row {row}: {message}")]
    Row { row: usize, message: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn positive(what: &'static str, value: f64) -> Result<f64, CalibError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(CalibError::NonPositive { what, value })
    }
}

/// Meters spanned by one pixel: frame width over pixel count.
pub fn derive_pixel_pitch(frame_width_m: f64, frame_width_px: f64) -> Result<f64, CalibError> {
    Ok(positive("frame width (m)", frame_width_m)? / positive("frame width (px)", frame_width_px)?)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationProfile {
    pixel_pitch: f64,
    depth: f64,
    frame_width_px: u32,
    frame_height_px: u32,
}

impl CalibrationProfile {
    pub fn new(pixel_pitch: f64, depth: f64, frame_width_px: u32, frame_height_px: u32) -> Result<Self, CalibError> {
        positive("pixel pitch", pixel_pitch)?;
        positive("depth", depth)?;
        positive("frame width (px)", frame_width_px as f64)?;
        positive("frame height (px)", frame_height_px as f64)?;
        Ok(Self { pixel_pitch, depth, frame_width_px, frame_height_px })
    }

    /// Profile from a measured frame width at the working depth.
    pub fn from_measurement(frame_width_m: f64, depth: f64, frame_width_px: u32, frame_height_px: u32) -> Result<Self, CalibError> {
        let pitch = derive_pixel_pitch(frame_width_m, frame_width_px as f64)?;
        Self::new(pitch, depth, frame_width_px, frame_height_px)
    }

    /// The field setup: 1920x1200 frames at 18.2 m, 0.003196 m per pixel.
    pub fn field() -> Self {
        Self { pixel_pitch: 0.003196, depth: 18.2, frame_width_px: 1920, frame_height_px: 1200 }
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn depth(&self) -> f64 {
        self.depth
    }

    pub fn frame_width_px(&self) -> u32 {
        self.frame_width_px
    }

    pub fn frame_height_px(&self) -> u32 {
        self.frame_height_px
    }

    pub fn frame_width_m(&self) -> f64 {
        self.pixel_pitch * self.frame_width_px as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SampleSource {
    Vision,
    Inclinometer,
    SimTruth,
}

impl fmt::Display for SampleSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SampleSource::Vision => "vision",
            SampleSource::Inclinometer => "inclinometer",
            SampleSource::SimTruth => "sim-truth",
        })
    }
}

impl FromStr for SampleSource {
    type Err = CalibError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vision" => Ok(SampleSource::Vision),
            "inclinometer" => Ok(SampleSource::Inclinometer),
            "sim-truth" => Ok(SampleSource::SimTruth),
            other => Err(CalibError::UnknownSource(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DisplacementSample {
    pub t: f64,
    pub dx: f64,
    pub dy: f64,
    pub source: SampleSource,
}

impl DisplacementSample {
    pub fn magnitude(&self) -> f64 {
        displacement_magnitude(self)
    }
}

pub fn displacement_magnitude(d: &DisplacementSample) -> f64 {
    d.dx.hypot(d.dy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceAnchor {
    pub cx0: f64,
    pub cy0: f64,
    pub t0: f64,
}

/// The earliest detection becomes the origin.
pub fn anchor_reference(s: &DetectionStream) -> Result<ReferenceAnchor, CalibError> {
    let first = s.records().first().ok_or(CalibError::EmptyStream)?;
    Ok(ReferenceAnchor { cx0: first.cx, cy0: first.cy, t0: first.t })
}

/// One vision sample per detection; frames without a detection stay gaps.
pub fn displacement(s: &DetectionStream, a: &ReferenceAnchor, c: &CalibrationProfile) -> Vec<DisplacementSample> {
    let pitch = c.pixel_pitch();
    s.records()
        .iter()
        .map(|d| DisplacementSample {
            t: d.t,
            dx: (d.cx - a.cx0) * pitch,
            dy: -(d.cy - a.cy0) * pitch,
            source: SampleSource::Vision,
        })
        .collect()
}

pub const DISPLACEMENT_HEADER: &str = "t_s,dx_m,dy_m,source";

pub fn displacement_csv(samples: &[DisplacementSample]) -> String {
    let mut out = String::from(DISPLACEMENT_HEADER);
    out.push('\n');
    for s in samples {
        out.push_str(&format!("{},{},{},{}\n", fmt6(s.t), fmt6(s.dx), fmt6(s.dy), s.source));
    }
    out
}

pub fn save_displacements(samples: &[DisplacementSample], path: &Path) -> Result<(), CalibError> {
    Ok(write_atomic(path, displacement_csv(samples).as_bytes())?)
}

pub fn parse_displacements(text: &str) -> Result<Vec<DisplacementSample>, CalibError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == DISPLACEMENT_HEADER => {}
        _ => return Err(CalibError::Row { row: 1, message: format!("expected header {DISPLACEMENT_HEADER:?}") }),
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let row = i + 1;
        let err = |message: String| CalibError::Row { row, message };
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(err(format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |k: usize| -> Result<f64, CalibError> {
            fields[k]
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("field {} is not a finite number: {:?}", k + 1, fields[k])))
        };
        let source = fields[3].parse::<SampleSource>().map_err(|e| err(e.to_string()))?;
        out.push(DisplacementSample { t: num(0)?, dx: num(1)?, dy: num(2)?, source });
    }
    Ok(out)
}

pub fn load_displacements(path: &Path) -> Result<Vec<DisplacementSample>, CalibError> {
    parse_displacements(&fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect_stream::{BoundingBox, Detection};
    use proptest::prelude::*;

    fn stream(points: &[(f64, f64, f64)]) -> DetectionStream {
        DetectionStream::new(
            points
                .iter()
                .map(|&(t, cx, cy)| Detection::new(t, BoundingBox::new(cx, cy, 40.0, 40.0).unwrap(), 1.0, 1.0).unwrap())
                .collect(),
        )
    }

    #[test]
    fn pitch_examples() {
        assert!((derive_pixel_pitch(6.136, 1920.0).unwrap() - 0.003196).abs() < 5e-7);
        assert_eq!(derive_pixel_pitch(1.0, 1000.0).unwrap(), 0.001);
        assert_eq!(CalibrationProfile::field().pixel_pitch(), 0.003196);
        assert!(derive_pixel_pitch(0.0, 10.0).is_err());
        assert!(derive_pixel_pitch(1.0, -1.0).is_err());
        let p = CalibrationProfile::from_measurement(6.136, 18.2, 1920, 1200).unwrap();
        assert!((p.frame_width_m() / 1920.0 - p.pixel_pitch()).abs() < 1e-9);
    }

    #[test]
    fn anchor_examples() {
        let s = stream(&[(0.2, 10.0, 10.0), (0.1, 960.0, 600.0)]);
        let a = anchor_reference(&s).unwrap();
        assert_eq!((a.cx0, a.cy0, a.t0), (960.0, 600.0, 0.1));
        assert!(matches!(anchor_reference(&DetectionStream::default()), Err(CalibError::EmptyStream)));
    }

    #[test]
    fn downward_pixel_motion_is_negative_dy() {
        let s = stream(&[(0.0, 960.0, 600.0), (0.1, 960.0, 795.9)]);
        let a = anchor_reference(&s).unwrap();
        let d = displacement(&s, &a, &CalibrationProfile::field());
        assert_eq!((d[0].dx, d[0].dy), (0.0, 0.0));
        assert!((d[1].dy + 0.626).abs() < 0.001);
        assert!((d[1].dy + 195.9 * 0.003196).abs() < 1e-9);
    }

    #[test]
    fn magnitude_examples() {
        let z = DisplacementSample { t: 0.0, dx: 0.0, dy: 0.0, source: SampleSource::Vision };
        assert_eq!(z.magnitude(), 0.0);
        let s = DisplacementSample { dx: 0.3, dy: 0.4, ..z };
        assert!((s.magnitude() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn csv_format_and_roundtrip() {
        let s = vec![
            DisplacementSample { t: 0.0, dx: 0.0, dy: 0.0, source: SampleSource::Vision },
            DisplacementSample { t: 0.1, dx: 0.25, dy: -0.6260964, source: SampleSource::Inclinometer },
        ];
        let text = displacement_csv(&s);
        assert_eq!(text, "t_s,dx_m,dy_m,source\n0.000000,0.000000,0.000000,vision\n0.100000,0.250000,-0.626096,inclinometer\n");
        let back = parse_displacements(&text).unwrap();
        assert_eq!(back[1].dy, -0.626096);
        assert!(parse_displacements("t_s,dx_m,dy_m,source\n0,1,x,vision\n").is_err());
        assert!(parse_displacements("t_s,dx_m,dy_m,source\n0,1,2,radar\n").is_err());
        assert!(parse_displacements("bad header\n").is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn linear_and_scale_equivariant(
            pts in prop::collection::vec((0.0..1900.0f64, 0.0..1100.0f64), 1..20),
            pitch in 0.0005..0.01f64,
            k in 0.1..10.0f64,
        ) {
            let s = stream(&pts.iter().enumerate().map(|(i, &(x, y))| (i as f64 * 0.1, x, y)).collect::<Vec<_>>());
            let a = anchor_reference(&s).unwrap();
            let c1 = CalibrationProfile::new(pitch, 18.2, 1920, 1200).unwrap();
            let c2 = CalibrationProfile::new(pitch * k, 18.2, 1920, 1200).unwrap();
            let d1 = displacement(&s, &a, &c1);
            let d2 = displacement(&s, &a, &c2);
            prop_assert_eq!((d1[0].dx, d1[0].dy), (0.0, 0.0));
            for (p, q) in d1.iter().zip(&d2) {
                prop_assert!((q.dx - k * p.dx).abs() <= 1e-9 * (1.0 + p.dx.abs() * k));
                prop_assert!((q.dy - k * p.dy).abs() <= 1e-9 * (1.0 + p.dy.abs() * k));
            }
            // doubling the pixel offsets doubles the metric output
            let doubled = stream(&pts.iter().enumerate()
                .map(|(i, &(x, y))| (i as f64 * 0.1, 2.0 * x - pts[0].0, 2.0 * y - pts[0].1))
                .collect::<Vec<_>>());
            let dd = displacement(&doubled, &anchor_reference(&doubled).unwrap(), &c1);
            for (p, q) in d1.iter().zip(&dd) {
                prop_assert!((q.dx - 2.0 * p.dx).abs() < 1e-9 && (q.dy - 2.0 * p.dy).abs() < 1e-9);
            }
        }

        #[test]
        fn magnitude_matches_components(dx in -5.0..5.0f64, dy in -5.0..5.0f64) {
            let s = DisplacementSample { t: 0.0, dx, dy, source: SampleSource::Vision };
            prop_assert!((displacement_magnitude(&s) - (dx * dx + dy * dy).sqrt()).abs() < 1e-12);
        }
    }
}
