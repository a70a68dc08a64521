//! Kinematic boom simulator: tip motion, pinhole projection, synthetic frames
//! and noisy inclinometer traces.

mod scenario;
mod scene;

pub use scenario::{frame_name, run_scenario, truth_csv, ScenarioConfig, ScenarioOutput};
pub use scene::{gaussian_blur, render_scene, Background, CorruptionSpec, MarkerSprite};

use thiserror::Error;

use crate::fiducial::Point;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("boom parameter {what} must be positive, got {value}")]
    BadBoom { what: &'static str, value: f64 },
    #[error("vertical displacement {value:.4} m outside +/-{limit} m")]
    VerticalRange { value: f64, limit: f64 },
    #[error("horizontal offset {value:.4} m outside +/-{limit} m")]
    HorizontalRange { value: f64, limit: f64 },
    #[error("target projects to ({cx:.1}, {cy:.1}), outside the {width}x{height} frame")]
    OutOfFrame { cx: f64, cy: f64, width: u32, height: u32 },
    #[error("camera parameter {what} invalid: {value}")]
    BadCamera { what: &'static str, value: f64 },
    #[error("corruption {what} = {value} outside [{lo}, {hi}]")]
    Corruption { what: &'static str, value: f64, lo: f64, hi: f64 },
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("{0}")]
    Scenario(String),
    #[error(transparent)]
    Fiducial(#[from] crate::fiducial::FiducialError),
    #[error(transparent)]
    Frame(#[from] crate::frames::FrameError),
    #[error(transparent)]
    Stream(#[from] crate::detect_stream::StreamError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoomModel {
    pub length: f64,
    pub pivot_height: f64,
    /// Symmetric limit on tip vertical displacement, meters.
    pub vertical_range: f64,
    /// Symmetric limit on horizontal articulation, meters.
    pub horizontal_range: f64,
}

impl BoomModel {
    pub fn new(length: f64, pivot_height: f64, vertical_range: f64, horizontal_range: f64) -> Result<Self, SimError> {
        for (what, value) in [("length", length), ("vertical_range", vertical_range), ("horizontal_range", horizontal_range)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SimError::BadBoom { what, value });
            }
        }
        if !(pivot_height >= 0.0) {
            return Err(SimError::BadBoom { what: "pivot_height", value: pivot_height });
        }
        Ok(Self { length, pivot_height, vertical_range, horizontal_range })
    }

    /// 3 m arm on a 1.7 m stand.
    pub fn lab() -> Self {
        Self { length: 3.0, pivot_height: 1.7, vertical_range: 1.2, horizontal_range: 3.0 }
    }

    /// Half of the 36.4 m field boom.
    pub fn field() -> Self {
        Self { length: 18.2, pivot_height: 1.7, vertical_range: 2.0, horizontal_range: 3.0 }
    }

    /// Angle (degrees) that lifts the tip by `vertical` meters.
    pub fn angle_for(&self, vertical: f64) -> Result<f64, SimError> {
        if vertical.abs() > self.vertical_range.min(self.length) {
            return Err(SimError::VerticalRange { value: vertical, limit: self.vertical_range });
        }
        Ok((vertical / self.length).asin().to_degrees())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionCommand {
    pub t: f64,
    pub vertical_angle: f64,
    pub horizontal_offset: f64,
}

impl MotionCommand {
    pub fn new(t: f64, vertical_angle: f64, horizontal_offset: f64) -> Self {
        Self { t, vertical_angle, horizontal_offset }
    }

    pub fn rest() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }
}

/// Command in force at `t`: the last one issued at or before `t`, or rest.
pub fn command_at(commands: &[MotionCommand], t: f64) -> MotionCommand {
    commands
        .iter()
        .take_while(|c| c.t <= t + 1e-9)
        .last()
        .copied()
        .unwrap_or_else(MotionCommand::rest)
}

/// Tip (horizontal, vertical) displacement from the rest pose.
pub fn tip_position(b: &BoomModel, cmd: &MotionCommand) -> Result<(f64, f64), SimError> {
    let vertical = b.length * cmd.vertical_angle.to_radians().sin();
    if vertical.abs() > b.vertical_range + 1e-12 {
        return Err(SimError::VerticalRange { value: vertical, limit: b.vertical_range });
    }
    if cmd.horizontal_offset.abs() > b.horizontal_range + 1e-12 {
        return Err(SimError::HorizontalRange { value: cmd.horizontal_offset, limit: b.horizontal_range });
    }
    Ok((cmd.horizontal_offset, vertical))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraModel {
    pub pixel_pitch: f64,
    pub principal: Point,
    pub width: u32,
    pub height: u32,
    pub frame_rate: f64,
    pub depth: f64,
}

impl CameraModel {
    /// Principal point at the frame centre.
    pub fn new(pixel_pitch: f64, width: u32, height: u32, frame_rate: f64, depth: f64) -> Result<Self, SimError> {
        for (what, value) in [("pixel_pitch", pixel_pitch), ("frame_rate", frame_rate), ("depth", depth)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(SimError::BadCamera { what, value });
            }
        }
        if width == 0 || height == 0 {
            return Err(SimError::BadCamera { what: "frame size", value: 0.0 });
        }
        Ok(Self {
            pixel_pitch,
            principal: Point::new(width as f64 / 2.0, height as f64 / 2.0),
            width,
            height,
            frame_rate,
            depth,
        })
    }

    /// Pixels per meter at the target depth.
    pub fn scale(&self) -> f64 {
        1.0 / self.pixel_pitch
    }

    /// Image position of a tip displacement, image y down.
    pub fn project(&self, horizontal: f64, vertical: f64) -> Result<Point, SimError> {
        let p = self.project_unchecked(horizontal, vertical);
        if p.x < 0.0 || p.y < 0.0 || p.x >= self.width as f64 || p.y >= self.height as f64 {
            return Err(SimError::OutOfFrame { cx: p.x, cy: p.y, width: self.width, height: self.height });
        }
        Ok(p)
    }

    pub fn project_unchecked(&self, horizontal: f64, vertical: f64) -> Point {
        Point::new(
            self.principal.x + horizontal / self.pixel_pitch,
            self.principal.y - vertical / self.pixel_pitch,
        )
    }

    pub fn unproject(&self, p: Point) -> (f64, f64) {
        ((p.x - self.principal.x) * self.pixel_pitch, (self.principal.y - p.y) * self.pixel_pitch)
    }
}
