//! Sprayer boom tip displacement from camera frames, cross-checked against
//! inclinometer telemetry.

pub mod fiducial;
pub mod frames;
pub mod io_util;
pub mod detect_stream;
pub mod eval;
pub mod calib;
pub mod incline;
pub mod validate;
pub mod sim;
