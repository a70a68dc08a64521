use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{command_at, tip_position, Background, BoomModel, CameraModel, CorruptionSpec, MarkerSprite, MotionCommand, SimError};
use crate::calib::{DisplacementSample, SampleSource};
use crate::detect_stream::{save_detections, BoundingBox, Detection};
use crate::fiducial::MarkerDictionary;
use crate::frames::save_image;
use crate::incline::{save_readings, InclinometerReading, NoiseProfile};
use crate::io_util::{fmt6, write_atomic};

/// Everything a simulated run needs, read from `key = value` text.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub boom: BoomModel,
    pub frame_rate: f64,
    pub sensor_rate: f64,
    pub duration: f64,
    pub pixel_pitch: f64,
    pub depth: f64,
    pub frame_width: u32,
    pub frame_height: u32,
    pub marker_side_px: Option<u32>,
    pub marker_size_m: Option<f64>,
    pub marker_id: usize,
    pub dict_grid: usize,
    pub dict_count: usize,
    pub dict_min_hamming: u32,
    pub dict_seed: u64,
    pub commands: Vec<MotionCommand>,
    pub corruption: CorruptionSpec,
    pub noise: NoiseProfile,
    pub background: Background,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            boom: BoomModel::lab(),
            frame_rate: 5.0,
            sensor_rate: 10.0,
            duration: 20.0,
            pixel_pitch: 0.003196,
            depth: 3.0,
            frame_width: 1920,
            frame_height: 1200,
            marker_side_px: None,
            marker_size_m: None,
            marker_id: 0,
            dict_grid: 6,
            dict_count: 50,
            dict_min_hamming: 3,
            dict_seed: 0,
            commands: Vec::new(),
            corruption: CorruptionSpec::none(),
            noise: NoiseProfile::none(),
            background: Background::Crop,
        }
    }
}

const DEFAULT_MARKER_SIDE: u32 = 64;

impl ScenarioConfig {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        let mut c = Self::default();
        let (mut length, mut pivot, mut vrange, mut hrange) =
            (c.boom.length, c.boom.pivot_height, c.boom.vertical_range, c.boom.horizontal_range);
        let (mut blur, mut exposure, mut rotation) = (0.0, 0.0, 0.0);
        let (mut nmin, mut nmax) = (0.0, 0.0);
        // lifts need the final boom geometry, so they are resolved last
        let mut lifts: Vec<(usize, f64, f64, f64)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |message: String| SimError::Config { line, message };
            let (key, value) = content.split_once('=').ok_or_else(|| err(format!("expected key = value, found {content:?}")))?;
            let (key, value) = (key.trim(), value.trim());
            let num = || value.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| err(format!("{key}: not a number: {value:?}")));
            let int = || value.parse::<u64>().map_err(|_| err(format!("{key}: not a non-negative integer: {value:?}")));
            let triple = || -> Result<(f64, f64, f64), SimError> {
                let parts: Vec<f64> = value
                    .split(',')
                    .map(|p| p.trim().parse::<f64>().ok().filter(|v| v.is_finite()))
                    .collect::<Option<_>>()
                    .ok_or_else(|| err(format!("{key}: expected three numbers, found {value:?}")))?;
                match parts[..] {
                    [a, b, c] => Ok((a, b, c)),
                    _ => Err(err(format!("{key}: expected three numbers, found {value:?}"))),
                }
            };
            match key {
                "boom_length" => length = num()?,
                "pivot_height" => pivot = num()?,
                "vertical_range" => vrange = num()?,
                "horizontal_range" => hrange = num()?,
                "frame_rate" => c.frame_rate = num()?,
                "sensor_rate" => c.sensor_rate = num()?,
                "duration" => c.duration = num()?,
                "pixel_pitch" => c.pixel_pitch = num()?,
                "depth" => c.depth = num()?,
                "frame_width" => c.frame_width = int()? as u32,
                "frame_height" => c.frame_height = int()? as u32,
                "marker_side_px" => c.marker_side_px = Some(int()? as u32),
                "marker_size_m" => c.marker_size_m = Some(num()?),
                "marker_id" => c.marker_id = int()? as usize,
                "dict_grid" => c.dict_grid = int()? as usize,
                "dict_count" => c.dict_count = int()? as usize,
                "dict_min_hamming" => c.dict_min_hamming = int()? as u32,
                "dict_seed" => c.dict_seed = int()?,
                "command" => {
                    let (t, angle, offset) = triple()?;
                    c.commands.push(MotionCommand::new(t, angle, offset));
                }
                "lift" => {
                    let (t, vertical, offset) = triple()?;
                    lifts.push((line, t, vertical, offset));
                    c.commands.push(MotionCommand::new(t, f64::NAN, offset));
                }
                "blur_sigma" => blur = num()?,
                "exposure" => exposure = num()?,
                "rotation_deg" => rotation = num()?,
                "noise_min_deg" => nmin = num()?,
                "noise_max_deg" => nmax = num()?,
                "background" => {
                    c.background = match value {
                        "crop" => Background::Crop,
                        "plain" => Background::Plain(200),
                        v => match v.strip_prefix("plain:").and_then(|g| g.parse::<u8>().ok()) {
                            Some(g) => Background::Plain(g),
                            None => return Err(err(format!("unknown background {v:?} (crop, plain, plain:<0-255>)"))),
                        },
                    }
                }
                other => return Err(err(format!("unknown key {other:?}"))),
            }
        }
        c.boom = BoomModel::new(length, pivot, vrange, hrange)?;
        let mut lift_iter = lifts.into_iter();
        for cmd in c.commands.iter_mut().filter(|m| m.vertical_angle.is_nan()) {
            let (line, _, vertical, _) = lift_iter.next().expect("one lift per placeholder");
            cmd.vertical_angle = c.boom.angle_for(vertical).map_err(|e| SimError::Config { line, message: e.to_string() })?;
        }
        c.corruption = CorruptionSpec::new(blur, exposure, rotation, 0)?;
        if nmin > nmax {
            return Err(SimError::Scenario(format!("noise_min_deg {nmin} exceeds noise_max_deg {nmax}")));
        }
        c.noise = NoiseProfile { min_deflection: nmin, max_deflection: nmax, trial_count: 1, trial_duration: 0.0 };
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn camera(&self) -> Result<CameraModel, SimError> {
        CameraModel::new(self.pixel_pitch, self.frame_width, self.frame_height, self.frame_rate, self.depth)
    }

    pub fn frame_count(&self) -> usize {
        (self.duration * self.frame_rate + 1e-9).floor() as usize
    }

    pub fn sensor_count(&self) -> usize {
        (self.duration * self.sensor_rate + 1e-9).floor() as usize
    }

    /// Marker square side in pixels, a whole number of cells.
    pub fn marker_side(&self) -> Result<u32, SimError> {
        let cells = self.dict_grid as u32 + 2;
        match (self.marker_side_px, self.marker_size_m) {
            (Some(_), Some(_)) => Err(SimError::Scenario("set marker_side_px or marker_size_m, not both".into())),
            (Some(s), None) => {
                if s == 0 || s % cells != 0 {
                    Err(SimError::Scenario(format!("marker_side_px {s} is not a multiple of {cells} cells")))
                } else {
                    Ok(s)
                }
            }
            (None, Some(m)) => {
                let n = (m / self.pixel_pitch / cells as f64).round().max(1.0) as u32;
                Ok(n * cells)
            }
            (None, None) => Ok(DEFAULT_MARKER_SIDE.div_ceil(cells) * cells),
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        self.camera()?;
        if !(self.sensor_rate > 0.0) {
            return Err(SimError::Scenario(format!("sensor_rate must be positive, got {}", self.sensor_rate)));
        }
        if self.frame_count() == 0 {
            return Err(SimError::Scenario("duration covers no frames".into()));
        }
        if self.marker_id >= self.dict_count {
            return Err(SimError::Scenario(format!("marker_id {} not in a {}-id dictionary", self.marker_id, self.dict_count)));
        }
        if self.commands.windows(2).any(|w| w[1].t < w[0].t) {
            return Err(SimError::Scenario("commands must be in time order".into()));
        }
        for cmd in &self.commands {
            if !(cmd.t >= 0.0) {
                return Err(SimError::Scenario(format!("command time {} is negative", cmd.t)));
            }
            tip_position(&self.boom, cmd)?;
        }
        let side = self.marker_side()?;
        let sprite = side + 4 * (side / (self.dict_grid as u32 + 2));
        if sprite >= self.frame_width.min(self.frame_height) {
            return Err(SimError::Scenario(format!("marker sprite of {sprite} px does not fit the frame")));
        }
        Ok(())
    }
}

/// What a run produced, kept in memory alongside the files.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioOutput {
    pub frame_paths: Vec<PathBuf>,
    pub truth: Vec<DisplacementSample>,
    pub detections: Vec<Detection>,
    pub sensor: Vec<InclinometerReading>,
    /// Frame times at which the marker centre projected outside the frame.
    pub out_of_frame: Vec<f64>,
    pub dictionary: MarkerDictionary,
}

pub fn frame_name(k: usize) -> String {
    format!("frame_{k:05}.ppm")
}

pub fn truth_csv(truth: &[DisplacementSample]) -> String {
    let mut out = String::from("t_s,dx_m,dy_m\n");
    for s in truth {
        out.push_str(&format!("{},{},{}\n", fmt6(s.t), fmt6(s.dx), fmt6(s.dy)));
    }
    out
}

/// Render every frame and write `frames/`, `truth.csv`,
/// `detections_truth.jsonl`, `sensor.csv` and `dictionary.txt` into `out`.
pub fn run_scenario(cfg: &ScenarioConfig, seed: u64, out: &Path) -> Result<ScenarioOutput, SimError> {
    cfg.validate()?;
    let cam = cfg.camera()?;
    let dict = MarkerDictionary::generate(cfg.dict_grid, cfg.dict_count, cfg.dict_min_hamming, cfg.dict_seed)?;
    let side = cfg.marker_side()?;
    let cell = side / (cfg.dict_grid as u32 + 2);
    let sprite = MarkerSprite { image: dict.render(cfg.marker_id, side, 2 * cell)?, marker_side: side };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background_seed: u64 = rng.random();
    let background = cfg.background.texture(cam.width, cam.height, background_seed);

    let (h0, v0) = tip_position(&cfg.boom, &command_at(&cfg.commands, 0.0))?;
    let n = cfg.frame_count();
    let mut truth = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut detections = Vec::new();
    let mut out_of_frame = Vec::new();
    for k in 0..n {
        let t = k as f64 / cfg.frame_rate;
        let (h, v) = tip_position(&cfg.boom, &command_at(&cfg.commands, t))?;
        truth.push(DisplacementSample { t, dx: h - h0, dy: v - v0, source: SampleSource::SimTruth });
        match cam.project(h, v) {
            Ok(p) => {
                let corners = sprite.corners(p, cfg.corruption.rotation);
                let half_w = corners.iter().map(|q| (q.x - p.x).abs()).fold(0.0, f64::max);
                let half_h = corners.iter().map(|q| (q.y - p.y).abs()).fold(0.0, f64::max);
                let mut d = Detection::new(t, BoundingBox::new(p.x, p.y, 2.0 * half_w, 2.0 * half_h)?, 1.0, 1.0)?;
                d.class_id = cfg.marker_id as u32;
                detections.push(d);
                positions.push(Some(p));
            }
            Err(SimError::OutOfFrame { .. }) => {
                out_of_frame.push(t);
                positions.push(None);
            }
            Err(e) => return Err(e),
        }
    }

    let ns = cfg.sensor_count();
    let mut sensor = Vec::with_capacity(ns);
    for k in 0..ns {
        let t = k as f64 / cfg.sensor_rate;
        let (lo, hi) = (cfg.noise.min_deflection, cfg.noise.max_deflection);
        let noise = if lo < hi { rng.random_range(lo..=hi) } else { lo };
        sensor.push(InclinometerReading { t, angle: command_at(&cfg.commands, t).vertical_angle + noise, angle2: None });
    }

    let frames_dir = out.join("frames");
    fs::create_dir_all(&frames_dir)?;
    let frame_paths: Vec<PathBuf> = (0..n).map(|k| frames_dir.join(frame_name(k))).collect();
    (0..n).into_par_iter().try_for_each(|k| -> Result<(), SimError> {
        let f = super::render_scene(&cam, &sprite, positions[k], &background, &cfg.corruption)?;
        let f = f.with_timestamp(truth[k].t)?;
        save_image(&f, &frame_paths[k])?;
        Ok(())
    })?;

    write_atomic(&out.join("truth.csv"), truth_csv(&truth).as_bytes())?;
    save_detections(&detections, &out.join("detections_truth.jsonl"))?;
    save_readings(&sensor, &out.join("sensor.csv")).map_err(|e| SimError::Scenario(e.to_string()))?;
    write_atomic(&out.join("dictionary.txt"), dict.to_text().as_bytes())?;

    Ok(ScenarioOutput { frame_paths, truth, detections, sensor, out_of_frame, dictionary: dict })
}
