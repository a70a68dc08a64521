use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use boomtrack::calib::{anchor_reference, displacement, load_displacements, save_displacements, CalibrationProfile};
use boomtrack::detect_stream::{best_per_frame, load_detections, save_detections, Detection};
use boomtrack::eval::{load_eval_detections, load_ground_truth, map_at, metrics_csv, EvalConfig};
use boomtrack::fiducial::{detect_frame_files, DetectorParams, MarkerDictionary};
use boomtrack::frames::{list_frames, load_image, save_image};
use boomtrack::incline::{characterize_noise, load_readings, readings_to_displacement, AngleAxis, ArcMode, NoiseReference};
use boomtrack::io_util::{fmt6, write_atomic};
use boomtrack::sim::{run_scenario, ScenarioConfig};
use boomtrack::validate::{save_report, validate_streams, ErrorAxis, Outcome, DEFAULT_MAX_LAG, DEFAULT_TOLERANCE};

const FIELD_RADIUS: f64 = 18.2;

#[derive(Parser)]
#[command(name = "boomtrack", version, about = "Sprayer boom tip displacement from fiducial video and inclinometer logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a simulated scenario: frames, truth, ideal detections, sensor trace.
    Simulate(SimulateArgs),
    /// Find fiducial markers in a directory of frames.
    Detect(DetectArgs),
    /// Turn a detection stream into metric displacement.
    Quantify(QuantifyArgs),
    /// Convert an inclinometer trace to displacement, or characterize its noise.
    Incline(InclineArgs),
    /// Compare vision and sensor displacement against a tolerance.
    Validate(ValidateArgs),
    /// Precision, recall and AP of detections against ground truth.
    Eval(EvalArgs),
    /// Generate a marker dictionary.
    Dict(DictArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; replaced as a whole on success.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DetectArgs {
    #[arg(long)]
    dict: PathBuf,
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Keep only this marker id.
    #[arg(long)]
    marker_id: Option<u32>,
}

#[derive(Args)]
struct QuantifyArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Meters per pixel at the target depth.
    #[arg(long, default_value_t = 0.003196)]
    pitch: f64,
    #[arg(long, default_value_t = 0.5)]
    min_conf: f64,
    #[arg(long)]
    marker_id: Option<u32>,
}

#[derive(Clone, Copy, ValueEnum)]
enum AxisArg {
    Primary,
    Secondary,
}

#[derive(Args)]
struct InclineArgs {
    /// Sensor CSV (t_s,angle_deg[,angle2_deg]); repeat with --noise for several trials.
    #[arg(long, required = true)]
    sensor: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Boom radius, meters.
    #[arg(long)]
    radius: Option<f64>,
    /// Use the fixed 1.046 ft/deg conversion of the 18.2 m field boom.
    #[arg(long)]
    paper_compat: bool,
    #[arg(long, value_enum, default_value_t = AxisArg::Primary)]
    axis: AxisArg,
    /// Report stationary noise bounds instead of displacement.
    #[arg(long)]
    noise: bool,
    /// Known true angle for --noise; defaults to each trial's mean.
    #[arg(long, allow_negative_numbers = true)]
    reference_deg: Option<f64>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    vision: PathBuf,
    #[arg(long)]
    sensor: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
    tolerance: f64,
    /// Longest allowed age of the paired sensor sample, seconds.
    #[arg(long, default_value_t = DEFAULT_MAX_LAG)]
    max_lag: f64,
    /// Compare full displacement magnitude instead of the vertical component.
    #[arg(long)]
    magnitude: bool,
    /// Frame directory; frames with no vision sample are counted as gaps.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dets: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated IoU thresholds.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.5, 0.9])]
    iou: Vec<f64>,
}

#[derive(Args)]
struct DictArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 6)]
    grid: usize,
    #[arg(long, default_value_t = 50)]
    count: usize,
    #[arg(long, default_value_t = 3)]
    min_hamming: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also render every marker as PGM into this directory.
    #[arg(long)]
    render: Option<PathBuf>,
    #[arg(long, default_value_t = 64)]
    side: u32,
}

fn main() -> ExitCode {
    ExitCode::from(execute(std::env::args_os()))
}

/// 0 success, 1 validation failed, 2 usage or I/O error.
fn execute<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

/// Ok(false) means the run worked but validation failed.
fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Simulate(a) => simulate(a).map(|_| true),
        Command::Detect(a) => detect(a).map(|_| true),
        Command::Quantify(a) => quantify(a).map(|_| true),
        Command::Incline(a) => incline(a).map(|_| true),
        Command::Validate(a) => validate(a),
        Command::Eval(a) => eval(a).map(|_| true),
        Command::Dict(a) => dict(a).map(|_| true),
    }
}

fn require_file(p: &Path) -> Result<()> {
    if !p.is_file() {
        bail!("input file {} does not exist", p.display());
    }
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<()> {
    require_file(&a.config)?;
    let cfg = ScenarioConfig::load(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
    let parent = match a.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent)?;
    let name = a.out.file_name().context("output path has no directory name")?.to_string_lossy().into_owned();
    let staging = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let out = match run_scenario(&cfg, a.seed, &staging) {
        Ok(o) => o,
        Err(e) => {
            let _ = fs::remove_dir_all(&staging);
            return Err(e).context("simulation failed");
        }
    };
    if a.out.exists() {
        fs::remove_dir_all(&a.out).with_context(|| format!("replacing {}", a.out.display()))?;
    }
    fs::rename(&staging, &a.out)?;
    if !out.out_of_frame.is_empty() {
        eprintln!("warning: marker out of frame in {} of {} frames", out.out_of_frame.len(), out.frame_paths.len());
    }
    eprintln!(
        "simulated {} frames, {} sensor readings into {}",
        out.frame_paths.len(),
        out.sensor.len(),
        a.out.display()
    );
    Ok(())
}

fn load_dict(p: &Path) -> Result<MarkerDictionary> {
    require_file(p)?;
    let text = fs::read_to_string(p)?;
    MarkerDictionary::from_text(&text).with_context(|| format!("reading dictionary {}", p.display()))
}

fn detect(a: DetectArgs) -> Result<()> {
    let dict = load_dict(&a.dict)?;
    let paths = list_frames(&a.images).with_context(|| format!("listing {}", a.images.display()))?;
    if paths.is_empty() {
        bail!("no .pgm/.ppm frames in {}", a.images.display());
    }
    let frames = detect_frame_files(&paths, &dict, &DetectorParams::default())?;
    let mut records: Vec<Detection> = frames
        .iter()
        .flat_map(|f| f.detections.iter().copied())
        .filter(|d| a.marker_id.is_none_or(|id| d.class_id == id))
        .collect();
    records.sort_by(|x, y| x.t.total_cmp(&y.t).then(x.class_id.cmp(&y.class_id)));
    let hit = frames.iter().filter(|f| f.detections.iter().any(|d| a.marker_id.is_none_or(|id| d.class_id == id))).count();
    save_detections(&records, &a.out)?;
    eprintln!("{} detections in {hit} of {} frames", records.len(), frames.len());
    Ok(())
}

fn quantify(a: QuantifyArgs) -> Result<()> {
    require_file(&a.dets)?;
    if !(0.0..=1.0).contains(&a.min_conf) {
        bail!("--min-conf must lie in [0, 1], got {}", a.min_conf);
    }
    let profile = CalibrationProfile::new(a.pitch, FIELD_RADIUS, 1920, 1200).context("invalid --pitch")?;
    let mut stream = load_detections(&a.dets).with_context(|| format!("reading {}", a.dets.display()))?;
    if let Some(id) = a.marker_id {
        let kept: Vec<Detection> = stream.records().iter().filter(|d| d.class_id == id).copied().collect();
        stream = boomtrack::detect_stream::DetectionStream::new(kept);
    }
    let best = best_per_frame(&stream, a.min_conf);
    let samples = match anchor_reference(&best) {
        Ok(anchor) => displacement(&best, &anchor, &profile),
        Err(_) => {
            eprintln!("warning: no detection clears --min-conf {}; writing an empty stream", a.min_conf);
            Vec::new()
        }
    };
    save_displacements(&samples, &a.out)?;
    Ok(())
}

fn incline(a: InclineArgs) -> Result<()> {
    for p in &a.sensor {
        require_file(p)?;
    }
    let load = |p: &PathBuf| load_readings(p).with_context(|| format!("reading {}", p.display()));
    if a.noise {
        let trials = a.sensor.iter().map(load).collect::<Result<Vec<_>>>()?;
        let reference = a.reference_deg.map_or(NoiseReference::TrialMean, NoiseReference::Known);
        let p = characterize_noise(&trials, reference)?;
        let text = format!(
            "min_deflection_deg={}\nmax_deflection_deg={}\ntrial_count={}\ntrial_duration_s={}\n",
            fmt6(p.min_deflection),
            fmt6(p.max_deflection),
            p.trial_count,
            fmt6(p.trial_duration)
        );
        write_atomic(&a.out, text.as_bytes())?;
        return Ok(());
    }
    if a.sensor.len() != 1 {
        bail!("exactly one --sensor file is needed unless --noise is given");
    }
    let (mode, radius) = if a.paper_compat {
        match a.radius {
            Some(r) if r != FIELD_RADIUS => bail!("--paper-compat encodes the {FIELD_RADIUS} m boom; got --radius {r}"),
            _ => (ArcMode::Legacy, FIELD_RADIUS),
        }
    } else {
        (ArcMode::Exact, a.radius.unwrap_or(FIELD_RADIUS))
    };
    let axis = match a.axis {
        AxisArg::Primary => AngleAxis::Primary,
        AxisArg::Secondary => AngleAxis::Secondary,
    };
    let readings = load(&a.sensor[0])?;
    let samples = readings_to_displacement(&readings, radius, mode, axis)?;
    save_displacements(&samples, &a.out)?;
    Ok(())
}

/// Frames whose timestamp has no vision sample.
fn count_gaps(dir: &Path, vision_times: &[f64]) -> Result<usize> {
    let mut gaps = 0;
    for p in list_frames(dir)? {
        let t = load_image(&p)?.timestamp();
        if !vision_times.iter().any(|v| (v - t).abs() < 1e-6) {
            gaps += 1;
        }
    }
    Ok(gaps)
}

fn validate(a: ValidateArgs) -> Result<bool> {
    require_file(&a.vision)?;
    require_file(&a.sensor)?;
    if !(a.tolerance > 0.0) {
        bail!("--tolerance must be positive");
    }
    if !(a.max_lag >= 0.0) {
        bail!("--max-lag must be non-negative");
    }
    let mut vision = load_displacements(&a.vision).with_context(|| format!("reading {}", a.vision.display()))?;
    let mut sensor = load_displacements(&a.sensor).with_context(|| format!("reading {}", a.sensor.display()))?;
    vision.sort_by(|x, y| x.t.total_cmp(&y.t));
    sensor.sort_by(|x, y| x.t.total_cmp(&y.t));
    let gaps = match &a.images {
        Some(dir) => count_gaps(dir, &vision.iter().map(|s| s.t).collect::<Vec<_>>())?,
        None => 0,
    };
    let axis = if a.magnitude { ErrorAxis::Magnitude } else { ErrorAxis::Vertical };
    let outcome = validate_streams(&vision, &sensor, a.max_lag, a.tolerance, axis, gaps)?;
    save_report(&outcome, &a.out)?;
    match &outcome {
        Outcome::Report(r) => eprintln!(
            "{} pairs, max error {} m, rmse {} m, {} gaps: {}",
            r.pairs.len(),
            fmt6(r.max_error),
            fmt6(r.rmse),
            r.gap_count,
            if r.pass { "PASS" } else { "FAIL" }
        ),
        Outcome::NoPairs { gap_count, .. } => eprintln!("no vision samples to compare ({gap_count} gaps): FAIL"),
    }
    Ok(outcome.pass())
}

fn eval(a: EvalArgs) -> Result<()> {
    require_file(&a.dets)?;
    require_file(&a.gt)?;
    let cfg = EvalConfig::new(a.iou.clone())?;
    let dets = load_eval_detections(&a.dets).with_context(|| format!("reading {}", a.dets.display()))?;
    let gt = load_ground_truth(&a.gt).with_context(|| format!("reading {}", a.gt.display()))?;
    let results = map_at(&dets, &gt, &cfg)?;
    write_atomic(&a.out, metrics_csv(&results).as_bytes())?;
    Ok(())
}

fn dict(a: DictArgs) -> Result<()> {
    let d = MarkerDictionary::generate(a.grid, a.count, a.min_hamming, a.seed)?;
    write_atomic(&a.out, d.to_text().as_bytes())?;
    if let Some(dir) = &a.render {
        fs::create_dir_all(dir)?;
        let cell = a.side / (a.grid as u32 + 2);
        for id in 0..d.len() {
            let f = d.render(id, a.side, 2 * cell.max(1))?;
            save_image(&f, &dir.join(format!("marker_{id:03}.pgm")))?;
        }
    }
    Ok(())
}
