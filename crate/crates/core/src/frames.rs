//! Raster frames, binary PGM/PPM I/O and the few pixel transforms the
//! pipeline needs (luma conversion, block-mean reduction).
//!
//! Image coordinates are continuous: pixel `(x, y)` covers the unit square
//! `[x, x+1) x [y, y+1)`, so its center sits at `(x + 0.5, y + 0.5)`.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::io_util::write_atomic;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("image file not found: {0}")]
    Missing(PathBuf),
    #[error("malformed image header: {0}")]
    MalformedHeader(String),
    #[error("truncated pixel data: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid frame: {0}")]
    Invalid(String),
    #[error("malformed sidecar metadata {path}: {reason}")]
    MalformedMeta { path: PathBuf, reason: String },
    #[error("reduction factor {factor} exceeds frame dimensions {width}x{height}")]
    FactorTooLarge { factor: u32, width: u32, height: u32 },
    #[error("reduction factor must be at least 1")]
    ZeroFactor,
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A timestamped 8-bit raster, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    width: u32,
    height: u32,
    channels: u8,
    pixels: Vec<u8>,
    timestamp: f64,
}

impl Frame {
    pub fn new(width: u32, height: u32, channels: u8, pixels: Vec<u8>) -> Result<Self, FrameError> {
        if width == 0 || height == 0 {
            return Err(FrameError::Invalid(format!("zero dimension {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(FrameError::Invalid(format!("unsupported channel count {channels}")));
        }
        let expected = width as usize * height as usize * channels as usize;
        if pixels.len() != expected {
            return Err(FrameError::Invalid(format!(
                "buffer holds {} samples, {width}x{height}x{channels} needs {expected}",
                pixels.len()
            )));
        }
        Ok(Self { width, height, channels, pixels, timestamp: 0.0 })
    }

    /// Uniform frame filled with `value` in every channel.
    pub fn filled(width: u32, height: u32, channels: u8, value: u8) -> Result<Self, FrameError> {
        let n = width as usize * height as usize * channels as usize;
        Self::new(width, height, channels, vec![value; n])
    }

    pub fn with_timestamp(mut self, t: f64) -> Result<Self, FrameError> {
        if !t.is_finite() || t < 0.0 {
            return Err(FrameError::Invalid(format!("timestamp {t} must be finite and non-negative")));
        }
        self.timestamp = t;
        Ok(self)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn channels(&self) -> u8 {
        self.channels
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    /// Sample at `(x, y)` in channel `c`. Panics when out of bounds.
    #[inline]
    pub fn get(&self, x: u32, y: u32, c: u8) -> u8 {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.pixels[idx]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, c: u8, v: u8) {
        let idx = (y as usize * self.width as usize + x as usize) * self.channels as usize + c as usize;
        self.pixels[idx] = v;
    }
}

/// Integer divisor applied to both frame dimensions. `1` keeps the original size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReductionFactor(u32);

impl ReductionFactor {
    pub fn new(factor: u32) -> Result<Self, FrameError> {
        if factor == 0 {
            return Err(FrameError::ZeroFactor);
        }
        Ok(Self(factor))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// Path of the optional `timestamp=<seconds>` sidecar for an image.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

pub fn load_image(path: &Path) -> Result<Frame, FrameError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(FrameError::Missing(path.to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    let mut frame = decode_pnm(&bytes)?;
    let meta = sidecar_path(path);
    if meta.exists() {
        frame.timestamp = read_sidecar(&meta)?;
    }
    Ok(frame)
}

fn read_sidecar(path: &Path) -> Result<f64, FrameError> {
    let text = fs::read_to_string(path)?;
    let bad = |reason: &str| FrameError::MalformedMeta { path: path.to_path_buf(), reason: reason.into() };
    for line in text.lines() {
        let line = line.trim();
        if let Some(v) = line.strip_prefix("timestamp=") {
            let t: f64 = v.trim().parse().map_err(|_| bad("timestamp is not a number"))?;
            if !t.is_finite() || t < 0.0 {
                return Err(bad("timestamp must be finite and non-negative"));
            }
            return Ok(t);
        }
    }
    Err(bad("no timestamp= line"))
}

/// PGM/PPM files directly inside `dir`, sorted by file name.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>, FrameError> {
    if !dir.is_dir() {
        return Err(FrameError::Missing(dir.to_path_buf()));
    }
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("pgm" | "ppm")))
        .collect();
    out.sort();
    Ok(out)
}

/// Parse a binary P5/P6 image with maxval 255.
pub fn decode_pnm(bytes: &[u8]) -> Result<Frame, FrameError> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_slice() {
        b"P5" => 1u8,
        b"P6" => 3u8,
        other => {
            return Err(FrameError::MalformedHeader(format!(
                "unsupported magic {:?}",
                String::from_utf8_lossy(other)
            )))
        }
    };
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(FrameError::MalformedHeader(format!("maxval {maxval} (only 255 is supported)")));
    }
    if width == 0 || height == 0 {
        return Err(FrameError::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(FrameError::MalformedHeader("missing separator after maxval".into())),
    }
    let expected = width as usize * height as usize * channels as usize;
    let data = &bytes[pos..];
    if data.len() < expected {
        return Err(FrameError::Truncated { expected, actual: data.len() });
    }
    Frame::new(width, height, channels, data[..expected].to_vec())
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<Vec<u8>, FrameError> {
    loop {
        match bytes.get(*pos) {
            None => return Err(FrameError::MalformedHeader("unexpected end of header".into())),
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
        }
    }
    let start = *pos;
    while let Some(&b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || b == b'#' {
            break;
        }
        *pos += 1;
    }
    Ok(bytes[start..*pos].to_vec())
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32, FrameError> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(&tok)
        .ok()
        .and_then(|s| s.parse::<u32>().ok())
        .ok_or_else(|| FrameError::MalformedHeader(format!("bad {what} field {:?}", String::from_utf8_lossy(&tok))))
}

pub fn encode_pnm(f: &Frame) -> Vec<u8> {
    let magic = if f.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", f.width, f.height).into_bytes();
    out.extend_from_slice(&f.pixels);
    out
}

/// Write `f` as P5 (gray) or P6 (RGB). A non-zero timestamp goes to the
/// `.meta` sidecar; a stale sidecar is removed for zero timestamps.
pub fn save_image(f: &Frame, path: &Path) -> Result<(), FrameError> {
    write_atomic(path, &encode_pnm(f))?;
    let meta = sidecar_path(path);
    if f.timestamp != 0.0 {
        write_atomic(&meta, format!("timestamp={}\n", f.timestamp).as_bytes())?;
    } else if meta.exists() {
        fs::remove_file(&meta)?;
    }
    Ok(())
}

/// BT.601 luma, rounded half up. Gray frames come back unchanged.
pub fn to_grayscale(f: &Frame) -> Frame {
    if f.channels == 1 {
        return f.clone();
    }
    let pixels = f
        .pixels
        .chunks_exact(3)
        .map(|p| luma(p[0], p[1], p[2]))
        .collect();
    Frame { width: f.width, height: f.height, channels: 1, pixels, timestamp: f.timestamp }
}

#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((299 * r as u32 + 587 * g as u32 + 114 * b as u32 + 500) / 1000) as u8
}

/// Block-mean reduction: each output sample is the rounded mean of a
/// `factor x factor` source block. Trailing rows/columns that do not fill a
/// block are dropped.
pub fn downscale(f: &Frame, r: ReductionFactor) -> Result<Frame, FrameError> {
    let k = r.get();
    if k == 1 {
        return Ok(f.clone());
    }
    if k > f.width || k > f.height {
        return Err(FrameError::FactorTooLarge { factor: k, width: f.width, height: f.height });
    }
    let (ow, oh) = (f.width / k, f.height / k);
    let ch = f.channels as usize;
    let n = k * k;
    let mut pixels = Vec::with_capacity(ow as usize * oh as usize * ch);
    for oy in 0..oh {
        for ox in 0..ow {
            for c in 0..ch {
                let mut sum = 0u32;
                for y in oy * k..(oy + 1) * k {
                    let row = y as usize * f.width as usize;
                    for x in ox * k..(ox + 1) * k {
                        sum += f.pixels[(row + x as usize) * ch + c] as u32;
                    }
                }
                pixels.push(((sum + n / 2) / n) as u8);
            }
        }
    }
    Ok(Frame { width: ow, height: oh, channels: f.channels, pixels, timestamp: f.timestamp })
}
