use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{CameraModel, SimError};
use crate::fiducial::Point;
use crate::frames::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorruptionSpec {
    /// Gaussian blur sigma, pixels.
    pub blur_sigma: f64,
    /// Multiplicative exposure change, fraction.
    pub exposure: f64,
    /// In-plane marker rotation, degrees.
    pub rotation: f64,
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(blur_sigma: f64, exposure: f64, rotation: f64, seed: u64) -> Result<Self, SimError> {
        let check = |what, value: f64, lo, hi| {
            if (lo..=hi).contains(&value) {
                Ok(())
            } else {
                Err(SimError::Corruption { what, value, lo, hi })
            }
        };
        check("blur_sigma", blur_sigma, 0.0, 2.5)?;
        check("exposure", exposure, -0.25, 0.25)?;
        check("rotation", rotation, -20.0, 20.0)?;
        Ok(Self { blur_sigma, exposure, rotation, seed })
    }

    pub fn none() -> Self {
        Self { blur_sigma: 0.0, exposure: 0.0, rotation: 0.0, seed: 0 }
    }
}

impl Default for CorruptionSpec {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Background {
    /// Uniform gray.
    Plain(u8),
    /// Smooth value noise between crop green and soil tan.
    #[default]
    Crop,
}

const GREEN: [f64; 3] = [78.0, 112.0, 58.0];
const TAN: [f64; 3] = [176.0, 158.0, 112.0];
const LATTICE: u32 = 24;

impl Background {
    pub fn texture(&self, width: u32, height: u32, seed: u64) -> Frame {
        match *self {
            Background::Plain(v) => Frame::filled(width, height, 3, v).expect("non-empty frame"),
            Background::Crop => crop_texture(width, height, seed),
        }
    }
}

fn crop_texture(width: u32, height: u32, seed: u64) -> Frame {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gw = (width / LATTICE + 2) as usize;
    let gh = (height / LATTICE + 2) as usize;
    let nodes: Vec<f64> = (0..gw * gh).map(|_| rng.random::<f64>()).collect();
    let jitter: Vec<i8> = (0..width as usize * height as usize).map(|_| rng.random_range(-3..=3)).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut px = vec![0u8; width as usize * height as usize * 3];
    px.par_chunks_mut(width as usize * 3).enumerate().for_each(|(y, row)| {
        let gy = y as f64 / LATTICE as f64;
        let (iy, fy) = (gy.floor() as usize, smooth(gy.fract()));
        for x in 0..width as usize {
            let gx = x as f64 / LATTICE as f64;
            let (ix, fx) = (gx.floor() as usize, smooth(gx.fract()));
            let n = |i: usize, j: usize| nodes[j * gw + i];
            let top = n(ix, iy) * (1.0 - fx) + n(ix + 1, iy) * fx;
            let bot = n(ix, iy + 1) * (1.0 - fx) + n(ix + 1, iy + 1) * fx;
            let t = top * (1.0 - fy) + bot * fy;
            let j = jitter[y * width as usize + x] as f64;
            for c in 0..3 {
                row[x * 3 + c] = (GREEN[c] + (TAN[c] - GREEN[c]) * t + j).round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    Frame::new(width, height, 3, px).expect("sized buffer")
}

/// A rendered marker (quiet zone included) plus the side of its black
/// square, which sits centred in the sprite.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkerSprite {
    pub image: Frame,
    pub marker_side: u32,
}

impl MarkerSprite {
    /// Corners of the black square, marker top-left first, clockwise, when
    /// the sprite is centred at `c` and turned by `rotation` degrees.
    pub fn corners(&self, c: Point, rotation: f64) -> [Point; 4] {
        let h = self.marker_side as f64 / 2.0;
        let (s, co) = rotation.to_radians().sin_cos();
        [(-h, -h), (h, -h), (h, h), (-h, h)].map(|(dx, dy)| Point::new(c.x + co * dx - s * dy, c.y + s * dx + co * dy))
    }
}

/// Background, marker centred at `pos` (none: marker out of view), then
/// blur and exposure. The marker is turned by `corruption.rotation` degrees
/// (clockwise on screen) and antialiased with 3x3 supersampling.
pub fn render_scene(
    cam: &CameraModel,
    marker: &MarkerSprite,
    pos: Option<Point>,
    background: &Frame,
    corruption: &CorruptionSpec,
) -> Result<Frame, SimError> {
    if background.width() != cam.width || background.height() != cam.height || background.channels() != 3 {
        return Err(SimError::Scenario(format!(
            "background is {}x{}x{}, camera expects {}x{}x3",
            background.width(),
            background.height(),
            background.channels(),
            cam.width,
            cam.height
        )));
    }
    let mut f = background.clone();
    if let Some(c) = pos {
        composite(&mut f, &marker.image, c, corruption.rotation);
    }
    if corruption.blur_sigma > 0.0 {
        f = gaussian_blur(&f, corruption.blur_sigma);
    }
    if corruption.exposure != 0.0 {
        let k = 1.0 + corruption.exposure;
        for v in f.pixels_mut() {
            *v = (*v as f64 * k).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(f)
}

fn composite(f: &mut Frame, sprite: &Frame, c: Point, rotation: f64) {
    let s = sprite.width() as f64;
    let half = s / 2.0;
    let (sn, cs) = rotation.to_radians().sin_cos();
    let reach = half * (cs.abs() + sn.abs()) + 1.0;
    let (w, h) = (f.width() as i64, f.height() as i64);
    let x0 = ((c.x - reach).floor() as i64).clamp(0, w);
    let x1 = ((c.x + reach).ceil() as i64).clamp(0, w);
    let y0 = ((c.y - reach).floor() as i64).clamp(0, h);
    let y1 = ((c.y + reach).ceil() as i64).clamp(0, h);
    let sw = sprite.width() as i64;
    let lookup = |px: f64, py: f64| -> Option<u8> {
        let (dx, dy) = (px - c.x, py - c.y);
        // inverse rotation back into sprite coordinates
        let u = cs * dx + sn * dy + half;
        let v = -sn * dx + cs * dy + half;
        if u >= 0.0 && v >= 0.0 && u < s && v < s {
            let (ui, vi) = ((u as i64).min(sw - 1), (v as i64).min(sw - 1));
            Some(sprite.get(ui as u32, vi as u32, 0))
        } else {
            None
        }
    };
    for y in y0..y1 {
        for x in x0..x1 {
            let mut acc = [0u32; 3];
            let mut hit = false;
            for j in 0..3 {
                for i in 0..3 {
                    let px = x as f64 + (2 * i + 1) as f64 / 6.0;
                    let py = y as f64 + (2 * j + 1) as f64 / 6.0;
                    match lookup(px, py) {
                        Some(g) => {
                            hit = true;
                            acc.iter_mut().for_each(|a| *a += g as u32);
                        }
                        None => {
                            for (k, a) in acc.iter_mut().enumerate() {
                                *a += f.get(x as u32, y as u32, k as u8) as u32;
                            }
                        }
                    }
                }
            }
            if hit {
                for (k, a) in acc.iter().enumerate() {
                    f.set(x as u32, y as u32, k as u8, ((a + 4) / 9) as u8);
                }
            }
        }
    }
}

fn kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k.into_iter().map(|v| v as f32).collect()
}

/// Separable Gaussian blur with edge clamping, every channel independently.
pub fn gaussian_blur(f: &Frame, sigma: f64) -> Frame {
    if sigma <= 0.0 {
        return f.clone();
    }
    let k = kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (w, h, ch) = (f.width() as usize, f.height() as usize, f.channels() as usize);
    let src = f.pixels();
    let stride = w * ch;

    let mut tmp = vec![0f32; w * h * ch];
    tmp.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
        let line = &src[y * stride..(y + 1) * stride];
        for x in 0..w {
            for c in 0..ch {
                let mut acc = 0f32;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as i64 + i as i64 - r).clamp(0, w as i64 - 1) as usize;
                    acc += kv * line[xx * ch + c] as f32;
                }
                row[x * ch + c] = acc;
            }
        }
    });

    let mut out = vec![0u8; w * h * ch];
    out.par_chunks_mut(stride).enumerate().for_each(|(y, row)| {
        let mut acc = vec![0f32; stride];
        for (i, kv) in k.iter().enumerate() {
            let yy = (y as i64 + i as i64 - r).clamp(0, h as i64 - 1) as usize;
            let line = &tmp[yy * stride..(yy + 1) * stride];
            acc.iter_mut().zip(line).for_each(|(a, v)| *a += kv * v);
        }
        row.iter_mut().zip(&acc).for_each(|(o, a)| *o = a.round().clamp(0.0, 255.0) as u8);
    });
    let mut blurred = Frame::new(f.width(), f.height(), f.channels(), out).expect("same shape");
    if f.timestamp() != 0.0 {
        blurred = blurred.with_timestamp(f.timestamp()).expect("valid timestamp");
    }
    blurred
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiducial::{detect_markers, MarkerDictionary};
    use crate::frames::to_grayscale;

    fn sprite(d: &MarkerDictionary, id: usize, side: u32) -> MarkerSprite {
        MarkerSprite { image: d.render(id, side, side / 4).unwrap(), marker_side: side }
    }

    #[test]
    fn corruption_ranges() {
        assert!(CorruptionSpec::new(2.5, -0.25, 20.0, 0).is_ok());
        assert!(CorruptionSpec::new(2.6, 0.0, 0.0, 0).is_err());
        assert!(CorruptionSpec::new(0.0, 0.3, 0.0, 0).is_err());
        assert!(CorruptionSpec::new(0.0, 0.0, -21.0, 0).is_err());
    }

    #[test]
    fn uncorrupted_marker_is_byte_equal() {
        let d = MarkerDictionary::generate(6, 10, 3, 0).unwrap();
        let sp = sprite(&d, 4, 64);
        let cam = CameraModel::new(0.003196, 200, 160, 5.0, 18.2).unwrap();
        let bg = Background::Plain(128).texture(200, 160, 0);
        let f = render_scene(&cam, &sp, Some(Point::new(100.0, 80.0)), &bg, &CorruptionSpec::none()).unwrap();
        let s = sp.image.width();
        let (ox, oy) = (100 - s / 2, 80 - s / 2);
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    assert_eq!(f.get(ox + x, oy + y, c), sp.image.get(x, y, 0));
                }
            }
        }
        assert_eq!(f.get(0, 0, 0), 128);
    }

    #[test]
    fn exposure_scales_and_clamps() {
        let cam = CameraModel::new(0.01, 4, 4, 5.0, 1.0).unwrap();
        let sp = MarkerSprite { image: Frame::filled(2, 2, 1, 0).unwrap(), marker_side: 2 };
        let bg = Background::Plain(200).texture(4, 4, 0);
        let dark = render_scene(&cam, &sp, None, &bg, &CorruptionSpec::new(0.0, -0.25, 0.0, 0).unwrap()).unwrap();
        assert!(dark.pixels().iter().all(|&v| v == 150));
        let bright = render_scene(&cam, &sp, None, &bg, &CorruptionSpec::new(0.0, 0.25, 0.0, 0).unwrap()).unwrap();
        assert!(bright.pixels().iter().all(|&v| v == 250));
        let bg = Background::Plain(240).texture(4, 4, 0);
        let sat = render_scene(&cam, &sp, None, &bg, &CorruptionSpec::new(0.0, 0.25, 0.0, 0).unwrap()).unwrap();
        assert!(sat.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn blur_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (w, h) = (23u32, 17u32);
        let px: Vec<u8> = (0..w * h).map(|_| rng.random()).collect();
        let f = Frame::new(w, h, 1, px).unwrap();
        let sigma = 1.3;
        let b = gaussian_blur(&f, sigma);
        let r = (3.0 * sigma).ceil() as i64;
        let g = |i: i64| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        let norm: f64 = (-r..=r).map(g).sum();
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for j in -r..=r {
                    for i in -r..=r {
                        let xx = (x + i).clamp(0, w as i64 - 1) as u32;
                        let yy = (y + j).clamp(0, h as i64 - 1) as u32;
                        acc += g(i) * g(j) / (norm * norm) * f.get(xx, yy, 0) as f64;
                    }
                }
                let got = b.get(x as u32, y as u32, 0) as f64;
                assert!((got - acc).abs() <= 0.51, "({x},{y}) {got} vs {acc}");
            }
        }
        let flat = Frame::filled(9, 9, 3, 77).unwrap();
        assert_eq!(gaussian_blur(&flat, 2.5), flat);
    }

    #[test]
    fn crop_texture_is_seeded() {
        let a = Background::Crop.texture(64, 48, 5);
        assert_eq!(a, Background::Crop.texture(64, 48, 5));
        assert_ne!(a, Background::Crop.texture(64, 48, 6));
    }

    #[test]
    fn rotated_corrupted_marker_still_decodes() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let cam = CameraModel::new(0.003196, 240, 200, 5.0, 18.2).unwrap();
        let bg = Background::Crop.texture(240, 200, 9);
        let sp = sprite(&d, 17, 48);
        for (exp, rot) in [(0.25, 20.0), (-0.25, -20.0)] {
            let c = CorruptionSpec::new(2.5, exp, rot, 0).unwrap();
            let f = render_scene(&cam, &sp, Some(Point::new(117.3, 96.8)), &bg, &c).unwrap();
            let obs = detect_markers(&to_grayscale(&f), &d);
            assert_eq!(obs.len(), 1, "exposure {exp} rotation {rot}");
            assert_eq!(obs[0].id, 17);
            assert!(obs[0].center.dist(Point::new(117.3, 96.8)) < 1.0);
        }
    }
}
