use thiserror::Error;

use super::{DetectorParams, Homography, MarkerDictionary, MarkerObservation, Point, Quad};
use crate::frames::Frame;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Rejection {
    #[error("candidate quad does not define a usable homography")]
    DegenerateHomography,
    #[error("border ring only {black_fraction:.2} black")]
    BorderFail { black_fraction: f64 },
    #[error("nearest code is {distance} bits away (radius {radius})")]
    NoCodeWithinRadius { distance: u32, radius: u32 },
}

/// Sample offsets inside each cell, as fractions of the cell side.
const CELL_SAMPLES: [f64; 3] = [0.3, 0.5, 0.7];

/// Bilinear gray lookup at a continuous image point (pixel centres at +0.5),
/// clamped to the frame.
fn sample(gray: &Frame, p: Point) -> f64 {
    let (w, h) = (gray.width() as i64, gray.height() as i64);
    let x = p.x - 0.5;
    let y = p.y - 0.5;
    let x0 = x.floor();
    let y0 = y.floor();
    let (fx, fy) = (x - x0, y - y0);
    let at = |xi: i64, yi: i64| {
        let xi = xi.clamp(0, w - 1) as u32;
        let yi = yi.clamp(0, h - 1) as u32;
        gray.get(xi, yi, 0) as f64
    };
    let (xi, yi) = (x0 as i64, y0 as i64);
    let top = at(xi, yi) * (1.0 - fx) + at(xi + 1, yi) * fx;
    let bot = at(xi, yi + 1) * (1.0 - fx) + at(xi + 1, yi + 1) * fx;
    top * (1.0 - fy) + bot * fy
}

/// Otsu's threshold over 8-bit values: samples `<= t` are the dark class.
pub(crate) fn otsu(values: &[u8]) -> u8 {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum();
    let (mut w0, mut sum0) = (0.0f64, 0.0f64);
    let (mut best_t, mut best_var) = (0u8, -1.0f64);
    for t in 0..256usize {
        w0 += hist[t] as f64;
        sum0 += t as f64 * hist[t] as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best_var {
            best_var = var;
            best_t = t as u8;
        }
    }
    if best_var < 0.0 {
        // single-valued input: everything falls in one class
        values.first().copied().unwrap_or(0)
    } else {
        best_t
    }
}

/// Rectify `quad` onto the canonical marker square, binarize every cell by
/// sample majority against an Otsu threshold, check the black border ring,
/// and match the inner bits against the dictionary under all rotations.
pub fn decode_candidate(
    gray: &Frame,
    quad: &Quad,
    d: &MarkerDictionary,
    params: &DetectorParams,
) -> Result<MarkerObservation, Rejection> {
    let unit = [Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(1.0, 1.0), Point::new(0.0, 1.0)];
    let hom = Homography::from_correspondences(&unit, quad).ok_or(Rejection::DegenerateHomography)?;

    let g = d.grid();
    let cells = g + 2;
    let k = CELL_SAMPLES.len();
    let mut values = Vec::with_capacity(cells * cells * k * k);
    for r in 0..cells {
        for c in 0..cells {
            for fy in CELL_SAMPLES {
                for fx in CELL_SAMPLES {
                    let u = (c as f64 + fx) / cells as f64;
                    let v = (r as f64 + fy) / cells as f64;
                    let p = hom.apply(Point::new(u, v));
                    values.push(sample(gray, p).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    let t = otsu(&values);
    let white: Vec<bool> = values
        .chunks_exact(k * k)
        .map(|cell| 2 * cell.iter().filter(|&&v| v > t).count() > k * k)
        .collect();

    let mut ring = 0usize;
    let mut ring_black = 0usize;
    let mut bits = 0u64;
    for r in 0..cells {
        for c in 0..cells {
            let w = white[r * cells + c];
            if r == 0 || c == 0 || r == cells - 1 || c == cells - 1 {
                ring += 1;
                ring_black += usize::from(!w);
            } else if w {
                bits |= 1 << ((r - 1) * g + (c - 1));
            }
        }
    }
    let black_fraction = ring_black as f64 / ring as f64;
    if black_fraction < params.min_border_black {
        return Err(Rejection::BorderFail { black_fraction });
    }

    let (id, rot, distance) = d.nearest(bits);
    let radius = d.correction_radius();
    if distance > radius {
        return Err(Rejection::NoCodeWithinRadius { distance, radius });
    }
    // sample == code rotated `rot` quarter turns clockwise, so the marker's
    // own top-left corner sits at quad corner `rot`
    let corners = [quad[rot % 4], quad[(rot + 1) % 4], quad[(rot + 2) % 4], quad[(rot + 3) % 4]];
    let center = Point::new(
        corners.iter().map(|p| p.x).sum::<f64>() / 4.0,
        corners.iter().map(|p| p.y).sum::<f64>() / 4.0,
    );
    Ok(MarkerObservation { id, corners, center, hamming_corrections: distance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fiducial::find_candidates;

    fn rotate_frame_cw(f: &Frame) -> Frame {
        let (w, h) = (f.width(), f.height());
        let mut out = Frame::filled(h, w, 1, 0).unwrap();
        for y in 0..h {
            for x in 0..w {
                // (x, y) -> (h - 1 - y, x)
                out.set(h - 1 - y, x, 0, f.get(x, y, 0));
            }
        }
        out
    }

    fn decode_single(f: &Frame, d: &MarkerDictionary) -> Result<MarkerObservation, Rejection> {
        let params = DetectorParams::default();
        let qs = find_candidates(f, &params);
        assert_eq!(qs.len(), 1, "expected a single candidate");
        decode_candidate(f, &qs[0], d, &params)
    }

    #[test]
    fn identity_pose_decodes_without_corrections() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let f = d.render(3, 80, 10).unwrap();
        let obs = decode_single(&f, &d).unwrap();
        assert_eq!(obs.id, 3);
        assert_eq!(obs.hamming_corrections, 0);
        assert!(obs.corners[0].dist(Point::new(10.0, 10.0)) < 0.25);
        assert!(obs.corners[2].dist(Point::new(90.0, 90.0)) < 0.25);
    }

    #[test]
    fn quarter_turns_decode_to_same_id_with_rotated_corners() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let mut f = d.render(3, 80, 10).unwrap();
        for turn in 1..4 {
            f = rotate_frame_cw(&f);
            let obs = decode_single(&f, &d).unwrap();
            assert_eq!(obs.id, 3, "turn {turn}");
            // the marker's top-left corner: (10,10) -> (90,10) -> (90,90) -> (10,90)
            let expect = [(90.0, 10.0), (90.0, 90.0), (10.0, 90.0)][turn - 1];
            assert!(obs.corners[0].dist(Point::new(expect.0, expect.1)) < 0.25, "turn {turn}: {:?}", obs.corners[0]);
        }
    }

    #[test]
    fn single_flipped_cell_is_corrected() {
        let d = MarkerDictionary::generate(6, 30, 5, 0).unwrap();
        let mut f = d.render(3, 80, 10).unwrap();
        // inner cell (row 2, col 3) -> pixel block starting at cell (3, 4) of the 8x8 layout
        for y in 10 + 3 * 10..10 + 4 * 10 {
            for x in 10 + 4 * 10..10 + 5 * 10 {
                let v = f.get(x, y, 0);
                f.set(x, y, 0, 255 - v);
            }
        }
        let obs = decode_single(&f, &d).unwrap();
        assert_eq!(obs.id, 3);
        assert_eq!(obs.hamming_corrections, 1);
    }

    #[test]
    fn degenerate_quad_is_rejected() {
        let d = MarkerDictionary::generate(6, 5, 3, 0).unwrap();
        let f = Frame::filled(50, 50, 1, 255).unwrap();
        let q = [Point::new(0.0, 0.0), Point::new(10.0, 10.0), Point::new(20.0, 20.0), Point::new(30.0, 30.0)];
        assert_eq!(
            decode_candidate(&f, &q, &d, &DetectorParams::default()),
            Err(Rejection::DegenerateHomography)
        );
    }

    #[test]
    fn solid_square_fails_on_code_not_border() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let mut f = Frame::filled(100, 100, 1, 255).unwrap();
        for y in 20..80 {
            for x in 20..80 {
                f.set(x, y, 0, 0);
            }
        }
        assert!(matches!(decode_single(&f, &d), Err(Rejection::NoCodeWithinRadius { .. })));
    }

    #[test]
    fn white_interior_fails_border() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        // thin black outline: ring cells are mostly white when sampled
        let mut f = Frame::filled(100, 100, 1, 255).unwrap();
        for i in 20..81 {
            for t in 0..2 {
                f.set(i, 20 + t, 0, 0);
                f.set(i, 79 + t, 0, 0);
                f.set(20 + t, i, 0, 0);
                f.set(79 + t, i, 0, 0);
            }
        }
        let params = DetectorParams::default();
        let qs = find_candidates(&f, &params);
        assert!(!qs.is_empty());
        assert!(matches!(decode_candidate(&f, &qs[0], &d, &params), Err(Rejection::BorderFail { .. })));
    }

    #[test]
    fn otsu_splits_bimodal() {
        let mut v = vec![10u8; 50];
        v.extend(vec![200u8; 50]);
        let t = otsu(&v);
        assert!((10..200).contains(&t));
        assert_eq!(otsu(&[7, 7, 7]), 7);
    }
}
