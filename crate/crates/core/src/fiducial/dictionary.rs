use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::FiducialError;
use crate::frames::Frame;

const MAX_DRAWS: usize = 1_000_000;

/// A set of square binary codes. Code bit `r * grid + c` is the cell at row
/// `r`, column `c` of the inner grid; `1` renders white, `0` black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MarkerDictionary {
    grid: usize,
    codes: Vec<u64>,
    min_hamming: u32,
}

/// Rotate a `grid x grid` code 90 degrees clockwise.
pub fn rotate_cw(code: u64, grid: usize) -> u64 {
    let mut out = 0u64;
    for r in 0..grid {
        for c in 0..grid {
            let src = (grid - 1 - c) * grid + r;
            if code >> src & 1 == 1 {
                out |= 1 << (r * grid + c);
            }
        }
    }
    out
}

/// The four in-plane rotations `[code, cw, cw^2, cw^3]`.
pub fn rotations(code: u64, grid: usize) -> [u64; 4] {
    let r1 = rotate_cw(code, grid);
    let r2 = rotate_cw(r1, grid);
    let r3 = rotate_cw(r2, grid);
    [code, r1, r2, r3]
}

#[inline]
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

fn mask(grid: usize) -> u64 {
    let bits = grid * grid;
    if bits == 64 {
        u64::MAX
    } else {
        (1u64 << bits) - 1
    }
}

/// Smallest distance between `code` and its own non-trivial rotations.
fn self_rotation_distance(code: u64, grid: usize) -> u32 {
    let rots = rotations(code, grid);
    rots[1..].iter().map(|&r| hamming(code, r)).min().unwrap_or(u32::MAX)
}

impl MarkerDictionary {
    /// Draw codes from a seeded generator until `count` of them are mutually
    /// at least `min_hamming` apart under all four rotations.
    ///
    /// Each accepted code is also `min_hamming` away from its own rotations
    /// (so orientation is recoverable) and from the all-black and all-white
    /// patterns (so solid blobs never decode).
    pub fn generate(grid: usize, count: usize, min_hamming: u32, seed: u64) -> Result<Self, FiducialError> {
        if !(2..=8).contains(&grid) {
            return Err(FiducialError::InvalidGrid(grid));
        }
        if count == 0 || min_hamming == 0 {
            return Err(FiducialError::Infeasible { grid, count, min_hamming });
        }
        let bits = (grid * grid) as u32;
        if min_hamming > bits {
            return Err(FiducialError::Infeasible { grid, count, min_hamming });
        }
        let m = mask(grid);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut codes: Vec<u64> = Vec::with_capacity(count);
        let mut accepted_rots: Vec<u64> = Vec::with_capacity(count * 4);
        for _ in 0..MAX_DRAWS {
            if codes.len() == count {
                break;
            }
            let code = rng.random::<u64>() & m;
            let ones = code.count_ones();
            if ones < min_hamming || bits - ones < min_hamming {
                continue;
            }
            if self_rotation_distance(code, grid) < min_hamming {
                continue;
            }
            if accepted_rots.iter().any(|&r| hamming(code, r) < min_hamming) {
                continue;
            }
            codes.push(code);
            accepted_rots.extend_from_slice(&rotations(code, grid));
        }
        if codes.len() < count {
            return Err(FiducialError::Infeasible { grid, count, min_hamming });
        }
        Ok(Self { grid, codes, min_hamming })
    }

    /// Build from explicit codes; `min_hamming` is measured, not trusted.
    pub fn from_codes(grid: usize, codes: Vec<u64>) -> Result<Self, FiducialError> {
        if !(2..=8).contains(&grid) {
            return Err(FiducialError::InvalidGrid(grid));
        }
        if codes.is_empty() {
            return Err(FiducialError::Parse("dictionary has no codes".into()));
        }
        let m = mask(grid);
        if codes.iter().any(|&c| c & !m != 0) {
            return Err(FiducialError::Parse("code has bits outside the grid".into()));
        }
        let min_hamming = measured_min_distance(grid, &codes);
        if min_hamming == 0 {
            return Err(FiducialError::Parse("codes are not distinguishable under rotation".into()));
        }
        Ok(Self { grid, codes, min_hamming })
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn codes(&self) -> &[u64] {
        &self.codes
    }

    pub fn code(&self, id: usize) -> Option<u64> {
        self.codes.get(id).copied()
    }

    pub fn min_hamming(&self) -> u32 {
        self.min_hamming
    }

    /// Number of bit errors a decode may correct.
    pub fn correction_radius(&self) -> u32 {
        (self.min_hamming - 1) / 2
    }

    /// Closest `(id, rotation, distance)` to a sampled inner grid, where
    /// `rotation` is the number of clockwise quarter turns that map the
    /// code onto the sample. Ties keep the lowest id, then lowest rotation.
    pub fn nearest(&self, sample: u64) -> (usize, usize, u32) {
        let mut best = (0usize, 0usize, u32::MAX);
        for (id, &code) in self.codes.iter().enumerate() {
            for (rot, r) in rotations(code, self.grid).into_iter().enumerate() {
                let d = hamming(sample, r);
                if d < best.2 {
                    best = (id, rot, d);
                }
            }
        }
        best
    }

    /// One line per id, `grid * grid` characters of `0`/`1`, row-major.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for &code in &self.codes {
            for i in 0..self.grid * self.grid {
                out.push(if code >> i & 1 == 1 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, FiducialError> {
        let mut grid = None;
        let mut codes = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let n = line.len();
            let g = (n as f64).sqrt().round() as usize;
            if g * g != n {
                return Err(FiducialError::Parse(format!("line {}: {n} bits is not a square grid", lineno + 1)));
            }
            match grid {
                None => grid = Some(g),
                Some(prev) if prev != g => {
                    return Err(FiducialError::Parse(format!(
                        "line {}: grid {g} differs from earlier grid {prev}",
                        lineno + 1
                    )))
                }
                _ => {}
            }
            let mut code = 0u64;
            for (i, ch) in line.chars().enumerate() {
                match ch {
                    '1' => code |= 1 << i,
                    '0' => {}
                    other => {
                        return Err(FiducialError::Parse(format!("line {}: unexpected character {other:?}", lineno + 1)))
                    }
                }
            }
            codes.push(code);
        }
        let grid = grid.ok_or_else(|| FiducialError::Parse("empty dictionary file".into()))?;
        Self::from_codes(grid, codes)
    }

    /// Render marker `id` as a gray frame: `quiet_zone` white pixels on each
    /// side, a one-cell black border ring, then the inner grid.
    pub fn render(&self, id: usize, side: u32, quiet_zone: u32) -> Result<Frame, FiducialError> {
        let code = self.code(id).ok_or(FiducialError::UnknownId { id, count: self.len() })?;
        let cells = self.grid as u32 + 2;
        if side == 0 || side % cells != 0 {
            return Err(FiducialError::SideNotDivisible { side, cells });
        }
        let cell = side / cells;
        let total = side + 2 * quiet_zone;
        let mut f = Frame::filled(total, total, 1, 255).expect("non-empty frame");
        for y in 0..side {
            let row = (y / cell) as usize;
            for x in 0..side {
                let col = (x / cell) as usize;
                let white = if row == 0 || col == 0 || row == self.grid + 1 || col == self.grid + 1 {
                    false
                } else {
                    code >> ((row - 1) * self.grid + (col - 1)) & 1 == 1
                };
                f.set(x + quiet_zone, y + quiet_zone, 0, if white { 255 } else { 0 });
            }
        }
        Ok(f)
    }
}

/// Minimum distance over all id pairs under rotation and over each code's
/// own non-trivial rotations.
fn measured_min_distance(grid: usize, codes: &[u64]) -> u32 {
    let mut best = u32::MAX;
    for (i, &a) in codes.iter().enumerate() {
        best = best.min(self_rotation_distance(a, grid));
        for &b in &codes[i + 1..] {
            for r in rotations(b, grid) {
                best = best.min(hamming(a, r));
            }
        }
    }
    best.min((grid * grid) as u32)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive pairwise check over explicit bit matrices, independent of
    /// the packed-u64 rotation used by the generator.
    fn matrix(code: u64, g: usize) -> Vec<Vec<u8>> {
        (0..g).map(|r| (0..g).map(|c| (code >> (r * g + c) & 1) as u8).collect()).collect()
    }

    fn rot_matrix(m: &[Vec<u8>]) -> Vec<Vec<u8>> {
        let g = m.len();
        let mut out = vec![vec![0u8; g]; g];
        // clockwise: the left column read bottom-to-top becomes the top row
        for (r, row) in out.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = m[g - 1 - c][r];
            }
        }
        out
    }

    fn dist(a: &[Vec<u8>], b: &[Vec<u8>]) -> u32 {
        a.iter().flatten().zip(b.iter().flatten()).filter(|(x, y)| x != y).count() as u32
    }

    #[test]
    fn grid4_codes_have_16_bits() {
        let d = MarkerDictionary::generate(4, 10, 3, 1).unwrap();
        for &c in d.codes() {
            assert_eq!(c >> 16, 0);
        }
        assert_eq!(d.grid() * d.grid(), 16);
    }

    #[test]
    fn single_code_dictionary() {
        let d = MarkerDictionary::generate(6, 1, 3, 0).unwrap();
        assert_eq!(d.len(), 1);
    }

    #[test]
    fn exhaustive_pairwise_oracle_6x6_50() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let mats: Vec<_> = d.codes().iter().map(|&c| matrix(c, 6)).collect();
        let mut checked = 0;
        for i in 0..mats.len() {
            for j in i + 1..mats.len() {
                let mut a = mats[i].clone();
                for _ in 0..4 {
                    let mut b = mats[j].clone();
                    for _ in 0..4 {
                        assert!(dist(&a, &b) >= 3, "ids {i},{j}");
                        checked += 1;
                        b = rot_matrix(&b);
                    }
                    a = rot_matrix(&a);
                }
            }
        }
        assert_eq!(checked, 50 * 49 / 2 * 16);
    }

    #[test]
    fn packed_rotation_matches_matrix_rotation() {
        for code in [0x1u64, 0x8421_0842_1u64 & mask(6), 0xdead_beef & mask(6)] {
            assert_eq!(matrix(rotate_cw(code, 6), 6), rot_matrix(&matrix(code, 6)));
        }
        assert_eq!(rotations(0b1011, 2)[0], 0b1011);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = MarkerDictionary::generate(6, 20, 4, 7).unwrap();
        let b = MarkerDictionary::generate(6, 20, 4, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_requests() {
        assert!(matches!(MarkerDictionary::generate(3, 100, 5, 0), Err(FiducialError::Infeasible { .. })));
        assert!(matches!(MarkerDictionary::generate(4, 1, 17, 0), Err(FiducialError::Infeasible { .. })));
        assert!(matches!(MarkerDictionary::generate(6, 0, 3, 0), Err(FiducialError::Infeasible { .. })));
        assert!(matches!(MarkerDictionary::generate(9, 1, 3, 0), Err(FiducialError::InvalidGrid(9))));
    }

    #[test]
    fn text_roundtrip() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        let back = MarkerDictionary::from_text(&d.to_text()).unwrap();
        assert_eq!(back.codes(), d.codes());
        assert!(back.min_hamming() >= 3);
        assert!(MarkerDictionary::from_text("0101\n010").is_err());
        assert!(MarkerDictionary::from_text("01x1\n").is_err());
    }

    #[test]
    fn render_errors_and_layout() {
        let d = MarkerDictionary::generate(6, 50, 3, 0).unwrap();
        assert!(matches!(d.render(3, 60, 0), Err(FiducialError::SideNotDivisible { side: 60, cells: 8 })));
        assert!(matches!(d.render(50, 80, 0), Err(FiducialError::UnknownId { .. })));

        let f = d.render(3, 80, 0).unwrap();
        let code = matrix(d.code(3).unwrap(), 6);
        for cy in 0..8u32 {
            for cx in 0..8u32 {
                let expected = if cy == 0 || cx == 0 || cy == 7 || cx == 7 {
                    0
                } else if code[(cy - 1) as usize][(cx - 1) as usize] == 1 {
                    255
                } else {
                    0
                };
                for y in cy * 10..cy * 10 + 10 {
                    for x in cx * 10..cx * 10 + 10 {
                        assert_eq!(f.get(x, y, 0), expected);
                    }
                }
            }
        }
        assert_eq!(d.render(3, 80, 0).unwrap(), f);

        let q = d.render(3, 80, 5).unwrap();
        assert_eq!(q.width(), 90);
        assert_eq!(q.get(0, 0, 0), 255);
        assert_eq!(q.get(5, 5, 0), 0);
    }
}
