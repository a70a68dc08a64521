use super::Point;

/// Plane projective map, `h[8]` fixed to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: [f64; 9],
}

impl Homography {
    /// Exact solve from four correspondences `src[i] -> dst[i]`.
    /// Returns `None` when the configuration is degenerate.
    pub fn from_correspondences(src: &[Point; 4], dst: &[Point; 4]) -> Option<Self> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (u, v) = (src[i].x, src[i].y);
            let (x, y) = (dst[i].x, dst[i].y);
            a[2 * i] = [u, v, 1.0, 0.0, 0.0, 0.0, -u * x, -v * x, x];
            a[2 * i + 1] = [0.0, 0.0, 0.0, u, v, 1.0, -u * y, -v * y, y];
        }
        let sol = solve8(a)?;
        let h = [sol[0], sol[1], sol[2], sol[3], sol[4], sol[5], sol[6], sol[7], 1.0];
        let hom = Self { h };
        // the map must keep every source corner in front of the projection
        if src.iter().any(|p| hom.denominator(*p) <= 1e-12) {
            return None;
        }
        Some(hom)
    }

    #[inline]
    fn denominator(&self, p: Point) -> f64 {
        self.h[6] * p.x + self.h[7] * p.y + self.h[8]
    }

    #[inline]
    pub fn apply(&self, p: Point) -> Point {
        let w = self.denominator(p);
        Point::new(
            (self.h[0] * p.x + self.h[1] * p.y + self.h[2]) / w,
            (self.h[3] * p.x + self.h[4] * p.y + self.h[5]) / w,
        )
    }
}

/// Gaussian elimination with partial pivoting on an augmented 8x9 system.
fn solve8(mut a: [[f64; 9]; 8]) -> Option<[f64; 8]> {
    let scale = a.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..8 {
        let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[piv][col].abs() < 1e-12 * scale {
            return None;
        }
        a.swap(col, piv);
        for row in col + 1..8 {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for k in col..9 {
                    a[row][k] -= f * a[col][k];
                }
            }
        }
    }
    let mut x = [0.0f64; 8];
    for row in (0..8).rev() {
        let mut s = a[row][8];
        for k in row + 1..8 {
            s -= a[row][k] * x[k];
        }
        x[row] = s / a[row][row];
    }
    Some(x)
}
