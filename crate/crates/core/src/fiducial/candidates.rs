//! Quad candidates: adaptive threshold, outer-border tracing, polygon
//! approximation and geometric filters.

use super::{polygon_area, DetectorParams, Point};
use crate::frames::{to_grayscale, Frame};

/// Four corners, clockwise in image coordinates, starting nearest the
/// image origin.
pub type Quad = [Point; 4];

/// Mean-of-window threshold, inverted: `true` marks dark (foreground)
/// pixels whose value is at least `offset` below the local mean.
pub fn adaptive_threshold(gray: &Frame, window: u32, offset: f64) -> Vec<bool> {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let px = gray.pixels();
    let mut integral = vec![0u64; (w + 1) * (h + 1)];
    for y in 0..h {
        let mut row = 0u64;
        for x in 0..w {
            row += px[y * w + x] as u64;
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let r = (window / 2) as usize;
    let mut out = vec![false; w * h];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
        for x in 0..w {
            let (x0, x1) = (x.saturating_sub(r), (x + r + 1).min(w));
            let sum = integral[y1 * (w + 1) + x1] + integral[y0 * (w + 1) + x0]
                - integral[y0 * (w + 1) + x1]
                - integral[y1 * (w + 1) + x0];
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            out[y * w + x] = px[y * w + x] as f64 <= sum as f64 / n - offset;
        }
    }
    out
}

const DIRS: [(i32, i32); 8] = [(1, 0), (1, 1), (0, 1), (-1, 1), (-1, 0), (-1, -1), (0, -1), (1, -1)];

struct Component {
    start: (i32, i32),
    min: (i32, i32),
    max: (i32, i32),
}

/// 8-connected labeling. Labels start at 1; 0 is background.
fn label_components(mask: &[bool], w: usize, h: usize) -> (Vec<u32>, Vec<Component>) {
    let mut labels = vec![0u32; w * h];
    let mut comps = Vec::new();
    let mut stack = Vec::new();
    for idx in 0..w * h {
        if !mask[idx] || labels[idx] != 0 {
            continue;
        }
        let label = comps.len() as u32 + 1;
        let (sx, sy) = ((idx % w) as i32, (idx / w) as i32);
        let mut comp = Component { start: (sx, sy), min: (sx, sy), max: (sx, sy) };
        labels[idx] = label;
        stack.push(idx);
        while let Some(i) = stack.pop() {
            let (x, y) = ((i % w) as i32, (i / w) as i32);
            comp.min = (comp.min.0.min(x), comp.min.1.min(y));
            comp.max = (comp.max.0.max(x), comp.max.1.max(y));
            for (dx, dy) in DIRS {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w as i32 || ny >= h as i32 {
                    continue;
                }
                let j = ny as usize * w + nx as usize;
                if mask[j] && labels[j] == 0 {
                    labels[j] = label;
                    stack.push(j);
                }
            }
        }
        comps.push(comp);
    }
    (labels, comps)
}

/// Moore-neighbour trace of the outer border of the component containing
/// `start`, which must be its first pixel in raster order.
fn trace_outer(labels: &[u32], w: usize, h: usize, label: u32, start: (i32, i32)) -> Vec<(i32, i32)> {
    let inside = |x: i32, y: i32| {
        x >= 0 && y >= 0 && x < w as i32 && y < h as i32 && labels[y as usize * w + x as usize] == label
    };
    let mut contour = vec![start];
    let mut cur = start;
    // west of the first raster pixel is always outside
    let mut back = 4usize;
    let mut first_move: Option<usize> = None;
    let limit = 4 * w * h + 8;
    for _ in 0..limit {
        let mut next = None;
        for i in 1..=8 {
            let d = (back + i) % 8;
            let (nx, ny) = (cur.0 + DIRS[d].0, cur.1 + DIRS[d].1);
            if inside(nx, ny) {
                next = Some((d, (nx, ny)));
                break;
            }
        }
        let Some((d, n)) = next else {
            return contour; // isolated pixel
        };
        if cur == start {
            match first_move {
                None => first_move = Some(d),
                Some(f) if f == d => {
                    contour.pop();
                    break;
                }
                _ => {}
            }
        }
        back = if d % 2 == 0 { (d + 6) % 8 } else { (d + 5) % 8 };
        cur = n;
        contour.push(cur);
    }
    contour
}

fn perp_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len = dx.hypot(dy);
    if len == 0.0 {
        return (p.0 - a.0).hypot(p.1 - a.1);
    }
    ((p.0 - a.0) * dy - (p.1 - a.1) * dx).abs() / len
}

/// Douglas-Peucker over `pts[lo..=hi]`, pushing kept interior indices.
fn simplify(pts: &[(f64, f64)], lo: usize, hi: usize, eps: f64, out: &mut Vec<usize>) {
    if hi <= lo + 1 {
        return;
    }
    let (mut best, mut best_d) = (lo, -1.0);
    for i in lo + 1..hi {
        let d = perp_distance(pts[i], pts[lo], pts[hi]);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    if best_d > eps {
        simplify(pts, lo, best, eps, out);
        out.push(best);
        simplify(pts, best, hi, eps, out);
    }
}

/// Closed-polygon approximation; returns vertex indices into `pts` in
/// contour order.
fn approx_closed(pts: &[(f64, f64)], eps: f64) -> Vec<usize> {
    let n = pts.len();
    let far_from = |k: usize| {
        (0..n)
            .max_by(|&i, &j| {
                let di = (pts[i].0 - pts[k].0).hypot(pts[i].1 - pts[k].1);
                let dj = (pts[j].0 - pts[k].0).hypot(pts[j].1 - pts[k].1);
                di.total_cmp(&dj).then(j.cmp(&i))
            })
            .unwrap()
    };
    let a = far_from(0);
    let b = far_from(a);
    let (a, b) = (a.min(b), a.max(b));
    if a == b {
        return vec![a];
    }
    let mut out = vec![a];
    simplify(pts, a, b, eps, &mut out);
    out.push(b);
    // wrap the second chain by rotating the sequence
    let rotated: Vec<(f64, f64)> = pts[b..].iter().chain(pts[..=a].iter()).copied().collect();
    let mut tail = Vec::new();
    simplify(&rotated, 0, rotated.len() - 1, eps, &mut tail);
    out.extend(tail.into_iter().map(|i| (i + b) % n));
    out
}

fn is_convex(q: &Quad) -> bool {
    let mut sign = 0.0f64;
    for i in 0..4 {
        let (a, b, c) = (q[i], q[(i + 1) % 4], q[(i + 2) % 4]);
        let cross = (b.x - a.x) * (c.y - b.y) - (b.y - a.y) * (c.x - b.x);
        if cross == 0.0 || (sign != 0.0 && cross.signum() != sign) {
            return false;
        }
        sign = cross.signum();
    }
    true
}

/// Fit a line to pixel centres (total least squares) and push it outward by
/// the expected half-pixel inset of a rasterized edge.
fn fit_edge(points: &[(f64, f64)], centroid: Point) -> Option<(Point, (f64, f64))> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in points {
        let (dx, dy) = (p.0 - mx, p.1 - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let dir = (theta.cos(), theta.sin());
    let mut normal = (-dir.1, dir.0);
    if (mx - centroid.x) * normal.0 + (my - centroid.y) * normal.1 < 0.0 {
        normal = (-normal.0, -normal.1);
    }
    let inset = 0.5 * normal.0.abs().max(normal.1.abs());
    Some((Point::new(mx + inset * normal.0, my + inset * normal.1), dir))
}

fn intersect(a: (Point, (f64, f64)), b: (Point, (f64, f64))) -> Option<Point> {
    let (p, r) = a;
    let (q, s) = b;
    let denom = r.0 * s.1 - r.1 * s.0;
    if denom.abs() < 1e-9 {
        return None;
    }
    let t = ((q.x - p.x) * s.1 - (q.y - p.y) * s.0) / denom;
    Some(Point::new(p.x + t * r.0, p.y + t * r.1))
}

/// Sub-pixel corners from edge lines fitted between the approximate
/// vertices. Falls back to the vertex pixel centres when a fit is unstable.
fn refine_corners(pts: &[(f64, f64)], verts: &[usize; 4], raw: &Quad) -> Quad {
    let n = pts.len();
    let centroid = Point::new(raw.iter().map(|p| p.x).sum::<f64>() / 4.0, raw.iter().map(|p| p.y).sum::<f64>() / 4.0);
    let mut lines = Vec::with_capacity(4);
    for i in 0..4 {
        let (s, e) = (verts[i], verts[(i + 1) % 4]);
        let len = (e + n - s) % n;
        let margin = (len / 8).max(2);
        if len <= 2 * margin + 1 {
            return *raw;
        }
        let seg: Vec<(f64, f64)> = (margin..=len - margin).map(|k| pts[(s + k) % n]).collect();
        match fit_edge(&seg, centroid) {
            Some(l) => lines.push(l),
            None => return *raw,
        }
    }
    let mut out = *raw;
    for i in 0..4 {
        // vertex i sits between edge i-1 and edge i
        let Some(p) = intersect(lines[(i + 3) % 4], lines[i]) else {
            return *raw;
        };
        if p.dist(raw[i]) > 3.0 {
            return *raw;
        }
        out[i] = p;
    }
    out
}

/// Rotate/reverse so the order is clockwise in image coordinates and starts
/// at the corner nearest the origin.
fn canonical_order(mut q: Quad) -> Quad {
    if polygon_area(&q) < 0.0 {
        q.reverse();
    }
    let first = (0..4).min_by(|&i, &j| (q[i].x + q[i].y).total_cmp(&(q[j].x + q[j].y))).unwrap();
    [q[first], q[(first + 1) % 4], q[(first + 2) % 4], q[(first + 3) % 4]]
}

fn quad_perimeter(q: &Quad) -> f64 {
    (0..4).map(|i| q[i].dist(q[(i + 1) % 4])).sum()
}

/// Mean corner distance under the best cyclic alignment.
fn quad_distance(a: &Quad, b: &Quad) -> f64 {
    (0..4)
        .map(|s| (0..4).map(|i| a[i].dist(b[(i + s) % 4])).sum::<f64>() / 4.0)
        .fold(f64::INFINITY, f64::min)
}

pub fn find_candidates(f: &Frame, params: &DetectorParams) -> Vec<Quad> {
    let gray = to_grayscale(f);
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mask = adaptive_threshold(&gray, params.window, params.offset);
    let (labels, comps) = label_components(&mask, w, h);

    let mut quads: Vec<Quad> = Vec::new();
    for (k, comp) in comps.iter().enumerate() {
        let (bw, bh) = (comp.max.0 - comp.min.0 + 1, comp.max.1 - comp.min.1 + 1);
        // a quad's perimeter never exceeds that of its bounding box
        if 2.0 * (bw + bh) as f64 <= params.min_perimeter {
            continue;
        }
        // markers cut by the frame edge cannot be decoded
        if comp.min.0 == 0 || comp.min.1 == 0 || comp.max.0 == w as i32 - 1 || comp.max.1 == h as i32 - 1 {
            continue;
        }
        let contour = trace_outer(&labels, w, h, k as u32 + 1, comp.start);
        if contour.len() < 8 {
            continue;
        }
        let pts: Vec<(f64, f64)> = contour.iter().map(|&(x, y)| (x as f64 + 0.5, y as f64 + 0.5)).collect();
        let perimeter: f64 = (0..pts.len())
            .map(|i| {
                let (a, b) = (pts[i], pts[(i + 1) % pts.len()]);
                (a.0 - b.0).hypot(a.1 - b.1)
            })
            .sum();
        if perimeter < params.min_perimeter {
            continue;
        }
        let verts = approx_closed(&pts, params.approx_epsilon * perimeter);
        if verts.len() != 4 {
            continue;
        }
        let mut vs = [verts[0], verts[1], verts[2], verts[3]];
        vs.sort_unstable();
        let raw: Quad = vs.map(|i| Point::new(pts[i].0, pts[i].1));
        if !is_convex(&raw) {
            continue;
        }
        let q = refine_corners(&pts, &vs, &raw);
        if !is_convex(&q) || quad_perimeter(&q) < params.min_perimeter {
            continue;
        }
        let mut min_d = f64::INFINITY;
        for i in 0..4 {
            for j in i + 1..4 {
                min_d = min_d.min(q[i].dist(q[j]));
            }
        }
        if min_d < params.min_corner_distance {
            continue;
        }
        let sides: Vec<f64> = (0..4).map(|i| q[i].dist(q[(i + 1) % 4])).collect();
        let longest = sides.iter().cloned().fold(0.0, f64::max);
        let shortest = sides.iter().cloned().fold(f64::INFINITY, f64::min);
        if longest > params.max_aspect * shortest {
            continue;
        }
        quads.push(canonical_order(q));
    }

    // proximity: of two near-identical candidates keep the larger
    quads.sort_by(|a, b| quad_perimeter(b).total_cmp(&quad_perimeter(a)));
    let mut kept: Vec<Quad> = Vec::with_capacity(quads.len());
    for q in quads {
        if kept.iter().all(|k| quad_distance(k, &q) >= params.min_marker_distance) {
            kept.push(q);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_frame(w: u32, h: u32, x0: u32, y0: u32, side: u32) -> Frame {
        let mut f = Frame::filled(w, h, 1, 255).unwrap();
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                f.set(x, y, 0, 0);
            }
        }
        f
    }

    #[test]
    fn blank_frame_has_no_candidates() {
        let f = Frame::filled(200, 150, 1, 255).unwrap();
        assert!(find_candidates(&f, &DetectorParams::default()).is_empty());
    }

    #[test]
    fn uniform_regions_are_background() {
        let f = Frame::filled(20, 20, 1, 0).unwrap();
        assert!(adaptive_threshold(&f, 15, 7.0).iter().all(|&b| !b));
    }

    #[test]
    fn trace_small_square() {
        let mut mask = vec![false; 25];
        for y in 1..4 {
            for x in 1..4 {
                mask[y * 5 + x] = true;
            }
        }
        let (labels, comps) = label_components(&mask, 5, 5);
        assert_eq!(comps.len(), 1);
        let c = trace_outer(&labels, 5, 5, 1, comps[0].start);
        // 3x3 block: 8 border pixels, the centre is interior
        assert_eq!(c.len(), 8);
        assert!(!c.contains(&(2, 2)));
    }

    #[test]
    fn solid_square_corners_are_exact() {
        let f = square_frame(200, 160, 50, 40, 60);
        let qs = find_candidates(&f, &DetectorParams::default());
        assert_eq!(qs.len(), 1);
        let expect = [(50.0, 40.0), (110.0, 40.0), (110.0, 100.0), (50.0, 100.0)];
        for (p, e) in qs[0].iter().zip(expect) {
            assert!(p.dist(Point::new(e.0, e.1)) < 0.25, "{p:?} vs {e:?}");
        }
    }

    #[test]
    fn tiny_square_fails_candidacy() {
        let f = square_frame(100, 100, 40, 40, 8);
        assert!(find_candidates(&f, &DetectorParams::default()).is_empty());
    }

    #[test]
    fn canonical_order_is_clockwise_from_origin() {
        let q = [Point::new(10.0, 10.0), Point::new(0.0, 10.0), Point::new(0.0, 0.0), Point::new(10.0, 0.0)];
        let c = canonical_order(q);
        assert_eq!(c[0], Point::new(0.0, 0.0));
        assert_eq!(c[1], Point::new(10.0, 0.0));
        assert!(polygon_area(&c) > 0.0);
    }
}
