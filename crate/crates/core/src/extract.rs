//! Straight line-element extraction: gradient edges, segment detection by
//! orientation-consistent region growing, and slope/intercept filtering.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{LineElement, LineKind, Point};
use crate::raster::Raster;

pub const DEFAULT_LOW_THRESHOLD: f64 = 0.1;
pub const DEFAULT_HIGH_THRESHOLD: f64 = 0.2;

/// Orientation agreement for region growing.
pub const ANGLE_TOLERANCE: f64 = PI / 8.0;
pub const MIN_SEGMENT_LENGTH: f64 = 10.0;
pub const MAX_FIT_RMS: f64 = 1.5;

/// Number of sampled line orientations over `[0, pi)`.
const DIRECTIONS: usize = 16;
/// Shortest edge run (in pixels, both sides together) that supports an
/// orientation at a pixel.
const MIN_RUN: usize = 7;
const MAX_RUN: usize = 512;
/// A pixel joins a region when it supports an orientation this close to the
/// seed's, so any two members agree within [`ANGLE_TOLERANCE`].
const JOIN_TOLERANCE: f64 = ANGLE_TOLERANCE / 2.0 + 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Point,
    pub end: Point,
    /// Fraction of the fitted segment's length covered by edge pixels, in `[0, 1]`.
    pub strength: f64,
}

impl Segment {
    pub fn new(start: Point, end: Point, strength: f64) -> Self {
        Self { start, end, strength }
    }

    pub fn length(&self) -> f64 {
        self.start.distance(&self.end)
    }

    /// `dy / dx`; `+inf` for vertical segments.
    pub fn slope(&self) -> f64 {
        let dx = self.end.x - self.start.x;
        let dy = self.end.y - self.start.y;
        if dx == 0.0 {
            f64::INFINITY
        } else {
            dy / dx
        }
    }

    pub fn midpoint(&self) -> Point {
        self.start.lerp(&self.end, 0.5)
    }

    pub fn to_line(&self) -> LineElement {
        LineElement::new(LineKind::RulingLine, vec![self.start, self.end])
    }
}

/// Thresholds of [`filter_segments`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Keep segments with `|slope| < alpha`.
    pub alpha: f64,
    /// Keep segments with `|slope| > beta`.
    pub beta: f64,
    pub eps_slope: f64,
    /// Intercept tolerance in pixels.
    pub delta: f64,
}

impl Default for FilterParams {
    fn default() -> Self {
        Self { alpha: 0.2, beta: 5.0, eps_slope: 0.05, delta: 3.0 }
    }
}

/// Gradient magnitude with 3x3 central-difference kernels on the luma
/// channel, followed by hysteresis with thresholds relative to the maximum
/// magnitude. Returns a binary edge map.
pub fn detect_edges(image: &Raster, low: f64, high: f64) -> Result<Raster> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
        return Err(Error::invalid(format!(
            "hysteresis thresholds ({low}, {high}) must satisfy 0 <= low <= high <= 1"
        )));
    }
    let luma = image.to_luma();
    let (h, w) = (luma.height(), luma.width());
    let at = |y: usize, x: usize| luma.get(y, x, 0);
    let mut mag = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let gx = 0.5 * (at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1)));
            let gy = 0.5 * (at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x));
            mag[y * w + x] = gx.hypot(gy);
        }
    }
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut edges = vec![0.0; h * w];
    if max > 0.0 {
        let (lo, hi) = (low * max, high * max);
        let mut stack: Vec<usize> = (0..h * w).filter(|&k| mag[k] >= hi && mag[k] > 0.0).collect();
        for &k in &stack {
            edges[k] = 1.0;
        }
        while let Some(k) = stack.pop() {
            let (y, x) = ((k / w) as i64, (k % w) as i64);
            for (dy, dx) in NEIGHBOURS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if edges[n] == 0.0 && mag[n] >= lo && mag[n] > 0.0 {
                    edges[n] = 1.0;
                    stack.push(n);
                }
            }
        }
    }
    Raster::new(h, w, 1, edges)
}

const NEIGHBOURS: [(i64, i64); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// Angle of orientation `d` and the unit step along it.
fn direction(d: usize) -> (f64, [f64; 2]) {
    let a = d as f64 * PI / DIRECTIONS as f64;
    (a, [a.cos(), a.sin()])
}

/// Difference of two line orientations modulo pi.
fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(PI);
    d.min(PI - d)
}

/// Edge-run length through each pixel along each orientation.
fn run_lengths(on: &[bool], h: usize, w: usize) -> Vec<[u16; DIRECTIONS]> {
    let mut runs = vec![[0u16; DIRECTIONS]; h * w];
    let walk = |x: usize, y: usize, step: [f64; 2]| {
        let mut n = 0;
        for k in 1..MAX_RUN {
            let px = (x as f64 + step[0] * k as f64).round();
            let py = (y as f64 + step[1] * k as f64).round();
            if px < 0.0 || py < 0.0 || px >= w as f64 || py >= h as f64 || !on[py as usize * w + px as usize] {
                break;
            }
            n = k;
        }
        n
    };
    for y in 0..h {
        for x in 0..w {
            if !on[y * w + x] {
                continue;
            }
            for d in 0..DIRECTIONS {
                let (_, s) = direction(d);
                let n = 1 + walk(x, y, s) + walk(x, y, [-s[0], -s[1]]);
                runs[y * w + x][d] = n.min(u16::MAX as usize) as u16;
            }
        }
    }
    runs
}

/// Group edge pixels into straight segments.
///
/// Each edge pixel supports the orientations along which it lies on an edge
/// run of at least 7 pixels. Regions grow from the pixels with the longest
/// runs over 8-connected neighbours supporting an orientation within 22.5
/// degrees of the seed's; a pixel may join one region per orientation class,
/// so crossings feed both lines. Each region's principal axis is fitted and
/// kept when it is at least 10 px long with an RMS residual of at most 1.5 px.
pub fn detect_segments(edges: &Raster) -> Vec<Segment> {
    let (h, w) = (edges.height(), edges.width());
    let on: Vec<bool> = edges.data().iter().map(|&v| v >= 0.5).collect();
    let runs = run_lengths(&on, h, w);
    let supports = |k: usize, angle: f64| {
        (0..DIRECTIONS).any(|d| runs[k][d] as usize >= MIN_RUN && angle_diff(direction(d).0, angle) <= JOIN_TOLERANCE)
    };

    let mut seeds: Vec<(usize, usize, u16)> = (0..h * w)
        .filter(|&k| on[k])
        .flat_map(|k| {
            let best = (0..DIRECTIONS).max_by_key(|&d| (runs[k][d], std::cmp::Reverse(d))).unwrap();
            (runs[k][best] as usize >= MIN_RUN).then_some((k, best, runs[k][best]))
        })
        .collect();
    seeds.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)));

    // Orientations (as bit sets) already claimed at each pixel.
    let mut claimed = vec![0u32; h * w];
    let claim_mask = |angle: f64| -> u32 {
        (0..DIRECTIONS).filter(|&d| angle_diff(direction(d).0, angle) <= ANGLE_TOLERANCE).fold(0, |m, d| m | 1 << d)
    };

    let mut segments = Vec::new();
    for (seed, d, _) in seeds {
        if claimed[seed] & (1 << d) != 0 {
            continue;
        }
        let angle = direction(d).0;
        let mask = claim_mask(angle);
        let mut region = vec![seed];
        claimed[seed] |= mask;
        let mut head = 0;
        while head < region.len() {
            let k = region[head];
            head += 1;
            let (y, x) = ((k / w) as i64, (k % w) as i64);
            for (dy, dx) in NEIGHBOURS {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    continue;
                }
                let n = ny as usize * w + nx as usize;
                if on[n] && claimed[n] & mask == 0 && supports(n, angle) {
                    claimed[n] |= mask;
                    region.push(n);
                }
            }
        }
        if let Some(s) = fit_segment(&region, w, &on) {
            segments.push(s);
        }
    }
    segments
}

/// Principal-axis fit of a pixel region.
fn fit_segment(region: &[usize], w: usize, on: &[bool]) -> Option<Segment> {
    if region.len() < 2 {
        return None;
    }
    let n = region.len() as f64;
    let pts: Vec<[f64; 2]> = region.iter().map(|&k| [(k % w) as f64, (k / w) as f64]).collect();
    let cx = pts.iter().map(|p| p[0]).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
    let (ux, uy) = (theta.cos(), theta.sin());
    let (mut tmin, mut tmax, mut resid) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for p in &pts {
        let (dx, dy) = (p[0] - cx, p[1] - cy);
        let t = dx * ux + dy * uy;
        let r = -dx * uy + dy * ux;
        tmin = tmin.min(t);
        tmax = tmax.max(t);
        resid += r * r;
    }
    let rms = (resid / n).sqrt();
    let length = tmax - tmin;
    if length < MIN_SEGMENT_LENGTH || rms > MAX_FIT_RMS {
        return None;
    }
    let start = Point::new(cx + tmin * ux, cy + tmin * uy);
    let end = Point::new(cx + tmax * ux, cy + tmax * uy);
    // Support: fraction of unit steps along the axis landing next to an edge pixel.
    let h = on.len() / w;
    let steps = length.floor() as usize + 1;
    let hits = (0..steps)
        .filter(|&k| {
            let p = start.lerp(&end, k as f64 / (steps - 1).max(1) as f64);
            let (x, y) = (p.x.round() as i64, p.y.round() as i64);
            (-1..=1).any(|dy| {
                (-1..=1).any(|dx| {
                    let (xx, yy) = (x + dx, y + dy);
                    xx >= 0 && yy >= 0 && (xx as usize) < w && (yy as usize) < h && on[yy as usize * w + xx as usize]
                })
            })
        })
        .count();
    Some(Segment::new(start, end, hits as f64 / steps as f64))
}

/// Orientation class used by the duplicate test.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Class {
    Horizontal,
    Vertical,
}

/// Slope and intercept of a segment in its class frame: `y = m x + c` for
/// near-horizontal segments, `x = m y + c` for near-vertical ones.
fn line_params(s: &Segment, class: Class) -> (f64, f64) {
    let (a, b) = match class {
        Class::Horizontal => ((s.start.x, s.start.y), (s.end.x, s.end.y)),
        Class::Vertical => ((s.start.y, s.start.x), (s.end.y, s.end.x)),
    };
    let m = (b.1 - a.1) / (b.0 - a.0);
    (m, a.1 - m * a.0)
}

fn class_of(s: &Segment, p: &FilterParams) -> Option<Class> {
    let m = s.slope().abs();
    if m < p.alpha {
        Some(Class::Horizontal)
    } else if m > p.beta {
        Some(Class::Vertical)
    } else {
        None
    }
}

/// Keep near-horizontal (`|slope| < alpha`) and near-vertical
/// (`|slope| > beta`) segments, then drop every segment whose slope and
/// intercept both match an already kept segment of the same class. Order of
/// the input decides which of two duplicates survives.
pub fn filter_segments(segments: &[Segment], params: &FilterParams) -> Result<Vec<Segment>> {
    if !(params.alpha < params.beta) {
        return Err(Error::invalid(format!("alpha {} must be below beta {}", params.alpha, params.beta)));
    }
    if !(params.alpha >= 0.0 && params.eps_slope >= 0.0 && params.delta >= 0.0) {
        return Err(Error::invalid("filter tolerances must be non-negative"));
    }
    let mut kept: Vec<(Segment, Class, f64, f64)> = Vec::new();
    for s in segments {
        let Some(class) = class_of(s, params) else { continue };
        let (m, c) = line_params(s, class);
        let duplicate = kept.iter().any(|&(_, kc, km, kcpt)| {
            kc == class && (m - km).abs() < params.eps_slope && (c - kcpt).abs() < params.delta
        });
        if !duplicate {
            kept.push((*s, class, m, c));
        }
    }
    Ok(kept.into_iter().map(|k| k.0).collect())
}

/// Edges, segments and filtering in one call.
pub fn extract_lines(image: &Raster, params: &FilterParams) -> Result<Vec<Segment>> {
    let edges = detect_edges(image, DEFAULT_LOW_THRESHOLD, DEFAULT_HIGH_THRESHOLD)?;
    filter_segments(&detect_segments(&edges), params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(x0: f64, y0: f64, x1: f64, y1: f64) -> Segment {
        Segment::new(Point::new(x0, y0), Point::new(x1, y1), 1.0)
    }

    fn with_slope(m: f64, c: f64) -> Segment {
        seg(0.0, c, 10.0, c + 10.0 * m)
    }

    fn draw(h: usize, w: usize, rects: &[(usize, usize, usize, usize)]) -> Raster {
        Raster::from_fn(h, w, 1, |y, x, _| {
            if rects.iter().any(|&(rx, ry, rw, rh)| x >= rx && x < rx + rw && y >= ry && y < ry + rh) {
                0.0
            } else {
                1.0
            }
        })
    }

    #[test]
    fn constant_image_has_no_edges() {
        let e = detect_edges(&Raster::filled(20, 20, 3, 0.7), 0.1, 0.2).unwrap();
        assert!(e.data().iter().all(|&v| v == 0.0));
        assert!(detect_segments(&e).is_empty());
    }

    #[test]
    fn step_edge_stays_within_one_column() {
        let c = 9;
        let img = Raster::from_fn(16, 20, 1, |_, x, _| if x >= c { 1.0 } else { 0.0 });
        let e = detect_edges(&img, 0.1, 0.2).unwrap();
        assert!(e.is_binary());
        for y in 0..16 {
            for x in 0..20 {
                if e.get(y, x, 0) == 1.0 {
                    assert!((c - 1..=c + 1).contains(&x), "edge at column {x}");
                }
            }
        }
        assert!(e.data().contains(&1.0));
    }

    #[test]
    fn single_ruling_gives_one_segment() {
        let img = draw(40, 80, &[(15, 20, 50, 2)]);
        let segs = detect_segments(&detect_edges(&img, 0.1, 0.2).unwrap());
        assert_eq!(segs.len(), 1, "{segs:?}");
        let s = &segs[0];
        let (a, b) = if s.start.x < s.end.x { (s.start, s.end) } else { (s.end, s.start) };
        assert!((a.x - 15.0).abs() <= 2.0 && (a.y - 20.5).abs() <= 2.0, "{a:?}");
        assert!((b.x - 64.0).abs() <= 2.0 && (b.y - 20.5).abs() <= 2.0, "{b:?}");
        assert!(s.strength > 0.9 && s.strength <= 1.0);
    }

    #[test]
    fn perpendicular_rulings_give_two_segments() {
        let img = draw(80, 80, &[(10, 40, 60, 2), (40, 10, 2, 60)]);
        let segs = detect_segments(&detect_edges(&img, 0.1, 0.2).unwrap());
        assert_eq!(segs.len(), 2, "{segs:?}");
    }

    #[test]
    fn filter_examples() {
        let p = FilterParams::default();
        assert_eq!(filter_segments(&[with_slope(0.1, 0.0)], &p).unwrap().len(), 1);
        let kept = filter_segments(&[with_slope(0.1, 0.0), with_slope(1.0, 0.0), with_slope(10.0, 40.0)], &p).unwrap();
        assert_eq!(kept.len(), 2);
        assert!((kept[0].slope() - 0.1).abs() < 1e-12 && (kept[1].slope() - 10.0).abs() < 1e-9);
        let dup = filter_segments(&[with_slope(0.0, 10.0), with_slope(0.01, 11.0)], &p).unwrap();
        assert_eq!(dup, vec![with_slope(0.0, 10.0)]);
        assert!(filter_segments(&[], &FilterParams { alpha: 5.0, beta: 5.0, ..p }).is_err());
    }

    #[test]
    fn vertical_duplicates_use_transposed_frame() {
        let p = FilterParams::default();
        let kept =
            filter_segments(&[seg(20.0, 0.0, 20.0, 30.0), seg(21.0, 0.0, 21.2, 30.0), seg(40.0, 0.0, 40.0, 30.0)], &p)
                .unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(seg(3.0, 0.0, 3.0, 5.0).slope(), f64::INFINITY);
    }
}
