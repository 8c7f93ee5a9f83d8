//! Points, polylines and control-point sets.

use serde::{Deserialize, Serialize};

/// Sub-pixel position in pixel units (`x` right, `y` down).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(&self, other: &Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn lerp(&self, other: &Point, t: f64) -> Point {
        Point::new(self.x + (other.x - self.x) * t, self.y + (other.y - self.y) * t)
    }
}

impl From<[f64; 2]> for Point {
    fn from(p: [f64; 2]) -> Self {
        Point::new(p[0], p[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LineKind {
    #[serde(rename = "text")]
    TextMidline,
    #[serde(rename = "rule")]
    RulingLine,
}

/// Ordered polyline labelled as a text midline or a ruling line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineElement {
    pub kind: LineKind,
    pub points: Vec<Point>,
}

impl LineElement {
    pub fn new(kind: LineKind, points: Vec<Point>) -> Self {
        Self { kind, points }
    }

    pub fn arc_length(&self) -> f64 {
        self.points.windows(2).map(|w| w[0].distance(&w[1])).sum()
    }

    /// At least two points and no repeated consecutive points.
    pub fn is_well_formed(&self) -> bool {
        self.points.len() >= 2 && self.points.windows(2).all(|w| w[0] != w[1])
    }

    /// Resample so that consecutive points are at most `spacing` apart,
    /// keeping all original vertices.
    pub fn densified(&self, spacing: f64) -> LineElement {
        let mut points = Vec::with_capacity(self.points.len());
        for w in self.points.windows(2) {
            let n = (w[0].distance(&w[1]) / spacing).ceil().max(1.0) as usize;
            for k in 0..n {
                points.push(w[0].lerp(&w[1], k as f64 / n as f64));
            }
        }
        if let Some(last) = self.points.last() {
            points.push(*last);
        }
        LineElement::new(self.kind, points)
    }
}

/// Points sampled along a line at a fixed arc-length interval.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlPointSet {
    pub points: Vec<Point>,
    pub line_id: usize,
    /// Sampling interval in pixels.
    pub interval: f64,
}

impl ControlPointSet {
    pub fn new(points: Vec<Point>, line_id: usize, interval: f64) -> Self {
        Self { points, line_id, interval }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Flattened `[x0, y0, x1, y1, ...]`.
    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y]).collect()
    }

    pub fn from_flat(flat: &[f64], line_id: usize, interval: f64) -> Self {
        let points = flat.chunks_exact(2).map(|c| Point::new(c[0], c[1])).collect();
        Self { points, line_id, interval }
    }
}
