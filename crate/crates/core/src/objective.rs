//! Training objectives: foreground-mask L1, backward-map L1 and the
//! curvature-consistency loss over line control points, with the analytic
//! gradient of the latter.
//!
//! Curvature uses unit-step discrete derivatives along the point sequence:
//! central differences inside, one-sided differences at both ends, and
//!
//! ```text
//! kappa_i = |x'_i y''_i - y'_i x''_i| / ((x'_i^2 + y'_i^2)^(3/2) + eps)
//! ```

use log::warn;

use crate::error::{Error, Result};
use crate::field::{warp_points, DeformationField};
use crate::geometry::{ControlPointSet, LineElement, Point};
use crate::raster::Raster;

pub const DEFAULT_EPSILON: f64 = 1e-4;
pub const DEFAULT_INTERVAL: f64 = 4.0;
pub const DEFAULT_GAMMA: f64 = 0.8;

/// Weights of the combined objective `map + seg + 0.1 * curvature`.
pub const MAP_WEIGHT: f64 = 1.0;
pub const SEG_WEIGHT: f64 = 1.0;
pub const CURVATURE_WEIGHT: f64 = 0.1;

/// Per-point curvature in 1/pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureProfile {
    pub kappas: Vec<f64>,
}

/// How per-point curvature differences are reduced to a scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureMode {
    /// Mean absolute difference.
    #[default]
    Absolute,
    /// Signed mean of `predicted - target`, unbounded below.
    Signed,
}

/// L1 between the foreground probability of 2-channel logits and a mask.
///
/// `pred` may be the `H x W x 2` logit map (channel 1 is turned into the
/// foreground probability with a unit-temperature softmax) or an `H x W`
/// single-channel probability map.
pub fn seg_loss(pred: &SegPrediction<'_>, gt_mask: &Raster) -> Result<f64> {
    let probs: Vec<f64> = match pred {
        SegPrediction::Logits { height, width, data } => {
            if *height != gt_mask.height() || *width != gt_mask.width() || data.len() != height * width * 2 {
                return Err(Error::invalid("segmentation logits and mask dimensions differ"));
            }
            data.chunks_exact(2).map(|l| sigmoid(l[1] - l[0])).collect()
        }
        SegPrediction::Probabilities(r) => {
            if !r.same_dims(gt_mask) || r.channels() != 1 {
                return Err(Error::invalid("segmentation map and mask dimensions differ"));
            }
            r.data().to_vec()
        }
    };
    if gt_mask.channels() != 1 {
        return Err(Error::invalid("ground-truth mask must be single-channel"));
    }
    let n = probs.len() as f64;
    Ok(probs.iter().zip(gt_mask.data()).map(|(p, m)| (p - m).abs()).sum::<f64>() / n)
}

/// Input accepted by [`seg_loss`].
#[derive(Clone, Copy, Debug)]
pub enum SegPrediction<'a> {
    Logits { height: usize, width: usize, data: &'a [f64] },
    Probabilities(&'a Raster),
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Expected foreground class under `softmax(gamma * logits)`, i.e. the
/// probability of class 1. `logits` is `H x W x 2`, row-major.
pub fn smooth_mask(height: usize, width: usize, logits: &[f64], gamma: f64) -> Result<Raster> {
    if !(gamma > 0.0) {
        return Err(Error::invalid(format!("smoothing coefficient {gamma} must be positive")));
    }
    if logits.len() != height * width * 2 {
        return Err(Error::invalid("logit map must have two channels"));
    }
    let data = logits.chunks_exact(2).map(|l| sigmoid(gamma * (l[1] - l[0]))).collect();
    Raster::new(height, width, 1, data)
}

/// Mean absolute coordinate difference over all cells and both components.
pub fn map_loss(pred: &DeformationField, gt: &DeformationField) -> Result<f64> {
    if !pred.same_shape(gt) || pred.direction() != gt.direction() {
        return Err(Error::invalid("map loss needs fields of equal shape and direction"));
    }
    let sum: f64 = pred.coords().iter().zip(gt.coords()).map(|(a, b)| (a[0] - b[0]).abs() + (a[1] - b[1]).abs()).sum();
    Ok(sum / (2 * pred.coords().len()) as f64)
}

/// Gradient of [`map_loss`] with respect to the predicted coordinates.
pub fn map_loss_grad(pred: &DeformationField, gt: &DeformationField) -> Result<Vec<[f64; 2]>> {
    if !pred.same_shape(gt) || pred.direction() != gt.direction() {
        return Err(Error::invalid("map loss needs fields of equal shape and direction"));
    }
    let scale = 1.0 / (2 * pred.coords().len()) as f64;
    Ok(pred
        .coords()
        .iter()
        .zip(gt.coords())
        .map(|(a, b)| [sign(a[0] - b[0]) * scale, sign(a[1] - b[1]) * scale])
        .collect())
}

/// Sign with `sign(0) = 0`.
#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Points at arc-length multiples of `interval` from the start of the line,
/// with the final vertex appended when it does not fall on a multiple.
pub fn sample_line(line: &LineElement, interval: f64, line_id: usize) -> Result<ControlPointSet> {
    if !(interval > 0.0) {
        return Err(Error::invalid(format!("sampling interval {interval} must be positive")));
    }
    let length = line.arc_length();
    if line.points.len() < 2 || length < 2.0 * interval {
        return Err(Error::TooShort { length, required: 2.0 * interval });
    }
    let mut out = vec![line.points[0]];
    let mut next = interval;
    let mut walked = 0.0;
    for w in line.points.windows(2) {
        let seg = w[0].distance(&w[1]);
        while seg > 0.0 && next <= walked + seg + 1e-9 {
            let t = ((next - walked) / seg).min(1.0);
            out.push(w[0].lerp(&w[1], t));
            next += interval;
        }
        walked += seg;
    }
    let last = *line.points.last().unwrap();
    if out.last().is_none_or(|p| p.distance(&last) > 1e-9) {
        out.push(last);
    }
    Ok(ControlPointSet::new(out, line_id, interval))
}

/// First and second unit-step differences of one coordinate sequence.
fn differences(v: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = v.len();
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    for i in 0..n {
        if i == 0 {
            d1[i] = v[1] - v[0];
            d2[i] = v[2] - 2.0 * v[1] + v[0];
        } else if i == n - 1 {
            d1[i] = v[n - 1] - v[n - 2];
            d2[i] = v[n - 1] - 2.0 * v[n - 2] + v[n - 3];
        } else {
            d1[i] = 0.5 * (v[i + 1] - v[i - 1]);
            d2[i] = v[i + 1] - 2.0 * v[i] + v[i - 1];
        }
    }
    (d1, d2)
}

/// Stencil coefficients `(index, d1 coefficient, d2 coefficient)` of point
/// `i` in a sequence of length `n`.
fn stencil(i: usize, n: usize) -> [(usize, f64, f64); 3] {
    if i == 0 {
        [(0, -1.0, 1.0), (1, 1.0, -2.0), (2, 0.0, 1.0)]
    } else if i == n - 1 {
        [(n - 3, 0.0, 1.0), (n - 2, -1.0, -2.0), (n - 1, 1.0, 1.0)]
    } else {
        [(i - 1, -0.5, 1.0), (i, 0.0, -2.0), (i + 1, 0.5, 1.0)]
    }
}

pub fn curvature(points: &ControlPointSet, epsilon: f64) -> Result<CurvatureProfile> {
    if points.len() < 3 {
        return Err(Error::invalid(format!("curvature needs at least 3 points, got {}", points.len())));
    }
    let xs: Vec<f64> = points.points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = points.points.iter().map(|p| p.y).collect();
    let (x1, x2) = differences(&xs);
    let (y1, y2) = differences(&ys);
    let kappas = (0..xs.len())
        .map(|i| {
            let cross = x1[i] * y2[i] - y1[i] * x2[i];
            let speed2 = x1[i] * x1[i] + y1[i] * y1[i];
            cross.abs() / (speed2 * speed2.sqrt() + epsilon)
        })
        .collect();
    Ok(CurvatureProfile { kappas })
}

/// Terms entering the loss: the first `N - 1` points, normalized by `N - 1`.
fn loss_terms(n: usize) -> std::ops::Range<usize> {
    0..n - 1
}

pub fn curvature_loss(pred: &ControlPointSet, gt: &ControlPointSet, epsilon: f64, mode: CurvatureMode) -> Result<f64> {
    check_pair(pred, gt)?;
    let kp = curvature(pred, epsilon)?.kappas;
    let kg = curvature(gt, epsilon)?.kappas;
    let n = kp.len();
    let sum: f64 = loss_terms(n)
        .map(|i| match mode {
            CurvatureMode::Absolute => (kp[i] - kg[i]).abs(),
            CurvatureMode::Signed => kp[i] - kg[i],
        })
        .sum();
    Ok(sum / (n - 1) as f64)
}

fn check_pair(pred: &ControlPointSet, gt: &ControlPointSet) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!("control point sets differ in length: {} vs {}", pred.len(), gt.len())));
    }
    if pred.len() < 3 {
        return Err(Error::invalid("curvature loss needs at least 3 points"));
    }
    Ok(())
}

/// Analytic gradient of the absolute-mode curvature loss with respect to the
/// predicted points. Kinks of `|.|` (equal curvature, or zero cross term)
/// take subgradient 0.
pub fn curvature_loss_grad(pred: &ControlPointSet, gt: &ControlPointSet, epsilon: f64) -> Result<Vec<Point>> {
    check_pair(pred, gt)?;
    let n = pred.len();
    let kg = curvature(gt, epsilon)?.kappas;
    let xs: Vec<f64> = pred.points.iter().map(|p| p.x).collect();
    let ys: Vec<f64> = pred.points.iter().map(|p| p.y).collect();
    let (x1, x2) = differences(&xs);
    let (y1, y2) = differences(&ys);
    let mut grad = vec![Point::new(0.0, 0.0); n];
    let scale = 1.0 / (n - 1) as f64;
    for i in loss_terms(n) {
        let cross = x1[i] * y2[i] - y1[i] * x2[i];
        let speed2 = x1[i] * x1[i] + y1[i] * y1[i];
        let speed = speed2.sqrt();
        let denom = speed2 * speed + epsilon;
        let kappa = cross.abs() / denom;
        let outer = sign(kappa - kg[i]) * scale;
        if outer == 0.0 {
            continue;
        }
        let sc = sign(cross);
        // d kappa / d (x', y', x'', y'')
        let dd = 3.0 * speed * cross.abs() / (denom * denom);
        let g_x1 = sc * y2[i] / denom - dd * x1[i];
        let g_y1 = -sc * x2[i] / denom - dd * y1[i];
        let g_x2 = -sc * y1[i] / denom;
        let g_y2 = sc * x1[i] / denom;
        for (j, c1, c2) in stencil(i, n) {
            grad[j].x += outer * (g_x1 * c1 + g_x2 * c2);
            grad[j].y += outer * (g_y1 * c1 + g_y2 * c2);
        }
    }
    Ok(grad)
}

/// Result of [`line_supervision`].
#[derive(Clone, Debug, PartialEq)]
pub struct LineSupervision {
    /// Mean per-line curvature loss; 0 when no line contributed.
    pub loss: f64,
    pub lines_used: usize,
    /// Lines shorter than twice the sampling interval.
    pub lines_skipped: usize,
    /// Set when no line contributed, so the loss is the empty-mean convention.
    pub empty: bool,
}

/// Sample every line, map the samples through the predicted and ground-truth
/// fields and average the curvature loss over lines. Lines too short to
/// sample are skipped and counted.
pub fn line_supervision(
    pred: &DeformationField,
    gt: &DeformationField,
    lines: &[LineElement],
    interval: f64,
    epsilon: f64,
) -> Result<LineSupervision> {
    let sets = sample_lines(lines, interval)?;
    let skipped = lines.len() - sets.len();
    if sets.is_empty() {
        warn!("line supervision over an empty line set is defined as 0");
        return Ok(LineSupervision { loss: 0.0, lines_used: 0, lines_skipped: skipped, empty: true });
    }
    let mut total = 0.0;
    for p in &sets {
        let cp = warp_points(p, pred)?;
        let cp_gt = warp_points(p, gt)?;
        total += curvature_loss(&cp, &cp_gt, epsilon, CurvatureMode::Absolute)?;
    }
    Ok(LineSupervision {
        loss: total / sets.len() as f64,
        lines_used: sets.len(),
        lines_skipped: skipped,
        empty: false,
    })
}

/// Sample all lines long enough for the interval, keeping their indices as ids.
pub fn sample_lines(lines: &[LineElement], interval: f64) -> Result<Vec<ControlPointSet>> {
    let mut out = Vec::with_capacity(lines.len());
    for (id, line) in lines.iter().enumerate() {
        match sample_line(line, interval, id) {
            Ok(set) => out.push(set),
            Err(Error::TooShort { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

/// [`line_supervision`] and its gradient with respect to the predicted field
/// coordinates (normalized units), given pre-sampled control points.
pub fn line_supervision_grad(
    pred: &DeformationField,
    gt: &DeformationField,
    samples: &[ControlPointSet],
    epsilon: f64,
) -> Result<(f64, Vec<[f64; 2]>)> {
    let mut grad = vec![[0.0; 2]; pred.coords().len()];
    if samples.is_empty() {
        return Ok((0.0, grad));
    }
    let (sx, sy) = pred.pixel_scale();
    let inv = 1.0 / samples.len() as f64;
    let mut total = 0.0;
    for p in samples {
        let cp = warp_points(p, pred)?;
        let cp_gt = warp_points(p, gt)?;
        total += curvature_loss(&cp, &cp_gt, epsilon, CurvatureMode::Absolute)?;
        let g = curvature_loss_grad(&cp, &cp_gt, epsilon)?;
        for (pt, gp) in p.points.iter().zip(&g) {
            let (idx, w) = pred.stencil(pt.x, pt.y)?;
            for k in 0..4 {
                grad[idx[k]][0] += inv * w[k] * gp.x * sx;
                grad[idx[k]][1] += inv * w[k] * gp.y * sy;
            }
        }
    }
    Ok((total * inv, grad))
}
