//! Direct field optimization: fit a coarse offset grid, bilinearly upsampled
//! to full resolution, to a training sample's target field by guarded
//! gradient descent on the map loss plus weighted line supervision.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::field::{DeformationField, Direction};
use crate::geometry::ControlPointSet;
use crate::objective::{
    line_supervision_grad, map_loss, map_loss_grad, sample_lines, CURVATURE_WEIGHT, DEFAULT_EPSILON, DEFAULT_INTERVAL,
};
use crate::synthdoc::TrainingSample;

/// Spacing of the fixed point set used for the displacement metric.
pub const DISPLACEMENT_SPACING: f64 = 2.0;

const MAX_HALVINGS: usize = 40;
const GROWTH: f64 = 1.25;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DemoConfig {
    pub iterations: usize,
    /// Initial step: the largest coordinate change of the first trial step,
    /// in pixels.
    pub learning_rate: f64,
    /// Weight of the line-supervision term; 0 disables it.
    pub curvature_weight: f64,
    /// Arc-length interval of the supervised control points, in pixels.
    pub interval: f64,
    pub epsilon: f64,
    /// Side of the coarse offset grid.
    pub coarse_size: usize,
    pub basis: CoarseBasis,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 2.0,
            curvature_weight: CURVATURE_WEIGHT,
            interval: DEFAULT_INTERVAL,
            epsilon: DEFAULT_EPSILON,
            coarse_size: 36,
            basis: CoarseBasis::Bilinear,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub total: f64,
    pub map: f64,
    pub line: f64,
    /// Step length (max coordinate change, pixels) of the accepted step.
    pub step: f64,
}

#[derive(Clone, Debug)]
pub struct DemoReport {
    pub field: DeformationField,
    /// Row 0 is the initial state; one row per iteration after that.
    pub curve: Vec<LossRecord>,
    pub initial_displacement: f64,
    pub final_displacement: f64,
    /// Set when the step size collapsed before the iteration budget ran out.
    pub converged_early: bool,
}

impl DemoReport {
    pub fn initial_map_loss(&self) -> f64 {
        self.curve[0].map
    }

    pub fn final_map_loss(&self) -> f64 {
        self.curve.last().expect("curve has the initial row").map
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "iteration,total,map,line,step")?;
        for r in &self.curve {
            writeln!(w, "{},{:.9e},{:.9e},{:.9e},{:.6e}", r.iteration, r.total, r.map, r.line, r.step)?;
        }
        Ok(())
    }
}

/// Basis that carries the coarse offsets onto the full-resolution grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CoarseBasis {
    /// Corner-aligned bilinear interpolation.
    Bilinear,
    /// Uniform cubic B-spline on the same node positions (C2, approximating),
    /// with border nodes repeated.
    Cubic,
}

impl std::str::FromStr for CoarseBasis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bilinear" => Ok(Self::Bilinear),
            "cubic" => Ok(Self::Cubic),
            other => Err(Error::invalid(format!("unknown coarse basis `{other}`"))),
        }
    }
}

/// Per-axis taps from a coarse axis of `n` nodes onto `m` cells.
struct Axis {
    taps: Vec<[(usize, f64); 4]>,
}

impl Axis {
    fn new(n: usize, m: usize, basis: CoarseBasis) -> Self {
        let s = (n - 1) as f64 / (m - 1) as f64;
        let taps = (0..m)
            .map(|i| {
                let p = i as f64 * s;
                let r = p.round();
                let p = if (p - r).abs() < 1e-9 { r } else { p };
                let i0 = (p.floor() as usize).min(n - 2);
                let t = p - i0 as f64;
                match basis {
                    CoarseBasis::Bilinear => [(i0, 1.0 - t), (i0 + 1, t), (i0, 0.0), (i0, 0.0)],
                    CoarseBasis::Cubic => {
                        let u = 1.0 - t;
                        let w = [
                            u * u * u / 6.0,
                            (3.0 * t * t * t - 6.0 * t * t + 4.0) / 6.0,
                            (-3.0 * t * t * t + 3.0 * t * t + 3.0 * t + 1.0) / 6.0,
                            t * t * t / 6.0,
                        ];
                        let idx = |k: isize| (i0 as isize + k).clamp(0, n as isize - 1) as usize;
                        [(idx(-1), w[0]), (idx(0), w[1]), (idx(1), w[2]), (idx(2), w[3])]
                    }
                }
            })
            .collect();
        Self { taps }
    }
}

struct Upsampler {
    n: usize,
    rows: Axis,
    cols: Axis,
}

impl Upsampler {
    fn new(n: usize, h: usize, w: usize, basis: CoarseBasis) -> Self {
        Self { n, rows: Axis::new(n, h, basis), cols: Axis::new(n, w, basis) }
    }

    fn apply(&self, coarse: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out = Vec::with_capacity(self.rows.taps.len() * self.cols.taps.len());
        for ry in &self.rows.taps {
            for rx in &self.cols.taps {
                let mut v = [0.0; 2];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let c = coarse[iy * self.n + ix];
                        v[0] += wy * wx * c[0];
                        v[1] += wy * wx * c[1];
                    }
                }
                out.push(v);
            }
        }
        out
    }

    fn transpose(&self, fine: &[[f64; 2]]) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.n * self.n];
        let w = self.cols.taps.len();
        for (i, ry) in self.rows.taps.iter().enumerate() {
            for (j, rx) in self.cols.taps.iter().enumerate() {
                let g = fine[i * w + j];
                for &(iy, wy) in ry {
                    for &(ix, wx) in rx {
                        let o = &mut out[iy * self.n + ix];
                        o[0] += wy * wx * g[0];
                        o[1] += wy * wx * g[1];
                    }
                }
            }
        }
        out
    }
}

struct Problem<'a> {
    base: &'a DeformationField,
    target: &'a DeformationField,
    samples: Vec<ControlPointSet>,
    up: Upsampler,
    cfg: &'a DemoConfig,
}

struct Eval {
    field: DeformationField,
    map: f64,
    line: f64,
    total: f64,
}

impl Problem<'_> {
    fn field(&self, delta: &[[f64; 2]]) -> DeformationField {
        let fine = self.up.apply(delta);
        let coords = self.base.coords().iter().zip(&fine).map(|(b, d)| [b[0] + d[0], b[1] + d[1]]).collect();
        DeformationField::from_clamped(self.base.height(), self.base.width(), Direction::Backward, coords)
    }

    fn eval(&self, delta: &[[f64; 2]]) -> Result<Eval> {
        let field = self.field(delta);
        let map = map_loss(&field, self.target)?;
        let line = if self.cfg.curvature_weight > 0.0 {
            line_supervision_grad(&field, self.target, &self.samples, self.cfg.epsilon)?.0
        } else {
            0.0
        };
        let total = map + self.cfg.curvature_weight * line;
        Ok(Eval { field, map, line, total })
    }

    fn grad(&self, field: &DeformationField) -> Result<Vec<[f64; 2]>> {
        let mut g = map_loss_grad(field, self.target)?;
        if self.cfg.curvature_weight > 0.0 {
            let (_, gl) = line_supervision_grad(field, self.target, &self.samples, self.cfg.epsilon)?;
            for (a, b) in g.iter_mut().zip(&gl) {
                a[0] += self.cfg.curvature_weight * b[0];
                a[1] += self.cfg.curvature_weight * b[1];
            }
        }
        Ok(self.up.transpose(&g))
    }
}

/// Running first and second gradient moments; the descent direction is the
/// bias-corrected ratio `m / (sqrt(v) + eps)`, so coordinates whose gradients
/// differ in scale still move at comparable rates.
struct Moments {
    m: Vec<[f64; 2]>,
    v: Vec<[f64; 2]>,
    t: i32,
}

impl Moments {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-12;

    fn new(n: usize) -> Self {
        Self { m: vec![[0.0; 2]; n], v: vec![[0.0; 2]; n], t: 0 }
    }

    fn reset(&mut self) {
        *self = Self::new(self.m.len());
    }

    fn direction(&mut self, g: &[[f64; 2]]) -> Vec<[f64; 2]> {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let mut out = vec![[0.0; 2]; g.len()];
        for (k, gk) in g.iter().enumerate() {
            for a in 0..2 {
                self.m[k][a] = Self::BETA1 * self.m[k][a] + (1.0 - Self::BETA1) * gk[a];
                self.v[k][a] = Self::BETA2 * self.v[k][a] + (1.0 - Self::BETA2) * gk[a] * gk[a];
                out[k][a] = (self.m[k][a] / c1) / ((self.v[k][a] / c2).sqrt() + Self::EPS);
            }
        }
        out
    }
}

type Accepted = Option<(Vec<[f64; 2]>, Eval)>;

/// Halve `step` until moving `delta` against `dir` by at most `step` does not
/// increase the total loss.
fn line_search(
    problem: &Problem<'_>,
    delta: &[[f64; 2]],
    dir: &[[f64; 2]],
    step: &mut f64,
    current: f64,
    it: usize,
) -> Result<Accepted> {
    let dmax = dir.iter().flat_map(|v| v.iter()).fold(0.0f64, |a, b| a.max(b.abs()));
    if dmax == 0.0 {
        return Ok(None);
    }
    for _ in 0..MAX_HALVINGS {
        let scale = *step / dmax;
        let trial: Vec<[f64; 2]> =
            delta.iter().zip(dir).map(|(d, di)| [d[0] - scale * di[0], d[1] - scale * di[1]]).collect();
        let e = problem.eval(&trial)?;
        if !e.total.is_finite() {
            return Err(Error::Numerical(format!("loss became non-finite at iteration {it}")));
        }
        if e.total <= current {
            return Ok(Some((trial, e)));
        }
        *step *= 0.5;
    }
    Ok(None)
}

/// Mean pixel distance between the predicted and target field evaluated at
/// points spaced [`DISPLACEMENT_SPACING`] along the sample's lines.
pub fn line_displacement(
    pred: &DeformationField,
    target: &DeformationField,
    points: &[ControlPointSet],
) -> Result<f64> {
    let (sx, sy) = pred.pixel_scale();
    let (mut sum, mut n) = (0.0, 0usize);
    for set in points {
        for p in &set.points {
            let a = pred.sample(p.x, p.y)?;
            let b = target.sample(p.x, p.y)?;
            sum += (((a[0] - b[0]) * sx).powi(2) + ((a[1] - b[1]) * sy).powi(2)).sqrt();
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Fit `init + upsample(delta)` to the sample's target field, starting from
/// `delta = 0`. Each iteration moves along the moment-scaled gradient
/// direction; steps are accepted only when the total loss does not increase.
/// A rejected step halves the step length, an accepted one grows it.
pub fn optimize_field_demo(sample: &TrainingSample, init: &DeformationField, cfg: &DemoConfig) -> Result<DemoReport> {
    sample.validate()?;
    let target = &sample.target_bm;
    if !init.same_shape(target) {
        return Err(Error::invalid("initial field must match the target field's shape"));
    }
    if cfg.coarse_size < 2 || cfg.coarse_size > target.height().min(target.width()) {
        return Err(Error::invalid(format!("coarse grid side {} is out of range", cfg.coarse_size)));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::invalid(format!("learning rate must be positive, got {}", cfg.learning_rate)));
    }
    if !(cfg.curvature_weight >= 0.0 && cfg.interval > 0.0 && cfg.epsilon > 0.0) {
        return Err(Error::invalid("curvature weight must be >= 0, interval and epsilon > 0"));
    }
    let init = init.clone().with_direction(Direction::Backward);
    let (h, w) = (target.height(), target.width());
    let n = cfg.coarse_size;
    let problem = Problem {
        base: &init,
        target,
        samples: sample_lines(&sample.lines, cfg.interval)?,
        up: Upsampler::new(n, h, w, cfg.basis),
        cfg,
    };
    let probe = sample_lines(&sample.lines, DISPLACEMENT_SPACING)?;
    let (sx, sy) = target.pixel_scale();
    let px = 1.0 / sx.max(sy);

    let mut delta = vec![[0.0; 2]; n * n];
    let mut cur = problem.eval(&delta)?;
    let initial_displacement = line_displacement(&cur.field, target, &probe)?;
    let mut curve = vec![LossRecord { iteration: 0, total: cur.total, map: cur.map, line: cur.line, step: 0.0 }];
    let mut step = cfg.learning_rate * px;
    let mut moments = Moments::new(n * n);
    let mut converged_early = false;
    for it in 1..=cfg.iterations {
        let g = problem.grad(&cur.field)?;
        if g.iter().flat_map(|v| v.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("non-finite gradient at iteration {it}")));
        }
        let mut accepted = None;
        for plain in [false, true] {
            let dir = if plain { g.clone() } else { moments.direction(&g) };
            accepted = line_search(&problem, &delta, &dir, &mut step, cur.total, it)?;
            if accepted.is_some() {
                break;
            }
            // the moment-scaled direction failed; restart from the raw gradient
            moments.reset();
            step = cfg.learning_rate * px;
        }
        match accepted {
            Some((trial, e)) => {
                curve.push(LossRecord { iteration: it, total: e.total, map: e.map, line: e.line, step: step / px });
                delta = trial;
                cur = e;
                step *= GROWTH;
            }
            None => {
                converged_early = true;
                break;
            }
        }
    }
    let final_displacement = line_displacement(&cur.field, target, &probe)?;
    Ok(DemoReport { field: cur.field, curve, initial_displacement, final_displacement, converged_early })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::generate_field;
    use crate::synthdoc::{make_sample, render_document, DocumentLayout};

    fn sample(seed: u64, size: usize, severity: f64) -> TrainingSample {
        let doc = render_document(&DocumentLayout::random(seed, size, size).unwrap()).unwrap();
        let bm = generate_field(seed, size, size, severity).unwrap();
        make_sample(&doc, &bm, seed).unwrap().sample
    }

    #[test]
    fn upsampler_transpose_is_adjoint() {
        for basis in [CoarseBasis::Bilinear, CoarseBasis::Cubic] {
            let up = Upsampler::new(5, 17, 17, basis);
            let c: Vec<[f64; 2]> = (0..25).map(|k| [k as f64 * 0.3 - 2.0, (k * 7 % 11) as f64]).collect();
            let f: Vec<[f64; 2]> = (0..289).map(|k| [(k % 13) as f64, -(k as f64) * 0.01]).collect();
            let lhs: f64 = up.apply(&c).iter().zip(&f).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
            let rhs: f64 = c.iter().zip(&up.transpose(&f)).map(|(a, b)| a[0] * b[0] + a[1] * b[1]).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            // both bases reproduce constants
            let ones = up.apply(&[[1.0, -2.0]; 25]);
            assert!(ones.iter().all(|v| (v[0] - 1.0).abs() < 1e-12 && (v[1] + 2.0).abs() < 1e-12));
        }
    }

    #[test]
    fn target_init_is_stationary() {
        let s = sample(3, 96, 0.3);
        let cfg = DemoConfig { iterations: 5, coarse_size: 12, ..DemoConfig::default() };
        let r = optimize_field_demo(&s, &s.target_bm, &cfg).unwrap();
        assert_eq!(r.curve[0].total, 0.0);
        assert!(r.field.max_coord_diff(&s.target_bm) <= 1e-9);
    }

    #[test]
    fn curve_is_monotone_and_map_loss_drops() {
        let s = sample(4, 96, 0.3);
        let id = DeformationField::identity(96, 96, Direction::Backward);
        let cfg = DemoConfig { iterations: 150, coarse_size: 12, ..DemoConfig::default() };
        let r = optimize_field_demo(&s, &id, &cfg).unwrap();
        assert!(r.curve.windows(2).all(|p| p[1].total <= p[0].total));
        assert!(r.final_map_loss() < 0.5 * r.initial_map_loss());
        assert!(r.final_displacement < r.initial_displacement);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), r.curve.len() + 1);
    }

    #[test]
    fn rejects_bad_config() {
        let s = sample(5, 96, 0.3);
        let id = DeformationField::identity(96, 96, Direction::Backward);
        let bad = DemoConfig { learning_rate: 0.0, ..DemoConfig::default() };
        assert!(matches!(optimize_field_demo(&s, &id, &bad), Err(Error::InvalidArgument(_))));
        let small = DeformationField::identity(32, 32, Direction::Backward);
        assert!(optimize_field_demo(&s, &small, &DemoConfig::default()).is_err());
    }
}
