//! Dense deformation fields: generation, bilinear warping of rasters and
//! points, inversion, and the crop/overlap augmentations.
//!
//! A field is an `H x W` grid of normalized coordinates. Cell `(i, j)` holds the
//! position, in `[0, 1]` units of the *source* extent, that output pixel
//! `(i, j)` samples from. The identity field stores `(j / (W-1), i / (H-1))`.
//!
//! A backward field `bm` synthesises the distorted view from the flat page
//! (`distorted = warp_raster(flat, bm)`), so its coordinates live in flat-page
//! space. Its inverse `fm = invert_field(bm, ..)` is indexed by the flat page
//! and holds distorted-view coordinates: it carries labels (points) from the
//! page into the distorted view.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{ControlPointSet, Point};
use crate::raster::{split_coord, PixelRect, Raster};

/// Coordinates may overshoot the unit square by this much.
pub const COORD_MIN: f64 = -0.25;
pub const COORD_MAX: f64 = 1.25;

/// Minimum side length accepted by [`generate_field`].
pub const MIN_GENERATED_SIDE: usize = 32;

/// Default share of cells used as inversion anchors.
pub const DEFAULT_SAMPLING_RATIO: f64 = 0.4;

/// Anchors consulted per forward-grid node during inversion.
pub const INVERSION_NEIGHBOURS: usize = 4;

/// Upper bound on the neighbourhood when the nearest anchors are collinear.
pub const MAX_INVERSION_NEIGHBOURS: usize = 12;

const MAX_MODES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Backward,
    Forward,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField {
    height: usize,
    width: usize,
    direction: Direction,
    coords: Vec<[f64; 2]>,
}

impl DeformationField {
    pub fn new(height: usize, width: usize, direction: Direction, coords: Vec<[f64; 2]>) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!("field must be at least 2x2, got {height}x{width}")));
        }
        if coords.len() != height * width {
            return Err(Error::invalid(format!("field has {} cells, expected {height}x{width}", coords.len())));
        }
        if let Some(c) = coords.iter().find(|c| c.iter().any(|v| !v.is_finite() || *v < COORD_MIN || *v > COORD_MAX)) {
            return Err(Error::invalid(format!("field coordinate {c:?} outside [{COORD_MIN}, {COORD_MAX}]")));
        }
        Ok(Self { height, width, direction, coords })
    }

    /// Construct without range validation; coordinates are clamped.
    pub(crate) fn from_clamped(height: usize, width: usize, direction: Direction, mut coords: Vec<[f64; 2]>) -> Self {
        debug_assert_eq!(coords.len(), height * width);
        for c in coords.iter_mut() {
            for v in c.iter_mut() {
                *v = if v.is_finite() { v.clamp(COORD_MIN, COORD_MAX) } else { 0.5 };
            }
        }
        Self { height, width, direction, coords }
    }

    pub fn identity(height: usize, width: usize, direction: Direction) -> Self {
        assert!(height >= 2 && width >= 2);
        let coords = (0..height).flat_map(|i| (0..width).map(move |j| identity_coord(i, j, height, width))).collect();
        Self { height, width, direction, coords }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn coords(&self) -> &[[f64; 2]] {
        &self.coords
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> [f64; 2] {
        self.coords[i * self.width + j]
    }

    pub fn same_shape(&self, other: &DeformationField) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn with_direction(mut self, direction: Direction) -> Self {
        self.direction = direction;
        self
    }

    /// Largest per-component coordinate change between 4-adjacent cells.
    pub fn max_adjacent_jump(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.height {
            for j in 0..self.width {
                let c = self.at(i, j);
                if j + 1 < self.width {
                    let r = self.at(i, j + 1);
                    worst = worst.max((r[0] - c[0]).abs()).max((r[1] - c[1]).abs());
                }
                if i + 1 < self.height {
                    let d = self.at(i + 1, j);
                    worst = worst.max((d[0] - c[0]).abs()).max((d[1] - c[1]).abs());
                }
            }
        }
        worst
    }

    /// Smoothness invariant of generated fields: adjacent jumps below `4 / min(H, W)`.
    pub fn is_smooth(&self) -> bool {
        self.max_adjacent_jump() < 4.0 / self.height.min(self.width) as f64
    }

    pub fn max_coord_diff(&self, other: &DeformationField) -> f64 {
        assert!(self.same_shape(other));
        self.coords
            .iter()
            .zip(&other.coords)
            .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
            .fold(0.0, f64::max)
    }

    /// Bilinear neighbours and weights for grid position `(px, py)` in pixel
    /// units of this field's own grid. Positions outside the grid are an error.
    pub fn stencil(&self, px: f64, py: f64) -> Result<([usize; 4], [f64; 4])> {
        const TOL: f64 = 1e-9;
        let (wmax, hmax) = ((self.width - 1) as f64, (self.height - 1) as f64);
        if !(px.is_finite() && py.is_finite()) || px < -TOL || py < -TOL || px > wmax + TOL || py > hmax + TOL {
            return Err(Error::OutOfBounds { x: px, y: py, width: self.width, height: self.height });
        }
        let (x0, x1, fx) = split_coord(px, self.width);
        let (y0, y1, fy) = split_coord(py, self.height);
        let w = self.width;
        Ok((
            [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
            [(1.0 - fx) * (1.0 - fy), fx * (1.0 - fy), (1.0 - fx) * fy, fx * fy],
        ))
    }

    /// Bilinear interpolation of the stored coordinates at grid position
    /// `(px, py)`: `sum_p w_p * field(p)` over the four neighbouring nodes.
    pub fn sample(&self, px: f64, py: f64) -> Result<[f64; 2]> {
        let (idx, w) = self.stencil(px, py)?;
        let mut out = [0.0; 2];
        for k in 0..4 {
            if w[k] != 0.0 {
                let c = self.coords[idx[k]];
                out[0] += w[k] * c[0];
                out[1] += w[k] * c[1];
            }
        }
        Ok(out)
    }

    /// Pixel-unit scale factors `(W-1, H-1)` that map normalized coordinates
    /// onto a source extent with the same dimensions as this grid.
    pub fn pixel_scale(&self) -> (f64, f64) {
        ((self.width - 1) as f64, (self.height - 1) as f64)
    }
}

#[inline]
fn identity_coord(i: usize, j: usize, height: usize, width: usize) -> [f64; 2] {
    [j as f64 / (width - 1) as f64, i as f64 / (height - 1) as f64]
}

struct Mode {
    freq: [f64; 2],
    phase: f64,
    dir: [f64; 2],
    amp: f64,
}

/// Smooth random backward field: a global perspective-like term (anisotropic
/// zoom, rotation, projective bend, shift) plus up to six low-frequency
/// sinusoidal displacement modes, all scaled by `severity`.
pub fn generate_field(seed: u64, height: usize, width: usize, severity: f64) -> Result<DeformationField> {
    if height < MIN_GENERATED_SIDE || width < MIN_GENERATED_SIDE {
        return Err(Error::invalid(format!(
            "generated fields must be at least {MIN_GENERATED_SIDE}x{MIN_GENERATED_SIDE}, got {height}x{width}"
        )));
    }
    if !(0.0..=1.0).contains(&severity) {
        return Err(Error::invalid(format!("severity {severity} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zoom = [rng.gen_range(0.08..0.2), rng.gen_range(0.08..0.2)];
    let bend = [rng.gen_range(-0.12..0.12), rng.gen_range(-0.12..0.12)];
    let angle: f64 = rng.gen_range(-0.06..0.06);
    let shift = [rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03)];
    let n_modes = rng.gen_range(3..=MAX_MODES);
    // Total mode slope stays below 0.8, which keeps the field fold-free.
    let modes: Vec<Mode> = (0..n_modes)
        .map(|_| {
            let freq: [f64; 2] = [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)];
            let fnorm = (freq[0] * freq[0] + freq[1] * freq[1]).sqrt().max(0.3);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            Mode {
                freq,
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                dir: [theta.cos(), theta.sin()],
                amp: rng.gen_range(0.5..1.0) * 0.8 / (std::f64::consts::TAU * fnorm * n_modes as f64),
            }
        })
        .collect();

    let s = severity;
    let (sin_a, cos_a) = (s * angle).sin_cos();
    let mut coords = Vec::with_capacity(height * width);
    for i in 0..height {
        for j in 0..width {
            let [u, v] = identity_coord(i, j, height, width);
            let (a, b) = (u - 0.5, v - 0.5);
            let q = s * (bend[0] * a + bend[1] * b);
            let mut dx = a * s * zoom[0] - a * q / (1.0 + q) + a * (cos_a - 1.0) - b * sin_a + s * shift[0];
            let mut dy = b * s * zoom[1] - b * q / (1.0 + q) + a * sin_a + b * (cos_a - 1.0) + s * shift[1];
            for m in &modes {
                let w = s * m.amp * (std::f64::consts::TAU * (m.freq[0] * u + m.freq[1] * v) + m.phase).sin();
                dx += w * m.dir[0];
                dy += w * m.dir[1];
            }
            coords.push([u + dx, v + dy]);
        }
    }
    Ok(DeformationField::from_clamped(height, width, Direction::Backward, coords))
}

/// Sample `src` at every cell of `field`. Output dimensions are the field's;
/// samples falling outside the source clamp to its edge.
pub fn warp_raster(src: &Raster, field: &DeformationField) -> Raster {
    let (sw, sh) = ((src.width() - 1) as f64, (src.height() - 1) as f64);
    let c = src.channels();
    let mut data = vec![0.0; field.height * field.width * c];
    data.par_chunks_mut(field.width * c).enumerate().for_each(|(i, row)| {
        for j in 0..field.width {
            let [x, y] = field.at(i, j);
            src.sample_bilinear(x * sw, y * sh, &mut row[j * c..(j + 1) * c]);
        }
    });
    Raster::new(field.height, field.width, c, data).expect("bilinear samples stay in range")
}

/// Nearest-neighbour variant of [`warp_raster`].
pub fn warp_raster_nearest(src: &Raster, field: &DeformationField) -> Raster {
    let (sw, sh) = ((src.width() - 1) as f64, (src.height() - 1) as f64);
    let c = src.channels();
    let mut data = vec![0.0; field.height * field.width * c];
    for (k, px) in data.chunks_exact_mut(c).enumerate() {
        let [x, y] = field.coords[k];
        src.sample_nearest(x * sw, y * sh, px);
    }
    Raster::new(field.height, field.width, c, data).expect("samples stay in range")
}

/// Map points through a field. Input points are pixel positions in the
/// field's grid; outputs are pixel positions in a source extent of the same
/// dimensions. Order is preserved; points outside the grid are an error.
pub fn warp_points(points: &ControlPointSet, field: &DeformationField) -> Result<ControlPointSet> {
    let (sx, sy) = field.pixel_scale();
    let out = points
        .points
        .iter()
        .map(|p| field.sample(p.x, p.y).map(|c| Point::new(c[0] * sx, c[1] * sy)))
        .collect::<Result<Vec<_>>>()?;
    Ok(ControlPointSet::new(out, points.line_id, points.interval))
}

/// Evenly spaced, rounded indices `0..len` with both ends included.
fn strided_indices(len: usize, count: usize) -> Vec<usize> {
    let count = count.clamp(2, len);
    let mut idx: Vec<usize> =
        (0..count).map(|k| ((k as f64) * (len - 1) as f64 / (count - 1) as f64).round() as usize).collect();
    idx.dedup();
    idx
}

struct Anchor {
    at: [f64; 2],
    value: [f64; 2],
}

/// Uniform bucket grid for k-nearest-anchor queries.
struct AnchorIndex {
    anchors: Vec<Anchor>,
    origin: [f64; 2],
    cell: f64,
    cols: usize,
    rows: usize,
    buckets: Vec<Vec<u32>>,
}

impl AnchorIndex {
    fn new(anchors: Vec<Anchor>, cell: f64, extent: [f64; 4]) -> Self {
        let (mut x0, mut y0, mut x1, mut y1) = (extent[0], extent[1], extent[2], extent[3]);
        for a in &anchors {
            x0 = x0.min(a.at[0]);
            y0 = y0.min(a.at[1]);
            x1 = x1.max(a.at[0]);
            y1 = y1.max(a.at[1]);
        }
        let cols = ((x1 - x0) / cell).floor() as usize + 1;
        let rows = ((y1 - y0) / cell).floor() as usize + 1;
        let mut buckets = vec![Vec::new(); cols * rows];
        for (k, a) in anchors.iter().enumerate() {
            let cx = ((a.at[0] - x0) / cell) as usize;
            let cy = ((a.at[1] - y0) / cell) as usize;
            buckets[cy.min(rows - 1) * cols + cx.min(cols - 1)].push(k as u32);
        }
        Self { anchors, origin: [x0, y0], cell, cols, rows, buckets }
    }

    /// Indices and distances of the `k` nearest anchors, nearest first.
    fn nearest(&self, q: [f64; 2], k: usize, out: &mut Vec<(f64, u32)>) {
        out.clear();
        let cx = (((q[0] - self.origin[0]) / self.cell).floor() as isize).clamp(0, self.cols as isize - 1);
        let cy = (((q[1] - self.origin[1]) / self.cell).floor() as isize).clamp(0, self.rows as isize - 1);
        let max_ring = self.cols.max(self.rows) as isize;
        for ring in 0..=max_ring {
            for by in (cy - ring)..=(cy + ring) {
                if by < 0 || by >= self.rows as isize {
                    continue;
                }
                let edge_row = by == cy - ring || by == cy + ring;
                let mut bx = cx - ring;
                while bx <= cx + ring {
                    if bx >= 0 && bx < self.cols as isize {
                        for &a in &self.buckets[by as usize * self.cols + bx as usize] {
                            let p = self.anchors[a as usize].at;
                            let d = (p[0] - q[0]).hypot(p[1] - q[1]);
                            if out.len() < k {
                                out.push((d, a));
                                out.sort_by(|x, y| x.partial_cmp(y).unwrap());
                            } else if (d, a) < out[k - 1] {
                                out[k - 1] = (d, a);
                                out.sort_by(|x, y| x.partial_cmp(y).unwrap());
                            }
                        }
                    }
                    bx += if edge_row || ring == 0 { 1 } else { 2 * ring };
                }
            }
            if out.len() == k && out[k - 1].0 <= ring as f64 * self.cell {
                break;
            }
        }
    }
}

/// Weighted local affine fit through the neighbour anchors, evaluated at `q`.
/// Inverse-distance (squared) weights; reproduces affine maps exactly.
/// `Err` carries the plain inverse-distance estimate when the neighbours are
/// collinear.
fn interpolate_anchors(q: [f64; 2], neighbours: &[(f64, u32)], anchors: &[Anchor]) -> Result<[f64; 2], [f64; 2]> {
    if let Some(&(d, a)) = neighbours.first() {
        if d < 1e-12 {
            return Ok(anchors[a as usize].value);
        }
    }
    let mut wsum = 0.0;
    let mut mu = [0.0; 2];
    let mut nu = [0.0; 2];
    let weights: Vec<f64> = neighbours.iter().map(|(d, _)| 1.0 / (d * d)).collect();
    for (&w, &(_, a)) in weights.iter().zip(neighbours) {
        let an = &anchors[a as usize];
        wsum += w;
        for c in 0..2 {
            mu[c] += w * an.at[c];
            nu[c] += w * an.value[c];
        }
    }
    for c in 0..2 {
        mu[c] /= wsum;
        nu[c] /= wsum;
    }
    // C = sum w (p - mu)(p - mu)^T, B = sum w (v - nu)(p - mu)^T
    let (mut cxx, mut cxy, mut cyy) = (0.0, 0.0, 0.0);
    let mut b = [[0.0; 2]; 2];
    for (&w, &(_, a)) in weights.iter().zip(neighbours) {
        let an = &anchors[a as usize];
        let dp = [an.at[0] - mu[0], an.at[1] - mu[1]];
        let dv = [an.value[0] - nu[0], an.value[1] - nu[1]];
        cxx += w * dp[0] * dp[0];
        cxy += w * dp[0] * dp[1];
        cyy += w * dp[1] * dp[1];
        for r in 0..2 {
            b[r][0] += w * dv[r] * dp[0];
            b[r][1] += w * dv[r] * dp[1];
        }
    }
    let det = cxx * cyy - cxy * cxy;
    let trace = cxx + cyy;
    // det / trace^2 approximates the ratio of the spread along the two axes.
    if !(det > 0.05 * trace * trace) {
        return Err(nu);
    }
    let inv = [[cyy / det, -cxy / det], [-cxy / det, cxx / det]];
    let dq = [q[0] - mu[0], q[1] - mu[1]];
    let mut out = nu;
    for r in 0..2 {
        let a0 = b[r][0] * inv[0][0] + b[r][1] * inv[1][0];
        let a1 = b[r][0] * inv[0][1] + b[r][1] * inv[1][1];
        out[r] += a0 * dq[0] + a1 * dq[1];
    }
    Ok(out)
}

/// Numerically invert a backward field.
///
/// A uniformly strided subset of cells covering `sampling_ratio` of the grid is
/// used as anchors; each anchor `q` is scattered to position `bm(q)` in the
/// forward grid carrying value `q`. Every forward node is then filled from its
/// [`INVERSION_NEIGHBOURS`] nearest anchors by an inverse-distance-weighted
/// local affine fit. Where those anchors are collinear the neighbourhood grows
/// up to [`MAX_INVERSION_NEIGHBOURS`] before plain inverse-distance weighting
/// is used.
pub fn invert_field(bm: &DeformationField, sampling_ratio: f64) -> Result<DeformationField> {
    if !(sampling_ratio > 0.0 && sampling_ratio <= 1.0) {
        return Err(Error::invalid(format!("sampling ratio {sampling_ratio} outside (0, 1]")));
    }
    let (h, w) = (bm.height, bm.width);
    let side = sampling_ratio.sqrt();
    let rows = strided_indices(h, (h as f64 * side).round() as usize);
    let cols = strided_indices(w, (w as f64 * side).round() as usize);
    let (sx, sy) = bm.pixel_scale();
    let mut anchors = Vec::with_capacity(rows.len() * cols.len());
    for &i in &rows {
        for &j in &cols {
            let c = bm.at(i, j);
            anchors.push(Anchor { at: [c[0] * sx, c[1] * sy], value: identity_coord(i, j, h, w) });
        }
    }
    let spacing = (w as f64 / cols.len() as f64).max(h as f64 / rows.len() as f64);
    let index = AnchorIndex::new(anchors, spacing.max(1.0), [0.0, 0.0, sx, sy]);
    let k = INVERSION_NEIGHBOURS.min(index.anchors.len());
    let k_max = MAX_INVERSION_NEIGHBOURS.min(index.anchors.len());

    let mut coords = vec![[0.0; 2]; h * w];
    coords.par_chunks_mut(w).enumerate().for_each_init(
        || Vec::with_capacity(k),
        |scratch, (i, row)| {
            for (j, out) in row.iter_mut().enumerate() {
                let q = [j as f64, i as f64];
                let mut kk = k;
                *out = loop {
                    index.nearest(q, kk, scratch);
                    match interpolate_anchors(q, scratch, &index.anchors) {
                        Ok(v) => break v,
                        Err(v) if kk >= k_max => break v,
                        Err(_) => kk += 1,
                    }
                };
            }
        },
    );
    Ok(DeformationField::from_clamped(h, w, Direction::Forward, coords))
}

/// Restrict a backward field to `crop_rect`. Warping the flat page with the
/// result reproduces the matching crop of the distorted view. The rectangle
/// must cover at least 75% of the field.
pub fn crop_augment(bm: &DeformationField, crop_rect: PixelRect) -> Result<DeformationField> {
    if !crop_rect.fits_within(bm.width, bm.height) {
        return Err(Error::invalid(format!("crop {crop_rect:?} outside {}x{} field", bm.width, bm.height)));
    }
    if (crop_rect.area() as f64) < 0.75 * (bm.width * bm.height) as f64 {
        return Err(Error::invalid(format!("crop {crop_rect:?} covers less than 75% of the field")));
    }
    if crop_rect.width < 2 || crop_rect.height < 2 {
        return Err(Error::invalid("crop must be at least 2x2"));
    }
    let mut coords = Vec::with_capacity(crop_rect.area());
    for i in crop_rect.y..crop_rect.y + crop_rect.height {
        coords.extend_from_slice(&bm.coords[i * bm.width + crop_rect.x..i * bm.width + crop_rect.x + crop_rect.width]);
    }
    Ok(DeformationField { height: crop_rect.height, width: crop_rect.width, direction: bm.direction, coords })
}

/// Cellwise blend `weight * bm1 + (1 - weight) * bm2`. If a corner cell ends
/// up outside the permitted overshoot the blend is shrunk about the page
/// centre until it fits.
pub fn overlap_augment(bm1: &DeformationField, bm2: &DeformationField, weight: f64) -> Result<DeformationField> {
    if !bm1.same_shape(bm2) {
        return Err(Error::invalid(format!(
            "cannot blend {}x{} with {}x{} field",
            bm1.height, bm1.width, bm2.height, bm2.width
        )));
    }
    if !(0.0..=1.0).contains(&weight) {
        return Err(Error::invalid(format!("blend weight {weight} outside [0, 1]")));
    }
    let mut coords: Vec<[f64; 2]> =
        bm1.coords
            .iter()
            .zip(&bm2.coords)
            .map(|(a, b)| {
                if a == b {
                    *a
                } else {
                    [weight * a[0] + (1.0 - weight) * b[0], weight * a[1] + (1.0 - weight) * b[1]]
                }
            })
            .collect();
    let (h, w) = (bm1.height, bm1.width);
    let corners = [0, w - 1, (h - 1) * w, h * w - 1];
    let overshoot = corners.iter().flat_map(|&k| coords[k]).map(|v| (v - 0.5).abs() / 0.75).fold(0.0, f64::max);
    if overshoot > 1.0 {
        let f = 1.0 / overshoot;
        for c in coords.iter_mut() {
            for v in c.iter_mut() {
                *v = 0.5 + (*v - 0.5) * f;
            }
        }
    }
    Ok(DeformationField::from_clamped(h, w, Direction::Backward, coords))
}
