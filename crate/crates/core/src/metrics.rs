//! Evaluation metrics: (MS-)SSIM, local distortion against a known field,
//! aligned distortion, edit distance and character error rate.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::DeformationField;
use crate::raster::Raster;

pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Translation search radius (pixels) for aligned distortion.
pub const AD_MAX_SHIFT: i32 = 16;
/// Scale search covers `1 + k / 100` for `k` in this range.
pub const AD_SCALE_STEPS: std::ops::RangeInclusive<i32> = -10..=10;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ms_ssim: f64,
    /// Pixels.
    pub ld: f64,
    /// Aligned distortion (variant), dimensionless.
    pub ad: f64,
    pub ed: Option<usize>,
    pub cer: Option<f64>,
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Single-channel plane used by the metric kernels.
#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    v: Vec<f64>,
}

impl Plane {
    fn from_raster(r: &Raster) -> Plane {
        let l = r.to_luma();
        Plane { h: l.height(), w: l.width(), v: l.into_data() }
    }

    fn map2(&self, o: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane { h: self.h, w: self.w, v: self.v.iter().zip(&o.v).map(|(a, b)| f(*a, *b)).collect() }
    }

    /// Separable valid-mode Gaussian filter.
    fn filter(&self, k: &[f64; SSIM_WINDOW]) -> Plane {
        let n = SSIM_WINDOW;
        let ow = self.w + 1 - n;
        let oh = self.h + 1 - n;
        let mut tmp = vec![0.0; self.h * ow];
        for y in 0..self.h {
            let row = &self.v[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                tmp[y * ow + x] = (0..n).map(|i| k[i] * row[x + i]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
            }
        }
        Plane { h: oh, w: ow, v: out }
    }

    /// 2x2 average decimation.
    fn downsample(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut v = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let at = |yy: usize, xx: usize| self.v[yy * self.w + xx];
                v.push(
                    0.25 * (at(2 * y, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x) + at(2 * y + 1, 2 * x + 1)),
                );
            }
        }
        Plane { h, w, v }
    }
}

/// Mean SSIM and mean contrast-structure term of two planes.
fn ssim_terms(a: &Plane, b: &Plane, k: &[f64; SSIM_WINDOW]) -> (f64, f64) {
    let mu_a = a.filter(k);
    let mu_b = b.filter(k);
    let aa = a.map2(a, |x, y| x * y).filter(k);
    let bb = b.map2(b, |x, y| x * y).filter(k);
    let ab = a.map2(b, |x, y| x * y).filter(k);
    let n = mu_a.v.len() as f64;
    let (mut ssim, mut cs) = (0.0, 0.0);
    for i in 0..mu_a.v.len() {
        let (ma, mb) = (mu_a.v[i], mu_b.v[i]);
        let va = aa.v[i] - ma * ma;
        let vb = bb.v[i] - mb * mb;
        let cov = ab.v[i] - ma * mb;
        let c = (2.0 * cov + C2) / (va + vb + C2);
        cs += c;
        ssim += c * (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
    }
    (ssim / n, cs / n)
}

fn check_pair(a: &Raster, b: &Raster, min_side: usize) -> Result<()> {
    if !a.same_dims(b) {
        return Err(Error::invalid("rasters differ in size"));
    }
    if a.height() < min_side || a.width() < min_side {
        return Err(Error::invalid(format!(
            "rasters of {}x{} are below the {min_side}-pixel minimum",
            a.height(),
            a.width()
        )));
    }
    Ok(())
}

/// Single-scale SSIM over luma (11x11 Gaussian window, valid region).
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    check_pair(a, b, SSIM_WINDOW)?;
    let (s, _) = ssim_terms(&Plane::from_raster(a), &Plane::from_raster(b), &gaussian_kernel());
    Ok(s.clamp(0.0, 1.0))
}

/// Multi-scale SSIM over luma. With fewer than five levels the leading
/// weights are renormalized to sum to one, so one level is plain SSIM.
pub fn ms_ssim(a: &Raster, b: &Raster, levels: usize) -> Result<f64> {
    if !(1..=MS_SSIM_WEIGHTS.len()).contains(&levels) {
        return Err(Error::invalid(format!("levels must be in 1..=5, got {levels}")));
    }
    check_pair(a, b, (1 << (levels - 1)) * SSIM_WINDOW)?;
    let k = gaussian_kernel();
    let weights = &MS_SSIM_WEIGHTS[..levels];
    let total: f64 = weights.iter().sum();
    let (mut pa, mut pb) = (Plane::from_raster(a), Plane::from_raster(b));
    let mut out = 1.0;
    for (l, w) in weights.iter().enumerate() {
        let (s, cs) = ssim_terms(&pa, &pb, &k);
        let term = if l + 1 == levels { s } else { cs };
        out *= term.max(0.0).powf(w / total);
        if l + 1 < levels {
            pa = pa.downsample();
            pb = pb.downsample();
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// Mean Euclidean distance between corresponding field coordinates, in
/// pixels of a source extent with the fields' dimensions.
pub fn local_distortion(pred: &DeformationField, gt: &DeformationField) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::invalid("fields differ in size"));
    }
    let (sx, sy) = gt.pixel_scale();
    let sum: f64 =
        pred.coords().iter().zip(gt.coords()).map(|(p, g)| ((p[0] - g[0]) * sx).hypot((p[1] - g[1]) * sy)).sum();
    Ok(sum / gt.coords().len() as f64)
}

/// Smallest mean absolute luma difference over a grid of translations
/// (±16 px, 1-px steps) and scales (0.9 to 1.1, 0.01 steps) of `rectified`
/// about its centre, divided by the mean gradient magnitude of `reference`
/// (1 when the reference is flat). Rasters of different sizes are padded
/// with white at the bottom and right.
pub fn aligned_distortion(rectified: &Raster, reference: &Raster) -> Result<f64> {
    let (h, w) = (rectified.height().max(reference.height()), rectified.width().max(reference.width()));
    let a = pad_white(&Plane::from_raster(rectified), h, w);
    let r = pad_white(&Plane::from_raster(reference), h, w);
    let candidates: Vec<(i32, i32, i32)> = AD_SCALE_STEPS
        .flat_map(|k| {
            (-AD_MAX_SHIFT..=AD_MAX_SHIFT).flat_map(move |ty| (-AD_MAX_SHIFT..=AD_MAX_SHIFT).map(move |tx| (k, tx, ty)))
        })
        .collect();
    let best = candidates
        .par_iter()
        .filter_map(|&(k, tx, ty)| aligned_mad(&a, &r, 1.0 + k as f64 / 100.0, tx as f64, ty as f64))
        .reduce_with(f64::min)
        .ok_or_else(|| Error::invalid("no alignment leaves enough overlap"))?;
    Ok(best / gradient_norm(&r))
}

fn pad_white(p: &Plane, h: usize, w: usize) -> Plane {
    if (p.h, p.w) == (h, w) {
        return p.clone();
    }
    let mut v = vec![1.0; h * w];
    for y in 0..p.h {
        v[y * w..y * w + p.w].copy_from_slice(&p.v[y * p.w..(y + 1) * p.w]);
    }
    Plane { h, w, v }
}

/// MAD between `reference(p)` and `a(c + s (p - c) + t)` over reference
/// pixels whose transformed position falls inside `a`. `None` when less than
/// half the reference overlaps.
fn aligned_mad(a: &Plane, reference: &Plane, s: f64, tx: f64, ty: f64) -> Option<f64> {
    let (cx, cy) = ((a.w - 1) as f64 / 2.0, (a.h - 1) as f64 / 2.0);
    let (xmax, ymax) = ((a.w - 1) as f64, (a.h - 1) as f64);
    let (mut sum, mut n) = (0.0, 0usize);
    for y in 0..reference.h {
        let py = cy + s * (y as f64 - cy) + ty;
        if py < 0.0 || py > ymax {
            continue;
        }
        let y0 = py.floor().min(ymax - 1.0).max(0.0);
        let fy = py - y0;
        let y0 = y0 as usize;
        let y1 = (y0 + 1).min(a.h - 1);
        for x in 0..reference.w {
            let px = cx + s * (x as f64 - cx) + tx;
            if px < 0.0 || px > xmax {
                continue;
            }
            let x0 = px.floor().min(xmax - 1.0).max(0.0);
            let fx = px - x0;
            let x0 = x0 as usize;
            let x1 = (x0 + 1).min(a.w - 1);
            let v = if fx == 0.0 && fy == 0.0 {
                a.v[y0 * a.w + x0]
            } else {
                let top = a.v[y0 * a.w + x0] * (1.0 - fx) + a.v[y0 * a.w + x1] * fx;
                let bot = a.v[y1 * a.w + x0] * (1.0 - fx) + a.v[y1 * a.w + x1] * fx;
                top * (1.0 - fy) + bot * fy
            };
            sum += (v - reference.v[y * reference.w + x]).abs();
            n += 1;
        }
    }
    (2 * n >= reference.h * reference.w && n > 0).then(|| sum / n as f64)
}

fn gradient_norm(p: &Plane) -> f64 {
    let at = |y: usize, x: usize| p.v[y * p.w + x];
    let mut total = 0.0;
    for y in 0..p.h {
        for x in 0..p.w {
            let gx = 0.5 * (at(y, (x + 1).min(p.w - 1)) - at(y, x.saturating_sub(1)));
            let gy = 0.5 * (at((y + 1).min(p.h - 1), x) - at(y.saturating_sub(1), x));
            total += gx.hypot(gy);
        }
    }
    let mean = total / (p.h * p.w) as f64;
    if mean > 1e-12 {
        mean
    } else {
        1.0
    }
}

/// Levenshtein distance over Unicode scalar values with unit costs.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + (ca != cb) as usize;
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the number of characters in `reference`.
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let n = reference.chars().count();
    if n == 0 {
        return Err(Error::invalid("character error rate needs a non-empty reference"));
    }
    Ok(edit_distance(reference, hypothesis) as f64 / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::Direction;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(seed: u64, n: usize) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blobs: Vec<(f64, f64, f64)> = (0..12)
            .map(|_| (rng.gen_range(0.0..n as f64), rng.gen_range(0.0..n as f64), rng.gen_range(3.0..9.0)))
            .collect();
        Raster::from_fn(n, n, 1, |y, x, _| {
            let mut v = 0.9;
            for &(bx, by, r) in &blobs {
                if (x as f64 - bx).hypot(y as f64 - by) < r {
                    v = 0.15;
                }
            }
            v
        })
    }

    fn noisy(r: &Raster, sigma: f64, seed: u64) -> Raster {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Raster::from_fn(r.height(), r.width(), 1, |y, x, _| {
            let g: f64 = (0..12).map(|_| rng.gen::<f64>()).sum::<f64>() - 6.0;
            r.get(y, x, 0) + sigma * g
        })
    }

    #[test]
    fn ms_ssim_identity_and_symmetry() {
        let a = textured(1, 176);
        let b = noisy(&a, 0.05, 2);
        assert!((ms_ssim(&a, &a, 5).unwrap() - 1.0).abs() <= 1e-6);
        let (ab, ba) = (ms_ssim(&a, &b, 5).unwrap(), ms_ssim(&b, &a, 5).unwrap());
        assert!((ab - ba).abs() <= 1e-9);
        assert!((0.0..=1.0).contains(&ab));
        assert!(ms_ssim(&textured(1, 100), &textured(1, 100), 5).is_err());
    }

    #[test]
    fn ms_ssim_degrades_with_noise() {
        for seed in 0..3 {
            let a = textured(seed, 176);
            let lo = ms_ssim(&a, &noisy(&a, 0.05, seed + 10), 5).unwrap();
            let hi = ms_ssim(&a, &noisy(&a, 0.1, seed + 10), 5).unwrap();
            assert!(hi < lo, "{hi} !< {lo}");
        }
    }

    #[test]
    fn one_level_is_plain_ssim() {
        let a = textured(4, 48);
        let b = noisy(&a, 0.08, 5);
        assert!((ms_ssim(&a, &b, 1).unwrap() - ssim(&a, &b).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn local_distortion_examples() {
        let gt = DeformationField::identity(41, 61, Direction::Backward);
        assert_eq!(local_distortion(&gt, &gt).unwrap(), 0.0);
        let shift = |dx: f64, dy: f64| {
            DeformationField::new(
                41,
                61,
                Direction::Backward,
                gt.coords().iter().map(|c| [c[0] + dx / 60.0, c[1] + dy / 40.0]).collect(),
            )
            .unwrap()
        };
        assert!((local_distortion(&shift(2.0, 0.0), &gt).unwrap() - 2.0).abs() < 1e-12);
        assert!((local_distortion(&shift(3.0, 4.0), &gt).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn aligned_distortion_examples() {
        let r = textured(7, 64);
        assert_eq!(aligned_distortion(&r, &r).unwrap(), 0.0);
        let moved = Raster::from_fn(64, 64, 1, |y, x, _| if x >= 5 { r.get(y, x - 5, 0) } else { 0.5 });
        assert!(aligned_distortion(&moved, &r).unwrap() <= 1e-6);
        assert!(aligned_distortion(&Raster::filled(64, 64, 1, 0.5), &r).unwrap() > 0.0);
    }

    #[test]
    fn edit_distance_examples() {
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("kitten", "kitten"), 0);
        assert_eq!(edit_distance("abcd", "abed"), 1);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    #[test]
    fn cer_examples() {
        assert_eq!(cer("abc", "abc").unwrap(), 0.0);
        assert_eq!(cer("abcdefghij", "abcdefghXY").unwrap(), 0.2);
        assert_eq!(cer("a", "abcde").unwrap(), 4.0);
        assert!(cer("", "x").is_err());
    }
}
