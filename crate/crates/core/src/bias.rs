//! Round-trip bias of field inversion: data is carried onto the distorted
//! grid with the backward field and brought back with its inverse, and the
//! residual is measured on images (SSIM), lines (point offsets) and masks
//! (IoU).

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{invert_field, warp_points, warp_raster, DeformationField, Direction};
use crate::geometry::{ControlPointSet, LineElement, Point};
use crate::metrics::ssim;
use crate::raster::{mask_iou, Raster};

pub const DEFAULT_RATIOS: [f64; 4] = [0.1, 0.2, 0.4, 0.8];

/// Spacing of the line points whose round trip is measured.
pub const POINT_SPACING: f64 = 4.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffsetStats {
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Points that contributed.
    pub count: usize,
}

impl OffsetStats {
    fn from_offsets(offsets: &[f64]) -> Self {
        if offsets.is_empty() {
            return Self { min: 0.0, mean: 0.0, max: 0.0, count: 0 };
        }
        Self {
            min: offsets.iter().cloned().fold(f64::INFINITY, f64::min),
            mean: offsets.iter().sum::<f64>() / offsets.len() as f64,
            max: offsets.iter().cloned().fold(0.0, f64::max),
            count: offsets.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub ssim_image: f64,
    /// Pixels.
    pub offset_points: OffsetStats,
    pub iou_mask: f64,
    pub sampling_ratio: f64,
    /// Line points whose forward image left the distorted grid.
    pub points_lost: usize,
    #[serde(skip)]
    offsets: Vec<f64>,
}

/// Inputs of one round-trip measurement.
#[derive(Clone, Debug)]
pub struct BiasSample {
    pub image: Raster,
    pub mask: Raster,
    pub lines: Vec<LineElement>,
    pub bm: DeformationField,
}

pub fn round_trip(
    image: &Raster,
    mask: &Raster,
    lines: &[LineElement],
    bm: &DeformationField,
    sampling_ratio: f64,
) -> Result<BiasReport> {
    if bm.direction() != Direction::Backward {
        return Err(Error::invalid("round trip needs a backward field"));
    }
    let dims = (bm.height(), bm.width());
    if (image.height(), image.width()) != dims || (mask.height(), mask.width()) != dims {
        return Err(Error::invalid("image, mask and field must share dimensions"));
    }
    let fm = invert_field(bm, sampling_ratio)?;
    let back = |r: &Raster| warp_raster(&warp_raster(r, bm), &fm);
    let ssim_image = ssim(&back(image), image)?;
    let iou_mask = mask_iou(&back(mask).threshold(0.5), &mask.threshold(0.5));

    let mut offsets = Vec::new();
    let mut lost = 0;
    for line in lines {
        for p in line.densified(POINT_SPACING).points {
            match round_trip_point(p, &fm, bm) {
                Some(q) => offsets.push(q.distance(&p)),
                None => lost += 1,
            }
        }
    }
    Ok(BiasReport {
        ssim_image,
        offset_points: OffsetStats::from_offsets(&offsets),
        iou_mask,
        sampling_ratio,
        points_lost: lost,
        offsets,
    })
}

fn round_trip_point(p: Point, fm: &DeformationField, bm: &DeformationField) -> Option<Point> {
    let there = warp_points(&ControlPointSet::new(vec![p], 0, 0.0), fm).ok()?;
    let back = warp_points(&there, bm).ok()?;
    Some(back.points[0])
}

/// One row of a ratio sweep, aggregated over samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub ratio: f64,
    /// Statistics over all measured points of all samples.
    pub offsets: OffsetStats,
    pub ssim_image: f64,
    pub iou_mask: f64,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// `per_sample[s][r]` is sample `s` at ratio `r`.
    pub per_sample: Vec<Vec<BiasReport>>,
}

impl SweepTable {
    /// Fraction of (sample, consecutive ratio pair) steps where the mean
    /// offset increased.
    pub fn violation_rate(&self) -> f64 {
        let (mut bad, mut total) = (0, 0);
        for reports in &self.per_sample {
            for w in reports.windows(2) {
                total += 1;
                if w[1].offset_points.mean > w[0].offset_points.mean {
                    bad += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            bad as f64 / total as f64
        }
    }

    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "ratio,offset_min,offset_mean,offset_max,points,ssim_image,iou_mask,samples")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{}",
                r.ratio,
                r.offsets.min,
                r.offsets.mean,
                r.offsets.max,
                r.offsets.count,
                r.ssim_image,
                r.iou_mask,
                r.samples
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(&mut f)?;
        f.flush()?;
        Ok(())
    }

    /// Line chart of min, mean and max offset against ratio.
    pub fn plot(&self) -> Raster {
        plot_offsets(&self.rows)
    }
}

pub fn ratio_sweep(samples: &[BiasSample], ratios: &[f64]) -> Result<SweepTable> {
    if samples.is_empty() || ratios.is_empty() {
        return Err(Error::invalid("ratio sweep needs samples and ratios"));
    }
    if ratios.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::invalid("ratios must be strictly ascending"));
    }
    let per_sample = samples
        .par_iter()
        .map(|s| ratios.iter().map(|&r| round_trip(&s.image, &s.mask, &s.lines, &s.bm, r)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let rows = ratios
        .iter()
        .enumerate()
        .map(|(k, &ratio)| {
            let all: Vec<f64> = per_sample.iter().flat_map(|s| s[k].offsets.iter().cloned()).collect();
            let n = per_sample.len() as f64;
            SweepRow {
                ratio,
                offsets: OffsetStats::from_offsets(&all),
                ssim_image: per_sample.iter().map(|s| s[k].ssim_image).sum::<f64>() / n,
                iou_mask: per_sample.iter().map(|s| s[k].iou_mask).sum::<f64>() / n,
                samples: per_sample.len(),
            }
        })
        .collect();
    Ok(SweepTable { rows, per_sample })
}

const PLOT_W: usize = 480;
const PLOT_H: usize = 320;
const PLOT_MARGIN: usize = 32;

fn plot_offsets(rows: &[SweepRow]) -> Raster {
    let mut img = Raster::filled(PLOT_H, PLOT_W, 3, 1.0);
    let (x0, x1) = (PLOT_MARGIN as f64, (PLOT_W - PLOT_MARGIN / 2) as f64);
    let (y0, y1) = ((PLOT_H - PLOT_MARGIN) as f64, (PLOT_MARGIN / 2) as f64);
    let axis = [0.0, 0.0, 0.0];
    draw_segment(&mut img, (x0, y0), (x1, y0), axis);
    draw_segment(&mut img, (x0, y0), (x0, y1), axis);
    if rows.is_empty() {
        return img;
    }
    let rmin = rows.first().unwrap().ratio;
    let rmax = rows.last().unwrap().ratio;
    let omax = rows.iter().map(|r| r.offsets.max).fold(0.0, f64::max).max(1e-9);
    let to_px = |ratio: f64, off: f64| {
        let t = if rmax > rmin { (ratio - rmin) / (rmax - rmin) } else { 0.5 };
        (x0 + t * (x1 - x0), y0 + (off / omax) * (y1 - y0))
    };
    let series: [(fn(&OffsetStats) -> f64, [f64; 3]); 3] =
        [(|o| o.min, [0.2, 0.6, 0.2]), (|o| o.mean, [0.1, 0.2, 0.8]), (|o| o.max, [0.8, 0.1, 0.1])];
    for (get, colour) in series {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| to_px(r.ratio, get(&r.offsets))).collect();
        for w in pts.windows(2) {
            draw_segment(&mut img, w[0], w[1], colour);
        }
        for &(px, py) in &pts {
            for dy in -2..=2 {
                for dx in -2..=2 {
                    put(&mut img, px + dx as f64, py + dy as f64, colour);
                }
            }
        }
    }
    img
}

fn put(img: &mut Raster, x: f64, y: f64, colour: [f64; 3]) {
    let (x, y) = (x.round(), y.round());
    if x >= 0.0 && y >= 0.0 && (x as usize) < img.width() && (y as usize) < img.height() {
        for (c, v) in colour.iter().enumerate() {
            img.set(y as usize, x as usize, c, *v);
        }
    }
}

fn draw_segment(img: &mut Raster, a: (f64, f64), b: (f64, f64), colour: [f64; 3]) {
    let steps = (b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil().max(1.0) as usize;
    for k in 0..=steps {
        let t = k as f64 / steps as f64;
        put(img, a.0 + t * (b.0 - a.0), a.1 + t * (b.1 - a.1), colour);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::LineKind;

    fn scene(n: usize) -> (Raster, Raster, Vec<LineElement>) {
        let image = Raster::from_fn(n, n, 1, |y, x, _| if (x / 8 + y / 8) % 2 == 0 { 0.9 } else { 0.2 });
        let mask = Raster::from_fn(n, n, 1, |y, x, _| (x > n / 4 && x < 3 * n / 4 && y > n / 3) as u8 as f64);
        let lines = vec![LineElement::new(
            LineKind::RulingLine,
            vec![Point::new(8.0, n as f64 / 2.0), Point::new(n as f64 - 9.0, n as f64 / 2.0)],
        )];
        (image, mask, lines)
    }

    #[test]
    fn identity_round_trip_is_exact() {
        let (image, mask, lines) = scene(48);
        let bm = DeformationField::identity(48, 48, Direction::Backward);
        for ratio in [0.1, 0.4, 1.0] {
            let r = round_trip(&image, &mask, &lines, &bm, ratio).unwrap();
            assert!((r.ssim_image - 1.0).abs() <= 1e-6);
            assert!(r.offset_points.max <= 1e-6);
            assert_eq!(r.iou_mask, 1.0);
            assert_eq!(r.points_lost, 0);
        }
    }

    #[test]
    fn sweep_of_identity_has_zero_offsets() {
        let (image, mask, lines) = scene(40);
        let bm = DeformationField::identity(40, 40, Direction::Backward);
        let t = ratio_sweep(&[BiasSample { image, mask, lines, bm }], &DEFAULT_RATIOS).unwrap();
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows.iter().all(|r| r.offsets.max <= 1e-6));
        assert_eq!(t.violation_rate(), 0.0);
        let mut csv = Vec::new();
        t.write_csv(&mut csv).unwrap();
        assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 5);
        let p = t.plot();
        assert_eq!((p.height(), p.width()), (PLOT_H, PLOT_W));
    }

    #[test]
    fn sweep_rejects_bad_input() {
        assert!(ratio_sweep(&[], &DEFAULT_RATIOS).is_err());
        let (image, mask, lines) = scene(40);
        let bm = DeformationField::identity(40, 40, Direction::Backward);
        let s = [BiasSample { image, mask, lines, bm }];
        assert!(ratio_sweep(&s, &[0.4, 0.2]).is_err());
        assert!(ratio_sweep(&s, &[]).is_err());
    }
}
