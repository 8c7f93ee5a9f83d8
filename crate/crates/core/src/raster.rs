//! Images and masks as dense row-major `f64` rasters with values in `[0, 1]`.

use crate::error::{Error, Result};

/// Sub-pixel positions closer than this to an integer are snapped onto it so
/// that integer-coordinate bilinear samples are exact.
const SNAP_EPS: f64 = 1e-9;

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl PixelRect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.width > 0 && self.height > 0 && self.x + self.width <= width && self.y + self.height <= height
    }
}

/// Image (1 or 3 channels) or mask (1 channel).
#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid("raster dimensions must be non-zero"));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("raster must have 1 or 3 channels, got {channels}")));
        }
        if data.len() != height * width * channels {
            return Err(Error::invalid(format!(
                "raster data length {} does not match {height}x{width}x{channels}",
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0) {
            return Err(Error::invalid(format!("raster value {bad} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    /// Constant raster. `value` is clamped into `[0, 1]`.
    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        Self { height, width, channels, data: vec![value.clamp(0.0, 1.0); height * width * channels] }
    }

    /// Build from a per-pixel generator; generated values are clamped into `[0, 1]`.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        assert!(height > 0 && width > 0 && (channels == 1 || channels == 3));
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    let v = f(y, x, c);
                    data.push(if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 });
                }
            }
        }
        Self { height, width, channels, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn same_dims(&self, other: &Raster) -> bool {
        self.height == other.height && self.width == other.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, value: f64) {
        self.data[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Single-channel luma (Rec. 601 weights); a copy for 1-channel input.
    pub fn to_luma(&self) -> Raster {
        if self.channels == 1 {
            return self.clone();
        }
        let data =
            self.data.chunks_exact(3).map(|p| (0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]).clamp(0.0, 1.0)).collect();
        Raster { height: self.height, width: self.width, channels: 1, data }
    }

    pub fn crop(&self, rect: PixelRect) -> Result<Raster> {
        if !rect.fits_within(self.width, self.height) {
            return Err(Error::invalid(format!("crop {rect:?} outside {}x{} raster", self.width, self.height)));
        }
        let mut data = Vec::with_capacity(rect.area() * self.channels);
        for y in rect.y..rect.y + rect.height {
            let start = (y * self.width + rect.x) * self.channels;
            data.extend_from_slice(&self.data[start..start + rect.width * self.channels]);
        }
        Ok(Raster { height: rect.height, width: rect.width, channels: self.channels, data })
    }

    /// Bilinear sample at pixel position `(px, py)`, clamping to the edge.
    /// Writes `channels` values into `out`.
    pub fn sample_bilinear(&self, px: f64, py: f64, out: &mut [f64]) {
        let (x0, x1, fx) = split_coord(px, self.width);
        let (y0, y1, fy) = split_coord(py, self.height);
        let c = self.channels;
        let i00 = (y0 * self.width + x0) * c;
        let i01 = (y0 * self.width + x1) * c;
        let i10 = (y1 * self.width + x0) * c;
        let i11 = (y1 * self.width + x1) * c;
        for k in 0..c {
            let v = if fx == 0.0 && fy == 0.0 {
                self.data[i00 + k]
            } else {
                let top = self.data[i00 + k] * (1.0 - fx) + self.data[i01 + k] * fx;
                let bottom = self.data[i10 + k] * (1.0 - fx) + self.data[i11 + k] * fx;
                top * (1.0 - fy) + bottom * fy
            };
            out[k] = v.clamp(0.0, 1.0);
        }
    }

    /// Nearest-neighbour sample with edge clamping.
    pub fn sample_nearest(&self, px: f64, py: f64, out: &mut [f64]) {
        let x = px.round().clamp(0.0, (self.width - 1) as f64) as usize;
        let y = py.round().clamp(0.0, (self.height - 1) as f64) as usize;
        out.copy_from_slice(self.pixel(y, x));
    }

    /// Binarize a single-channel raster at `threshold` (`>=` maps to 1).
    pub fn threshold(&self, threshold: f64) -> Raster {
        let data = self.data.iter().map(|&v| if v >= threshold { 1.0 } else { 0.0 }).collect();
        Raster { height: self.height, width: self.width, channels: self.channels, data }
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

/// Split a pixel coordinate into clamped neighbour indices and the fractional
/// weight of the upper neighbour.
#[inline]
pub(crate) fn split_coord(p: f64, len: usize) -> (usize, usize, f64) {
    let max = (len - 1) as f64;
    let mut p = p.clamp(0.0, max);
    let r = p.round();
    if (p - r).abs() < SNAP_EPS {
        p = r;
    }
    let i0 = p.floor();
    let f = p - i0;
    let i0 = i0 as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, f)
}

/// Intersection-over-union of two binary masks (values `>= 0.5` count as set).
/// Two empty masks have IoU 1.
pub fn mask_iou(a: &Raster, b: &Raster) -> f64 {
    assert!(a.same_dims(b));
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x >= 0.5, y >= 0.5);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
