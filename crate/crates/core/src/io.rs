//! File formats: DFLD field files, PNG rasters and JSONL line files.
//!
//! DFLD layout: `b"DFLD"`, `u8` version (1), `u8` direction (0 backward,
//! 1 forward), `u32` LE height, `u32` LE width, then `height * width` pairs of
//! LE `f32` (x then y), row-major.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::field::{DeformationField, Direction};
use crate::geometry::LineElement;
use crate::raster::Raster;

const DFLD_MAGIC: &[u8; 4] = b"DFLD";
const DFLD_VERSION: u8 = 1;

pub fn write_field(w: &mut impl Write, field: &DeformationField) -> Result<()> {
    w.write_all(DFLD_MAGIC)?;
    w.write_all(&[DFLD_VERSION, direction_tag(field.direction())])?;
    w.write_all(&(field.height() as u32).to_le_bytes())?;
    w.write_all(&(field.width() as u32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(field.coords().len() * 8);
    for c in field.coords() {
        buf.extend_from_slice(&(c[0] as f32).to_le_bytes());
        buf.extend_from_slice(&(c[1] as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_field(r: &mut impl Read) -> Result<DeformationField> {
    let mut header = [0u8; 14];
    r.read_exact(&mut header).map_err(|_| Error::data("truncated DFLD header"))?;
    if &header[..4] != DFLD_MAGIC {
        return Err(Error::data("not a DFLD file"));
    }
    if header[4] != DFLD_VERSION {
        return Err(Error::data(format!("unsupported DFLD version {}", header[4])));
    }
    let direction = match header[5] {
        0 => Direction::Backward,
        1 => Direction::Forward,
        d => return Err(Error::data(format!("bad DFLD direction tag {d}"))),
    };
    let height = u32::from_le_bytes(header[6..10].try_into().unwrap()) as usize;
    let width = u32::from_le_bytes(header[10..14].try_into().unwrap()) as usize;
    let n = height
        .checked_mul(width)
        .filter(|&n| n > 0 && n <= 1 << 28)
        .ok_or_else(|| Error::data(format!("implausible DFLD dimensions {height}x{width}")))?;
    let mut body = vec![0u8; n * 8];
    r.read_exact(&mut body).map_err(|_| Error::data("truncated DFLD body"))?;
    let coords = body
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes(c[..4].try_into().unwrap()) as f64,
                f32::from_le_bytes(c[4..].try_into().unwrap()) as f64,
            ]
        })
        .collect();
    DeformationField::new(height, width, direction, coords).map_err(|e| Error::data(e.to_string()))
}

fn direction_tag(d: Direction) -> u8 {
    match d {
        Direction::Backward => 0,
        Direction::Forward => 1,
    }
}

pub fn save_field(path: impl AsRef<Path>, field: &DeformationField) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_field(&mut w, field)?;
    w.flush()?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<DeformationField> {
    read_field(&mut BufReader::new(File::open(path)?))
}

/// Load an 8- or 16-bit PNG. Gray and gray-alpha images give one channel,
/// everything else three (alpha is dropped).
pub fn load_png(path: impl AsRef<Path>) -> Result<Raster> {
    let img = image::open(path)?;
    let gray = matches!(
        img,
        DynamicImage::ImageLuma8(_)
            | DynamicImage::ImageLuma16(_)
            | DynamicImage::ImageLumaA8(_)
            | DynamicImage::ImageLumaA16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    if gray {
        let buf = img.to_luma16();
        let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Raster::new(h, w, 1, data)
    } else {
        let buf = img.to_rgb16();
        let data = buf.into_raw().into_iter().map(|v| v as f64 / 65535.0).collect();
        Raster::new(h, w, 3, data)
    }
}

#[inline]
fn quantize8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Save as an 8-bit PNG (gray for one channel, RGB for three).
pub fn save_png(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let bytes: Vec<u8> = raster.data().iter().map(|&v| quantize8(v)).collect();
    if raster.channels() == 1 {
        ImageBuffer::<Luma<u8>, _>::from_raw(w, h, bytes).expect("length checked by Raster").save(path)?;
    } else {
        ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, bytes).expect("length checked by Raster").save(path)?;
    }
    Ok(())
}

/// Save as a 16-bit PNG.
pub fn save_png16(path: impl AsRef<Path>, raster: &Raster) -> Result<()> {
    let (w, h) = (raster.width() as u32, raster.height() as u32);
    let words: Vec<u16> = raster.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16).collect();
    if raster.channels() == 1 {
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, words).expect("length checked by Raster").save(path)?;
    } else {
        ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, words).expect("length checked by Raster").save(path)?;
    }
    Ok(())
}

/// Masks are stored as 8-bit single-channel PNGs; reading thresholds at 0.5.
pub fn save_mask(path: impl AsRef<Path>, mask: &Raster) -> Result<()> {
    if mask.channels() != 1 {
        return Err(Error::invalid("masks must be single-channel"));
    }
    save_png(path, mask)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<Raster> {
    let r = load_png(path)?;
    if r.channels() != 1 {
        return Err(Error::data("mask PNG must be single-channel"));
    }
    Ok(r.threshold(0.5))
}

pub fn write_lines(w: &mut impl Write, lines: &[LineElement]) -> Result<()> {
    for line in lines {
        serde_json::to_writer(&mut *w, line)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_lines(r: impl BufRead) -> Result<Vec<LineElement>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let el: LineElement =
            serde_json::from_str(&line).map_err(|e| Error::data(format!("lines file, line {}: {e}", n + 1)))?;
        out.push(el);
    }
    Ok(out)
}

pub fn save_lines(path: impl AsRef<Path>, lines: &[LineElement]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_lines(&mut w, lines)?;
    w.flush()?;
    Ok(())
}

pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<LineElement>> {
    read_lines(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::generate_field;
    use crate::geometry::{LineKind, Point};

    #[test]
    fn field_round_trip_is_f32_exact() {
        let f = generate_field(3, 40, 33, 0.6).unwrap();
        let mut buf = Vec::new();
        write_field(&mut buf, &f).unwrap();
        assert_eq!(buf.len(), 14 + 40 * 33 * 8);
        assert_eq!(&buf[..6], b"DFLD\x01\x00");
        let back = read_field(&mut buf.as_slice()).unwrap();
        assert_eq!(back.direction(), Direction::Backward);
        assert!(back.max_coord_diff(&f) < 1e-7);
        let mut again = Vec::new();
        write_field(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn field_reader_rejects_garbage() {
        assert!(matches!(read_field(&mut &b"DFLX\x01\x00"[..]), Err(Error::Data(_))));
        let mut buf = Vec::new();
        write_field(&mut buf, &DeformationField::identity(4, 4, Direction::Forward)).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(read_field(&mut buf.as_slice()), Err(Error::Data(_))));
    }

    #[test]
    fn png_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let r = Raster::from_fn(5, 7, 3, |y, x, c| ((y * 7 + x) * 3 + c) as f64 / 104.0);
        let p8 = dir.path().join("a.png");
        save_png(&p8, &r).unwrap();
        let back = load_png(&p8).unwrap();
        assert_eq!(back.channels(), 3);
        assert!(back.max_abs_diff(&r) <= 0.5 / 255.0 + 1e-12);
        let p16 = dir.path().join("b.png");
        save_png16(&p16, &r).unwrap();
        assert!(load_png(&p16).unwrap().max_abs_diff(&r) <= 0.5 / 65535.0 + 1e-12);
        let m = Raster::from_fn(5, 7, 1, |y, x, _| ((x + y) % 2) as f64);
        let pm = dir.path().join("m.png");
        save_mask(&pm, &m).unwrap();
        assert_eq!(load_mask(&pm).unwrap(), m);
    }

    #[test]
    fn lines_round_trip() {
        let lines = vec![
            LineElement::new(LineKind::TextMidline, vec![Point::new(0.5, 1.0), Point::new(9.25, 1.0)]),
            LineElement::new(LineKind::RulingLine, vec![Point::new(3.0, 0.0), Point::new(3.0, 8.0)]),
        ];
        let mut buf = Vec::new();
        write_lines(&mut buf, &lines).unwrap();
        assert_eq!(String::from_utf8_lossy(&buf).lines().count(), 2);
        assert_eq!(read_lines(buf.as_slice()).unwrap(), lines);
        assert!(read_lines(&b"{\"kind\":\"curve\",\"points\":[]}\n"[..]).is_err());
    }
}
