//! Procedural documents with exact ink masks and line labels, and assembly
//! of distorted training samples.
//!
//! Text is drawn as rows of dark pseudo-glyph rectangles; each word carries a
//! midline through the glyph centres. Tables are drawn with 2-px rulings whose
//! centrelines are the ruling labels. Figures are filled shapes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{invert_field, warp_points, warp_raster, DeformationField, Direction, DEFAULT_SAMPLING_RATIO};
use crate::geometry::{ControlPointSet, LineElement, LineKind, Point};
use crate::raster::{PixelRect, Raster};

/// Side length of emitted training samples.
pub const SAMPLE_SIZE: usize = 288;

/// Ruling thickness in pixels.
pub const RULING_WIDTH: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BlockKind {
    Text { row_height: usize, glyph_height: usize },
    Table { rows: usize, cols: usize },
    Figure { ellipse: bool, shade: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    #[serde(flatten)]
    pub kind: BlockKind,
    pub rect: PixelRect,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DocumentLayout {
    pub width: usize,
    pub height: usize,
    pub blocks: Vec<Block>,
    pub seed: u64,
}

/// Rendered page: colour image, binary ink mask and undistorted lines.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedDocument {
    pub image: Raster,
    pub mask: Raster,
    pub lines: Vec<LineElement>,
    /// Number of pixels that received ink.
    pub ink_pixels: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub distorted: Raster,
    pub mask: Raster,
    pub lines: Vec<LineElement>,
    pub target_bm: DeformationField,
}

/// A sample together with bookkeeping from its assembly.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutcome {
    pub sample: TrainingSample,
    /// Line pieces that vanished entirely when clipped to the view.
    pub dropped_lines: usize,
}

impl DocumentLayout {
    pub fn validate(&self) -> Result<()> {
        if self.width < 16 || self.height < 16 {
            return Err(Error::invalid(format!("page {}x{} is too small", self.width, self.height)));
        }
        if !self.blocks.iter().any(|b| matches!(b.kind, BlockKind::Text { .. })) {
            return Err(Error::invalid("layout needs at least one text block"));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            if !b.rect.fits_within(self.width, self.height) {
                return Err(Error::invalid(format!("block {i} lies outside the page")));
            }
            match b.kind {
                BlockKind::Text { row_height, glyph_height } => {
                    if glyph_height < 3 || row_height <= glyph_height || b.rect.height < row_height {
                        return Err(Error::invalid(format!("block {i} has degenerate text rows")));
                    }
                }
                BlockKind::Table { rows, cols } => {
                    if rows == 0 || cols == 0 {
                        return Err(Error::invalid(format!("block {i} is an empty table")));
                    }
                    let min_cell = 2 * RULING_WIDTH + 2;
                    if b.rect.width < cols * min_cell + RULING_WIDTH || b.rect.height < rows * min_cell + RULING_WIDTH {
                        return Err(Error::invalid(format!("block {i} is too small for its cells")));
                    }
                }
                BlockKind::Figure { shade, .. } => {
                    if !(0.0..=1.0).contains(&shade) {
                        return Err(Error::invalid(format!("block {i} has shade outside [0, 1]")));
                    }
                }
            }
            for (j, o) in self.blocks.iter().enumerate().skip(i + 1) {
                if overlaps(&b.rect, &o.rect) {
                    return Err(Error::invalid(format!("blocks {i} and {j} overlap")));
                }
            }
        }
        Ok(())
    }

    /// Random page of stacked text, table and figure blocks.
    pub fn random(seed: u64, width: usize, height: usize) -> Result<Self> {
        Self::stacked(seed, width, height, [0.55, 0.25, 0.2])
    }

    /// Random page dominated by tables, with at least one table and one text
    /// block.
    pub fn random_tables(seed: u64, width: usize, height: usize) -> Result<Self> {
        Self::stacked(seed, width, height, [0.35, 0.65, 0.0])
    }

    fn stacked(seed: u64, width: usize, height: usize, weights: [f64; 3]) -> Result<Self> {
        if width < 96 || height < 96 {
            return Err(Error::invalid(format!("random layouts need at least 96x96, got {width}x{height}")));
        }
        // Space kept free for the mandatory text block until one is placed.
        const TEXT_RESERVE: usize = 2 * 16;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_1A70);
        let margin = rng.gen_range(10..=18);
        let inner_w = width - 2 * margin;
        let bottom = height - margin;
        let want_table = weights[1] > 0.5;
        let mut y = margin;
        let mut blocks: Vec<Block> = Vec::new();
        let mut has_text = false;
        loop {
            let avail = bottom.saturating_sub(y);
            let reserve = if has_text { 0 } else { TEXT_RESERVE };
            let pick: f64 = rng.gen();
            let kind = if blocks.is_empty() && want_table {
                1
            } else if !has_text && avail <= TEXT_RESERVE + 16 {
                0
            } else if pick < weights[0] {
                0
            } else if pick < weights[0] + weights[1] {
                1
            } else {
                2
            };
            let block = match kind {
                0 => {
                    let glyph_height = rng.gen_range(6..=9);
                    let row_height = glyph_height + rng.gen_range(4..=7);
                    let rows = rng.gen_range(2..=5).min(avail / row_height);
                    if rows == 0 {
                        break;
                    }
                    let w = rng.gen_range(inner_w * 3 / 5..=inner_w);
                    has_text = true;
                    Block {
                        kind: BlockKind::Text { row_height, glyph_height },
                        rect: PixelRect::new(margin, y, w, rows * row_height),
                    }
                }
                1 => {
                    let cell_h = rng.gen_range(14..=24);
                    let fit = avail.saturating_sub(reserve + RULING_WIDTH) / cell_h;
                    let rows = rng.gen_range(2..=4).min(fit);
                    let cols = rng.gen_range(2..=5);
                    if rows == 0 {
                        if has_text {
                            break;
                        }
                        continue;
                    }
                    let w = rng.gen_range(inner_w * 2 / 3..=inner_w);
                    let x = margin + rng.gen_range(0..=inner_w - w);
                    Block {
                        kind: BlockKind::Table { rows, cols },
                        rect: PixelRect::new(x, y, w, rows * cell_h + RULING_WIDTH),
                    }
                }
                _ => {
                    let h = rng.gen_range(28..=64);
                    if h + reserve > avail {
                        if has_text {
                            break;
                        }
                        continue;
                    }
                    let w = rng.gen_range(inner_w / 4..=inner_w / 2);
                    let x = margin + rng.gen_range(0..=inner_w - w);
                    let kind = BlockKind::Figure { ellipse: rng.gen_bool(0.5), shade: rng.gen_range(0.3..0.7) };
                    Block { kind, rect: PixelRect::new(x, y, w, h) }
                }
            };
            y += block.rect.height + rng.gen_range(8..=16);
            blocks.push(block);
            if y + 12 >= bottom {
                break;
            }
        }
        let layout = DocumentLayout { width, height, blocks, seed };
        layout.validate()?;
        Ok(layout)
    }
}

fn overlaps(a: &PixelRect, b: &PixelRect) -> bool {
    a.x < b.x + b.width && b.x < a.x + a.width && a.y < b.y + b.height && b.y < a.y + a.height
}

struct Canvas {
    image: Raster,
    mask: Vec<bool>,
    width: usize,
}

impl Canvas {
    fn ink(&mut self, x: usize, y: usize, colour: [f64; 3]) {
        for (c, v) in colour.iter().enumerate() {
            self.image.set(y, x, c, *v);
        }
        self.mask[y * self.width + x] = true;
    }

    fn fill(&mut self, x0: usize, y0: usize, w: usize, h: usize, colour: [f64; 3]) {
        for y in y0..y0 + h {
            for x in x0..x0 + w {
                self.ink(x, y, colour);
            }
        }
    }
}

pub fn render_document(layout: &DocumentLayout) -> Result<RenderedDocument> {
    layout.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(layout.seed);
    let paper = [rng.gen_range(0.9..1.0), rng.gen_range(0.9..1.0), rng.gen_range(0.88..0.98)];
    let (w, h) = (layout.width, layout.height);
    let mut canvas = Canvas { image: Raster::from_fn(h, w, 3, |_, _, c| paper[c]), mask: vec![false; w * h], width: w };
    let mut lines = Vec::new();
    for block in &layout.blocks {
        let r = block.rect;
        match block.kind {
            BlockKind::Text { row_height, glyph_height } => {
                let ink_level = rng.gen_range(0.05..0.3);
                let colour = [ink_level; 3];
                let lead = (row_height - glyph_height) / 2;
                let mut top = r.y + lead;
                while top + glyph_height <= r.y + r.height {
                    render_text_row(&mut canvas, &mut rng, r.x, r.x + r.width, top, glyph_height, colour, &mut lines);
                    top += row_height;
                }
            }
            BlockKind::Table { rows, cols } => {
                let ink_level = rng.gen_range(0.0..0.25);
                let colour = [ink_level; 3];
                let ys = cell_edges(r.y, r.height, rows);
                let xs = cell_edges(r.x, r.width, cols);
                for &yk in &ys {
                    canvas.fill(r.x, yk, r.width, RULING_WIDTH, colour);
                    let yc = yk as f64 + 0.5 * (RULING_WIDTH - 1) as f64;
                    lines.push(LineElement::new(
                        LineKind::RulingLine,
                        vec![Point::new(r.x as f64, yc), Point::new((r.x + r.width - 1) as f64, yc)],
                    ));
                }
                for &xk in &xs {
                    canvas.fill(xk, r.y, RULING_WIDTH, r.height, colour);
                    let xc = xk as f64 + 0.5 * (RULING_WIDTH - 1) as f64;
                    lines.push(LineElement::new(
                        LineKind::RulingLine,
                        vec![Point::new(xc, r.y as f64), Point::new(xc, (r.y + r.height - 1) as f64)],
                    ));
                }
            }
            BlockKind::Figure { ellipse, shade } => {
                let tint: f64 = rng.gen_range(-0.1..0.1);
                let colour = [(shade + tint).clamp(0.0, 1.0), shade, (shade - tint).clamp(0.0, 1.0)];
                let (cx, cy) = (r.x as f64 + (r.width as f64 - 1.0) / 2.0, r.y as f64 + (r.height as f64 - 1.0) / 2.0);
                let (ax, ay) = (r.width as f64 / 2.0, r.height as f64 / 2.0);
                for y in r.y..r.y + r.height {
                    for x in r.x..r.x + r.width {
                        let (dx, dy) = ((x as f64 - cx) / ax, (y as f64 - cy) / ay);
                        if !ellipse || dx * dx + dy * dy <= 1.0 {
                            canvas.ink(x, y, colour);
                        }
                    }
                }
            }
        }
    }
    let ink_pixels = canvas.mask.iter().filter(|&&m| m).count();
    let mask = Raster::new(h, w, 1, canvas.mask.iter().map(|&m| m as u8 as f64).collect())?;
    Ok(RenderedDocument { image: canvas.image, mask, lines, ink_pixels })
}

/// `n + 1` ruling offsets splitting `len` into `n` near-equal cells, the last
/// one flush with the far edge.
fn cell_edges(start: usize, len: usize, n: usize) -> Vec<usize> {
    let span = (len - RULING_WIDTH) as f64;
    (0..=n).map(|k| start + (span * k as f64 / n as f64).round() as usize).collect()
}

#[allow(clippy::too_many_arguments)]
fn render_text_row(
    canvas: &mut Canvas,
    rng: &mut ChaCha8Rng,
    x_start: usize,
    x_end: usize,
    top: usize,
    glyph_height: usize,
    colour: [f64; 3],
    lines: &mut Vec<LineElement>,
) {
    let mid = top as f64 + (glyph_height as f64 - 1.0) / 2.0;
    let mut x = x_start;
    // Rows end raggedly.
    let row_end = x_end - rng.gen_range(0..=(x_end - x_start) / 4);
    loop {
        let glyphs = rng.gen_range(2..=8);
        let mut word_end = x;
        let mut placed = 0;
        for _ in 0..glyphs {
            let gw = rng.gen_range(3..=6);
            let start = if placed == 0 { x } else { word_end + 1 };
            if start + gw > row_end {
                break;
            }
            // Occasional ascender/descender variation keeps the midline inside.
            let shrink = if rng.gen_bool(0.3) { 1 } else { 0 };
            let (gy, gh) =
                if rng.gen_bool(0.5) { (top + shrink, glyph_height - shrink) } else { (top, glyph_height - shrink) };
            canvas.fill(start, gy, gw, gh, colour);
            word_end = start + gw;
            placed += 1;
        }
        if placed == 0 {
            break;
        }
        if placed >= 2 {
            lines.push(LineElement::new(
                LineKind::TextMidline,
                vec![Point::new(x as f64, mid), Point::new((word_end - 1) as f64, mid)],
            ));
        }
        x = word_end + rng.gen_range(4..=7);
        if x + 3 > row_end {
            break;
        }
    }
}

/// Smooth colour value noise used outside the page region.
pub fn background_texture(seed: u64, height: usize, width: usize) -> Raster {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: [f64; 3] = [rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85), rng.gen_range(0.15..0.85)];
    let octaves: Vec<(f64, f64, Vec<[f64; 3]>, usize)> = [24.0, 9.0, 4.0]
        .iter()
        .zip([0.25, 0.12, 0.06])
        .map(|(&cell, amp)| {
            let cols = (width as f64 / cell).ceil() as usize + 2;
            let rows = (height as f64 / cell).ceil() as usize + 2;
            let lattice = (0..rows * cols)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
                .collect();
            (cell, amp, lattice, cols)
        })
        .collect();
    Raster::from_fn(height, width, 3, |y, x, c| {
        let mut v = base[c];
        for (cell, amp, lattice, cols) in &octaves {
            let (fx, fy) = (x as f64 / cell, y as f64 / cell);
            let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
            let (tx, ty) = (smoothstep(fx - ix as f64), smoothstep(fy - iy as f64));
            let at = |r: usize, q: usize| lattice[r * cols + q][c];
            let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
            let bot = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
            v += amp * (top * (1.0 - ty) + bot * ty);
        }
        v
    })
}

fn smoothstep(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

#[inline]
fn on_page(c: [f64; 2]) -> bool {
    (0.0..=1.0).contains(&c[0]) && (0.0..=1.0).contains(&c[1])
}

/// Warp a rendered page with `bm` into a distorted training sample.
///
/// The image is sampled bilinearly and composited over a value-noise texture
/// where `bm` points off the page; the mask is sampled the same way and
/// re-thresholded at 0.5; lines are densified to 1-px spacing, carried into
/// distorted space through the inverted field and clipped to the view, with
/// pieces split where they leave it.
pub fn make_sample(doc: &RenderedDocument, bm: &DeformationField, background_seed: u64) -> Result<SampleOutcome> {
    if bm.direction() != Direction::Backward {
        return Err(Error::invalid("make_sample needs a backward field"));
    }
    let (h, w) = (bm.height(), bm.width());
    let warped = warp_raster(&doc.image, bm);
    let background = background_texture(background_seed, h, w);
    let distorted = Raster::from_fn(h, w, doc.image.channels(), |y, x, c| {
        if on_page(bm.at(y, x)) {
            warped.get(y, x, c)
        } else {
            background.get(y, x, c)
        }
    });
    let warped_mask = warp_raster(&doc.mask, bm);
    let mask =
        Raster::from_fn(h, w, 1, |y, x, _| (on_page(bm.at(y, x)) && warped_mask.get(y, x, 0) >= 0.5) as u8 as f64);

    let identity = bm.coords().iter().enumerate().all(|(k, c)| {
        let (i, j) = (k / w, k % w);
        c[0] == j as f64 / (w - 1) as f64 && c[1] == i as f64 / (h - 1) as f64
    }) && (h, w) == (doc.image.height(), doc.image.width());
    let (lines, dropped_lines) = if identity {
        (doc.lines.clone(), 0)
    } else {
        warp_lines(&doc.lines, bm, doc.image.width(), doc.image.height())?
    };
    Ok(SampleOutcome { sample: TrainingSample { distorted, mask, lines, target_bm: bm.clone() }, dropped_lines })
}

/// Map undistorted lines into the distorted view of `bm`. Returns the
/// surviving pieces and the number of lines that vanished.
pub fn warp_lines(
    lines: &[LineElement],
    bm: &DeformationField,
    page_width: usize,
    page_height: usize,
) -> Result<(Vec<LineElement>, usize)> {
    let fm = invert_field(bm, DEFAULT_SAMPLING_RATIO)?;
    // The forward field is indexed by the page; rescale page pixels onto it.
    let sx = (fm.width() - 1) as f64 / (page_width - 1) as f64;
    let sy = (fm.height() - 1) as f64 / (page_height - 1) as f64;
    let (xmax, ymax) = ((bm.width() - 1) as f64, (bm.height() - 1) as f64);
    let mut out = Vec::new();
    let mut dropped = 0;
    for line in lines {
        let dense = line.densified(1.0);
        let on_grid =
            ControlPointSet::new(dense.points.iter().map(|p| Point::new(p.x * sx, p.y * sy)).collect(), 0, 1.0);
        let mapped = warp_points(&on_grid, &fm)?;
        let pieces = clip_polyline(&mapped.points, xmax, ymax);
        let before = out.len();
        out.extend(
            pieces
                .into_iter()
                .map(|pts| LineElement::new(line.kind, pts))
                .filter(|l| l.is_well_formed() && l.arc_length() > 0.0),
        );
        if out.len() == before {
            dropped += 1;
        }
    }
    Ok((out, dropped))
}

/// Split a polyline at the boundary of `[0, xmax] x [0, ymax]`, inserting the
/// crossing points and discarding the outside parts.
fn clip_polyline(points: &[Point], xmax: f64, ymax: f64) -> Vec<Vec<Point>> {
    let inside = |p: &Point| p.x >= 0.0 && p.y >= 0.0 && p.x <= xmax && p.y <= ymax;
    let mut pieces = Vec::new();
    let mut current: Vec<Point> = Vec::new();
    for (k, p) in points.iter().enumerate() {
        let prev = if k > 0 { Some(points[k - 1]) } else { None };
        match (prev.map(|q| inside(&q)), inside(p)) {
            (None, true) | (Some(true), true) => push_distinct(&mut current, *p),
            (Some(false), true) => {
                push_distinct(&mut current, crossing(prev.unwrap(), *p, xmax, ymax));
                push_distinct(&mut current, *p);
            }
            (Some(true), false) => {
                push_distinct(&mut current, crossing(*p, prev.unwrap(), xmax, ymax));
                pieces.push(std::mem::take(&mut current));
            }
            _ => {}
        }
    }
    pieces.push(current);
    pieces.retain(|p| p.len() >= 2);
    pieces
}

fn push_distinct(v: &mut Vec<Point>, p: Point) {
    if v.last() != Some(&p) {
        v.push(p);
    }
}

/// Point where the segment from `outside` to `inside` enters the box.
fn crossing(outside: Point, inside: Point, xmax: f64, ymax: f64) -> Point {
    let mut t_in: f64 = 0.0;
    let d = [inside.x - outside.x, inside.y - outside.y];
    for (axis, (lo, hi)) in [(0.0, xmax), (0.0, ymax)].into_iter().enumerate() {
        let o = if axis == 0 { outside.x } else { outside.y };
        if d[axis] != 0.0 {
            for bound in [lo, hi] {
                let t = (bound - o) / d[axis];
                if (0.0..=1.0).contains(&t) && ((o < lo && bound == lo) || (o > hi && bound == hi)) {
                    t_in = t_in.max(t);
                }
            }
        }
    }
    let p = outside.lerp(&inside, t_in);
    Point::new(p.x.clamp(0.0, xmax), p.y.clamp(0.0, ymax))
}

impl TrainingSample {
    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.target_bm.height(), self.target_bm.width());
        if (self.distorted.height(), self.distorted.width()) != (h, w)
            || (self.mask.height(), self.mask.width()) != (h, w)
        {
            return Err(Error::data("sample rasters and field differ in size"));
        }
        if !self.mask.is_binary() {
            return Err(Error::data("sample mask is not binary"));
        }
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        for l in &self.lines {
            if !l.is_well_formed() {
                return Err(Error::data("sample contains a malformed line"));
            }
            if l.points.iter().any(|p| !(p.x >= 0.0 && p.y >= 0.0 && p.x <= xmax && p.y <= ymax)) {
                return Err(Error::data("sample line leaves the image"));
            }
        }
        Ok(())
    }
}
