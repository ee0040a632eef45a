//! Procedural digit glyphs and synthetic page generation.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::manifest::{Manifest, ManifestEntry, SampleKind, Split};
use crate::error::{Error, Result};
use crate::imageprep::{BinaryImage, LineBox};

type Stroke = Vec<(f64, f64)>;

#[derive(Clone, Debug)]
pub enum Glyph {
    /// Polylines in a unit box, `y` pointing down.
    Strokes(Vec<Stroke>),
    Bitmap(BinaryImage),
}

#[derive(Clone, Debug)]
pub struct GlyphSet {
    glyphs: Vec<(char, Glyph)>,
}

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64) -> Stroke {
    (0..=24)
        .map(|i| {
            let a = i as f64 / 24.0 * std::f64::consts::TAU;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

impl GlyphSet {
    pub fn new(glyphs: Vec<(char, Glyph)>) -> Result<Self> {
        if glyphs.is_empty() {
            return Err(Error::Config("empty glyph set".into()));
        }
        Ok(Self { glyphs })
    }

    /// Hand-drawn stroke templates for 0–9.
    pub fn digits() -> Self {
        let s = |pts: &[(f64, f64)]| pts.to_vec();
        let d: Vec<Vec<Stroke>> = vec![
            vec![ellipse(0.5, 0.5, 0.4, 0.48)],
            vec![s(&[(0.25, 0.22), (0.6, 0.0), (0.6, 1.0)])],
            vec![s(&[
                (0.1, 0.25),
                (0.3, 0.02),
                (0.7, 0.02),
                (0.9, 0.25),
                (0.85, 0.45),
                (0.1, 1.0),
                (0.95, 1.0),
            ])],
            vec![s(&[
                (0.1, 0.1),
                (0.4, 0.0),
                (0.85, 0.15),
                (0.85, 0.35),
                (0.45, 0.5),
                (0.9, 0.65),
                (0.9, 0.85),
                (0.5, 1.0),
                (0.1, 0.9),
            ])],
            vec![s(&[(0.7, 1.0), (0.7, 0.0), (0.05, 0.7), (0.95, 0.7)])],
            vec![s(&[
                (0.9, 0.0),
                (0.2, 0.0),
                (0.15, 0.45),
                (0.6, 0.4),
                (0.9, 0.6),
                (0.85, 0.9),
                (0.5, 1.0),
                (0.1, 0.9),
            ])],
            vec![s(&[
                (0.8, 0.05),
                (0.4, 0.1),
                (0.15, 0.5),
                (0.15, 0.85),
                (0.45, 1.0),
                (0.8, 0.9),
                (0.85, 0.65),
                (0.5, 0.5),
                (0.15, 0.65),
            ])],
            vec![
                s(&[(0.05, 0.0), (0.95, 0.0), (0.4, 1.0)]),
                s(&[(0.35, 0.5), (0.8, 0.5)]),
            ],
            vec![ellipse(0.5, 0.24, 0.32, 0.24), ellipse(0.5, 0.73, 0.4, 0.27)],
            vec![ellipse(0.5, 0.3, 0.38, 0.3), s(&[(0.88, 0.3), (0.75, 1.0)])],
        ];
        let glyphs = d
            .into_iter()
            .enumerate()
            .map(|(i, strokes)| (char::from(b'0' + i as u8), Glyph::Strokes(strokes)))
            .collect();
        Self { glyphs }
    }

    /// One PGM or PNG bitmap per symbol, named after its character.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut glyphs = Vec::new();
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let mut chars = stem.chars();
            if let (Some(c), None) = (chars.next(), chars.next()) {
                glyphs.push((c, Glyph::Bitmap(BinaryImage::load(&path)?)));
            }
        }
        glyphs.sort_by_key(|(c, _)| *c);
        Self::new(glyphs)
    }

    pub fn len(&self) -> usize {
        self.glyphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.glyphs.is_empty()
    }

    pub fn chars(&self) -> impl Iterator<Item = char> + '_ {
        self.glyphs.iter().map(|(c, _)| *c)
    }
}

fn draw_segment(img: &mut BinaryImage, a: (f64, f64), b: (f64, f64), r: f64) {
    let (x0, x1) = (a.0.min(b.0) - r, a.0.max(b.0) + r);
    let (y0, y1) = (a.1.min(b.1) - r, a.1.max(b.1) + r);
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    for y in (y0.floor().max(0.0) as usize)..=(y1.ceil() as usize).min(img.height().saturating_sub(1)) {
        for x in (x0.floor().max(0.0) as usize)..=(x1.ceil() as usize).min(img.width().saturating_sub(1)) {
            let (px, py) = (x as f64 - a.0, y as f64 - a.1);
            let t = if len2 > 0.0 {
                ((px * dx + py * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (ex, ey) = (px - t * dx, py - t * dy);
            if ex * ex + ey * ey <= r * r {
                img.set(y, x, true);
            }
        }
    }
}

/// Renders a glyph `height` pixels tall (plus stroke radius), slanted by
/// `slant_deg` (positive leans right).
fn render_glyph(glyph: &Glyph, height: f64, aspect: f64, slant_deg: f64, radius: f64) -> BinaryImage {
    match glyph {
        Glyph::Bitmap(b) => {
            let h = height.round().max(1.0) as usize;
            let w = ((b.width() as f64 * h as f64 / b.height() as f64).round() as usize).max(1);
            let mut out = BinaryImage::blank(h, w);
            for y in 0..h {
                for x in 0..w {
                    let sy = (y * b.height() / h).min(b.height() - 1);
                    let sx = (x * b.width() / w).min(b.width() - 1);
                    out.set(y, x, b.get(sy, sx));
                }
            }
            out
        }
        Glyph::Strokes(strokes) => {
            let t = slant_deg.to_radians().tan();
            let gw = height * aspect;
            let lean = height * t.abs();
            let w = (gw + lean + 2.0 * radius).ceil() as usize + 1;
            let h = (height + 2.0 * radius).ceil() as usize + 1;
            let x_off = radius + if t < 0.0 { lean } else { 0.0 };
            let map = |(u, v): (f64, f64)| {
                let y = v * height;
                (x_off + u * gw + (height - y) * t, radius + y)
            };
            let mut img = BinaryImage::blank(h, w);
            for s in strokes {
                for seg in s.windows(2) {
                    draw_segment(&mut img, map(seg[0]), map(seg[1]), radius);
                }
            }
            img
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    #[serde(rename = "1d")]
    OneD,
    #[serde(rename = "2d")]
    TwoD,
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "1d" => Ok(Layout::OneD),
            "2d" => Ok(Layout::TwoD),
            other => Err(Error::Config(format!("unknown layout {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    /// Small number in the top margin.
    pub page_number: bool,
    /// Scribbles in the side margins.
    pub margin_marks: usize,
}

impl NoiseParams {
    pub fn none() -> Self {
        Self {
            page_number: false,
            margin_marks: 0,
        }
    }

    pub fn standard() -> Self {
        Self {
            page_number: true,
            margin_marks: 3,
        }
    }

    pub fn is_none(&self) -> bool {
        !self.page_number && self.margin_marks == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PageSpec {
    pub n_lines: usize,
    pub chars_per_line: usize,
    pub layout: Layout,
    pub noise: NoiseParams,
    /// Fixed `(height, width)`; sized to content when absent.
    pub size: Option<(usize, usize)>,
}

impl PageSpec {
    pub fn new(n_lines: usize, chars_per_line: usize, layout: Layout) -> Self {
        Self {
            n_lines,
            chars_per_line,
            layout,
            noise: NoiseParams::none(),
            size: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticPage {
    pub image: BinaryImage,
    /// The same page without noise decals.
    pub clean: BinaryImage,
    /// Line transcripts joined by single spaces.
    pub transcript: String,
    pub line_transcripts: Vec<String>,
    pub boxes: Vec<LineBox>,
}

pub const LINE_PITCH: usize = 64;
const TOP_MARGIN: usize = 20;
const BOTTOM_MARGIN: usize = 16;
const SIDE_MARGIN: usize = 24;

struct RenderedLine {
    strip: BinaryImage,
    text: String,
}

fn render_line<R: Rng + ?Sized>(rng: &mut R, glyphs: &GlyphSet, groups: &[usize]) -> RenderedLine {
    let height = rng.gen_range(30.0..35.0);
    let slant = rng.gen_range(-6.0..6.0);
    let radius = rng.gen_range(1.3..2.0);
    let mut pieces = Vec::new();
    let mut text = String::new();
    for (gi, &n) in groups.iter().enumerate() {
        if gi > 0 {
            text.push(' ');
            pieces.push(None);
        }
        for _ in 0..n {
            let (c, g) = &glyphs.glyphs[rng.gen_range(0..glyphs.len())];
            let h = height * rng.gen_range(0.92..1.04);
            let img = render_glyph(g, h, 0.48, slant, radius);
            let dy: isize = rng.gen_range(-3..=3);
            let gap = rng.gen_range(1..=4);
            pieces.push(Some((img, dy, gap)));
            text.push(*c);
        }
    }
    let word_gap = 18;
    let width: usize = pieces
        .iter()
        .map(|p| p.as_ref().map_or(word_gap, |(img, _, gap)| img.width() + gap))
        .sum();
    let mut strip = BinaryImage::blank(LINE_PITCH, width.max(1));
    let mut x = 0;
    for p in pieces {
        match p {
            None => x += word_gap,
            Some((img, dy, gap)) => {
                let top = ((LINE_PITCH as isize - img.height() as isize) / 2 + dy).max(0) as usize;
                let top = top.min(LINE_PITCH - img.height().min(LINE_PITCH));
                strip.blit_or(&img, top, x).expect("glyph fits its strip");
                x += img.width() + gap;
            }
        }
    }
    RenderedLine { strip, text }
}

fn ink_bounds(img: &BinaryImage) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (usize::MAX, 0, usize::MAX, 0);
    for y in 0..img.height() {
        for x in 0..img.width() {
            if img.get(y, x) {
                y0 = y0.min(y);
                y1 = y1.max(y);
                x0 = x0.min(x);
                x1 = x1.max(x);
            }
        }
    }
    (y0 != usize::MAX).then_some((y0, y1, x0, x1))
}

fn scribble<R: Rng + ?Sized>(rng: &mut R, img: &mut BinaryImage, x_range: (f64, f64), y_range: (f64, f64)) {
    let n = rng.gen_range(3..6);
    let mut p = (rng.gen_range(x_range.0..x_range.1), rng.gen_range(y_range.0..y_range.1));
    for _ in 0..n {
        let q = (
            (p.0 + rng.gen_range(-8.0..8.0)).clamp(x_range.0, x_range.1),
            (p.1 + rng.gen_range(-12.0..12.0)).clamp(y_range.0, y_range.1),
        );
        draw_segment(img, p, q, 1.2);
        p = q;
    }
}

fn add_noise<R: Rng + ?Sized>(
    rng: &mut R,
    glyphs: &GlyphSet,
    page: &BinaryImage,
    boxes: &[LineBox],
    noise: &NoiseParams,
) -> BinaryImage {
    let (h, w) = (page.height(), page.width());
    let mut layer = BinaryImage::blank(h, w);
    if noise.page_number {
        let digits = rng.gen_range(1..=3);
        let mut x = rng.gen_range(w / 3..(2 * w / 3).max(w / 3 + 1));
        for _ in 0..digits {
            let (_, g) = &glyphs.glyphs[rng.gen_range(0..glyphs.len())];
            let img = render_glyph(g, 11.0, 0.5, 0.0, 1.0);
            if x + img.width() < w && img.height() + 2 < TOP_MARGIN {
                layer.blit_or(&img, 2, x).expect("fits");
            }
            x += img.width() + 1;
        }
    }
    for _ in 0..noise.margin_marks {
        let left = rng.gen_bool(0.5);
        let xr = if left {
            (2.0, SIDE_MARGIN as f64 - 4.0)
        } else {
            ((w - SIDE_MARGIN) as f64 + 4.0, w as f64 - 3.0)
        };
        scribble(rng, &mut layer, xr, (TOP_MARGIN as f64, (h - BOTTOM_MARGIN) as f64));
    }
    // decals never touch line boxes
    for b in boxes {
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                layer.set(y, x, false);
            }
        }
    }
    let mut out = page.clone();
    out.blit_or(&layer, 0, 0).expect("same size");
    out
}

/// Renders one page of random glyph lines with ground truth.
pub fn gen_synthetic_page<R: Rng + ?Sized>(rng: &mut R, glyphs: &GlyphSet, spec: &PageSpec) -> Result<SyntheticPage> {
    if glyphs.is_empty() {
        return Err(Error::Config("empty glyph set".into()));
    }
    if spec.n_lines == 0 || spec.chars_per_line == 0 {
        return Err(Error::Config("page needs at least one line and one character".into()));
    }
    let lines: Vec<RenderedLine> = match spec.layout {
        Layout::TwoD => (0..spec.n_lines)
            .map(|_| render_line(rng, glyphs, &[spec.chars_per_line]))
            .collect(),
        Layout::OneD => vec![render_line(rng, glyphs, &vec![spec.chars_per_line; spec.n_lines])],
    };
    let content_w = lines.iter().map(|l| l.strip.width()).max().unwrap_or(0) + 2 * SIDE_MARGIN;
    let content_h = TOP_MARGIN + lines.len() * LINE_PITCH + BOTTOM_MARGIN;
    let (page_h, page_w) = spec.size.unwrap_or((content_h, content_w));
    if page_h < content_h || page_w < content_w {
        return Err(Error::Config(format!(
            "page {page_h}x{page_w} too small for {content_h}x{content_w} of content"
        )));
    }
    let mut clean = BinaryImage::blank(page_h, page_w);
    let mut boxes = Vec::new();
    for (i, l) in lines.iter().enumerate() {
        let (oy, ox) = (TOP_MARGIN + i * LINE_PITCH, SIDE_MARGIN);
        clean.blit_or(&l.strip, oy, ox)?;
        if let Some((y0, y1, x0, x1)) = ink_bounds(&l.strip) {
            let (y0, x0) = ((oy + y0).saturating_sub(1), (ox + x0).saturating_sub(1));
            let (y1, x1) = ((oy + y1 + 1).min(page_h - 1), (ox + x1 + 1).min(page_w - 1));
            boxes.push(LineBox {
                x: x0,
                y: y0,
                w: x1 - x0 + 1,
                h: y1 - y0 + 1,
                line_index: i,
            });
        }
    }
    let image = if spec.noise.is_none() {
        clean.clone()
    } else {
        add_noise(rng, glyphs, &clean, &boxes, &spec.noise)
    };
    let line_transcripts: Vec<String> = lines.into_iter().map(|l| l.text).collect();
    Ok(SyntheticPage {
        image,
        clean,
        transcript: line_transcripts.join(" "),
        line_transcripts,
        boxes,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub pages: usize,
    pub page: PageSpec,
    pub seed: u64,
    pub validate_pages: usize,
    pub test_pages: usize,
}

fn split_of(i: usize, spec: &CorpusSpec) -> Split {
    let train = spec.pages.saturating_sub(spec.validate_pages + spec.test_pages);
    if i < train {
        Split::Train
    } else if i < train + spec.validate_pages {
        Split::Validate
    } else {
        Split::Test
    }
}

/// Page `index` of a seeded corpus; independent of every other page.
pub fn corpus_page(spec: &CorpusSpec, glyphs: &GlyphSet, index: usize) -> Result<SyntheticPage> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    gen_synthetic_page(&mut rng, glyphs, &spec.page)
}

/// Writes `images/page_NNNNN.png`, `manifest.jsonl` and one
/// `manifest.<split>.jsonl` per split under `dir`.
pub fn write_synthetic_corpus(dir: &Path, spec: &CorpusSpec, glyphs: &GlyphSet) -> Result<Manifest> {
    if spec.pages == 0 {
        return Err(Error::Config("corpus needs at least one page".into()));
    }
    std::fs::create_dir_all(dir.join("images"))?;
    let entries: Vec<ManifestEntry> = (0..spec.pages)
        .into_par_iter()
        .map(|i| {
            let page = corpus_page(spec, glyphs, i)?;
            let name = format!("page_{i:05}");
            let rel = Path::new("images").join(format!("{name}.png"));
            page.image.save(&dir.join(&rel))?;
            Ok(ManifestEntry {
                split: split_of(i, spec),
                kind: SampleKind::Page,
                image: rel,
                transcript: page.transcript,
                group: Some(name),
                boxes: page.boxes,
                line_transcripts: page.line_transcripts,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest::new(dir, entries);
    write_split_manifests(dir, &manifest)?;
    Ok(manifest)
}

/// `manifest.jsonl` plus `manifest.<split>.jsonl` for every non-empty split.
pub fn write_split_manifests(dir: &Path, manifest: &Manifest) -> Result<()> {
    manifest.save(&dir.join("manifest.jsonl"))?;
    for split in [Split::Train, Split::Validate, Split::Test] {
        let sub = manifest.subset(split);
        if !sub.entries.is_empty() {
            sub.save(&dir.join(format!("manifest.{split}.jsonl")))?;
        }
    }
    Ok(())
}
