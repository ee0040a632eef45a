//! Pixel-space preprocessing. Bilevel images use black background (0) and
//! white signal (1) throughout.

use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LINE_HEIGHT;
use crate::tensor::Tensor;

/// Background pixels inserted between lines of a flattened page.
pub const LINE_GAP: usize = 32;

/// Inclusive search range of [`deslant`], in degrees.
pub const DESLANT_MAX_DEG: i32 = 45;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryImage {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    /// Any nonzero input byte counts as signal.
    pub fn from_pixels(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Shape(format!(
                "{} pixels for a {height}x{width} image",
                pixels.len()
            )));
        }
        let pixels = pixels.into_iter().map(|p| u8::from(p != 0)).collect();
        Ok(Self { height, width, pixels })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.pixels[y * self.width + x] = u8::from(on);
    }

    pub fn signal_count(&self) -> usize {
        self.pixels.iter().filter(|&&p| p != 0).count()
    }

    pub fn ink_fraction(&self) -> f64 {
        if self.pixels.is_empty() {
            return 0.0;
        }
        self.signal_count() as f64 / self.pixels.len() as f64
    }

    pub fn inverted(&self) -> Self {
        Self {
            pixels: self.pixels.iter().map(|p| 1 - p).collect(),
            ..self.clone()
        }
    }

    pub fn crop(&self, b: &LineBox) -> Result<Self> {
        b.check_within(self.height, self.width)?;
        let mut out = Self::blank(b.h, b.w);
        for y in 0..b.h {
            let src = (b.y + y) * self.width + b.x;
            out.pixels[y * b.w..(y + 1) * b.w].copy_from_slice(&self.pixels[src..src + b.w]);
        }
        Ok(out)
    }

    /// ORs `other` into `self` with its top-left corner at `(y, x)`.
    pub fn blit_or(&mut self, other: &BinaryImage, y: usize, x: usize) -> Result<()> {
        if y + other.height > self.height || x + other.width > self.width {
            return Err(Error::Shape(format!(
                "{}x{} at ({y},{x}) exceeds {}x{}",
                other.height, other.width, self.height, self.width
            )));
        }
        for r in 0..other.height {
            let dst = (y + r) * self.width + x;
            for (d, s) in self.pixels[dst..dst + other.width]
                .iter_mut()
                .zip(&other.pixels[r * other.width..(r + 1) * other.width])
            {
                *d |= s;
            }
        }
        Ok(())
    }

    /// `1 × H × W` tensor of 0.0 / 1.0.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.pixels.iter().map(|&p| f64::from(p)).collect(),
        )
        .expect("shape")
    }

    /// 0/255 grayscale for storage.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            Luma([if self.get(y as usize, x as usize) { 255 } else { 0 }])
        })
    }

    /// PNG, or binary PGM (P5) for `.pgm` paths.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_gray(&self.to_gray(), path)
    }

    /// Loads a stored bilevel image (0/255) without polarity correction.
    pub fn load(path: &Path) -> Result<Self> {
        Ok(binarize_with(&load_gray(path)?, 128, Polarity::Keep))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LineBox {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
    pub line_index: usize,
}

impl LineBox {
    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.w == 0 || self.h == 0 || self.x + self.w > width || self.y + self.h > height {
            return Err(Error::Shape(format!(
                "box {}x{} at ({},{}) outside {height}x{width} page",
                self.h, self.w, self.y, self.x
            )));
        }
        Ok(())
    }
}

pub fn save_gray(img: &GrayImage, path: &Path) -> Result<()> {
    let is_pgm = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm"));
    if is_pgm {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let enc = PnmEncoder::new(file).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        img.write_with_encoder(enc)?;
    } else {
        img.save(path)?;
    }
    Ok(())
}

pub fn load_gray(path: &Path) -> Result<GrayImage> {
    if !path.exists() {
        return Err(Error::MissingImage(path.to_path_buf()));
    }
    Ok(image::open(path)?.to_luma8())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    /// Invert when signal would be the majority class.
    Auto,
    Keep,
}

/// `pixel ≥ threshold` is signal, then polarity is corrected so ink is the
/// minority class.
pub fn binarize(gray: &GrayImage, threshold: u8) -> BinaryImage {
    binarize_with(gray, threshold, Polarity::Auto)
}

pub fn binarize_with(gray: &GrayImage, threshold: u8, polarity: Polarity) -> BinaryImage {
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let pixels: Vec<u8> = gray.as_raw().iter().map(|&p| u8::from(p >= threshold)).collect();
    let img = BinaryImage {
        height: h,
        width: w,
        pixels,
    };
    if polarity == Polarity::Auto && 2 * img.signal_count() > img.pixels.len() {
        img.inverted()
    } else {
        img
    }
}

fn round_up8(w: usize) -> usize {
    w.div_ceil(8) * 8
}

/// Scaled width after an aspect-preserving resize to `target_h`.
pub fn scaled_width(height: usize, width: usize, target_h: usize) -> usize {
    ((width as f64 * target_h as f64 / height as f64).round() as usize).max(1)
}

/// Aspect-preserving bilinear resize to `target_h` rows, then zero padding
/// on the right up to a multiple of 8 columns. Values stay soft in [0, 1].
pub fn resize_to_height(img: &BinaryImage, target_h: usize) -> Result<Tensor> {
    if img.height == 0 || img.width == 0 || target_h == 0 {
        return Err(Error::Shape(format!(
            "cannot resize {}x{} to height {target_h}",
            img.height, img.width
        )));
    }
    let w2 = scaled_width(img.height, img.width, target_h);
    let lifted: ImageBuffer<Luma<f32>, Vec<f32>> = ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
        Luma([f32::from(img.pixels[y as usize * img.width + x as usize])])
    });
    let scaled = if (img.height, img.width) == (target_h, w2) {
        lifted
    } else {
        imageops::resize(&lifted, w2 as u32, target_h as u32, FilterType::Triangle)
    };
    let wp = round_up8(w2);
    let mut data = vec![0.0; target_h * wp];
    for (x, y, p) in scaled.enumerate_pixels() {
        data[y as usize * wp + x as usize] = f64::from(p.0[0]).clamp(0.0, 1.0);
    }
    Tensor::new(vec![1, target_h, wp], data)
}

pub fn resize_line(img: &BinaryImage) -> Result<Tensor> {
    resize_to_height(img, LINE_HEIGHT)
}

pub fn resize_page(img: &BinaryImage, l: usize) -> Result<Tensor> {
    if l == 0 {
        return Err(Error::Config("oversample factor L must be positive".into()));
    }
    resize_to_height(img, LINE_HEIGHT * l)
}

/// Per-row shifts of a horizontal shear by `deg` about the vertical center.
fn shear_shifts(height: usize, deg: f64) -> Vec<isize> {
    let t = deg.to_radians().tan();
    let yc = (height as f64 - 1.0) / 2.0;
    (0..height).map(|y| ((y as f64 - yc) * t).round() as isize).collect()
}

/// Shifts each row by its shear offset, widening the canvas to fit.
pub fn shear(img: &BinaryImage, deg: f64) -> BinaryImage {
    let shifts = shear_shifts(img.height, deg);
    let lo = shifts.iter().copied().min().unwrap_or(0);
    let hi = shifts.iter().copied().max().unwrap_or(0);
    let width = img.width + (hi - lo) as usize;
    let mut out = BinaryImage::blank(img.height, width);
    for (y, s) in shifts.iter().enumerate() {
        let off = (s - lo) as usize;
        let src = &img.pixels[y * img.width..(y + 1) * img.width];
        out.pixels[y * width + off..y * width + off + img.width].copy_from_slice(src);
    }
    out
}

/// Sum over columns of squared vertical run lengths of signal.
fn vertical_run_score(img: &BinaryImage) -> u64 {
    let mut score = 0u64;
    let mut run = vec![0u64; img.width];
    for y in 0..img.height {
        let row = &img.pixels[y * img.width..(y + 1) * img.width];
        for (r, &p) in run.iter_mut().zip(row) {
            if p != 0 {
                *r += 1;
            } else {
                score += *r * *r;
                *r = 0;
            }
        }
    }
    score + run.iter().map(|r| r * r).sum::<u64>()
}

/// Shear angle in whole degrees that maximizes the vertical run score.
/// Ties go to the smallest magnitude, then to the positive angle.
pub fn deslant_angle(img: &BinaryImage) -> i32 {
    let mut best = (vertical_run_score(img), 0i32);
    for mag in 1..=DESLANT_MAX_DEG {
        for deg in [mag, -mag] {
            let s = vertical_run_score(&shear(img, f64::from(deg)));
            if s > best.0 {
                best = (s, deg);
            }
        }
    }
    best.1
}

/// Rounds of re-estimation in [`deslant`]; whole-degree shears of short
/// lines differ by sub-pixel row offsets, so one estimate can leave a
/// residual slant of a few degrees.
const DESLANT_ROUNDS: usize = 8;

/// Shears by the estimated angle until the estimate on the result is
/// within one degree of upright.
pub fn deslant(img: &BinaryImage) -> BinaryImage {
    let mut out = img.clone();
    for _ in 0..DESLANT_ROUNDS {
        match deslant_angle(&out) {
            -1..=1 => break,
            deg => out = shear(&out, f64::from(deg)),
        }
    }
    out
}

/// Joins line transcripts with single spaces; a line ending in `-` loses
/// the hyphen and joins the next line directly.
pub fn join_transcripts(lines: &[String]) -> String {
    let mut out = String::new();
    for (i, t) in lines.iter().enumerate() {
        if i + 1 == lines.len() {
            out.push_str(t);
        } else if let Some(stem) = t.strip_suffix('-') {
            out.push_str(stem);
        } else {
            out.push_str(t);
            out.push(' ');
        }
    }
    out
}

/// Concatenates line images left to right into one long line.
///
/// Lines shorter than the tallest are padded (vertically centered) rather
/// than rescaled so stroke widths stay comparable.
pub fn flatten_page_1d(lines: &[BinaryImage], transcripts: &[String]) -> Result<(BinaryImage, String)> {
    if lines.is_empty() {
        return Err(Error::Contract("flatten_page_1d needs at least one line".into()));
    }
    if lines.len() != transcripts.len() {
        return Err(Error::Contract(format!(
            "{} line images vs {} transcripts",
            lines.len(),
            transcripts.len()
        )));
    }
    let text = join_transcripts(transcripts);
    if lines.len() == 1 {
        return Ok((lines[0].clone(), text));
    }
    let height = lines.iter().map(|l| l.height).max().unwrap_or(0);
    let width = lines.iter().map(|l| l.width).sum::<usize>() + LINE_GAP * (lines.len() - 1);
    let mut out = BinaryImage::blank(height, width);
    let mut x = 0;
    for l in lines {
        out.blit_or(l, (height - l.height) / 2, x)?;
        x += l.width + LINE_GAP;
    }
    Ok((out, text))
}

/// Rebuilds a page from its line boxes alone: background everywhere except
/// inside boxes, where each line image is placed at its box origin.
pub fn reconstruct_clean_page(
    page_h: usize,
    page_w: usize,
    boxes: &[LineBox],
    line_images: &[BinaryImage],
) -> Result<BinaryImage> {
    if boxes.len() != line_images.len() {
        return Err(Error::Contract(format!(
            "{} boxes vs {} line images",
            boxes.len(),
            line_images.len()
        )));
    }
    let mut page = BinaryImage::blank(page_h, page_w);
    for (b, img) in boxes.iter().zip(line_images) {
        b.check_within(page_h, page_w)?;
        if img.height > b.h || img.width > b.w {
            return Err(Error::Shape(format!(
                "line image {}x{} does not fit box {}x{}",
                img.height, img.width, b.h, b.w
            )));
        }
        page.blit_or(img, b.y, b.x)?;
    }
    Ok(page)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    /// Full-height bands set to background, each `band_width · W` wide.
    pub vertical_bands: usize,
    pub band_width: f64,
    /// Full-width bands, each `band_height · H` tall.
    pub horizontal_bands: usize,
    pub band_height: f64,
    /// Rotation drawn uniformly from `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    /// Peak displacement in pixels of the elastic field.
    pub elastic_alpha: f64,
    /// Control-point spacing of the elastic field in pixels.
    pub elastic_spacing: usize,
}

impl AugmentParams {
    pub fn off() -> Self {
        Self {
            vertical_bands: 0,
            band_width: 0.0,
            horizontal_bands: 0,
            band_height: 0.0,
            max_rotation_deg: 0.0,
            elastic_alpha: 0.0,
            elastic_spacing: 16,
        }
    }

    pub fn standard() -> Self {
        Self {
            vertical_bands: 1,
            band_width: 0.03,
            horizontal_bands: 0,
            band_height: 0.0,
            max_rotation_deg: 2.0,
            elastic_alpha: 1.0,
            elastic_spacing: 16,
        }
    }
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self::off()
    }
}

fn bilinear(data: &[f64], h: usize, w: usize, y: f64, x: f64) -> f64 {
    if y <= -1.0 || x <= -1.0 || y >= h as f64 || x >= w as f64 {
        return 0.0;
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (fy, fx) = (y - y0, x - x0);
    let at = |yy: isize, xx: isize| {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    let (yi, xi) = (y0 as isize, x0 as isize);
    (1.0 - fy) * ((1.0 - fx) * at(yi, xi) + fx * at(yi, xi + 1))
        + fy * ((1.0 - fx) * at(yi + 1, xi) + fx * at(yi + 1, xi + 1))
}

/// Coarse random displacement grid, bilinearly upsampled.
fn elastic_field<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize, alpha: f64, spacing: usize) -> (Vec<f64>, Vec<f64>) {
    let spacing = spacing.max(1);
    let gh = h.div_ceil(spacing) + 1;
    let gw = w.div_ceil(spacing) + 1;
    let mut grid = |_: ()| -> Vec<f64> { (0..gh * gw).map(|_| rng.gen_range(-alpha..=alpha)).collect() };
    let (gy, gx) = (grid(()), grid(()));
    let up = |g: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                out[y * w + x] = bilinear(g, gh, gw, y as f64 / spacing as f64, x as f64 / spacing as f64);
            }
        }
        out
    };
    (up(&gy), up(&gx))
}

/// Random rotation, elastic jitter and band masking of a `1 × H × W`
/// tensor. All-off parameters return the input unchanged.
pub fn augment<R: Rng + ?Sized>(img: &Tensor, rng: &mut R, params: &AugmentParams) -> Result<Tensor> {
    if img.rank() != 3 || img.shape()[0] != 1 {
        return Err(Error::Shape(format!("augment expects 1×H×W, got {:?}", img.shape())));
    }
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut data = img.data().to_vec();

    let angle = if params.max_rotation_deg > 0.0 {
        rng.gen_range(-params.max_rotation_deg..=params.max_rotation_deg)
            .to_radians()
    } else {
        0.0
    };
    let field =
        (params.elastic_alpha > 0.0).then(|| elastic_field(rng, h, w, params.elastic_alpha, params.elastic_spacing));
    if angle != 0.0 || field.is_some() {
        let (s, c) = angle.sin_cos();
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let src = data.clone();
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let mut sy = cy + c * dy - s * dx;
                let mut sx = cx + s * dy + c * dx;
                if let Some((fy, fx)) = &field {
                    sy += fy[y * w + x];
                    sx += fx[y * w + x];
                }
                data[y * w + x] = bilinear(&src, h, w, sy, sx);
            }
        }
    }

    let band = |extent: usize, frac: f64| ((frac * extent as f64).round() as usize).min(extent);
    let bw = band(w, params.band_width);
    for _ in 0..params.vertical_bands {
        if bw == 0 {
            break;
        }
        let x0 = rng.gen_range(0..=w - bw);
        for y in 0..h {
            data[y * w + x0..y * w + x0 + bw].iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let bh = band(h, params.band_height);
    for _ in 0..params.horizontal_bands {
        if bh == 0 {
            break;
        }
        let y0 = rng.gen_range(0..=h - bh);
        data[y0 * w..(y0 + bh) * w].iter_mut().for_each(|v| *v = 0.0);
    }
    Tensor::new(vec![1, h, w], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gray(h: u32, w: u32, f: impl Fn(u32, u32) -> u8) -> GrayImage {
        GrayImage::from_fn(w, h, |x, y| Luma([f(y, x)]))
    }

    #[test]
    fn binarize_fixtures() {
        let zeros = binarize(&gray(4, 4, |_, _| 0), 128);
        assert_eq!(zeros.signal_count(), 0);
        let checker = binarize(&gray(4, 4, |y, x| if (x + y) % 2 == 0 { 255 } else { 0 }), 128);
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(checker.get(y, x), (x + y) % 2 == 0);
            }
        }
    }

    #[test]
    fn binarize_flips_dark_ink_on_white_paper() {
        let page = gray(10, 10, |y, _| if y == 5 { 0 } else { 255 });
        let b = binarize(&page, 128);
        assert_eq!(b.signal_count(), 10);
        assert!((0..10).all(|x| b.get(5, x)));
        assert_eq!(binarize_with(&page, 128, Polarity::Keep).signal_count(), 90);
    }

    #[test]
    fn resize_line_fixtures() {
        let t = resize_line(&BinaryImage::blank(128, 1024)).unwrap();
        assert_eq!(t.shape(), &[1, 64, 512]);
        let t = resize_line(&BinaryImage::blank(64, 100)).unwrap();
        assert_eq!(t.shape(), &[1, 64, 104]);
        let t = resize_line(&BinaryImage::blank(32, 200)).unwrap();
        assert_eq!(t.shape(), &[1, 64, 400]);
    }

    #[test]
    fn resize_page_fixtures() {
        assert_eq!(
            resize_page(&BinaryImage::blank(4000, 3000), 24).unwrap().shape(),
            &[1, 1536, 1152]
        );
        assert_eq!(
            resize_page(&BinaryImage::blank(500, 500), 1).unwrap().shape(),
            &[1, 64, 64]
        );
        assert_eq!(resize_page(&BinaryImage::blank(77, 31), 24).unwrap().shape()[1], 1536);
        assert!(resize_page(&BinaryImage::blank(10, 10), 0).is_err());
    }

    #[test]
    fn resize_keeps_soft_values_and_padding_is_background() {
        let mut img = BinaryImage::blank(32, 30);
        for y in 0..32 {
            img.set(y, 10, true);
        }
        let t = resize_line(&img).unwrap();
        assert_eq!(t.shape(), &[1, 64, 64]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(t.data().iter().any(|&v| v > 0.0 && v < 1.0));
        for y in 0..64 {
            assert!(t.data()[y * 64 + 60..y * 64 + 64].iter().all(|&v| v == 0.0));
        }
    }

    fn slanted_bars(deg: f64) -> BinaryImage {
        let (h, w) = (60, 160);
        let mut img = BinaryImage::blank(h, w);
        let t = deg.to_radians().tan();
        for x0 in [40.0, 70.0, 100.0, 130.0] {
            for y in 0..h {
                let x = x0 - (y as f64 - (h as f64 - 1.0) / 2.0) * t;
                for dx in 0..3 {
                    img.set(y, x.round() as usize + dx, true);
                }
            }
        }
        img
    }

    #[test]
    fn deslant_recovers_fifteen_degrees() {
        let a = deslant_angle(&slanted_bars(15.0));
        assert!((a - 15).abs() <= 2, "recovered {a}");
        let a = deslant_angle(&slanted_bars(-15.0));
        assert!((a + 15).abs() <= 2, "recovered {a}");
    }

    #[test]
    fn deslant_keeps_vertical_and_blank() {
        let v = slanted_bars(0.0);
        assert_eq!(deslant(&v), v);
        let b = BinaryImage::blank(20, 30);
        assert_eq!(deslant(&b), b);
        let once = deslant(&slanted_bars(20.0));
        assert!(deslant_angle(&once).abs() <= 1);
        assert_eq!(once.height(), 60);
    }

    #[test]
    fn flatten_fixtures() {
        let t = |s: &str| s.to_string();
        let a = BinaryImage::blank(10, 5);
        let b = BinaryImage::blank(6, 7);
        let (img, text) = flatten_page_1d(&[a.clone(), b.clone()], &[t("seg-"), t("mentation")]).unwrap();
        assert_eq!(text, "segmentation");
        assert_eq!((img.height(), img.width()), (10, 5 + LINE_GAP + 7));
        let (_, text) = flatten_page_1d(&[a.clone(), b], &[t("a"), t("b")]).unwrap();
        assert_eq!(text, "a b");
        let (img, text) = flatten_page_1d(std::slice::from_ref(&a), &[t("x-")]).unwrap();
        assert_eq!((img, text.as_str()), (a, "x-"));
        assert!(flatten_page_1d(&[], &[]).is_err());
    }

    #[test]
    fn clean_page_fixtures() {
        assert_eq!(
            reconstruct_clean_page(5, 6, &[], &[]).unwrap(),
            BinaryImage::blank(5, 6)
        );
        let mut full = BinaryImage::blank(4, 4);
        full.set(1, 2, true);
        let b = LineBox {
            x: 0,
            y: 0,
            w: 4,
            h: 4,
            line_index: 0,
        };
        assert_eq!(reconstruct_clean_page(4, 4, &[b], &[full.clone()]).unwrap(), full);
        let out = LineBox {
            x: 2,
            y: 0,
            w: 4,
            h: 4,
            line_index: 0,
        };
        assert!(reconstruct_clean_page(4, 4, &[out], &[full]).is_err());
    }

    #[test]
    fn augment_off_is_identity_and_seeded() {
        let img = Tensor::from_fn(&[1, 16, 40], |i| (i % 3) as f64 / 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, &mut rng, &AugmentParams::off()).unwrap(), img);
        let p = AugmentParams::standard();
        let a = augment(&img, &mut ChaCha8Rng::seed_from_u64(4), &p).unwrap();
        let b = augment(&img, &mut ChaCha8Rng::seed_from_u64(4), &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn one_vertical_band() {
        let img = Tensor::full(&[1, 8, 50], 1.0);
        let p = AugmentParams {
            vertical_bands: 1,
            band_width: 0.1,
            ..AugmentParams::off()
        };
        let out = augment(&img, &mut ChaCha8Rng::seed_from_u64(2), &p).unwrap();
        let zero_cols: Vec<usize> = (0..50)
            .filter(|&x| (0..8).all(|y| out.data()[y * 50 + x] == 0.0))
            .collect();
        assert_eq!(zero_cols.len(), 5);
        assert_eq!(zero_cols[4] - zero_cols[0], 4);
        assert_eq!(out.data().iter().filter(|&&v| v == 0.0).count(), 40);
    }

    #[test]
    fn png_and_pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut img = BinaryImage::blank(7, 9);
        img.set(3, 4, true);
        img.set(6, 8, true);
        for name in ["a.png", "a.pgm"] {
            let p = dir.path().join(name);
            img.save(&p).unwrap();
            assert_eq!(BinaryImage::load(&p).unwrap(), img);
        }
        let pgm = std::fs::read(dir.path().join("a.pgm")).unwrap();
        assert_eq!(&pgm[..2], b"P5");
        assert!(matches!(
            BinaryImage::load(&dir.path().join("missing.png")),
            Err(Error::MissingImage(_))
        ));
    }
}
