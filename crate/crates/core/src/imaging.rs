//! Grayscale rasters, rectangles, resampling and the three-level pyramid.
//!
//! Rect coordinates are integer pixels with a top-left origin and y growing
//! downward. Samples that fall outside an image read as 0 (black), both for
//! bilinear resizing and for rotated crops.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GrayImage {
    /// Creates a zero-filled image. Panics on a zero dimension.
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, 0)
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter(format!(
                "zero image dimension {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::Parameter(format!(
                "buffer of {} bytes does not match {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.data[y * width + x] = f(x, y);
            }
        }
        img
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [u8] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    /// Pixel value with zero outside the raster.
    #[inline]
    pub fn get_or_zero(&self, x: i64, y: i64) -> u8 {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            0
        } else {
            self.data[y as usize * self.width + x as usize]
        }
    }

    pub fn inverted(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| 255 - v).collect(),
        }
    }

    pub fn bounds(&self) -> Rect {
        Rect::new(0, 0, self.width as i32, self.height as i32)
    }
}

/// Axis-aligned pixel rectangle. Serialized as `[x, y, w, h]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i32; 4]", into = "[i32; 4]")]
pub struct Rect {
    pub x: i32,
    pub y: i32,
    pub w: i32,
    pub h: i32,
}

impl From<[i32; 4]> for Rect {
    fn from(v: [i32; 4]) -> Self {
        Rect {
            x: v[0],
            y: v[1],
            w: v[2],
            h: v[3],
        }
    }
}

impl From<Rect> for [i32; 4] {
    fn from(r: Rect) -> Self {
        [r.x, r.y, r.w, r.h]
    }
}

impl Rect {
    pub fn new(x: i32, y: i32, w: i32, h: i32) -> Self {
        debug_assert!(w > 0 && h > 0, "rect must have positive extent");
        Rect { x, y, w, h }
    }

    pub fn try_new(x: i32, y: i32, w: i32, h: i32) -> Option<Self> {
        (w > 0 && h > 0).then_some(Rect { x, y, w, h })
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0 && self.h > 0
    }

    #[inline]
    pub fn right(&self) -> i32 {
        self.x + self.w
    }

    #[inline]
    pub fn bottom(&self) -> i32 {
        self.y + self.h
    }

    pub fn area(&self) -> i64 {
        self.w as i64 * self.h as i64
    }

    /// Integer center, `(x + w/2, y + h/2)` with floor division.
    pub fn center(&self) -> (i32, i32) {
        (self.x + self.w / 2, self.y + self.h / 2)
    }

    pub fn contains_point(&self, x: i32, y: i32) -> bool {
        x >= self.x && y >= self.y && x < self.right() && y < self.bottom()
    }

    pub fn intersection(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x.max(other.x);
        let y0 = self.y.max(other.y);
        let x1 = self.right().min(other.right());
        let y1 = self.bottom().min(other.bottom());
        Rect::try_new(x0, y0, x1 - x0, y1 - y0)
    }

    pub fn intersection_area(&self, other: &Rect) -> i64 {
        self.intersection(other).map_or(0, |r| r.area())
    }

    /// Clips to `[0, width) x [0, height)`; `None` when nothing is left.
    pub fn clip(&self, width: usize, height: usize) -> Option<Rect> {
        self.intersection(&Rect::new(0, 0, width as i32, height as i32))
    }

    /// Multiplies coordinates and extents by `factor`.
    pub fn scaled(&self, factor: i32) -> Rect {
        Rect::new(
            self.x * factor,
            self.y * factor,
            self.w * factor,
            self.h * factor,
        )
    }
}

/// Intersection over union of two rects, in `[0, 1]`.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    inter as f64 / union as f64
}

/// One pyramid level: the image and its downsampling factor relative to the base.
#[derive(Clone, Debug)]
pub struct PyramidLevel {
    pub image: GrayImage,
    pub scale: u32,
}

/// Three-level, one-octave-per-step pyramid built by plain subsampling.
#[derive(Clone, Debug)]
pub struct Pyramid {
    levels: Vec<PyramidLevel>,
}

pub const PYRAMID_LEVELS: usize = 3;

impl Pyramid {
    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn base(&self) -> &GrayImage {
        &self.levels[0].image
    }
}

/// Builds the pyramid: level k keeps pixel `(2i, 2j)` of level k-1, no smoothing.
pub fn build_pyramid(img: &GrayImage) -> Result<Pyramid> {
    let min_side = 1usize << (PYRAMID_LEVELS - 1);
    if img.width() < min_side || img.height() < min_side {
        return Err(Error::Size(format!(
            "{}x{} cannot hold {PYRAMID_LEVELS} octaves (need at least {min_side}x{min_side})",
            img.width(),
            img.height()
        )));
    }
    let mut levels = Vec::with_capacity(PYRAMID_LEVELS);
    levels.push(PyramidLevel {
        image: img.clone(),
        scale: 1,
    });
    for k in 1..PYRAMID_LEVELS {
        let prev = &levels[k - 1].image;
        let (w, h) = (prev.width() / 2, prev.height() / 2);
        let next = GrayImage::from_fn(w, h, |x, y| prev.get(2 * x, 2 * y));
        levels.push(PyramidLevel {
            image: next,
            scale: 1 << k,
        });
    }
    Ok(Pyramid { levels })
}

/// Bilinear sample at continuous pixel-index coordinates; taps outside read 0.
#[inline]
fn sample_bilinear(img: &GrayImage, sx: f64, sy: f64) -> f64 {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (xi, yi) = (x0 as i64, y0 as i64);
    let p00 = img.get_or_zero(xi, yi) as f64;
    let p10 = img.get_or_zero(xi + 1, yi) as f64;
    let p01 = img.get_or_zero(xi, yi + 1) as f64;
    let p11 = img.get_or_zero(xi + 1, yi + 1) as f64;
    let top = p00 + (p10 - p00) * fx;
    let bottom = p01 + (p11 - p01) * fx;
    top + (bottom - top) * fy
}

#[inline]
fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Side length of the patches fed to the classifier.
pub const PATCH_SIDE: usize = 28;

/// Resamples `rect` to an `out_side` x `out_side` patch.
///
/// Output pixel `j` samples source position `x + (j + 0.5) * w / out - 0.5`,
/// so a rect of exactly `out_side` pixels is copied verbatim.
pub fn resize_patch_to(img: &GrayImage, rect: &Rect, out_side: usize) -> GrayImage {
    let sx = rect.w as f64 / out_side as f64;
    let sy = rect.h as f64 / out_side as f64;
    GrayImage::from_fn(out_side, out_side, |i, j| {
        let x = rect.x as f64 + (i as f64 + 0.5) * sx - 0.5;
        let y = rect.y as f64 + (j as f64 + 0.5) * sy - 0.5;
        to_u8(sample_bilinear(img, x, y))
    })
}

/// Bilinear resample of the whole image to `width` x `height`.
pub fn resize_image(img: &GrayImage, width: usize, height: usize) -> GrayImage {
    if (width, height) == (img.width(), img.height()) {
        return img.clone();
    }
    let sx = img.width() as f64 / width as f64;
    let sy = img.height() as f64 / height as f64;
    GrayImage::from_fn(width, height, |i, j| {
        // clamp so border outputs do not read the zero fill
        let x = ((i as f64 + 0.5) * sx - 0.5).clamp(0.0, (img.width() - 1) as f64);
        let y = ((j as f64 + 0.5) * sy - 0.5).clamp(0.0, (img.height() - 1) as f64);
        to_u8(sample_bilinear(img, x, y))
    })
}

/// 28x28 bilinear resample of `rect`.
pub fn resize_patch(img: &GrayImage, rect: &Rect) -> GrayImage {
    resize_patch_to(img, rect, PATCH_SIDE)
}

/// Samples a rotated square of `side` pixels centred on `center` into an
/// `out_side` x `out_side` patch.
///
/// `center` is in continuous coordinates: the square `Rect{x, y, s, s}` has
/// center `(x + s/2, y + s/2)`. Positive angles rotate the sampling grid
/// clockwise on screen (y down).
pub fn rotate_crop(
    img: &GrayImage,
    center: (f64, f64),
    side: f64,
    angle: f64,
    out_side: usize,
) -> Result<GrayImage> {
    if !side.is_finite() || side <= 0.0 {
        return Err(Error::Parameter(format!("crop side must be positive, got {side}")));
    }
    if out_side == 0 {
        return Err(Error::Parameter("output side must be positive".into()));
    }
    let (sin, cos) = angle.sin_cos();
    let step = side / out_side as f64;
    let half = out_side as f64 / 2.0;
    Ok(GrayImage::from_fn(out_side, out_side, |i, j| {
        let u = (i as f64 + 0.5 - half) * step;
        let v = (j as f64 + 0.5 - half) * step;
        let x = center.0 + u * cos - v * sin - 0.5;
        let y = center.1 + u * sin + v * cos - 0.5;
        to_u8(sample_bilinear(img, x, y))
    }))
}

/// Integer luma used for color inputs.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> u8 {
    ((r as u32 * 299 + g as u32 * 587 + b as u32 * 114) / 1000) as u8
}

const PNG_SIGNATURE: &[u8] = b"\x89PNG\r\n\x1a\n";

/// Loads a binary PGM (P5) or a PNG (converted to luma).
pub fn load_image(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(b"P5") {
        decode_pgm(&bytes).map_err(|reason| Error::format(path, reason))
    } else if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(&bytes).map_err(|reason| Error::format(path, reason))
    } else {
        Err(Error::format(path, "unsupported format (expected P5 PGM or PNG)"))
    }
}

fn decode_png(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let decoded = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| e.to_string())?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    if w == 0 || h == 0 {
        return Err("zero dimension".into());
    }
    let data = rgb.pixels().map(|p| luma(p[0], p[1], p[2])).collect();
    GrayImage::from_vec(w as usize, h as usize, data).map_err(|e| e.to_string())
}

/// Reads whitespace/comment separated header tokens of a netpbm file.
struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> std::result::Result<usize, String> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(format!("malformed header: missing {what}"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format!("malformed header: bad {what}"))
    }
}

fn decode_pgm(bytes: &[u8]) -> std::result::Result<GrayImage, String> {
    let mut rd = HeaderReader { bytes, pos: 2 };
    let width = rd.number("width")?;
    let height = rd.number("height")?;
    let maxval = rd.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(format!("zero dimension {width}x{height}"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(format!("unsupported maxval {maxval} (8-bit only)"));
    }
    match bytes.get(rd.pos) {
        Some(c) if c.is_ascii_whitespace() => rd.pos += 1,
        _ => return Err("malformed header: no separator after maxval".into()),
    }
    let need = width
        .checked_mul(height)
        .ok_or_else(|| "dimensions overflow".to_string())?;
    let raster = &bytes[rd.pos..];
    if raster.len() < need {
        return Err(format!(
            "truncated raster: header advertises {need} pixels, file holds {}",
            raster.len()
        ));
    }
    // maxvals below 255 are kept as raw levels, not rescaled
    let data = raster[..need].to_vec();
    if maxval != 255 {
        for v in &data {
            if *v as usize > maxval {
                return Err(format!("sample {v} exceeds maxval {maxval}"));
            }
        }
    }
    Ok(GrayImage {
        width,
        height,
        data,
    })
}

/// Encodes as `P5\n<w> <h>\n255\n` followed by raw bytes.
pub fn encode_pgm(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn save_image(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let is_png = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("buffer matches dimensions")
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::format(path, e.to_string()))
    } else {
        write_bytes(path, &encode_pgm(img))
    }
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit RGB raster used for overlays.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[u8; 3]>,
}

impl RgbImage {
    pub fn from_gray(img: &GrayImage) -> Self {
        Self {
            width: img.width,
            height: img.height,
            data: img.data.iter().map(|&v| [v, v, v]).collect(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.data[y * self.width + x]
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.data
    }

    /// Draws a 1-pixel outline of `rect`, clipped to the raster.
    pub fn draw_rect(&mut self, rect: &Rect, color: [u8; 3]) {
        let (w, h) = (self.width as i32, self.height as i32);
        let mut put = |x: i32, y: i32| {
            if x >= 0 && y >= 0 && x < w && y < h {
                self.data[(y * w + x) as usize] = color;
            }
        };
        let (x0, y0) = (rect.x, rect.y);
        let (x1, y1) = (rect.right() - 1, rect.bottom() - 1);
        for x in x0..=x1 {
            put(x, y0);
            put(x, y1);
        }
        for y in y0..=y1 {
            put(x0, y);
            put(x1, y);
        }
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        for px in &self.data {
            out.extend_from_slice(px);
        }
        out
    }

    /// Writes PNG when the extension is `.png`, binary PPM otherwise.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let is_png = path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if is_png {
            let raw: Vec<u8> = self.data.iter().flatten().copied().collect();
            image::RgbImage::from_raw(self.width as u32, self.height as u32, raw)
                .expect("buffer matches dimensions")
                .save_with_format(path, image::ImageFormat::Png)
                .map_err(|e| Error::format(path, e.to_string()))
        } else {
            write_bytes(path, &self.encode_ppm())
        }
    }
}
