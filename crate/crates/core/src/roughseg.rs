//! Rough-set thresholding of the confidence map.
//!
//! The image is tiled into non-overlapping granules (2x2 by default). For a
//! threshold T the object set is `I > T` and the background `I <= T`; a
//! granule belongs to a lower approximation when all its pixels are in the
//! set and to the upper approximation when any pixel is. Rough entropy over T picks the
//! binarization threshold, and 8-connected foreground components become blobs.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::imaging::{save_image, GrayImage, Rect};
use crate::scalar::Scalar;

/// Default granule side (2x2 windows, four pixels per granule).
pub const GRANULE_SIDE: usize = 2;
pub const DEFAULT_MIN_BLOB_AREA: usize = 25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GranuleGrid {
    cols: usize,
    rows: usize,
    side: usize,
    /// `side * side` intensities per granule, row-major within the granule.
    pixels: Vec<u8>,
}

impl GranuleGrid {
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.cols * self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn granule(&self, gx: usize, gy: usize) -> &[u8] {
        let g = self.side * self.side;
        let i = (gy * self.cols + gx) * g;
        &self.pixels[i..i + g]
    }

    pub fn granules(&self) -> std::slice::ChunksExact<'_, u8> {
        self.pixels.chunks_exact(self.side * self.side)
    }
}

/// Tiles into 2x2 granules, replicating the last row/column of odd images.
pub fn granulate(img: &GrayImage) -> GranuleGrid {
    granulate_with(img, GRANULE_SIDE)
}

/// Tiles into `side` x `side` granules, replicating the last row/column
/// where the image does not divide evenly.
pub fn granulate_with(img: &GrayImage, side: usize) -> GranuleGrid {
    assert!(side >= 1, "granule side must be positive");
    let (w, h) = (img.width(), img.height());
    let cols = w.div_ceil(side);
    let rows = h.div_ceil(side);
    let mut pixels = Vec::with_capacity(cols * rows * side * side);
    for gy in 0..rows {
        for gx in 0..cols {
            for dy in 0..side {
                for dx in 0..side {
                    let x = (gx * side + dx).min(w - 1);
                    let y = (gy * side + dy).min(h - 1);
                    pixels.push(img.get(x, y));
                }
            }
        }
    }
    GranuleGrid { cols, rows, side, pixels }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Approximations {
    pub o_lower: usize,
    pub o_upper: usize,
    pub b_lower: usize,
    pub b_upper: usize,
}

impl Approximations {
    /// Granules in both upper approximations (the boundary region).
    pub fn boundary(&self) -> usize {
        self.o_upper - self.o_lower
    }
}

/// Lower/upper approximation sizes of object and background at `t`.
pub fn approximations(grid: &GranuleGrid, t: u8) -> Approximations {
    let mut a = Approximations::default();
    let n = grid.side * grid.side;
    for g in grid.granules() {
        let above = g.iter().filter(|&&v| v > t).count();
        a.o_lower += usize::from(above == n);
        a.o_upper += usize::from(above > 0);
        a.b_lower += usize::from(above == 0);
        a.b_upper += usize::from(above < n);
    }
    a
}

/// Orientation of the roughness ratio.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoughnessForm {
    /// `1 - |lower| / |upper|`, in [0, 1].
    #[default]
    Standard,
    /// `1 - |upper| / |lower|`, the reversed ratio; non-positive, and the
    /// entropy of a negative roughness is NaN. For inspection only.
    Reversed,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoughRow<T> {
    pub t: u8,
    pub counts: Approximations,
    pub r_ot: T,
    pub r_bt: T,
    pub re_t: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoughTable<T> {
    pub rows: Vec<RoughRow<T>>,
    pub t_star: u8,
    pub form: RoughnessForm,
}

fn roughness<T: Scalar>(lower: usize, upper: usize, form: RoughnessForm) -> T {
    let (num, den) = match form {
        RoughnessForm::Standard => (lower, upper),
        RoughnessForm::Reversed => (upper, lower),
    };
    if den == 0 {
        T::zero()
    } else {
        T::one() - T::lit(num as f64) / T::lit(den as f64)
    }
}

fn x_ln_x<T: Scalar>(x: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x * x.ln()
    }
}

/// Rough entropy `-(e/2) (r_o ln r_o + r_b ln r_b)`; 1 at `r_o = r_b = 1/e`.
pub fn rough_entropy<T: Scalar>(r_ot: T, r_bt: T) -> T {
    let half_e = T::lit(std::f64::consts::E / 2.0);
    -half_e * (x_ln_x(r_ot) + x_ln_x(r_bt))
}

/// Evaluates every threshold 0..=255 and picks `t_star`.
///
/// Counts come from per-granule min/max histograms: a granule is entirely
/// above T iff its min is, and touches the object iff its max is. Thresholds
/// with no object or no background evidence score 0. `t_star` is the
/// smallest maximizer of a positive entropy; when every entropy is 0 (for
/// example a constant map) it is the image minimum, which gives an empty or
/// trivially crisp mask.
pub fn rough_entropy_threshold<T: Scalar>(grid: &GranuleGrid, form: RoughnessForm) -> RoughTable<T> {
    let mut min_hist = [0usize; 256];
    let mut max_hist = [0usize; 256];
    let mut lowest = u8::MAX;
    for g in grid.granules() {
        let lo = *g.iter().min().unwrap();
        let hi = *g.iter().max().unwrap();
        min_hist[lo as usize] += 1;
        max_hist[hi as usize] += 1;
        lowest = lowest.min(lo);
    }
    let total = grid.len();
    let mut min_le = 0usize;
    let mut max_le = 0usize;
    let mut rows = Vec::with_capacity(256);
    for t in 0..=255u8 {
        min_le += min_hist[t as usize];
        max_le += max_hist[t as usize];
        let counts = Approximations {
            o_lower: total - min_le,
            o_upper: total - max_le,
            b_lower: max_le,
            b_upper: min_le,
        };
        let r_ot = roughness::<T>(counts.o_lower, counts.o_upper, form);
        let r_bt = roughness::<T>(counts.b_lower, counts.b_upper, form);
        let re_t = if counts.o_upper == 0 || counts.b_upper == 0 {
            T::zero()
        } else {
            rough_entropy(r_ot, r_bt)
        };
        rows.push(RoughRow { t, counts, r_ot, r_bt, re_t });
    }
    let mut best: Option<(u8, T)> = None;
    for r in &rows {
        if r.re_t > T::zero() && best.is_none_or(|(_, b)| r.re_t > b) {
            best = Some((r.t, r.re_t));
        }
    }
    let t_star = best.map_or(if total == 0 { 0 } else { lowest }, |(t, _)| t);
    RoughTable { rows, t_star, form }
}

impl<T: Scalar> RoughTable<T> {
    /// CSV with header `t,o_lower,o_upper,b_lower,b_upper,r_ot,r_bt,re_t`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,o_lower,o_upper,b_lower,b_upper,r_ot,r_bt,re_t\n");
        for r in &self.rows {
            let c = r.counts;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.t, c.o_lower, c.o_upper, c.b_lower, c.b_upper, r.r_ot, r.r_bt, r.re_t
            ));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), width * height, "mask size mismatch");
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// 0/255 image of the mask.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| if self.get(x, y) { 255 } else { 0 })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        save_image(&self.to_gray(), path)
    }
}

/// Foreground is strictly above `t_star`.
pub fn binarize(acm: &GrayImage, t_star: u8) -> BinaryMask {
    BinaryMask::new(acm.width(), acm.height(), acm.data().iter().map(|&v| v > t_star).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub bbox: Rect,
    pub area: usize,
    /// Row-major pixel indices, ascending.
    pub pixels: Vec<u32>,
    pub mean: f64,
    pub std: f64,
    pub fill_ratio: f64,
}

/// 8-connected components of `mask` with at least `min_area` pixels, in
/// raster order of their first pixel, with ACM intensity statistics.
pub fn extract_blobs(mask: &BinaryMask, acm: &GrayImage, min_area: usize) -> Vec<Blob> {
    assert_eq!((mask.width, mask.height), (acm.width(), acm.height()), "mask and ACM differ in size");
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut blobs = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut pixels = Vec::new();
        while let Some(p) = queue.pop_front() {
            pixels.push(p as u32);
            let (x, y) = ((p % w) as i64, (p / w) as i64);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let n = ny as usize * w + nx as usize;
                    if mask.data[n] && !seen[n] {
                        seen[n] = true;
                        queue.push_back(n);
                    }
                }
            }
        }
        if pixels.len() < min_area {
            continue;
        }
        pixels.sort_unstable();
        blobs.push(blob_from_pixels(pixels, acm));
    }
    blobs
}

/// Builds a blob record (bbox, stats) from its pixel indices.
pub fn blob_from_pixels(pixels: Vec<u32>, acm: &GrayImage) -> Blob {
    let w = acm.width();
    let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
    let mut sum = 0.0;
    for &p in &pixels {
        let (x, y) = (p as usize % w, p as usize / w);
        x0 = x0.min(x);
        y0 = y0.min(y);
        x1 = x1.max(x);
        y1 = y1.max(y);
        sum += acm.data()[p as usize] as f64;
    }
    let n = pixels.len() as f64;
    let mean = sum / n;
    let var = pixels
        .iter()
        .map(|&p| (acm.data()[p as usize] as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    let bbox = Rect::new(x0 as i32, y0 as i32, (x1 - x0 + 1) as i32, (y1 - y0 + 1) as i32);
    Blob {
        bbox,
        area: pixels.len(),
        fill_ratio: n / bbox.area() as f64,
        pixels,
        mean,
        std: var.sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn granulation_shapes() {
        let img = GrayImage::from_fn(4, 4, |x, y| (y * 4 + x) as u8);
        let g = granulate(&img);
        assert_eq!((g.cols(), g.rows(), g.len()), (2, 2, 4));
        assert_eq!(g.granule(1, 0), [2, 3, 6, 7]);

        let img = GrayImage::from_fn(5, 5, |x, y| (y * 5 + x) as u8);
        let g = granulate(&img);
        assert_eq!(g.len(), 9);
        assert_eq!(g.granule(2, 0), [4, 4, 9, 9]);
        assert_eq!(g.granule(2, 2), [24, 24, 24, 24]);

        let g = granulate(&GrayImage::from_vec(2, 2, vec![1, 2, 3, 4]).unwrap());
        assert_eq!(g.granules().collect::<Vec<_>>(), vec![&[1u8, 2, 3, 4][..]]);

        let img = GrayImage::from_fn(7, 4, |x, y| (y * 7 + x) as u8);
        let g = granulate_with(&img, 3);
        assert_eq!((g.cols(), g.rows(), g.side()), (3, 2, 3));
        assert_eq!(g.granule(2, 1), [27; 9]);
        assert_eq!(g.granule(2, 0), [6, 6, 6, 13, 13, 13, 20, 20, 20]);
    }

    #[test]
    fn approximation_membership() {
        let homo = GrayImage::from_vec(2, 2, vec![200; 4]).unwrap();
        let a = approximations(&granulate(&homo), 100);
        assert_eq!(a, Approximations { o_lower: 1, o_upper: 1, b_lower: 0, b_upper: 0 });
        let mixed = GrayImage::from_vec(2, 2, vec![50, 200, 60, 210]).unwrap();
        let a = approximations(&granulate(&mixed), 100);
        assert_eq!(a, Approximations { o_lower: 0, o_upper: 1, b_lower: 0, b_upper: 1 });
        assert_eq!(a.boundary(), 1);
    }

    #[test]
    fn entropy_peak_and_crisp() {
        let r = 1.0f64 / std::f64::consts::E;
        assert!((rough_entropy(r, r) - 1.0).abs() < 1e-15);
        assert_eq!(rough_entropy(0.0f64, 0.0), 0.0);
    }

    #[test]
    fn constant_map_falls_back_to_its_level() {
        let img = GrayImage::filled(9, 7, 130);
        let t: RoughTable<f64> = rough_entropy_threshold(&granulate(&img), RoughnessForm::Standard);
        assert!(t.rows.iter().all(|r| r.re_t == 0.0));
        assert_eq!(t.t_star, 130);
        assert_eq!(binarize(&img, t.t_star).count(), 0);
    }

    #[test]
    fn bimodal_blocks() {
        // 210 blocks offset from the granule grid so that boundary granules exist
        let img = GrayImage::from_fn(40, 40, |x, y| {
            let a = (3..15).contains(&x) && (5..17).contains(&y);
            let b = (21..37).contains(&x) && (23..33).contains(&y);
            if a || b { 210 } else { 40 }
        });
        let t: RoughTable<f64> = rough_entropy_threshold(&granulate(&img), RoughnessForm::Standard);
        assert!((40..210).contains(&t.t_star), "{}", t.t_star);
        let mask = binarize(&img, t.t_star);
        for (i, &m) in mask.data().iter().enumerate() {
            assert_eq!(m, img.data()[i] == 210);
        }
        let blobs = extract_blobs(&mask, &img, DEFAULT_MIN_BLOB_AREA);
        assert_eq!(blobs.len(), 2);
        assert_eq!(blobs[0].bbox, Rect::new(3, 5, 12, 12));
        assert_eq!(blobs[1].bbox, Rect::new(21, 23, 16, 10));
        assert!(blobs.iter().all(|b| b.fill_ratio == 1.0 && b.mean == 210.0 && b.std == 0.0));
    }

    #[test]
    fn binarize_extremes() {
        let img = GrayImage::from_vec(2, 1, vec![0, 255]).unwrap();
        assert_eq!(binarize(&img, 255).count(), 0);
        assert_eq!(binarize(&img, 0).data(), &[false, true]);
    }

    #[test]
    fn diagonal_pixels_join() {
        let mut img = GrayImage::new(6, 6);
        for i in 0..6 {
            img.set(i, i, 255);
        }
        let blobs = extract_blobs(&binarize(&img, 0), &img, 1);
        assert_eq!(blobs.len(), 1);
        assert_eq!(blobs[0].area, 6);
    }

    #[test]
    fn l_shape_fill_ratio() {
        // 4 wide, 5 tall: left column (5) + bottom row (3 more) + a 2x2 notch (4)
        let mut img = GrayImage::new(8, 8);
        let px = [
            (0, 0), (0, 1), (0, 2), (0, 3), (0, 4),
            (1, 4), (2, 4), (3, 4),
            (1, 2), (2, 2), (1, 3), (2, 3),
        ];
        for (x, y) in px {
            img.set(x, y, 255);
        }
        let b = extract_blobs(&binarize(&img, 0), &img, 1);
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].bbox, Rect::new(0, 0, 4, 5));
        assert_eq!(b[0].area, 12);
        assert!((b[0].fill_ratio - 0.6).abs() < 1e-15);
    }

    #[test]
    fn min_area_filter() {
        let img = GrayImage::from_fn(20, 20, |x, y| if x < 4 && y < 4 { 255 } else { 0 });
        assert!(extract_blobs(&binarize(&img, 0), &img, 25).is_empty());
        assert_eq!(extract_blobs(&binarize(&img, 0), &img, 16).len(), 1);
    }

    #[test]
    fn reversed_form_is_nonpositive() {
        let img = GrayImage::from_fn(9, 9, |x, y| ((x * 31 + y * 17) % 256) as u8);
        let t: RoughTable<f64> = rough_entropy_threshold(&granulate(&img), RoughnessForm::Reversed);
        assert!(t.rows.iter().all(|r| r.r_ot <= 0.0 && r.r_bt <= 0.0));
    }

    fn arb_image() -> impl Strategy<Value = GrayImage> {
        (2usize..12, 2usize..12).prop_flat_map(|(w, h)| {
            prop::collection::vec(0u8..=255, w * h)
                .prop_map(move |d| GrayImage::from_vec(w, h, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn boundary_identity_and_ranges(img in arb_image()) {
            let grid = granulate(&img);
            let t: RoughTable<f64> = rough_entropy_threshold(&grid, RoughnessForm::Standard);
            for r in &t.rows {
                let c = r.counts;
                prop_assert!(c.o_lower <= c.o_upper && c.b_lower <= c.b_upper);
                prop_assert_eq!(c.o_upper - c.o_lower, c.b_upper - c.b_lower);
                prop_assert_eq!(c.o_lower + c.b_lower + c.boundary(), grid.len());
                prop_assert!((0.0..=1.0 + 1e-12).contains(&r.re_t));
                prop_assert_eq!(c, approximations(&grid, r.t));
            }
        }

        #[test]
        fn offset_shifts_threshold(img in arb_image(), c in 0u8..100) {
            let squeezed = GrayImage::from_vec(
                img.width(), img.height(),
                img.data().iter().map(|&v| v / 2).collect()).unwrap();
            let shifted = GrayImage::from_vec(
                img.width(), img.height(),
                squeezed.data().iter().map(|&v| v + c).collect()).unwrap();
            let a: RoughTable<f64> = rough_entropy_threshold(&granulate(&squeezed), RoughnessForm::Standard);
            let b: RoughTable<f64> = rough_entropy_threshold(&granulate(&shifted), RoughnessForm::Standard);
            prop_assert_eq!(a.t_star as u16 + c as u16, b.t_star as u16);
            prop_assert_eq!(binarize(&squeezed, a.t_star), binarize(&shifted, b.t_star));
        }
    }
}
