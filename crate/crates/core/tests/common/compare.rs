//! Implementation-versus-oracle comparisons returning a description of the
//! first mismatch.

use acm_core::augment::{Label, TrainSample};
use acm_core::imaging::GrayImage;
use acm_core::mser::{detect_mser, region_pixels, MserConfig, Polarity};
use acm_core::roughseg::{granulate_with, rough_entropy_threshold, RoughnessForm};

use super::{brute_force_mser, brute_force_rough, random_image, OracleRegion, TestRng};

fn implementation_regions(img: &GrayImage, cfg: &MserConfig) -> Result<(Vec<OracleRegion>, Vec<OracleRegion>), String> {
    let regs = detect_mser(img, cfg).map_err(|e| e.to_string())?;
    let mut dark = Vec::new();
    let mut bright = Vec::new();
    for r in &regs {
        let pixels = region_pixels(img, r);
        if pixels.len() != r.area as usize {
            return Err(format!("region at level {} reports area {} but has {} pixels", r.level, r.area, pixels.len()));
        }
        match r.polarity {
            Polarity::DarkOnBright => dark.push(OracleRegion { pixels, level: r.level }),
            Polarity::BrightOnDark => bright.push(OracleRegion { pixels, level: 255 - r.level }),
        }
    }
    dark.sort();
    bright.sort();
    Ok((dark, bright))
}

/// Both polarities of `detect_mser` against the threshold-sweep enumerator.
pub fn mser_vs_oracle(img: &GrayImage, cfg: &MserConfig) -> Result<(), String> {
    let max_area = cfg.max_area_pixels(img.len());
    let (dark, bright) = implementation_regions(img, cfg)?;
    let d = cfg.delta as usize;
    let want_dark = brute_force_mser(img, d, cfg.min_area, max_area, cfg.max_variation);
    let want_bright = brute_force_mser(&img.inverted(), d, cfg.min_area, max_area, cfg.max_variation);
    if dark != want_dark {
        return Err(format!("dark regions differ: {} vs {} expected", dark.len(), want_dark.len()));
    }
    if bright != want_bright {
        return Err(format!("bright regions differ: {} vs {} expected", bright.len(), want_bright.len()));
    }
    Ok(())
}

/// Random image of at most 16x16 with a random detector configuration.
pub fn random_mser_case(rng: &mut TestRng, i: usize) -> (GrayImage, MserConfig) {
    let w = 4 + rng.below(13) as usize;
    let h = 4 + rng.below(13) as usize;
    let img = random_image(rng, w, h);
    let cfg = MserConfig {
        delta: 1 + rng.below(6) as u8,
        min_area: 1 + rng.below(8) as usize,
        max_area: 0.3 + rng.unit() * 0.7,
        max_variation: if i.is_multiple_of(3) { 10.0 } else { 0.25 + rng.unit() },
        both_polarities: true,
    };
    (img, cfg)
}

/// Squares, one-pixel slivers, nested rings, a checkerboard and a constant
/// image, each under a permissive and a default-like configuration.
pub fn crafted_mser_cases() -> Vec<(GrayImage, MserConfig)> {
    let loose = MserConfig {
        delta: 2,
        min_area: 1,
        max_area: 1.0,
        max_variation: 10.0,
        both_polarities: true,
    };
    let strict = MserConfig { delta: 5, min_area: 3, max_variation: 0.5, ..loose.clone() };
    let square = GrayImage::from_fn(12, 12, |x, y| if (3..9).contains(&x) && (3..9).contains(&y) { 30 } else { 200 });
    let sliver = GrayImage::from_fn(16, 5, |x, y| if y == 2 && x > 0 && x < 15 { 10 } else { 120 });
    let column = GrayImage::from_fn(3, 16, |x, _| if x == 1 { 250 } else { 0 });
    let nested = GrayImage::from_fn(14, 14, |x, y| {
        let d = (x as i32 - 7).abs().max((y as i32 - 7).abs());
        (d * 30) as u8
    });
    let checker = GrayImage::from_fn(8, 8, |x, y| if (x + y) % 2 == 0 { 0 } else { 255 });
    let mut out = Vec::new();
    for img in [square, sliver, column, nested, checker, GrayImage::filled(5, 5, 77)] {
        out.push((img.clone(), loose.clone()));
        out.push((img, strict.clone()));
    }
    out
}

/// Full f64 table and threshold against the exhaustive evaluator, bit for bit.
pub fn rough_vs_oracle(img: &GrayImage, side: usize) -> Result<(), String> {
    let table = rough_entropy_threshold::<f64>(&granulate_with(img, side), RoughnessForm::Standard);
    let (rows, t_star) = brute_force_rough(img, side);
    if table.rows.len() != 256 || rows.len() != 256 {
        return Err(format!("table has {} rows", table.rows.len()));
    }
    if table.t_star != t_star {
        return Err(format!("t_star {} but oracle says {t_star}", table.t_star));
    }
    for (got, want) in table.rows.iter().zip(&rows) {
        let c = got.counts;
        if (c.o_lower, c.o_upper, c.b_lower, c.b_upper) != (want.o_lower, want.o_upper, want.b_lower, want.b_upper) {
            return Err(format!("counts differ at T = {}", got.t));
        }
        if c.o_upper - c.o_lower != c.b_upper - c.b_lower {
            return Err(format!("boundary identity fails at T = {}", got.t));
        }
        if got.r_ot.to_bits() != want.r_ot.to_bits()
            || got.r_bt.to_bits() != want.r_bt.to_bits()
            || got.re_t.to_bits() != want.re_t.to_bits()
        {
            return Err(format!("roughness or entropy differs at T = {}", got.t));
        }
    }
    Ok(())
}

/// Linearly separable 28x28 patches: vehicles carry a bright rectangle at a
/// random offset over dark texture, backgrounds are texture only.
pub fn separable_patches(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = TestRng::new(seed);
    (0..n)
        .map(|i| {
            let vehicle = i % 2 == 0;
            let (ox, oy) = (rng.below(10) as usize, rng.below(10) as usize);
            let (w, h) = (8 + rng.below(8) as usize, 6 + rng.below(6) as usize);
            let level = 170 + rng.below(80) as u8;
            let noise: Vec<u8> = (0..28 * 28).map(|_| rng.below(60) as u8).collect();
            let patch = GrayImage::from_fn(28, 28, |x, y| {
                let inside = (ox..ox + w).contains(&x) && (oy..oy + h).contains(&y);
                if vehicle && inside {
                    level
                } else {
                    noise[y * 28 + x]
                }
            });
            TrainSample {
                patch,
                label: if vehicle { Label::Vehicle } else { Label::Background },
                rotation: 0.0,
                source: ("separable".into(), i),
            }
        })
        .collect()
}
