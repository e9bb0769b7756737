//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod compare;
pub mod gradcheck;

use std::collections::{BTreeMap, VecDeque};

use acm_core::imaging::GrayImage;

/// A brute-force MSER: pixel set, lower-set level and variation as a fraction.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct OracleRegion {
    pub pixels: Vec<usize>,
    pub level: u8,
}

struct Level {
    /// Component index per pixel, -1 outside the threshold set.
    label: Vec<i32>,
    comps: Vec<Vec<usize>>,
}

fn label_level(img: &GrayImage, t: u8) -> Level {
    let (w, h) = (img.width(), img.height());
    let d = img.data();
    let mut label = vec![-1i32; w * h];
    let mut comps = Vec::new();
    for start in 0..w * h {
        if d[start] > t || label[start] >= 0 {
            continue;
        }
        let id = comps.len() as i32;
        let mut pix = Vec::new();
        let mut q = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = q.pop_front() {
            pix.push(p);
            let (x, y) = (p % w, p / w);
            let mut nb = Vec::with_capacity(4);
            if x > 0 {
                nb.push(p - 1);
            }
            if x + 1 < w {
                nb.push(p + 1);
            }
            if y > 0 {
                nb.push(p - w);
            }
            if y + 1 < h {
                nb.push(p + w);
            }
            for n in nb {
                if d[n] <= t && label[n] < 0 {
                    label[n] = id;
                    q.push_back(n);
                }
            }
        }
        pix.sort_unstable();
        comps.push(pix);
    }
    Level { label, comps }
}

/// Exact fraction compare a/b vs c/d.
fn frac_cmp(a: (u64, u64), b: (u64, u64)) -> std::cmp::Ordering {
    (a.0 as u128 * b.1 as u128).cmp(&(b.0 as u128 * a.1 as u128))
}

/// Enumerates every threshold set of `img` and applies the MSER rules
/// directly: stability from explicit component areas at t - delta and
/// t + delta, local minimum along the path, one report per pixel set and
/// greedy suppression of near-identical nested sets.
pub fn brute_force_mser(
    img: &GrayImage,
    delta: usize,
    min_area: usize,
    max_area: usize,
    max_variation: f64,
) -> Vec<OracleRegion> {
    let levels: Vec<Level> = (0..=255u8).map(|t| label_level(img, t)).collect();

    // largest component at level s that lies inside component `c` of level t
    let largest_inside = |t: usize, c: usize, s: i64| -> Option<usize> {
        if s < 0 {
            return None;
        }
        let s = s as usize;
        let mut best: Option<usize> = None;
        for (i, comp) in levels[s].comps.iter().enumerate() {
            if levels[t].label[comp[0]] as usize != c {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let bc = &levels[s].comps[b];
                    if comp.len() > bc.len() || (comp.len() == bc.len() && comp[0] < bc[0]) {
                        Some(i)
                    } else {
                        Some(b)
                    }
                }
            };
        }
        best
    };

    let variation = |t: usize, c: usize| -> (u64, u64) {
        let comp = &levels[t].comps[c];
        let u = (t + delta).min(255);
        let up = levels[u].comps[levels[u].label[comp[0]] as usize].len() as u64;
        let down = largest_inside(t, c, t as i64 - delta as i64)
            .map_or(0, |i| levels[t - delta].comps[i].len() as u64);
        (up - down, comp.len() as u64)
    };

    let mut best_per_set: BTreeMap<Vec<usize>, (u8, (u64, u64))> = BTreeMap::new();
    for t in 0..256usize {
        for c in 0..levels[t].comps.len() {
            let comp = &levels[t].comps[c];
            if comp.len() < min_area || comp.len() > max_area {
                continue;
            }
            let v = variation(t, c);
            if v.0 as f64 / v.1 as f64 > max_variation {
                continue;
            }
            if t > 0 {
                if let Some(p) = largest_inside(t, c, t as i64 - 1) {
                    if frac_cmp(v, variation(t - 1, p)).is_gt() {
                        continue;
                    }
                }
            }
            if t < 255 {
                let n = levels[t + 1].label[comp[0]] as usize;
                if frac_cmp(v, variation(t + 1, n)).is_gt() {
                    continue;
                }
            }
            let entry = best_per_set.entry(comp.clone()).or_insert((t as u8, v));
            if frac_cmp(v, entry.1).is_lt() {
                *entry = (t as u8, v);
            }
        }
    }

    let mut cands: Vec<(Vec<usize>, u8, (u64, u64))> = best_per_set
        .into_iter()
        .map(|(p, (t, v))| (p, t, v))
        .collect();
    cands.sort_by(|a, b| frac_cmp(a.2, b.2).then(a.1.cmp(&b.1)).then(a.0[0].cmp(&b.0[0])));

    let is_subset = |small: &[usize], large: &[usize]| -> bool {
        small.iter().all(|p| large.binary_search(p).is_ok())
    };
    let mut kept: Vec<(Vec<usize>, u8)> = Vec::new();
    for (pix, t, _) in cands {
        let dup = kept.iter().any(|(k, _)| {
            let (s, l) = if k.len() >= pix.len() {
                (&pix, k)
            } else {
                (k, &pix)
            };
            (s.len() as f64 / l.len() as f64) > 0.95 && is_subset(s, l)
        });
        if !dup {
            kept.push((pix, t));
        }
    }
    let mut out: Vec<OracleRegion> = kept
        .into_iter()
        .map(|(pixels, level)| OracleRegion { pixels, level })
        .collect();
    out.sort();
    out
}

/// Rough entropy table computed pixel by pixel from the definitions.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleRoughRow {
    pub o_lower: usize,
    pub o_upper: usize,
    pub b_lower: usize,
    pub b_upper: usize,
    pub r_ot: f64,
    pub r_bt: f64,
    pub re_t: f64,
}

/// Splits into `side` x `side` granules (edge replication), classifies each
/// granule at every threshold by inspecting all its pixels, and evaluates the
/// rough entropy with natural logarithms.
pub fn brute_force_rough(img: &GrayImage, side: usize) -> (Vec<OracleRoughRow>, u8) {
    let (w, h) = (img.width(), img.height());
    let gw = w.div_ceil(side);
    let gh = h.div_ceil(side);
    let n = side * side;
    let mut granules = Vec::new();
    for gy in 0..gh {
        for gx in 0..gw {
            let mut g = Vec::new();
            for dy in 0..side {
                for dx in 0..side {
                    let x = (side * gx + dx).min(w - 1);
                    let y = (side * gy + dy).min(h - 1);
                    g.push(img.get(x, y));
                }
            }
            granules.push(g);
        }
    }
    let xlnx = |x: f64| if x > 0.0 { x * x.ln() } else { 0.0 };
    let mut rows = Vec::with_capacity(256);
    for t in 0..=255u8 {
        let mut r = OracleRoughRow {
            o_lower: 0,
            o_upper: 0,
            b_lower: 0,
            b_upper: 0,
            r_ot: 0.0,
            r_bt: 0.0,
            re_t: 0.0,
        };
        for g in &granules {
            let obj = g.iter().filter(|&&v| v > t).count();
            if obj == n {
                r.o_lower += 1;
            }
            if obj > 0 {
                r.o_upper += 1;
            }
            if obj == 0 {
                r.b_lower += 1;
            }
            if obj < n {
                r.b_upper += 1;
            }
        }
        if r.o_upper > 0 {
            r.r_ot = 1.0 - r.o_lower as f64 / r.o_upper as f64;
        }
        if r.b_upper > 0 {
            r.r_bt = 1.0 - r.b_lower as f64 / r.b_upper as f64;
        }
        if r.o_upper > 0 && r.b_upper > 0 {
            r.re_t = -(std::f64::consts::E / 2.0) * (xlnx(r.r_ot) + xlnx(r.r_bt));
        }
        rows.push(r);
    }
    let max = rows.iter().map(|r| r.re_t).fold(0.0f64, f64::max);
    let t_star = if max > 0.0 {
        rows.iter().position(|r| r.re_t == max).unwrap() as u8
    } else {
        *img.data().iter().min().unwrap()
    };
    (rows, t_star)
}

/// All-point interpolated AP from an explicit ranked list of TP/FP flags.
pub fn hand_ap(flags: &[bool], n_gt: usize) -> f64 {
    let mut tp = 0usize;
    let mut pts = Vec::new();
    for (i, &f) in flags.iter().enumerate() {
        if f {
            tp += 1;
        }
        pts.push((tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in pts.iter().enumerate() {
        if r > prev_r {
            let pmax = pts[i..].iter().map(|p| p.1).fold(0.0f64, f64::max);
            ap += (r - prev_r) * pmax;
            prev_r = r;
        }
    }
    ap
}

/// Small deterministic generator for test images (xorshift).
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> Self {
        Self(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1)
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Random image families used by the oracle comparisons: uniform noise,
/// few-level noise (many plateaus and ties) and smooth blob fields.
pub fn random_image(rng: &mut TestRng, w: usize, h: usize) -> GrayImage {
    match rng.below(3) {
        0 => GrayImage::from_fn(w, h, |_, _| rng.below(256) as u8),
        1 => {
            let levels = 2 + rng.below(6);
            let step = 255 / levels;
            GrayImage::from_fn(w, h, |_, _| (rng.below(levels + 1) * step) as u8)
        }
        _ => {
            let n = 1 + rng.below(4) as usize;
            let blobs: Vec<(f64, f64, f64, f64)> = (0..n)
                .map(|_| {
                    (
                        rng.unit() * w as f64,
                        rng.unit() * h as f64,
                        1.0 + rng.unit() * w as f64 / 3.0,
                        rng.unit() * 2.0 - 1.0,
                    )
                })
                .collect();
            let base = rng.unit() * 100.0 + 80.0;
            let noise: Vec<f64> = (0..w * h).map(|_| rng.unit() * 12.0 - 6.0).collect();
            GrayImage::from_fn(w, h, |x, y| {
                let mut v = base;
                for &(cx, cy, r, s) in &blobs {
                    let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                    v += s * 90.0 * (-d2 / (2.0 * r * r)).exp();
                }
                (v + noise[y * w + x]).round().clamp(0.0, 255.0) as u8
            })
        }
    }
}
