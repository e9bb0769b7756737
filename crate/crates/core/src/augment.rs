//! Region augmentation: square crops at three area inflations, 28x28 patches,
//! and labelled sample mining with rotation jitter.

use std::f64::consts::FRAC_PI_4;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{iou, load_image, resize_patch, rotate_crop, save_image, GrayImage, Rect, PATCH_SIDE};
use crate::mser::ExtremalRegion;

/// Area inflation factors; sides grow by their square roots.
pub const INFLATIONS: [f64; 3] = [1.0, 1.3, 1.6];
pub const MIN_SIDE: i32 = 4;
/// Rotated copies added per mined sample.
pub const JITTER_COPIES: usize = 4;
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    /// Index into the region list the proposal came from.
    pub region_ref: usize,
    pub center: (i32, i32),
    /// Side of the un-inflated square.
    pub base_side: i32,
    pub side: i32,
    pub inflation: f64,
    pub patch: GrayImage,
}

impl Proposal {
    /// The proposal's own (inflated) square.
    pub fn rect(&self) -> Rect {
        square_rect(self.center, self.side)
    }

    /// The inflation-1.0 square of the source region, used for labelling.
    pub fn base_rect(&self) -> Rect {
        square_rect(self.center, self.base_side)
    }
}

/// Square of `side` pixels around an integer center.
pub fn square_rect(center: (i32, i32), side: i32) -> Rect {
    Rect::new(center.0 - side / 2, center.1 - side / 2, side, side)
}

/// Center and max-side of the region's base-coordinate bbox.
pub fn squarify(region: &ExtremalRegion) -> ((i32, i32), i32) {
    let b = region.base_bbox;
    (b.center(), b.w.max(b.h))
}

/// The three (center, side) crops for area factors 1.0, 1.3 and 1.6.
pub fn inflate_set(center: (i32, i32), base_side: i32) -> [((i32, i32), i32); 3] {
    INFLATIONS.map(|k| {
        let side = ((base_side as f64) * k.sqrt()).round() as i32;
        (center, side.max(MIN_SIDE))
    })
}

/// Three proposals per region; regions whose square misses the image are skipped.
pub fn make_proposals(regions: &[ExtremalRegion], img: &GrayImage) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(regions.len() * 3);
    for (i, region) in regions.iter().enumerate() {
        let (center, base_side) = squarify(region);
        let base_side = base_side.max(MIN_SIDE);
        if square_rect(center, base_side)
            .clip(img.width(), img.height())
            .is_none()
        {
            continue;
        }
        for (k, (c, side)) in INFLATIONS.iter().zip(inflate_set(center, base_side)) {
            let patch = resize_patch(img, &square_rect(c, side));
            out.push(Proposal {
                region_ref: i,
                center: c,
                base_side,
                side,
                inflation: *k,
                patch,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Background = 0,
    Vehicle = 1,
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Background),
            1 => Ok(Label::Vehicle),
            _ => Err(format!("label must be 0 or 1, got {v}")),
        }
    }
}

impl Label {
    pub fn target(self) -> f64 {
        self as u8 as f64
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub patch: GrayImage,
    pub label: Label,
    pub rotation: f64,
    /// (image id, proposal index)
    pub source: (String, usize),
}

/// Per-image RNG stream derived from the run seed and the image id.
pub fn image_rng(seed: u64, image_id: &str) -> ChaCha8Rng {
    // FNV-1a keeps the stream independent of std's hasher
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h.rotate_left(17))
}

/// Mines balanced positive/negative samples from one image's proposals.
///
/// Labels come from the inflation-1.0 square: IoU > 0.5 with some gt box is
/// a vehicle, IoU == 0 with every box is background, anything in between is
/// unused. The larger pool is subsampled to the size of the smaller one.
/// Each kept proposal yields its unrotated patch plus four copies rotated by
/// a uniform angle in [-pi/4, pi/4].
pub fn mine_training_set(
    img: &GrayImage,
    image_id: &str,
    proposals: &[Proposal],
    gt: &[Rect],
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for (i, p) in proposals.iter().enumerate() {
        let r = p.base_rect();
        let best = gt.iter().map(|g| iou(&r, g)).fold(0.0, f64::max);
        if best > POSITIVE_IOU {
            pos.push(i);
        } else if best == 0.0 {
            neg.push(i);
        }
    }
    let fail = |reason: &str| Error::Mining {
        image: image_id.to_string(),
        reason: reason.to_string(),
    };
    if pos.is_empty() {
        return Err(fail("no proposal has IoU > 0.5 with a ground-truth box"));
    }
    if neg.is_empty() {
        return Err(fail("no proposal is disjoint from every ground-truth box"));
    }

    let mut rng = image_rng(seed, image_id);
    let n = pos.len().min(neg.len());
    let pick = |pool: Vec<usize>, rng: &mut ChaCha8Rng| -> Vec<usize> {
        if pool.len() == n {
            return pool;
        }
        let mut idx: Vec<usize> = sample(rng, pool.len(), n).into_iter().map(|i| pool[i]).collect();
        idx.sort_unstable();
        idx
    };
    let pos = pick(pos, &mut rng);
    let neg = pick(neg, &mut rng);

    let mut out = Vec::with_capacity(2 * n * (1 + JITTER_COPIES));
    for (label, pool) in [(Label::Vehicle, pos), (Label::Background, neg)] {
        for i in pool {
            let p = &proposals[i];
            let r = p.rect();
            let center = (r.x as f64 + r.w as f64 / 2.0, r.y as f64 + r.h as f64 / 2.0);
            out.push(TrainSample {
                patch: p.patch.clone(),
                label,
                rotation: 0.0,
                source: (image_id.to_string(), i),
            });
            for _ in 0..JITTER_COPIES {
                let angle = rng.random_range(-FRAC_PI_4..=FRAC_PI_4);
                out.push(TrainSample {
                    patch: rotate_crop(img, center, p.side as f64, angle, PATCH_SIDE)?,
                    label,
                    rotation: angle,
                    source: (image_id.to_string(), i),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    path: String,
    label: Label,
    rotation: f64,
    source: (String, usize),
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes one PGM per sample plus `manifest.jsonl`.
pub fn save_training_set(dir: impl AsRef<Path>, samples: &[TrainSample]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("sample_{i:06}.pgm");
        save_image(&s.patch, dir.join(&name))?;
        let entry = ManifestEntry {
            path: name,
            label: s.label,
            rotation: s.rotation,
            source: s.source.clone(),
        };
        manifest.push_str(&serde_json::to_string(&entry)?);
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST);
    fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

pub fn load_training_set(dir: impl AsRef<Path>) -> Result<Vec<TrainSample>> {
    let dir = dir.as_ref();
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| Error::Parse {
            file: path.clone(),
            line: n + 1,
            reason: err.to_string(),
        })?;
        let patch = load_image(dir.join(&e.path))?;
        if patch.width() != PATCH_SIDE || patch.height() != PATCH_SIDE {
            return Err(Error::format(dir.join(&e.path), "training patch is not 28x28"));
        }
        out.push(TrainSample {
            patch,
            label: e.label,
            rotation: e.rotation,
            source: e.source,
        });
    }
    Ok(out)
}
