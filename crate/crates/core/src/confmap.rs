//! Augmented confidence map: per-pixel stacking of proposal confidences.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::Proposal;
use crate::error::{Error, Result};
use crate::imaging::{save_image, GrayImage, Rect};
use crate::scalar::Scalar;

pub const DEFAULT_TAU_CM: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMap<T> {
    width: usize,
    height: usize,
    sum: Vec<T>,
    count: Vec<u32>,
    peak: Vec<T>,
}

impl<T: Scalar> ConfidenceMap<T> {
    pub fn new(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            sum: vec![T::zero(); n],
            count: vec![0; n],
            peak: vec![T::zero(); n],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn sum(&self) -> &[T] {
        &self.sum
    }

    pub fn count(&self) -> &[u32] {
        &self.count
    }

    /// Adds `conf` over the part of `rect` inside the map.
    pub fn add(&mut self, rect: &Rect, conf: T) {
        let Some(r) = rect.clip(self.width, self.height) else {
            return;
        };
        for y in r.y as usize..r.bottom() as usize {
            let row = y * self.width;
            for i in row + r.x as usize..row + r.right() as usize {
                self.sum[i] += conf;
                self.count[i] += 1;
                if conf > self.peak[i] {
                    self.peak[i] = conf;
                }
            }
        }
    }

    /// Mean (sum/count) at pixel index `i`, 0 where nothing covers it.
    pub fn mean(&self, i: usize) -> T {
        match self.count[i] {
            0 => T::zero(),
            c => self.sum[i] / T::lit(c as f64),
        }
    }

    pub fn value(&self, i: usize, agg: Aggregation) -> T {
        match agg {
            Aggregation::Mean => self.mean(i),
            Aggregation::Max => self.peak[i],
        }
    }

    /// Grayscale ACM: `round(255 * v)` where the aggregated value `v` is at
    /// least `tau_cm`, else 0.
    pub fn to_gray(&self, tau_cm: f64, agg: Aggregation) -> GrayImage {
        let tau = T::lit(tau_cm);
        let k = T::lit(255.0);
        GrayImage::from_fn(self.width, self.height, |x, y| {
            let v = self.value(y * self.width + x, agg);
            if v >= tau && v > T::zero() {
                (v * k).round().to_f32_lossy().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        })
    }

    pub fn save_pgm(&self, path: impl AsRef<Path>, tau_cm: f64, agg: Aggregation) -> Result<()> {
        save_image(&self.to_gray(tau_cm, agg), path)
    }
}

/// Stacks one confidence per proposal over its square.
pub fn stack<T: Scalar>(
    proposals: &[Proposal],
    confidences: &[T],
    width: usize,
    height: usize,
) -> Result<ConfidenceMap<T>> {
    if proposals.len() != confidences.len() {
        return Err(Error::Parameter(format!(
            "{} proposals but {} confidences",
            proposals.len(),
            confidences.len()
        )));
    }
    let items: Vec<(Rect, T)> = proposals
        .iter()
        .zip(confidences)
        .map(|(p, &c)| (p.rect(), c))
        .collect();
    stack_rects(&items, width, height)
}

/// Stacks `(rect, confidence)` pairs. Pairs are accumulated in a canonical
/// order so the floating-point sums do not depend on the input order.
pub fn stack_rects<T: Scalar>(items: &[(Rect, T)], width: usize, height: usize) -> Result<ConfidenceMap<T>> {
    let mut sorted = Vec::with_capacity(items.len());
    for &(r, c) in items {
        if !(c >= T::zero() && c <= T::one()) {
            return Err(Error::Parameter(format!("confidence {c} outside [0, 1]")));
        }
        sorted.push((r, c));
    }
    sorted.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.partial_cmp(&b.1).unwrap()));
    let mut map = ConfidenceMap::new(width, height);
    for (r, c) in &sorted {
        map.add(r, *c);
    }
    Ok(map)
}
