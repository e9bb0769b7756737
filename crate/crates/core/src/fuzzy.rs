//! Fuzzy soft labelling of ACM blobs.
//!
//! Each class has one triangular membership function per feature, fitted
//! from the 5th/50th/95th percentiles of that class's training features.
//! Memberships combine with the min t-norm; the larger one wins, ties go to
//! background.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::Label;
use crate::error::{Error, Result};
use crate::imaging::{GrayImage, Rect, RgbImage};
use crate::roughseg::Blob;

pub const MODEL_VERSION: u32 = 1;
pub const MIN_SAMPLES_PER_CLASS: usize = 5;
pub const GREEN: [u8; 3] = [0, 255, 0];
pub const RED: [u8; 3] = [255, 0, 0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    MeanIntensity,
    StdIntensity,
    FillRatio,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSet {
    #[default]
    Full,
    IntensityOnly,
}

impl FeatureSet {
    pub fn features(self) -> &'static [Feature] {
        match self {
            FeatureSet::Full => &[Feature::MeanIntensity, Feature::StdIntensity, Feature::FillRatio],
            FeatureSet::IntensityOnly => &[Feature::MeanIntensity, Feature::StdIntensity],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobFeatures {
    pub mean_intensity: f64,
    pub std_intensity: f64,
    pub fill_ratio: f64,
}

impl BlobFeatures {
    pub fn get(&self, f: Feature) -> f64 {
        match f {
            Feature::MeanIntensity => self.mean_intensity,
            Feature::StdIntensity => self.std_intensity,
            Feature::FillRatio => self.fill_ratio,
        }
    }
}

/// Population mean/std of the ACM over the blob's own pixels.
pub fn features(blob: &Blob, acm: &GrayImage) -> Result<BlobFeatures> {
    if blob.pixels.is_empty() {
        return Err(Error::Parameter("features of an empty blob".into()));
    }
    let mut sum = 0.0;
    for &p in &blob.pixels {
        let v = *acm
            .data()
            .get(p as usize)
            .ok_or_else(|| Error::Parameter(format!("blob pixel {p} outside the ACM")))?;
        sum += v as f64;
    }
    let n = blob.pixels.len() as f64;
    let mean = sum / n;
    let var = blob
        .pixels
        .iter()
        .map(|&p| (acm.data()[p as usize] as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(BlobFeatures {
        mean_intensity: mean,
        std_intensity: var.sqrt(),
        fill_ratio: blob.area as f64 / blob.bbox.area() as f64,
    })
}

/// Triangle `(a, b, c)` with `a <= b <= c`, peak 1 at `b`, 0 outside `(a, c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct TriangularMf {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl From<[f64; 3]> for TriangularMf {
    fn from(v: [f64; 3]) -> Self {
        Self { a: v[0], b: v[1], c: v[2] }
    }
}

impl From<TriangularMf> for [f64; 3] {
    fn from(m: TriangularMf) -> Self {
        [m.a, m.b, m.c]
    }
}

impl TriangularMf {
    pub fn eval(&self, x: f64) -> f64 {
        if x == self.b {
            1.0
        } else if x <= self.a || x >= self.c {
            0.0
        } else if x < self.b {
            (x - self.a) / (self.b - self.a)
        } else {
            (self.c - x) / (self.c - self.b)
        }
    }

    fn is_valid(&self) -> bool {
        self.a.is_finite() && self.c.is_finite() && self.a <= self.b && self.b <= self.c
    }
}

/// Linear-interpolation percentile (`p` in [0, 1]) of sorted values.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMfs {
    pub vehicle: BTreeMap<Feature, TriangularMf>,
    pub background: BTreeMap<Feature, TriangularMf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FuzzyModel {
    pub version: u32,
    pub features: Vec<Feature>,
    pub classes: ClassMfs,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SoftLabel {
    pub mu_vehicle: f64,
    pub mu_background: f64,
    pub hard: Label,
}

fn fit_mf(mut values: Vec<f64>) -> TriangularMf {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let a = percentile(&values, 0.05);
    let b = percentile(&values, 0.5);
    let c = percentile(&values, 0.95);
    if a == c {
        TriangularMf { a: b - 1.0, b, c: b + 1.0 }
    } else {
        TriangularMf { a, b, c }
    }
}

/// Fits the per-class triangles from labelled features.
pub fn train_fuzzy(samples: &[(BlobFeatures, Label)], set: FeatureSet) -> Result<FuzzyModel> {
    for (label, name) in [(Label::Vehicle, "vehicle"), (Label::Background, "background")] {
        let n = samples.iter().filter(|s| s.1 == label).count();
        if n < MIN_SAMPLES_PER_CLASS {
            return Err(Error::Training(format!(
                "fuzzy training needs at least {MIN_SAMPLES_PER_CLASS} {name} samples, got {n}"
            )));
        }
    }
    if samples.iter().any(|(f, _)| set.features().iter().any(|&k| !f.get(k).is_finite())) {
        return Err(Error::Training("non-finite feature value".into()));
    }
    let fit_class = |label: Label| -> BTreeMap<Feature, TriangularMf> {
        set.features()
            .iter()
            .map(|&k| {
                let vals = samples.iter().filter(|s| s.1 == label).map(|s| s.0.get(k)).collect();
                (k, fit_mf(vals))
            })
            .collect()
    };
    Ok(FuzzyModel {
        version: MODEL_VERSION,
        features: set.features().to_vec(),
        classes: ClassMfs {
            vehicle: fit_class(Label::Vehicle),
            background: fit_class(Label::Background),
        },
    })
}

impl FuzzyModel {
    pub fn validate(&self) -> Result<()> {
        if self.version != MODEL_VERSION {
            return Err(Error::Model(format!("fuzzy model version {} unsupported", self.version)));
        }
        if self.features.is_empty() {
            return Err(Error::Model("fuzzy model has no features".into()));
        }
        for class in [&self.classes.vehicle, &self.classes.background] {
            for f in &self.features {
                match class.get(f) {
                    Some(mf) if mf.is_valid() => {}
                    Some(mf) => return Err(Error::Model(format!("invalid triangle {mf:?} for {f:?}"))),
                    None => return Err(Error::Model(format!("missing membership for {f:?}"))),
                }
            }
        }
        Ok(())
    }

    pub fn classify(&self, f: &BlobFeatures) -> SoftLabel {
        let mu = |class: &BTreeMap<Feature, TriangularMf>| {
            self.features
                .iter()
                .map(|k| class[k].eval(f.get(*k)))
                .fold(1.0f64, f64::min)
        };
        let mu_vehicle = mu(&self.classes.vehicle);
        let mu_background = mu(&self.classes.background);
        let hard = if mu_vehicle > mu_background {
            Label::Vehicle
        } else {
            Label::Background
        };
        SoftLabel {
            mu_vehicle,
            mu_background,
            hard,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: FuzzyModel = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Parses `mean,std,fill,label` rows; label is `vehicle`/`background` or
/// `1`/`0`. A header row is skipped when present.
pub fn parse_feature_csv(text: &str, file: &Path) -> Result<Vec<(BlobFeatures, Label)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("mean")) {
            continue;
        }
        let err = |reason: String| Error::Parse {
            file: file.to_path_buf(),
            line: i + 1,
            reason,
        };
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|e| err(format!("bad number {s:?}: {e}")));
        let label = match cols[3] {
            "vehicle" | "1" => Label::Vehicle,
            "background" | "0" => Label::Background,
            other => return Err(err(format!("unknown label {other:?}"))),
        };
        out.push((
            BlobFeatures {
                mean_intensity: num(cols[0])?,
                std_intensity: num(cols[1])?,
                fill_ratio: num(cols[2])?,
            },
            label,
        ));
    }
    Ok(out)
}

pub fn feature_csv(samples: &[(BlobFeatures, Label)]) -> String {
    let mut s = String::from("mean,std,fill,label\n");
    for (f, l) in samples {
        let name = match l {
            Label::Vehicle => "vehicle",
            Label::Background => "background",
        };
        s.push_str(&format!("{},{},{},{name}\n", f.mean_intensity, f.std_intensity, f.fill_ratio));
    }
    s
}

/// Colour copy of `img` with each box outlined green (vehicle) or red.
pub fn annotate(img: &GrayImage, boxes: &[Rect], labels: &[Label]) -> RgbImage {
    assert_eq!(boxes.len(), labels.len(), "one label per box");
    let mut out = RgbImage::from_gray(img);
    for (b, l) in boxes.iter().zip(labels) {
        out.draw_rect(b, if *l == Label::Vehicle { GREEN } else { RED });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roughseg::blob_from_pixels;
    use proptest::prelude::*;

    fn feat(m: f64, s: f64, f: f64) -> BlobFeatures {
        BlobFeatures {
            mean_intensity: m,
            std_intensity: s,
            fill_ratio: f,
        }
    }

    #[test]
    fn blob_features() {
        let acm = GrayImage::from_vec(3, 1, vec![100, 200, 0]).unwrap();
        let b = blob_from_pixels(vec![0, 1], &acm);
        let f = features(&b, &acm).unwrap();
        assert_eq!((f.mean_intensity, f.std_intensity, f.fill_ratio), (150.0, 50.0, 1.0));
        let acm = GrayImage::filled(4, 4, 200);
        let f = features(&blob_from_pixels((0..16).collect(), &acm), &acm).unwrap();
        assert_eq!((f.mean_intensity, f.std_intensity, f.fill_ratio), (200.0, 0.0, 1.0));
    }

    #[test]
    fn percentile_fit() {
        let mut s: Vec<(BlobFeatures, Label)> =
            (100..=200).map(|m| (feat(m as f64, 5.0, 0.8), Label::Vehicle)).collect();
        s.extend((0..10).map(|i| (feat(i as f64, 1.0, 0.3), Label::Background)));
        let m = train_fuzzy(&s, FeatureSet::Full).unwrap();
        let mf = m.classes.vehicle[&Feature::MeanIntensity];
        assert_eq!((mf.a, mf.b, mf.c), (105.0, 150.0, 195.0));
        let std_mf = m.classes.vehicle[&Feature::StdIntensity];
        assert_eq!((std_mf.a, std_mf.b, std_mf.c), (4.0, 5.0, 6.0));

        let sl = m.classify(&feat(150.0, 5.0, 0.8));
        assert_eq!(sl.mu_vehicle, 1.0);
        assert_eq!(sl.hard, Label::Vehicle);

        let mut rev = s.clone();
        rev.reverse();
        assert_eq!(train_fuzzy(&rev, FeatureSet::Full).unwrap(), m);
    }

    #[test]
    fn too_few_samples() {
        let s: Vec<_> = (0..4)
            .map(|i| (feat(i as f64, 0.0, 1.0), Label::Vehicle))
            .chain((0..9).map(|i| (feat(i as f64, 0.0, 1.0), Label::Background)))
            .collect();
        assert!(matches!(train_fuzzy(&s, FeatureSet::Full), Err(Error::Training(_))));
    }

    fn hand_model() -> FuzzyModel {
        let tri = |a, b, c| TriangularMf { a, b, c };
        FuzzyModel {
            version: MODEL_VERSION,
            features: vec![Feature::MeanIntensity],
            classes: ClassMfs {
                vehicle: [(Feature::MeanIntensity, tri(100.0, 180.0, 240.0))].into(),
                background: [(Feature::MeanIntensity, tri(0.0, 60.0, 120.0))].into(),
            },
        }
    }

    #[test]
    fn slope_interpolation_and_ties() {
        let m = hand_model();
        let sl = m.classify(&feat(140.0, 0.0, 1.0));
        assert!((sl.mu_vehicle - 0.5).abs() < 1e-15);
        assert_eq!(sl.mu_background, 0.0);
        assert_eq!(sl.hard, Label::Vehicle);
        let sl = m.classify(&feat(250.0, 0.0, 1.0));
        assert_eq!((sl.mu_vehicle, sl.mu_background, sl.hard), (0.0, 0.0, Label::Background));
        // 110: vehicle (10/80), background (10/60)
        let sl = m.classify(&feat(110.0, 0.0, 1.0));
        assert_eq!(sl.hard, Label::Background);
    }

    #[test]
    fn json_round_trip() {
        let m = hand_model();
        let text = m.to_json().unwrap();
        assert!(text.contains("\"mean_intensity\""));
        assert_eq!(FuzzyModel::from_json(&text).unwrap(), m);
    }

    #[test]
    fn csv_round_trip() {
        let s = vec![(feat(1.5, 2.0, 0.25), Label::Vehicle), (feat(3.0, 0.0, 1.0), Label::Background)];
        let back = parse_feature_csv(&feature_csv(&s), Path::new("x.csv")).unwrap();
        assert_eq!(back, s);
        let e = parse_feature_csv("1,2,3,car\n", Path::new("x.csv")).unwrap_err();
        assert!(e.to_string().contains("x.csv"));
    }

    #[test]
    fn overlay_counts() {
        let img = GrayImage::filled(30, 30, 50);
        let same = annotate(&img, &[], &[]);
        assert_eq!(same, RgbImage::from_gray(&img));
        let boxes = [Rect::new(2, 2, 6, 6), Rect::new(15, 15, 8, 8), Rect::new(10, 2, 4, 4)];
        let labels = [Label::Vehicle, Label::Background, Label::Vehicle];
        let out = annotate(&img, &boxes, &labels);
        let corners_with = |c: [u8; 3]| boxes.iter().filter(|b| out.get(b.x as usize, b.y as usize) == c).count();
        assert_eq!(corners_with(GREEN), 2);
        assert_eq!(corners_with(RED), 1);
    }

    proptest! {
        #[test]
        fn mf_endpoints_and_range(a in -50.0f64..50.0, d1 in 0.1f64..50.0, d2 in 0.1f64..50.0, x in -200.0f64..200.0) {
            let mf = TriangularMf { a, b: a + d1, c: a + d1 + d2 };
            prop_assert_eq!(mf.eval(mf.a), 0.0);
            prop_assert_eq!(mf.eval(mf.c), 0.0);
            prop_assert_eq!(mf.eval(mf.b), 1.0);
            let v = mf.eval(x);
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn affine_reparameterization_keeps_label(x in 0.0f64..255.0, s in 0.1f64..10.0, o in -100.0f64..100.0) {
            let m = hand_model();
            let map = |t: TriangularMf| TriangularMf { a: t.a * s + o, b: t.b * s + o, c: t.c * s + o };
            let mut m2 = m.clone();
            for class in [&mut m2.classes.vehicle, &mut m2.classes.background] {
                for mf in class.values_mut() {
                    *mf = map(*mf);
                }
            }
            let h1 = m.classify(&feat(x, 0.0, 1.0)).hard;
            let h2 = m2.classify(&feat(x * s + o, 0.0, 1.0)).hard;
            prop_assert_eq!(h1, h2);
        }
    }
}
