//! End-to-end detector: configuration, staged detection, corpus training.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{make_proposals, mine_training_set, Label, Proposal, TrainSample};
use crate::confmap::{stack, Aggregation, ConfidenceMap, DEFAULT_TAU_CM};
use crate::error::{Error, Result};
use crate::evalpipe::{load_annotations, load_kitti_labels, Annotation, Detection, Interpolation, DEFAULT_IOU};
use crate::fuzzy::{features, train_fuzzy, BlobFeatures, FeatureSet, FuzzyModel, SoftLabel, MIN_SAMPLES_PER_CLASS};
use crate::imaging::{build_pyramid, load_image, resize_image, GrayImage, Rect};
use crate::mser::{detect_mr_mser, detect_mser, ExtremalRegion, MserConfig};
use crate::roughseg::{
    binarize, blob_from_pixels, extract_blobs, granulate_with, rough_entropy_threshold, BinaryMask, Blob, RoughTable, RoughnessForm,
    DEFAULT_MIN_BLOB_AREA, GRANULE_SIDE,
};
use crate::tinycnn::{train, CnnModel, LayerPlan, TrainConfig};

/// Minimum inflation-1.0 confidence for a region to shape a detection box.
pub const SUPPORT_CONFIDENCE: f32 = 0.5;
/// Largest overlap, as a fraction of the smaller box, between two boxes
/// refined from the same blob.
pub const SUPPORT_OVERLAP: f64 = 0.3;
/// Smallest accepted working resolution side.
pub const MIN_WORKING_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProposalMode {
    /// Single-scale MSER boxes scored by stability.
    Mser,
    /// Multi-resolution MSER boxes scored by stability.
    MrMser,
    /// The full confidence-map detector.
    #[default]
    Acm,
}

impl std::str::FromStr for ProposalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mser" => Ok(Self::Mser),
            "mr-mser" => Ok(Self::MrMser),
            "acm" => Ok(Self::Acm),
            _ => Err(Error::Parameter(format!("unknown proposal mode {s:?} (mser, mr-mser, acm)"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub model: Option<PathBuf>,
    pub fuzzy_model: Option<PathBuf>,
    /// Directory holding the images named by the annotations.
    pub dataset: Option<PathBuf>,
    /// JSON-lines annotation file or a KITTI label directory. Defaults to
    /// `annotations.jsonl` inside `dataset`.
    pub annotations: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// `[width, height]` every image is resampled to; `None` keeps the input size.
    pub working_resolution: Option<[usize; 2]>,
    pub mser: MserConfig,
    pub mining_seed: u64,
    pub plan: LayerPlan,
    pub train: TrainConfig,
    pub tau_cm: f64,
    pub aggregation: Aggregation,
    pub roughness: RoughnessForm,
    /// Side of the square granules used by the rough-entropy threshold.
    pub granule_side: usize,
    pub min_blob_area: usize,
    pub feature_set: FeatureSet,
    pub proposals: ProposalMode,
    pub iou_thresh: f64,
    pub interpolation: Interpolation,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            working_resolution: None,
            mser: MserConfig::default(),
            mining_seed: 0,
            plan: LayerPlan::default(),
            train: TrainConfig::default(),
            tau_cm: DEFAULT_TAU_CM,
            aggregation: Aggregation::default(),
            roughness: RoughnessForm::default(),
            granule_side: GRANULE_SIDE,
            min_blob_area: DEFAULT_MIN_BLOB_AREA,
            feature_set: FeatureSet::default(),
            proposals: ProposalMode::default(),
            iou_thresh: DEFAULT_IOU,
            interpolation: Interpolation::default(),
            paths: Paths::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.mser.validate()?;
        self.plan.validate()?;
        self.train.validate()?;
        if self.granule_side == 0 {
            return Err(Error::Parameter("granule_side must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau_cm) {
            return Err(Error::Parameter(format!("tau_cm {} outside [0, 1]", self.tau_cm)));
        }
        if !(self.iou_thresh > 0.0 && self.iou_thresh <= 1.0) {
            return Err(Error::Parameter(format!("iou_thresh {} outside (0, 1]", self.iou_thresh)));
        }
        if let Some([w, h]) = self.working_resolution {
            if w < MIN_WORKING_SIDE || h < MIN_WORKING_SIDE {
                return Err(Error::Parameter(format!(
                    "working resolution {w}x{h} below {MIN_WORKING_SIDE}x{MIN_WORKING_SIDE}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Json(j) => Error::format(path, j.to_string()),
            e => e,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Input image mapped to the working resolution, with the factors that map
/// boxes back.
pub struct Working {
    pub image: GrayImage,
    fx: f64,
    fy: f64,
}

impl Working {
    pub fn new(img: &GrayImage, res: Option<[usize; 2]>) -> Self {
        match res {
            Some([w, h]) if (w, h) != (img.width(), img.height()) => Working {
                image: resize_image(img, w, h),
                fx: img.width() as f64 / w as f64,
                fy: img.height() as f64 / h as f64,
            },
            _ => Working {
                image: img.clone(),
                fx: 1.0,
                fy: 1.0,
            },
        }
    }

    fn map(r: &Rect, fx: f64, fy: f64) -> Rect {
        let x0 = (r.x as f64 * fx).round() as i32;
        let y0 = (r.y as f64 * fy).round() as i32;
        let x1 = (r.right() as f64 * fx).round() as i32;
        let y1 = (r.bottom() as f64 * fy).round() as i32;
        Rect::new(x0, y0, (x1 - x0).max(1), (y1 - y0).max(1))
    }

    /// Working coordinates to input coordinates.
    pub fn to_input(&self, r: &Rect) -> Rect {
        Self::map(r, self.fx, self.fy)
    }

    /// Input coordinates to working coordinates.
    pub fn to_working(&self, r: &Rect) -> Rect {
        Self::map(r, 1.0 / self.fx, 1.0 / self.fy)
    }
}

/// Region proposals for `mode`.
pub fn propose(img: &GrayImage, cfg: &MserConfig, mode: ProposalMode) -> Result<Vec<ExtremalRegion>> {
    match mode {
        ProposalMode::Mser => detect_mser(img, cfg),
        ProposalMode::MrMser | ProposalMode::Acm => detect_mr_mser(&build_pyramid(img)?, cfg),
    }
}

/// Proposals, their CNN confidences and the resulting map.
pub struct AcmStage {
    pub regions: Vec<ExtremalRegion>,
    pub proposals: Vec<Proposal>,
    pub confidences: Vec<f32>,
    pub map: ConfidenceMap<f32>,
    pub acm: GrayImage,
}

pub fn acm_stage(img: &GrayImage, cnn: &CnnModel<f32>, cfg: &RunConfig) -> Result<AcmStage> {
    let regions = propose(img, &cfg.mser, ProposalMode::Acm)?;
    let proposals = make_proposals(&regions, img);
    let patches: Vec<&GrayImage> = proposals.iter().map(|p| &p.patch).collect();
    let confidences = cnn.predict_batch(&patches)?;
    let map = stack(&proposals, &confidences, img.width(), img.height())?;
    let acm = map.to_gray(cfg.tau_cm, cfg.aggregation);
    Ok(AcmStage {
        regions,
        proposals,
        confidences,
        map,
        acm,
    })
}

pub struct SegStage {
    pub table: RoughTable<f64>,
    pub mask: BinaryMask,
    pub blobs: Vec<Blob>,
}

pub fn seg_stage(acm: &GrayImage, cfg: &RunConfig) -> SegStage {
    let table = rough_entropy_threshold::<f64>(&granulate_with(acm, cfg.granule_side), cfg.roughness);
    let mask = binarize(acm, table.t_star);
    let blobs = extract_blobs(&mask, acm, cfg.min_blob_area);
    SegStage { table, mask, blobs }
}

/// Splits a blob into per-vehicle boxes using the regions that support it.
///
/// A region supports the blob when its box center is a blob pixel, its box
/// lies mostly inside the blob's bbox, and its inflation-1.0 proposal
/// scores at least [`SUPPORT_CONFIDENCE`]. Candidates are taken from the
/// finest pyramid level first, most stable first, then largest; a box
/// overlapping an accepted one by more than [`SUPPORT_OVERLAP`] of the
/// smaller box is skipped. A later candidate that contains two or more
/// accepted boxes and clashes with no other replaces them, which joins a
/// vehicle split along a seam. Without support the blob's own bbox is
/// returned.
pub fn refine_blob(blob: &Blob, width: usize, stage: &AcmStage) -> Vec<Rect> {
    let mut conf = vec![None; stage.regions.len()];
    for (p, &c) in stage.proposals.iter().zip(&stage.confidences) {
        if p.inflation == 1.0 {
            conf[p.region_ref] = Some(c);
        }
    }
    let mut cands: Vec<(u8, f64, Rect)> = Vec::new();
    for (r, c) in stage.regions.iter().zip(&conf) {
        if !c.is_some_and(|c| c >= SUPPORT_CONFIDENCE) {
            continue;
        }
        let b = r.base_bbox;
        let (cx, cy) = b.center();
        if cx < 0 || cy < 0 || cx as usize >= width {
            continue;
        }
        let idx = (cy as usize * width + cx as usize) as u32;
        let inside = b.intersection_area(&blob.bbox) as f64 >= (1.0 - SUPPORT_OVERLAP) * b.area() as f64;
        if inside && blob.pixels.binary_search(&idx).is_ok() {
            cands.push((r.scale_index, r.variation, b));
        }
    }
    cands.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(a.1.total_cmp(&b.1))
            .then(b.2.area().cmp(&a.2.area()))
            .then(a.2.cmp(&b.2))
    });
    let clashes = |out: &[Rect], r: &Rect| {
        out.iter()
            .any(|o| o.intersection_area(r) as f64 > SUPPORT_OVERLAP * r.area().min(o.area()) as f64)
    };
    let mut out: Vec<Rect> = Vec::new();
    for (_, _, r) in &cands {
        if !clashes(&out, r) {
            out.push(*r);
        }
    }
    // a region holding several accepted boxes is one object cut into parts
    let mut by_area: Vec<Rect> = cands.iter().map(|c| c.2).collect();
    by_area.sort_by(|a, b| a.area().cmp(&b.area()).then(a.cmp(b)));
    for c in by_area {
        let inside = |o: &Rect| o.intersection_area(&c) as f64 >= (1.0 - SUPPORT_OVERLAP) * o.area() as f64;
        let (parts, rest): (Vec<Rect>, Vec<Rect>) = out.iter().partition(|o| inside(o));
        if parts.len() >= 2 && !clashes(&rest, &c) {
            out = rest;
            out.push(c);
        }
    }
    if out.is_empty() {
        out.push(blob.bbox);
    }
    out.sort();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRecord {
    pub bbox: Rect,
    pub area: usize,
    pub features: BlobFeatures,
    pub label: SoftLabel,
    /// Detection boxes derived from this blob.
    pub boxes: Vec<Rect>,
}

/// Everything one image produced, in input coordinates.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrameResult {
    pub image: String,
    pub width: usize,
    pub height: usize,
    pub n_regions: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub t_star: Option<u8>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub blobs: Vec<BlobRecord>,
    pub detections: Vec<Detection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Frame result plus the working-resolution ACM for dumps.
pub struct Frame {
    pub result: FrameResult,
    pub acm: Option<GrayImage>,
}

pub struct Detector {
    pub config: RunConfig,
    cnn: Option<CnnModel<f32>>,
    fuzzy: Option<FuzzyModel>,
}

impl Detector {
    /// The ACM mode needs both models; the MSER baselines need neither.
    pub fn new(config: RunConfig, cnn: Option<CnnModel<f32>>, fuzzy: Option<FuzzyModel>) -> Result<Self> {
        config.validate()?;
        if config.proposals == ProposalMode::Acm {
            if cnn.is_none() {
                return Err(Error::Model("the acm detector needs a CNN model".into()));
            }
            match &fuzzy {
                None => return Err(Error::Model("the acm detector needs a fuzzy model".into())),
                Some(f) => f.validate()?,
            }
        }
        Ok(Detector { config, cnn, fuzzy })
    }

    pub fn detect(&self, img: &GrayImage, image_id: &str) -> Result<Frame> {
        let work = Working::new(img, self.config.working_resolution);
        let mut result = FrameResult {
            image: image_id.to_string(),
            width: img.width(),
            height: img.height(),
            ..FrameResult::default()
        };
        let det = |bbox: Rect, score: f64| Detection {
            image_id: image_id.to_string(),
            bbox: work.to_input(&bbox),
            score,
        };
        let (Some(cnn), Some(fuzzy)) = (&self.cnn, &self.fuzzy) else {
            let regions = propose(&work.image, &self.config.mser, self.config.proposals)?;
            result.n_regions = regions.len();
            result.detections = regions
                .iter()
                .map(|r| det(r.base_bbox, (1.0 - r.variation).clamp(0.0, 1.0)))
                .collect();
            return Ok(Frame { result, acm: None });
        };
        if self.config.proposals != ProposalMode::Acm {
            return Detector::new(self.config.clone(), None, None)?.detect(img, image_id);
        }
        let stage = acm_stage(&work.image, cnn, &self.config)?;
        let seg = seg_stage(&stage.acm, &self.config);
        result.n_regions = stage.regions.len();
        result.t_star = Some(seg.table.t_star);
        for blob in &seg.blobs {
            let f = features(blob, &stage.acm)?;
            let label = fuzzy.classify(&f);
            let score = (f.mean_intensity / 255.0 * label.mu_vehicle).clamp(0.0, 1.0);
            let mut boxes = Vec::new();
            for r in refine_blob(blob, work.image.width(), &stage) {
                let d = det(r, score);
                boxes.push(d.bbox);
                result.detections.push(d);
            }
            result.blobs.push(BlobRecord {
                bbox: work.to_input(&blob.bbox),
                area: blob.area,
                features: f,
                label,
                boxes,
            });
        }
        Ok(Frame {
            result,
            acm: Some(stage.acm),
        })
    }
}

/// Images with their annotations, in annotation order.
pub struct Corpus {
    pub images: Vec<GrayImage>,
    pub annotations: Vec<Annotation>,
}

/// Finds the image for `id` under `root`, trying the id as a file name and
/// then with `.png` and `.pgm` appended.
pub fn resolve_image(root: &Path, id: &str) -> PathBuf {
    let direct = root.join(id);
    if direct.is_file() {
        return direct;
    }
    for ext in ["png", "pgm"] {
        let p = root.join(format!("{id}.{ext}"));
        if p.is_file() {
            return p;
        }
    }
    direct
}

impl Corpus {
    /// Loads annotations (JSON lines, or a KITTI label directory) and the
    /// images they name from `image_root`.
    pub fn load(annotations: &Path, image_root: &Path) -> Result<Corpus> {
        let annotations = if annotations.is_dir() {
            load_kitti_labels(annotations)?
        } else {
            load_annotations(annotations)?
        };
        let images = annotations
            .par_iter()
            .map(|a| load_image(resolve_image(image_root, &a.image_id)))
            .collect::<Result<Vec<_>>>()?;
        let annotations = annotations
            .into_iter()
            .zip(&images)
            .map(|(a, img)| a.clamped(img.width(), img.height()))
            .collect();
        Ok(Corpus { images, annotations })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    fn working(&self, i: usize, res: Option<[usize; 2]>) -> (Working, Vec<Rect>) {
        let w = Working::new(&self.images[i], res);
        let gt = self.annotations[i].boxes.iter().map(|b| w.to_working(b)).collect();
        (w, gt)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub image: String,
    pub reason: String,
}

pub struct Mined {
    pub samples: Vec<TrainSample>,
    pub skipped: Vec<Skipped>,
}

/// Mines training patches from every image. Images that yield no positive
/// or no negative are skipped and reported; an error is returned only when
/// nothing could be mined.
pub fn mine_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<Mined> {
    let per_image: Vec<Result<Vec<TrainSample>>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let (work, gt) = corpus.working(i, cfg.working_resolution);
            let regions = propose(&work.image, &cfg.mser, ProposalMode::Acm)?;
            let proposals = make_proposals(&regions, &work.image);
            mine_training_set(&work.image, &corpus.annotations[i].image_id, &proposals, &gt, cfg.mining_seed)
        })
        .collect();
    let mut samples = Vec::new();
    let mut skipped = Vec::new();
    for r in per_image {
        match r {
            Ok(s) => samples.extend(s),
            Err(Error::Mining { image, reason }) => skipped.push(Skipped { image, reason }),
            Err(e) => return Err(e),
        }
    }
    if samples.is_empty() {
        return Err(Error::Training(format!(
            "no training samples could be mined from {} images",
            corpus.len()
        )));
    }
    Ok(Mined { samples, skipped })
}

pub fn train_cnn_corpus(corpus: &Corpus, cfg: &RunConfig) -> Result<(CnnModel<f32>, Mined)> {
    cfg.validate()?;
    let mined = mine_corpus(corpus, cfg)?;
    let model = CnnModel::<f32>::new(cfg.plan.clone(), cfg.train.seed)?;
    let model = train(&model, &mined.samples, &cfg.train)?;
    Ok((model, mined))
}

/// Labelled blob features for the fuzzy classifier.
///
/// A segmented blob is a vehicle when it contains the center of a
/// ground-truth box, otherwise background. A well-trained CNN leaves few
/// background blobs, so when there are fewer than
/// [`MIN_SAMPLES_PER_CLASS`] of them the background class is topped up
/// with the ACM under every proposal square that misses all ground truth.
pub fn fuzzy_samples(corpus: &Corpus, cnn: &CnnModel<f32>, cfg: &RunConfig) -> Result<Vec<(BlobFeatures, Label)>> {
    type PerImage = (Vec<(BlobFeatures, Label)>, Vec<(BlobFeatures, Label)>);
    let per_image: Vec<Result<PerImage>> = (0..corpus.len())
        .into_par_iter()
        .map(|i| {
            let (work, gt) = corpus.working(i, cfg.working_resolution);
            let stage = acm_stage(&work.image, cnn, cfg)?;
            let seg = seg_stage(&stage.acm, cfg);
            let mut blobs = Vec::with_capacity(seg.blobs.len());
            for b in &seg.blobs {
                let hit = gt.iter().any(|g| {
                    let (cx, cy) = g.center();
                    b.bbox.contains_point(cx, cy)
                });
                let label = if hit { Label::Vehicle } else { Label::Background };
                blobs.push((features(b, &stage.acm)?, label));
            }
            let (w, h) = (work.image.width(), work.image.height());
            let mut extra = Vec::new();
            for p in stage.proposals.iter().filter(|p| p.inflation == 1.0) {
                let sq = p.base_rect();
                if gt.iter().any(|g| sq.intersection_area(g) > 0) {
                    continue;
                }
                let Some(c) = sq.clip(w, h) else { continue };
                let pixels = (c.y..c.bottom())
                    .flat_map(|y| (c.x..c.right()).map(move |x| (y as usize * w + x as usize) as u32))
                    .collect();
                extra.push((features(&blob_from_pixels(pixels, &stage.acm), &stage.acm)?, Label::Background));
            }
            Ok((blobs, extra))
        })
        .collect();
    let mut out = Vec::new();
    let mut extra = Vec::new();
    for r in per_image {
        let (b, e) = r?;
        out.extend(b);
        extra.extend(e);
    }
    if out.iter().filter(|s| s.1 == Label::Background).count() < MIN_SAMPLES_PER_CLASS {
        out.extend(extra);
    }
    Ok(out)
}

pub fn train_fuzzy_corpus(corpus: &Corpus, cnn: &CnnModel<f32>, cfg: &RunConfig) -> Result<FuzzyModel> {
    train_fuzzy(&fuzzy_samples(corpus, cnn, cfg)?, cfg.feature_set)
}

/// Runs the detector over a corpus in parallel; results keep corpus order.
pub fn detect_corpus(det: &Detector, corpus: &Corpus) -> Result<Vec<FrameResult>> {
    (0..corpus.len())
        .into_par_iter()
        .map(|i| Ok(det.detect(&corpus.images[i], &corpus.annotations[i].image_id)?.result))
        .collect()
}
