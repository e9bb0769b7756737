//! Datasets, synthetic scenes, detection matching, AP and throughput.

mod dataset;
mod synth;
mod timing;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{iou, Rect};

pub use dataset::{
    annotations_from_jsonl, annotations_to_jsonl, load_annotations, load_kitti_labels, parse_kitti, Annotation,
    KITTI_VEHICLE_TYPES,
};
pub use synth::{gen_synthetic, save_corpus, scene_id, SynthScene, SynthSpec, Tier, ANNOTATIONS_FILE};
pub use timing::{fps_from, measure_fps, HardwareInfo, Throughput, WARMUP_FRAMES};

pub const DEFAULT_IOU: f64 = 0.7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "image")]
    pub image_id: String,
    pub bbox: Rect,
    pub score: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Ranking order: score descending, then bbox `(x, y, w, h)` ascending.
fn rank_cmp(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(std::cmp::Ordering::Equal)
        .then(a.bbox.cmp(&b.bbox))
        .then(a.image_id.cmp(&b.image_id))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// TP flag per detection, in the input order.
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

/// Greedy matching on one image. Detections are visited by rank; each takes
/// the unmatched gt with the highest IoU if that IoU is at least
/// `iou_thresh`.
pub fn match_detections(dets: &[Detection], gts: &[Rect], iou_thresh: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| rank_cmp(&dets[a], &dets[b]));
    let mut used = vec![false; gts.len()];
    let mut tp = vec![false; dets.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if used[g] {
                continue;
            }
            let v = iou(&dets[i].bbox, gt);
            if v >= iou_thresh && best.is_none_or(|(_, b)| v > b) {
                best = Some((g, v));
            }
        }
        if let Some((g, _)) = best {
            used[g] = true;
            tp[i] = true;
        }
    }
    MatchResult {
        tp,
        false_negatives: used.iter().filter(|u| !**u).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub iou_thresh: f64,
    pub interpolation: Interpolation,
    /// `(recall, precision)` after each ranked detection.
    pub pr_points: Vec<(f64, f64)>,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_count: usize,
    pub n_gt: usize,
    pub n_images: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<Throughput>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<serde_json::Value>,
}

impl EvalReport {
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>10}", "metric", "value");
        let _ = writeln!(s, "{:<12} {:>10.4}", format!("AP@{}", self.iou_thresh), self.ap);
        for (k, v) in [("TP", self.tp), ("FP", self.fp), ("FN", self.fn_count), ("GT", self.n_gt), ("images", self.n_images)] {
            let _ = writeln!(s, "{k:<12} {v:>10}");
        }
        if let Some(t) = &self.throughput {
            let _ = writeln!(s, "{:<12} {:>10.2}", "FPS", t.fps);
        }
        s
    }
}

/// Area under the precision envelope from ranked TP flags.
pub fn ap_from_flags(flags: &[bool], n_gt: usize, interp: Interpolation) -> (f64, Vec<(f64, f64)>) {
    let mut tp = 0usize;
    let pts: Vec<(f64, f64)> = flags
        .iter()
        .enumerate()
        .map(|(i, &f)| {
            tp += usize::from(f);
            (tp as f64 / n_gt as f64, tp as f64 / (i + 1) as f64)
        })
        .collect();
    // envelope: max precision at this or any later rank
    let mut env = vec![0.0f64; pts.len()];
    let mut run = 0.0f64;
    for i in (0..pts.len()).rev() {
        run = run.max(pts[i].1);
        env[i] = run;
    }
    let ap = match interp {
        Interpolation::AllPoint => {
            let mut prev = 0.0;
            let mut ap = 0.0;
            for (i, &(r, _)) in pts.iter().enumerate() {
                if r > prev {
                    ap += (r - prev) * env[i];
                    prev = r;
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|k| {
                    let r = k as f64 / 10.0;
                    pts.iter()
                        .zip(&env)
                        .find(|((rec, _), _)| *rec >= r - 1e-12)
                        .map_or(0.0, |(_, &e)| e)
                })
                .sum::<f64>()
                / 11.0
        }
    };
    (ap, pts)
}

/// Corpus-level AP: per-image greedy matching, then one global ranking.
pub fn average_precision(
    dets: &[Detection],
    gts: &[Annotation],
    iou_thresh: f64,
    interp: Interpolation,
) -> Result<EvalReport> {
    let mut by_image: BTreeMap<&str, (Vec<&Detection>, &[Rect])> = BTreeMap::new();
    for a in gts {
        if by_image.insert(&a.image_id, (Vec::new(), &a.boxes)).is_some() {
            return Err(Error::Evaluation(format!("duplicate annotation for image {}", a.image_id)));
        }
    }
    let mut unknown = BTreeSet::new();
    for d in dets {
        match by_image.get_mut(d.image_id.as_str()) {
            Some(e) => e.0.push(d),
            None => {
                unknown.insert(d.image_id.clone());
            }
        }
    }
    if !unknown.is_empty() {
        return Err(Error::Evaluation(format!(
            "detections for images without annotations: {}",
            unknown.into_iter().collect::<Vec<_>>().join(", ")
        )));
    }
    let n_gt: usize = gts.iter().map(|a| a.boxes.len()).sum();
    if n_gt == 0 {
        return Err(Error::Evaluation("AP is undefined without ground-truth boxes".into()));
    }
    let mut ranked: Vec<(Detection, bool)> = Vec::with_capacity(dets.len());
    let mut fn_count = 0;
    for (dets_i, boxes) in by_image.values() {
        let owned: Vec<Detection> = dets_i.iter().map(|d| (*d).clone()).collect();
        let m = match_detections(&owned, boxes, iou_thresh);
        fn_count += m.false_negatives;
        ranked.extend(owned.into_iter().zip(m.tp));
    }
    ranked.sort_by(|a, b| rank_cmp(&a.0, &b.0));
    let flags: Vec<bool> = ranked.iter().map(|r| r.1).collect();
    let tp = flags.iter().filter(|f| **f).count();
    let (ap, pr_points) = ap_from_flags(&flags, n_gt, interp);
    Ok(EvalReport {
        ap,
        iou_thresh,
        interpolation: interp,
        pr_points,
        tp,
        fp: flags.len() - tp,
        fn_count,
        n_gt,
        n_images: gts.len(),
        throughput: None,
        config: None,
    })
}

pub fn detections_to_jsonl(dets: &[Detection]) -> Result<String> {
    let mut s = String::new();
    for d in dets {
        s.push_str(&serde_json::to_string(d)?);
        s.push('\n');
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn det(id: &str, b: Rect, s: f64) -> Detection {
        Detection { image_id: id.into(), bbox: b, score: s }
    }

    fn ann(id: &str, boxes: Vec<Rect>) -> Annotation {
        Annotation { image_id: id.into(), boxes }
    }

    #[test]
    fn single_match() {
        let g = Rect::new(0, 0, 10, 10);
        let d = det("a", Rect::new(0, 0, 10, 8), 0.9);
        let m = match_detections(&[d], &[g], 0.7);
        assert_eq!((m.tp, m.false_negatives), (vec![true], 0));
    }

    #[test]
    fn one_gt_two_dets() {
        let g = Rect::new(0, 0, 100, 100);
        let hi = det("a", Rect::new(0, 0, 100, 90), 0.9);
        let lo = det("a", Rect::new(0, 0, 100, 80), 0.5);
        let m = match_detections(&[lo, hi], &[g], 0.7);
        assert_eq!(m.tp, vec![false, true]);
    }

    #[test]
    fn hand_pr_example() {
        let g1 = Rect::new(0, 0, 10, 10);
        let g2 = Rect::new(50, 50, 10, 10);
        let dets = [
            det("a", g1, 0.9),
            det("a", Rect::new(200, 200, 10, 10), 0.8),
            det("a", g2, 0.7),
        ];
        let r = average_precision(&dets, &[ann("a", vec![g1, g2])], 0.7, Interpolation::AllPoint).unwrap();
        assert!((r.ap - (0.5 + 2.0 / 3.0 * 0.5)).abs() < 1e-12);
        assert_eq!((r.tp, r.fp, r.fn_count), (2, 1, 0));
    }

    #[test]
    fn perfect_and_empty() {
        let g = vec![Rect::new(0, 0, 10, 10), Rect::new(20, 20, 5, 5)];
        let dets: Vec<Detection> = g.iter().map(|b| det("a", *b, 1.0)).collect();
        let anns = [ann("a", g)];
        assert_eq!(average_precision(&dets, &anns, 0.7, Interpolation::AllPoint).unwrap().ap, 1.0);
        assert_eq!(average_precision(&dets, &anns, 0.7, Interpolation::ElevenPoint).unwrap().ap, 1.0);
        let r = average_precision(&[], &anns, 0.7, Interpolation::AllPoint).unwrap();
        assert_eq!((r.ap, r.fn_count), (0.0, 2));
    }

    #[test]
    fn errors() {
        assert!(matches!(
            average_precision(&[], &[ann("a", vec![])], 0.7, Interpolation::AllPoint),
            Err(Error::Evaluation(_))
        ));
        let e = average_precision(
            &[det("zzz", Rect::new(0, 0, 1, 1), 0.5)],
            &[ann("a", vec![Rect::new(0, 0, 1, 1)])],
            0.7,
            Interpolation::AllPoint,
        )
        .unwrap_err();
        assert!(e.to_string().contains("zzz"));
    }

    #[test]
    fn eleven_point() {
        // TP, FP, TP over 2 gts: recall 0.5 at p=1, recall 1 at p=2/3
        let (ap, _) = ap_from_flags(&[true, false, true], 2, Interpolation::ElevenPoint);
        assert!((ap - (6.0 * 1.0 + 5.0 * 2.0 / 3.0) / 11.0).abs() < 1e-12);
    }

    #[test]
    fn tie_break_by_bbox() {
        let g = Rect::new(0, 0, 10, 10);
        let a = det("a", Rect::new(1, 0, 10, 10), 0.5);
        let b = det("a", Rect::new(0, 1, 10, 10), 0.5);
        // equal score and equal IoU: the lexicographically smaller box wins
        let m = match_detections(&[a, b], &[g], 0.7);
        assert_eq!(m.tp, vec![false, true]);
    }

    fn arb_corpus() -> impl Strategy<Value = (Vec<Detection>, Vec<Annotation>)> {
        let rect = (0i32..60, 0i32..60, 4i32..20, 4i32..20).prop_map(|(x, y, w, h)| Rect::new(x, y, w, h));
        (
            prop::collection::vec((0usize..3, rect.clone(), 0.0f64..1.0), 0..15),
            prop::collection::vec(prop::collection::vec(rect, 0..4), 3),
        )
            .prop_map(|(d, g)| {
                let anns: Vec<Annotation> =
                    g.into_iter().enumerate().map(|(i, b)| ann(&format!("i{i}"), b)).collect();
                let dets = d.into_iter().map(|(i, b, s)| det(&format!("i{i}"), b, s)).collect();
                (dets, anns)
            })
    }

    proptest! {
        #[test]
        fn counts_and_monotone_invariance((dets, anns) in arb_corpus()) {
            let n_gt: usize = anns.iter().map(|a| a.boxes.len()).sum();
            prop_assume!(n_gt > 0);
            let r = average_precision(&dets, &anns, 0.5, Interpolation::AllPoint).unwrap();
            prop_assert_eq!(r.tp + r.fp, dets.len());
            prop_assert_eq!(r.tp + r.fn_count, n_gt);
            prop_assert!((0.0..=1.0).contains(&r.ap));
            let warped: Vec<Detection> = dets.iter().map(|d| Detection { score: (3.0 * d.score).exp() + 1.0, ..d.clone() }).collect();
            let r2 = average_precision(&warped, &anns, 0.5, Interpolation::AllPoint).unwrap();
            prop_assert_eq!(r.ap, r2.ap);
        }

        #[test]
        fn removing_fp_never_hurts((dets, anns) in arb_corpus()) {
            let n_gt: usize = anns.iter().map(|a| a.boxes.len()).sum();
            prop_assume!(n_gt > 0);
            let r = average_precision(&dets, &anns, 0.5, Interpolation::AllPoint).unwrap();
            // find an FP by re-running matching per image
            let mut fp_idx = None;
            for a in &anns {
                let idx: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].image_id == a.image_id).collect();
                let sub: Vec<Detection> = idx.iter().map(|&i| dets[i].clone()).collect();
                let m = match_detections(&sub, &a.boxes, 0.5);
                if let Some(k) = m.tp.iter().position(|t| !t) {
                    fp_idx = Some(idx[k]);
                    break;
                }
            }
            if let Some(i) = fp_idx {
                let mut fewer = dets.clone();
                fewer.remove(i);
                let r2 = average_precision(&fewer, &anns, 0.5, Interpolation::AllPoint).unwrap();
                prop_assert!(r2.ap >= r.ap - 1e-12);
            }
        }
    }
}
