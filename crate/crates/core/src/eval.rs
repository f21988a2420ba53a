//! VOC-style detection evaluation: matching, precision/recall curves,
//! 11-point and area average precision, and mAP.

use std::cmp::Ordering;
use std::collections::{HashMap, HashSet};

use rayon::prelude::*;

use crate::dataset::{Dataset, ScoreTable};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::nms::{run_nms, NmsCandidate, NmsConfig, NmsOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApVariant {
    /// Mean of the interpolated precision sampled at recall 0, 0.1, ..., 1.
    Voc2007,
    /// Exact area under the interpolated curve.
    #[default]
    Voc2012,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub match_iou: f64,
    pub ap_variant: ApVariant,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { match_iou: 0.5, ap_variant: ApVariant::Voc2012 }
    }
}

impl EvalConfig {
    pub fn check(&self) -> Result<()> {
        if self.match_iou > 0.0 && self.match_iou < 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!("match IoU must lie in (0, 1), got {}", self.match_iou)))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectionKind {
    TruePositive,
    FalsePositive,
}

impl DetectionKind {
    pub fn is_tp(self) -> bool {
        self == DetectionKind::TruePositive
    }
}

/// A post-NMS detection of one class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassDetection {
    pub image: usize,
    pub window: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassGroundTruth {
    /// Index into [`Dataset::ground_truth`] (or any caller-chosen id).
    pub id: usize,
    pub image: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionLabel {
    pub image: usize,
    pub window: usize,
    pub score: f64,
    pub kind: DetectionKind,
    /// Ground truth this detection was mapped to, if any. Only the
    /// highest-scored detection mapped to a ground truth is a true positive.
    pub matched_gt: Option<usize>,
}

/// Global detection order: decreasing score, then (image, window) ascending.
pub fn detection_order(a: &ClassDetection, b: &ClassDetection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.image.cmp(&b.image))
        .then(a.window.cmp(&b.window))
}

pub fn sort_detections(dets: &mut [ClassDetection]) {
    dets.sort_by(detection_order);
}

/// Maps every detection to its most-overlapping ground truth in the same
/// image (if the IoU exceeds `match_iou`); the highest-scored detection
/// mapped to each ground truth is a true positive, everything else a false
/// positive. `dets` must already be in [`detection_order`].
pub fn match_detections(
    dets: &[ClassDetection],
    gts: &[ClassGroundTruth],
    cfg: &EvalConfig,
) -> Vec<DetectionLabel> {
    debug_assert!(dets.windows(2).all(|w| detection_order(&w[0], &w[1]) != Ordering::Greater));
    let mut by_image: HashMap<usize, Vec<&ClassGroundTruth>> = HashMap::new();
    for g in gts {
        by_image.entry(g.image).or_default().push(g);
    }
    let mut claimed = HashSet::new();
    dets.iter()
        .map(|d| {
            let mut best: Option<(f64, usize)> = None;
            for g in by_image.get(&d.image).into_iter().flatten() {
                let o = d.bbox.iou_unchecked(&g.bbox);
                if best.is_none_or(|(b, _)| o > b) {
                    best = Some((o, g.id));
                }
            }
            let matched_gt = best.filter(|&(o, _)| o > cfg.match_iou).map(|(_, id)| id);
            let kind = match matched_gt {
                Some(id) if claimed.insert(id) => DetectionKind::TruePositive,
                _ => DetectionKind::FalsePositive,
            };
            DetectionLabel { image: d.image, window: d.window, score: d.score, kind, matched_gt }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
}

/// Recall and precision after each detection, in decreasing score order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_gt: usize,
}

pub fn build_pr_curve(labels: &[DetectionLabel], n_gt: usize) -> Result<PrCurve> {
    if n_gt == 0 {
        return Err(Error::UndefinedAp);
    }
    let mut tp = 0usize;
    let points = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            if l.kind.is_tp() {
                tp += 1;
            }
            PrPoint { recall: tp as f64 / n_gt as f64, precision: tp as f64 / (i + 1) as f64 }
        })
        .collect();
    Ok(PrCurve { points, n_gt })
}

impl PrCurve {
    /// Replaces each precision by the maximum precision at the same or any
    /// later point.
    pub fn interpolate(&self) -> PrCurve {
        let mut points = self.points.clone();
        let mut run = f64::NEG_INFINITY;
        for p in points.iter_mut().rev() {
            run = run.max(p.precision);
            p.precision = run;
        }
        PrCurve { points, n_gt: self.n_gt }
    }

    pub fn average_precision(&self, variant: ApVariant) -> Result<f64> {
        if self.n_gt == 0 {
            return Err(Error::UndefinedAp);
        }
        let interp = self.interpolate();
        Ok(match variant {
            ApVariant::Voc2012 => {
                let mut prev = 0.0;
                let mut area = 0.0;
                for p in &interp.points {
                    if p.recall > prev {
                        area += (p.recall - prev) * p.precision;
                        prev = p.recall;
                    }
                }
                area
            }
            ApVariant::Voc2007 => {
                let mut sum = 0.0;
                for t in 0..=10 {
                    let threshold = t as f64 / 10.0;
                    // recall is non-decreasing; the interpolated precision at the
                    // first qualifying point is the max over all of them
                    let first = interp.points.partition_point(|p| p.recall < threshold);
                    sum += interp.points.get(first).map_or(0.0, |p| p.precision);
                }
                sum / 11.0
            }
        })
    }
}

pub fn interpolate(pr: &PrCurve) -> PrCurve {
    pr.interpolate()
}

pub fn average_precision(pr: &PrCurve, cfg: &EvalConfig) -> Result<f64> {
    pr.average_precision(cfg.ap_variant)
}

/// Full evaluation of one class: per-image NMS, pooled matching, AP.
#[derive(Debug, Clone)]
pub struct ClassEvaluation {
    pub class: usize,
    /// One outcome per image.
    pub nms: Vec<NmsOutcome>,
    /// Retained detections in global order.
    pub detections: Vec<ClassDetection>,
    pub labels: Vec<DetectionLabel>,
    pub ground_truth: Vec<ClassGroundTruth>,
    pub curve: PrCurve,
    pub ap: f64,
}

pub fn class_ground_truth(dataset: &Dataset, class: usize) -> Vec<ClassGroundTruth> {
    dataset
        .ground_truth
        .iter()
        .enumerate()
        .filter(|(_, g)| g.class == class)
        .map(|(id, g)| ClassGroundTruth { id, image: g.image, bbox: g.bbox })
        .collect()
}

pub fn nms_candidates(dataset: &Dataset, scores: &ScoreTable, image: usize, class: usize) -> Vec<NmsCandidate> {
    dataset.images[image]
        .proposals
        .iter()
        .enumerate()
        .map(|(w, p)| NmsCandidate { window: w, bbox: p.bbox, score: scores.get(image, w, class) })
        .collect()
}

/// Evaluates one class; `None` when the class has no ground truth.
pub fn evaluate_class(
    dataset: &Dataset,
    scores: &ScoreTable,
    class: usize,
    nms_cfg: &NmsConfig,
    eval_cfg: &EvalConfig,
) -> Option<ClassEvaluation> {
    let ground_truth = class_ground_truth(dataset, class);
    if ground_truth.is_empty() {
        return None;
    }
    let mut nms = Vec::with_capacity(dataset.images.len());
    let mut detections = Vec::new();
    for image in 0..dataset.images.len() {
        let outcome = run_nms(&nms_candidates(dataset, scores, image, class), nms_cfg);
        detections.extend(outcome.retained.iter().map(|&w| ClassDetection {
            image,
            window: w,
            score: scores.get(image, w, class),
            bbox: dataset.images[image].proposals[w].bbox,
        }));
        nms.push(outcome);
    }
    sort_detections(&mut detections);
    let labels = match_detections(&detections, &ground_truth, eval_cfg);
    let curve = build_pr_curve(&labels, ground_truth.len()).expect("class has ground truth");
    let ap = curve.average_precision(eval_cfg.ap_variant).expect("class has ground truth");
    Some(ClassEvaluation { class, nms, detections, labels, ground_truth, curve, ap })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without ground truth; those are excluded from the mean.
    pub per_class: Vec<Option<f64>>,
}

pub(crate) fn mean_of_present(per_class: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Evaluates every class and returns mAP over the classes that have
/// ground truth.
pub fn evaluate_all(
    scores: &ScoreTable,
    dataset: &Dataset,
    nms_cfg: &NmsConfig,
    eval_cfg: &EvalConfig,
) -> Result<Vec<Option<ClassEvaluation>>> {
    if !scores.matches(dataset) {
        return Err(Error::Input("score table does not match the dataset".into()));
    }
    nms_cfg.check()?;
    eval_cfg.check()?;
    Ok((0..dataset.num_classes)
        .into_par_iter()
        .map(|c| evaluate_class(dataset, scores, c, nms_cfg, eval_cfg))
        .collect())
}

pub fn mean_ap(
    scores: &ScoreTable,
    dataset: &Dataset,
    nms_cfg: &NmsConfig,
    eval_cfg: &EvalConfig,
) -> Result<MapResult> {
    let per_class: Vec<Option<f64>> = evaluate_all(scores, dataset, nms_cfg, eval_cfg)?
        .into_iter()
        .map(|e| e.map(|e| e.ap))
        .collect();
    Ok(MapResult { map: mean_of_present(&per_class)?, per_class })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataset::tests::bx;
    use DetectionKind::{FalsePositive as FP, TruePositive as TP};

    pub(crate) fn labels_from(kinds: &[DetectionKind]) -> Vec<DetectionLabel> {
        let n = kinds.len();
        kinds
            .iter()
            .enumerate()
            .map(|(i, &kind)| DetectionLabel {
                image: 0,
                window: i,
                score: (n - i) as f64 / 10.0,
                kind,
                matched_gt: kind.is_tp().then_some(i),
            })
            .collect()
    }

    fn pts(v: &[(f64, f64)]) -> Vec<PrPoint> {
        v.iter().map(|&(recall, precision)| PrPoint { recall, precision }).collect()
    }

    fn det(window: usize, score: f64, b: BoundingBox) -> ClassDetection {
        ClassDetection { image: 0, window, score, bbox: b }
    }

    #[test]
    fn duplicate_detections_of_one_gt() {
        let gt = [ClassGroundTruth { id: 0, image: 0, bbox: bx(0., 0., 10., 10.) }];
        let dets = [det(0, 0.9, bx(0., 0., 10., 9.)), det(1, 0.8, bx(0., 0., 10., 10.))];
        let l = match_detections(&dets, &gt, &EvalConfig::default());
        assert_eq!(l[0].kind, TP);
        assert_eq!(l[1].kind, FP);
        assert_eq!(l[1].matched_gt, Some(0));
    }

    #[test]
    fn low_overlap_is_false_positive() {
        let gt = [ClassGroundTruth { id: 0, image: 0, bbox: bx(0., 0., 10., 10.) }];
        // IoU 0.4
        let dets = [det(0, 0.9, bx(0., 0., 4., 10.))];
        let l = match_detections(&dets, &gt, &EvalConfig::default());
        assert_eq!(l[0].kind, FP);
        assert_eq!(l[0].matched_gt, None);
        assert!(match_detections(&[], &gt, &EvalConfig::default()).is_empty());
    }

    #[test]
    fn detections_match_only_within_their_image() {
        let gt = [ClassGroundTruth { id: 0, image: 1, bbox: bx(0., 0., 10., 10.) }];
        let dets = [det(0, 0.9, bx(0., 0., 10., 10.))];
        assert_eq!(match_detections(&dets, &gt, &EvalConfig::default())[0].kind, FP);
    }

    #[test]
    fn pr_curves() {
        assert_eq!(build_pr_curve(&labels_from(&[TP]), 1).unwrap().points, pts(&[(1.0, 1.0)]));
        let c = build_pr_curve(&labels_from(&[TP, FP, TP]), 2).unwrap();
        assert_eq!(c.points, pts(&[(0.5, 1.0), (0.5, 0.5), (1.0, 2.0 / 3.0)]));
        assert_eq!(build_pr_curve(&labels_from(&[FP]), 1).unwrap().points, pts(&[(0.0, 0.0)]));
        assert!(matches!(build_pr_curve(&labels_from(&[FP]), 0), Err(Error::UndefinedAp)));
    }

    #[test]
    fn interpolation() {
        let c = build_pr_curve(&labels_from(&[TP, FP, TP]), 2).unwrap();
        assert_eq!(c.interpolate().points, pts(&[(0.5, 1.0), (0.5, 2.0 / 3.0), (1.0, 2.0 / 3.0)]));
        let mono = build_pr_curve(&labels_from(&[TP, TP, FP]), 3).unwrap();
        assert_eq!(mono.interpolate(), mono);
        let empty = PrCurve { points: vec![], n_gt: 1 };
        assert_eq!(empty.interpolate(), empty);
    }

    #[test]
    fn worked_average_precision() {
        let c = build_pr_curve(&labels_from(&[TP, FP, TP]), 2).unwrap();
        assert!((c.average_precision(ApVariant::Voc2012).unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((c.average_precision(ApVariant::Voc2007).unwrap() - 28.0 / 33.0).abs() < 1e-12);
        let perfect = build_pr_curve(&labels_from(&[TP, TP, FP, FP]), 2).unwrap();
        for v in [ApVariant::Voc2007, ApVariant::Voc2012] {
            assert_eq!(perfect.average_precision(v).unwrap(), 1.0);
        }
        let none = build_pr_curve(&labels_from(&[FP, FP]), 2).unwrap();
        assert_eq!(none.average_precision(ApVariant::Voc2007).unwrap(), 0.0);
        assert_eq!(none.average_precision(ApVariant::Voc2012).unwrap(), 0.0);
    }

    #[test]
    fn trailing_false_positive_never_raises_area_ap() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let mut kinds: Vec<_> = (0..n).map(|_| if rng.gen_bool(0.4) { TP } else { FP }).collect();
            let tps = kinds.iter().filter(|k| k.is_tp()).count();
            let n_gt = tps + rng.gen_range(0..3usize).max(usize::from(tps == 0));
            let before = build_pr_curve(&labels_from(&kinds), n_gt).unwrap().average_precision(ApVariant::Voc2012).unwrap();
            kinds.push(FP);
            let after = build_pr_curve(&labels_from(&kinds), n_gt).unwrap().average_precision(ApVariant::Voc2012).unwrap();
            assert!(after <= before);
            let interp = build_pr_curve(&labels_from(&kinds), n_gt).unwrap().interpolate();
            assert!(interp.points.windows(2).all(|w| w[0].precision >= w[1].precision));
        }
    }

    #[test]
    fn mean_ap_excludes_classes_without_ground_truth() {
        assert!((mean_of_present(&[Some(0.5), None, Some(1.0)]).unwrap() - 0.75).abs() < 1e-15);
        assert!(matches!(mean_of_present(&[None, None]), Err(Error::NoGroundTruth)));
    }
}
