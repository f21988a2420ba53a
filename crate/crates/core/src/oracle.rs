//! Brute-force reference implementations.
//!
//! Nothing here reuses the NMS, matching, AP or step-finding code of the
//! fast path; only the dataset types and box geometry are shared. Everything
//! is quadratic or worse and meant for small instances.

use std::cmp::Ordering;

use crate::dataset::{Dataset, ScoreTable};
use crate::error::{Error, Result};
use crate::eval::{ApVariant, EvalConfig};
use crate::geometry::BoundingBox;
use crate::loss::ScoreStep;
use crate::nms::NmsConfig;

/// Two AP values closer than this count as the same plateau.
pub const AP_CHANGE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleDetection {
    pub image: usize,
    pub window: usize,
    pub score: f64,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleGroundTruth {
    pub image: usize,
    pub bbox: BoundingBox,
}

fn overlap(a: &BoundingBox, b: &BoundingBox) -> f64 {
    crate::geometry::iou(a, b).expect("dataset boxes are valid")
}

fn rank_order(a: &OracleDetection, b: &OracleDetection) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then(a.image.cmp(&b.image))
        .then(a.window.cmp(&b.window))
}

/// AP computed straight from the definitions.
pub fn oracle_ap(dets: &[OracleDetection], gts: &[OracleGroundTruth], cfg: &EvalConfig) -> Result<f64> {
    if gts.is_empty() {
        return Err(Error::UndefinedAp);
    }
    let mut dets = dets.to_vec();
    dets.sort_by(rank_order);

    // target ground truth of every detection
    let target: Vec<Option<usize>> = dets
        .iter()
        .map(|d| {
            let mut best = None;
            let mut best_iou = 0.0;
            for (g, gt) in gts.iter().enumerate() {
                if gt.image != d.image {
                    continue;
                }
                let o = overlap(&d.bbox, &gt.bbox);
                if best.is_none() || o > best_iou {
                    best = Some(g);
                    best_iou = o;
                }
            }
            best.filter(|_| best_iou > cfg.match_iou)
        })
        .collect();
    // a detection is a true positive iff no earlier detection has its target
    let is_tp: Vec<bool> = (0..dets.len())
        .map(|i| target[i].is_some() && (0..i).all(|j| target[j] != target[i]))
        .collect();

    let n = dets.len();
    let mut recall = vec![0.0; n];
    let mut precision = vec![0.0; n];
    for i in 0..n {
        let tp = is_tp[..=i].iter().filter(|&&t| t).count();
        recall[i] = tp as f64 / gts.len() as f64;
        precision[i] = tp as f64 / (i + 1) as f64;
    }
    let interp: Vec<f64> = (0..n)
        .map(|i| precision[i..].iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();

    Ok(match cfg.ap_variant {
        ApVariant::Voc2012 => {
            let mut area = 0.0;
            let mut prev = 0.0;
            for i in 0..n {
                if recall[i] > prev {
                    area += (recall[i] - prev) * interp[i];
                    prev = recall[i];
                }
            }
            area
        }
        ApVariant::Voc2007 => {
            let mut sum = 0.0;
            for t in 0..=10 {
                let level = t as f64 / 10.0;
                sum += (0..n).find(|&i| recall[i] >= level).map_or(0.0, |i| interp[i]);
            }
            sum / 11.0
        }
    })
}

/// Windows of one image surviving greedy suppression, by window index.
pub fn oracle_nms(boxes: &[BoundingBox], scores: &[f64], cfg: &NmsConfig) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for w in order {
        if kept.iter().all(|&k| overlap(&boxes[k], &boxes[w]) <= cfg.overlap_threshold) {
            kept.push(w);
        }
    }
    kept.sort_unstable();
    kept
}

/// Class AP through the whole NMS, matching and AP pipeline, with the score
/// of one window optionally overridden. `None` for classes without ground
/// truth.
fn pipeline_ap(
    dataset: &Dataset,
    scores: &ScoreTable,
    class: usize,
    override_score: Option<(usize, usize, f64)>,
    nms: &NmsConfig,
    eval: &EvalConfig,
) -> Option<f64> {
    let gts: Vec<OracleGroundTruth> = dataset
        .ground_truth
        .iter()
        .filter(|g| g.class == class)
        .map(|g| OracleGroundTruth { image: g.image, bbox: g.bbox })
        .collect();
    if gts.is_empty() {
        return None;
    }
    let mut dets = Vec::new();
    for (i, image) in dataset.images.iter().enumerate() {
        let boxes: Vec<BoundingBox> = image.proposals.iter().map(|p| p.bbox).collect();
        let s: Vec<f64> = (0..boxes.len())
            .map(|w| match override_score {
                Some((oi, ow, v)) if oi == i && ow == w => v,
                _ => scores.get(i, w, class),
            })
            .collect();
        for w in oracle_nms(&boxes, &s, nms) {
            dets.push(OracleDetection { image: i, window: w, score: s[w], bbox: boxes[w] });
        }
    }
    Some(oracle_ap(&dets, &gts, eval).expect("ground truth is present"))
}

pub fn oracle_class_ap(
    dataset: &Dataset,
    scores: &ScoreTable,
    class: usize,
    nms: &NmsConfig,
    eval: &EvalConfig,
) -> Option<f64> {
    pipeline_ap(dataset, scores, class, None, nms, eval)
}

/// Mean over classes that have ground truth.
pub fn oracle_map(dataset: &Dataset, scores: &ScoreTable, nms: &NmsConfig, eval: &EvalConfig) -> Result<f64> {
    let aps: Vec<f64> =
        (0..dataset.num_classes).filter_map(|c| oracle_class_ap(dataset, scores, c, nms, eval)).collect();
    if aps.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    Ok(aps.iter().sum::<f64>() / aps.len() as f64)
}

/// Nearest full-pipeline AP changes on either side of one window's score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleStepResult {
    pub ap: f64,
    /// Score just above which AP first changes, and the AP past it.
    pub plus: Option<ScoreStep>,
    /// Score just below which AP first changes, and the AP past it.
    pub minus: Option<ScoreStep>,
}

/// Scans the score of window `window` of image `image` for class `class`
/// outward from its current value. AP can only change where the window's
/// score crosses another score of the class, so probing once between each
/// pair of adjacent distinct scores (and once past the extremes) is exact.
pub fn oracle_steps(
    dataset: &Dataset,
    scores: &ScoreTable,
    image: usize,
    window: usize,
    class: usize,
    nms: &NmsConfig,
    eval: &EvalConfig,
) -> Option<OracleStepResult> {
    let ap = oracle_class_ap(dataset, scores, class, nms, eval)?;
    let s = scores.get(image, window, class);
    let mut others: Vec<f64> = scores
        .iter()
        .filter(|&(i, w, c, _)| c == class && (i, w) != (image, window))
        .map(|(_, _, _, v)| v)
        .collect();
    others.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    others.dedup();

    let probe = |v: f64| pipeline_ap(dataset, scores, class, Some((image, window, v)), nms, eval).expect("class has ground truth");
    let changed = |v: f64| (v - ap).abs() > AP_CHANGE_TOLERANCE;

    let above = others.partition_point(|&u| u <= s);
    let mut plus = None;
    for k in above..others.len() {
        let u = others[k];
        let next = others.get(k + 1).copied().unwrap_or(u + 1.0);
        let v = probe(0.5 * (u + next));
        if changed(v) {
            plus = Some(ScoreStep { position: u, ap: v });
            break;
        }
    }
    let below = others.partition_point(|&u| u < s);
    let mut minus = None;
    for k in (0..below).rev() {
        let u = others[k];
        let next = if k > 0 { others[k - 1] } else { u - 1.0 };
        let v = probe(0.5 * (u + next));
        if changed(v) {
            minus = Some(ScoreStep { position: u, ap: v });
            break;
        }
    }
    Some(OracleStepResult { ap, plus, minus })
}

/// AP of a class with one window's score replaced; for re-probing plateaus.
pub fn oracle_probe(
    dataset: &Dataset,
    scores: &ScoreTable,
    image: usize,
    window: usize,
    class: usize,
    value: f64,
    nms: &NmsConfig,
    eval: &EvalConfig,
) -> Option<f64> {
    pipeline_ap(dataset, scores, class, Some((image, window, value)), nms, eval)
}

/// Score table in which every ground truth's best-overlapping proposal is
/// ranked first (higher overlap ranks higher) and everything else scores 0.
pub fn reference_scores(dataset: &Dataset) -> ScoreTable {
    let mut table = ScoreTable::zeros(dataset);
    for g in &dataset.ground_truth {
        let best = dataset.images[g.image]
            .proposals
            .iter()
            .enumerate()
            .map(|(w, p)| (w, overlap(&p.bbox, &g.bbox)))
            .fold(None::<(usize, f64)>, |acc, (w, o)| match acc {
                Some((_, b)) if b >= o => acc,
                _ => Some((w, o)),
            });
        if let Some((w, o)) = best {
            let v = table.get_mut(g.image, w, g.class);
            *v = v.max(1.0 + o);
        }
    }
    table
}

/// mAP of [`reference_scores`]: an achievable target for score training.
pub fn reference_map(dataset: &Dataset, nms: &NmsConfig, eval: &EvalConfig) -> Result<f64> {
    oracle_map(dataset, &reference_scores(dataset), nms, eval)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::tests::bx;
    use crate::dataset::{GroundTruthObject, Image, ProposalWindow};

    fn chain(kinds: &[bool], n_gt: usize) -> (Vec<OracleDetection>, Vec<OracleGroundTruth>) {
        // each GT sits in its own image; a TP covers it exactly, an FP lands elsewhere
        let gts: Vec<OracleGroundTruth> =
            (0..n_gt).map(|i| OracleGroundTruth { image: i, bbox: bx(0.0, 0.0, 1.0, 1.0) }).collect();
        let mut next_gt = 0;
        let dets = kinds
            .iter()
            .enumerate()
            .map(|(r, &tp)| {
                let (image, bbox) = if tp {
                    next_gt += 1;
                    (next_gt - 1, bx(0.0, 0.0, 1.0, 1.0))
                } else {
                    (0, bx(5.0, 5.0, 6.0, 6.0))
                };
                OracleDetection { image, window: r, score: 1.0 - r as f64 / 10.0, bbox }
            })
            .collect();
        (dets, gts)
    }

    #[test]
    fn worked_example() {
        let (d, g) = chain(&[true, false, true], 2);
        let ap12 = oracle_ap(&d, &g, &EvalConfig::default()).unwrap();
        assert!((ap12 - 5.0 / 6.0).abs() < 1e-12);
        let cfg07 = EvalConfig { ap_variant: ApVariant::Voc2007, ..EvalConfig::default() };
        assert!((oracle_ap(&d, &g, &cfg07).unwrap() - 28.0 / 33.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking() {
        let (d, g) = chain(&[true, true, false, false], 2);
        assert_eq!(oracle_ap(&d, &g, &EvalConfig::default()).unwrap(), 1.0);
        assert!(matches!(oracle_ap(&d, &[], &EvalConfig::default()), Err(Error::UndefinedAp)));
    }

    fn one_image(boxes: Vec<BoundingBox>, gts: Vec<BoundingBox>) -> Dataset {
        Dataset {
            num_classes: 1,
            images: vec![Image {
                id: "a".into(),
                proposals: boxes
                    .into_iter()
                    .enumerate()
                    .map(|(i, bbox)| ProposalWindow { id: format!("w{i}"), bbox })
                    .collect(),
            }],
            ground_truth: gts.into_iter().map(|bbox| GroundTruthObject { image: 0, class: 0, bbox }).collect(),
        }
    }

    #[test]
    fn isolated_background_has_no_steps() {
        let d = one_image(
            vec![bx(0.0, 0.0, 1.0, 1.0), bx(50.0, 50.0, 51.0, 51.0)],
            vec![bx(0.0, 0.0, 1.0, 1.0)],
        );
        let scores = ScoreTable::from_fn(&d, |_, w, _| [0.9, 0.1][w]);
        let r = oracle_steps(&d, &scores, 0, 1, 0, &NmsConfig::default(), &EvalConfig::default()).unwrap();
        assert_eq!(r.ap, 1.0);
        // crossing the TP would drop AP
        assert!(r.plus.is_some());
        assert!(r.minus.is_none());
        let far = oracle_steps(&d, &scores, 0, 0, 0, &NmsConfig::default(), &EvalConfig::default()).unwrap();
        assert!(far.plus.is_none());
    }

    #[test]
    fn nms_keeps_highest_of_overlapping_pair() {
        let boxes = [bx(0.0, 0.0, 4.0, 1.0), bx(0.0, 0.0, 8.0, 1.0), bx(3.0, 0.0, 10.0, 1.0)];
        assert_eq!(oracle_nms(&boxes, &[0.9, 0.8, 0.7], &NmsConfig::default()), vec![0, 2]);
    }

    #[test]
    fn reference_map_is_perfect_when_reachable() {
        let d = one_image(
            vec![bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 1.0, 10.0, 10.0), bx(40.0, 40.0, 50.0, 50.0)],
            vec![bx(0.0, 0.0, 10.0, 10.0), bx(40.0, 40.0, 50.0, 51.0)],
        );
        assert_eq!(reference_map(&d, &NmsConfig::default(), &EvalConfig::default()).unwrap(), 1.0);
        let miss = one_image(vec![bx(0.0, 0.0, 10.0, 10.0)], vec![bx(0.0, 0.0, 10.0, 10.0), bx(60.0, 60.0, 70.0, 70.0)]);
        assert!(reference_map(&miss, &NmsConfig::default(), &EvalConfig::default()).unwrap() < 1.0);
    }
}
