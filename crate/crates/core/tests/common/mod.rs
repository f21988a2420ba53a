//! Random instance generators shared by the integration tests.
#![allow(dead_code)]

use mapgrad::eval::{ClassDetection, ClassGroundTruth};
use mapgrad::{iou, BoundingBox, Dataset, GroundTruthObject, Image, NmsConfig, ProposalWindow, ScoreTable};
use rand::Rng;

pub fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
    BoundingBox::new(x0, y0, x1, y1).unwrap()
}

pub fn random_box(rng: &mut impl Rng, origin: (f64, f64), extent: f64, size: (f64, f64)) -> BoundingBox {
    let w = rng.gen_range(size.0..size.1);
    let h = rng.gen_range(size.0..size.1);
    let x = origin.0 + rng.gen_range(0.0..extent);
    let y = origin.1 + rng.gen_range(0.0..extent);
    bx(x, y, x + w, y + h)
}

pub fn jitter(rng: &mut impl Rng, b: &BoundingBox, amount: f64) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| rng.gen_range(-amount * s..=amount * s);
    bx(b.x_min + d(w), b.y_min + d(h), b.x_max + d(w), b.y_max + d(h))
}

/// A score in (0, 1), sometimes snapped to a coarse grid so that ties occur.
pub fn score(rng: &mut impl Rng, ties: bool) -> f64 {
    let s: f64 = rng.gen_range(0.0..1.0);
    if ties {
        (s * 10.0).floor() / 10.0
    } else {
        s
    }
}

/// One class worth of detections and ground truth spread over a few images.
pub fn ap_instance(rng: &mut impl Rng) -> (Vec<ClassDetection>, Vec<ClassGroundTruth>) {
    let n_images = rng.gen_range(1..=3);
    let n_gt = rng.gen_range(1..=10);
    let gts: Vec<ClassGroundTruth> = (0..n_gt)
        .map(|id| ClassGroundTruth {
            id,
            image: rng.gen_range(0..n_images),
            bbox: random_box(rng, (0.0, 0.0), 40.0, (5.0, 20.0)),
        })
        .collect();
    let n_det = rng.gen_range(0..=50);
    let ties = rng.gen_bool(0.3);
    let mut next_window = vec![0usize; n_images];
    let dets = (0..n_det)
        .map(|_| {
            let (image, bbox) = if rng.gen_bool(0.6) {
                let g = &gts[rng.gen_range(0..gts.len())];
                (g.image, jitter(rng, &g.bbox, 0.3))
            } else {
                (rng.gen_range(0..n_images), random_box(rng, (0.0, 0.0), 40.0, (5.0, 20.0)))
            };
            let window = next_window[image];
            next_window[image] += 1;
            ClassDetection { image, window, score: score(rng, ties), bbox }
        })
        .collect();
    (dets, gts)
}

fn pairwise_below(boxes: &[BoundingBox], b: &BoundingBox, thr: f64) -> bool {
    boxes.iter().all(|o| iou(o, b).unwrap() <= thr)
}

/// Best ground truth of a box if it clears the matching threshold.
fn mapping(b: &BoundingBox, gts: &[BoundingBox]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (g, gt) in gts.iter().enumerate() {
        let o = iou(b, gt).unwrap();
        if best.is_none_or(|(_, v)| o > v) {
            best = Some((g, o));
        }
    }
    best.filter(|&(_, o)| o > 0.5).map(|(g, _)| g)
}

/// A dataset in which suppression never chains: every window is either
/// isolated or one of a pair (A, B) where A suppresses B, B overlaps nothing
/// else, maps to the same ground truth as A, and scores below every window
/// that is not a B in every class.
pub fn chain_free_instance(rng: &mut impl Rng) -> (Dataset, ScoreTable, NmsConfig) {
    let nms = NmsConfig { overlap_threshold: if rng.gen_bool(0.3) { 0.7 } else { 0.3 } };
    let thr = nms.overlap_threshold;
    let num_classes = rng.gen_range(1..=2);
    let n_images = rng.gen_range(1..=2);
    let mut images = Vec::new();
    let mut ground_truth = Vec::new();
    let mut is_b: Vec<Vec<bool>> = Vec::new();
    for i in 0..n_images {
        let mut boxes: Vec<BoundingBox> = Vec::new();
        let mut b_flags: Vec<bool> = Vec::new();
        for k in 0..rng.gen_range(2..=6) {
            let origin = (k as f64 * 100.0, 0.0);
            let mut cluster: Vec<BoundingBox> = Vec::new();
            let mut cluster_gt: Vec<BoundingBox> = Vec::new();
            if rng.gen_bool(0.7) {
                let g = random_box(rng, (origin.0 + 10.0, 10.0), 10.0, (10.0, 30.0));
                ground_truth.push(GroundTruthObject { image: i, class: rng.gen_range(0..num_classes), bbox: g });
                cluster_gt.push(g);
                for _ in 0..rng.gen_range(0..=3) {
                    for _ in 0..50 {
                        let c = jitter(rng, &g, 0.3);
                        if pairwise_below(&cluster, &c, thr) {
                            cluster.push(c);
                            break;
                        }
                    }
                }
            }
            if rng.gen_bool(0.5) {
                for _ in 0..50 {
                    let c = random_box(rng, (origin.0 + 5.0, 5.0), 30.0, (5.0, 30.0));
                    if pairwise_below(&cluster, &c, thr) {
                        cluster.push(c);
                        break;
                    }
                }
            }
            let mut flags = vec![false; cluster.len()];
            if !cluster.is_empty() && rng.gen_bool(0.5) {
                let a = rng.gen_range(0..cluster.len());
                let others: Vec<BoundingBox> =
                    cluster.iter().enumerate().filter(|&(j, _)| j != a).map(|(_, b)| *b).collect();
                for _ in 0..100 {
                    let c = jitter(rng, &cluster[a], 0.1);
                    if iou(&c, &cluster[a]).unwrap() > thr
                        && pairwise_below(&others, &c, thr)
                        && mapping(&c, &cluster_gt) == mapping(&cluster[a], &cluster_gt)
                    {
                        cluster.push(c);
                        flags.push(true);
                        break;
                    }
                }
            }
            boxes.extend(cluster);
            b_flags.extend(flags);
        }
        images.push(Image {
            id: format!("img{i}"),
            proposals: boxes
                .into_iter()
                .enumerate()
                .map(|(j, bbox)| ProposalWindow { id: format!("w{j}"), bbox })
                .collect(),
        });
        is_b.push(b_flags);
    }
    let dataset = Dataset { num_classes, images, ground_truth };
    let scores = ScoreTable::from_fn(&dataset, |i, w, _| {
        if is_b[i][w] {
            rng.gen_range(-2.0..-1.0)
        } else {
            rng.gen_range(0.0..1.0)
        }
    });
    (dataset, scores, nms)
}

pub fn single_image(num_classes: usize, boxes: &[BoundingBox], gts: &[(usize, BoundingBox)]) -> Dataset {
    Dataset {
        num_classes,
        images: vec![Image {
            id: "img0".into(),
            proposals: boxes
                .iter()
                .enumerate()
                .map(|(j, &bbox)| ProposalWindow { id: format!("w{j}"), bbox })
                .collect(),
        }],
        ground_truth: gts.iter().map(|&(class, bbox)| GroundTruthObject { image: 0, class, bbox }).collect(),
    }
}
