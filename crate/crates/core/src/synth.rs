//! Seeded synthetic detection problems.
//!
//! Every ground truth gets a handful of jittered copies as proposals (some
//! land above the matching threshold, some below) and every image is padded
//! with uniformly placed background boxes.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, GroundTruthObject, Image, ProposalWindow};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_images: usize,
    pub num_classes: usize,
    /// Inclusive range of ground-truth objects per image.
    pub gts_per_image: (usize, usize),
    pub jittered_per_gt: usize,
    pub background_per_image: usize,
    pub canvas: (f64, f64),
    /// Inclusive range of box side lengths (ground truth and background).
    pub box_size: (f64, f64),
    /// Each coordinate moves by up to this fraction of the box side.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_images: 20,
            num_classes: 3,
            gts_per_image: (1, 2),
            jittered_per_gt: 3,
            background_per_image: 55,
            canvas: (100.0, 100.0),
            box_size: (10.0, 30.0),
            jitter: 0.35,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn check(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be at least 1"));
        }
        if self.gts_per_image.0 > self.gts_per_image.1 {
            return Err(Error::config("gts_per_image range is empty"));
        }
        let (lo, hi) = self.box_size;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config("box_size must be a positive, non-empty range"));
        }
        let (w, h) = self.canvas;
        if !(w.is_finite() && h.is_finite()) || hi > w || hi > h {
            return Err(Error::config(format!("canvas {w}x{h} is too small for boxes up to {hi}")));
        }
        if !(0.0..0.5).contains(&self.jitter) {
            return Err(Error::config("jitter must lie in [0, 0.5) so jittered boxes stay non-empty"));
        }
        Ok(())
    }
}

fn random_box(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> BoundingBox {
    let (lo, hi) = cfg.box_size;
    let w = rng.gen_range(lo..=hi);
    let h = rng.gen_range(lo..=hi);
    let x = rng.gen_range(0.0..=cfg.canvas.0 - w);
    let y = rng.gen_range(0.0..=cfg.canvas.1 - h);
    BoundingBox { x_min: x, y_min: y, x_max: x + w, y_max: y + h }
}

fn jittered(rng: &mut ChaCha8Rng, b: &BoundingBox, j: f64) -> BoundingBox {
    let (w, h) = (b.width(), b.height());
    let mut d = |s: f64| if j == 0.0 { 0.0 } else { rng.gen_range(-j * s..=j * s) };
    BoundingBox { x_min: b.x_min + d(w), y_min: b.y_min + d(h), x_max: b.x_max + d(w), y_max: b.y_max + d(h) }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut images = Vec::with_capacity(cfg.num_images);
    let mut ground_truth = Vec::new();
    for i in 0..cfg.num_images {
        let n_gt = rng.gen_range(cfg.gts_per_image.0..=cfg.gts_per_image.1);
        let mut boxes = Vec::new();
        for _ in 0..n_gt {
            let bbox = random_box(&mut rng, cfg);
            let class = rng.gen_range(0..cfg.num_classes);
            for _ in 0..cfg.jittered_per_gt {
                boxes.push(jittered(&mut rng, &bbox, cfg.jitter));
            }
            ground_truth.push(GroundTruthObject { image: i, class, bbox });
        }
        for _ in 0..cfg.background_per_image {
            boxes.push(random_box(&mut rng, cfg));
        }
        boxes.shuffle(&mut rng);
        let proposals = boxes
            .into_iter()
            .enumerate()
            .map(|(j, bbox)| ProposalWindow { id: format!("w{j}"), bbox })
            .collect();
        images.push(Image { id: format!("img{i}"), proposals });
    }
    let dataset = Dataset { num_classes: cfg.num_classes, images, ground_truth };
    dataset.ensure_valid()?;
    Ok(dataset)
}

/// Fraction of proposals overlapping some ground truth by more than
/// `threshold` IoU.
pub fn foreground_fraction(dataset: &Dataset, threshold: f64) -> f64 {
    let total = dataset.num_windows();
    if total == 0 {
        return 0.0;
    }
    let by_image = dataset.gt_by_image();
    let fg = (0..dataset.images.len())
        .flat_map(|i| (0..dataset.images[i].proposals.len()).map(move |w| (i, w)))
        .filter(|&(i, w)| dataset.is_foreground(&by_image, i, w, threshold))
        .count();
    fg as f64 / total as f64
}
