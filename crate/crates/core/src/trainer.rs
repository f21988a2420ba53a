//! SGD with momentum over a free score table.
//!
//! The parameters are the raw per-(window, class) scores. Each iteration
//! draws a minibatch of images, subsamples their windows towards a target
//! foreground fraction, evaluates the loss on that batch and applies the
//! batch gradient to the full table.

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, GroundTruthObject, Image, ScoreTable};
use crate::error::{Error, Result};
use crate::eval::mean_ap;
use crate::loss::{loss_and_gradient, GradientField, LossConfig};

/// Scores whose magnitude exceeds this count as divergence.
pub const DIVERGENCE_THRESHOLD: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub iterations: usize,
    pub minibatch_images: usize,
    /// Target share of foreground windows among the windows of a minibatch.
    pub fg_fraction: f64,
    /// Full-dataset mAP is recorded every this many iterations (and after
    /// the last one); 0 records it only at the end.
    pub full_eval_every: usize,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            momentum: 0.9,
            iterations: 500,
            minibatch_images: 8,
            fg_fraction: 0.05,
            full_eval_every: 25,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.fg_fraction) {
            return Err(Error::config("fg_fraction must lie in [0, 1]"));
        }
        if self.minibatch_images == 0 {
            return Err(Error::config("minibatch_images must be at least 1"));
        }
        self.loss.check()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRecord {
    pub iteration: usize,
    pub loss: f64,
    pub batch_map: f64,
    pub full_map: Option<f64>,
    pub grad_norm: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub records: Vec<TrainRecord>,
    pub initial_full_map: f64,
    pub final_full_map: f64,
    /// Why training stopped early, if it did.
    pub failure: Option<String>,
}

impl TrainHistory {
    pub fn healthy(&self) -> bool {
        self.failure.is_none()
    }
}

/// A subset of images and of their windows, as a dataset of its own plus
/// the maps back to the full dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Minibatch {
    pub dataset: Dataset,
    /// Original index of each batch image.
    pub images: Vec<usize>,
    /// Original window indices kept in each batch image, ascending.
    pub windows: Vec<Vec<usize>>,
}

impl Minibatch {
    pub fn gather(&self, scores: &ScoreTable) -> ScoreTable {
        ScoreTable::from_fn(&self.dataset, |i, w, c| scores.get(self.images[i], self.windows[i][w], c))
    }

    /// Places a batch gradient into a zero gradient shaped like `full`.
    pub fn scatter(&self, grad: &GradientField, full: &Dataset) -> GradientField {
        let mut out = GradientField::zeros(full);
        for (i, kept) in self.windows.iter().enumerate() {
            for (w, &orig) in kept.iter().enumerate() {
                for c in 0..full.num_classes {
                    out.set(self.images[i], orig, c, grad.get(i, w, c));
                }
            }
        }
        out
    }

    pub fn num_windows(&self) -> usize {
        self.dataset.num_windows()
    }
}

/// Draws `min(minibatch_images, n)` images and keeps windows so that the
/// foreground share is as close to `fg_fraction` as the supply allows.
pub fn sample_minibatch(dataset: &Dataset, cfg: &TrainConfig, rng: &mut impl Rng) -> Minibatch {
    let n = dataset.images.len();
    let mut images = index::sample(rng, n, cfg.minibatch_images.min(n)).into_vec();
    images.sort_unstable();

    let by_image = dataset.gt_by_image();
    let thr = cfg.loss.eval.match_iou;
    let mut fg = Vec::new();
    let mut bg = Vec::new();
    for (bi, &i) in images.iter().enumerate() {
        for w in 0..dataset.images[i].proposals.len() {
            if dataset.is_foreground(&by_image, i, w, thr) {
                fg.push((bi, w));
            } else {
                bg.push((bi, w));
            }
        }
    }
    let f = cfg.fg_fraction;
    let (n_fg, n_bg) = if f >= 1.0 {
        (fg.len(), 0)
    } else if f <= 0.0 {
        (0, bg.len())
    } else {
        let want_fg = (f * bg.len() as f64 / (1.0 - f)).round() as usize;
        if want_fg <= fg.len() {
            (want_fg, bg.len())
        } else {
            let want_bg = (fg.len() as f64 * (1.0 - f) / f).round() as usize;
            (fg.len(), want_bg.min(bg.len()))
        }
    };
    fg.shuffle(rng);
    bg.shuffle(rng);
    let mut windows: Vec<Vec<usize>> = vec![Vec::new(); images.len()];
    for &(bi, w) in fg[..n_fg].iter().chain(&bg[..n_bg]) {
        windows[bi].push(w);
    }
    for kept in &mut windows {
        kept.sort_unstable();
    }

    let batch_images = images
        .iter()
        .zip(&windows)
        .map(|(&i, kept)| Image {
            id: dataset.images[i].id.clone(),
            proposals: kept.iter().map(|&w| dataset.images[i].proposals[w].clone()).collect(),
        })
        .collect();
    let ground_truth = images
        .iter()
        .enumerate()
        .flat_map(|(bi, &i)| {
            by_image[i].iter().map(move |&g| GroundTruthObject { image: bi, ..dataset.ground_truth[g].clone() })
        })
        .collect();
    Minibatch {
        dataset: Dataset { num_classes: dataset.num_classes, images: batch_images, ground_truth },
        images,
        windows,
    }
}

/// `v' = momentum * v - lr * g`, `s' = s + v'`, elementwise.
pub fn sgd_step(params: &mut ScoreTable, velocity: &mut ScoreTable, grad: &GradientField, lr: f64, momentum: f64) {
    for ((s, v), g) in params.values_mut().iter_mut().zip(velocity.values_mut()).zip(grad.values()) {
        *v = momentum * *v - lr * g;
        *s += *v;
    }
}

/// Independent uniform draws in `[-0.01, 0.01]`.
pub fn initial_scores(dataset: &Dataset, rng: &mut impl Rng) -> ScoreTable {
    ScoreTable::from_fn(dataset, |_, _, _| rng.gen_range(-0.01..=0.01))
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<(ScoreTable, TrainHistory)> {
    cfg.check()?;
    dataset.ensure_valid()?;
    if dataset.images.is_empty() {
        return Err(Error::Input("dataset has no images".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = initial_scores(dataset, &mut rng);
    let mut velocity = ScoreTable::zeros(dataset);
    let full_map = |p: &ScoreTable| mean_ap(p, dataset, &cfg.loss.nms, &cfg.loss.eval).map(|m| m.map);

    let mut history = TrainHistory { initial_full_map: full_map(&params)?, ..TrainHistory::default() };
    history.final_full_map = history.initial_full_map;
    for it in 0..cfg.iterations {
        let batch = sample_minibatch(dataset, cfg, &mut rng);
        let batch_scores = batch.gather(&params);
        let out = match loss_and_gradient(&batch_scores, &batch.dataset, &cfg.loss) {
            Ok(out) => out,
            // a batch without any ground truth carries no signal
            Err(Error::NoGroundTruth) => continue,
            Err(e) => return Err(e),
        };
        let grad = batch.scatter(&out.grad, dataset);
        sgd_step(&mut params, &mut velocity, &grad, cfg.learning_rate, cfg.momentum);

        let last = it + 1 == cfg.iterations;
        let sampled = last || (cfg.full_eval_every > 0 && (it + 1) % cfg.full_eval_every == 0);
        let entries = batch_scores.values().len().max(1);
        let mut record = TrainRecord {
            iteration: it,
            loss: out.loss,
            batch_map: out.map,
            full_map: None,
            grad_norm: out.grad.norm(),
            clipped_fraction: out.clipped as f64 / entries as f64,
        };

        let max_abs = params.max_abs();
        let failure = if !out.loss.is_finite() {
            Some(format!("non-finite loss at iteration {it}"))
        } else if !(max_abs <= DIVERGENCE_THRESHOLD) {
            Some(format!("score magnitude {max_abs:e} at iteration {it}"))
        } else {
            None
        };
        if failure.is_none() && sampled {
            let m = full_map(&params)?;
            record.full_map = Some(m);
            history.final_full_map = m;
        }
        history.records.push(record);
        if failure.is_some() {
            history.failure = failure;
            break;
        }
    }
    Ok((params, history))
}
