//! The mAP-after-NMS training loss and its pseudogradient.
//!
//! For every class the retained detections are ranked, and for each of them
//! two passes (descending, then ascending) find the nearest score at which
//! the class AP changes and the AP value past that point. A third pass over
//! the suppressed windows propagates those steps through NMS:
//!
//! 1. a suppressed window inherits its suppressor's upward step;
//! 2. a suppressed window covering a ground truth that nothing detects gains
//!    an upward step at its suppressor's score;
//! 3. that suppressor gains a downward step at the suppressed window's score.
//!
//! Cascaded suppression (A suppresses B, which would otherwise suppress C)
//! is not modelled, and a suppressed window is assumed to cover the same
//! ground truth as its suppressor.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataset::{Dataset, ScoreTable};
use crate::error::{Error, Result};
use crate::eval::{
    detection_order, evaluate_class, mean_of_present, ApVariant, ClassDetection, ClassEvaluation,
    DetectionLabel, EvalConfig,
};
use crate::nms::NmsConfig;
use crate::pseudograd::{estimate, EstimatorConfig, Step, StepProfile};

/// Profiles never put a step closer than this to the evaluation point
/// (score ties otherwise give a zero-width plateau).
pub const MIN_STEP_DISTANCE: f64 = 1e-12;

/// A score position at which a class AP changes, and the AP just past it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoreStep {
    pub position: f64,
    pub ap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WindowSteps {
    /// Nearest step above the current score.
    pub plus: Option<ScoreStep>,
    /// Nearest step below the current score.
    pub minus: Option<ScoreStep>,
}

impl WindowSteps {
    pub fn delta_plus(&self, score: f64) -> Option<f64> {
        self.plus.map(|p| p.position - score)
    }

    pub fn delta_minus(&self, score: f64) -> Option<f64> {
        self.minus.map(|m| score - m.position)
    }

    pub fn profile(&self, score: f64, ap: f64) -> StepProfile {
        StepProfile {
            x: score,
            left: self.minus.map(|m| Step {
                position: m.position.min(score - MIN_STEP_DISTANCE),
                value: m.ap,
            }),
            mid: ap,
            right: self.plus.map(|p| Step {
                position: p.position.max(score + MIN_STEP_DISTANCE),
                value: p.ap,
            }),
        }
    }
}

fn nearest_plus(a: Option<ScoreStep>, b: Option<ScoreStep>) -> Option<ScoreStep> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.position < x.position { y } else { x }),
        (x, y) => x.or(y),
    }
}

fn nearest_minus(a: Option<ScoreStep>, b: Option<ScoreStep>) -> Option<ScoreStep> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.position > x.position { y } else { x }),
        (x, y) => x.or(y),
    }
}

/// Weighted-sum form of AP over the true-positive indices: AP equals
/// `sum_k weight[k] * interp_precision[k] / denom`.
fn ap_weights(n_tp: usize, n_gt: usize, variant: ApVariant) -> (Vec<f64>, f64) {
    match variant {
        ApVariant::Voc2012 => {
            let mut prev = 0.0;
            let w = (0..n_tp)
                .map(|k| {
                    let r = (k + 1) as f64 / n_gt as f64;
                    let d = r - prev;
                    prev = r;
                    d
                })
                .collect();
            (w, 1.0)
        }
        ApVariant::Voc2007 => {
            let mut w = vec![0.0; n_tp];
            for t in 0..=10 {
                let threshold = t as f64 / 10.0;
                let k = (0..n_tp).find(|&k| (k + 1) as f64 / n_gt as f64 >= threshold);
                if let Some(k) = k {
                    w[k] += 1.0;
                }
            }
            (w, 11.0)
        }
    }
}

/// AP of a ranking given only the ranks of its true positives.
fn ap_from_tp_ranks(tp_ranks: &[usize], n_gt: usize, variant: ApVariant) -> f64 {
    let (w, denom) = ap_weights(tp_ranks.len(), n_gt, variant);
    let mut run = f64::NEG_INFINITY;
    let mut phat = vec![0.0; tp_ranks.len()];
    for (k, &r) in tp_ranks.iter().enumerate().rev() {
        run = run.max((k + 1) as f64 / (r + 1) as f64);
        phat[k] = run;
    }
    match variant {
        ApVariant::Voc2012 => w.iter().zip(&phat).map(|(w, p)| w * p).fold(0.0, |a, b| a + b),
        ApVariant::Voc2007 => {
            // same summation order as the evaluator: one term per threshold
            let mut sum = 0.0;
            for t in 0..=10 {
                let threshold = t as f64 / 10.0;
                sum += (0..tp_ranks.len())
                    .find(|&k| (k + 1) as f64 / n_gt as f64 >= threshold)
                    .map_or(0.0, |k| phat[k]);
            }
            sum / denom
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Up,
    Down,
}

/// Ranked, labelled detections of one class with the prefix structures
/// needed to evaluate reorderings locally.
#[derive(Debug, Clone)]
pub struct RankedDetections<'a> {
    labels: &'a [DetectionLabel],
    n_gt: usize,
    variant: ApVariant,
    ap: f64,
    tp_ranks: Vec<usize>,
    fp_ranks: Vec<usize>,
    /// Number of true positives strictly above each rank (length n + 1).
    tp_before: Vec<usize>,
    fp_before: Vec<usize>,
    precision: Vec<f64>,
    interp: Vec<f64>,
    weight: Vec<f64>,
    denom: f64,
    /// Ranks of the retained detections mapped to each ground truth, ascending.
    groups: HashMap<usize, Vec<usize>>,
}

impl<'a> RankedDetections<'a> {
    /// `labels` must be in decreasing score order and `n_gt > 0`.
    pub fn new(labels: &'a [DetectionLabel], n_gt: usize, variant: ApVariant) -> Result<Self> {
        if n_gt == 0 {
            return Err(Error::UndefinedAp);
        }
        let n = labels.len();
        let mut tp_ranks = Vec::new();
        let mut fp_ranks = Vec::new();
        let mut tp_before = Vec::with_capacity(n + 1);
        let mut fp_before = Vec::with_capacity(n + 1);
        let mut groups: HashMap<usize, Vec<usize>> = HashMap::new();
        for (r, l) in labels.iter().enumerate() {
            tp_before.push(tp_ranks.len());
            fp_before.push(fp_ranks.len());
            if l.kind.is_tp() {
                tp_ranks.push(r);
            } else {
                fp_ranks.push(r);
            }
            if let Some(g) = l.matched_gt {
                groups.entry(g).or_default().push(r);
            }
        }
        tp_before.push(tp_ranks.len());
        fp_before.push(fp_ranks.len());
        groups.retain(|_, v| v.len() > 1);

        let precision: Vec<f64> =
            tp_ranks.iter().enumerate().map(|(k, &r)| (k + 1) as f64 / (r + 1) as f64).collect();
        let mut interp = precision.clone();
        for k in (0..interp.len().saturating_sub(1)).rev() {
            interp[k] = interp[k].max(interp[k + 1]);
        }
        let (weight, denom) = ap_weights(tp_ranks.len(), n_gt, variant);
        let ap = ap_from_tp_ranks(&tp_ranks, n_gt, variant);
        Ok(RankedDetections {
            labels,
            n_gt,
            variant,
            ap,
            tp_ranks,
            fp_ranks,
            tp_before,
            fp_before,
            precision,
            interp,
            weight,
            denom,
            groups,
        })
    }

    pub fn ap(&self) -> f64 {
        self.ap
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn is_tp(&self, rank: usize) -> bool {
        self.labels[rank].kind.is_tp()
    }

    fn group_of(&self, rank: usize) -> Option<&[usize]> {
        self.labels[rank].matched_gt.and_then(|g| self.groups.get(&g)).map(Vec::as_slice)
    }

    /// Change of the weighted AP sum when true-positive indices
    /// `lo..lo + new_ranks.len()` move to `new_ranks` and nothing else does.
    fn edit_delta(&self, lo: usize, new_ranks: &[usize]) -> f64 {
        let hi = lo + new_ranks.len();
        let mut run = self.interp.get(hi).copied().unwrap_or(0.0);
        let mut delta = 0.0;
        for (off, &r) in new_ranks.iter().enumerate().rev() {
            let m = lo + off;
            run = run.max((m + 1) as f64 / (r + 1) as f64);
            delta += self.weight[m] * (run - self.interp[m]);
        }
        for k in (0..lo).rev() {
            let v = self.precision[k].max(run);
            if v == self.interp[k] {
                break;
            }
            delta += self.weight[k] * (v - self.interp[k]);
            run = v;
        }
        delta
    }

    /// Weighted-sum change when the detection at rank `from` is moved to
    /// position `to` of the reordered list, relabelling detections mapped to
    /// the same ground truth as needed.
    fn move_delta(&self, from: usize, to: usize) -> f64 {
        if from == to {
            return 0.0;
        }
        let (lo_r, hi_r) = (from.min(to), from.max(to));
        let new_rank = |r: usize| -> usize {
            if r == from {
                to
            } else if to < from && (to..from).contains(&r) {
                r + 1
            } else if to > from && (from + 1..=to).contains(&r) {
                r - 1
            } else {
                r
            }
        };
        let (old_group_tp, new_group_tp) = match self.group_of(from) {
            Some(members) => {
                let old = members[0];
                let new = *members.iter().min_by_key(|&&m| new_rank(m)).expect("non-empty group");
                (Some(old), Some(new))
            }
            None => (None, None),
        };
        let relabel = old_group_tp != new_group_tp;
        let lo = self.tp_before[lo_r];
        let hi = self.tp_before[hi_r + 1];
        let mut ranks: Vec<usize> = self.tp_ranks[lo..hi]
            .iter()
            .filter(|&&r| !(relabel && Some(r) == old_group_tp))
            .map(|&r| new_rank(r))
            .collect();
        if relabel {
            ranks.push(new_rank(new_group_tp.expect("relabel implies a group")));
        }
        ranks.sort_unstable();
        debug_assert_eq!(ranks.len(), hi - lo);
        if ranks.iter().zip(&self.tp_ranks[lo..hi]).all(|(a, b)| a == b) {
            return 0.0;
        }
        self.edit_delta(lo, &ranks)
    }

    /// AP after moving the detection at rank `from` to position `to` of the
    /// reordered list (all other detections keep their relative order).
    pub fn ap_delta(&self, from: usize, to: usize) -> f64 {
        self.ap + self.move_delta(from, to) / self.denom
    }

    fn nearest_of_kind(&self, rank: usize, tp: bool, dir: Direction) -> Option<usize> {
        let (ranks, before) = if tp { (&self.tp_ranks, &self.tp_before) } else { (&self.fp_ranks, &self.fp_before) };
        match dir {
            Direction::Up => before[rank].checked_sub(1).map(|i| ranks[i]),
            Direction::Down => ranks.get(before[rank + 1]).copied(),
        }
    }

    fn nearest_member(members: &[usize], rank: usize, dir: Direction) -> Option<usize> {
        let i = members.partition_point(|&m| m < rank);
        match dir {
            Direction::Up => i.checked_sub(1).map(|i| members[i]),
            Direction::Down => members[i..].iter().copied().find(|&m| m > rank),
        }
    }

    /// Walks crossings from `rank` in `dir` and returns the first one that
    /// changes AP, as (crossed rank, new AP).
    fn search(&self, rank: usize, dir: Direction) -> Option<(usize, f64)> {
        let members = self.group_of(rank);
        let mut tp = self.is_tp(rank);
        let mut pos = rank;
        loop {
            let other = self.nearest_of_kind(pos, !tp, dir);
            let member = members.and_then(|m| Self::nearest_member(m, pos, dir));
            let closer = |a: usize, b: usize| match dir {
                Direction::Up => a >= b,
                Direction::Down => a <= b,
            };
            let (next, is_member) = match (other, member) {
                (_, Some(m)) if other.is_none_or(|o| closer(m, o)) => (m, true),
                (Some(o), _) => (o, false),
                (None, None) => return None,
                (None, Some(_)) => unreachable!(),
            };
            if is_member {
                // Passing a detection of the same ground truth swaps their
                // labels; the label sequence itself is unchanged.
                match dir {
                    Direction::Up => tp |= self.is_tp(next),
                    Direction::Down => tp = false,
                }
            } else {
                let delta = self.move_delta(rank, next);
                if delta != 0.0 {
                    return Some((next, self.ap + delta / self.denom));
                }
            }
            pos = next;
        }
    }

    /// Run of same-kind detections around `rank`; plain detections in one run
    /// share their step targets.
    fn run_id(&self, rank: usize) -> usize {
        if self.is_tp(rank) {
            // index of the first FP above, shifted to keep TP and FP runs apart
            2 * self.fp_before[rank]
        } else {
            2 * self.tp_before[rank] + 1
        }
    }

    fn is_plain(&self, rank: usize) -> bool {
        self.group_of(rank).is_none()
    }

    /// Two passes over the ranking: descending finds the nearest upward
    /// step of every detection, ascending the nearest downward step.
    pub fn find_steps(&self, work: &mut usize) -> Vec<WindowSteps> {
        let n = self.len();
        let mut out = vec![WindowSteps::default(); n];
        let mut cache: HashMap<usize, Option<(usize, f64)>> = HashMap::new();
        for r in 0..n {
            *work += 1;
            let hit = if self.is_plain(r) {
                *cache.entry(self.run_id(r)).or_insert_with(|| self.search(r, Direction::Up))
            } else {
                self.search(r, Direction::Up)
            };
            out[r].plus = hit.map(|(t, ap)| ScoreStep { position: self.labels[t].score, ap });
        }
        cache.clear();
        for r in (0..n).rev() {
            *work += 1;
            let hit = if self.is_plain(r) {
                *cache.entry(self.run_id(r)).or_insert_with(|| self.search(r, Direction::Down))
            } else {
                self.search(r, Direction::Down)
            };
            out[r].minus = hit.map(|(t, ap)| ScoreStep { position: self.labels[t].score, ap });
        }
        out
    }

    /// AP when the detection at `rank` is replaced in place by a true
    /// positive for a ground truth that is currently missed.
    fn ap_with_rescue_at(&self, rank: usize) -> f64 {
        let mut ranks = self.tp_ranks.clone();
        if self.is_tp(rank) {
            // the displaced detection's ground truth falls to its next duplicate
            match self.group_of(rank).and_then(|m| m.get(1)) {
                Some(&next) => ranks.push(next),
                None => return self.ap,
            }
        } else {
            ranks.push(rank);
        }
        ranks.sort_unstable();
        ap_from_tp_ranks(&ranks, self.n_gt, self.variant)
    }

    /// AP when the detection at `rank` drops out and a currently suppressed
    /// window that rescues a missed ground truth takes its own place,
    /// `insert_at` counted among the remaining detections.
    fn ap_with_yield(&self, rank: usize, insert_at: usize) -> f64 {
        let shift = |r: usize| if r > rank { r - 1 } else { r };
        let mut ranks: Vec<usize> =
            self.tp_ranks.iter().filter(|&&r| r != rank).map(|&r| shift(r)).collect();
        if self.is_tp(rank) {
            if let Some(&next) = self.group_of(rank).and_then(|m| m.get(1)) {
                ranks.push(shift(next));
            }
        }
        for r in ranks.iter_mut() {
            if *r >= insert_at {
                *r += 1;
            }
        }
        ranks.push(insert_at);
        ranks.sort_unstable();
        ap_from_tp_ranks(&ranks, self.n_gt, self.variant)
    }
}

/// Upward and downward steps of every post-NMS detection of one class.
pub fn find_steps(labels: &[DetectionLabel], n_gt: usize, variant: ApVariant) -> Result<Vec<WindowSteps>> {
    let ranked = RankedDetections::new(labels, n_gt, variant)?;
    let mut work = 0;
    Ok(ranked.find_steps(&mut work))
}

/// AP after moving the detection at rank `from` to rank `to`.
pub fn ap_delta(labels: &[DetectionLabel], n_gt: usize, variant: ApVariant, from: usize, to: usize) -> Result<f64> {
    Ok(RankedDetections::new(labels, n_gt, variant)?.ap_delta(from, to))
}

/// Steps of every window of one class, retained or suppressed.
#[derive(Debug, Clone)]
pub struct ClassSteps {
    pub class: usize,
    pub ap: f64,
    /// Indexed by image, then window.
    pub steps: Vec<Vec<WindowSteps>>,
    /// Step-profile computations performed for this class.
    pub work: usize,
}

/// Extends steps of the retained detections to all pre-NMS windows of a
/// class.
pub fn nms_aware_steps(
    dataset: &Dataset,
    scores: &ScoreTable,
    eval: &ClassEvaluation,
    ranked: &RankedDetections<'_>,
    retained: &[WindowSteps],
    match_iou: f64,
    work: &mut usize,
) -> Result<Vec<Vec<WindowSteps>>> {
    let class = eval.class;
    if retained.len() != eval.labels.len() || eval.nms.len() != dataset.images.len() {
        return Err(Error::Inconsistent("steps and evaluation disagree in size".into()));
    }
    let mut rank_of: Vec<Vec<Option<usize>>> =
        dataset.images.iter().map(|im| vec![None; im.proposals.len()]).collect();
    for (r, l) in eval.labels.iter().enumerate() {
        rank_of[l.image][l.window] = Some(r);
    }
    let mut steps: Vec<Vec<WindowSteps>> =
        dataset.images.iter().map(|im| vec![WindowSteps::default(); im.proposals.len()]).collect();
    for (r, l) in eval.labels.iter().enumerate() {
        steps[l.image][l.window] = retained[r];
    }

    let mut detected = vec![false; dataset.ground_truth.len()];
    for l in &eval.labels {
        if let (true, Some(g)) = (l.kind.is_tp(), l.matched_gt) {
            detected[g] = true;
        }
    }
    let mut missed: Vec<Vec<usize>> = vec![Vec::new(); dataset.images.len()];
    for g in &eval.ground_truth {
        if !detected[g.id] {
            missed[g.image].push(g.id);
        }
    }

    let mut rescue_cache: HashMap<usize, f64> = HashMap::new();
    // suppressor rank -> rescuing windows (image, window, score)
    let mut yields: HashMap<usize, Vec<(usize, usize, f64)>> = HashMap::new();
    for (image, outcome) in eval.nms.iter().enumerate() {
        for (&w, &d) in &outcome.suppressed_by {
            *work += 1;
            let d_rank = rank_of[image][d].ok_or_else(|| {
                Error::Inconsistent(format!("suppressor {d} of window {w} in image {image} is not retained"))
            })?;
            if rank_of[image][w].is_some() {
                return Err(Error::Inconsistent(format!("window {w} in image {image} is both retained and suppressed")));
            }
            let inherited = retained[d_rank].plus;
            let bbox = &dataset.images[image].proposals[w].bbox;
            let rescues = missed[image]
                .iter()
                .any(|&g| bbox.iou_unchecked(&dataset.ground_truth[g].bbox) > match_iou);
            let mut plus = inherited;
            if rescues {
                let ap = *rescue_cache.entry(d_rank).or_insert_with(|| ranked.ap_with_rescue_at(d_rank));
                if ap != ranked.ap() {
                    plus = nearest_plus(plus, Some(ScoreStep { position: scores.get(image, d, class), ap }));
                }
                yields.entry(d_rank).or_default().push((image, w, scores.get(image, w, class)));
            }
            steps[image][w].plus = plus;
        }
    }

    for (d_rank, mut cands) in yields {
        let d = &eval.labels[d_rank];
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let current = steps[d.image][d.window].minus;
        for (image, w, s) in cands {
            if current.is_some_and(|m| m.position >= s) {
                break;
            }
            let probe = ClassDetection { image, window: w, score: s, bbox: dataset.images[image].proposals[w].bbox };
            let below = &eval.detections[d_rank + 1..];
            let insert_at = d_rank + below.partition_point(|x| detection_order(x, &probe) == Ordering::Less);
            let ap = ranked.ap_with_yield(d_rank, insert_at);
            if ap != ranked.ap() {
                steps[d.image][d.window].minus = nearest_minus(current, Some(ScoreStep { position: s, ap }));
                break;
            }
        }
    }
    Ok(steps)
}

/// Evaluates one class and computes the steps of all its windows; `None`
/// when the class has no ground truth.
pub fn class_steps(
    dataset: &Dataset,
    scores: &ScoreTable,
    class: usize,
    nms_cfg: &NmsConfig,
    eval_cfg: &EvalConfig,
) -> Result<Option<ClassSteps>> {
    let Some(eval) = evaluate_class(dataset, scores, class, nms_cfg, eval_cfg) else {
        return Ok(None);
    };
    let ranked = RankedDetections::new(&eval.labels, eval.ground_truth.len(), eval_cfg.ap_variant)?;
    let mut work = 0;
    let retained = ranked.find_steps(&mut work);
    let steps = nms_aware_steps(dataset, scores, &eval, &ranked, &retained, eval_cfg.match_iou, &mut work)?;
    Ok(Some(ClassSteps { class, ap: eval.ap, steps, work }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    /// Constant inside `-log(mAP + epsilon)`.
    pub epsilon_log: f64,
    /// Weight of the L4 score regulariser.
    pub lambda_reg: f64,
    /// Elementwise gradient clip; `f64::INFINITY` disables clipping.
    pub clip_threshold: f64,
    pub estimator: EstimatorConfig,
    pub nms: NmsConfig,
    pub eval: EvalConfig,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            epsilon_log: 0.01,
            lambda_reg: 1e-4,
            clip_threshold: 1.0,
            estimator: EstimatorConfig::default(),
            nms: NmsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl LossConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.epsilon_log > 0.0 && self.epsilon_log.is_finite()) {
            return Err(Error::config("epsilon_log must be positive"));
        }
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::config("lambda_reg must be non-negative"));
        }
        if !(self.clip_threshold > 0.0) {
            return Err(Error::config("clip_threshold must be positive"));
        }
        self.estimator.check()?;
        self.nms.check()?;
        self.eval.check()
    }
}

/// Gradient of the loss with respect to every (image, window, class) score.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField(ScoreTable);

impl GradientField {
    pub fn zeros(dataset: &Dataset) -> Self {
        GradientField(ScoreTable::zeros(dataset))
    }

    pub fn from_table(table: ScoreTable) -> Self {
        GradientField(table)
    }

    pub fn get(&self, image: usize, window: usize, class: usize) -> f64 {
        self.0.get(image, window, class)
    }

    pub fn set(&mut self, image: usize, window: usize, class: usize, value: f64) {
        self.0.set(image, window, class, value)
    }

    pub fn table(&self) -> &ScoreTable {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }

    pub fn norm(&self) -> f64 {
        self.0.values().iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Clamps every element to `[-threshold, threshold]`; returns how many
    /// elements were changed.
    pub fn clip_in_place(&mut self, threshold: f64) -> usize {
        let mut clipped = 0;
        for v in self.0.values_mut() {
            let c = v.clamp(-threshold, threshold);
            if c != *v {
                clipped += 1;
                *v = c;
            }
        }
        clipped
    }
}

pub fn clip_gradient(grad: &GradientField, threshold: f64) -> GradientField {
    let mut out = grad.clone();
    out.clip_in_place(threshold);
    out
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub loss: f64,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    /// Clipped gradient.
    pub grad: GradientField,
    pub clipped: usize,
    /// Steps per class (empty for classes without ground truth), image, window.
    pub steps: Vec<Vec<Vec<WindowSteps>>>,
    /// Step-profile computations per class.
    pub work: Vec<usize>,
}

/// Forward and backward pass of
/// `-log(mAP + eps) + lambda * sum |s|^4` over a batch.
pub fn loss_and_gradient(scores: &ScoreTable, batch: &Dataset, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.check()?;
    if !scores.matches(batch) {
        return Err(Error::Input("score table does not match the batch".into()));
    }
    let per_class: Vec<Option<ClassSteps>> = (0..batch.num_classes)
        .into_par_iter()
        .map(|c| class_steps(batch, scores, c, &cfg.nms, &cfg.eval))
        .collect::<Result<_>>()?;
    let per_class_ap: Vec<Option<f64>> = per_class.iter().map(|c| c.as_ref().map(|c| c.ap)).collect();
    let map = mean_of_present(&per_class_ap)?;
    let k_eff = per_class_ap.iter().flatten().count() as f64;
    let outer = -1.0 / (k_eff * (map + cfg.epsilon_log));

    let reg: f64 = scores.values().iter().map(|s| s.powi(4)).sum();
    let loss = -(map + cfg.epsilon_log).ln() + cfg.lambda_reg * reg;

    let mut grad = ScoreTable::from_fn(batch, |i, w, c| 4.0 * cfg.lambda_reg * scores.get(i, w, c).powi(3));
    for cs in per_class.iter().flatten() {
        for (i, per_image) in cs.steps.iter().enumerate() {
            for (w, st) in per_image.iter().enumerate() {
                if st.plus.is_none() && st.minus.is_none() {
                    continue;
                }
                let s = scores.get(i, w, cs.class);
                let dap = estimate(&st.profile(s, cs.ap), &cfg.estimator);
                *grad.get_mut(i, w, cs.class) += outer * dap;
            }
        }
    }
    let mut grad = GradientField(grad);
    let clipped = grad.clip_in_place(cfg.clip_threshold);

    let work = per_class.iter().map(|c| c.as_ref().map_or(0, |c| c.work)).collect();
    let steps = per_class.into_iter().map(|c| c.map(|c| c.steps).unwrap_or_default()).collect();
    Ok(LossOutput { loss, map, per_class_ap, grad, clipped, steps, work })
}
