//! Greedy non-maximum suppression with suppression bookkeeping.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    /// Windows overlapping a retained window by strictly more than this IoU
    /// are suppressed.
    pub overlap_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig { overlap_threshold: 0.3 }
    }
}

impl NmsConfig {
    pub fn new(overlap_threshold: f64) -> Result<Self> {
        let cfg = NmsConfig { overlap_threshold };
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<()> {
        if self.overlap_threshold > 0.0 && self.overlap_threshold < 1.0 {
            Ok(())
        } else {
            Err(Error::config(format!(
                "NMS overlap threshold must lie in (0, 1), got {}",
                self.overlap_threshold
            )))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsCandidate {
    pub window: usize,
    pub bbox: BoundingBox,
    pub score: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NmsOutcome {
    /// Retained window ids in decreasing score order.
    pub retained: Vec<usize>,
    /// Suppressed window id -> the retained window that suppressed it.
    pub suppressed_by: BTreeMap<usize, usize>,
}

impl NmsOutcome {
    pub fn is_retained(&self, window: usize) -> bool {
        !self.suppressed_by.contains_key(&window)
    }
}

/// Decreasing score, ties to the lower window id.
pub(crate) fn score_order(a_score: f64, a_id: usize, b_score: f64, b_id: usize) -> Ordering {
    b_score.total_cmp(&a_score).then(a_id.cmp(&b_id))
}

/// Repeatedly retains the highest-scored unmarked window and suppresses
/// every unmarked window overlapping it by more than the threshold.
/// Each suppressed window is attributed to the first retained window that
/// marked it.
pub fn run_nms(windows: &[NmsCandidate], cfg: &NmsConfig) -> NmsOutcome {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.sort_by(|&a, &b| {
        score_order(windows[a].score, windows[a].window, windows[b].score, windows[b].window)
    });
    let sorted: Vec<&NmsCandidate> = order.iter().map(|&i| &windows[i]).collect();
    let areas: Vec<f64> = sorted.iter().map(|w| w.bbox.area()).collect();

    let mut marked = vec![false; sorted.len()];
    let mut outcome = NmsOutcome::default();
    for i in 0..sorted.len() {
        if marked[i] {
            continue;
        }
        marked[i] = true;
        outcome.retained.push(sorted[i].window);
        let a = &sorted[i].bbox;
        for j in i + 1..sorted.len() {
            if marked[j] {
                continue;
            }
            let inter = a.intersection_area(&sorted[j].bbox);
            if inter > 0.0 && inter / (areas[i] + areas[j] - inter) > cfg.overlap_threshold {
                marked[j] = true;
                outcome.suppressed_by.insert(sorted[j].window, sorted[i].window);
            }
        }
    }
    outcome
}
