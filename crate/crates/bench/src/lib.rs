//! Fixtures shared by the benchmarks.

use mapgrad::eval::evaluate_class;
use mapgrad::{ApVariant, Dataset, DetectionLabel, EvalConfig, NmsConfig, ScoreTable, SynthConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic dataset of `num_images` images with uniform random scores.
pub fn scored_dataset(num_images: usize, seed: u64) -> (Dataset, ScoreTable) {
    let cfg = SynthConfig { num_images, seed, ..SynthConfig::default() };
    let dataset = mapgrad::synth::generate(&cfg).expect("default synth config is valid");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let scores = ScoreTable::from_fn(&dataset, |_, _, _| rng.gen::<f64>());
    (dataset, scores)
}

/// Matched detections of class 0 after NMS, and the class's ground-truth count.
pub fn class_labels(dataset: &Dataset, scores: &ScoreTable, variant: ApVariant) -> (Vec<DetectionLabel>, usize) {
    let eval = EvalConfig { ap_variant: variant, ..EvalConfig::default() };
    let e = evaluate_class(dataset, scores, 0, &NmsConfig::default(), &eval).expect("class 0 has ground truth");
    (e.labels, e.ground_truth.len())
}
