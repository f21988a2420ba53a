//! JSON and CSV file formats.
//!
//! Dataset JSON:
//! `{"classes": K, "images": [{"id": str, "proposals": [{"id": str, "box": [x0,y0,x1,y1]}],
//! "ground_truth": [{"class": int, "box": [...]}]}]}`
//!
//! Scores JSON: `{"scores": [{"image": str, "window": str, "class": int, "score": float}]}`

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, GroundTruthObject, Image, ProposalWindow, ScoreTable};
use crate::error::{Error, Result};
use crate::eval::{DetectionKind, DetectionLabel, PrCurve};
use crate::geometry::BoundingBox;
use crate::loss::{GradientField, WindowSteps};
use crate::trainer::TrainHistory;

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    classes: usize,
    images: Vec<ImageFile>,
}

#[derive(Serialize, Deserialize)]
struct ImageFile {
    id: String,
    proposals: Vec<ProposalFile>,
    #[serde(default)]
    ground_truth: Vec<GroundTruthFile>,
}

#[derive(Serialize, Deserialize)]
struct ProposalFile {
    id: String,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    class: usize,
    #[serde(rename = "box")]
    bbox: BoundingBox,
}

#[derive(Serialize, Deserialize)]
struct ScoresFile {
    scores: Vec<ScoreEntry>,
}

#[derive(Serialize, Deserialize)]
struct ScoreEntry {
    image: String,
    window: String,
    class: usize,
    score: f64,
}

/// Parses a dataset and rejects it if any invariant is violated.
pub fn read_dataset(reader: impl Read) -> Result<Dataset> {
    let file: DatasetFile = serde_json::from_reader(reader)?;
    let mut ground_truth = Vec::new();
    let images = file
        .images
        .into_iter()
        .enumerate()
        .map(|(i, im)| {
            ground_truth.extend(im.ground_truth.into_iter().map(|g| GroundTruthObject {
                image: i,
                class: g.class,
                bbox: g.bbox,
            }));
            Image {
                id: im.id,
                proposals: im
                    .proposals
                    .into_iter()
                    .map(|p| ProposalWindow { id: p.id, bbox: p.bbox })
                    .collect(),
            }
        })
        .collect();
    let dataset = Dataset { num_classes: file.classes, images, ground_truth };
    dataset.ensure_valid()?;
    Ok(dataset)
}

pub fn write_dataset(dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    let gt_by_image = dataset.gt_by_image();
    let file = DatasetFile {
        classes: dataset.num_classes,
        images: dataset
            .images
            .iter()
            .zip(&gt_by_image)
            .map(|(im, gts)| ImageFile {
                id: im.id.clone(),
                proposals: im
                    .proposals
                    .iter()
                    .map(|p| ProposalFile { id: p.id.clone(), bbox: p.bbox })
                    .collect(),
                ground_truth: gts
                    .iter()
                    .map(|&g| GroundTruthFile {
                        class: dataset.ground_truth[g].class,
                        bbox: dataset.ground_truth[g].bbox,
                    })
                    .collect(),
            })
            .collect(),
    };
    serde_json::to_writer_pretty(&mut writer, &file)?;
    writeln!(writer)?;
    Ok(())
}

/// Reads scores for `dataset`. Every (window, class) pair must appear
/// exactly once; entry order is irrelevant.
pub fn read_scores(reader: impl Read, dataset: &Dataset) -> Result<ScoreTable> {
    let file: ScoresFile = serde_json::from_reader(reader)?;
    let mut lookup: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    for (i, im) in dataset.images.iter().enumerate() {
        for (w, p) in im.proposals.iter().enumerate() {
            lookup.insert((im.id.as_str(), p.id.as_str()), (i, w));
        }
    }
    let offsets: Vec<usize> = dataset
        .images
        .iter()
        .scan(0, |acc, im| {
            let start = *acc;
            *acc += im.proposals.len();
            Some(start)
        })
        .collect();
    let mut table = ScoreTable::zeros(dataset);
    let mut seen = vec![false; table.values().len()];
    for e in &file.scores {
        let &(i, w) = lookup
            .get(&(e.image.as_str(), e.window.as_str()))
            .ok_or_else(|| Error::Input(format!("unknown window {}/{}", e.image, e.window)))?;
        if e.class >= dataset.num_classes {
            return Err(Error::Input(format!("class {} out of range", e.class)));
        }
        if !e.score.is_finite() {
            return Err(Error::Input(format!("non-finite score for {}/{}", e.image, e.window)));
        }
        let idx = (offsets[i] + w) * dataset.num_classes + e.class;
        if seen[idx] {
            return Err(Error::Input(format!(
                "duplicate score for {}/{} class {}",
                e.image, e.window, e.class
            )));
        }
        seen[idx] = true;
        table.set(i, w, e.class, e.score);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::Input(format!("missing score entry #{missing} of the (window, class) grid")));
    }
    Ok(table)
}

pub fn write_scores(scores: &ScoreTable, dataset: &Dataset, mut writer: impl Write) -> Result<()> {
    let file = ScoresFile {
        scores: scores
            .iter()
            .map(|(i, w, c, s)| ScoreEntry {
                image: dataset.images[i].id.clone(),
                window: dataset.images[i].proposals[w].id.clone(),
                class: c,
                score: s,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(&mut writer, &file)?;
    writeln!(writer)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    read_dataset(std::io::BufReader::new(std::fs::File::open(path)?))
}

pub fn load_scores(path: impl AsRef<Path>, dataset: &Dataset) -> Result<ScoreTable> {
    read_scores(std::io::BufReader::new(std::fs::File::open(path)?), dataset)
}

pub fn save_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn save_scores(scores: &ScoreTable, dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_scores(scores, dataset, std::io::BufWriter::new(std::fs::File::create(path)?))
}

/// PR curve CSV: `rank, score, kind, recall, precision, interp_precision`.
pub fn write_pr_csv(labels: &[DetectionLabel], curve: &PrCurve, writer: impl Write) -> Result<()> {
    let interp = curve.interpolate();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["rank", "score", "kind", "recall", "precision", "interp_precision"])?;
    for (rank, ((label, p), q)) in labels.iter().zip(&curve.points).zip(&interp.points).enumerate() {
        let kind = match label.kind {
            DetectionKind::TruePositive => "TP",
            DetectionKind::FalsePositive => "FP",
        };
        w.write_record([
            (rank + 1).to_string(),
            label.score.to_string(),
            kind.to_string(),
            p.recall.to_string(),
            p.precision.to_string(),
            q.precision.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Gradient dump CSV:
/// `image, window, class, score, delta_plus, ap_plus, delta_minus, ap_minus, grad`.
/// Absent steps are written as empty fields.
pub fn write_gradient_dump(
    dataset: &Dataset,
    scores: &ScoreTable,
    steps: &[Vec<Vec<WindowSteps>>],
    grad: &GradientField,
    writer: impl Write,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "image", "window", "class", "score", "delta_plus", "ap_plus", "delta_minus", "ap_minus", "grad",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for (i, w_idx, c, s) in scores.iter() {
        let st = steps
            .get(c)
            .and_then(|per_image| per_image.get(i))
            .and_then(|per_window| per_window.get(w_idx))
            .copied()
            .unwrap_or_default();
        w.write_record([
            dataset.images[i].id.clone(),
            dataset.images[i].proposals[w_idx].id.clone(),
            c.to_string(),
            s.to_string(),
            opt(st.plus.map(|p| p.position - s)),
            opt(st.plus.map(|p| p.ap)),
            opt(st.minus.map(|m| s - m.position)),
            opt(st.minus.map(|m| m.ap)),
            grad.get(i, w_idx, c).to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// History CSV: `iteration, loss, batch_map, full_map, grad_norm, clipped_fraction`;
/// `full_map` is blank on iterations where it was not sampled.
pub fn write_history_csv(history: &TrainHistory, writer: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["iteration", "loss", "batch_map", "full_map", "grad_norm", "clipped_fraction"])?;
    for r in &history.records {
        w.write_record([
            r.iteration.to_string(),
            r.loss.to_string(),
            r.batch_map.to_string(),
            r.full_map.map(|v| v.to_string()).unwrap_or_default(),
            r.grad_norm.to_string(),
            r.clipped_fraction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
