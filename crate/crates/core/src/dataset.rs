//! Dataset container and the per-(window, class) score table.
//!
//! External files name images and windows with opaque strings; internally
//! both are dense indices (position in [`Dataset::images`] and in
//! [`Image::proposals`]).

use std::collections::HashSet;
use std::fmt;

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalWindow {
    pub id: String,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthObject {
    /// Index into [`Dataset::images`].
    pub image: usize,
    pub class: usize,
    pub bbox: BoundingBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub id: String,
    pub proposals: Vec<ProposalWindow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub images: Vec<Image>,
    pub ground_truth: Vec<GroundTruthObject>,
}

/// A broken dataset invariant. Validation reports these as data.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    NoClasses,
    DuplicateImageId(String),
    DuplicateWindowId { image: String, window: String },
    InvalidProposalBox { image: String, window: String },
    UnknownImage { ground_truth: usize, image: usize },
    ClassOutOfRange { ground_truth: usize, class: usize },
    InvalidGroundTruthBox { ground_truth: usize },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::NoClasses => write!(f, "class count must be at least 1"),
            Violation::DuplicateImageId(id) => write!(f, "duplicate image id {id:?}"),
            Violation::DuplicateWindowId { image, window } => {
                write!(f, "duplicate window id {window:?} in image {image:?}")
            }
            Violation::InvalidProposalBox { image, window } => {
                write!(f, "invalid box for window {window:?} in image {image:?}")
            }
            Violation::UnknownImage { ground_truth, image } => {
                write!(f, "ground truth #{ground_truth} references unknown image #{image}")
            }
            Violation::ClassOutOfRange { ground_truth, class } => {
                write!(f, "ground truth #{ground_truth} has class {class} out of range")
            }
            Violation::InvalidGroundTruthBox { ground_truth } => {
                write!(f, "ground truth #{ground_truth} has an invalid box")
            }
        }
    }
}

impl Dataset {
    pub fn num_windows(&self) -> usize {
        self.images.iter().map(|im| im.proposals.len()).sum()
    }

    /// Checks every type invariant; an empty result means the dataset is
    /// well formed.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        if self.num_classes == 0 {
            out.push(Violation::NoClasses);
        }
        let mut image_ids = HashSet::new();
        for image in &self.images {
            if !image_ids.insert(image.id.as_str()) {
                out.push(Violation::DuplicateImageId(image.id.clone()));
            }
            let mut window_ids = HashSet::new();
            for w in &image.proposals {
                if !window_ids.insert(w.id.as_str()) {
                    out.push(Violation::DuplicateWindowId {
                        image: image.id.clone(),
                        window: w.id.clone(),
                    });
                }
                if !w.bbox.is_valid() {
                    out.push(Violation::InvalidProposalBox {
                        image: image.id.clone(),
                        window: w.id.clone(),
                    });
                }
            }
        }
        for (i, gt) in self.ground_truth.iter().enumerate() {
            if gt.image >= self.images.len() {
                out.push(Violation::UnknownImage { ground_truth: i, image: gt.image });
            }
            if gt.class >= self.num_classes {
                out.push(Violation::ClassOutOfRange { ground_truth: i, class: gt.class });
            }
            if !gt.bbox.is_valid() {
                out.push(Violation::InvalidGroundTruthBox { ground_truth: i });
            }
        }
        out
    }

    /// Like [`validate`](Self::validate) but fails on the first violation.
    pub fn ensure_valid(&self) -> Result<()> {
        match self.validate().first() {
            None => Ok(()),
            Some(v) => Err(Error::Input(v.to_string())),
        }
    }

    /// Number of ground-truth instances per class.
    pub fn gt_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for gt in &self.ground_truth {
            counts[gt.class] += 1;
        }
        counts
    }

    /// Ground-truth indices grouped by image.
    pub fn gt_by_image(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.images.len()];
        for (i, gt) in self.ground_truth.iter().enumerate() {
            out[gt.image].push(i);
        }
        out
    }

    /// Whether a window overlaps any ground truth (of any class) by more
    /// than `threshold` IoU.
    pub fn is_foreground(&self, gt_by_image: &[Vec<usize>], image: usize, window: usize, threshold: f64) -> bool {
        let b = &self.images[image].proposals[window].bbox;
        gt_by_image[image]
            .iter()
            .any(|&g| b.iou_unchecked(&self.ground_truth[g].bbox) > threshold)
    }
}

/// One real value per (image, window, class), stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTable {
    num_classes: usize,
    offsets: Vec<usize>,
    values: Vec<f64>,
}

impl ScoreTable {
    /// All-zero table shaped like `dataset`.
    pub fn zeros(dataset: &Dataset) -> Self {
        Self::from_fn(dataset, |_, _, _| 0.0)
    }

    pub fn from_fn(dataset: &Dataset, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let k = dataset.num_classes;
        let mut offsets = Vec::with_capacity(dataset.images.len() + 1);
        let mut values = Vec::with_capacity(dataset.num_windows() * k);
        offsets.push(0);
        for (i, image) in dataset.images.iter().enumerate() {
            for w in 0..image.proposals.len() {
                for c in 0..k {
                    values.push(f(i, w, c));
                }
            }
            offsets.push(offsets[i] + image.proposals.len());
        }
        ScoreTable { num_classes: k, offsets, values }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_images(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn num_windows(&self, image: usize) -> usize {
        self.offsets[image + 1] - self.offsets[image]
    }

    /// Whether the table has exactly the shape of `dataset`.
    pub fn matches(&self, dataset: &Dataset) -> bool {
        self.num_classes == dataset.num_classes
            && self.num_images() == dataset.images.len()
            && dataset
                .images
                .iter()
                .enumerate()
                .all(|(i, im)| self.num_windows(i) == im.proposals.len())
    }

    fn index(&self, image: usize, window: usize, class: usize) -> usize {
        debug_assert!(class < self.num_classes);
        debug_assert!(window < self.num_windows(image));
        (self.offsets[image] + window) * self.num_classes + class
    }

    pub fn get(&self, image: usize, window: usize, class: usize) -> f64 {
        self.values[self.index(image, window, class)]
    }

    pub fn set(&mut self, image: usize, window: usize, class: usize, value: f64) {
        let i = self.index(image, window, class);
        self.values[i] = value;
    }

    pub fn get_mut(&mut self, image: usize, window: usize, class: usize) -> &mut f64 {
        let i = self.index(image, window, class);
        &mut self.values[i]
    }

    /// Flat view in (image, window, class) order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Iterates `(image, window, class, value)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize, f64)> + '_ {
        (0..self.num_images()).flat_map(move |i| {
            (0..self.num_windows(i)).flat_map(move |w| {
                (0..self.num_classes).map(move |c| (i, w, c, self.get(i, w, c)))
            })
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn small() -> Dataset {
        Dataset {
            num_classes: 2,
            images: vec![
                Image {
                    id: "a".into(),
                    proposals: vec![
                        ProposalWindow { id: "w0".into(), bbox: bx(0., 0., 10., 10.) },
                        ProposalWindow { id: "w1".into(), bbox: bx(20., 20., 30., 30.) },
                    ],
                },
                Image {
                    id: "b".into(),
                    proposals: vec![ProposalWindow { id: "w0".into(), bbox: bx(0., 0., 5., 5.) }],
                },
            ],
            ground_truth: vec![GroundTruthObject { image: 0, class: 1, bbox: bx(0., 0., 9., 10.) }],
        }
    }

    #[test]
    fn well_formed_dataset_has_no_violations() {
        assert!(small().validate().is_empty());
    }

    #[test]
    fn unknown_image_is_reported() {
        let mut d = small();
        d.ground_truth.push(GroundTruthObject { image: 7, class: 0, bbox: bx(0., 0., 1., 1.) });
        assert_eq!(d.validate(), vec![Violation::UnknownImage { ground_truth: 1, image: 7 }]);
    }

    #[test]
    fn zero_width_box_is_reported() {
        let mut d = small();
        d.images[1].proposals[0].bbox.x_max = 0.0;
        assert_eq!(
            d.validate(),
            vec![Violation::InvalidProposalBox { image: "b".into(), window: "w0".into() }]
        );
    }

    #[test]
    fn other_violations() {
        let mut d = small();
        d.num_classes = 1;
        d.images[0].proposals[1].id = "w0".into();
        let v = d.validate();
        assert_eq!(v.len(), 2);
        assert!(v.contains(&Violation::ClassOutOfRange { ground_truth: 0, class: 1 }));
        assert!(d.ensure_valid().is_err());
    }

    #[test]
    fn score_table_layout() {
        let d = small();
        let t = ScoreTable::from_fn(&d, |i, w, c| (i * 100 + w * 10 + c) as f64);
        assert!(t.matches(&d));
        assert_eq!(t.values().len(), 6);
        assert_eq!(t.get(1, 0, 1), 101.0);
        assert_eq!(t.get(0, 1, 0), 10.0);
        let collected: Vec<_> = t.iter().map(|(i, w, c, _)| (i, w, c)).collect();
        assert_eq!(collected[3], (0, 1, 1));
        assert_eq!(d.gt_counts(), vec![0, 1]);
    }
}
