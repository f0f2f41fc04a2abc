//! Per-class IoU and global pixel accuracy over pooled confusion counts.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::IntTensor;

pub const NUM_CLASSES: usize = 2;

/// Pixel counts pooled over any number of images.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    /// Per class: pixels predicted `c` and labelled `c`.
    pub intersection: [u64; NUM_CLASSES],
    /// Per class: pixels predicted `c` or labelled `c`.
    pub union: [u64; NUM_CLASSES],
    pub correct: u64,
    pub total: u64,
}

impl ConfusionCounts {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, pred: &IntTensor, truth: &IntTensor) -> Result<()> {
        if pred.shape() != truth.shape() {
            return Err(invalid!(
                "prediction {:?} and truth {:?} differ in shape",
                pred.shape(),
                truth.shape()
            ));
        }
        if pred.data().iter().chain(truth.data()).any(|&v| v as usize >= NUM_CLASSES) {
            return Err(invalid!("labels must be 0 or 1"));
        }
        // Joint histogram: index 2*pred + truth.
        let mut joint = [0u64; 4];
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            joint[(2 * p + t) as usize] += 1;
        }
        let [bb, bp, pb, pp] = joint;
        self.intersection[0] += bb;
        self.intersection[1] += pp;
        self.union[0] += bb + bp + pb;
        self.union[1] += pp + bp + pb;
        self.correct += bb + pp;
        self.total += bb + bp + pb + pp;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        for c in 0..NUM_CLASSES {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
        }
        self.correct += other.correct;
        self.total += other.total;
    }

    /// IoU of class `c`; a class that is neither present nor predicted
    /// scores 1.
    pub fn iou(&self, c: usize) -> f64 {
        if self.union[c] == 0 {
            1.0
        } else {
            self.intersection[c] as f64 / self.union[c] as f64
        }
    }

    pub fn finalize(&self) -> Result<MetricsReport> {
        if self.total == 0 {
            return Err(invalid!("no pixels were accumulated"));
        }
        Ok(MetricsReport::from_parts(
            self.iou(0),
            self.iou(1),
            self.correct as f64 / self.total as f64,
        ))
    }
}

/// Background, polyp and mean IoU plus global accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub iou_background: f64,
    pub iou_polyp: f64,
    pub iou_mean: f64,
    #[serde(rename = "accuracy_mean")]
    pub global_accuracy: f64,
}

impl MetricsReport {
    pub fn from_parts(iou_background: f64, iou_polyp: f64, global_accuracy: f64) -> Self {
        MetricsReport {
            iou_background,
            iou_polyp,
            iou_mean: (iou_background + iou_polyp) / 2.0,
            global_accuracy,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}
