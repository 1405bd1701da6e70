//! Confusion-matrix metrics: IoU, Dice and the confusion ratio FP/TP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::refine::IGNORE;

/// `counts[gt * k + pred]` over `k = M + 1` labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    /// Accumulate one label map; ground-truth 255 pixels are skipped.
    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if p >= self.k || g >= self.k {
                return Err(Error::Data(format!("label {} outside 0..{}", p.max(g), self.k)));
            }
            self.counts[g * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("confusion merge", &[self.k], &[other.k]));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn at(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    /// `(tp, fp, fn)` for one label.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.at(c, c);
        let col: u64 = (0..self.k).map(|g| self.at(g, c)).sum();
        let row: u64 = (0..self.k).map(|p| self.at(c, p)).sum();
        (tp, col - tp, row - tp)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    /// Ground truth contains this class.
    pub present: bool,
    pub iou: Option<f64>,
    pub dice: Option<f64>,
    /// `FP / TP`; `None` when `TP = 0`.
    pub cr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean IoU over labels present in ground truth, background included.
    pub miou: f64,
    /// Mean Dice over present foreground classes.
    pub dsc: Option<f64>,
    /// Mean confusion ratio over present foreground classes with `TP > 0`.
    pub cr: Option<f64>,
    pub confusion: ConfusionMatrix,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        if confusion.total() == 0 {
            return Err(Error::Data("no labelled pixels to evaluate".into()));
        }
        let per_class: Vec<ClassMetrics> = (0..confusion.k)
            .map(|c| {
                let (tp, fp, fn_) = confusion.class_counts(c);
                let present = tp + fn_ > 0;
                let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
                ClassMetrics {
                    class: c,
                    tp,
                    fp,
                    fn_,
                    present,
                    iou: ratio(tp, tp + fp + fn_),
                    dice: ratio(2 * tp, 2 * tp + fp + fn_),
                    cr: ratio(fp, tp),
                }
            })
            .collect();
        let present = || per_class.iter().filter(|m| m.present);
        let miou = mean(present().filter_map(|m| m.iou)).unwrap_or(0.0);
        let dsc = mean(present().filter(|m| m.class > 0).filter_map(|m| m.dice));
        let cr = mean(present().filter(|m| m.class > 0).filter_map(|m| m.cr));
        Ok(MetricsReport {
            per_class,
            miou,
            dsc,
            cr,
            confusion,
        })
    }
}
