use std::path::Path;
use std::thread;

use serde::Serialize;

use super::model::Model;
use super::synth::{write_json, Dataset, Sample};
use crate::error::{Error, Result};
use crate::refine::{PseudoMask, IGNORE};

use super::metrics::{ConfusionMatrix, MetricsReport};

pub const METRICS_FILE: &str = "metrics.json";

fn labelled(data: &Dataset) -> Result<Vec<&Sample>> {
    let samples: Vec<&Sample> = data.samples.iter().filter(|s| s.gt.is_some()).collect();
    if samples.is_empty() {
        return Err(Error::Data(format!("{} has no ground-truth masks", data.root.display())));
    }
    Ok(samples)
}

/// Run `per_image` over the samples on scoped worker threads, each folding
/// into its own confusion matrices, then merge.
fn accumulate<F>(samples: &[&Sample], k: usize, outputs: usize, per_image: F) -> Result<Vec<ConfusionMatrix>>
where
    F: Fn(&Sample, &mut [ConfusionMatrix]) -> Result<()> + Sync,
{
    let workers = thread::available_parallelism().map_or(1, |n| n.get()).min(samples.len()).max(1);
    let chunk = samples.len().div_ceil(workers);
    let partials: Vec<Result<Vec<ConfusionMatrix>>> = thread::scope(|s| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|part| {
                let per_image = &per_image;
                s.spawn(move || {
                    let mut cms = vec![ConfusionMatrix::new(k); outputs];
                    for sample in part {
                        per_image(sample, &mut cms)?;
                    }
                    Ok(cms)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut total = vec![ConfusionMatrix::new(k); outputs];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part?) {
            t.merge(&p)?;
        }
    }
    Ok(total)
}

/// Nearest upsampling of a grid prediction to the ground-truth resolution.
fn at_gt(mask: &PseudoMask, gt: &PseudoMask) -> PseudoMask {
    mask.resized(gt.height, gt.width)
}

/// Segmentation-head predictions against ground truth at image resolution.
pub fn evaluate(model: &Model, data: &Dataset) -> Result<MetricsReport> {
    let k = model.cfg.encoder.num_classes + 1;
    if data.num_classes + 1 != k {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes,
            k - 1
        )));
    }
    let samples = labelled(data)?;
    let cms = accumulate(&samples, k, 1, |sample, cms| {
        let gt = sample.gt.as_ref().expect("filtered to labelled samples");
        let pred = model.predict(&sample.image)?;
        cms[0].add(&at_gt(&pred.mask, gt).labels, &gt.labels)
    })?;
    MetricsReport::from_confusion(cms.into_iter().next().expect("one output"))
}

/// Quality of the training targets: the thresholded class maps, each mask
/// source and the refined mask, all scored against ground truth. Ignored
/// pixels count as background so that every mask covers the same pixels.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PseudoLabelReport {
    pub raw_cam: MetricsReport,
    pub refined: MetricsReport,
    pub p1: Option<MetricsReport>,
    pub p2: Option<MetricsReport>,
    pub p3: Option<MetricsReport>,
}

fn ignore_as_background(mask: &PseudoMask) -> Vec<u8> {
    mask.labels.iter().map(|&v| if v == IGNORE { 0 } else { v }).collect()
}

pub fn evaluate_pseudo_labels(model: &Model, data: &Dataset) -> Result<PseudoLabelReport> {
    let k = model.cfg.encoder.num_classes + 1;
    let samples = labelled(data)?;
    let with_sources = model.cfg.uses_masking();
    let cms = accumulate(&samples, k, 5, |sample, cms| {
        let gt = sample.gt.as_ref().expect("filtered to labelled samples");
        let pl = model.pseudo_labels(&sample.image, &sample.labels)?;
        let mut masks = vec![&pl.raw_cam, &pl.refined];
        if let Some(src) = &pl.sources {
            masks.extend([&src.p1, &src.p2, &src.p3]);
        }
        for (cm, mask) in cms.iter_mut().zip(masks) {
            cm.add(&ignore_as_background(&at_gt(mask, gt)), &gt.labels)?;
        }
        Ok(())
    })?;
    let mut reports = cms.into_iter().map(MetricsReport::from_confusion);
    let raw_cam = reports.next().expect("five outputs")?;
    let refined = reports.next().expect("five outputs")?;
    let mut source = || -> Result<Option<MetricsReport>> {
        let r = reports.next().expect("five outputs");
        if with_sources {
            r.map(Some)
        } else {
            Ok(None)
        }
    };
    Ok(PseudoLabelReport {
        raw_cam,
        refined,
        p1: source()?,
        p2: source()?,
        p3: source()?,
    })
}

pub fn write_metrics(path: &Path, value: &impl Serialize) -> Result<()> {
    write_json(path, value)
}
