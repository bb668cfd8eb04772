//! mIoU and anymodal evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{downsample_labels, Dataset, SceneSample};
use crate::error::{AnysegError, Result};
use crate::modality::{all_subsets, ModalityMask};
use crate::segmentor::{argmax_labels, infer, SegmentorParams};

/// Per-class IoU (`None` when the class is absent from both maps) and their
/// mean over present classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouResult {
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

pub fn compute_miou(pred: &[u8], truth: &[u8], num_classes: usize) -> Result<MiouResult> {
    if pred.len() != truth.len() {
        return Err(AnysegError::Shape(format!(
            "prediction has {} positions, ground truth {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut inter = vec![0usize; num_classes];
    let mut union = vec![0usize; num_classes];
    for (i, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        for l in [p, t] {
            if l as usize >= num_classes {
                return Err(AnysegError::LabelOutOfRange {
                    position: i,
                    label: l as usize,
                    classes: num_classes,
                });
            }
        }
        if p == t {
            inter[p as usize] += 1;
            union[p as usize] += 1;
        } else {
            union[p as usize] += 1;
            union[t as usize] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = inter
        .iter()
        .zip(&union)
        .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouResult { per_class, miou })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub subset: ModalityMask,
    pub result: MiouResult,
}

/// One row per non-empty modality subset plus their mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub num_classes: usize,
    pub rows: Vec<EvalRow>,
    pub mean: f64,
}

impl EvalTable {
    pub fn miou(&self, subset: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.subset.label() == subset)
            .map(|r| r.result.miou)
    }

    /// `subset,miou,iou_0,...` with IoUs as fractions; absent classes are
    /// empty cells. The final row holds the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("subset,miou");
        for k in 0..self.num_classes {
            let _ = write!(out, ",iou_{k}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{},{}", row.subset.label(), row.result.miou);
            for iou in &row.result.per_class {
                out.push(',');
                if let Some(v) = iou {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        let _ = write!(out, "Mean,{}", self.mean);
        out.push_str(&",".repeat(self.num_classes));
        out.push('\n');
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| AnysegError::io(path, e))
    }
}

/// Evaluates `predict` on every non-empty subset of the dataset's
/// modalities. Subsets run in parallel; rows keep canonical subset order.
/// mIoU is computed over all positions of all samples at once.
pub fn evaluate_with<F>(dataset: &Dataset, predict: F) -> Result<EvalTable>
where
    F: Fn(ModalityMask, &SceneSample) -> Result<Vec<u8>> + Sync,
{
    let k = dataset.manifest.num_classes;
    if dataset.samples.is_empty() {
        return Err(AnysegError::Config("evaluation dataset is empty".into()));
    }
    let truth: Vec<u8> = dataset
        .samples
        .iter()
        .flat_map(|s| downsample_labels(&s.labels, s.height, s.width, 2, k))
        .collect();
    let subsets = all_subsets(&dataset.manifest.modalities);
    let rows = subsets
        .par_iter()
        .map(|&subset| {
            let mut pred = Vec::with_capacity(truth.len());
            for s in &dataset.samples {
                let p = predict(subset, s)?;
                if p.is_empty() {
                    return Err(AnysegError::Invariant(format!("empty prediction for subset {subset}")));
                }
                pred.extend(p);
            }
            Ok(EvalRow {
                subset,
                result: compute_miou(&pred, &truth, k)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = rows.iter().map(|r| r.result.miou).sum::<f64>() / rows.len() as f64;
    Ok(EvalTable {
        num_classes: k,
        rows,
        mean,
    })
}

/// Anymodal evaluation of a trained segmentor.
pub fn evaluate_anymodal(params: &SegmentorParams<f32>, dataset: &Dataset) -> Result<EvalTable> {
    let shape = params.shape();
    let m = &dataset.manifest;
    if (shape.height, shape.width, shape.num_classes) != (m.height, m.width, m.num_classes) {
        return Err(AnysegError::Config(format!(
            "checkpoint expects {}x{} scenes with {} classes, dataset has {}x{} with {}",
            shape.height, shape.width, shape.num_classes, m.height, m.width, m.num_classes
        )));
    }
    evaluate_with(dataset, |subset, sample| predict_subset(params, subset, sample))
}

pub(crate) fn predict_subset(params: &SegmentorParams<f32>, subset: ModalityMask, sample: &SceneSample) -> Result<Vec<u8>> {
    let images: Vec<(_, &Tensor<f32>)> = subset
        .iter()
        .map(|m| sample.image(m).map(|t| (m, t)).ok_or(AnysegError::MissingModality(m)))
        .collect::<Result<_>>()?;
    Ok(argmax_labels(&infer(params, &images)?))
}
