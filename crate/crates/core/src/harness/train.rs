//! Teacher and student training loops.
//!
//! Parameters are optimized in `f64` and persisted as `f32` checkpoints.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::data::{downsample_labels, sample_seed, Dataset};
use crate::error::{AnysegError, Result};
use crate::losses::{
    anymodal_dropout, cmd_loss, fused_kd_loss, mad_loss, supervised_ce, total_loss, umd_loss, DistillSample,
    LossReport, LossTerms,
};
use crate::modality::{Modality, ModalityMask};
use crate::segmentor::{
    argmax_labels, decode, digest, encode_modalities, infer, pml_fuse, predict_probs, read_checkpoint,
    write_checkpoint, BoundParams, MultiScaleFeatures, SegmentorParams, NUM_STAGES,
};

use super::config::{ExperimentConfig, LossToggles};
use super::eval::compute_miou;
use super::metrics::{MetricRecord, MetricsWriter};
use super::optim::{AdamW, LrSchedule};

pub const TEACHER_CHECKPOINT: &str = "teacher.ckpt";
pub const TEACHER_METRICS: &str = "teacher.metrics.jsonl";
pub const STUDENT_CHECKPOINT: &str = "student.ckpt";
pub const STUDENT_METRICS: &str = "student.metrics.jsonl";

// RNG stream ids under the training seed
const TEACHER_INIT: usize = 0;
const STUDENT_INIT: usize = 1;
const TEACHER_SHUFFLE: u64 = 1;
const STUDENT_SHUFFLE: u64 = 2;
const STUDENT_DROPOUT: u64 = 3;

/// Artifacts of one training run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub params: SegmentorParams<f32>,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
}

/// Student artifacts plus the teacher digest observed before and after.
#[derive(Debug, Clone)]
pub struct StudentOutput {
    pub run: RunOutput,
    pub teacher_checksum_before: u64,
    pub teacher_checksum_after: u64,
}

/// A training sample with `f64` images and prediction-grid labels.
struct Prepared {
    images: Vec<(Modality, Tensor<f64>)>,
    labels: Vec<u8>,
}

fn prepare(dataset: &Dataset) -> Vec<Prepared> {
    let k = dataset.manifest.num_classes;
    dataset
        .samples
        .iter()
        .map(|s| Prepared {
            images: dataset
                .manifest
                .modalities
                .iter()
                .filter_map(|&m| s.image(m).map(|t| (m, t.cast())))
                .collect(),
            labels: downsample_labels(&s.labels, s.height, s.width, 2, k),
        })
        .collect()
}

fn check_compatible(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    cfg.validate()?;
    let m = &dataset.manifest;
    if (m.height, m.width, m.num_classes) != (cfg.data.height, cfg.data.width, cfg.data.num_classes) {
        return Err(AnysegError::Config(format!(
            "dataset holds {}x{} scenes with {} classes, config expects {}x{} with {}",
            m.height, m.width, m.num_classes, cfg.data.height, cfg.data.width, cfg.data.num_classes
        )));
    }
    if dataset.samples.is_empty() {
        return Err(AnysegError::Config("training dataset is empty".into()));
    }
    for s in &dataset.samples {
        for &mo in &m.modalities {
            if s.image(mo).is_none() {
                return Err(AnysegError::MissingModality(mo));
            }
        }
    }
    Ok(())
}

fn image_leaves(g: &mut Graph<f64>, sample: &Prepared, mask: Option<ModalityMask>) -> Vec<(Modality, Var)> {
    sample
        .images
        .iter()
        .filter(|(m, _)| mask.is_none_or(|k| k.contains(*m)))
        .map(|(m, t)| (*m, g.constant(t.clone())))
        .collect()
}

struct Forward {
    features: MultiScaleFeatures,
    fused: [Var; NUM_STAGES],
    probs: Var,
}

fn forward(g: &mut Graph<f64>, params: &BoundParams, sample: &Prepared, mask: Option<ModalityMask>) -> Result<Forward> {
    let leaves = image_leaves(g, sample, mask);
    let features = encode_modalities(g, &leaves, params)?;
    let fused = pml_fuse(g, &features)?;
    let logits = decode(g, &fused, params)?;
    let probs = predict_probs(g, logits)?;
    Ok(Forward { features, fused, probs })
}

fn batch_mean(g: &mut Graph<f64>, terms: &[Var]) -> Result<Var> {
    let total = g.add_n(terms)?;
    Ok(g.scale(total, 1.0 / terms.len() as f64)?)
}

/// Full-modality mIoU of `params` over `data`.
fn train_miou(params: &SegmentorParams<f64>, data: &[Prepared], k: usize) -> Result<f64> {
    let mut pred = Vec::new();
    let mut truth = Vec::new();
    for s in data {
        let images: Vec<(Modality, &Tensor<f64>)> = s.images.iter().map(|(m, t)| (*m, t)).collect();
        pred.extend(argmax_labels(&infer(params, &images)?));
        truth.extend_from_slice(&s.labels);
    }
    Ok(compute_miou(&pred, &truth, k)?.miou)
}

struct StepResult {
    loss: Var,
    report: LossReport,
    masks: Vec<String>,
}

/// Shared epoch/batch loop: shuffles, builds one graph per batch through
/// `step`, applies AdamW and logs every step and epoch.
fn optimize<F>(
    cfg: &ExperimentConfig,
    data: &[Prepared],
    params: &mut SegmentorParams<f64>,
    shuffle_stream: u64,
    metrics_path: &Path,
    mut step: F,
) -> Result<()>
where
    F: FnMut(&mut Graph<f64>, &BoundParams, &[&Prepared]) -> Result<StepResult>,
{
    let o = &cfg.optimizer;
    let steps_per_epoch = data.len().div_ceil(o.batch_size);
    let schedule = LrSchedule::new(o, steps_per_epoch);
    let mut opt = AdamW::new(o);
    let mut shuffle = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    shuffle.set_stream(shuffle_stream);
    let mut log = MetricsWriter::create(metrics_path)?;
    let mut global = 0;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..o.epochs {
        order.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(o.batch_size) {
            let batch: Vec<&Prepared> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::<f64>::new();
            let bound = params.bind(&mut g, true);
            let StepResult { loss, report, masks } = step(&mut g, &bound, &batch)?;
            if !report.is_finite() {
                return Err(AnysegError::NonFiniteLoss {
                    step: global,
                    detail: serde_json::to_string(&report).unwrap_or_default(),
                });
            }
            g.backward(loss)?;
            let grads: Vec<Option<&Tensor<f64>>> = bound.vars().into_iter().map(|v| g.grad(v)).collect();
            if let Some(i) = grads.iter().position(|t| t.is_some_and(|t| !t.is_finite())) {
                return Err(AnysegError::NonFiniteLoss {
                    step: global,
                    detail: format!(
                        "gradient of parameter tensor {i} is not finite; report {}",
                        serde_json::to_string(&report).unwrap_or_default()
                    ),
                });
            }
            let lr = schedule.rate(global);
            opt.update(params.tensors_mut(), &grads, lr)?;
            loss_sum += report.total;
            log.append(&MetricRecord::Step {
                epoch,
                step: global,
                lr,
                masks,
                report,
            })?;
            global += 1;
        }
        log.append(&MetricRecord::Epoch {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            train_miou: train_miou(params, data, cfg.data.num_classes)?,
        })?;
    }
    Ok(())
}

fn finish(params: &SegmentorParams<f64>, frozen: bool, out_dir: &Path, ckpt: &str, metrics: &str) -> Result<RunOutput> {
    let mut out = params.cast::<f32>();
    if frozen {
        out.freeze();
    }
    let checkpoint = out_dir.join(ckpt);
    write_checkpoint(&out, &checkpoint)?;
    Ok(RunOutput {
        params: out,
        checkpoint,
        metrics: out_dir.join(metrics),
    })
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AnysegError::io(dir, e))
}

/// Trains the multimodal teacher: every modality is encoded with shared
/// weights, features are mean-fused per stage, and the supervised loss is
/// minimized. The checkpoint is written frozen.
pub fn train_teacher(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunOutput> {
    check_compatible(cfg, dataset)?;
    ensure_dir(out_dir)?;
    let data = prepare(dataset);
    let mut params = SegmentorParams::<f64>::init(&cfg.model_shape(), sample_seed(cfg.seeds.train, TEACHER_INIT))?;
    optimize(cfg, &data, &mut params, TEACHER_SHUFFLE, &out_dir.join(TEACHER_METRICS), |g, bound, batch| {
        let mut sup = Vec::with_capacity(batch.len());
        for s in batch {
            let f = forward(g, bound, s, None)?;
            sup.push(supervised_ce(g, f.probs, &s.labels)?);
        }
        let sup = batch_mean(g, &sup)?;
        let report = LossReport {
            sup: g.value(sup).data()[0],
            total: g.value(sup).data()[0],
            ..LossReport::default()
        };
        Ok(StepResult {
            loss: sup,
            report,
            masks: Vec::new(),
        })
    })?;
    finish(&params, true, out_dir, TEACHER_CHECKPOINT, TEACHER_METRICS)
}

fn load_teacher(cfg: &ExperimentConfig, path: &Path) -> Result<(SegmentorParams<f32>, u64)> {
    let bytes = fs::read(path).map_err(|e| AnysegError::io(path, e))?;
    let teacher = crate::segmentor::parse_checkpoint(&bytes)?;
    if !teacher.is_frozen() {
        return Err(AnysegError::Config(format!("{} is not a frozen teacher checkpoint", path.display())));
    }
    if teacher.shape() != &cfg.model_shape() {
        return Err(AnysegError::Config(format!(
            "teacher shape {:?} differs from configured shape {:?}",
            teacher.shape(),
            cfg.model_shape()
        )));
    }
    Ok((teacher, digest(&bytes)))
}

/// Trains the anymodal student against a frozen teacher with the configured
/// loss toggles. Each sample draws its own modality subset every step.
pub fn train_student(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    teacher_checkpoint: &Path,
    out_dir: &Path,
) -> Result<StudentOutput> {
    check_compatible(cfg, dataset)?;
    ensure_dir(out_dir)?;
    let (teacher, before) = load_teacher(cfg, teacher_checkpoint)?;
    let teacher_params_before = teacher.checksum();
    let teacher64 = teacher.cast::<f64>();
    let data = prepare(dataset);
    let toggles = cfg.toggles;
    let weights = cfg.loss.weights();
    let fused_w = cfg.loss.fused_kd_weight;
    let modalities = dataset.manifest.modalities.clone();
    let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    dropout.set_stream(STUDENT_DROPOUT);

    let mut params = SegmentorParams::<f64>::init(&cfg.model_shape(), sample_seed(cfg.seeds.train, STUDENT_INIT))?;
    optimize(cfg, &data, &mut params, STUDENT_SHUFFLE, &out_dir.join(STUDENT_METRICS), |g, bound, batch| {
        let masks = batch
            .iter()
            .map(|_| anymodal_dropout(&mut dropout, &modalities))
            .collect::<Result<Vec<_>>>()?;
        let teacher_bound = toggles.needs_teacher().then(|| teacher64.bind(g, false));
        student_objective(g, bound, teacher_bound.as_ref(), batch, &masks, toggles, &weights, fused_w)
    })?;

    let after = digest(&fs::read(teacher_checkpoint).map_err(|e| AnysegError::io(teacher_checkpoint, e))?);
    if after != before || teacher.checksum() != teacher_params_before {
        return Err(AnysegError::Invariant(format!(
            "teacher checkpoint changed during student training ({before:#018x} -> {after:#018x})"
        )));
    }
    Ok(StudentOutput {
        run: finish(&params, false, out_dir, STUDENT_CHECKPOINT, STUDENT_METRICS)?,
        teacher_checksum_before: before,
        teacher_checksum_after: after,
    })
}

#[allow(clippy::too_many_arguments)]
fn student_objective(
    g: &mut Graph<f64>,
    student: &BoundParams,
    teacher: Option<&BoundParams>,
    batch: &[&Prepared],
    masks: &[ModalityMask],
    toggles: LossToggles,
    weights: &crate::losses::LossWeights,
    fused_w: f64,
) -> Result<StepResult> {
    let mut sup = Vec::new();
    let mut mad = Vec::new();
    let mut umd = Vec::new();
    let mut fused = Vec::new();
    let mut student_feats = Vec::with_capacity(batch.len());
    let mut teacher_feats = Vec::with_capacity(batch.len());
    for (s, &mask) in batch.iter().zip(masks) {
        let fs = forward(g, student, s, Some(mask))?;
        if toggles.sup {
            sup.push(supervised_ce(g, fs.probs, &s.labels)?);
        }
        if let Some(tb) = teacher {
            let ft = forward(g, tb, s, None)?;
            if toggles.mad {
                mad.push(mad_loss(g, fs.probs, ft.probs)?);
            }
            if toggles.umd {
                umd.push(umd_loss(g, &fs.features, &ft.features, mask)?);
            }
            if toggles.fused_kd {
                fused.push(fused_kd_loss(g, &fs.fused, &ft.fused)?);
            }
            teacher_feats.push(ft.features);
        }
        student_feats.push(fs.features);
    }
    let mut terms = LossTerms::default();
    let mean = |g: &mut Graph<f64>, v: &[Var]| -> Result<Option<Var>> {
        if v.is_empty() {
            Ok(None)
        } else {
            batch_mean(g, v).map(Some)
        }
    };
    terms.sup = mean(g, &sup)?;
    terms.mad = mean(g, &mad)?;
    terms.umd = mean(g, &umd)?;
    terms.fused_kd = mean(g, &fused)?;
    let mut cmd_pairs = Vec::new();
    let mut zero_norm = 0;
    if toggles.cmd {
        let samples: Vec<DistillSample<'_>> = student_feats
            .iter()
            .zip(&teacher_feats)
            .zip(masks)
            .map(|((s, t), &mask)| DistillSample {
                student: s,
                teacher: t,
                mask,
            })
            .collect();
        let out = cmd_loss(g, &samples)?;
        terms.cmd = Some(out.loss);
        cmd_pairs = out.pairs;
        zero_norm = out.zero_norm_cosines;
    }
    let (loss, mut report) = total_loss(g, &terms, weights, fused_w)?;
    report.cmd_pairs = cmd_pairs;
    report.zero_norm_cosines = zero_norm;
    Ok(StepResult {
        loss,
        report,
        masks: masks.iter().map(|m| m.label()).collect(),
    })
}

/// Plain supervised training under per-sample anymodal dropout, written
/// independently of the distillation objective. With only the supervised
/// term enabled, [`train_student`] must reproduce this run exactly.
pub fn train_supervised_baseline(cfg: &ExperimentConfig, dataset: &Dataset, out_dir: &Path) -> Result<RunOutput> {
    check_compatible(cfg, dataset)?;
    ensure_dir(out_dir)?;
    let data = prepare(dataset);
    let modalities = dataset.manifest.modalities.clone();
    let mut dropout = ChaCha8Rng::seed_from_u64(cfg.seeds.train);
    dropout.set_stream(STUDENT_DROPOUT);
    let mut params = SegmentorParams::<f64>::init(&cfg.model_shape(), sample_seed(cfg.seeds.train, STUDENT_INIT))?;
    optimize(cfg, &data, &mut params, STUDENT_SHUFFLE, &out_dir.join(STUDENT_METRICS), |g, bound, batch| {
        let mut losses = Vec::with_capacity(batch.len());
        let mut labels = Vec::with_capacity(batch.len());
        for s in batch {
            let mask = anymodal_dropout(&mut dropout, &modalities)?;
            let f = forward(g, bound, s, Some(mask))?;
            losses.push(supervised_ce(g, f.probs, &s.labels)?);
            labels.push(mask.label());
        }
        let loss = batch_mean(g, &losses)?;
        let value = g.value(loss).data()[0];
        Ok(StepResult {
            loss,
            report: LossReport {
                sup: value,
                total: value,
                ..LossReport::default()
            },
            masks: labels,
        })
    })?;
    finish(&params, false, out_dir, STUDENT_CHECKPOINT, STUDENT_METRICS)
}

/// Loads a checkpoint and checks it against the configured model shape.
pub fn load_model(cfg: &ExperimentConfig, path: &Path) -> Result<SegmentorParams<f32>> {
    let params = read_checkpoint(path)?;
    if params.shape() != &cfg.model_shape() {
        return Err(AnysegError::Config(format!(
            "checkpoint shape {:?} differs from configured shape {:?}",
            params.shape(),
            cfg.model_shape()
        )));
    }
    Ok(params)
}
