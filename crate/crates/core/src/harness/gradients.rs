//! Randomized gradient checks over every differentiable operation and every
//! objective term.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{grad_check, Graph, Op, OpKind, Tensor, Var};
use crate::error::Result;
use crate::losses::{
    cmd_loss, fused_kd_loss, mad_loss, supervised_ce, total_loss, umd_loss, DistillSample, LossTerms, LossWeights,
};
use crate::modality::{Modality, ModalityMask};
use crate::segmentor::{MultiScaleFeatures, NUM_STAGES};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Worst relative error of one operation or loss over its random trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientCase {
    pub name: String,
    pub trials: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSuite {
    pub tolerance: f64,
    pub cases: Vec<GradientCase>,
}

impl GradientSuite {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> Vec<&GradientCase> {
        self.cases.iter().filter(|c| c.max_rel_error >= self.tolerance).collect()
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.cases {
            let status = if c.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            let _ = writeln!(
                out,
                "{:<16} {:>3} trials {:>6} coords  max rel err {:.3e}  {status}",
                c.name, c.trials, c.coords_checked, c.max_rel_error
            );
        }
        out
    }
}

pub const LOSS_CASES: [&str; 6] = ["supervised_ce", "umd_loss", "cmd_loss", "mad_loss", "fused_kd_loss", "total_loss"];

/// Runs `trials` random checks for each of the 18 operation kinds and each
/// loss in [`LOSS_CASES`].
pub fn run_gradient_suite(seed: u64, trials: usize) -> Result<GradientSuite> {
    let mut cases = Vec::new();
    for (i, kind) in OpKind::ALL.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        cases.push(run_case(kind.name(), trials, &mut rng, |rng| op_trial(kind, rng))?);
    }
    for (i, name) in LOSS_CASES.into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(100 + i as u64);
        cases.push(run_case(name, trials, &mut rng, |rng| loss_trial(name, rng))?);
    }
    Ok(GradientSuite {
        tolerance: GRADIENT_TOLERANCE,
        cases,
    })
}

fn run_case(
    name: &str,
    trials: usize,
    rng: &mut ChaCha8Rng,
    trial: impl Fn(&mut ChaCha8Rng) -> Result<(f64, usize)>,
) -> Result<GradientCase> {
    let mut case = GradientCase {
        name: name.to_string(),
        trials,
        coords_checked: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..trials {
        let (err, coords) = trial(rng)?;
        case.max_rel_error = case.max_rel_error.max(err);
        case.coords_checked += coords;
    }
    Ok(case)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

/// Values bounded away from zero so kinks stay outside the probe step.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let mut t = uniform(rng, shape, 0.1, 1.0);
    for x in t.data_mut() {
        if rng.random_bool(0.5) {
            *x = -*x;
        }
    }
    t
}

fn dims(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.random_range(1..=4)).collect()
}

/// Checks the gradient with respect to every input of `f`, reducing a
/// non-scalar output with fixed random weights.
fn check_inputs<F>(rng: &mut ChaCha8Rng, inputs: &[Tensor<f64>], f: F) -> Result<(f64, usize)>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars)?;
        g.shape(y).to_vec()
    };
    let weights = uniform(rng, &out_shape, -1.0, 1.0);
    let mut worst = 0.0_f64;
    let mut coords = 0;
    for i in 0..inputs.len() {
        let report = grad_check(
            |g: &mut Graph<f64>, x: Var| -> Result<Var> {
                let vars: Vec<Var> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| if j == i { x } else { g.constant(t.clone()) })
                    .collect();
                let y = f(g, &vars)?;
                let w = g.constant(weights.clone());
                let weighted = g.mul(y, w)?;
                Ok(g.sum_all(weighted)?)
            },
            &inputs[i],
            STEP,
        )?;
        worst = worst.max(report.max_rel_error);
        coords += report.coords_checked;
    }
    Ok((worst, coords))
}

fn unary(rng: &mut ChaCha8Rng, x: Tensor<f64>, op: Op) -> Result<(f64, usize)> {
    check_inputs(rng, &[x], move |g, v| Ok(g.apply(op.clone(), v)?))
}

fn op_trial(kind: OpKind, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    match kind {
        OpKind::Matmul => {
            let (m, k, n) = (rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=4));
            let a = uniform(rng, &[m, k], -1.0, 1.0);
            let b = uniform(rng, &[k, n], -1.0, 1.0);
            check_inputs(rng, &[a, b], |g, v| Ok(g.matmul(v[0], v[1])?))
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let rank = rng.random_range(1..=3);
            let shape = dims(rng, rank);
            let a = uniform(rng, &shape, -1.0, 1.0);
            let b = uniform(rng, &shape, -1.0, 1.0);
            let op = match kind {
                OpKind::Add => Op::Add,
                OpKind::Sub => Op::Sub,
                _ => Op::Mul,
            };
            check_inputs(rng, &[a, b], move |g, v| Ok(g.apply(op.clone(), v)?))
        }
        OpKind::Scale => {
            let c = rng.random_range(-3.0..3.0);
            let shape = dims(rng, 2);
            let x = uniform(rng, &shape, -1.0, 1.0);
            unary(rng, x, Op::Scale(c))
        }
        OpKind::Relu => {
            let shape = dims(rng, 3);
            let x = away_from_zero(rng, &shape);
            unary(rng, x, Op::Relu)
        }
        OpKind::Gelu => {
            let shape = dims(rng, 3);
            let x = uniform(rng, &shape, -3.0, 3.0);
            unary(rng, x, Op::Gelu)
        }
        OpKind::Mean | OpKind::Sum => {
            let shape: Vec<usize> = (0..3).map(|_| rng.random_range(2..=4)).collect();
            let mut axes: Vec<usize> = (0..3).filter(|_| rng.random_bool(0.5)).collect();
            if axes.is_empty() {
                axes.push(rng.random_range(0..3));
            }
            let x = uniform(rng, &shape, -1.0, 1.0);
            let op = if kind == OpKind::Mean { Op::Mean(axes) } else { Op::Sum(axes) };
            unary(rng, x, op)
        }
        OpKind::Reshape => {
            let shape = dims(rng, 3);
            let x = uniform(rng, &shape, -1.0, 1.0);
            unary(rng, x, Op::Reshape(vec![shape[2], shape[0] * shape[1]]))
        }
        OpKind::Transpose => {
            let shape = dims(rng, 3);
            let mut perm = vec![0, 1, 2];
            perm.shuffle(rng);
            let x = uniform(rng, &shape, -1.0, 1.0);
            unary(rng, x, Op::Transpose(perm))
        }
        OpKind::Concat => {
            let shape = dims(rng, 3);
            let axis = rng.random_range(0..3);
            let parts: Vec<Tensor<f64>> = (0..rng.random_range(2..=3))
                .map(|_| {
                    let mut s = shape.clone();
                    s[axis] = rng.random_range(1..=3);
                    uniform(rng, &s, -1.0, 1.0)
                })
                .collect();
            check_inputs(rng, &parts, move |g, v| Ok(g.concat(v, axis)?))
        }
        OpKind::Softmax | OpKind::LogSoftmax => {
            let shape: Vec<usize> = (0..3).map(|_| rng.random_range(2..=4)).collect();
            let axis = rng.random_range(0..3);
            let x = uniform(rng, &shape, -2.0, 2.0);
            let op = if kind == OpKind::Softmax {
                Op::Softmax(axis)
            } else {
                Op::LogSoftmax(axis)
            };
            unary(rng, x, op)
        }
        OpKind::LogClamped => {
            let shape = dims(rng, 2);
            let x = uniform(rng, &shape, 0.2, 2.0);
            unary(rng, x, Op::LogClamped)
        }
        OpKind::Upsample2d => {
            let shape = dims(rng, 3);
            let factor = rng.random_range(2..=3);
            let x = uniform(rng, &shape, -1.0, 1.0);
            unary(rng, x, Op::Upsample2d(factor))
        }
        OpKind::PatchMerge2d => {
            let factor = rng.random_range(1..=2);
            let shape = [
                factor * rng.random_range(1..=3),
                factor * rng.random_range(1..=3),
                rng.random_range(1..=3),
            ];
            let x = uniform(rng, &shape, -1.0, 1.0);
            unary(rng, x, Op::PatchMerge2d(factor))
        }
        OpKind::Cosine => {
            let shape: Vec<usize> = (0..2).map(|_| rng.random_range(2..=4)).collect();
            let axis = rng.random_range(0..2);
            let a = away_from_zero(rng, &shape);
            let b = away_from_zero(rng, &shape);
            check_inputs(rng, &[a, b], move |g, v| Ok(g.cosine(v[0], v[1], axis)?))
        }
    }
}

/// Small per-stage feature shapes with at least four positions, so channel
/// cosines are not trivially ±1.
const STAGE_SHAPES: [[usize; 3]; NUM_STAGES] = [[4, 4, 2], [2, 2, 3], [2, 2, 4], [2, 2, 2]];

fn stage_tensors(rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    STAGE_SHAPES.iter().map(|s| uniform(rng, s, -1.0, 1.0)).collect()
}

fn random_mask(rng: &mut ChaCha8Rng, modalities: &[Modality], min_len: usize) -> ModalityMask {
    loop {
        let selector = rng.random_range(1..(1usize << modalities.len()));
        let mask = ModalityMask::from_selector(modalities, selector).expect("selector is in range");
        if mask.len() >= min_len {
            return mask;
        }
    }
}

fn features_from(modalities: &[Modality], vars: &[Var]) -> MultiScaleFeatures {
    let mut f = MultiScaleFeatures::new();
    for (i, &m) in modalities.iter().enumerate() {
        f.insert(m, std::array::from_fn(|s| vars[i * NUM_STAGES + s]));
    }
    f
}

fn constant_features(g: &mut Graph<f64>, modalities: &[Modality], tensors: &[Tensor<f64>]) -> MultiScaleFeatures {
    let vars: Vec<Var> = tensors.iter().map(|t| g.constant(t.clone())).collect();
    features_from(modalities, &vars)
}

fn random_probs(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let logits = uniform(rng, shape, -2.0, 2.0);
    Op::Softmax(shape.len() - 1).forward(&[&logits]).expect("valid softmax axis")
}

fn loss_trial(name: &str, rng: &mut ChaCha8Rng) -> Result<(f64, usize)> {
    let all = [Modality::Rgb, Modality::Depth, Modality::Event, Modality::Lidar];
    let (h, w, k) = (rng.random_range(1..=3), rng.random_range(1..=3), rng.random_range(2..=4));
    match name {
        "supervised_ce" => {
            let logits = uniform(rng, &[h, w, k], -2.0, 2.0);
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k as u8)).collect();
            check_inputs(rng, &[logits], move |g, v| {
                let p = g.softmax(v[0], 2)?;
                supervised_ce(g, p, &labels)
            })
        }
        "mad_loss" => {
            let logits = uniform(rng, &[h, w, k], -2.0, 2.0);
            let teacher = random_probs(rng, &[h, w, k]);
            check_inputs(rng, &[logits], move |g, v| {
                let p = g.softmax(v[0], 2)?;
                let t = g.constant(teacher.clone());
                mad_loss(g, p, t)
            })
        }
        "umd_loss" => {
            let mask = random_mask(rng, &all, 1);
            let active: Vec<Modality> = mask.iter().collect();
            let student: Vec<Tensor<f64>> = active.iter().flat_map(|_| stage_tensors(rng)).collect();
            let teacher: Vec<Tensor<f64>> = all.iter().flat_map(|_| stage_tensors(rng)).collect();
            check_inputs(rng, &student, move |g, v| {
                let s = features_from(&active, v);
                let t = constant_features(g, &all, &teacher);
                umd_loss(g, &s, &t, mask)
            })
        }
        "fused_kd_loss" => {
            let student = stage_tensors(rng);
            let teacher = stage_tensors(rng);
            check_inputs(rng, &student, move |g, v| {
                let t: Vec<Var> = teacher.iter().map(|x| g.constant(x.clone())).collect();
                fused_kd_loss(g, v, &t)
            })
        }
        "cmd_loss" => {
            let batch = rng.random_range(1..=3);
            let masks: Vec<ModalityMask> = (0..batch)
                .map(|i| random_mask(rng, &all, if i == 0 { 2 } else { 1 }))
                .collect();
            let student: Vec<Tensor<f64>> = masks
                .iter()
                .flat_map(|m| m.iter().collect::<Vec<_>>())
                .flat_map(|_| stage_tensors(rng))
                .collect();
            let teacher: Vec<Vec<Tensor<f64>>> = masks
                .iter()
                .map(|_| all.iter().flat_map(|_| stage_tensors(rng)).collect())
                .collect();
            check_inputs(rng, &student, move |g, v| {
                let mut offset = 0;
                let mut feats = Vec::with_capacity(masks.len());
                for (mask, t) in masks.iter().zip(&teacher) {
                    let active: Vec<Modality> = mask.iter().collect();
                    let n = active.len() * NUM_STAGES;
                    let s = features_from(&active, &v[offset..offset + n]);
                    offset += n;
                    feats.push((s, constant_features(g, &all, t)));
                }
                let samples: Vec<DistillSample<'_>> = feats
                    .iter()
                    .zip(&masks)
                    .map(|((s, t), &mask)| DistillSample {
                        student: s,
                        teacher: t,
                        mask,
                    })
                    .collect();
                Ok(cmd_loss(g, &samples)?.loss)
            })
        }
        "total_loss" => {
            let mask = random_mask(rng, &all, 2);
            let active: Vec<Modality> = mask.iter().collect();
            let mut inputs = vec![uniform(rng, &[h, w, k], -2.0, 2.0)];
            inputs.extend(active.iter().flat_map(|_| stage_tensors(rng)));
            let labels: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..k as u8)).collect();
            let teacher_probs = random_probs(rng, &[h, w, k]);
            let teacher: Vec<Tensor<f64>> = all.iter().flat_map(|_| stage_tensors(rng)).collect();
            check_inputs(rng, &inputs, move |g, v| {
                let p = g.softmax(v[0], 2)?;
                let tp = g.constant(teacher_probs.clone());
                let s = features_from(&active, &v[1..]);
                let t = constant_features(g, &all, &teacher);
                let terms = LossTerms {
                    sup: Some(supervised_ce(g, p, &labels)?),
                    mad: Some(mad_loss(g, p, tp)?),
                    umd: Some(umd_loss(g, &s, &t, mask)?),
                    cmd: Some(
                        cmd_loss(
                            g,
                            &[DistillSample {
                                student: &s,
                                teacher: &t,
                                mask,
                            }],
                        )?
                        .loss,
                    ),
                    fused_kd: None,
                };
                Ok(total_loss(g, &terms, &LossWeights::default(), 0.0)?.0)
            })
        }
        other => unreachable!("unknown loss case {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_a_few_trials() {
        let suite = run_gradient_suite(7, 3).unwrap();
        assert_eq!(suite.cases.len(), OpKind::ALL.len() + LOSS_CASES.len());
        assert!(suite.passed(), "{}", suite.summary());
        assert!(suite.cases.iter().all(|c| c.coords_checked > 0));
    }
}
