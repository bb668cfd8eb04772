//! Training objectives and anymodal dropout.
//!
//! All distillation terms put the student distribution in the first slot of
//! the divergence and treat teacher-side values as constants.
//!
//! | term      | compares                                                      |
//! |-----------|---------------------------------------------------------------|
//! | supervised| class distribution vs. ground-truth labels                    |
//! | umd       | channel-softmaxed stage features, per active modality         |
//! | cmd       | batch-averaged per-channel cosine similarity between modalities|
//! | mad       | student class distribution vs. full-modality teacher          |
//! | fused-kd  | channel-softmaxed fused stage features                        |

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{cosine_degenerate, Graph, Real, Tensor, Var};
use crate::error::{AnysegError, Result};
use crate::modality::{Modality, ModalityMask};
use crate::segmentor::{MultiScaleFeatures, NUM_STAGES};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_mad: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_mad: 50.0,
            alpha: 5.0,
            beta: 10.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_mad", self.lambda_mad), ("alpha", self.alpha), ("beta", self.beta)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(AnysegError::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar values of every objective term for one step.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub sup: f64,
    pub mad: f64,
    pub umd: f64,
    pub cmd: f64,
    pub fused_kd: f64,
    pub total: f64,
    /// cmd contribution of each modality pair before averaging over pairs
    pub cmd_pairs: Vec<(String, f64)>,
    /// cosine lines whose norm vanished and were assigned similarity 0
    pub zero_norm_cosines: usize,
}

impl LossReport {
    /// `|total - (sup + λ·mad + α·umd + β·cmd + γ·fused_kd)|`
    pub fn identity_residual(&self, w: &LossWeights, fused_kd_weight: f64) -> f64 {
        let expected = self.sup + w.lambda_mad * self.mad + w.alpha * self.umd + w.beta * self.cmd + fused_kd_weight * self.fused_kd;
        (self.total - expected).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.sup, self.mad, self.umd, self.cmd, self.fused_kd, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Draws a uniformly random non-empty subset of `modalities`.
pub fn anymodal_dropout(rng: &mut impl Rng, modalities: &[Modality]) -> Result<ModalityMask> {
    if modalities.is_empty() || modalities.len() > 8 {
        return Err(AnysegError::EmptyModalitySet);
    }
    let selector = rng.random_range(1..(1usize << modalities.len()));
    ModalityMask::from_selector(modalities, selector)
}

fn detach<T: Real>(g: &mut Graph<T>, v: Var) -> Var {
    if g.requires_grad(v) {
        let value = g.value(v).clone();
        g.constant(value)
    } else {
        v
    }
}

/// Views an `[..., K]` tensor as `[N, K]` rows.
fn as_rows<T: Real>(g: &mut Graph<T>, v: Var) -> Result<(Var, usize)> {
    let shape = g.shape(v).to_vec();
    let k = *shape
        .last()
        .ok_or_else(|| AnysegError::Shape("expected a trailing class/channel axis".into()))?;
    let n = shape.iter().product::<usize>() / k;
    Ok((g.reshape(v, &[n, k])?, n))
}

fn check_same_shape<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(AnysegError::Shape(format!(
            "{what}: student shape {:?} differs from teacher shape {:?}",
            g.shape(a),
            g.shape(b)
        )));
    }
    Ok(())
}

/// Mean cross-entropy `-(1/N) Σ_i log p[i, y_i]` over `N` positions.
pub fn supervised_ce<T: Real>(g: &mut Graph<T>, probs: Var, labels: &[u8]) -> Result<Var> {
    let (rows, n) = as_rows(g, probs)?;
    let k = g.shape(rows)[1];
    if labels.len() != n {
        return Err(AnysegError::Shape(format!("{} labels for {n} positions", labels.len())));
    }
    let mut onehot = Tensor::<T>::zeros(&[n, k]);
    for (i, &y) in labels.iter().enumerate() {
        let y = y as usize;
        if y >= k {
            return Err(AnysegError::LabelOutOfRange {
                position: i,
                label: y,
                classes: k,
            });
        }
        onehot.data_mut()[i * k + y] = T::one();
    }
    let onehot = g.constant(onehot);
    let logp = g.log_clamped(rows)?;
    let picked = g.mul(onehot, logp)?;
    let total = g.sum_all(picked)?;
    Ok(g.scale(total, -1.0 / n as f64)?)
}

/// Mean over positions of `KL(softmax(student) ‖ softmax(teacher))` taken
/// over the channel axis.
fn channel_kl<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    check_same_shape(g, student, teacher, "feature distillation")?;
    let teacher = detach(g, teacher);
    let (s, n) = as_rows(g, student)?;
    let (t, _) = as_rows(g, teacher)?;
    let log_s = g.log_softmax(s, 1)?;
    let log_t = g.log_softmax(t, 1)?;
    let p_s = g.softmax(s, 1)?;
    let diff = g.sub(log_s, log_t)?;
    let terms = g.mul(p_s, diff)?;
    let total = g.sum_all(terms)?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Unimodal distillation. Sums the channel KL over stages and active
/// modalities and divides by the number of active modalities.
pub fn umd_loss<T: Real>(
    g: &mut Graph<T>,
    student: &MultiScaleFeatures,
    teacher: &MultiScaleFeatures,
    mask: ModalityMask,
) -> Result<Var> {
    if let Some(extra) = student.modalities().find(|m| !mask.contains(*m)) {
        return Err(AnysegError::Shape(format!("student has features for inactive modality {extra}")));
    }
    let mut terms = Vec::with_capacity(mask.len() * NUM_STAGES);
    for m in mask.iter() {
        let s = student.get(m).ok_or(AnysegError::MissingModality(m))?;
        let t = teacher.get(m).ok_or(AnysegError::MissingModality(m))?;
        for stage in 0..NUM_STAGES {
            terms.push(channel_kl(g, s[stage], t[stage])?);
        }
    }
    let total = g.add_n(&terms)?;
    Ok(g.scale(total, 1.0 / mask.len() as f64)?)
}

/// One sample's contribution to the cross-modal term.
#[derive(Debug, Clone, Copy)]
pub struct DistillSample<'a> {
    pub student: &'a MultiScaleFeatures,
    pub teacher: &'a MultiScaleFeatures,
    pub mask: ModalityMask,
}

#[derive(Debug, Clone)]
pub struct CmdOutput {
    pub loss: Var,
    /// Per-pair value (label such as `RD`), in canonical pair order.
    pub pairs: Vec<(String, f64)>,
    pub zero_norm_cosines: usize,
}

/// Per-channel cosine similarity between two `[h, w, C]` maps, flattened
/// over positions.
fn channel_cosine<T: Real>(g: &mut Graph<T>, a: Var, b: Var, zero_norm: &mut usize) -> Result<Var> {
    let (ra, _) = as_rows(g, a)?;
    let (rb, _) = as_rows(g, b)?;
    let (va, vb) = (g.value(ra), g.value(rb));
    let c = va.shape()[1];
    let column = |t: &Tensor<T>, j: usize| -> Vec<T> { t.data().iter().skip(j).step_by(c).copied().collect() };
    *zero_norm += (0..c).filter(|&j| cosine_degenerate(&column(va, j), &column(vb, j))).count();
    Ok(g.cosine(ra, rb, 0)?)
}

/// Cross-modal correspondence distillation over a batch.
///
/// For every unordered pair of modalities active in at least one sample,
/// per-channel cosine similarities are averaged over the samples where both
/// are active and mapped to `s̃ = (S + 1) / 2`. Student and teacher
/// similarities are compared channel-wise with the binary divergence
/// `s̃ log(s̃ / t̃) + (1 - s̃) log((1 - s̃) / (1 - t̃))`, summed over channels and
/// stages, and averaged over pairs. Without pairs the loss is 0.
pub fn cmd_loss<T: Real>(g: &mut Graph<T>, batch: &[DistillSample<'_>]) -> Result<CmdOutput> {
    let mut pairs: Vec<(Modality, Modality)> = batch.iter().flat_map(|s| s.mask.pairs()).collect();
    pairs.sort();
    pairs.dedup();
    let mut zero_norm = 0;
    if pairs.is_empty() {
        let zero = g.constant(Tensor::scalar(T::zero()));
        return Ok(CmdOutput {
            loss: zero,
            pairs: Vec::new(),
            zero_norm_cosines: 0,
        });
    }
    let mut pair_terms = Vec::with_capacity(pairs.len());
    let mut pair_values = Vec::with_capacity(pairs.len());
    for &(a, b) in &pairs {
        let members: Vec<&DistillSample<'_>> =
            batch.iter().filter(|s| s.mask.contains(a) && s.mask.contains(b)).collect();
        let mut stage_terms = Vec::with_capacity(NUM_STAGES);
        for stage in 0..NUM_STAGES {
            let mut student_sims = Vec::with_capacity(members.len());
            let mut teacher_sims = Vec::with_capacity(members.len());
            for s in &members {
                let sa = s.student.get(a).ok_or(AnysegError::MissingModality(a))?[stage];
                let sb = s.student.get(b).ok_or(AnysegError::MissingModality(b))?[stage];
                let ta = s.teacher.get(a).ok_or(AnysegError::MissingModality(a))?[stage];
                let tb = s.teacher.get(b).ok_or(AnysegError::MissingModality(b))?[stage];
                check_same_shape(g, sa, ta, "cross-modal distillation")?;
                check_same_shape(g, sa, sb, "cross-modal distillation")?;
                let (ta, tb) = (detach(g, ta), detach(g, tb));
                student_sims.push(channel_cosine(g, sa, sb, &mut zero_norm)?);
                teacher_sims.push(channel_cosine(g, ta, tb, &mut zero_norm)?);
            }
            let inv = 1.0 / members.len() as f64;
            let s_sum = g.add_n(&student_sims)?;
            let s_mean = g.scale(s_sum, inv)?;
            let t_sum = g.add_n(&teacher_sims)?;
            let t_mean = g.scale(t_sum, inv)?;
            stage_terms.push(binary_divergence(g, s_mean, t_mean)?);
        }
        let pair_total = g.add_n(&stage_terms)?;
        pair_values.push((format!("{a}{b}"), g.value(pair_total).item().map_or(f64::NAN, T::as_f64)));
        pair_terms.push(pair_total);
    }
    let total = g.add_n(&pair_terms)?;
    let loss = g.scale(total, 1.0 / pairs.len() as f64)?;
    Ok(CmdOutput {
        loss,
        pairs: pair_values,
        zero_norm_cosines: zero_norm,
    })
}

/// Sum over channels of the Bernoulli divergence between normalized
/// similarities `(S + 1) / 2`.
fn binary_divergence<T: Real>(g: &mut Graph<T>, student: Var, teacher: Var) -> Result<Var> {
    let shape = g.shape(student).to_vec();
    let half = g.constant(Tensor::full(&shape, T::from_f64(0.5)));
    let normalized = |g: &mut Graph<T>, sim: Var| -> Result<(Var, Var)> {
        let scaled = g.scale(sim, 0.5)?;
        let p = g.add(scaled, half)?;
        let neg = g.scale(sim, -0.5)?;
        let q = g.add(neg, half)?;
        Ok((p, q))
    };
    let (ps, qs) = normalized(g, student)?;
    let (pt, qt) = normalized(g, teacher)?;
    let side = |g: &mut Graph<T>, s: Var, t: Var| -> Result<Var> {
        let ls = g.log_clamped(s)?;
        let lt = g.log_clamped(t)?;
        let d = g.sub(ls, lt)?;
        Ok(g.mul(s, d)?)
    };
    let on = side(g, ps, pt)?;
    let off = side(g, qs, qt)?;
    let both = g.add(on, off)?;
    Ok(g.sum_all(both)?)
}

/// Modality-agnostic distillation: mean per-position `KL(student ‖ teacher)`
/// between class distributions. The teacher receives no gradient.
pub fn mad_loss<T: Real>(g: &mut Graph<T>, student_probs: Var, teacher_probs: Var) -> Result<Var> {
    check_same_shape(g, student_probs, teacher_probs, "prediction distillation")?;
    let teacher = detach(g, teacher_probs);
    let (s, n) = as_rows(g, student_probs)?;
    let (t, _) = as_rows(g, teacher)?;
    let ls = g.log_clamped(s)?;
    let lt = g.log_clamped(t)?;
    let diff = g.sub(ls, lt)?;
    let terms = g.mul(s, diff)?;
    let total = g.sum_all(terms)?;
    Ok(g.scale(total, 1.0 / n as f64)?)
}

/// Channel KL between fused student and fused teacher features, summed over
/// stages.
pub fn fused_kd_loss<T: Real>(g: &mut Graph<T>, student_fused: &[Var], teacher_fused: &[Var]) -> Result<Var> {
    if student_fused.len() != NUM_STAGES || teacher_fused.len() != NUM_STAGES {
        return Err(AnysegError::Shape(format!(
            "fused distillation needs {NUM_STAGES} stages on both sides, got {} and {}",
            student_fused.len(),
            teacher_fused.len()
        )));
    }
    let terms = student_fused
        .iter()
        .zip(teacher_fused)
        .map(|(&s, &t)| channel_kl(g, s, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(g.add_n(&terms)?)
}

/// Graph nodes of the individual terms; `None` for disabled terms.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossTerms {
    pub sup: Option<Var>,
    pub mad: Option<Var>,
    pub umd: Option<Var>,
    pub cmd: Option<Var>,
    pub fused_kd: Option<Var>,
}

/// `sup + λ·mad + α·umd + β·cmd (+ γ·fused_kd)` together with its report.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    terms: &LossTerms,
    weights: &LossWeights,
    fused_kd_weight: f64,
) -> Result<(Var, LossReport)> {
    let weighted = [
        (terms.sup, 1.0),
        (terms.mad, weights.lambda_mad),
        (terms.umd, weights.alpha),
        (terms.cmd, weights.beta),
        (terms.fused_kd, fused_kd_weight),
    ];
    let mut parts = Vec::new();
    for (term, w) in weighted {
        if let Some(v) = term {
            parts.push(if w == 1.0 { v } else { g.scale(v, w)? });
        }
    }
    let total = if parts.is_empty() {
        g.constant(Tensor::scalar(T::zero()))
    } else {
        g.add_n(&parts)?
    };
    let value = |g: &Graph<T>, v: Option<Var>| v.and_then(|v| g.value(v).item()).map_or(0.0, T::as_f64);
    let report = LossReport {
        sup: value(g, terms.sup),
        mad: value(g, terms.mad),
        umd: value(g, terms.umd),
        cmd: value(g, terms.cmd),
        fused_kd: value(g, terms.fused_kd),
        total: value(g, Some(total)),
        ..LossReport::default()
    };
    Ok((total, report))
}
