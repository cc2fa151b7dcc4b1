//! Temperature-scaled KL distillation and cross-entropy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillLossConfig {
    pub temperature: f64,
    /// Weight of the label cross-entropy; 0 is pure distillation.
    #[serde(default)]
    pub label_weight: f64,
}

impl Default for DistillLossConfig {
    fn default() -> Self {
        DistillLossConfig {
            temperature: 1.0,
            label_weight: 0.0,
        }
    }
}

impl DistillLossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(0.0..=1.0).contains(&self.label_weight) {
            return Err(Error::InvalidArgument(format!(
                "label weight must be in [0, 1], got {}",
                self.label_weight
            )));
        }
        Ok(())
    }
}

/// Row-wise log-softmax of a `[b, k]` tensor (same arithmetic as the tape op).
pub fn log_softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    let mut tape = Tape::new();
    let x = tape.constant(logits.clone());
    let y = tape.log_softmax(x, 1)?;
    Ok(tape.value(y).clone())
}

pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    Ok(log_softmax_rows(logits)?.map(|x| x.exp()))
}

fn check_logits<S: Scalar>(t: &Tensor<S>, what: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::InvalidArgument(format!(
            "{what} logits must be [batch, classes], got {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `T² · mean_b Σ_c p_t (log p_t − log p_s)` with `p = softmax(logits / T)`.
///
/// The teacher value is read off the tape and re-recorded as a constant, so
/// no gradient ever reaches `teacher`.
pub fn kl_distill<S: Scalar>(
    tape: &mut Tape<S>,
    student: Var,
    teacher: Var,
    temperature: f64,
) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (sv, tv) = (tape.value(student), tape.value(teacher));
    if sv.shape() != tv.shape() {
        return Err(Error::shape("kl_distill", sv.shape(), tv.shape()));
    }
    let (b, _) = check_logits(sv, "student")?;
    let inv_t = S::from_f64_lossy(1.0 / temperature);

    let log_pt = log_softmax_rows(&tv.map(|x| x * inv_t))?;
    let pt = log_pt.map(|x| x.exp());
    let log_pt = tape.constant(log_pt);
    let pt = tape.constant(pt);

    let scaled = tape.scale(student, inv_t);
    let log_ps = tape.log_softmax(scaled, 1)?;
    let diff = tape.sub(log_pt, log_ps)?;
    let weighted = tape.mul(pt, diff)?;
    let total = tape.sum(weighted);
    let factor = temperature * temperature / b.max(1) as f64;
    Ok(tape.scale(total, S::from_f64_lossy(factor)))
}

/// Cross-entropy against soft targets `[b, k]`: `−mean_b Σ_c y log softmax(z)`.
pub fn soft_xent<S: Scalar>(tape: &mut Tape<S>, logits: Var, targets: &Tensor<S>) -> Result<Var> {
    let lv = tape.value(logits);
    let (b, _) = check_logits(lv, "student")?;
    if lv.shape() != targets.shape() {
        return Err(Error::shape("xent", lv.shape(), targets.shape()));
    }
    let y = tape.constant(targets.clone());
    let logp = tape.log_softmax(logits, 1)?;
    let picked = tape.mul(y, logp)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, S::from_f64_lossy(-1.0 / b.max(1) as f64)))
}

/// One-hot targets, optionally mixed: row `i` is
/// `λᵢ·onehot(labels[i]) + (1−λᵢ)·onehot(labels[partner[i]])`.
pub fn label_targets<S: Scalar>(
    labels: &[usize],
    classes: usize,
    mix: Option<(&[f64], &[usize])>,
) -> Result<Tensor<S>> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelRange {
            label: bad,
            classes,
        });
    }
    let b = labels.len();
    let mut t = Tensor::zeros(&[b, classes]);
    let d = t.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        match mix {
            Some((lam, partner)) => {
                let w = lam[i];
                d[i * classes + l] = d[i * classes + l] + S::from_f64_lossy(w);
                let other = labels[partner[i]];
                d[i * classes + other] = d[i * classes + other] + S::from_f64_lossy(1.0 - w);
            }
            None => d[i * classes + l] = S::one(),
        }
    }
    Ok(t)
}

/// Mean negative log-likelihood of the true labels.
pub fn xent<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, k) = check_logits(tape.value(logits), "student")?;
    if labels.len() != b {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    let targets = label_targets(labels, k, None)?;
    soft_xent(tape, logits, &targets)
}

/// `w·xent + (1−w)·kl_distill`; the endpoints return the pure losses.
pub fn combined<S: Scalar>(
    tape: &mut Tape<S>,
    student: Var,
    teacher: Var,
    targets: &Tensor<S>,
    cfg: &DistillLossConfig,
) -> Result<Var> {
    cfg.validate()?;
    let w = cfg.label_weight;
    if w == 0.0 {
        return kl_distill(tape, student, teacher, cfg.temperature);
    }
    if w == 1.0 {
        return soft_xent(tape, student, targets);
    }
    let kl = kl_distill(tape, student, teacher, cfg.temperature)?;
    let ce = soft_xent(tape, student, targets)?;
    let kl = tape.scale(kl, S::from_f64_lossy(1.0 - w));
    let ce = tape.scale(ce, S::from_f64_lossy(w));
    tape.add(ce, kl)
}

/// Combine an ensemble's logits by averaging probabilities, returned as log
/// probabilities. A single member is passed through unchanged.
pub fn ensemble_logits<S: Scalar>(members: &[Tensor<S>]) -> Result<Tensor<S>> {
    match members {
        [] => Err(Error::InvalidArgument("empty teacher ensemble".into())),
        [one] => Ok(one.clone()),
        [first, rest @ ..] => {
            let mut acc = softmax_rows(first)?;
            for m in rest {
                if m.shape() != first.shape() {
                    return Err(Error::shape("ensemble", first.shape(), m.shape()));
                }
                let p = softmax_rows(m)?;
                for (a, b) in acc.data_mut().iter_mut().zip(p.data()) {
                    *a = *a + *b;
                }
            }
            let inv = S::one() / S::from_usize(members.len()).unwrap();
            Ok(acc.map(|p| (p * inv).max(S::min_positive_value()).ln()))
        }
    }
}

/// Loss value without keeping a tape around.
pub fn kl_distill_value<S: Scalar>(
    student: &Tensor<S>,
    teacher: &Tensor<S>,
    temperature: f64,
) -> Result<S> {
    let mut tape = Tape::new();
    let s = tape.constant(student.clone());
    let t = tape.constant(teacher.clone());
    let l = kl_distill(&mut tape, s, t, temperature)?;
    tape.value(l).item()
}
