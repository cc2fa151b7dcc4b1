//! SGD, Adam and blocked Shampoo, learning-rate schedules and clipping.
//!
//! Optimizer state is kept in `f64` regardless of the parameter dtype.

mod pth_root;
mod schedule;
mod shampoo;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Parameters;
use crate::tensor::{Scalar, Tensor};

pub use pth_root::{inverse_pth_root, SYMMETRY_TOL};
pub use schedule::{scaled_warmup, Decay, ScheduleConfig, SHAMPOO_WARMUP_STEPS};
pub use shampoo::{
    add_gram, matricize, partition, Matricized, ShampooConfig, ShampooState, ShampooStep,
};

/// Dense f64 matrix used for preconditioner statistics and roots.
pub type Matrix = nalgebra::DMatrix<f64>;

/// Stores `f64` state bit-exactly in an `f32` tensor: each value becomes two
/// consecutive entries holding the bit patterns of its high and low halves.
pub(crate) fn pack_f64(v: &[f64]) -> Tensor<f32> {
    Tensor::from_fn(&[v.len() * 2], |i| {
        let bits = v[i / 2].to_bits();
        f32::from_bits(if i % 2 == 0 {
            (bits >> 32) as u32
        } else {
            bits as u32
        })
    })
}

pub(crate) fn unpack_f64(t: &Tensor<f32>) -> Result<Vec<f64>> {
    if t.len() % 2 != 0 {
        return Err(Error::Manifest(format!(
            "packed f64 state has odd length {}",
            t.len()
        )));
    }
    Ok(t.data()
        .chunks_exact(2)
        .map(|c| f64::from_bits(((c[0].to_bits() as u64) << 32) | c[1].to_bits() as u64))
        .collect())
}

pub const SHAMPOO_WEIGHT_DECAY: f64 = 0.000375;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
    Shampoo,
}

fn default_momentum() -> f64 {
    0.9
}
fn default_true() -> bool {
    true
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_decay() -> Decay {
    Decay::Quadratic
}

/// Optimizer settings as they appear in a run config; the schedule length is
/// filled in by the harness once the number of steps is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// `None` selects `min(1800, 10% of total)`.
    #[serde(default)]
    pub warmup_steps: Option<usize>,
    #[serde(default = "default_decay")]
    pub decay: Decay,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_true")]
    pub nesterov: bool,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    /// Defaults to 0.000375 for Shampoo and 0 otherwise.
    #[serde(default)]
    pub weight_decay: Option<f64>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
    #[serde(default)]
    pub shampoo: ShampooConfig,
}

impl OptimConfig {
    pub fn new(optimizer: OptimizerKind, lr: f64) -> Self {
        OptimConfig {
            optimizer,
            lr,
            warmup_steps: None,
            decay: Decay::Quadratic,
            momentum: 0.9,
            nesterov: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: None,
            clip_norm: None,
            shampoo: ShampooConfig::default(),
        }
    }

    pub fn effective_weight_decay(&self) -> f64 {
        self.weight_decay.unwrap_or(match self.optimizer {
            OptimizerKind::Shampoo => SHAMPOO_WEIGHT_DECAY,
            _ => 0.0,
        })
    }

    pub fn schedule(&self, total_steps: usize) -> ScheduleConfig {
        ScheduleConfig {
            peak_lr: self.lr,
            warmup_steps: self
                .warmup_steps
                .unwrap_or_else(|| scaled_warmup(total_steps)),
            total_steps,
            decay: self.decay,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wd = self.effective_weight_decay();
        if !(wd >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be >= 0, got {wd}"
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "clip norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Global L2 norm over every gradient tensor.
pub fn global_norm<S: Scalar>(grads: &Parameters<S>) -> f64 {
    grads.iter().map(|(_, g)| g.sq_norm()).sum::<f64>().sqrt()
}

/// Scale all gradients by `min(1, max_norm / ‖g‖)`; returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut Parameters<S>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut()
                .iter_mut()
                .for_each(|x| *x = S::from_f64_lossy(x.as_f64() * s));
        }
    }
    norm
}

fn paired<'a, S: Scalar>(
    params: &'a mut Parameters<S>,
    grads: &'a Parameters<S>,
) -> Result<Vec<(&'a String, &'a mut Tensor<S>, &'a Tensor<S>)>> {
    let mut out = Vec::with_capacity(params.len());
    for (name, p) in params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::shape("optimizer step", p.shape(), g.shape()));
        }
        out.push((name, p, g));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct SgdState {
    velocity: BTreeMap<String, Vec<f64>>,
}

/// Momentum SGD with decoupled weight decay: `w ← w·(1 − lr·wd)`, then
/// `v ← βv + g` and `w ← w − lr·(g + βv)` (nesterov) or `w − lr·v`.
pub fn sgd_step<S: Scalar>(
    state: &mut SgdState,
    params: &mut Parameters<S>,
    grads: &Parameters<S>,
    lr: f64,
    momentum: f64,
    nesterov: bool,
    weight_decay: f64,
) -> Result<()> {
    for (name, p, g) in paired(params, grads)? {
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            let gi = gi.as_f64();
            let mut w = x.as_f64();
            if weight_decay != 0.0 {
                w *= 1.0 - lr * weight_decay;
            }
            *vi = momentum * *vi + gi;
            let dir = if nesterov { gi + momentum * *vi } else { *vi };
            *x = S::from_f64_lossy(w - lr * dir);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// Bias-corrected Adam with decoupled weight decay.
pub fn adam_step<S: Scalar>(
    state: &mut AdamState,
    params: &mut Parameters<S>,
    grads: &Parameters<S>,
    lr: f64,
    hp: AdamHyper,
) -> Result<()> {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (name, p, g) in paired(params, grads)? {
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        for (((x, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            let gi = gi.as_f64();
            let mut w = x.as_f64();
            if hp.weight_decay != 0.0 {
                w *= 1.0 - lr * hp.weight_decay;
            }
            *mi = hp.beta1 * *mi + (1.0 - hp.beta1) * gi;
            *vi = hp.beta2 * *vi + (1.0 - hp.beta2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *x = S::from_f64_lossy(w - lr * mhat / (vhat.sqrt() + hp.eps));
        }
    }
    Ok(())
}

#[derive(Debug, Clone)]
enum State {
    Sgd(SgdState),
    Adam(AdamState),
    Shampoo(Box<ShampooState>),
}

/// A configured optimizer driven by its learning-rate schedule.
#[derive(Debug, Clone)]
pub struct Optimizer {
    cfg: OptimConfig,
    schedule: ScheduleConfig,
    state: State,
    step: usize,
}

impl Optimizer {
    pub fn new<S: Scalar>(
        cfg: OptimConfig,
        total_steps: usize,
        params: &Parameters<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.schedule(total_steps);
        if total_steps > 0 {
            schedule.validate()?;
        }
        let state = match cfg.optimizer {
            OptimizerKind::Sgd => State::Sgd(SgdState::default()),
            OptimizerKind::Adam => State::Adam(AdamState::default()),
            OptimizerKind::Shampoo => {
                State::Shampoo(Box::new(ShampooState::new(cfg.shampoo, params)?))
            }
        };
        Ok(Optimizer {
            cfg,
            schedule,
            state,
            step: 0,
        })
    }

    pub fn schedule(&self) -> &ScheduleConfig {
        &self.schedule
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// Learning rate the next step will use.
    pub fn current_lr(&self) -> Result<f64> {
        self.schedule
            .lr_at(self.step.min(self.schedule.total_steps))
    }

    /// Clip (if configured) and apply one update; returns the lr used.
    pub fn step<S: Scalar>(
        &mut self,
        params: &mut Parameters<S>,
        grads: &mut Parameters<S>,
    ) -> Result<f64> {
        let lr = self.schedule.lr_at(self.step)?;
        if let Some(max) = self.cfg.clip_norm {
            clip_global_norm(grads, max);
        }
        let wd = self.cfg.effective_weight_decay();
        match &mut self.state {
            State::Sgd(s) => sgd_step(
                s,
                params,
                grads,
                lr,
                self.cfg.momentum,
                self.cfg.nesterov,
                wd,
            )?,
            State::Adam(s) => adam_step(
                s,
                params,
                grads,
                lr,
                AdamHyper {
                    beta1: self.cfg.adam_beta1,
                    beta2: self.cfg.adam_beta2,
                    eps: self.cfg.adam_eps,
                    weight_decay: wd,
                },
            )?,
            State::Shampoo(s) => s.step(
                params,
                grads,
                ShampooStep {
                    lr,
                    momentum: self.cfg.momentum,
                    nesterov: self.cfg.nesterov,
                    weight_decay: wd,
                },
            )?,
        }
        self.step += 1;
        Ok(lr)
    }

    /// Optimizer slots as `f32` tensors for checkpointing.
    /// Optimizer state for checkpoints, bit-exact so resumed runs continue
    /// exactly where they stopped.
    pub fn export_state(&self) -> BTreeMap<String, Tensor<f32>> {
        let vecs = |prefix: &str, m: &BTreeMap<String, Vec<f64>>| {
            m.iter()
                .map(|(k, v)| (format!("{prefix}/{k}"), pack_f64(v)))
                .collect::<Vec<_>>()
        };
        let mut out = BTreeMap::new();
        match &self.state {
            State::Sgd(s) => out.extend(vecs("sgd/v", &s.velocity)),
            State::Adam(s) => {
                out.extend(vecs("adam/m", &s.m));
                out.extend(vecs("adam/v", &s.v));
                out.insert("adam/t".into(), pack_f64(&[f64::from_bits(s.t)]));
            }
            State::Shampoo(s) => out.extend(s.export()),
        }
        out.insert(
            "optim/step".into(),
            pack_f64(&[f64::from_bits(self.step as u64)]),
        );
        out
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let load = |prefix: &str| -> Result<BTreeMap<String, Vec<f64>>> {
            state
                .iter()
                .filter_map(|(k, t)| {
                    k.strip_prefix(prefix)
                        .map(|n| Ok((n.to_string(), unpack_f64(t)?)))
                })
                .collect()
        };
        let count = |key: &str| -> Result<Option<u64>> {
            state
                .get(key)
                .map(|t| match unpack_f64(t)?.as_slice() {
                    [x] => Ok(x.to_bits()),
                    _ => Err(Error::Manifest(format!("`{key}` must hold one value"))),
                })
                .transpose()
        };
        match &mut self.state {
            State::Sgd(s) => s.velocity = load("sgd/v/")?,
            State::Adam(s) => {
                s.m = load("adam/m/")?;
                s.v = load("adam/v/")?;
                s.t = count("adam/t")?.unwrap_or(0);
            }
            State::Shampoo(s) => s.import(state)?,
        }
        if let Some(t) = count("optim/step")? {
            self.step = t as usize;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, v: &[f64]) -> Parameters<f64> {
        let mut p = Parameters::new();
        p.insert(name, Tensor::from_f64(&[v.len()], v).unwrap());
        p
    }

    #[test]
    fn zero_grad_zero_wd_is_noop() {
        let mut p = one("w", &[0.5, -1.0, 2.0]);
        let g = one("w", &[0.0, 0.0, 0.0]);
        let before = p.clone();
        sgd_step(&mut SgdState::default(), &mut p, &g, 0.1, 0.9, true, 0.0).unwrap();
        assert_eq!(p, before);
        let hp = AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adam_step(&mut AdamState::default(), &mut p, &g, 0.1, hp).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_with_zero_betas_normalizes() {
        let mut p = one("w", &[0.0, 0.0, 0.0, 0.0]);
        let g = one("w", &[0.3, -2.0, 1e-9, 0.0]);
        let hp = AdamHyper {
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
        };
        adam_step(&mut AdamState::default(), &mut p, &g, 1.0, hp).unwrap();
        for (x, gi) in p
            .get("w")
            .unwrap()
            .data()
            .iter()
            .zip(g.get("w").unwrap().data())
        {
            assert!((x + gi / (gi.abs() + 1e-8)).abs() < 1e-7);
        }
    }

    #[test]
    fn nesterov_without_momentum_is_gd() {
        let mut p = one("w", &[1.0, 2.0]);
        let g = one("w", &[0.5, -0.5]);
        let mut s = SgdState::default();
        sgd_step(&mut s, &mut p, &g, 0.1, 0.0, true, 0.0).unwrap();
        sgd_step(&mut s, &mut p, &g, 0.1, 0.0, true, 0.0).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-15 && (w[1] - 2.1).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay() {
        let mut p = one("w", &[2.0]);
        let g = one("w", &[0.0]);
        sgd_step(&mut SgdState::default(), &mut p, &g, 0.1, 0.9, true, 0.5).unwrap();
        assert!((p.get("w").unwrap().data()[0] - 2.0 * 0.95).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = one("a", &[3.0, 4.0]);
        assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
        assert_eq!(g.get("a").unwrap().data(), &[3.0, 4.0]);
        let mut g = one("a", &[3.0, 4.0]);
        g.insert("b", Tensor::from_f64(&[1], &[0.0]).unwrap());
        clip_global_norm(&mut g, 2.5);
        assert!((g.get("a").unwrap().data()[0] - 1.5).abs() < 1e-15);
        assert!((global_norm(&g) - 2.5).abs() < 1e-12);
    }

    #[test]
    fn shampoo_default_weight_decay() {
        let c = OptimConfig::new(OptimizerKind::Shampoo, 0.1);
        assert_eq!(c.effective_weight_decay(), 0.000375);
        assert_eq!(
            OptimConfig::new(OptimizerKind::Sgd, 0.1).effective_weight_decay(),
            0.0
        );
    }

    #[test]
    fn optimizer_state_round_trip() {
        let mut p = one("w", &[1.0, -1.0]);
        let mut g = one("w", &[0.25, 0.5]);
        for kind in [
            OptimizerKind::Sgd,
            OptimizerKind::Adam,
            OptimizerKind::Shampoo,
        ] {
            let cfg = OptimConfig::new(kind, 0.1);
            let mut a = Optimizer::new(cfg.clone(), 20, &p).unwrap();
            a.step(&mut p, &mut g).unwrap();
            let mut b = Optimizer::new(cfg, 20, &p).unwrap();
            b.import_state(&a.export_state()).unwrap();
            assert_eq!(b.steps_taken(), 1);
            let (mut pa, mut pb) = (p.clone(), p.clone());
            a.step(&mut pa, &mut g).unwrap();
            b.step(&mut pb, &mut g).unwrap();
            assert!(
                pa.get("w").unwrap().max_abs_diff(pb.get("w").unwrap()) < 1e-6,
                "{kind:?}"
            );
        }
    }
}
