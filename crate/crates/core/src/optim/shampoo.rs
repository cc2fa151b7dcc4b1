//! Blocked Shampoo with nesterov momentum.
//!
//! Each gradient is matricized (`[d0·…·d(n-2), d(n-1)]`; vectors stay
//! vectors) and cut into blocks of at most `block_size` along each
//! dimension. A matrix block keeps left/right Kronecker statistics
//! `L += G·Gᵀ`, `R += Gᵀ·G` and is preconditioned as `L^(-1/4)·G·R^(-1/4)`;
//! a vector block keeps one statistic and uses exponent `-1/2`.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pth_root::inverse_pth_root;
use super::{pack_f64, unpack_f64};
use crate::error::{Error, Result};
use crate::models::Parameters;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShampooConfig {
    pub block_size: usize,
    /// Damping added to every statistic before the root.
    pub eps: f64,
    /// Recompute preconditioners every this many steps.
    pub refresh_interval: usize,
}

impl Default for ShampooConfig {
    fn default() -> Self {
        ShampooConfig {
            block_size: 128,
            eps: 1e-6,
            refresh_interval: 1,
        }
    }
}

/// Row-major `[rows, cols]` view of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Matricized {
    Vector(usize),
    Matrix { rows: usize, cols: usize },
}

pub fn matricize(shape: &[usize]) -> Matricized {
    match shape {
        [] => Matricized::Vector(1),
        [n] => Matricized::Vector(*n),
        [.., last] => Matricized::Matrix {
            rows: shape[..shape.len() - 1].iter().product(),
            cols: *last,
        },
    }
}

/// Split `0..n` into consecutive chunks of at most `size`.
pub fn partition(n: usize, size: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(size.max(1))
        .map(|s| (s, (s + size).min(n)))
        .collect()
}

#[derive(Debug, Clone)]
struct Block {
    rows: (usize, usize),
    cols: (usize, usize),
    left: DMatrix<f64>,
    right: Option<DMatrix<f64>>,
    left_root: DMatrix<f64>,
    right_root: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
struct ParamState {
    shape: Vec<usize>,
    layout: Matricized,
    blocks: Vec<Block>,
    momentum: Vec<f64>,
}

impl ParamState {
    fn new(shape: &[usize], block_size: usize) -> Self {
        let layout = matricize(shape);
        let blocks = match layout {
            Matricized::Vector(n) => partition(n, block_size)
                .into_iter()
                .map(|r| Block {
                    rows: r,
                    cols: (0, 1),
                    left: DMatrix::zeros(r.1 - r.0, r.1 - r.0),
                    right: None,
                    left_root: DMatrix::identity(r.1 - r.0, r.1 - r.0),
                    right_root: None,
                })
                .collect(),
            Matricized::Matrix { rows, cols } => {
                let mut out = Vec::new();
                for r in partition(rows, block_size) {
                    for c in partition(cols, block_size) {
                        let (nr, nc) = (r.1 - r.0, c.1 - c.0);
                        out.push(Block {
                            rows: r,
                            cols: c,
                            left: DMatrix::zeros(nr, nr),
                            right: Some(DMatrix::zeros(nc, nc)),
                            left_root: DMatrix::identity(nr, nr),
                            right_root: Some(DMatrix::identity(nc, nc)),
                        });
                    }
                }
                out
            }
        };
        ParamState {
            shape: shape.to_vec(),
            layout,
            blocks,
            momentum: vec![0.0; shape.iter().product()],
        }
    }

    fn width(&self) -> usize {
        match self.layout {
            Matricized::Vector(_) => 1,
            Matricized::Matrix { cols, .. } => cols,
        }
    }
}

fn extract(flat: &[f64], width: usize, b: &Block) -> DMatrix<f64> {
    DMatrix::from_fn(b.rows.1 - b.rows.0, b.cols.1 - b.cols.0, |i, j| {
        flat[(b.rows.0 + i) * width + b.cols.0 + j]
    })
}

/// `acc += G·Gᵀ`, accumulated so `acc` stays exactly symmetric.
pub fn add_gram(acc: &mut DMatrix<f64>, g: &DMatrix<f64>) {
    let n = g.nrows();
    for i in 0..n {
        for j in 0..=i {
            let mut s = 0.0;
            for k in 0..g.ncols() {
                s += g[(i, k)] * g[(j, k)];
            }
            acc[(i, j)] += s;
            if i != j {
                acc[(j, i)] += s;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ShampooState {
    cfg: ShampooConfig,
    params: BTreeMap<String, ParamState>,
    step: u64,
}

/// Hyperparameters of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShampooStep {
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Coupled: added to the gradient before preconditioning.
    pub weight_decay: f64,
}

impl ShampooState {
    pub fn new<S: Scalar>(cfg: ShampooConfig, params: &Parameters<S>) -> Result<Self> {
        if cfg.block_size == 0 || cfg.refresh_interval == 0 {
            return Err(Error::InvalidArgument(
                "shampoo block size and refresh interval must be positive".into(),
            ));
        }
        Ok(ShampooState {
            cfg,
            params: params
                .iter()
                .map(|(n, t)| (n.clone(), ParamState::new(t.shape(), cfg.block_size)))
                .collect(),
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Every statistic matrix, for inspection.
    pub fn statistics(&self) -> impl Iterator<Item = &DMatrix<f64>> {
        self.params
            .values()
            .flat_map(|p| p.blocks.iter())
            .flat_map(|b| std::iter::once(&b.left).chain(b.right.as_ref()))
    }

    /// `(rows, cols)` extent of each block of parameter `name`.
    pub fn block_extents(&self, name: &str) -> Vec<(usize, usize)> {
        self.params
            .get(name)
            .map(|p| {
                p.blocks
                    .iter()
                    .map(|b| (b.rows.1 - b.rows.0, b.cols.1 - b.cols.0))
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn step<S: Scalar>(
        &mut self,
        params: &mut Parameters<S>,
        grads: &Parameters<S>,
        hp: ShampooStep,
    ) -> Result<()> {
        let refresh = self.step % self.cfg.refresh_interval as u64 == 0;
        let eps = self.cfg.eps;

        // Statistics first, from the raw gradient.
        let mut flat_grads = BTreeMap::new();
        for (name, st) in self.params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing gradient for {name}")))?;
            if g.shape() != st.shape.as_slice() {
                return Err(Error::shape("shampoo_step", &st.shape, g.shape()));
            }
            let w = st.width();
            let flat: Vec<f64> = g.data().iter().map(|x| x.as_f64()).collect();
            for b in st.blocks.iter_mut() {
                let gb = extract(&flat, w, b);
                add_gram(&mut b.left, &gb);
                if let Some(r) = b.right.as_mut() {
                    add_gram(r, &gb.transpose());
                }
            }
            flat_grads.insert(name.clone(), flat);
        }
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(
                "parameter set changed between steps".into(),
            ));
        }

        if refresh {
            let jobs: Vec<&mut Block> = self
                .params
                .values_mut()
                .flat_map(|p| p.blocks.iter_mut())
                .collect();
            jobs.into_par_iter().try_for_each(|b| -> Result<()> {
                match b.right.as_ref() {
                    Some(r) => {
                        b.left_root = inverse_pth_root(&b.left, 4, eps)?;
                        b.right_root = Some(inverse_pth_root(r, 4, eps)?);
                    }
                    None => b.left_root = inverse_pth_root(&b.left, 2, eps)?,
                }
                Ok(())
            })?;
        }

        for (name, st) in self.params.iter_mut() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))?;
            if p.shape() != st.shape.as_slice() {
                return Err(Error::shape("shampoo_step", &st.shape, p.shape()));
            }
            let w = st.width();
            let mut g = flat_grads.remove(name).expect("gradient collected above");
            if hp.weight_decay != 0.0 {
                for (gi, pi) in g.iter_mut().zip(p.data()) {
                    *gi += hp.weight_decay * pi.as_f64();
                }
            }
            let mut pre = vec![0.0; g.len()];
            for b in &st.blocks {
                let gb = extract(&g, w, b);
                let out = match &b.right_root {
                    Some(rr) => &b.left_root * gb * rr,
                    None => &b.left_root * gb,
                };
                for i in 0..out.nrows() {
                    for j in 0..out.ncols() {
                        pre[(b.rows.0 + i) * w + b.cols.0 + j] = out[(i, j)];
                    }
                }
            }
            for ((m, &u), x) in st.momentum.iter_mut().zip(&pre).zip(p.data_mut()) {
                *m = hp.momentum * *m + u;
                let dir = if hp.nesterov {
                    u + hp.momentum * *m
                } else {
                    *m
                };
                *x = S::from_f64_lossy(x.as_f64() - hp.lr * dir);
            }
        }
        self.step += 1;
        Ok(())
    }

    /// Momentum buffers, statistics and current roots, packed bit-exactly.
    pub fn export(&self) -> BTreeMap<String, Tensor<f32>> {
        let mat = |m: &DMatrix<f64>| pack_f64(m.as_slice());
        let mut out = BTreeMap::new();
        for (name, st) in &self.params {
            out.insert(format!("shampoo/m/{name}"), pack_f64(&st.momentum));
            for (k, b) in st.blocks.iter().enumerate() {
                out.insert(format!("shampoo/l/{name}/{k}"), mat(&b.left));
                out.insert(format!("shampoo/lr/{name}/{k}"), mat(&b.left_root));
                if let (Some(r), Some(rr)) = (&b.right, &b.right_root) {
                    out.insert(format!("shampoo/r/{name}/{k}"), mat(r));
                    out.insert(format!("shampoo/rr/{name}/{k}"), mat(rr));
                }
            }
        }
        out.insert(
            "shampoo/step".into(),
            pack_f64(&[f64::from_bits(self.step)]),
        );
        out
    }

    /// Inverse of [`export`](Self::export). Missing roots are recomputed
    /// from the imported statistics.
    pub fn import(&mut self, state: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let eps = self.cfg.eps;
        let square = |key: String, n: usize| -> Result<Option<DMatrix<f64>>> {
            let Some(t) = state.get(&key) else {
                return Ok(None);
            };
            let v = unpack_f64(t)?;
            if v.len() != n * n {
                return Err(Error::shape("shampoo import", &[n, n], &[v.len()]));
            }
            Ok(Some(DMatrix::from_vec(n, n, v)))
        };
        for (name, st) in self.params.iter_mut() {
            if let Some(m) = state.get(&format!("shampoo/m/{name}")) {
                let m = unpack_f64(m)?;
                if m.len() != st.momentum.len() {
                    return Err(Error::shape("shampoo import", &st.shape, &[m.len()]));
                }
                st.momentum = m;
            }
            for (k, b) in st.blocks.iter_mut().enumerate() {
                let p = if b.right.is_some() { 4 } else { 2 };
                let n = b.left.nrows();
                if let Some(l) = square(format!("shampoo/l/{name}/{k}"), n)? {
                    b.left_root = match square(format!("shampoo/lr/{name}/{k}"), n)? {
                        Some(root) => root,
                        None => inverse_pth_root(&l, p, eps)?,
                    };
                    b.left = l;
                }
                if let Some(r) = b.right.as_mut() {
                    let n = r.nrows();
                    if let Some(m) = square(format!("shampoo/r/{name}/{k}"), n)? {
                        b.right_root = Some(match square(format!("shampoo/rr/{name}/{k}"), n)? {
                            Some(root) => root,
                            None => inverse_pth_root(&m, 4, eps)?,
                        });
                        *r = m;
                    }
                }
            }
        }
        if let Some(s) = state.get("shampoo/step") {
            match unpack_f64(s)?.as_slice() {
                [x] => self.step = x.to_bits(),
                _ => return Err(Error::Manifest("`shampoo/step` must hold one value".into())),
            }
        }
        Ok(())
    }
}
