//! Independent reference computations shared by the unit suites and the
//! acceptance run.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use funmatch::models::Parameters;
use funmatch::optim::{inverse_pth_root, Matrix, ShampooConfig, ShampooState, ShampooStep};
use funmatch::tensor::Tensor;
use nalgebra::{DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// `Q·diag(λ)·Qᵀ` with log-uniform eigenvalues spanning `cond`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, cond: f64) -> Matrix {
    let q = gaussian(rng, n, n).qr().q();
    let lambdas: Vec<f64> = (0..n)
        .map(|i| {
            // Pin the extremes so the condition number is exactly `cond`.
            let t = match i {
                0 => 0.0,
                1 => 1.0,
                _ => rng.gen_range(0.0..1.0),
            };
            cond.powf(-t)
        })
        .collect();
    let a = &q * Matrix::from_diagonal(&DVector::from_vec(lambdas)) * q.transpose();
    (&a + a.transpose()) * 0.5
}

/// `‖Xᵖ(A + εI) − I‖_F`.
pub fn residual(a: &Matrix, x: &Matrix, p: u32, eps: f64) -> f64 {
    let n = a.nrows();
    let mut xp = Matrix::identity(n, n);
    for _ in 0..p {
        xp = &xp * x;
    }
    let shifted = a + Matrix::identity(n, n) * eps;
    (xp * shifted - Matrix::identity(n, n)).norm()
}

/// Worst residual over n ≤ 128, condition ≤ 1e6, p ∈ {2, 4}, with and
/// without damping.
pub fn pth_root_worst_residual() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    for n in [1, 2, 5, 16, 33, 64, 128] {
        for cond in [1.0, 1e3, 1e6] {
            let a = random_spd(&mut rng, n, cond);
            for p in [2, 4] {
                for eps in [0.0, 1e-6] {
                    let x = inverse_pth_root(&a, p, eps).unwrap();
                    worst = worst.max(residual(&a, &x, p, eps));
                }
            }
        }
    }
    worst
}

pub fn params(shapes: &[(&str, &[usize])], seed: u64) -> Parameters<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = Parameters::new();
    for &(name, shape) in shapes {
        p.insert(name, Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0)));
    }
    p
}

pub const HP: ShampooStep = ShampooStep {
    lr: 0.05,
    momentum: 0.9,
    nesterov: true,
    weight_decay: 1e-3,
};

pub fn run_shampoo(shapes: &[(&str, &[usize])], block_size: usize, steps: u64) -> Parameters<f64> {
    let cfg = ShampooConfig {
        block_size,
        eps: 1e-6,
        refresh_interval: 1,
    };
    let mut p = params(shapes, 1);
    let mut st = ShampooState::new(cfg, &p).unwrap();
    for s in 0..steps {
        let g = params(shapes, 100 + s);
        st.step(&mut p, &g, HP).unwrap();
    }
    p
}

/// Parameters whose blocked (128) and unblocked updates differ in any bit.
pub fn blocked_vs_unblocked_differences() -> Vec<String> {
    let shapes: &[(&str, &[usize])] = &[
        ("conv", &[3, 3, 8, 16]),
        ("dense", &[128, 10]),
        ("bias", &[128]),
        ("square", &[100, 100]),
    ];
    let blocked = run_shampoo(shapes, 128, 4);
    let whole = run_shampoo(shapes, 1 << 20, 4);
    blocked
        .iter()
        .filter(|(name, t)| {
            let u = whole.get(name).unwrap();
            t.data()
                .iter()
                .zip(u.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
        })
        .map(|(name, _)| name.clone())
        .collect()
}

/// `G·Gᵀ` with the upper triangle mirrored from the lower.
fn sym_gram(g: &Matrix) -> Matrix {
    let full = g * g.transpose();
    Matrix::from_fn(full.nrows(), full.ncols(), |i, j| {
        full[(i.max(j), i.min(j))]
    })
}

/// Eigen-based inverse root written out independently of the library.
fn oracle_root(a: &Matrix, p: f64, eps: f64) -> Matrix {
    let n = a.nrows();
    let e = SymmetricEigen::new(a.clone());
    let mut out = Matrix::zeros(n, n);
    for k in 0..n {
        let v = e.eigenvectors.column(k);
        out += (v * v.transpose()) * (e.eigenvalues[k] + eps).powf(-1.0 / p);
    }
    out
}

/// Max |blocked − naive| over a 256×256 weight and 256 bias after three
/// steps, with the largest parameter movement for scale.
pub fn wide_layer_gap() -> (f64, f64) {
    let (n, bs, steps) = (256usize, 128usize, 3u64);
    let shapes: &[(&str, &[usize])] = &[("w", &[n, n]), ("b", &[n])];
    let got = run_shampoo(shapes, bs, steps);

    // Naive: four independent 128×128 quadrants for w, two 128-vectors for b.
    let init = params(shapes, 1);
    let mut w = Matrix::from_row_slice(n, n, init.get("w").unwrap().data());
    let mut b = DVector::from_row_slice(init.get("b").unwrap().data());
    let mut mw = Matrix::zeros(n, n);
    let mut mb = DVector::zeros(n);
    let mut left = vec![Matrix::zeros(bs, bs); 4];
    let mut right = vec![Matrix::zeros(bs, bs); 4];
    let mut vstat = vec![Matrix::zeros(bs, bs); 2];
    for s in 0..steps {
        let g = params(shapes, 100 + s);
        let gw = Matrix::from_row_slice(n, n, g.get("w").unwrap().data());
        let gb = DVector::from_row_slice(g.get("b").unwrap().data());
        let gw_wd = &gw + &w * HP.weight_decay;
        let gb_wd = &gb + &b * HP.weight_decay;
        let mut uw = Matrix::zeros(n, n);
        for (k, (r0, c0)) in [(0, 0), (0, bs), (bs, 0), (bs, bs)].into_iter().enumerate() {
            let blk = gw.view((r0, c0), (bs, bs)).clone_owned();
            left[k] += sym_gram(&blk);
            right[k] += sym_gram(&blk.transpose());
            let blk_wd = gw_wd.view((r0, c0), (bs, bs)).clone_owned();
            let u = oracle_root(&left[k], 4.0, 1e-6) * blk_wd * oracle_root(&right[k], 4.0, 1e-6);
            uw.view_mut((r0, c0), (bs, bs)).copy_from(&u);
        }
        let mut ub = DVector::zeros(n);
        for (k, r0) in [0, bs].into_iter().enumerate() {
            let v = gb.rows(r0, bs).clone_owned();
            vstat[k] += sym_gram(&Matrix::from_column_slice(bs, 1, v.as_slice()));
            let u = oracle_root(&vstat[k], 2.0, 1e-6) * gb_wd.rows(r0, bs);
            ub.rows_mut(r0, bs).copy_from(&u);
        }
        mw = &mw * HP.momentum + &uw;
        mb = &mb * HP.momentum + &ub;
        w -= (&uw + &mw * HP.momentum) * HP.lr;
        b -= (&ub + &mb * HP.momentum) * HP.lr;
    }
    // Row-major, as the library stores it.
    let want_w = w.transpose();
    let pairs = [("w", want_w.as_slice()), ("b", b.as_slice())];
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (name, want) in pairs {
        let start = init.get(name).unwrap().data();
        for ((x, y), x0) in got.get(name).unwrap().data().iter().zip(want).zip(start) {
            worst = worst.max((x - y).abs());
            scale = scale.max((x - x0).abs());
        }
    }
    (worst, scale)
}

/// Indices a percent slice selects, by direct filtering.
pub fn split_brute(n: usize, a: usize, b: usize) -> Vec<usize> {
    (0..n)
        .filter(|&i| a * n <= 100 * i && 100 * i < b * n)
        .collect()
}

/// Split names from the published split table, LaTeX markup stripped.
pub fn published_split_cells() -> Vec<String> {
    let text = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../paper.md"))
        .expect("published text at workspace root");
    let start = text.find("\\label{tbl:splits}").expect("split table");
    text[start..]
        .lines()
        .take_while(|l| !l.contains("\\end{tabular}"))
        .filter(|l| l.contains("\\texttt"))
        .flat_map(|l| l.split("&&").skip(1).map(str::to_owned).collect::<Vec<_>>())
        .map(|c| {
            c.replace("\\texttt{", "")
                .replace("}\\%", "%")
                .replace(['}', '\\'], "")
                .trim()
                .to_owned()
        })
        .collect()
}

/// Closed-form distillation KL, written out per row.
pub fn kl_oracle(s: &[f64], t: &[f64], k: usize, temp: f64) -> f64 {
    let soft = |z: &[f64]| -> Vec<f64> {
        let m = z.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = z.iter().map(|v| ((v - m) / temp).exp()).collect();
        let sum: f64 = e.iter().sum();
        e.into_iter().map(|v| v / sum).collect()
    };
    let rows = s.len() / k;
    let mut total = 0.0;
    for r in 0..rows {
        let (ps, pt) = (soft(&s[r * k..(r + 1) * k]), soft(&t[r * k..(r + 1) * k]));
        total += pt
            .iter()
            .zip(&ps)
            .map(|(a, b)| a * (a.ln() - b.ln()))
            .sum::<f64>();
    }
    temp * temp * total / rows as f64
}

/// KL(softmax([1, 0]) ‖ uniform): the two-class hand value.
pub fn two_class_kl() -> f64 {
    let p = std::f64::consts::E / (1.0 + std::f64::consts::E);
    p * (2.0 * p).ln() + (1.0 - p) * (2.0 * (1.0 - p)).ln()
}
