//! Central finite-difference checks of every differentiable op at f64.
#![allow(dead_code)]

use std::sync::Mutex;

use funmatch::losses::{kl_distill, label_targets, soft_xent, xent};
use funmatch::models::{Layer, Model, ModelConfig};
use funmatch::tensor::{Padding, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Values bounded away from zero so ReLU kinks are never crossed.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Scalar loss from leaves; a fixed random projection turns any output into
/// a scalar so every output coordinate is exercised.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Var {
    let shape = tape.value(y).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(rand_t(&mut rng, &shape));
    let p = tape.mul(y, w).unwrap();
    tape.sum(p)
}

pub fn check<F>(name: &str, inputs: &[Tensor<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();

    let mut worst = 0.0f64;
    for (i, x) in inputs.iter().enumerate() {
        let g = grads.wrt(vars[i]);
        for j in 0..x.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] = x.data()[j] + H;
            let up = eval(&xs);
            xs[i].data_mut()[j] = x.data()[j] - H;
            let down = eval(&xs);
            let num = (up - down) / (2.0 * H);
            let ana = g.data()[j];
            let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-4);
            worst = worst.max(rel);
            assert!(
                rel < TOL,
                "{name}: input {i} elem {j}: analytic {ana} vs numeric {num} (rel {rel:e})"
            );
        }
    }
    eprintln!("{name}: worst rel err {worst:.2e}");
    let mut w = WORST.lock().unwrap_or_else(|e| e.into_inner());
    *w = w.max(worst);
}

static WORST: Mutex<f64> = Mutex::new(0.0);

/// Largest relative error seen by any check in this process.
pub fn worst_seen() -> f64 {
    *WORST.lock().unwrap_or_else(|e| e.into_inner())
}

/// Every op group and both networks, by name.
pub const ALL: [(&str, fn()); 8] = [
    ("matmul", matmul),
    ("conv2d", conv2d_all_geometries),
    ("elementwise", elementwise),
    ("bias/relu/pool/reshape", bias_relu_pool_reshape),
    ("reductions/log_softmax", reductions_and_log_softmax),
    ("losses", losses),
    ("reference student", full_student_cnn),
    ("conv-flatten-dense", dense_stack_with_flatten),
];

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn matmul() {
    let mut r = rng(1);
    let ins = [rand_t(&mut r, &[3, 4]), rand_t(&mut r, &[4, 5])];
    check("matmul", &ins, |t, v| {
        let y = t.matmul(v[0], v[1]).unwrap();
        project(t, y, 10)
    });
}

pub fn conv2d_all_geometries() {
    for (i, (stride, pad, hw)) in [
        (1, Padding::Same, 5),
        (2, Padding::Same, 6),
        (2, Padding::Same, 5),
        (1, Padding::Valid, 5),
        (2, Padding::Valid, 7),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r = rng(20 + i as u64);
        let ins = [
            rand_t(&mut r, &[2, hw, hw, 2]),
            rand_t(&mut r, &[3, 3, 2, 3]),
        ];
        check(&format!("conv2d s{stride} {pad:?} {hw}px"), &ins, |t, v| {
            let y = t.conv2d(v[0], v[1], stride, pad).unwrap();
            project(t, y, 11)
        });
    }
}

pub fn elementwise() {
    let mut r = rng(2);
    let ins = [rand_t(&mut r, &[2, 3]), rand_t(&mut r, &[2, 3])];
    check("add", &ins, |t, v| {
        let y = t.add(v[0], v[1]).unwrap();
        project(t, y, 12)
    });
    check("sub", &ins, |t, v| {
        let y = t.sub(v[0], v[1]).unwrap();
        project(t, y, 13)
    });
    check("mul", &ins, |t, v| {
        let y = t.mul(v[0], v[1]).unwrap();
        project(t, y, 14)
    });
    check("scale", &ins[..1], |t, v| {
        let y = t.scale(v[0], -2.5);
        project(t, y, 15)
    });
}

pub fn bias_relu_pool_reshape() {
    let mut r = rng(3);
    let ins = [rand_away(&mut r, &[2, 3, 3, 4]), rand_t(&mut r, &[4])];
    check("add_bias", &ins, |t, v| {
        let y = t.add_bias(v[0], v[1]).unwrap();
        project(t, y, 16)
    });
    check("relu", &ins[..1], |t, v| {
        let y = t.relu(v[0]);
        project(t, y, 17)
    });
    check("global_avg_pool", &ins[..1], |t, v| {
        let y = t.global_avg_pool(v[0]).unwrap();
        project(t, y, 18)
    });
    check("flatten", &ins[..1], |t, v| {
        let y = t.flatten(v[0]).unwrap();
        project(t, y, 19)
    });
    check("reshape", &ins[..1], |t, v| {
        let y = t.reshape(v[0], &[6, 12]).unwrap();
        project(t, y, 20)
    });
}

pub fn reductions_and_log_softmax() {
    let mut r = rng(4);
    let ins = [rand_t(&mut r, &[3, 5])];
    check("sum", &ins, |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.sum(y)
    });
    check("mean", &ins, |t, v| {
        let y = t.mul(v[0], v[0]).unwrap();
        t.mean(y)
    });
    for axis in [0, 1] {
        check(&format!("log_softmax axis {axis}"), &ins, |t, v| {
            let y = t.log_softmax(v[0], axis).unwrap();
            project(t, y, 21)
        });
    }
}

pub fn losses() {
    let mut r = rng(5);
    let teacher = rand_t(&mut r, &[4, 3]).map(|x| 3.0 * x);
    let student = [rand_t(&mut r, &[4, 3])];
    for temp in [1.0, 2.0, 10.0] {
        check(&format!("kl_distill T={temp}"), &student, |t, v| {
            let tv = t.constant(teacher.clone());
            kl_distill(t, v[0], tv, temp).unwrap()
        });
    }
    let labels = [0usize, 2, 1, 1];
    check("xent", &student, |t, v| xent(t, v[0], &labels).unwrap());
    let soft =
        label_targets::<f64>(&labels, 3, Some((&[0.3, 1.0, 0.8, 0.5], &[1, 0, 3, 2]))).unwrap();
    check("soft_xent", &student, |t, v| {
        soft_xent(t, v[0], &soft).unwrap()
    });
}

fn model_check(name: &str, cfg: ModelConfig, res: usize) {
    let model: Model<f64> = Model::init(cfg, 9).unwrap();
    let mut r = rng(6);
    let x = rand_t(&mut r, &[2, res, res, 1]);
    let teacher = rand_t(&mut r, &[2, 3]).map(|v| 2.0 * v);
    let names: Vec<String> = model.params.names().cloned().collect();
    let inputs: Vec<Tensor<f64>> = names
        .iter()
        .map(|n| model.params.get(n).unwrap().clone())
        .collect();
    check(name, &inputs, |t, v| {
        let bound = names.iter().cloned().zip(v.iter().copied()).collect();
        let xv = t.constant(x.clone());
        let y = model.forward(t, &bound, xv).unwrap();
        let tv = t.constant(teacher.clone());
        kl_distill(t, y, tv, 2.0).unwrap()
    });
}

pub fn full_student_cnn() {
    model_check(
        "reference student",
        ModelConfig::reference_student(10, 1, 3),
        10,
    );
}

pub fn dense_stack_with_flatten() {
    use Layer::*;
    let cfg = ModelConfig {
        layers: vec![
            Conv {
                channels: 4,
                stride: 2,
            },
            Relu,
            Flatten,
            Dense { width: 6 },
            Relu,
            Dense { width: 3 },
        ],
        input_resolution: 6,
        input_channels: 1,
        num_classes: 3,
    };
    model_check("conv-flatten-dense", cfg, 6);
}
