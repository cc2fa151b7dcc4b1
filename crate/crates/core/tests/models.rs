use funmatch::models::{build, Checkpoint, Layer, Model, ModelConfig, Parameters};
use funmatch::tensor::{Padding, Tape, Tensor};
use funmatch::Error;
use proptest::prelude::*;

#[test]
fn tensor_hand_examples() {
    let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
    let ones = Tensor::<f64>::from_f64(&[2, 1], &[1.0, 1.0]).unwrap();
    assert_eq!(a.matmul(&ones).unwrap().data(), &[3.0, 7.0]);
    assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
    assert!(a.matmul(&Tensor::<f64>::zeros(&[3, 1])).is_err());

    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_fn(&[1, 5, 5, 1], |i| i as f64 - 12.0));
    let mut delta = Tensor::zeros(&[3, 3, 1, 1]);
    delta.data_mut()[4] = 1.0;
    let k = tape.constant(delta);
    let y = tape.conv2d(x, k, 1, Padding::Same).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    let z = tape.constant(Tensor::zeros(&[3, 3, 1, 2]));
    let yz = tape.conv2d(x, z, 2, Padding::Same).unwrap();
    assert!(tape.value(yz).data().iter().all(|&v| v == 0.0));
    let bad = tape.constant(Tensor::zeros(&[5, 5, 1, 1]));
    assert!(tape.conv2d(x, bad, 1, Padding::Same).is_err());
    assert!(tape.conv2d(x, k, 3, Padding::Same).is_err());

    let l = tape.constant(Tensor::zeros(&[1, 3]));
    let ls = tape.log_softmax(l, 1).unwrap();
    for v in tape.value(ls).data() {
        assert!((v + 3f64.ln()).abs() < 1e-15);
    }
    assert!(tape.log_softmax(l, 2).is_err());
    let s = tape.constant(Tensor::from_fn(&[4], |i| i as f64 - 1.5));
    let n = tape.scale(s, -1.0);
    let (rp, rn) = (tape.relu(s), tape.relu(n));
    let abs = tape.add(rp, rn).unwrap();
    assert_eq!(tape.value(abs).data(), &[1.5, 0.5, 0.5, 1.5]);

    let w = tape.leaf(Tensor::from_fn(&[2, 3], |i| i as f64));
    let sum = tape.sum(w);
    assert!(tape
        .backward(sum)
        .unwrap()
        .wrt(w)
        .data()
        .iter()
        .all(|&g| g == 1.0));
    let zero = tape.scale(sum, 0.0);
    assert!(tape
        .backward(zero)
        .unwrap()
        .wrt(w)
        .data()
        .iter()
        .all(|&g| g == 0.0));
    assert!(tape.backward(w).is_err());
}

#[test]
fn non_finite_values_surface_in_debug_builds() {
    let mut tape: Tape<f64> = Tape::new();
    let x = tape.leaf(Tensor::new(vec![2], vec![1e308, 1.0]).unwrap());
    let y = tape.scale(x, 10.0);
    let loss = tape.sum(y);
    if cfg!(debug_assertions) {
        assert_eq!(tape.non_finite(), Some("scale"));
        assert!(matches!(
            tape.backward(loss),
            Err(Error::NonFinite("scale"))
        ));
    } else {
        assert_eq!(tape.non_finite(), None);
        assert!(tape.backward(loss).is_ok());
    }
}

#[test]
fn he_init_statistics() {
    use Layer::*;
    let cfg = ModelConfig {
        layers: vec![
            Conv {
                channels: 16,
                stride: 1,
            },
            GlobalAvgPool,
            Dense { width: 3 },
        ],
        input_resolution: 8,
        input_channels: 16,
        num_classes: 3,
    };
    let p: Parameters<f64> = build(&cfg, 3).unwrap();
    let kernel = p
        .iter()
        .find(|(_, t)| t.shape() == [3, 3, 16, 16])
        .map(|(_, t)| t.clone())
        .expect("conv kernel");
    let n = kernel.len() as f64;
    let mean = kernel.data().iter().sum::<f64>() / n;
    let std = (kernel
        .data()
        .iter()
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / n)
        .sqrt();
    let want = (2.0f64 / (9.0 * 16.0)).sqrt();
    eprintln!("conv kernel std {std:.5} vs He {want:.5}");
    assert!((std - want).abs() / want < 0.2);
    for (name, t) in p.iter() {
        if t.rank() == 1 {
            assert!(t.data().iter().all(|&b| b == 0.0), "{name} bias not zero");
        }
    }
    let empty = ModelConfig {
        layers: vec![],
        ..cfg
    };
    assert!(build::<f32>(&empty, 0).is_err());
}

#[test]
fn forward_shapes_and_purity() {
    let cfg = ModelConfig::reference_student(28, 1, 3);
    let m: Model<f32> = Model::init(cfg.clone(), 1).unwrap();
    assert_eq!(
        m.predict(&Tensor::zeros(&[0, 28, 28, 1])).unwrap().shape(),
        &[0, 3]
    );
    let one = Tensor::from_fn(&[1, 28, 28, 1], |i| ((i * 13 % 31) as f32 / 15.0) - 1.0);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let y = m
        .predict(&Tensor::new(vec![2, 28, 28, 1], two).unwrap())
        .unwrap();
    assert_eq!(y.data()[..3], y.data()[3..]);
    assert_eq!(m.predict(&one).unwrap().data(), &y.data()[..3]);
    assert_eq!(
        m.predict(&Tensor::zeros(&[2, 20, 20, 1])).unwrap().shape(),
        &[2, 3]
    );
    assert!(m.predict(&Tensor::zeros(&[1, 28, 28, 3])).is_err());

    let t: Model<f32> = Model::init(ModelConfig::reference_teacher(28, 1, 3), 1).unwrap();
    assert_eq!(
        t.predict(&Tensor::zeros(&[3, 20, 20, 1])).unwrap().shape(),
        &[3, 3]
    );
}

#[test]
fn checkpoint_round_trip_and_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig::reference_teacher(28, 1, 3);
    let params = build::<f32>(&cfg, 8).unwrap();
    let path = dir.path().join("t.fmck");
    Checkpoint::new(cfg.clone(), params.clone(), 42, 8)
        .save(&path)
        .unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!((back.step, back.seed), (42, 8));
    for ((na, a), (nb, b)) in back.params.iter().zip(params.iter()) {
        assert_eq!(na, nb);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..5], b"FMCK\x01");

    let student = ModelConfig::reference_student(28, 1, 3);
    match back.params_for(&student) {
        Err(Error::TensorShape { name, .. }) => assert_eq!(name, "l00.conv.kernel"),
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn any_truncation_is_an_error(cut in 0usize..1000) {
        let cfg = ModelConfig::reference_student(12, 1, 2);
        let bytes = Checkpoint::new(cfg.clone(), build(&cfg, 1).unwrap(), 0, 1).to_bytes().unwrap();
        let cut = cut * bytes.len() / 1000;
        prop_assert!(Checkpoint::from_bytes(&bytes[..cut], std::path::Path::new("x")).is_err());
    }
}
