use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use visreg::data::{Dataset, Split};
use visreg::network::{checkpoint, Activation, Batch, LayerParams, LayerSpec, NetworkModel, Regularization, Shape3};
use visreg::trainer::{evaluate, train, train_step, write_metrics_csv, Optimizer, Schedule, TrainConfig};
use visreg::{Norm, RelKernel};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn toy_dataset(n: usize, side: usize, classes: usize, seed: u64) -> Dataset {
    let mut r = rng(seed);
    let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..classes)).collect();
    let features = side * side;
    // Each class lights up its own band of pixels plus noise, so the task is learnable.
    let pixels = Array2::from_shape_fn((n, features), |(i, j)| {
        let band = j * classes / features;
        let signal = if band == labels[i] { 1.0 } else { 0.0 };
        signal + 0.3 * r.random_range(-1.0..1.0)
    });
    Dataset::new(Shape3::new(1, side, side), pixels, labels, Split::Train).unwrap()
}

fn softmax_rows(z: &Array2<f64>) -> Array2<f64> {
    let mut p = z.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row /= s;
    }
    p
}

/// Plain SGD on softmax regression with `lambda * |W|^2`, written from scratch.
fn reference_sgd(w: &mut Array2<f64>, b: &mut Array1<f64>, x: &Array2<f64>, y: &[usize], lambda: f64, lr: f64) {
    let n = x.nrows() as f64;
    let mut delta = softmax_rows(&(x.dot(&w.t()) + &*b));
    for (i, &label) in y.iter().enumerate() {
        delta[[i, label]] -= 1.0;
    }
    delta /= n;
    let gw = delta.t().dot(x) + &(w.mapv(|v| 2.0 * lambda * v));
    let gb = delta.sum_axis(Axis(0));
    *w -= &(gw * lr);
    *b -= &(gb * lr);
}

fn softmax_regression(features: usize, classes: usize, seed: u64) -> NetworkModel {
    NetworkModel::new(Shape3::flat(features), vec![LayerSpec::output(classes)], None, &mut rng(seed)).unwrap()
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn plain_sgd_with_l2_matches_an_independent_loop() {
    let ds = toy_dataset(40, 4, 4, 1);
    let flat = Dataset::new(Shape3::flat(16), ds.inputs().clone(), ds.labels().to_vec(), Split::Train).unwrap();
    let mut model = softmax_regression(16, 4, 2);
    let p = model.params()[0].clone().unwrap();
    let (mut w, mut b) = (p.weights, p.bias);
    let lambda = 0.05;
    let cfg = TrainConfig {
        reg: Regularization {
            lambda,
            ..Regularization::none()
        },
        lr: 0.3,
        momentum: 0.0,
        epochs: 10,
        batch_size: 40,
        ..TrainConfig::default()
    };
    let mut steps = 0;
    train(&cfg, &flat, None, &mut model, |_, m| {
        reference_sgd(&mut w, &mut b, flat.inputs(), flat.labels(), lambda, 0.3);
        steps += 1;
        let got = m.params()[0].as_ref().unwrap();
        assert!(close(&got.weights, &w, 1e-12), "weights diverged after step {steps}");
        assert!(got.bias.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-12));
        Ok(())
    })
    .unwrap();
    assert_eq!(steps, 10);
}

#[test]
fn one_step_applies_the_assembled_gradient() {
    let ds = toy_dataset(12, 4, 3, 5);
    let layers = vec![LayerSpec::dense(6, Activation::Tanh), LayerSpec::output(3)];
    let mut model = NetworkModel::new(ds.shape(), layers, Some(0), &mut rng(6)).unwrap();
    let before = model.clone();
    let reg = Regularization {
        mu1: 0.01,
        mu2: 0.02,
        lambda: 0.03,
        kernel: RelKernel::laplacian(),
    };
    let mut opt = Optimizer::new(0.9, false);
    let out = train_step(&mut model, &ds.as_batch(), &reg, &mut opt, 0.1, &mut rng(0)).unwrap();
    // First momentum step has zero velocity, so it is exactly w - lr g.
    let expect: Vec<f64> = before
        .flat_params()
        .iter()
        .zip(out.applied.flatten())
        .map(|(w, g)| w - 0.1 * g)
        .collect();
    assert_eq!(model.flat_params(), expect);
}

#[test]
fn assembly_is_the_weighted_sum_of_parts() {
    let ds = toy_dataset(10, 4, 3, 8);
    let layers = vec![LayerSpec::dense(5, Activation::Sigmoid), LayerSpec::output(3)];
    let mut model = NetworkModel::new(ds.shape(), layers, Some(0), &mut rng(9)).unwrap();
    let reg = Regularization {
        mu1: 0.25,
        mu2: 0.5,
        lambda: 0.125,
        kernel: RelKernel::laplacian(),
    };
    let mut opt = Optimizer::new(0.0, false);
    let out = train_step(&mut model, &ds.as_batch(), &reg, &mut opt, 0.01, &mut rng(0)).unwrap();
    let parts = &out.parts;
    let (z1, z2) = (parts.vr1.as_ref().unwrap(), parts.vr2.as_ref().unwrap());
    let w0 = &parts.class.layers[0].as_ref().unwrap().weights;
    let v0 = &parts.l2.layers[0].as_ref().unwrap().weights;
    let expect0 = w0 + &(v0 * 0.125) + &(z1 * 0.25) + &(z2 * 0.5);
    assert_eq!(out.applied.weights(0).unwrap(), &expect0);
    let w1 = &parts.class.layers[1].as_ref().unwrap().weights;
    let v1 = &parts.l2.layers[1].as_ref().unwrap().weights;
    assert_eq!(out.applied.weights(1).unwrap(), &(w1 + &(v1 * 0.125)));
    for l in 0..2 {
        assert_eq!(out.applied.layers[l].as_ref().unwrap().bias, parts.class.layers[l].as_ref().unwrap().bias);
    }
}

#[test]
fn momentum_accumulates_velocity() {
    let ds = toy_dataset(8, 3, 2, 3);
    let mut model = softmax_regression(9, 2, 4);
    let batch = Batch::new(ds.inputs().clone(), ds.labels().to_vec()).unwrap();
    let reg = Regularization::none();
    let mut opt = Optimizer::new(0.5, false);
    let g1 = train_step(&mut model, &batch, &reg, &mut opt, 0.1, &mut rng(0)).unwrap().applied;
    let before = model.flat_params();
    let g2 = train_step(&mut model, &batch, &reg, &mut opt, 0.1, &mut rng(0)).unwrap().applied;
    let v: Vec<f64> = g1.flatten().iter().zip(g2.flatten()).map(|(a, b)| 0.5 * a + b).collect();
    assert_eq!(opt.velocity().unwrap().flatten(), v);
    let expect: Vec<f64> = before.iter().zip(&v).map(|(w, v)| w - 0.1 * v).collect();
    assert_eq!(model.flat_params(), expect);
}

#[test]
fn pure_vr_descent_decreases_vl2_every_step() {
    let layers = vec![LayerSpec::dense(10, Activation::Relu), LayerSpec::output(4)];
    let mut model = NetworkModel::new(Shape3::new(1, 8, 8), layers, Some(0), &mut rng(12)).unwrap();
    let k = RelKernel::laplacian();
    let flipped = visreg::flip(&k);
    let (alpha, mu2) = (1e-3, 1.0);
    let mut prev = model.vl(&k, Norm::L2).unwrap();
    for step in 0..100 {
        let z2 = model.vr_gradient(0, &k, &flipped, Norm::L2).unwrap();
        let w = &mut model.params_mut()[0].as_mut().unwrap().weights;
        *w -= &(z2 * (alpha * mu2));
        let now = model.vl(&k, Norm::L2).unwrap();
        assert!(now < prev, "VL2 rose at step {step}: {prev} -> {now}");
        prev = now;
    }
}

#[test]
fn evaluate_counts_argmax_hits() {
    let shape = Shape3::flat(2);
    let params = vec![Some(LayerParams {
        weights: Array2::zeros((3, 2)),
        bias: Array1::from(vec![0.0, 0.0, 1.0]),
    })];
    let model = NetworkModel::from_parts(shape, vec![LayerSpec::output(3)], None, params).unwrap();
    let ds = Dataset::new(shape, Array2::zeros((5, 2)), vec![2, 0, 2, 1, 2], Split::Test).unwrap();
    assert_eq!(evaluate(&model, &ds).unwrap(), 0.6);
    let empty = Dataset::new(shape, Array2::zeros((0, 2)), vec![], Split::Test).unwrap();
    assert_eq!(evaluate(&model, &empty).unwrap(), 0.0);
}

#[test]
fn training_learns_the_toy_task_and_checkpoint_preserves_accuracy() {
    let ds = toy_dataset(200, 4, 4, 20);
    let test = toy_dataset(100, 4, 4, 21);
    let layers = vec![LayerSpec::dense(12, Activation::Tanh), LayerSpec::output(4)];
    let mut model = NetworkModel::new(ds.shape(), layers, Some(0), &mut rng(22)).unwrap();
    let cfg = TrainConfig {
        reg: Regularization {
            mu2: 0.001,
            lambda: 0.001,
            ..Regularization::none()
        },
        lr: 0.1,
        epochs: 15,
        batch_size: 20,
        ..TrainConfig::default()
    };
    let log = train(&cfg, &ds, Some(&test), &mut model, |_, _| Ok(())).unwrap();
    let acc = log.last().unwrap().test_acc.unwrap();
    assert!(acc > 0.9, "test accuracy {acc}");
    assert!(log.last().unwrap().train_loss < log[0].train_loss);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("final.ckpt");
    checkpoint::save(&model, &path).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(evaluate(&back, &test).unwrap(), acc);
}

#[test]
fn seeded_runs_write_identical_metrics() {
    let ds = toy_dataset(60, 4, 3, 30);
    let run = || {
        let layers = vec![LayerSpec::dense(8, Activation::Relu), LayerSpec::dropout(0.3), LayerSpec::output(3)];
        let mut model = NetworkModel::new(ds.shape(), layers, Some(0), &mut rng(31)).unwrap();
        let cfg = TrainConfig {
            reg: Regularization {
                mu1: 0.001,
                mu2: 0.01,
                lambda: 0.01,
                kernel: RelKernel::laplacian(),
            },
            lr: 0.05,
            nesterov: true,
            schedule: Schedule::Steps(vec![(2, 0.02)]),
            epochs: 4,
            batch_size: 16,
            seed: 99,
            ..TrainConfig::default()
        };
        let log = train(&cfg, &ds, Some(&ds), &mut model, |_, _| Ok(())).unwrap();
        let mut csv = Vec::new();
        write_metrics_csv(&log, &mut csv).unwrap();
        (csv, model)
    };
    let (a, ma) = run();
    let (b, mb) = run();
    assert_eq!(a, b);
    assert_eq!(ma, mb);
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(3).unwrap().starts_with("2,0.02,"));
}

#[test]
fn divergence_is_reported_with_epoch_and_rate() {
    let ds = toy_dataset(20, 4, 4, 40);
    let mut model = softmax_regression(16, 4, 41);
    let flat = Dataset::new(Shape3::flat(16), ds.inputs() * 1e200, ds.labels().to_vec(), Split::Train).unwrap();
    let cfg = TrainConfig {
        lr: 1e10,
        epochs: 3,
        batch_size: 20,
        ..TrainConfig::default()
    };
    match train(&cfg, &flat, None, &mut model, |_, _| Ok(())) {
        Err(visreg::Error::Diverged { lr, .. }) => assert_eq!(lr, 1e10),
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn shape_mismatch_is_rejected() {
    let ds = toy_dataset(10, 4, 2, 50);
    let mut model = softmax_regression(9, 2, 51);
    let err = train(&TrainConfig::default(), &ds, None, &mut model, |_, _| Ok(())).unwrap_err();
    assert!(matches!(err, visreg::Error::Shape(_)));
}
