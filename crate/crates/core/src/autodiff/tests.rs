use super::*;
use crate::error::Error;
use crate::rng::RngStream;
use crate::tensor::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let mut tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0, 4.0]);

    let z = tape.constant(Tensor::zeros(&[2, 3]));
    let any = tape.constant(t(&[3, 2], &[1.0, -2.0, 3.0, 0.5, 7.0, 9.0]));
    let y = tape.matmul(z, any).unwrap();
    assert_eq!(tape.shape(y), &[2, 2]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let col = tape.constant(t(&[2, 1], &[5.0, 6.0]));
    let y = tape.matmul(m, col).unwrap();
    assert_eq!(tape.value(y).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape(msg)) => assert!(msg.contains("[2, 3]") && msg.matches("[2, 3]").count() == 2),
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2], &[0.0, 0.0]));
    let y = tape.softmax_rows(a).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let a = tape.constant(t(&[1], &[7.0]));
    let y = tape.softmax_rows(a).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0]);

    let a = tape.constant(t(&[2], &[2f64.ln(), 0.0]));
    let y = tape.softmax_rows(a).unwrap();
    assert!(close(tape.value(y).data(), &[2.0 / 3.0, 1.0 / 3.0], 1e-15));
}

#[test]
fn softmax_is_stable_for_large_inputs() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[1, 3], &[1000.0, 999.0, -1000.0]));
    let y = tape.softmax_rows(a).unwrap();
    let v = tape.value(y);
    assert!(v.is_finite());
    assert!((v.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
}

#[test]
fn relu_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // gradient at exactly zero is zero
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 0.0, 1.0]);

    let mut tape = Tape::new();
    let x = tape.param(t(&[2], &[-1.0, 2.0]));
    let y = tape.relu(x);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0]);

    let mut tape = Tape::new();
    let z = tape.constant(Tensor::zeros(&[4]));
    let y = tape.relu(z);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn pointwise_conv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3, 4]));
    let w = tape.constant(Tensor::ones(&[4, 5]));
    let b = tape.constant(Tensor::zeros(&[5]));
    let y = tape.pointwise_conv(x, w, b, true).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let x = tape.constant(t(&[1, 1, 1], &[3.0]));
    let w = tape.constant(t(&[1, 1], &[2.0]));
    let b = tape.constant(t(&[1], &[-1.0]));
    let y = tape.pointwise_conv(x, w, b, true).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);

    let x = tape.constant(Tensor::ones(&[3, 7, 13]));
    let w = tape.constant(Tensor::ones(&[13, 16]));
    let b = tape.constant(Tensor::zeros(&[16]));
    let y = tape.pointwise_conv(x, w, b, false).unwrap();
    assert_eq!(tape.shape(y), &[3, 7, 16]);

    let w = tape.constant(Tensor::ones(&[12, 16]));
    assert!(matches!(tape.pointwise_conv(x, w, b, true), Err(Error::Shape(_))));
}

#[test]
fn pointwise_conv_matches_dense_layer_at_every_position() {
    let mut rng = RngStream::new(3);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    };
    let (xt, wt, bt) = (rand(&[2, 3, 4]), rand(&[4, 5]), rand(&[5]));
    let mut tape = Tape::new();
    let (x, w, b) = (tape.constant(xt.clone()), tape.constant(wt.clone()), tape.constant(bt.clone()));
    let y = tape.pointwise_conv(x, w, b, false).unwrap();
    for n in 0..2 {
        for s in 0..3 {
            for o in 0..5 {
                let expect: f64 = (0..4).map(|i| xt.get(&[n, s, i]) * wt.get(&[i, o])).sum::<f64>() + bt.get(&[o]);
                assert!((tape.value(y).get(&[n, s, o]) - expect).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn maxpool_examples() {
    let mut tape = Tape::new();
    let x = tape.param(t(&[6, 1], &[1.0, 5.0, 2.0, 4.0, 4.0, 0.0]));
    let y = tape.maxpool1d(x, 3).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0, 4.0]);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    // tie between positions 3 and 4 routes to the first
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);

    let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.maxpool1d(x, 1).unwrap();
    assert_eq!(tape.value(y), tape.value(x));

    let x = tape.constant(Tensor::full(&[12, 3], 2.5));
    let y = tape.maxpool1d(x, 4).unwrap();
    assert_eq!(tape.value(y), &Tensor::full(&[3, 3], 2.5));
}

#[test]
fn maxpool_rejects_non_divisible_length() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[7, 2]));
    match tape.maxpool1d(x, 3) {
        Err(Error::Config(msg)) => assert!(msg.contains('7') && msg.contains('3')),
        other => panic!("expected configuration error, got {other:?}"),
    }
}

#[test]
fn upconv_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[3, 2]));
    let w = tape.constant(Tensor::ones(&[2, 2, 4]));
    let b = tape.constant(t(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.upconv1d(x, 2, w, b).unwrap();
    assert_eq!(tape.shape(y), &[6, 4]);
    for row in tape.value(y).data().chunks(4) {
        assert_eq!(row, &[1.0, 2.0, 3.0, 4.0]);
    }

    let x = tape.constant(t(&[2, 1], &[1.5, -2.0]));
    let w = tape.constant(t(&[2, 1, 1], &[1.0, 1.0]));
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.upconv1d(x, 2, w, b).unwrap();
    assert_eq!(tape.value(y).data(), &[1.5, 1.5, -2.0, -2.0]);

    let w = tape.constant(Tensor::ones(&[3, 1, 1]));
    let y = tape.upconv1d(x, 3, w, b).unwrap();
    assert_eq!(tape.shape(y), &[6, 1]);
}

#[test]
fn pool_then_upconv_restores_length() {
    let mut tape = Tape::new();
    for (l, p) in [(12, 3), (12, 2), (24, 4), (5, 5), (6, 1)] {
        let x = tape.constant(Tensor::ones(&[2, l, 3]));
        let pooled = tape.maxpool1d(x, p).unwrap();
        let w = tape.constant(Tensor::ones(&[p, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let up = tape.upconv1d(pooled, p, w, b).unwrap();
        assert_eq!(tape.shape(up), &[2, l, 3]);
    }
}

#[test]
fn concat_examples() {
    let mut tape = Tape::new();
    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.concat(&[a], 1).unwrap();
    assert_eq!(tape.value(y), tape.value(a));

    let p = tape.constant(Tensor::ones(&[2, 3, 16]));
    let q = tape.constant(Tensor::zeros(&[2, 3, 16]));
    let y = tape.concat(&[p, q], 2).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 32]);
    assert_eq!(tape.value(y).get(&[1, 2, 15]), 1.0);
    assert_eq!(tape.value(y).get(&[1, 2, 16]), 0.0);

    let u = tape.constant(t(&[2], &[1.0, 2.0]));
    let v = tape.constant(t(&[1], &[3.0]));
    let y = tape.concat(&[u, v], 0).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 3.0]);

    let bad = tape.constant(Tensor::zeros(&[2, 4, 16]));
    assert!(matches!(tape.concat(&[p, bad], 2), Err(Error::Shape(_))));
}

#[test]
fn concat_backward_splits_gradient() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::ones(&[2, 1]));
    let b = tape.param(Tensor::ones(&[2, 2]));
    let y = tape.concat(&[a, b], 1).unwrap();
    let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let prod = tape.mul(y, w).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(a).unwrap().data(), &[1.0, 4.0]);
    assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
}

#[test]
fn dropout_examples() {
    let mut rng = RngStream::new(11);
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::ones(&[10_000]));
    let same = tape.dropout(x, 0.0, true, &mut rng).unwrap();
    assert_eq!(same, x);
    let same = tape.dropout(x, 0.7, false, &mut rng).unwrap();
    assert_eq!(same, x);

    let y = tape.dropout(x, 0.5, true, &mut rng).unwrap();
    let v = tape.value(y).data();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
    assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));

    assert!(matches!(tape.dropout(x, 1.0, true, &mut rng), Err(Error::Config(_))));
    assert!(matches!(tape.dropout(x, -0.1, true, &mut rng), Err(Error::Config(_))));
}

#[test]
fn dropout_is_seed_deterministic() {
    let run = |seed| {
        let mut rng = RngStream::new(seed);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[64]));
        let y = tape.dropout(x, 0.3, true, &mut rng).unwrap();
        tape.value(y).clone()
    };
    assert_eq!(run(5), run(5));
}

#[test]
fn backward_examples() {
    let mut tape = Tape::new();
    let used = tape.param(t(&[2], &[1.0, 2.0]));
    let unused = tape.param(t(&[3], &[4.0, 5.0, 6.0]));
    let s = tape.sum(used);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).unwrap().data(), &[0.0, 0.0, 0.0]);

    let mut tape = Tape::new();
    let pred = tape.param(t(&[4], &[1.0, -2.0, 0.5, 3.0]));
    let target = t(&[4], &[0.0, 1.0, 0.5, -1.0]);
    let loss = tape.mse_loss(pred, &target, &[true; 4]).unwrap();
    tape.backward(loss).unwrap();
    let expect: Vec<f64> = [1.0, -3.0, 0.0, 4.0].iter().map(|d| 2.0 * d / 4.0).collect();
    assert!(close(tape.grad(pred).unwrap().data(), &expect, 1e-15));

    let mut tape = Tape::new();
    let x = tape.param(t(&[1], &[-0.5]));
    let y = tape.relu(x);
    let z = tape.scale(y, 3.0);
    tape.backward(z).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::ones(&[2]));
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn gradients_accumulate_across_uses() {
    let xt = t(&[3], &[0.5, -1.0, 2.0]);
    let single = |c: f64| {
        let mut tape = Tape::new();
        let x = tape.param(xt.clone());
        let y = tape.mul(x, x).unwrap();
        let y = tape.scale(y, c);
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        tape.grad(x).unwrap()
    };
    let mut tape = Tape::new();
    let x = tape.param(xt.clone());
    let sq = tape.mul(x, x).unwrap();
    let a = tape.scale(sq, 2.0);
    let b = tape.scale(x, 5.0);
    let both = tape.add(a, b).unwrap();
    let s = tape.sum(both);
    tape.backward(s).unwrap();
    let lin: Vec<f64> = vec![5.0; 3];
    let expect: Vec<f64> = single(2.0).data().iter().zip(&lin).map(|(a, b)| a + b).collect();
    assert_eq!(tape.grad(x).unwrap().data(), &expect[..]);
}

#[test]
fn constants_have_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::ones(&[2]));
    let p = tape.param(Tensor::ones(&[2]));
    let y = tape.mul(c, p).unwrap();
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert!(tape.grad(c).is_none());
    assert!(!tape.requires_grad(c) && tape.requires_grad(y));
}

#[test]
fn add_broadcast_sums_gradient_over_collapsed_axes() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3, 2]));
    let b = tape.param(t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = tape.add_broadcast(a, b).unwrap();
    assert_eq!(tape.value(y).get(&[1, 2, 0]), 3.0);
    assert_eq!(tape.value(y).get(&[0, 1, 1]), 2.0);
    let s = tape.sum(y);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(b).unwrap().data(), &[3.0; 4]);

    let bad = tape.constant(Tensor::zeros(&[2, 2, 2]));
    assert!(tape.add_broadcast(a, bad).is_err());
}

#[test]
fn grad_check_examples() {
    let mut rng = RngStream::new(9);
    let mut rand = |shape: &[usize]| {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
    };

    let r = grad_check(|tape, x| Ok(tape.sum(x)), &rand(&[3, 4]), 1e-5, 1e-4).unwrap();
    assert!(r.passed && r.max_rel_error < 1e-9, "{r:?}");

    let (a, b, target) = (rand(&[3, 3]), rand(&[3, 3]), rand(&[3, 3]));
    let r = grad_check_many(
        |tape, v| {
            let ab = tape.matmul(v[0], v[1])?;
            let abb = tape.matmul(ab, v[1])?;
            tape.mse_loss(abb, &target, &[true; 9])
        },
        &[a, b],
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");

    let w = rand(&[4]);
    let r = grad_check(
        |tape, x| {
            let p = tape.softmax_rows(x)?;
            let w = tape.constant(w.clone());
            let d = tape.mul(p, w)?;
            Ok(tape.sum(d))
        },
        &rand(&[4]),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(r.passed, "{r:?}");
}

#[test]
fn grad_check_flags_wrong_gradient() {
    // relu straddling its kink: the finite difference sees slope 1/2.
    let r = grad_check(
        |tape, x| {
            let y = tape.relu(x);
            Ok(tape.sum(y))
        },
        &t(&[1], &[0.0]),
        1e-5,
        1e-4,
    )
    .unwrap();
    assert!(!r.passed);
    assert!((r.max_rel_error - 0.5).abs() < 1e-9);
}

#[test]
fn grad_check_reports_non_finite() {
    let r = grad_check(
        |tape, x| {
            let v = tape.value(x).item();
            let c = tape.constant(Tensor::scalar(if v > 0.0 { f64::NAN } else { 0.0 }));
            let y = tape.add(x, c)?;
            Ok(tape.sum(y))
        },
        &t(&[1], &[0.0]),
        1e-5,
        1e-4,
    );
    assert!(matches!(r, Err(Error::Oracle(_))));
}
