use proptest::prelude::*;

use hsttn_core::autodiff::Tape;
use hsttn_core::data::{self, fit_zscore, read_records, write_records, RecordSet, Schema, Splits, WindowSet};
use hsttn_core::eval::{masked_mae, masked_rmse, MetricAccumulator, Scale};
use hsttn_core::model::{ModelConfig, ModelParameters};
use hsttn_core::train::{adam_step, mse_loss, AdamState};
use hsttn_core::{RngStream, Tensor};

fn tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = RngStream::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| scale * rng.uniform_range(-1.0, 1.0)).collect()).unwrap()
}

fn mask(n: usize, seed: u64) -> Vec<bool> {
    let mut rng = RngStream::new(seed ^ 0x5eed);
    let mut m: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.6).collect();
    m[0] = true;
    m
}

fn small_model() -> ModelConfig {
    ModelConfig {
        history_len: 6,
        horizon_len: 6,
        d_model: 4,
        n_heads: 2,
        d_k: 2,
        d_v: 2,
        pool_factors: vec![3],
        ..ModelConfig::reference(2, 3)
    }
}

fn records(n: usize, t: usize, c: usize, seed: u64) -> RecordSet {
    let mut rng = RngStream::new(seed);
    let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
    let schema = Schema::with_channels(names, "c0");
    let values = (0..n * t * c).map(|_| (rng.uniform_range(-100.0, 100.0) * 1e4).round() / 1e4).collect();
    let mut validity: Vec<bool> = (0..n * t).map(|_| rng.uniform() < 0.8).collect();
    validity[0] = true;
    RecordSet::from_parts(schema, (1..=n).map(|i| i.to_string()).collect(), 0, t, values, validity).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..300.0, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[rows, cols], seed, scale));
        let y = tape.softmax_rows(x).unwrap();
        for row in tape.value(y).data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn pool_then_upconv_restores_length(p in 1usize..5, blocks in 1usize..6, d in 1usize..4, seed: u64) {
        let mut tape = Tape::new();
        let x = tape.constant(tensor(&[2, p * blocks, d], seed, 1.0));
        let pooled = tape.maxpool1d(x, p).unwrap();
        prop_assert_eq!(tape.shape(pooled)[1], blocks);
        let w = tape.constant(tensor(&[p, d, d], seed + 1, 1.0));
        let b = tape.constant(Tensor::zeros(&[d]));
        let up = tape.upconv1d(pooled, p, w, b).unwrap();
        prop_assert_eq!(tape.shape(up), &[2, p * blocks, d]);
    }

    #[test]
    fn reused_leaf_accumulates_gradients(n in 1usize..8, seed: u64) {
        let x = tensor(&[n], seed, 2.0);
        let grad_of = |uses: usize| {
            let mut tape = Tape::new();
            let v = tape.param(x.clone());
            let sq = tape.mul(v, v).unwrap();
            let once = tape.sum(sq);
            let y = if uses == 2 {
                let lin = tape.sum(v);
                tape.add(once, lin).unwrap()
            } else {
                once
            };
            tape.backward(y).unwrap();
            tape.grad(v).unwrap()
        };
        let twice = grad_of(2);
        let once = grad_of(1);
        for (a, b) in twice.data().iter().zip(once.data()) {
            prop_assert!((a - (b + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn inactive_dropout_is_identity(n in 1usize..20, rate in 0.0f64..0.9, seed: u64) {
        let x = tensor(&[n], seed, 5.0);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let a = tape.dropout(v, 0.0, true, &mut RngStream::new(seed)).unwrap();
        let b = tape.dropout(v, rate, false, &mut RngStream::new(seed)).unwrap();
        prop_assert_eq!(tape.value(a), &x);
        prop_assert_eq!(tape.value(b), &x);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op_for_any_state(warmup in 0usize..6, lr in 1e-5f64..1e-1, seed: u64) {
        let cfg = small_model();
        let mut rng = RngStream::new(seed);
        let mut params = ModelParameters::init(&cfg, &mut rng);
        let mut state = AdamState::new(&params);
        for k in 0..warmup {
            let grads: Vec<Tensor> = params
                .iter()
                .enumerate()
                .map(|(i, (_, p))| tensor(p.shape(), seed.wrapping_add((k * 1000 + i) as u64), 1.0))
                .collect();
            adam_step(&mut params, &grads, &mut state, lr).unwrap();
        }
        let before = params.clone();
        let (m, v) = (state.m.clone(), state.v.clone());
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        adam_step(&mut params, &zeros, &mut state, lr).unwrap();
        prop_assert_eq!(params, before);
        prop_assert_eq!(state.m, m);
        prop_assert_eq!(state.v, v);
    }

    #[test]
    fn losses_and_metrics_ignore_masked_cells(n in 1usize..5, f in 1usize..8, seed: u64) {
        let y = tensor(&[n, f, 1], seed, 50.0);
        let y_hat = tensor(&[n, f, 1], seed + 1, 50.0);
        let m = mask(n * f, seed);
        let (mut y2, mut y_hat2) = (y.clone(), y_hat.clone());
        let mut rng = RngStream::new(seed + 2);
        for j in (0..n * f).filter(|&j| !m[j]) {
            y2.data_mut()[j] = rng.uniform_range(-1e7, 1e7);
            y_hat2.data_mut()[j] = rng.uniform_range(-1e7, 1e7);
        }
        prop_assert_eq!(mse_loss(&y_hat, &y, &m).unwrap(), mse_loss(&y_hat2, &y2, &m).unwrap());
        prop_assert_eq!(masked_mae(&y, &y_hat, &m).unwrap(), masked_mae(&y2, &y_hat2, &m).unwrap());
        prop_assert_eq!(masked_rmse(&y, &y_hat, &m).unwrap(), masked_rmse(&y2, &y_hat2, &m).unwrap());
    }

    #[test]
    fn metrics_are_homogeneous_and_order_free(n in 1usize..5, f in 1usize..8, c in 0.01f64..100.0, seed: u64) {
        let y = tensor(&[n, f], seed, 10.0);
        let y_hat = tensor(&[n, f], seed + 1, 10.0);
        let m = mask(n * f, seed);
        let mae = masked_mae(&y, &y_hat, &m).unwrap();
        let rmse = masked_rmse(&y, &y_hat, &m).unwrap();
        let scaled = |t: &Tensor| t.map(|v| v * c);
        prop_assert!((masked_mae(&scaled(&y), &scaled(&y_hat), &m).unwrap() - c * mae).abs() <= 1e-9 * (1.0 + c * mae));
        prop_assert!((masked_rmse(&scaled(&y), &scaled(&y_hat), &m).unwrap() - c * rmse).abs() <= 1e-9 * (1.0 + c * rmse));

        let rev = |t: &Tensor| {
            let d: Vec<f64> = (0..n).rev().flat_map(|r| t.data()[r * f..(r + 1) * f].to_vec()).collect();
            Tensor::new(&[n, f], d).unwrap()
        };
        let m_rev: Vec<bool> = (0..n).rev().flat_map(|r| m[r * f..(r + 1) * f].to_vec()).collect();
        prop_assert!((masked_mae(&rev(&y), &rev(&y_hat), &m_rev).unwrap() - mae).abs() <= 1e-9);
        prop_assert!((masked_rmse(&rev(&y), &rev(&y_hat), &m_rev).unwrap() - rmse).abs() <= 1e-9);

        let mut acc = MetricAccumulator::with_turbines(n);
        acc.add(&y, &y_hat, &m).unwrap();
        for t in acc.finish(Scale::Native).unwrap().per_turbine {
            prop_assert!(t.rmse >= t.mae - 1e-12);
        }
    }

    #[test]
    fn records_round_trip_through_text(n in 1usize..4, t in 1usize..30, c in 1usize..4, seed: u64) {
        let mut rs = records(n, t, c, seed);
        // invalid cells travel as empty fields
        let invalid: Vec<usize> = (0..n * t).filter(|&i| !rs.validity()[i]).collect();
        for &cell in &invalid {
            rs.values_mut()[cell * c..(cell + 1) * c].fill(f64::NAN);
        }
        let mut text = Vec::new();
        write_records(&mut text, &rs).unwrap();
        let back = read_records(text.as_slice(), rs.schema()).unwrap();
        prop_assert_eq!(back.turbine_ids(), rs.turbine_ids());
        let bits = |r: &RecordSet| r.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&rs));
    }

    #[test]
    fn statistics_ignore_invalid_cells(n in 1usize..4, t in 2usize..30, c in 1usize..4, seed: u64) {
        let mut rs = records(n, t, c, seed);
        let stats = fit_zscore(&rs, 0..t).unwrap();
        let mut rng = RngStream::new(seed + 9);
        for cell in 0..n * t {
            if !rs.validity()[cell] {
                for v in &mut rs.values_mut()[cell * c..(cell + 1) * c] {
                    *v = rng.uniform_range(-1e9, 1e9);
                }
            }
        }
        prop_assert_eq!(fit_zscore(&rs, 0..t).unwrap(), stats);
    }

    #[test]
    fn windows_tile_the_timeline(t in 2usize..80, h in 1usize..10, f in 1usize..10, stride in 1usize..7) {
        prop_assume!(t >= h + f);
        let rs = records(1, t, 1, 1);
        let ws = data::make_windows(&rs, h, f, stride).unwrap();
        for (i, w) in ws.iter().enumerate() {
            prop_assert_eq!(w.origin - h, i * stride);
        }
        prop_assert_eq!(ws.len(), data::window_count(t, h, f, stride).unwrap());
    }

    #[test]
    fn splits_are_chronological(total in 10usize..5000, a in 0.05f64..0.8, b in 0.05f64..0.15) {
        prop_assume!(a + b < 0.95);
        let s = Splits::by_fraction(total, a, b);
        prop_assume!(s.is_ok());
        let s = s.unwrap();
        prop_assert!(s.train.start == 0 && s.train.end == s.val.start && s.val.end == s.test.start);
        prop_assert!(!s.train.is_empty() && !s.val.is_empty() && !s.test.is_empty());
        prop_assert_eq!(s.test.end, total);
        let rs = records(1, total, 1, 3);
        if let Ok(ws) = WindowSet::new(&rs, s.val.clone(), 2, 2, 1) {
            prop_assert!(ws.origins().iter().all(|&o| o - 2 >= s.train.end && o + 2 <= s.test.start));
        }
    }
}
