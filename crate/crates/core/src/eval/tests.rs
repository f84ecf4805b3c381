use super::*;
use crate::data::{apply_zscore, fit_zscore, synth, RecordSet, SampleWindow, WindowSet};
use crate::error::Error;
use crate::model::{ModelConfig, ModelParameters};
use crate::rng::RngStream;
use crate::tensor::Tensor;
use crate::train::{Checkpoint, TrainConfig};

fn normalized() -> (RecordSet, crate::data::NormStats) {
    let raw = synth::synth_generate(3, 60, 3, 2).unwrap();
    let stats = fit_zscore(&raw, 0..40).unwrap();
    (apply_zscore(&raw, &stats).unwrap(), stats)
}

#[test]
fn exact_predictions_score_zero() {
    let (rs, stats) = normalized();
    let ws = WindowSet::new(&rs, 0..60, 6, 6, 1).unwrap();
    let r = evaluate_with(&ws, &stats, Scale::Native, |w| Ok(w.future_target.clone())).unwrap();
    assert_eq!((r.mae, r.rmse), (0.0, 0.0));
    assert_eq!(r.samples(), ws.len() * 3 * 6);
}

#[test]
fn streamed_matches_brute_force() {
    let (mut rs, stats) = normalized();
    let mut rng = RngStream::new(3);
    for v in rs.validity_mut().iter_mut() {
        if rng.uniform() < 0.2 {
            *v = false;
        }
    }
    let ws = WindowSet::new(&rs, 10..60, 6, 4, 3).unwrap();
    let noisy = |w: &SampleWindow| Ok(w.future_target.map(|z| z + 0.1 * ((z * 37.0).sin())));
    let r = evaluate_with(&ws, &stats, Scale::Native, noisy).unwrap();

    // concatenate every window's native-unit samples per turbine
    let target = rs.target_index();
    let mut errs: Vec<Vec<f64>> = vec![Vec::new(); 3];
    for w in ws.iter() {
        let pred = noisy(&w).unwrap();
        for (n, e) in errs.iter_mut().enumerate() {
            for k in 0..4 {
                if w.future_validity[n * 4 + k] {
                    let y = w.future_target.get(&[n, k, 0]) * stats.std[target] + stats.mean[target];
                    let p = pred.get(&[n, k, 0]) * stats.std[target] + stats.mean[target];
                    e.push(y - p);
                }
            }
        }
    }
    let mae: f64 = errs.iter().map(|e| e.iter().map(|x| x.abs()).sum::<f64>() / e.len() as f64).sum();
    let rmse: f64 = errs.iter().map(|e| (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()).sum();
    assert!((r.mae - mae).abs() < 1e-9 && (r.rmse - rmse).abs() < 1e-9);
}

#[test]
fn doubling_inputs_doubles_metrics() {
    let y = Tensor::new(&[2, 3, 1], vec![1.0, -2.0, 0.5, 4.0, 3.0, -1.0]).unwrap();
    let y_hat = Tensor::new(&[2, 3, 1], vec![0.0, 1.0, 0.5, 2.5, 3.5, 1.0]).unwrap();
    let mask = [true, true, false, true, true, true];
    let double = |t: &Tensor| t.map(|v| 2.0 * v);
    assert_eq!(masked_mae(&double(&y), &double(&y_hat), &mask).unwrap(), 2.0 * masked_mae(&y, &y_hat, &mask).unwrap());
    assert_eq!(
        masked_rmse(&double(&y), &double(&y_hat), &mask).unwrap(),
        2.0 * masked_rmse(&y, &y_hat, &mask).unwrap()
    );
}

#[test]
fn persistence_repeats_last_valid_value() {
    let history = Tensor::new(&[2, 3, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let w = SampleWindow {
        history,
        future_target: Tensor::zeros(&[2, 2, 1]),
        future_validity: vec![true; 4],
        origin: 3,
    };
    let f = persistence_forecast(&w, 0, |n, t| !(n == 1 && t == 2));
    assert_eq!(f.data(), &[3.0, 3.0, 5.0, 5.0]);
}

#[test]
fn checkpoint_evaluation_matches_forecaster() {
    let (rs, stats) = normalized();
    let mut cfg = ModelConfig::reference(3, 3);
    cfg.history_len = 6;
    cfg.horizon_len = 6;
    cfg.d_model = 4;
    cfg.d_k = 2;
    cfg.d_v = 2;
    cfg.pool_factors = vec![3];
    let ck = Checkpoint {
        params: ModelParameters::init(&cfg, &mut RngStream::new(1)),
        model: cfg,
        epoch: 0,
        val_loss: 0.0,
        norm: stats.clone(),
        train: TrainConfig::default(),
    };
    let ws = WindowSet::new(&rs, 40..60, 6, 6, 4).unwrap();
    let r = evaluate(&ck, &ws, Scale::Native).unwrap();
    let f = Forecaster::new(&ck).unwrap();
    let mut acc = MetricAccumulator::new(rs.turbine_ids().to_vec());
    let t = rs.target_index();
    for w in ws.iter() {
        let y = w.future_target.map(|z| stats.invert(t, z));
        acc.add(&y, &f.forecast(&w, t).unwrap(), &w.future_validity).unwrap();
    }
    assert_eq!(acc.finish(Scale::Native).unwrap(), r);
    let mega = evaluate(&ck, &ws, Scale::Mega).unwrap();
    assert!((mega.mae * 1000.0 - r.mae).abs() < 1e-9);
}

#[test]
fn empty_test_set_is_an_error() {
    let (mut rs, stats) = normalized();
    for v in rs.validity_mut().iter_mut() {
        *v = false;
    }
    let mut ws = WindowSet::new(&rs, 0..60, 6, 6, 6).unwrap();
    ws.retain_scorable();
    let err = evaluate_persistence(&ws, &stats, Scale::Native).unwrap_err();
    assert!(matches!(err, Error::Evaluation(_)));
}
