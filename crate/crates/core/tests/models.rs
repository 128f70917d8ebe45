//! Behaviour of the networks and the training / inference pipeline at tiny
//! sizes.

mod common;

use common::*;

use prediflow::eval::{bench_latency, evaluate, EvalConfig, LatencyConfig, Refinement};
use prediflow::nn::{Tape, Tensor};
use prediflow::pipeline::{
    infer, infer_chunked, init_training, train_refiner, Aggregation, Sampling, TrainState,
    VelocitySource,
};
use prediflow::predictor::PredictorModel;
use prediflow::refiner::{RefinerInputs, RefinerModel};
use prediflow::synth::Windows;

fn flat_inputs(
    w: &Windows<'_>,
    i: usize,
    r: &RefinerModel,
    pred: &PredictorModel,
) -> [Vec<f32>; 4] {
    let yo = r.window.observed(w.obs_human(i), 48).unwrap();
    let init = pred.predict_coarse_flat(w.obs_human(i), 1, 3).unwrap();
    let yr = r.window.observed(w.obs_robot(i), 21).unwrap();
    let yt: Vec<f32> = (0..yo.len())
        .map(|k| ((k * 31) % 17) as f32 / 17.0 - 0.5)
        .collect();
    [yt, yo, init, yr]
}

#[test]
fn gated_off_blocks_are_identity() {
    let mut r = RefinerModel::new(tiny_refiner(true)).unwrap();
    let d = r.cfg.d;
    // give every parameter a value, then silence both gates of block 0
    for id in 0..r.store.len() {
        for (k, x) in r.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *x += 0.01 * ((k % 7) as f32 - 3.0);
        }
    }
    let ada = r.blocks[0].ada.clone();
    let (wid, bid) = (ada.weight, ada.bias.unwrap());
    let cols = 6 * d;
    for gate in [2, 5] {
        for c in gate * d..(gate + 1) * d {
            for row in 0..ada.input {
                r.store.value_mut(wid).data_mut()[row * cols + c] = 0.0;
            }
            r.store.value_mut(bid).data_mut()[c] = 0.0;
        }
    }
    let rows = 2 * r.cfg.tokens();
    let h = Tensor::from_fn(&[rows, d], |k| ((k * 13) % 19) as f32 / 19.0 - 0.5);
    let cr = Tensor::from_fn(&[2, d], |k| ((k * 7) % 5) as f32 - 2.0);
    let mut tape = Tape::new(&r.store);
    let hv = tape.input(h.clone()).unwrap();
    let c = tape.input(cr).unwrap();
    let m = r.modulation(&mut tape, 0, c, r.cfg.tokens()).unwrap();
    let y = r.block_forward(&mut tape, 0, hv, &m).unwrap();
    assert_eq!(tape.value(y), &h);
}

#[test]
fn robot_path_is_live_after_two_steps() {
    let t = trials(&small_scenario(1));
    let (train, val, _) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let cfg = tiny_pipeline(1);
    let mut st = init_training(&train, &pred, tiny_refiner(true), &cfg).unwrap();
    let [yt, yo, init, yr] = flat_inputs(&train, 0, &st.model, &pred);
    let before = st.model.forward_flat(&yt, &yo, &init, &yr, &[0.0]).unwrap();
    assert!(before.iter().all(|&v| v == 0.0));

    // step one only reaches the zero-initialised output layer; the
    // modulation heads see gradient from step two on
    let mut two = cfg.clone();
    two.samples_per_epoch = 2 * two.batch;
    train_refiner(&mut st, &train, &val, &pred, &two, 1).unwrap();
    let base = st.model.forward_flat(&yt, &yo, &init, &yr, &[0.0]).unwrap();
    let mut probe = yr.clone();
    probe.iter_mut().for_each(|v| *v += 0.05);
    let moved = st
        .model
        .forward_flat(&yt, &yo, &init, &probe, &[0.0])
        .unwrap();
    let delta = base
        .iter()
        .zip(&moved)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(
        delta > 1e-7,
        "output insensitive to the robot condition: {delta}"
    );

    // the ablated model ignores the robot input entirely
    let mut st = init_training(&train, &pred, tiny_refiner(false), &cfg).unwrap();
    train_refiner(&mut st, &train, &val, &pred, &two, 1).unwrap();
    let a = st.model.forward_flat(&yt, &yo, &init, &yr, &[0.3]).unwrap();
    let b = st
        .model
        .forward_flat(&yt, &yo, &init, &probe, &[0.3])
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn fresh_refiner_keeps_samples_near_the_coarse_prediction() {
    let t = trials(&small_scenario(2));
    let (_, _, test) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let r = RefinerModel::new(tiny_refiner(true)).unwrap();
    let alpha = 8.0;
    let s = Sampling {
        n: 10,
        m: 10,
        agg: Aggregation::All,
        alpha,
    };
    let set = infer(
        test.obs_human(0),
        test.obs_robot(0),
        &pred,
        VelocitySource::Network(&r),
        &s,
        0,
    )
    .unwrap();
    let inside = set
        .residuals
        .iter()
        .filter(|v| v.abs() as f64 <= 3.0 / alpha)
        .count();
    assert!(inside as f64 >= 0.99 * set.residuals.len() as f64);
    // same draws as the analytic zero field
    let z = infer(
        test.obs_human(0),
        test.obs_robot(0),
        &pred,
        VelocitySource::Zero,
        &s,
        0,
    )
    .unwrap();
    assert_eq!(set, z);
}

#[test]
fn batched_and_looped_inference_agree() {
    let t = trials(&small_scenario(3));
    let (_, _, test) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let mut r = RefinerModel::new(tiny_refiner(true)).unwrap();
    for id in 0..r.store.len() {
        for (k, x) in r.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *x += 0.02 * ((k % 5) as f32 - 2.0);
        }
    }
    let s = Sampling {
        n: 3,
        m: 4,
        agg: Aggregation::All,
        alpha: 4.0,
    };
    let (h, rb) = (test.obs_human(1), test.obs_robot(1));
    let f = VelocitySource::Network(&r);
    let whole = infer_chunked(h, rb, &pred, f, &s, 7, 12).unwrap();
    let looped = infer_chunked(h, rb, &pred, f, &s, 7, 1).unwrap();
    let odd = infer_chunked(h, rb, &pred, f, &s, 7, 5).unwrap();
    assert_eq!(whole.coarse, looped.coarse);
    for other in [&looped, &odd] {
        let diff = whole
            .refined
            .iter()
            .zip(&other.refined)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(diff < 1e-5, "{diff}");
    }
    assert!(whole.residuals.iter().any(|&v| v != 0.0));
    // inference is a pure function of its seed
    assert_eq!(
        infer(h, rb, &pred, f, &s, 7).unwrap(),
        infer(h, rb, &pred, f, &s, 7).unwrap()
    );
}

#[test]
fn training_freezes_predictor_and_resumes_exactly() {
    let t = trials(&small_scenario(4));
    let (train, val, _) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let fp = pred.fingerprint();
    let cfg = tiny_pipeline(3);

    let mut straight = init_training(&train, &pred, tiny_refiner(true), &cfg).unwrap();
    train_refiner(&mut straight, &train, &val, &pred, &cfg, 3).unwrap();
    assert_eq!(pred.fingerprint(), fp);
    assert_eq!(straight.log.epoch_loss.len(), 3);
    assert!(straight.log.epoch_loss.iter().all(|l| l.is_finite()));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("state.pfck");
    let mut part = init_training(&train, &pred, tiny_refiner(true), &cfg).unwrap();
    train_refiner(&mut part, &train, &val, &pred, &cfg, 1).unwrap();
    part.save(&path, &cfg).unwrap();
    let (mut resumed, rcfg) = TrainState::load(&path).unwrap();
    assert_eq!(rcfg, cfg);
    train_refiner(&mut resumed, &train, &val, &pred, &rcfg, 3).unwrap();
    assert_eq!(resumed.model.fingerprint(), straight.model.fingerprint());
    assert_eq!(resumed.log, straight.log);
    assert_eq!(
        resumed.best_model().fingerprint(),
        straight.best_model().fingerprint()
    );

    // a different predictor is refused
    let other = PredictorModel::new(prediflow::predictor::PredictorConfig {
        seed: 1,
        ..tiny_predictor()
    })
    .unwrap();
    assert!(matches!(
        train_refiner(&mut resumed, &train, &val, &other, &rcfg, 3),
        Err(prediflow::Error::Config(_))
    ));
}

#[test]
fn forced_zero_field_reproduces_coarse_metrics() {
    let t = trials(&small_scenario(5));
    let (_, _, test) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    for m in [1, 4] {
        let cfg = EvalConfig {
            n: 5,
            m,
            ..EvalConfig::default()
        };
        let coarse = evaluate(&test, &pred, None, &cfg, serde_json::Value::Null).unwrap();
        let cancel = Refinement {
            field: VelocitySource::Cancel,
            alpha: 3.0,
        };
        let refined = evaluate(&test, &pred, Some(cancel), &cfg, serde_json::Value::Null).unwrap();
        assert_eq!(coarse.metrics.len(), 1);
        assert_eq!(refined.metrics["mean"], coarse.metrics["coarse"]);
        assert_eq!(refined.metrics["coarse"], coarse.metrics["coarse"]);
        assert!(refined.improvement_pct["mean"].values().all(|&p| p == 0.0));
    }
}

#[test]
fn latency_grows_with_residual_count() {
    let t = trials(&small_scenario(6));
    let (_, _, test) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let r = RefinerModel::new(tiny_refiner(true)).unwrap();
    let f = Refinement {
        field: VelocitySource::Network(&r),
        alpha: 5.0,
    };
    let run = |m| {
        let cfg = LatencyConfig {
            n: 10,
            m,
            runs: 5,
            warmup: 1,
            ..LatencyConfig::default()
        };
        bench_latency(test.obs_human(0), test.obs_robot(0), &pred, f, &cfg).unwrap()
    };
    let (one, many) = (run(1), run(20));
    assert!(many.mean > one.mean, "{} vs {}", many.mean, one.mean);
    assert_eq!(many.samples.len(), 5);
    assert!(many.min <= many.mean && many.mean <= many.max);
}

#[test]
fn refiner_rejects_mismatched_batches() {
    let r = RefinerModel::new(tiny_refiner(true)).unwrap();
    let mut tape = Tape::new(&r.store);
    let n = r.coeff_len();
    let inp = RefinerInputs {
        yt: tape.input(Tensor::zeros(&[2 * r.cfg.tau, 48])).unwrap(),
        history: tape.input(Tensor::zeros(&[2, n])).unwrap(),
        init: tape.input(Tensor::zeros(&[1, n])).unwrap(),
        robot: tape.input(Tensor::zeros(&[2, r.robot_len()])).unwrap(),
    };
    assert!(matches!(
        r.velocity(&mut tape, inp, &[0.0, 0.0]),
        Err(prediflow::Error::Dimension(_))
    ));
}
