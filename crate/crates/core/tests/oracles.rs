//! Library results against independent brute-force and analytic oracles.

#![allow(clippy::needless_range_loop)]

mod common;

use common::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use prediflow::eval::{ade, bmw, evaluate, fde, mm_metric, BaseMetric, EvalConfig};
use prediflow::flow::{sample_euler, sample_one_step, standard_normal, FlowTime, ToyField};
use prediflow::motion::DctPlan;
use prediflow::nn::gradcheck::rel_err;
use prediflow::nn::{ParamStore, Tape, Tensor};
use prediflow::pipeline::{infer, Aggregation, Sampling, VelocitySource};
use prediflow::predictor::PredictorModel;
use prediflow::synth::find_similar;

#[test]
fn metrics_match_loop_oracles_on_random_windows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let dim = 3 * rng.random_range(1..6);
        let frames = rng.random_range(1..25);
        let k = rng.random_range(1..9);
        let gt: Vec<f32> = (0..frames * dim)
            .map(|_| rng.random::<f32>() - 0.5)
            .collect();
        let samples: Vec<Vec<f32>> = (0..k)
            .map(|_| {
                gt.iter()
                    .map(|g| g + 0.3 * (rng.random::<f32>() - 0.5))
                    .collect()
            })
            .collect();
        let sims: Vec<Vec<f32>> = (0..rng.random_range(1..5))
            .map(|_| {
                gt.iter()
                    .map(|g| g + 0.2 * (rng.random::<f32>() - 0.5))
                    .collect()
            })
            .collect();
        let sim_refs: Vec<&[f32]> = sims.iter().map(Vec::as_slice).collect();
        let want = naive_window_metrics(&samples, &gt, &sim_refs, dim);
        let mut got: [Vec<f64>; 4] = Default::default();
        for s in &samples {
            got[0].push(ade(s, &gt, dim).unwrap());
            got[1].push(fde(s, &gt, dim).unwrap());
            got[2].push(mm_metric(s, &sim_refs, dim, BaseMetric::Ade).unwrap());
            got[3].push(mm_metric(s, &sim_refs, dim, BaseMetric::Fde).unwrap());
        }
        for (g, w) in got.iter().zip(&want) {
            let b = bmw(g).unwrap();
            assert!((b.best - w.0).abs() < 1e-6);
            assert!((b.median - w.1).abs() < 1e-6);
            assert!((b.worst - w.2).abs() < 1e-6);
        }
    }
}

#[test]
fn find_similar_matches_double_loop() {
    let t = trials(&small_scenario(3));
    let (train, _, test) = splits(&t);
    for (w, thr) in [(&test, 0.2), (&train, 0.1), (&train, 0.5)] {
        assert_eq!(find_similar(w, thr).unwrap(), naive_similar(w, thr));
    }
}

#[test]
fn evaluation_harness_matches_oracle() {
    let t = trials(&small_scenario(4));
    let (_, _, test) = splits(&t);
    let pred = PredictorModel::new(tiny_predictor()).unwrap();
    let cfg = EvalConfig {
        n: 4,
        m: 3,
        ..EvalConfig::default()
    };
    let field = prediflow::eval::Refinement {
        field: VelocitySource::Zero,
        alpha: 5.0,
    };
    let rep = evaluate(&test, &pred, Some(field), &cfg, serde_json::Value::Null).unwrap();
    let sim = naive_similar(&test, cfg.threshold);
    let dim = 48;
    // sums over windows of [set][metric][best, median, worst]
    let mut acc = [[[0.0f64; 3]; 4]; 3];
    for i in 0..test.len() {
        let s = Sampling {
            n: cfg.n,
            m: cfg.m,
            agg: Aggregation::All,
            alpha: 5.0,
        };
        let set = infer(
            test.obs_human(i),
            test.obs_robot(i),
            &pred,
            VelocitySource::Zero,
            &s,
            i as u64,
        )
        .unwrap();
        let mean = set.reaggregate(Aggregation::Mean);
        let sims: Vec<&[f32]> = sim[i].iter().map(|&j| test.future_human(j)).collect();
        for (k, block) in [&set.coarse, &mean.refined, &set.refined]
            .into_iter()
            .enumerate()
        {
            // future frames T..T+F of the full IDCT, by hand
            let plan = DctPlan::new(150, 20).unwrap();
            let futures: Vec<Vec<f32>> = block
                .chunks(dim * 20)
                .map(|c| plan.inverse_raw(c, dim)[30 * dim..].to_vec())
                .collect();
            let m = naive_window_metrics(&futures, test.future_human(i), &sims, dim);
            for (a, b) in acc[k].iter_mut().zip(m) {
                a[0] += b.0;
                a[1] += b.1;
                a[2] += b.2;
            }
        }
    }
    let n = test.len() as f64;
    for (k, name) in ["coarse", "mean", "all"].iter().enumerate() {
        let r = &rep.metrics[*name];
        let got = [r.ade, r.fde, r.mmade.unwrap(), r.mmfde.unwrap()];
        for (g, w) in got.iter().zip(&acc[k]) {
            assert!((g.best - w[0] / n).abs() < 1e-6, "{name}");
            assert!((g.median - w[1] / n).abs() < 1e-6, "{name}");
            assert!((g.worst - w[2] / n).abs() < 1e-6, "{name}");
        }
    }
}

#[test]
fn dct_matches_cosine_sum() {
    let (len, tau, dim) = (17, 9, 2);
    let plan = DctPlan::new(len, tau).unwrap();
    let x: Vec<f32> = (0..len * dim)
        .map(|i| ((i * 37) % 11) as f32 / 11.0 - 0.4)
        .collect();
    let c = plan.forward_raw(&x, dim);
    for ch in 0..dim {
        for k in 0..tau {
            let s = if k == 0 {
                (1.0 / len as f64).sqrt()
            } else {
                (2.0 / len as f64).sqrt()
            };
            let mut want = 0.0;
            for l in 0..len {
                let arg = std::f64::consts::PI * (2 * l + 1) as f64 * k as f64 / (2 * len) as f64;
                want += s * arg.cos() * x[l * dim + ch] as f64;
            }
            assert!((c[ch * tau + k] as f64 - want).abs() < 1e-5);
        }
    }
}

#[test]
fn fm_loss_gradient_is_scaled_velocity_error() {
    let (rows, cols) = (3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let u = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.random::<f64>() - 0.5);
    let target = Tensor::<f64>::from_fn(&[rows, cols], |_| rng.random::<f64>() - 0.5);
    let mut store = ParamStore::<f64>::new();
    store.insert("u", u.clone()).unwrap();
    let loss = |s: &ParamStore<f64>| {
        let mut tape = Tape::new(s);
        let p = tape.param("u").unwrap();
        let t = tape.input(target.clone()).unwrap();
        let l = tape.mse(p, t).unwrap();
        (tape.value(l).data()[0], tape.backward(l).unwrap())
    };
    let (_, g) = loss(&store);
    let numel = (rows * cols) as f64;
    let h = 1e-6;
    for i in 0..rows * cols {
        let analytic = g.get(0).data()[i];
        let formula = 2.0 * (u.data()[i] - target.data()[i]) / numel;
        assert!((analytic - formula).abs() < 1e-12);
        let mut plus = store.clone();
        plus.value_mut(0).data_mut()[i] += h;
        let mut minus = store.clone();
        minus.value_mut(0).data_mut()[i] -= h;
        let fd = (loss(&plus).0 - loss(&minus).0) / (2.0 * h);
        assert!(rel_err(analytic, fd, 1e-9) < 1e-6);
    }
}

#[test]
fn delta_target_field_is_recovered_in_one_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let target: Vec<f32> = (0..6).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
    // conditional OT field towards a point mass: u(x, t) = (x1 - x) / (1 - t)
    let field = |x: &Tensor<f32>, t: FlowTime| -> prediflow::Result<Tensor<f32>> {
        let s = 1.0 / (1.0 - t.get()) as f32;
        Ok(Tensor::from_fn(x.shape(), |i| {
            (target[i % 6] - x.data()[i]) * s
        }))
    };
    let x0 = standard_normal(&mut rng, &[32, 6]);
    let y = sample_one_step(&field, &x0, 1.0).unwrap();
    for (i, v) in y.data().iter().enumerate() {
        assert!((v - target[i % 6]).abs() < 1e-6);
    }
}

#[test]
fn euler_with_one_step_is_the_one_step_sampler() {
    let field = ToyField::new(3, 16, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x0 = standard_normal(&mut rng, &[10, 3]);
    for alpha in [1.0, 3.5] {
        assert_eq!(
            sample_euler(&field, &x0, 1, alpha).unwrap(),
            sample_one_step(&field, &x0, alpha).unwrap()
        );
    }
}
