//! Property tests over the algebraic invariants.

use proptest::prelude::*;

use prediflow::eval::{ade, bmw, fde};
use prediflow::flow::{fm_loss, interpolate, interpolate_rows, FlowTime};
use prediflow::motion::{
    compose, dct, idct, residual, Agent, DctPlan, FreqCoeffs, MotionSequence, Residual,
};
use prediflow::nn::{gemm, Checkpoint, MatRef, ParamStore, Tape, Tensor, LN_EPS};
use prediflow::pipeline::{Aggregation, PredictionSet};
use prediflow::synth::{decode, encode, generate_trial, DatasetFile, ScenarioConfig};

fn vec_f32(len: usize, scale: f32) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-scale..scale, len)
}

fn seq(frames: Vec<f32>, dim: usize) -> MotionSequence {
    MotionSequence::from_frames(frames, dim, Agent::Human).unwrap()
}

fn l2(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}

/// Sequence of `len` frames of `dim` channels plus its shape.
fn motion() -> impl Strategy<Value = (usize, usize, Vec<f32>)> {
    (2usize..40, 1usize..6)
        .prop_flat_map(|(len, dim)| (Just(len), Just(dim), vec_f32(len * dim, 2.0)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dct_isometry_and_round_trip((len, dim, x) in motion()) {
        let s = seq(x.clone(), dim);
        let c = dct(&s, len).unwrap();
        let (a, b) = (l2(&x), l2(c.coeffs.data()));
        prop_assert!((a - b).abs() <= 1e-4 * a.max(1e-12));
        let back = idct(&c, len, Agent::Human).unwrap();
        for (u, v) in back.values.data().iter().zip(&x) {
            prop_assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn truncation_is_idempotent((len, dim, x) in motion(), frac in 0.0f64..1.0) {
        let tau = 1 + ((len - 1) as f64 * frac) as usize;
        let plan = DctPlan::new(len, tau).unwrap();
        let once = plan.inverse_raw(&plan.forward_raw(&x, dim), dim);
        let twice = plan.inverse_raw(&plan.forward_raw(&once, dim), dim);
        for (u, v) in once.iter().zip(&twice) {
            prop_assert!((u - v).abs() < 1e-5);
        }
    }

    #[test]
    fn truncation_error_never_grows_with_tau((len, dim, x) in motion()) {
        let mut prev = f64::INFINITY;
        for tau in 1..=len {
            let plan = DctPlan::new(len, tau).unwrap();
            let r = plan.inverse_raw(&plan.forward_raw(&x, dim), dim);
            let err: f64 = r.iter().zip(&x).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!(err <= prev + 1e-5);
            prev = err;
        }
    }

    #[test]
    fn compose_is_affine_in_delta(
        (dim, tau, len) in (1usize..5, 1usize..8, 8usize..20),
        w in 0.0f32..1.0,
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut t = |s: f32| {
            Tensor::from_fn(&[dim, tau], |_| s * (rand::Rng::random::<f32>(&mut rng) - 0.5))
        };
        let init = FreqCoeffs::new(t(2.0), len).unwrap();
        let (d1, d2) = (Residual { coeffs: t(1.0) }, Residual { coeffs: t(1.0) });
        let mix = Residual { coeffs: d1.coeffs.zip_map(&d2.coeffs, |a, b| w * a + (1.0 - w) * b).unwrap() };
        let m1 = compose(&init, &d1, len, Agent::Human).unwrap();
        let m2 = compose(&init, &d2, len, Agent::Human).unwrap();
        let mm = compose(&init, &mix, len, Agent::Human).unwrap();
        for ((a, b), c) in m1.values.data().iter().zip(m2.values.data()).zip(mm.values.data()) {
            prop_assert!((w * a + (1.0 - w) * b - c).abs() < 1e-4);
        }
        // residual(truth, init) composes back onto truth
        let truth = FreqCoeffs::new(t(2.0), len).unwrap();
        let r = residual(&truth, &init).unwrap();
        let back = compose(&init, &r, len, Agent::Human).unwrap();
        let direct = idct(&truth, len, Agent::Human).unwrap();
        prop_assert!(back.values.max_abs_diff(&direct.values).unwrap() < 1e-5);
    }

    #[test]
    fn layer_norm_standardises_rows(rows in 1usize..6, cols in 2usize..24, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x = Tensor::<f64>::from_fn(&[rows, cols], |_| 3.0 * rand::Rng::random::<f64>(&mut rng) - 1.0);
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store);
        let v = tape.input(x.clone()).unwrap();
        let y = tape.layer_norm(v, LN_EPS).unwrap();
        let y = tape.value(y);
        for r in 0..rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let xr = x.row(r);
            let xm = xr.iter().sum::<f64>() / cols as f64;
            let xv = xr.iter().map(|v| (v - xm).powi(2)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() < 1e-6);
            // eps only matters for near-constant rows
            if xv > 1e-2 {
                prop_assert!((var - 1.0).abs() < 1e-3, "var {var}");
            }
        }
    }

    #[test]
    fn gemm_matches_triple_loop(
        (m, k, n) in (1usize..12, 1usize..12, 1usize..12),
        ta in any::<bool>(),
        tb in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();
        // element (i, j) of each operand in its logical orientation
        let ae = |i: usize, j: usize| if ta { a[j * m + i] } else { a[i * k + j] };
        let be = |i: usize, j: usize| if tb { b[j * k + i] } else { b[i * n + j] };
        let am = if ta { MatRef::t(&a, k, m) } else { MatRef::new(&a, m, k) };
        let bm = if tb { MatRef::t(&b, n, k) } else { MatRef::new(&b, k, n) };
        let mut out = vec![1.0; m * n];
        gemm(am, bm, &mut out, true);
        for i in 0..m {
            for j in 0..n {
                let s: f64 = (0..k).map(|p| ae(i, p) * be(p, j)).sum();
                prop_assert!((out[i * n + j] - 1.0 - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ops_reject_non_finite(len in 1usize..16, at in any::<prop::sample::Index>(), bad in prop_oneof![Just(f32::NAN), Just(f32::INFINITY)]) {
        let mut x = vec![0.5f32; len];
        x[at.index(len)] = bad;
        let store = ParamStore::<f32>::new();
        let mut tape = Tape::new(&store);
        let r = Tensor::new(&[1, len], x).and_then(|t| tape.input(t));
        prop_assert!(matches!(r, Err(prediflow::Error::Numeric(_))));
    }

    #[test]
    fn interpolation_is_exact(rows in 1usize..6, cols in 1usize..6, t in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let x0 = prediflow::flow::standard_normal(&mut rng, &[rows, cols]);
        let x1 = prediflow::flow::standard_normal(&mut rng, &[rows, cols]);
        let xt = interpolate(&x0, &x1, FlowTime::new(t).unwrap()).unwrap();
        let tf = t as f32;
        for i in 0..x0.numel() {
            prop_assert_eq!(xt.data()[i], tf * x1.data()[i] + (1.0 - tf) * x0.data()[i]);
        }
        let per = interpolate_rows(&x0, &x1, &vec![tf; rows]).unwrap();
        prop_assert_eq!(per, xt);
        prop_assert!(FlowTime::new(1.0 + 1e-9).is_err() && FlowTime::new(-1e-9).is_err());
    }

    #[test]
    fn fm_loss_is_mean_squared_velocity_error(len in 1usize..20, seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut draw = || prediflow::flow::standard_normal(&mut rng, &[1, len]);
        let (u, x0, x1) = (draw(), draw(), draw());
        let mut s = 0.0;
        for i in 0..len {
            let e = u.data()[i] as f64 - (x1.data()[i] as f64 - x0.data()[i] as f64);
            s += e * e;
        }
        prop_assert!((fm_loss(&u, &x0, &x1).unwrap() - s / len as f64).abs() < 1e-12);
        let exact = x1.zip_map(&x0, |b, a| b - a).unwrap();
        prop_assert!(fm_loss(&exact, &x0, &x1).unwrap() < 1e-12);
    }

    #[test]
    fn best_median_worst_are_ordered(v in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let b = bmw(&v).unwrap();
        prop_assert!(b.best <= b.median && b.median <= b.worst);
        prop_assert_eq!(b.best, v.iter().cloned().fold(f64::INFINITY, f64::min));
        prop_assert_eq!(b.worst, v.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }

    #[test]
    fn fde_is_last_frame_ade((frames, dim) in (1usize..10, 1usize..7), seed in any::<u64>()) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let p = prediflow::flow::standard_normal(&mut rng, &[frames, dim]);
        let g = prediflow::flow::standard_normal(&mut rng, &[frames, dim]);
        let last = (frames - 1) * dim;
        let f = fde(p.data(), g.data(), dim).unwrap();
        let a = ade(&p.data()[last..], &g.data()[last..], dim).unwrap();
        prop_assert_eq!(f, a);
        prop_assert_eq!(ade(p.data(), p.data(), dim).unwrap(), 0.0);
    }

    #[test]
    fn aggregation_counts_and_mean_linearity(
        (n, m, len) in (1usize..5, 1usize..5, 1usize..6),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let coarse = prediflow::flow::standard_normal(&mut rng, &[n, len]).into_data();
        let residuals = prediflow::flow::standard_normal(&mut rng, &[n * m, len]).into_data();
        let set = PredictionSet {
            n,
            m,
            agg: Aggregation::All,
            coarse: coarse.clone(),
            residuals,
            refined: Vec::new(),
            human_dim: len,
            tau: 1,
            full_length: 1,
        };
        let all = set.reaggregate(Aggregation::All);
        let mean = set.reaggregate(Aggregation::Mean);
        prop_assert_eq!(all.len(), n * m);
        prop_assert_eq!(mean.len(), n);
        // the mean of the "all" samples of one coarse draw is the "mean" sample
        for i in 0..n {
            for c in 0..len {
                let avg: f64 = (0..m).map(|j| all.refined[(i * m + j) * len + c] as f64).sum::<f64>() / m as f64;
                prop_assert!((avg - mean.refined[i * len + c] as f64).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(
        entries in prop::collection::vec(("[a-z.]{1,12}", prop::collection::vec(1usize..4, 0..4)), 0..5),
        seed in any::<u64>(),
    ) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
        let mut ck = Checkpoint::new();
        for (name, shape) in entries {
            ck.push(name, prediflow::flow::standard_normal(&mut rng, &shape));
        }
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn trials_are_rigid_and_serialise_exactly(seed in any::<u64>()) {
        let cfg = ScenarioConfig { trial_length: 300, num_trials: 1, ..ScenarioConfig::default() };
        let trial = generate_trial(&cfg, seed).unwrap();
        prop_assert!(trial.human.values.is_finite() && trial.robot.values.is_finite());
        for f in 0..trial.len() {
            let kp = trial.robot.frame(f);
            for (l, &link) in cfg.link_lengths.iter().enumerate() {
                let d: f64 = (0..3).map(|c| (kp[(l + 1) * 3 + c] as f64 - kp[l * 3 + c] as f64).powi(2)).sum::<f64>().sqrt();
                prop_assert!((d - link).abs() < 1e-6 + 1e-6 * link, "frame {f} link {l}: {d} vs {link}");
            }
        }
        let file = DatasetFile { j: cfg.j, k: cfg.k, rate: 60.0, trials: vec![trial] };
        let bytes = encode(&file).unwrap();
        prop_assert_eq!(encode(&decode(&bytes).unwrap()).unwrap(), bytes);
    }
}
