//! Shared fixtures and brute-force oracles for the integration tests.
#![allow(dead_code, clippy::needless_range_loop)]

use prediflow::pipeline::PrediFlowConfig;
use prediflow::predictor::PredictorConfig;
use prediflow::refiner::RefinerConfig;
use prediflow::synth::{
    generate_dataset, split_trials, window_samples, ScenarioConfig, Trial, Windows,
};

/// Six short trials: four for training, one each for validation and test.
pub fn small_scenario(seed: u64) -> ScenarioConfig {
    ScenarioConfig {
        trial_length: 600,
        num_trials: 6,
        seed,
        ..ScenarioConfig::default()
    }
}

pub fn trials(cfg: &ScenarioConfig) -> Vec<Trial> {
    generate_dataset(cfg).unwrap()
}

/// `(train, val, test)` windows with strides 3 and 15.
pub fn splits(trials: &[Trial]) -> (Windows<'_>, Windows<'_>, Windows<'_>) {
    let s = split_trials(trials.len()).unwrap();
    (
        window_samples(trials, &s.train, 30, 120, 3).unwrap(),
        window_samples(trials, &s.val, 30, 120, 15).unwrap(),
        window_samples(trials, &s.test, 30, 120, 15).unwrap(),
    )
}

pub fn tiny_predictor() -> PredictorConfig {
    PredictorConfig {
        d: 16,
        blocks: 2,
        ..PredictorConfig::default()
    }
}

pub fn tiny_refiner(robot_condition: bool) -> RefinerConfig {
    RefinerConfig {
        d: 16,
        blocks: 2,
        heads: 2,
        robot_condition,
        ..RefinerConfig::default()
    }
}

/// A few cheap epochs with validation every epoch.
pub fn tiny_pipeline(epochs: usize) -> PrediFlowConfig {
    let mut c = PrediFlowConfig {
        epochs,
        samples_per_epoch: 64,
        batch: 16,
        val_every: 1,
        val_windows: 3,
        val_n: 2,
        val_m: 2,
        alpha_samples: 1000,
        ..PrediFlowConfig::default()
    };
    c.schedule.max_epochs = epochs;
    c.schedule.warmup_epochs = 1;
    c
}

// ---- oracles: plain loops, f64 throughout, no shared code with the library

pub fn naive_frame_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        s += d * d;
    }
    s.sqrt()
}

pub fn naive_ade(pred: &[f32], gt: &[f32], dim: usize) -> f64 {
    let frames = pred.len() / dim;
    let mut s = 0.0;
    for f in 0..frames {
        s += naive_frame_dist(&pred[f * dim..(f + 1) * dim], &gt[f * dim..(f + 1) * dim]);
    }
    s / frames as f64
}

pub fn naive_fde(pred: &[f32], gt: &[f32], dim: usize) -> f64 {
    let f = pred.len() / dim - 1;
    naive_frame_dist(&pred[f * dim..], &gt[f * dim..])
}

/// Best, median, worst by selection sort.
pub fn naive_bmw(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    for i in 0..v.len() {
        let mut k = i;
        for j in i + 1..v.len() {
            if v[j] < v[k] {
                k = j;
            }
        }
        v.swap(i, k);
    }
    let n = v.len();
    let med = if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    };
    (v[0], med, v[n - 1])
}

pub fn naive_similar(windows: &Windows<'_>, threshold: f64) -> Vec<Vec<usize>> {
    let n = windows.len();
    let mut out = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if naive_frame_dist(windows.last_observed(i), windows.last_observed(j)) < threshold {
                out[i].push(j);
            }
        }
    }
    out
}

/// Per-window `[ade, fde, mmade, mmfde]` best/median/worst of `samples`
/// (each `[F, dim]`).
pub fn naive_window_metrics(
    samples: &[Vec<f32>],
    gt: &[f32],
    similar: &[&[f32]],
    dim: usize,
) -> [(f64, f64, f64); 4] {
    let mut v: [Vec<f64>; 4] = Default::default();
    for s in samples {
        v[0].push(naive_ade(s, gt, dim));
        v[1].push(naive_fde(s, gt, dim));
        let (mut ma, mut mf) = (0.0, 0.0);
        for g in similar {
            ma += naive_ade(s, g, dim);
            mf += naive_fde(s, g, dim);
        }
        v[2].push(ma / similar.len() as f64);
        v[3].push(mf / similar.len() as f64);
    }
    [
        naive_bmw(&v[0]),
        naive_bmw(&v[1]),
        naive_bmw(&v[2]),
        naive_bmw(&v[3]),
    ]
}
