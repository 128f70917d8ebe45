//! Dataset-level properties of the default synthetic scenario.

use std::collections::BTreeSet;

use prediflow::config::RunConfig;
use prediflow::synth::{
    encode, find_similar, generate_dataset, split_trials, DatasetFile, ScenarioConfig,
};
use prediflow::Error;

#[test]
fn default_dataset_is_multimodal() {
    let cfg = ScenarioConfig::default();
    let trials = generate_dataset(&cfg).unwrap();
    let w = RunConfig::desk().windows(&trials).unwrap();
    let test = &w.test;
    let sim = find_similar(test, 0.2).unwrap();
    let multi = sim
        .iter()
        .filter(|s| {
            s.iter()
                .map(|&j| test.future_mode(j))
                .collect::<BTreeSet<_>>()
                .len()
                >= 2
        })
        .count();
    let share = multi as f64 / test.len() as f64;
    eprintln!(
        "{multi}/{} test windows with >= 2 future modes ({share:.2})",
        test.len()
    );
    assert!(share >= 0.3);
}

#[test]
fn dataset_bytes_depend_only_on_config_and_seed() {
    let cfg = ScenarioConfig {
        num_trials: 4,
        trial_length: 400,
        ..ScenarioConfig::default()
    };
    let bytes = |c: &ScenarioConfig| {
        encode(&DatasetFile {
            j: c.j,
            k: c.k,
            rate: 60.0,
            trials: generate_dataset(c).unwrap(),
        })
        .unwrap()
    };
    let a = bytes(&cfg);
    prediflow::exec::set_sequential(true);
    let b = bytes(&cfg);
    prediflow::exec::set_sequential(false);
    assert_eq!(a, b);
    assert_ne!(
        a,
        bytes(&ScenarioConfig {
            seed: 1,
            ..cfg.clone()
        })
    );
}

#[test]
fn split_is_a_partition() {
    for n in 3..40 {
        let s = split_trials(n).unwrap();
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        assert!(!s.val.is_empty() && !s.test.is_empty() && !s.train.is_empty());
    }
    let s = split_trials(32).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (24, 4, 4));
}

#[test]
fn bad_scenarios_are_config_errors() {
    let bad = [
        ScenarioConfig {
            mode_probs: [0.5, 0.5, 0.1, 0.0],
            ..ScenarioConfig::default()
        },
        ScenarioConfig {
            link_lengths: vec![0.1, 0.2, 0.0, 0.1, 0.1, 0.1],
            ..ScenarioConfig::default()
        },
        ScenarioConfig {
            trial_length: 100,
            ..ScenarioConfig::default()
        },
    ];
    for cfg in bad {
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
    }
}
