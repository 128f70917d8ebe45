//! Run configuration shared by every command: one JSON document with the
//! scenario, both models, training, evaluation and the master seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{EvalConfig, LatencyConfig};
use crate::nn::LrSchedule;
use crate::pipeline::PrediFlowConfig;
use crate::predictor::{PredictorConfig, PredictorTrainConfig};
use crate::refiner::RefinerConfig;
use crate::synth::{split_trials, window_samples, ScenarioConfig, Trial, Windows};

/// Environment variable overriding [`RunConfig::seed`].
pub const SEED_ENV: &str = "PREDIFLOW_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; copied into every component by [`RunConfig::resolve`].
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub predictor: PredictorConfig,
    pub predictor_training: PredictorTrainConfig,
    pub refiner: RefinerConfig,
    pub pipeline: PrediFlowConfig,
    pub eval: EvalConfig,
    pub latency: LatencyConfig,
    /// Window stride for training windows, in frames.
    pub train_stride: usize,
    /// Window stride for validation and test windows.
    pub eval_stride: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            scenario: ScenarioConfig::default(),
            predictor: PredictorConfig::default(),
            predictor_training: PredictorTrainConfig::default(),
            refiner: RefinerConfig::default(),
            pipeline: PrediFlowConfig::default(),
            eval: EvalConfig::default(),
            latency: LatencyConfig::default(),
            train_stride: 3,
            eval_stride: 15,
        }
    }
}

impl RunConfig {
    /// Desk-scale preset (the default).
    pub fn desk() -> Self {
        RunConfig::default()
    }

    /// Desk preset with the refiner and its training at full scale:
    /// d = 512, 7 blocks, 1000 epochs, lr 2.5e-4 with 100 warm-up epochs,
    /// batch 64, 50000 samples per epoch, N = 50 at evaluation.
    pub fn paper() -> Self {
        let mut c = RunConfig::default();
        c.refiner.d = 512;
        c.refiner.blocks = 7;
        c.refiner.heads = 8;
        c.pipeline.epochs = 1000;
        c.pipeline.samples_per_epoch = 50_000;
        c.pipeline.batch = 64;
        c.pipeline.schedule = LrSchedule {
            lr_init: 2.5e-4,
            warmup_epochs: 100,
            max_epochs: 1000,
        };
        c.eval.n = 50;
        c
    }

    pub fn preset(paper_scale: bool) -> Self {
        if paper_scale {
            RunConfig::paper()
        } else {
            RunConfig::desk()
        }
    }

    /// Parses a JSON document; unknown keys are rejected. Keys that are
    /// absent keep the values of `base`.
    pub fn from_json(text: &str, base: &RunConfig) -> Result<Self> {
        let mut merged = serde_json::to_value(base)?;
        let patch: serde_json::Value =
            serde_json::from_str(text).map_err(|e| Error::config(format!("run config: {e}")))?;
        merge(&mut merged, patch);
        serde_json::from_value(merged).map_err(|e| Error::config(format!("run config: {e}")))
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text, base)
    }

    /// Applies a seed override, copies the master seed into every component
    /// and checks cross-component consistency.
    pub fn resolve(mut self, seed_override: Option<u64>) -> Result<Self> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        let s = self.seed;
        self.scenario.seed = s;
        self.predictor.seed = s;
        self.predictor_training.seed = s;
        self.refiner.seed = s;
        self.pipeline.seed = s;
        self.eval.seed = s;
        self.latency.seed = s;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.scenario.validate()?;
        self.predictor.validate()?;
        self.predictor_training.validate()?;
        self.refiner.validate()?;
        self.pipeline.validate()?;
        self.eval.validate()?;
        if self.train_stride == 0 || self.eval_stride == 0 {
            return Err(Error::config("window strides must be >= 1"));
        }
        let (t, f) = (self.scenario.history, self.scenario.horizon);
        let (hd, rd) = (3 * self.scenario.j, 3 * self.scenario.k);
        if (self.predictor.history, self.predictor.horizon) != (t, f)
            || (self.refiner.history, self.refiner.horizon) != (t, f)
        {
            return Err(Error::config(
                "predictor, refiner and scenario disagree on T / F",
            ));
        }
        if self.predictor.tau != self.refiner.tau {
            return Err(Error::config("predictor and refiner disagree on tau"));
        }
        if self.predictor.human_dim != hd
            || self.refiner.human_dim != hd
            || self.refiner.robot_dim != rd
        {
            return Err(Error::config(format!(
                "model dims must be 3J = {hd} and 3K = {rd}"
            )));
        }
        Ok(())
    }
}

/// Training, validation and test windows of one dataset.
#[derive(Clone, Debug)]
pub struct SplitWindows<'a> {
    pub train: Windows<'a>,
    pub val: Windows<'a>,
    pub test: Windows<'a>,
}

impl RunConfig {
    /// Contiguous trial split, then sliding windows at the configured strides.
    pub fn windows<'a>(&self, trials: &'a [Trial]) -> Result<SplitWindows<'a>> {
        let split = split_trials(trials.len())?;
        let (t, f) = (self.scenario.history, self.scenario.horizon);
        let w = SplitWindows {
            train: window_samples(trials, &split.train, t, f, self.train_stride)?,
            val: window_samples(trials, &split.val, t, f, self.eval_stride)?,
            test: window_samples(trials, &split.test, t, f, self.eval_stride)?,
        };
        if w.train.is_empty() || w.val.is_empty() || w.test.is_empty() {
            return Err(Error::DegenerateData(
                "a split has no windows; trials too short or too few".into(),
            ));
        }
        Ok(w)
    }
}

fn merge(base: &mut serde_json::Value, patch: serde_json::Value) {
    match (base, patch) {
        (serde_json::Value::Object(b), serde_json::Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Reads [`SEED_ENV`]; a set but unparsable value is a configuration error.
pub fn seed_from_env() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(Error::config(format!("{SEED_ENV}: {e}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().resolve(None).unwrap();
        RunConfig::paper().resolve(None).unwrap();
    }

    #[test]
    fn presets_differ_only_in_documented_constants() {
        let d = serde_json::to_value(RunConfig::desk()).unwrap();
        let p = serde_json::to_value(RunConfig::paper()).unwrap();
        let mut diffs = Vec::new();
        fn walk(a: &serde_json::Value, b: &serde_json::Value, path: String, out: &mut Vec<String>) {
            match (a, b) {
                (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
                    for (k, v) in x {
                        walk(v, &y[k], format!("{path}.{k}"), out);
                    }
                }
                _ if a != b => out.push(path),
                _ => {}
            }
        }
        walk(&d, &p, String::new(), &mut diffs);
        diffs.sort();
        assert_eq!(
            diffs,
            [
                ".eval.n",
                ".pipeline.batch",
                ".pipeline.epochs",
                ".pipeline.samples_per_epoch",
                ".pipeline.schedule.lr_init",
                ".pipeline.schedule.max_epochs",
                ".pipeline.schedule.warmup_epochs",
                ".refiner.blocks",
                ".refiner.d",
                ".refiner.heads",
            ]
        );
    }

    #[test]
    fn partial_json_and_unknown_keys() {
        let c = RunConfig::from_json(
            r#"{"seed": 9, "refiner": {"blocks": 2}}"#,
            &RunConfig::desk(),
        )
        .unwrap();
        assert_eq!((c.seed, c.refiner.blocks, c.refiner.d), (9, 2, 64));
        let e =
            RunConfig::from_json(r#"{"refiner": {"depth": 2}}"#, &RunConfig::desk()).unwrap_err();
        assert_eq!(e.exit_code(), 1);
        let e = RunConfig::from_json("{", &RunConfig::desk()).unwrap_err();
        assert_eq!(e.kind(), "config");
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::desk().resolve(Some(42)).unwrap();
        assert_eq!(
            [
                c.scenario.seed,
                c.predictor.seed,
                c.refiner.seed,
                c.pipeline.seed,
                c.eval.seed
            ],
            [42; 5]
        );
    }

    #[test]
    fn inconsistent_dims_rejected() {
        let mut c = RunConfig::desk();
        c.refiner.tau = 10;
        assert!(c.resolve(None).is_err());
    }
}
