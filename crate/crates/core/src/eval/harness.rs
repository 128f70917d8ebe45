use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::metrics::{ade, bmw, fde, mm_metric, BaseMetric, Bmw};
use crate::error::{Error, Result};
use crate::exec;
use crate::pipeline::{infer, strided_subset, Aggregation, Sampling, VelocitySource};
use crate::predictor::PredictorModel;
use crate::synth::{find_similar, Windows};

/// Real-time budget per prediction at 60 Hz, in seconds.
pub const REALTIME_BUDGET: f64 = 0.0167;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n: usize,
    pub m: usize,
    /// Also compute MMADE / MMFDE.
    pub multimodal: bool,
    /// Similarity threshold on the last observed frame.
    pub threshold: f64,
    /// Evaluate an evenly strided subset of this many windows; all if `None`.
    pub windows: Option<usize>,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n: 10,
            m: 10,
            multimodal: true,
            threshold: 0.2,
            windows: None,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::config("evaluation needs N, M >= 1"));
        }
        if !(self.threshold > 0.0) {
            return Err(Error::config("similarity threshold must be positive"));
        }
        if self.windows == Some(0) {
            return Err(Error::config("windows must be >= 1 when given"));
        }
        Ok(())
    }
}

/// Best/median/worst-of-many per metric, averaged over windows.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricResult {
    pub ade: Bmw,
    pub fde: Bmw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmade: Option<Bmw>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mmfde: Option<Bmw>,
}

impl MetricResult {
    fn entries(&self) -> Vec<(&'static str, Bmw)> {
        let mut v = vec![("ade", self.ade), ("fde", self.fde)];
        if let Some(b) = self.mmade {
            v.push(("mmade", b));
        }
        if let Some(b) = self.mmfde {
            v.push(("mmfde", b));
        }
        v
    }
}

/// `100 * (coarse - refined) / coarse` keyed `"{metric}.{best|median|worst}"`.
pub fn improvement_pct(coarse: &MetricResult, refined: &MetricResult) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for ((name, c), (_, r)) in coarse.entries().into_iter().zip(refined.entries()) {
        for (stat, cv, rv) in [
            ("best", c.best, r.best),
            ("median", c.median, r.median),
            ("worst", c.worst, r.worst),
        ] {
            let pct = if cv == 0.0 {
                0.0
            } else {
                100.0 * (cv - rv) / cv
            };
            out.insert(format!("{name}.{stat}"), pct);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LatencyConfig {
    pub warmup: usize,
    pub runs: usize,
    pub n: usize,
    pub m: usize,
    pub agg: Aggregation,
    pub budget: f64,
    pub seed: u64,
}

impl Default for LatencyConfig {
    fn default() -> Self {
        LatencyConfig {
            warmup: 3,
            runs: 20,
            n: 50,
            m: 10,
            agg: Aggregation::Mean,
            budget: REALTIME_BUDGET,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    /// Seconds per full inference.
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub runs: usize,
    pub warmup: usize,
    pub n: usize,
    pub m: usize,
    pub threads: usize,
    pub budget: f64,
    pub within_budget: bool,
    /// Mean seconds of the coarse predictor alone with the same `n`.
    pub predictor_mean: f64,
    /// `mean / predictor_mean`.
    pub overhead_ratio: f64,
    /// One wall-clock sample per timed run.
    pub samples: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Run configuration the numbers came from.
    pub config: serde_json::Value,
    pub eval: EvalConfig,
    pub windows: usize,
    pub threads: usize,
    /// `coarse`, and `mean` / `all` when a refiner was evaluated.
    pub metrics: BTreeMap<String, MetricResult>,
    /// Per refined aggregation, improvement over `coarse` in percent.
    pub improvement_pct: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<LatencyReport>,
}

impl EvalReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Refinement applied during evaluation: a velocity source and its `alpha`.
#[derive(Clone, Copy)]
pub struct Refinement<'a> {
    pub field: VelocitySource<'a>,
    pub alpha: f64,
}

#[derive(Default)]
struct PerWindow {
    ade: Vec<Bmw>,
    fde: Vec<Bmw>,
    mmade: Vec<Bmw>,
    mmfde: Vec<Bmw>,
}

fn mean_bmw(v: &[Bmw]) -> Bmw {
    let k = v.len() as f64;
    Bmw {
        best: v.iter().map(|b| b.best).sum::<f64>() / k,
        median: v.iter().map(|b| b.median).sum::<f64>() / k,
        worst: v.iter().map(|b| b.worst).sum::<f64>() / k,
    }
}

/// Per-sample metrics of one sample set, reduced to best/median/worst.
fn score(
    samples: &[f32],
    predictor: &PredictorModel,
    gt: &[f32],
    similar: Option<&[&[f32]]>,
) -> Result<[Option<Bmw>; 4]> {
    let dim = predictor.cfg.human_dim;
    let len = dim * predictor.cfg.tau;
    let mut vals: [Vec<f64>; 4] = Default::default();
    for c in samples.chunks(len) {
        let fut = predictor.window.future(c, dim);
        vals[0].push(ade(&fut, gt, dim)?);
        vals[1].push(fde(&fut, gt, dim)?);
        if let Some(sim) = similar {
            vals[2].push(mm_metric(&fut, sim, dim, BaseMetric::Ade)?);
            vals[3].push(mm_metric(&fut, sim, dim, BaseMetric::Fde)?);
        }
    }
    let mut out = [None; 4];
    for (o, v) in out.iter_mut().zip(&vals) {
        if !v.is_empty() {
            *o = Some(bmw(v)?);
        }
    }
    Ok(out)
}

/// Metric tables over a split. Without a refinement only `coarse` is
/// reported. Window `i` uses inference seed `cfg.seed + i`, so coarse samples
/// are identical with and without refinement.
pub fn evaluate(
    windows: &Windows<'_>,
    predictor: &PredictorModel,
    refinement: Option<Refinement<'_>>,
    cfg: &EvalConfig,
    run_config: serde_json::Value,
) -> Result<EvalReport> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(Error::usage("evaluation split has no windows"));
    }
    if windows.human_dim() != predictor.cfg.human_dim {
        return Err(Error::config("split and predictor disagree on 3J"));
    }
    let idx = match cfg.windows {
        Some(k) => strided_subset(windows.len(), k),
        None => (0..windows.len()).collect(),
    };
    let similar = if cfg.multimodal {
        Some(find_similar(windows, cfg.threshold)?)
    } else {
        None
    };
    let names: &[&str] = if refinement.is_some() {
        &["coarse", "mean", "all"]
    } else {
        &["coarse"]
    };

    let per = exec::try_map_indexed(idx.len(), |k| {
        let i = idx[k];
        let seed = cfg.seed.wrapping_add(i as u64);
        let (field, alpha, m) = match refinement {
            Some(r) => (r.field, r.alpha, cfg.m),
            None => (VelocitySource::Zero, 1.0, 1),
        };
        let s = Sampling {
            n: cfg.n,
            m,
            agg: Aggregation::All,
            alpha,
        };
        let set = infer(
            windows.obs_human(i),
            windows.obs_robot(i),
            predictor,
            field,
            &s,
            seed,
        )?;
        let sim: Option<Vec<&[f32]>> = similar
            .as_ref()
            .map(|all| all[i].iter().map(|&j| windows.future_human(j)).collect());
        let gt = windows.future_human(i);
        let mut rows = vec![score(&set.coarse, predictor, gt, sim.as_deref())?];
        if refinement.is_some() {
            let mean = set.reaggregate(Aggregation::Mean);
            rows.push(score(&mean.refined, predictor, gt, sim.as_deref())?);
            rows.push(score(&set.refined, predictor, gt, sim.as_deref())?);
        }
        Ok(rows)
    })?;

    let mut metrics = BTreeMap::new();
    for (r, name) in names.iter().enumerate() {
        let mut acc = PerWindow::default();
        for w in &per {
            let [a, f, ma, mf] = w[r];
            acc.ade.extend(a);
            acc.fde.extend(f);
            acc.mmade.extend(ma);
            acc.mmfde.extend(mf);
        }
        let res = MetricResult {
            ade: mean_bmw(&acc.ade),
            fde: mean_bmw(&acc.fde),
            mmade: (!acc.mmade.is_empty()).then(|| mean_bmw(&acc.mmade)),
            mmfde: (!acc.mmfde.is_empty()).then(|| mean_bmw(&acc.mmfde)),
        };
        metrics.insert(name.to_string(), res);
    }
    let mut improvement = BTreeMap::new();
    if refinement.is_some() {
        let coarse = metrics["coarse"];
        for name in ["mean", "all"] {
            improvement.insert(name.to_string(), improvement_pct(&coarse, &metrics[name]));
        }
    }
    Ok(EvalReport {
        config: run_config,
        eval: cfg.clone(),
        windows: idx.len(),
        threads: exec::current_threads(),
        metrics,
        improvement_pct: improvement,
        latency: None,
    })
}

fn stats(samples: &[f64]) -> (f64, f64, f64, f64) {
    let k = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / k;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / k;
    let min = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (mean, var.sqrt(), min, max)
}

fn time_runs(
    warmup: usize,
    runs: usize,
    mut f: impl FnMut(usize) -> Result<()>,
) -> Result<Vec<f64>> {
    for w in 0..warmup {
        f(w)?;
    }
    (0..runs)
        .map(|r| {
            let t = Instant::now();
            f(warmup + r)?;
            Ok(t.elapsed().as_secs_f64())
        })
        .collect()
}

/// Wall-clock of the full pipeline (embedding, `N` coarse draws, `N*M`
/// residuals, aggregation) for one observation pair, after warm-up runs.
pub fn bench_latency(
    obs_human: &[f32],
    obs_robot: &[f32],
    predictor: &PredictorModel,
    refinement: Refinement<'_>,
    cfg: &LatencyConfig,
) -> Result<LatencyReport> {
    if cfg.runs == 0 || cfg.n == 0 || cfg.m == 0 {
        return Err(Error::config("latency bench needs runs, N, M >= 1"));
    }
    let s = Sampling {
        n: cfg.n,
        m: cfg.m,
        agg: cfg.agg,
        alpha: refinement.alpha,
    };
    let samples = time_runs(cfg.warmup, cfg.runs, |r| {
        let set = infer(
            obs_human,
            obs_robot,
            predictor,
            refinement.field,
            &s,
            cfg.seed.wrapping_add(r as u64),
        )?;
        std::hint::black_box(set);
        Ok(())
    })?;
    let coarse = time_runs(cfg.warmup, cfg.runs, |r| {
        let c = predictor.predict_coarse_flat(obs_human, cfg.n, cfg.seed.wrapping_add(r as u64))?;
        std::hint::black_box(c);
        Ok(())
    })?;
    let (mean, std, min, max) = stats(&samples);
    let (predictor_mean, ..) = stats(&coarse);
    Ok(LatencyReport {
        mean,
        std,
        min,
        max,
        runs: cfg.runs,
        warmup: cfg.warmup,
        n: cfg.n,
        m: cfg.m,
        threads: exec::current_threads(),
        budget: cfg.budget,
        within_budget: mean <= cfg.budget,
        predictor_mean,
        overhead_ratio: mean / predictor_mean,
        samples,
    })
}
