//! Refiner training against a frozen coarse predictor, residual scale
//! estimation, and batched `N x M` inference with mean/all aggregation.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{ade, bmw};
use crate::exec;
use crate::flow::standard_normal;
use crate::motion::{Agent, FreqCoeffs, MotionSequence};
use crate::nn::checkpoint::{read_sidecar, write_sidecar};
use crate::nn::{clip_grad_norm, Adam, Checkpoint, LrSchedule, ParamStore, Tape, Tensor};
use crate::predictor::{window_coeffs, PredictorModel};
use crate::refiner::{coeffs_to_tokens, RefinerConfig, RefinerInputs, RefinerMeta, RefinerModel};
use crate::synth::{splitmix64, trial_seed, Windows};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Add the mean of the `M` residuals: `N` outputs.
    Mean,
    /// Add every residual: `N * M` outputs.
    All,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "all" => Ok(Aggregation::All),
            _ => Err(Error::config(format!(
                "aggregation must be mean or all, got {s:?}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrediFlowConfig {
    /// Coarse samples per observation.
    pub n: usize,
    /// Residuals per coarse sample.
    pub m: usize,
    pub agg: Aggregation,
    /// Residual scale; `None` means estimate it before training.
    pub alpha: Option<f64>,
    pub alpha_samples: usize,
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Probability of drawing t = 0 exactly instead of t ~ U[0, 1].
    pub t0_share: f64,
    /// Validate every this many epochs (and after the last one).
    pub val_every: usize,
    /// Validation windows used for model selection (evenly strided subset).
    pub val_windows: usize,
    pub val_n: usize,
    pub val_m: usize,
    pub seed: u64,
}

impl Default for PrediFlowConfig {
    fn default() -> Self {
        PrediFlowConfig {
            n: 10,
            m: 10,
            agg: Aggregation::Mean,
            alpha: None,
            alpha_samples: 2000,
            epochs: 40,
            samples_per_epoch: 2000,
            batch: 32,
            schedule: LrSchedule {
                lr_init: 1e-3,
                warmup_epochs: 4,
                max_epochs: 40,
            },
            clip_norm: 1.0,
            t0_share: 0.5,
            val_every: 10,
            val_windows: 48,
            val_n: 10,
            val_m: 10,
            seed: 0,
        }
    }
}

impl PrediFlowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.val_n == 0 || self.val_m == 0 {
            return Err(Error::config("N and M must be >= 1"));
        }
        if let Some(a) = self.alpha {
            if !(a.is_finite() && a > 0.0) {
                return Err(Error::config(format!("alpha must be positive, got {a}")));
            }
        }
        if self.epochs == 0
            || self.batch == 0
            || self.samples_per_epoch < self.batch
            || self.val_every == 0
        {
            return Err(Error::config(
                "need epochs, val_every >= 1 and samples_per_epoch >= batch >= 1",
            ));
        }
        self.schedule.validate()?;
        if self.schedule.max_epochs != self.epochs {
            return Err(Error::config("schedule.max_epochs must equal epochs"));
        }
        if !(0.0..1.0).contains(&self.t0_share) {
            return Err(Error::config("t0_share must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// `1 / std` of residual values pooled over every coefficient.
pub fn alpha_from_residuals(residuals: &[f32]) -> Result<f64> {
    if residuals.len() < 2 {
        return Err(Error::DegenerateData(
            "need at least two residual values".into(),
        ));
    }
    let n = residuals.len() as f64;
    let mean = residuals.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = residuals
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    if !(var > 0.0) || !var.is_finite() {
        return Err(Error::DegenerateData(format!("residual variance is {var}")));
    }
    Ok(1.0 / var.sqrt())
}

/// Residuals `Y - Y_init` (one coarse draw each) for the listed windows,
/// flat `[count, 3J*tau]`.
pub fn sample_residuals(
    windows: &Windows<'_>,
    predictor: &PredictorModel,
    indices: &[usize],
    seed: u64,
) -> Result<Vec<f32>> {
    let n = predictor.cfg.human_dim * predictor.cfg.tau;
    let chunks: Vec<&[usize]> = indices.chunks(64).collect();
    let parts = exec::try_map_indexed(chunks.len(), |c| {
        let idx = chunks[c];
        let mut yo = Vec::with_capacity(idx.len() * n);
        let mut y = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            let w = window_coeffs(&predictor.window, windows, i)?;
            yo.extend(w.yo);
            y.extend(w.y);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(seed, c));
        let x0 = standard_normal(
            &mut rng,
            &[idx.len() * predictor.cfg.human_dim, predictor.cfg.tau],
        );
        let init = predictor.sample(&yo, &x0)?;
        Ok(y.iter()
            .zip(&init)
            .map(|(a, b)| a - b)
            .collect::<Vec<f32>>())
    })?;
    Ok(parts.concat())
}

/// Residual scale from `sample_count` distinct training windows.
pub fn estimate_alpha(
    windows: &Windows<'_>,
    predictor: &PredictorModel,
    sample_count: usize,
    seed: u64,
) -> Result<f64> {
    if sample_count < 1000 {
        return Err(Error::config(format!(
            "alpha needs >= 1000 samples, got {sample_count}"
        )));
    }
    if windows.is_empty() {
        return Err(Error::DegenerateData("no training windows".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x616c_7068);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut rng);
    let idx: Vec<usize> = (0..sample_count).map(|k| order[k % order.len()]).collect();
    alpha_from_residuals(&sample_residuals(windows, predictor, &idx, seed)?)
}

/// Where the one-step residual velocity comes from.
#[derive(Clone, Copy, Debug)]
pub enum VelocitySource<'a> {
    Network(&'a RefinerModel),
    /// `u = 0`: residuals are the scaled source noise `Y_0 / alpha`.
    Zero,
    /// `u(Y_0, 0) = -Y_0`: every residual is exactly zero.
    Cancel,
}

/// Output of one inference call. Coefficient blocks are flat `[*, 3J*tau]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub n: usize,
    pub m: usize,
    pub agg: Aggregation,
    pub coarse: Vec<f32>,
    /// `[N*M, 3J*tau]`, row `i*M + j`.
    pub residuals: Vec<f32>,
    /// `[N or N*M, 3J*tau]`.
    pub refined: Vec<f32>,
    pub human_dim: usize,
    pub tau: usize,
    pub full_length: usize,
}

impl PredictionSet {
    pub fn coeff_len(&self) -> usize {
        self.human_dim * self.tau
    }

    pub fn len(&self) -> usize {
        self.refined.len() / self.coeff_len()
    }

    pub fn is_empty(&self) -> bool {
        self.refined.is_empty()
    }

    pub fn refined_coeffs(&self, k: usize) -> Result<FreqCoeffs> {
        let n = self.coeff_len();
        FreqCoeffs::new(
            Tensor::new(
                &[self.human_dim, self.tau],
                self.refined[k * n..(k + 1) * n].to_vec(),
            )?,
            self.full_length,
        )
    }

    /// Full-length motions of the refined samples.
    pub fn motions(&self, window: &crate::motion::WindowPlan) -> Result<Vec<MotionSequence>> {
        self.refined
            .chunks(self.coeff_len())
            .map(|c| {
                MotionSequence::from_frames(
                    window.plan.inverse_raw(c, self.human_dim),
                    self.human_dim,
                    Agent::Human,
                )
            })
            .collect()
    }

    /// Rebuild the other aggregation from the same coarse samples and residuals.
    pub fn reaggregate(&self, agg: Aggregation) -> PredictionSet {
        PredictionSet {
            agg,
            refined: aggregate(
                &self.coarse,
                &self.residuals,
                self.n,
                self.m,
                self.coeff_len(),
                agg,
            ),
            ..self.clone()
        }
    }
}

fn aggregate(
    coarse: &[f32],
    residuals: &[f32],
    n: usize,
    m: usize,
    len: usize,
    agg: Aggregation,
) -> Vec<f32> {
    match agg {
        Aggregation::All => {
            let mut out = Vec::with_capacity(n * m * len);
            for i in 0..n {
                let c = &coarse[i * len..(i + 1) * len];
                for j in 0..m {
                    let r = &residuals[(i * m + j) * len..(i * m + j + 1) * len];
                    out.extend(c.iter().zip(r).map(|(a, b)| a + b));
                }
            }
            out
        }
        Aggregation::Mean => {
            let mut out = Vec::with_capacity(n * len);
            let inv = 1.0 / m as f32;
            for i in 0..n {
                let mut mean = vec![0.0f32; len];
                for j in 0..m {
                    let r = &residuals[(i * m + j) * len..(i * m + j + 1) * len];
                    mean.iter_mut().zip(r).for_each(|(s, v)| *s += v);
                }
                let c = &coarse[i * len..(i + 1) * len];
                out.extend(c.iter().zip(&mean).map(|(a, s)| a + s * inv));
            }
            out
        }
    }
}

/// Sample counts, aggregation and residual scale of one inference call.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub n: usize,
    pub m: usize,
    pub agg: Aggregation,
    pub alpha: f64,
}

/// Seeds of the coarse and residual noise streams of one inference call.
fn stream_seeds(seed: u64) -> (u64, u64) {
    (
        splitmix64(seed ^ 0x636f_6172),
        splitmix64(seed ^ 0x7265_7369),
    )
}

/// Token rows per refiner forward in [`infer`]; keeps the activations of one
/// block in cache.
pub const INFER_BLOCK_TOKENS: usize = 240;

/// Inference for one observation pair. The `N*M` refiner evaluations are
/// batched, in cache-sized blocks that run in parallel when enabled.
pub fn infer(
    obs_human: &[f32],
    obs_robot: &[f32],
    predictor: &PredictorModel,
    field: VelocitySource<'_>,
    s: &Sampling,
    seed: u64,
) -> Result<PredictionSet> {
    let chunk = match field {
        VelocitySource::Network(r) => (INFER_BLOCK_TOKENS / r.cfg.tokens()).max(1),
        _ => s.n * s.m,
    };
    infer_chunked(obs_human, obs_robot, predictor, field, s, seed, chunk)
}

/// [`infer`] with the refiner evaluated `chunk` samples at a time.
pub fn infer_chunked(
    obs_human: &[f32],
    obs_robot: &[f32],
    predictor: &PredictorModel,
    field: VelocitySource<'_>,
    s: &Sampling,
    seed: u64,
    chunk: usize,
) -> Result<PredictionSet> {
    let Sampling { n, m, agg, alpha } = *s;
    if n == 0 || m == 0 || chunk == 0 {
        return Err(Error::usage("N, M and the chunk size must be >= 1"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    let (dim, tau) = (predictor.cfg.human_dim, predictor.cfg.tau);
    let len = dim * tau;
    let (coarse_seed, noise_seed) = stream_seeds(seed);
    let coarse = predictor.predict_coarse_flat(obs_human, n, coarse_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let y0 = standard_normal(&mut rng, &[n * m, len]).into_data();
    let a = alpha as f32;
    let residuals: Vec<f32> = match field {
        VelocitySource::Zero => y0.iter().map(|v| v / a).collect(),
        VelocitySource::Cancel => y0.iter().map(|v| (v + -v) / a).collect(),
        VelocitySource::Network(r) => {
            if r.cfg.human_dim != dim || r.cfg.tau != tau {
                return Err(Error::config("refiner and predictor disagree on 3J or tau"));
            }
            let yo = r.window.observed(obs_human, dim)?;
            let yr = r.window.observed(obs_robot, r.cfg.robot_dim)?;
            let total = n * m;
            let blocks = exec::try_map_indexed(total.div_ceil(chunk), |k| {
                let start = k * chunk;
                let b = chunk.min(total - start);
                let hist: Vec<f32> = (0..b).flat_map(|_| yo.iter().copied()).collect();
                let rob: Vec<f32> = (0..b).flat_map(|_| yr.iter().copied()).collect();
                let init: Vec<f32> = (start..start + b)
                    .flat_map(|k| coarse[(k / m) * len..(k / m + 1) * len].iter().copied())
                    .collect();
                let src = &y0[start * len..(start + b) * len];
                let v = r.forward_flat(src, &hist, &init, &rob, &vec![0.0; b])?;
                Ok(src
                    .iter()
                    .zip(&v)
                    .map(|(x, u)| (x + u) / a)
                    .collect::<Vec<f32>>())
            })?;
            blocks.concat()
        }
    };
    if residuals.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("refined residuals".into()));
    }
    let refined = aggregate(&coarse, &residuals, n, m, len, agg);
    Ok(PredictionSet {
        n,
        m,
        agg,
        coarse,
        residuals,
        refined,
        human_dim: dim,
        tau,
        full_length: predictor.cfg.history + predictor.cfg.horizon,
    })
}

/// Mean over windows of the median-of-many future ADE.
pub fn median_of_many_ade(
    windows: &Windows<'_>,
    indices: &[usize],
    predictor: &PredictorModel,
    field: VelocitySource<'_>,
    s: &Sampling,
    seed: u64,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::usage("no validation windows"));
    }
    let dim = predictor.cfg.human_dim;
    let per = exec::try_map_indexed(indices.len(), |k| {
        let i = indices[k];
        let set = infer(
            windows.obs_human(i),
            windows.obs_robot(i),
            predictor,
            field,
            s,
            seed.wrapping_add(i as u64),
        )?;
        let gt = windows.future_human(i);
        let ades: Vec<f64> = set
            .refined
            .chunks(set.coeff_len())
            .map(|c| ade(&predictor.window.future(c, dim), gt, dim))
            .collect::<Result<_>>()?;
        Ok(bmw(&ades)?.median)
    })?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

/// Evenly strided subset of `0..len` with at most `count` entries.
pub fn strided_subset(len: usize, count: usize) -> Vec<usize> {
    if count == 0 || len == 0 {
        return Vec::new();
    }
    if count >= len {
        return (0..len).collect();
    }
    (0..count).map(|k| k * len / count).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RefinerTrainLog {
    pub epoch_loss: Vec<f64>,
    /// `(epoch, validation median-of-many ADE)`.
    pub validation: Vec<(usize, f64)>,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: RefinerModel,
    pub adam: Adam<f32>,
    /// Epochs completed.
    pub epoch: usize,
    pub alpha: f64,
    pub predictor_fingerprint: u64,
    pub best: Option<(f64, usize, ParamStore<f32>)>,
    pub log: RefinerTrainLog,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateMeta {
    model: RefinerConfig,
    cfg: PrediFlowConfig,
    epoch: usize,
    step: u64,
    alpha: f64,
    predictor_fingerprint: u64,
    best: Option<(f64, usize)>,
    log: RefinerTrainLog,
}

impl TrainState {
    /// The selected model (best validation score, else the latest).
    pub fn best_model(&self) -> RefinerModel {
        let mut m = self.model.clone();
        if let Some((_, _, store)) = &self.best {
            m.store = store.clone();
        }
        m
    }

    pub fn meta(&self) -> RefinerMeta {
        RefinerMeta {
            model: self.model.cfg.clone(),
            alpha: self.alpha,
            predictor_fingerprint: self.predictor_fingerprint,
            epoch: self.best.as_ref().map_or(self.epoch, |b| b.1),
            best_val_median_ade: self.best.as_ref().map(|b| b.0),
        }
    }

    /// Resumable state: parameters, optimizer moments and the best model in
    /// one PFCK file, counters and the log in its sidecar.
    pub fn save(&self, path: &Path, cfg: &PrediFlowConfig) -> Result<()> {
        let mut ck = Checkpoint::from_store(&self.model.store);
        for (name, t) in self.adam.state(&self.model.store) {
            ck.push(name, t);
        }
        if let Some((_, _, store)) = &self.best {
            for (name, t) in store.iter() {
                ck.push(format!("best/{name}"), t.clone());
            }
        }
        ck.save(path)?;
        write_sidecar(
            path,
            &StateMeta {
                model: self.model.cfg.clone(),
                cfg: cfg.clone(),
                epoch: self.epoch,
                step: self.model.store.step(),
                alpha: self.alpha,
                predictor_fingerprint: self.predictor_fingerprint,
                best: self.best.as_ref().map(|b| (b.0, b.1)),
                log: self.log.clone(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<(TrainState, PrediFlowConfig)> {
        let meta: StateMeta = read_sidecar(path)?;
        let ck = Checkpoint::load(path)?;
        let mut model = RefinerModel::new(meta.model.clone())?;
        ck.restore_into(&mut model.store)?;
        model.store.set_step(meta.step);
        let mut adam = Adam::new(&model.store);
        adam.load_state(&model.store, &ck.entries)?;
        let best = match meta.best {
            Some((score, epoch)) => {
                let mut store = model.store.clone();
                for name in store.names().to_vec() {
                    store.set(&name, ck.require(&format!("best/{name}"))?.clone())?;
                }
                Some((score, epoch, store))
            }
            None => None,
        };
        Ok((
            TrainState {
                model,
                adam,
                epoch: meta.epoch,
                alpha: meta.alpha,
                predictor_fingerprint: meta.predictor_fingerprint,
                best,
                log: meta.log,
            },
            meta.cfg,
        ))
    }
}

/// Fresh training state; estimates alpha unless the config fixes it.
pub fn init_training(
    train: &Windows<'_>,
    predictor: &PredictorModel,
    model_cfg: RefinerConfig,
    cfg: &PrediFlowConfig,
) -> Result<TrainState> {
    cfg.validate()?;
    if model_cfg.human_dim != predictor.cfg.human_dim
        || model_cfg.tau != predictor.cfg.tau
        || model_cfg.history != predictor.cfg.history
        || model_cfg.horizon != predictor.cfg.horizon
    {
        return Err(Error::config(
            "refiner and predictor disagree on 3J, tau, T or F",
        ));
    }
    if train.robot_dim() != model_cfg.robot_dim || train.human_dim() != model_cfg.human_dim {
        return Err(Error::config(
            "dataset dimensions disagree with the refiner config",
        ));
    }
    let alpha = match cfg.alpha {
        Some(a) => a,
        None => estimate_alpha(train, predictor, cfg.alpha_samples, cfg.seed)?,
    };
    let model = RefinerModel::new(model_cfg)?;
    let adam = Adam::new(&model.store);
    Ok(TrainState {
        model,
        adam,
        epoch: 0,
        alpha,
        predictor_fingerprint: predictor.fingerprint(),
        best: None,
        log: RefinerTrainLog::default(),
    })
}

/// Run epochs `state.epoch .. until` (capped at `cfg.epochs`). Each epoch
/// draws its windows and noise from a stream keyed by `(seed, epoch)`, so
/// stopping and resuming at an epoch boundary reproduces an uninterrupted
/// run bit for bit.
pub fn train_refiner(
    state: &mut TrainState,
    train: &Windows<'_>,
    val: &Windows<'_>,
    predictor: &PredictorModel,
    cfg: &PrediFlowConfig,
    until: usize,
) -> Result<()> {
    cfg.validate()?;
    if predictor.fingerprint() != state.predictor_fingerprint {
        return Err(Error::config(
            "predictor differs from the one training started with",
        ));
    }
    if predictor.store.has_gradients() {
        return Err(Error::usage(
            "predictor must be frozen (it carries gradients)",
        ));
    }
    if train.is_empty() {
        return Err(Error::DegenerateData("no training windows".into()));
    }
    let until = until.min(cfg.epochs);
    let (dim, tau) = (state.model.cfg.human_dim, state.model.cfg.tau);
    let (n, rn) = (state.model.coeff_len(), state.model.robot_len());
    let rdim = state.model.cfg.robot_dim;
    let alpha = state.alpha as f32;
    let steps = cfg.samples_per_epoch / cfg.batch;
    let val_idx = strided_subset(val.len(), cfg.val_windows);
    while state.epoch < until {
        let epoch = state.epoch;
        let lr = cfg.schedule.lr_at(epoch)?;
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed(cfg.seed ^ 0x7265_666e, epoch));
        let mut total = 0.0;
        for _ in 0..steps {
            let b = cfg.batch;
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..train.len())).collect();
            let mut yo = Vec::with_capacity(b * n);
            let mut y = Vec::with_capacity(b * n);
            let mut yr = Vec::with_capacity(b * rn);
            for &i in &idx {
                let w = window_coeffs(&state.model.window, train, i)?;
                yo.extend(w.yo);
                y.extend(w.y);
                yr.extend(state.model.window.observed(train.obs_robot(i), rdim)?);
            }
            // one coarse draw per window from the frozen predictor
            let xp = standard_normal(&mut rng, &[b * dim, tau]);
            let init = predictor.sample(&yo, &xp)?;
            let x1: Vec<f32> = y.iter().zip(&init).map(|(a, c)| alpha * (a - c)).collect();
            let y0 = standard_normal(&mut rng, &[b, n]).into_data();
            let t: Vec<f64> = (0..b)
                .map(|_| {
                    if rng.random::<f64>() < cfg.t0_share {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let yt: Vec<f32> = (0..b * n)
                .map(|k| {
                    let tk = t[k / n] as f32;
                    tk * x1[k] + (1.0 - tk) * y0[k]
                })
                .collect();
            let target: Vec<f32> = x1.iter().zip(&y0).map(|(a, z)| a - z).collect();
            let mut grads = {
                let m = &state.model;
                let mut tape = Tape::new(&m.store);
                let inp = RefinerInputs {
                    yt: tape.input(Tensor::new(
                        &[b * tau, dim],
                        coeffs_to_tokens(&yt, dim, tau),
                    )?)?,
                    history: tape.input(Tensor::new(&[b, n], yo)?)?,
                    init: tape.input(Tensor::new(&[b, n], init)?)?,
                    robot: tape.input(Tensor::new(&[b, rn], yr)?)?,
                };
                let u = m.velocity(&mut tape, inp, &t)?;
                let tg = tape.input(Tensor::new(
                    &[b * tau, dim],
                    coeffs_to_tokens(&target, dim, tau),
                )?)?;
                let loss = tape.mse(u, tg)?;
                let l = tape.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::Training(format!(
                        "refiner loss is {l} at epoch {epoch} (lr {lr:.3e}, alpha {alpha})"
                    )));
                }
                total += l;
                tape.backward(loss)?
            };
            clip_grad_norm(&mut grads, cfg.clip_norm);
            state.model.store.accumulate(grads)?;
            state.adam.step(&mut state.model.store, lr)?;
        }
        let mean = total / steps as f64;
        state.log.epoch_loss.push(mean);
        state.epoch += 1;
        log::info!("refiner epoch {epoch}: loss {mean:.5} lr {lr:.2e}");
        if !val_idx.is_empty()
            && (state.epoch.is_multiple_of(cfg.val_every) || state.epoch == cfg.epochs)
        {
            let score = median_of_many_ade(
                val,
                &val_idx,
                predictor,
                VelocitySource::Network(&state.model),
                &Sampling {
                    n: cfg.val_n,
                    m: cfg.val_m,
                    agg: cfg.agg,
                    alpha: state.alpha,
                },
                cfg.seed,
            )?;
            log::info!("refiner epoch {epoch}: validation median ADE {score:.5}");
            state.log.validation.push((state.epoch, score));
            if state.best.as_ref().is_none_or(|b| score < b.0) {
                state.best = Some((score, state.epoch, state.model.store.clone()));
            }
        }
    }
    if predictor.fingerprint() != state.predictor_fingerprint || predictor.store.has_gradients() {
        return Err(Error::Training(
            "predictor changed during refiner training".into(),
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha_of_known_spread() {
        let r: Vec<f32> = (0..1000)
            .map(|i| if i % 2 == 0 { 0.5 } else { -0.5 })
            .collect();
        assert!((alpha_from_residuals(&r).unwrap() - 2.0).abs() < 1e-9);
        assert!(matches!(
            alpha_from_residuals(&[1.0; 10]),
            Err(Error::DegenerateData(_))
        ));
    }

    #[test]
    fn aggregation_shapes_and_consistency() {
        let (n, m, len) = (2, 3, 4);
        let coarse: Vec<f32> = (0..n * len).map(|i| i as f32).collect();
        let res: Vec<f32> = (0..n * m * len).map(|i| (i as f32 * 0.37).sin()).collect();
        let all = aggregate(&coarse, &res, n, m, len, Aggregation::All);
        let mean = aggregate(&coarse, &res, n, m, len, Aggregation::Mean);
        assert_eq!(all.len(), n * m * len);
        assert_eq!(mean.len(), n * len);
        for i in 0..n {
            for k in 0..len {
                let avg: f32 = (0..m).map(|j| all[(i * m + j) * len + k]).sum::<f32>() / m as f32;
                assert!((avg - mean[i * len + k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn strided() {
        assert_eq!(strided_subset(10, 3), vec![0, 3, 6]);
        assert_eq!(strided_subset(2, 5), vec![0, 1]);
        assert!(strided_subset(0, 5).is_empty());
    }

    #[test]
    fn aggregation_parses() {
        assert_eq!("all".parse::<Aggregation>().unwrap(), Aggregation::All);
        assert!("sum".parse::<Aggregation>().is_err());
    }
}
