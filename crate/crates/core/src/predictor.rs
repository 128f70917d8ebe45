//! One-step coarse predictor: a spatial-temporal MLP-mixer over the `3J x tau`
//! coefficient block, trained by conditional flow matching and sampled with a
//! single Euler step from `t = 0`.
//!
//! The generator works in a normalised space: it produces
//! `(Y - Y_o) / scale`, where `Y_o` are the coefficients of the padded
//! observation and `scale` is a per-coefficient spread measured on the
//! training windows (stored with the checkpoint as `buffer.target_scale`).
//! The observed coefficients also enter every coordinate row directly, after
//! standardisation with `buffer.obs_mean` / `buffer.obs_scale`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::ade;
use crate::exec;
use crate::flow::standard_normal;
use crate::motion::{FreqCoeffs, WindowPlan};
use crate::nn::checkpoint::{read_sidecar, write_sidecar};
use crate::nn::{
    clip_grad_norm, tile_rows, time_features, Adam, Checkpoint, Init, Linear, LrSchedule, Mlp,
    ParamStore, Scalar, Tape, Tensor, Var, LN_EPS,
};
use crate::synth::Windows;

const SCALE_BUFFER: &str = "buffer.target_scale";
const OBS_MEAN_BUFFER: &str = "buffer.obs_mean";
const OBS_SCALE_BUFFER: &str = "buffer.obs_scale";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorConfig {
    pub d: usize,
    pub blocks: usize,
    /// Hidden width multiplier of the mixing MLPs.
    pub expansion: usize,
    pub tau: usize,
    pub history: usize,
    pub horizon: usize,
    /// `3J`.
    pub human_dim: usize,
    pub seed: u64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            d: 64,
            blocks: 4,
            expansion: 2,
            tau: 20,
            history: 30,
            horizon: 120,
            human_dim: 48,
            seed: 0,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.blocks == 0 || self.expansion == 0 || self.human_dim == 0 {
            return Err(Error::config("predictor widths must be positive (d >= 2)"));
        }
        if self.tau == 0 || self.tau > self.history + self.horizon {
            return Err(Error::config(format!(
                "tau {} must lie in 1..={}",
                self.tau,
                self.history + self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct MixerBlock {
    cond: Linear,
    token: Mlp,
    channel: Mlp,
}

/// Frozen-after-training coarse generator.
#[derive(Clone, Debug)]
pub struct PredictorModel {
    pub cfg: PredictorConfig,
    pub store: ParamStore<f32>,
    /// `[3J * tau]`, strictly positive.
    pub target_scale: Vec<f32>,
    /// Per-coefficient standardisation of `Y_o`, `[3J * tau]` each.
    pub obs_mean: Vec<f32>,
    pub obs_scale: Vec<f32>,
    pub window: WindowPlan,
    embed: Linear,
    obs_lift: Linear,
    time1: Linear,
    time2: Linear,
    lift: Linear,
    channel_pos: usize,
    blocks: Vec<MixerBlock>,
    head: Linear,
}

impl PredictorModel {
    pub fn new(cfg: PredictorConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7072_6564);
        let mut s = ParamStore::new();
        let (d, dim, tau) = (cfg.d, cfg.human_dim, cfg.tau);
        let embed = Linear::register(
            &mut s,
            &mut rng,
            "pred.embed_history",
            dim * tau,
            d,
            Init::Uniform,
        )?;
        let time1 = Linear::register(&mut s, &mut rng, "pred.time.fc1", d, d, Init::Uniform)?;
        let time2 = Linear::register(&mut s, &mut rng, "pred.time.fc2", d, d, Init::Uniform)?;
        let lift = Linear::register(&mut s, &mut rng, "pred.lift", tau, d, Init::Uniform)?;
        let obs_lift = Linear::register(&mut s, &mut rng, "pred.obs_lift", tau, d, Init::Uniform)?;
        let channel_pos = s.insert(
            "pred.channel_pos",
            crate::nn::layers::init_tensor(&mut rng, &[dim, d], d, Init::Normal(0.02)),
        )?;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("pred.block{b}");
            blocks.push(MixerBlock {
                cond: Linear::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.cond"),
                    d,
                    d,
                    Init::Uniform,
                )?,
                token: Mlp::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.token"),
                    d,
                    d * cfg.expansion,
                    d,
                )?,
                channel: Mlp::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.channel"),
                    dim,
                    dim * cfg.expansion,
                    dim,
                )?,
            });
        }
        let head = Linear::register(&mut s, &mut rng, "pred.head", d, tau, Init::Uniform)?;
        Ok(PredictorModel {
            window: WindowPlan::new(cfg.history, cfg.horizon, cfg.tau)?,
            target_scale: vec![1.0; dim * tau],
            obs_mean: vec![0.0; dim * tau],
            obs_scale: vec![1.0; dim * tau],
            cfg,
            store: s,
            embed,
            time1,
            time2,
            lift,
            obs_lift,
            channel_pos,
            blocks,
            head,
        })
    }

    fn coeff_len(&self) -> usize {
        self.cfg.human_dim * self.cfg.tau
    }

    /// Velocity in normalised coefficient space.
    ///
    /// `yo` is `[B, 3J*tau]`, `xt` is `[B*3J, tau]`, `t` holds one time per
    /// sample. Generic over the scalar so gradients can be checked in f64.
    pub fn velocity<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        yo: Var,
        xt: Var,
        t: &[f64],
    ) -> Result<Var> {
        let (d, dim) = (self.cfg.d, self.cfg.human_dim);
        let b = t.len();
        if tape.value(yo).rows() != b || tape.value(xt).rows() != b * dim {
            return Err(Error::dim("predictor batch sizes disagree"));
        }
        let ch = self.embed.forward(tape, yo)?;
        let feats: Vec<T> = t
            .iter()
            .flat_map(|&ti| time_features(ti, d))
            .map(T::of)
            .collect();
        let tf = tape.input(Tensor::new(&[b, d], feats)?)?;
        let te = self.time1.forward(tape, tf)?;
        let te = tape.silu(te)?;
        let te = self.time2.forward(tape, te)?;
        let c = tape.add(ch, te)?;

        let n = self.coeff_len();
        let yn: Vec<T> = tape
            .value(yo)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                T::of((v.as_f64() - self.obs_mean[i % n] as f64) / self.obs_scale[i % n] as f64)
            })
            .collect();
        let yn = tape.input(Tensor::new(&[b * dim, self.cfg.tau], yn)?)?;
        let mut h = self.lift.forward(tape, xt)?;
        let o = self.obs_lift.forward(tape, yn)?;
        h = tape.add(h, o)?;
        let pos = tape.param_by_id(self.channel_pos);
        let pos = tile_rows(tape, pos, b)?;
        h = tape.add(h, pos)?;
        for blk in &self.blocks {
            let cb = blk.cond.forward(tape, c)?;
            let cb = tape.repeat_rows(cb, dim)?;
            h = tape.add(h, cb)?;
            // mixing along the feature axis (lifted from time frequencies)
            let a = tape.layer_norm(h, LN_EPS)?;
            let a = blk.token.forward(tape, a)?;
            h = tape.add(h, a)?;
            // mixing across the 3J coordinate channels
            let a = tape.layer_norm(h, LN_EPS)?;
            let a = tape.transpose_groups(a, b)?;
            let a = blk.channel.forward(tape, a)?;
            let a = tape.transpose_groups(a, b)?;
            h = tape.add(h, a)?;
        }
        let h = tape.layer_norm(h, LN_EPS)?;
        self.head.forward(tape, h)
    }

    /// `C^h` for one `[T, 3J]` observation.
    pub fn embed_history(&self, obs: &[f32]) -> Result<Vec<f32>> {
        let yo = self.window.observed(obs, self.cfg.human_dim)?;
        let mut tape = Tape::new(&self.store);
        let x = tape.input(Tensor::new(&[1, yo.len()], yo)?)?;
        let c = self.embed.forward(&mut tape, x)?;
        Ok(tape.value(c).data().to_vec())
    }

    /// One-step samples for a batch. `yo` is `[B, 3J*tau]` padded-history
    /// coefficients, `x0` is `[B*3J, tau]` standard-normal noise. Returns
    /// `[B, 3J*tau]` coarse coefficients.
    pub fn sample(&self, yo: &[f32], x0: &Tensor<f32>) -> Result<Vec<f32>> {
        let n = self.coeff_len();
        if !yo.len().is_multiple_of(n) || x0.numel() != yo.len() {
            return Err(Error::dim("predictor sample: batch layout mismatch"));
        }
        let b = yo.len() / n;
        let u = {
            let mut tape = Tape::new(&self.store);
            let yv = tape.input(Tensor::new(&[b, n], yo.to_vec())?)?;
            let xv = tape.input(x0.clone())?;
            let u = self.velocity(&mut tape, yv, xv, &vec![0.0; b])?;
            tape.value(u).clone()
        };
        let out: Vec<f32> = (0..yo.len())
            .map(|i| yo[i] + self.target_scale[i % n] * (x0.data()[i] + u.data()[i]))
            .collect();
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("coarse predictor output".into()));
        }
        Ok(out)
    }

    /// `n` coarse samples for one observation, flat `[n, 3J*tau]`.
    pub fn predict_coarse_flat(&self, obs: &[f32], n: usize, seed: u64) -> Result<Vec<f32>> {
        if n == 0 {
            return Err(Error::usage("predict_coarse needs n >= 1"));
        }
        let yo = self.window.observed(obs, self.cfg.human_dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x0 = standard_normal(&mut rng, &[n * self.cfg.human_dim, self.cfg.tau]);
        let yo_rep: Vec<f32> = (0..n).flat_map(|_| yo.iter().copied()).collect();
        self.sample(&yo_rep, &x0)
    }

    pub fn predict_coarse(&self, obs: &[f32], n: usize, seed: u64) -> Result<Vec<FreqCoeffs>> {
        let flat = self.predict_coarse_flat(obs, n, seed)?;
        let (dim, tau) = (self.cfg.human_dim, self.cfg.tau);
        let len = self.cfg.history + self.cfg.horizon;
        flat.chunks(dim * tau)
            .map(|c| FreqCoeffs::new(Tensor::new(&[dim, tau], c.to_vec())?, len))
            .collect()
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store);
        ck.push(
            SCALE_BUFFER,
            Tensor::new(
                &[self.cfg.human_dim, self.cfg.tau],
                self.target_scale.clone(),
            )?,
        );
        let shape = [self.cfg.human_dim, self.cfg.tau];
        ck.push(OBS_MEAN_BUFFER, Tensor::new(&shape, self.obs_mean.clone())?);
        ck.push(
            OBS_SCALE_BUFFER,
            Tensor::new(&shape, self.obs_scale.clone())?,
        );
        Ok(ck)
    }

    pub fn from_checkpoint(cfg: PredictorConfig, ck: &Checkpoint) -> Result<Self> {
        let mut m = PredictorModel::new(cfg)?;
        ck.restore_into(&mut m.store)?;
        let scale = ck.require(SCALE_BUFFER)?;
        if scale.numel() != m.coeff_len() || scale.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::config(
                "target scale buffer has the wrong size or non-positive entries",
            ));
        }
        m.target_scale = scale.data().to_vec();
        let mean = ck.require(OBS_MEAN_BUFFER)?;
        let oscale = ck.require(OBS_SCALE_BUFFER)?;
        if mean.numel() != m.coeff_len()
            || oscale.numel() != m.coeff_len()
            || oscale.data().iter().any(|&v| !(v > 0.0))
        {
            return Err(Error::config(
                "observation buffers have the wrong size or non-positive scales",
            ));
        }
        m.obs_mean = mean.data().to_vec();
        m.obs_scale = oscale.data().to_vec();
        Ok(m)
    }

    /// Writes the PFCK checkpoint and its JSON sidecar.
    pub fn save(&self, path: &Path, summary: Option<&PredictorTrainLog>) -> Result<()> {
        self.to_checkpoint()?.save(path)?;
        write_sidecar(
            path,
            &PredictorMeta {
                model: self.cfg.clone(),
                training: summary.cloned(),
            },
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let meta: PredictorMeta = read_sidecar(path)?;
        PredictorModel::from_checkpoint(meta.model, &Checkpoint::load(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorMeta {
    pub model: PredictorConfig,
    pub training: Option<PredictorTrainLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PredictorTrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub batch: usize,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Probability of drawing t = 0 exactly instead of t ~ U[0, 1].
    pub t0_share: f64,
    pub seed: u64,
}

impl Default for PredictorTrainConfig {
    fn default() -> Self {
        PredictorTrainConfig {
            epochs: 20,
            samples_per_epoch: 2000,
            batch: 32,
            schedule: LrSchedule {
                lr_init: 1e-3,
                warmup_epochs: 2,
                max_epochs: 20,
            },
            clip_norm: 1.0,
            t0_share: 0.25,
            seed: 0,
        }
    }
}

impl PredictorTrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.t0_share) {
            return Err(Error::config("t0_share must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch == 0 || self.samples_per_epoch < self.batch {
            return Err(Error::config(
                "need epochs >= 1 and samples_per_epoch >= batch >= 1",
            ));
        }
        if self.schedule.max_epochs != self.epochs {
            return Err(Error::config("schedule.max_epochs must equal epochs"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorTrainLog {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Per-window coefficient blocks used for training.
pub(crate) struct WindowCoeffs {
    /// `[3J*tau]` padded-history coefficients.
    pub yo: Vec<f32>,
    /// `[3J*tau]` ground-truth coefficients of the whole window.
    pub y: Vec<f32>,
}

pub(crate) fn window_coeffs(
    plan: &WindowPlan,
    windows: &Windows<'_>,
    i: usize,
) -> Result<WindowCoeffs> {
    let dim = windows.human_dim();
    Ok(WindowCoeffs {
        yo: plan.observed(windows.obs_human(i), dim)?,
        y: plan.full(windows.full_human(i), dim)?,
    })
}

/// Per-coefficient standard deviation of `Y - Y_o` over `windows`.
pub fn measure_target_scale(plan: &WindowPlan, windows: &Windows<'_>) -> Result<Vec<f32>> {
    let per = per_window(windows, |i| {
        let c = window_coeffs(plan, windows, i)?;
        Ok(c.y.iter().zip(&c.yo).map(|(a, b)| (a - b) as f64).collect())
    })?;
    let (_, scale) =
        spread(&per).ok_or_else(|| Error::DegenerateData("training futures never move".into()))?;
    Ok(scale)
}

/// Per-coefficient mean and floored spread of the observed coefficients.
pub fn measure_obs_stats(plan: &WindowPlan, windows: &Windows<'_>) -> Result<(Vec<f32>, Vec<f32>)> {
    let per = per_window(windows, |i| {
        Ok(plan
            .observed(windows.obs_human(i), windows.human_dim())?
            .iter()
            .map(|&v| v as f64)
            .collect())
    })?;
    spread(&per).ok_or_else(|| Error::DegenerateData("training observations are constant".into()))
}

fn per_window(
    windows: &Windows<'_>,
    f: impl Fn(usize) -> Result<Vec<f64>> + Sync + Send,
) -> Result<Vec<Vec<f64>>> {
    if windows.is_empty() {
        return Err(Error::DegenerateData("no training windows".into()));
    }
    exec::try_map_indexed(windows.len(), f)
}

// None when every coefficient is constant.
fn spread(per: &[Vec<f64>]) -> Option<(Vec<f32>, Vec<f32>)> {
    let n = per[0].len();
    let count = per.len() as f64;
    let mut mean = vec![0.0; n];
    for r in per {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / count;
        }
    }
    let mut var = vec![0.0; n];
    for r in per {
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / count;
        }
    }
    let peak = var.iter().cloned().fold(0.0, f64::max).sqrt();
    if peak == 0.0 {
        return None;
    }
    Some((
        mean.iter().map(|&m| m as f32).collect(),
        var.iter()
            .map(|v| v.sqrt().max(1e-3 * peak) as f32)
            .collect(),
    ))
}

/// Conditional flow matching on `(Y - Y_o) / scale` given the history.
pub fn train_predictor(
    windows: &Windows<'_>,
    cfg: PredictorConfig,
    tcfg: &PredictorTrainConfig,
) -> Result<(PredictorModel, PredictorTrainLog)> {
    tcfg.validate()?;
    if windows.human_dim() != cfg.human_dim {
        return Err(Error::config(format!(
            "dataset has {} human coordinates, model expects {}",
            windows.human_dim(),
            cfg.human_dim
        )));
    }
    let mut model = PredictorModel::new(cfg)?;
    model.target_scale = measure_target_scale(&model.window, windows)?;
    (model.obs_mean, model.obs_scale) = measure_obs_stats(&model.window, windows)?;
    let mut adam = Adam::new(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed ^ 0x7472_6169);
    let mut log = PredictorTrainLog::default();
    let n = model.coeff_len();
    let (dim, tau) = (model.cfg.human_dim, model.cfg.tau);
    let steps_per_epoch = tcfg.samples_per_epoch / tcfg.batch;
    for epoch in 0..tcfg.epochs {
        let lr = tcfg.schedule.lr_at(epoch)?;
        let mut total = 0.0;
        for _ in 0..steps_per_epoch {
            let b = tcfg.batch;
            let idx: Vec<usize> = (0..b).map(|_| rng.random_range(0..windows.len())).collect();
            let mut yo = Vec::with_capacity(b * n);
            let mut x1 = Vec::with_capacity(b * n);
            for &i in &idx {
                let c = window_coeffs(&model.window, windows, i)?;
                x1.extend(
                    c.y.iter()
                        .zip(&c.yo)
                        .zip(&model.target_scale)
                        .map(|((y, o), s)| (y - o) / s),
                );
                yo.extend(c.yo);
            }
            let x0 = standard_normal(&mut rng, &[b * dim, tau]);
            let t: Vec<f64> = (0..b)
                .map(|_| {
                    if rng.random::<f64>() < tcfg.t0_share {
                        0.0
                    } else {
                        rng.random::<f64>()
                    }
                })
                .collect();
            let xt: Vec<f32> = (0..b * n)
                .map(|i| {
                    let ti = t[i / n] as f32;
                    ti * x1[i] + (1.0 - ti) * x0.data()[i]
                })
                .collect();
            let target: Vec<f32> = x1.iter().zip(x0.data()).map(|(a, b)| a - b).collect();
            let mut grads = {
                let mut tape = Tape::new(&model.store);
                let yv = tape.input(Tensor::new(&[b, n], yo)?)?;
                let xv = tape.input(Tensor::new(&[b * dim, tau], xt)?)?;
                let u = model.velocity(&mut tape, yv, xv, &t)?;
                let tg = tape.input(Tensor::new(&[b * dim, tau], target)?)?;
                let loss = tape.mse(u, tg)?;
                let l = tape.value(loss).data()[0] as f64;
                if !l.is_finite() {
                    return Err(Error::Training(format!(
                        "predictor loss diverged at epoch {epoch}"
                    )));
                }
                total += l;
                tape.backward(loss)?
            };
            clip_grad_norm(&mut grads, tcfg.clip_norm);
            model.store.accumulate(grads)?;
            adam.step(&mut model.store, lr)?;
        }
        let mean = total / steps_per_epoch as f64;
        log::debug!("predictor epoch {epoch}: loss {mean:.5} lr {lr:.2e}");
        log.epoch_loss.push(mean);
    }
    log.steps = model.store.step();
    Ok((model, log))
}

/// Mean over windows of the best ADE among `n` coarse samples.
pub fn best_of_n_ade(
    model: &PredictorModel,
    windows: &Windows<'_>,
    n: usize,
    seed: u64,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::usage("no windows to evaluate"));
    }
    let dim = model.cfg.human_dim;
    let per = exec::try_map_indexed(windows.len(), |i| {
        let flat =
            model.predict_coarse_flat(windows.obs_human(i), n, seed.wrapping_add(i as u64))?;
        let gt = windows.future_human(i);
        let mut best = f64::INFINITY;
        for c in flat.chunks(dim * model.cfg.tau) {
            best = best.min(ade(&model.window.future(c, dim), gt, dim)?);
        }
        Ok(best)
    })?;
    Ok(per.iter().sum::<f64>() / per.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PredictorConfig {
        PredictorConfig {
            d: 8,
            blocks: 2,
            tau: 4,
            history: 3,
            horizon: 5,
            human_dim: 6,
            ..PredictorConfig::default()
        }
    }

    #[test]
    fn history_token_shape_and_zero_case() {
        let m = PredictorModel::new(small()).unwrap();
        let obs = vec![0.0f32; 3 * 6];
        let c = m.embed_history(&obs).unwrap();
        assert_eq!(c.len(), 8);
        assert!(c.iter().all(|&v| v == 0.0));
        let obs: Vec<f32> = (0..18).map(|i| i as f32 * 0.1).collect();
        assert_eq!(
            m.embed_history(&obs).unwrap(),
            m.embed_history(&obs).unwrap()
        );
        assert!(m.embed_history(&obs[..12]).is_err());
    }

    #[test]
    fn coarse_samples_are_seeded_and_distinct() {
        let m = PredictorModel::new(small()).unwrap();
        let obs: Vec<f32> = (0..18).map(|i| (i as f32).sin()).collect();
        let a = m.predict_coarse(&obs, 5, 11).unwrap();
        assert_eq!(a, m.predict_coarse(&obs, 5, 11).unwrap());
        assert_eq!(a.len(), 5);
        assert_eq!(a[0].coeffs.shape(), &[6, 4]);
        for i in 0..5 {
            for j in i + 1..5 {
                assert!(a[i].coeffs.max_abs_diff(&a[j].coeffs).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut m = PredictorModel::new(small()).unwrap();
        m.target_scale
            .iter_mut()
            .enumerate()
            .for_each(|(i, s)| *s = 0.5 + i as f32 * 0.01);
        let ck = Checkpoint::from_bytes(&m.to_checkpoint().unwrap().to_bytes().unwrap()).unwrap();
        let r = PredictorModel::from_checkpoint(m.cfg.clone(), &ck).unwrap();
        let obs: Vec<f32> = (0..18).map(|i| i as f32 * 0.05).collect();
        assert_eq!(
            m.predict_coarse_flat(&obs, 3, 2).unwrap(),
            r.predict_coarse_flat(&obs, 3, 2).unwrap()
        );
    }
}
