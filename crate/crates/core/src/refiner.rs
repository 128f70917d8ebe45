//! Interaction-aware residual velocity network.
//!
//! Token stream per sample: `tau` noise tokens (one per retained frequency,
//! each carrying the `3J` coefficients of that frequency), then the history
//! token `C^h + temb(t)` and the coarse-prediction token `C_init + temb(t)`.
//! Every block is modulated by the robot token `C^r` through zero-initialised
//! adaptive layer-norm heads, so the freshly built network is the zero field.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowTime;
use crate::motion::WindowPlan;
use crate::nn::checkpoint::{read_sidecar, write_sidecar};
use crate::nn::layers::init_tensor;
use crate::nn::{
    tile_rows, time_features, Checkpoint, Init, Linear, ParamStore, Scalar, SelfAttention, Tape,
    Tensor, Var, LN_EPS,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefinerConfig {
    pub d: usize,
    pub blocks: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Squeeze-excitation bottleneck divisor.
    pub se_reduction: usize,
    pub tau: usize,
    pub history: usize,
    pub horizon: usize,
    /// `3J`.
    pub human_dim: usize,
    /// `3K`.
    pub robot_dim: usize,
    /// When false the robot token is replaced by a constant zero token.
    pub robot_condition: bool,
    pub seed: u64,
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig {
            d: 64,
            blocks: 4,
            heads: 4,
            mlp_ratio: 2,
            se_reduction: 4,
            tau: 20,
            history: 30,
            horizon: 120,
            human_dim: 48,
            robot_dim: 21,
            robot_condition: true,
            seed: 0,
        }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.blocks == 0 || self.mlp_ratio == 0 || self.se_reduction == 0 {
            return Err(Error::config("refiner widths must be positive (d >= 2)"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d = {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.d * self.mlp_ratio < self.se_reduction {
            return Err(Error::config(
                "squeeze-excitation bottleneck would be empty",
            ));
        }
        if self.tau == 0 || self.tau > self.history + self.horizon {
            return Err(Error::config("tau must lie in 1..=T+F"));
        }
        if self.human_dim == 0 || self.robot_dim == 0 {
            return Err(Error::config("agent dimensions must be positive"));
        }
        Ok(())
    }

    /// Tokens per sample.
    pub fn tokens(&self) -> usize {
        self.tau + 2
    }

    /// Block whose output feeds block `b` through a concatenation skip.
    pub fn skip_source(&self, b: usize) -> Option<usize> {
        let src = self.blocks.checked_sub(1 + b)?;
        (src < b).then_some(src)
    }
}

/// Per-block layers.
#[derive(Clone, Debug)]
pub struct BlockParams {
    /// `C^r -> [gamma1, beta1, gate1, gamma2, beta2, gate2]`, zero-initialised.
    pub ada: Linear,
    pub attn: SelfAttention,
    pub fc1: Linear,
    pub fc2: Linear,
    pub se1: Linear,
    pub se2: Linear,
    /// `[h; skip] -> h`, initialised to `[I; 0]`.
    pub fuse: Option<Linear>,
}

/// Gamma, beta and gate for both modulated sites of a block, each already
/// broadcast to `[rows, d]`.
#[derive(Clone, Copy, Debug)]
pub struct Modulation {
    pub gamma1: Var,
    pub beta1: Var,
    pub gate1: Var,
    pub gamma2: Var,
    pub beta2: Var,
    pub gate2: Var,
}

/// `LN(h) * (1 + gamma) + beta`.
pub fn adaln_apply<T: Scalar>(
    tape: &mut Tape<'_, T>,
    h: Var,
    gamma: Var,
    beta: Var,
) -> Result<Var> {
    let n = tape.layer_norm(h, LN_EPS)?;
    let scale = tape.add_scalar(gamma, T::one())?;
    let y = tape.mul(n, scale)?;
    tape.add(y, beta)
}

/// Batched refiner inputs, all on one tape.
#[derive(Clone, Copy, Debug)]
pub struct RefinerInputs {
    /// `[B*tau, 3J]` noisy residual, one row per frequency token.
    pub yt: Var,
    /// `[B, 3J*tau]` padded-history coefficients.
    pub history: Var,
    /// `[B, 3J*tau]` coarse prediction.
    pub init: Var,
    /// `[B, 3K*tau]` padded robot coefficients.
    pub robot: Var,
}

#[derive(Clone, Debug)]
pub struct RefinerModel {
    pub cfg: RefinerConfig,
    pub store: ParamStore<f32>,
    pub window: WindowPlan,
    pub embed_history: Linear,
    pub embed_init: Linear,
    pub embed_robot: Linear,
    pub time1: Linear,
    pub time2: Linear,
    pub noise_in: Linear,
    pub pos: usize,
    pub blocks: Vec<BlockParams>,
    pub out: Linear,
}

impl RefinerModel {
    pub fn new(cfg: RefinerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7265_6669);
        let mut s = ParamStore::new();
        let (d, tau) = (cfg.d, cfg.tau);
        let embed_history = Linear::register(
            &mut s,
            &mut rng,
            "ref.embed_history",
            cfg.human_dim * tau,
            d,
            Init::Uniform,
        )?;
        let embed_init = Linear::register(
            &mut s,
            &mut rng,
            "ref.embed_init",
            cfg.human_dim * tau,
            d,
            Init::Uniform,
        )?;
        let embed_robot = Linear::register(
            &mut s,
            &mut rng,
            "ref.embed_robot",
            cfg.robot_dim * tau,
            d,
            Init::Uniform,
        )?;
        let time1 = Linear::register(&mut s, &mut rng, "ref.time.fc1", d, d, Init::Uniform)?;
        let time2 = Linear::register(&mut s, &mut rng, "ref.time.fc2", d, d, Init::Uniform)?;
        let noise_in = Linear::register(
            &mut s,
            &mut rng,
            "ref.noise_in",
            cfg.human_dim,
            d,
            Init::Uniform,
        )?;
        let pos = s.insert(
            "ref.pos",
            init_tensor(&mut rng, &[cfg.tokens(), d], d, Init::Normal(0.02)),
        )?;
        let hidden = d * cfg.mlp_ratio;
        let squeeze = hidden / cfg.se_reduction;
        let mut blocks = Vec::with_capacity(cfg.blocks);
        for b in 0..cfg.blocks {
            let p = format!("ref.block{b}");
            let fuse = match cfg.skip_source(b) {
                Some(_) => {
                    let name = format!("{p}.fuse");
                    let lin = Linear::register(&mut s, &mut rng, &name, 2 * d, d, Init::Zero)?;
                    let w =
                        Tensor::from_fn(&[2 * d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
                    s.set(&format!("{name}.weight"), w)?;
                    Some(lin)
                }
                None => None,
            };
            blocks.push(BlockParams {
                ada: Linear::register(&mut s, &mut rng, &format!("{p}.ada"), d, 6 * d, Init::Zero)?,
                attn: SelfAttention::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.attn"),
                    d,
                    cfg.heads,
                )?,
                fc1: Linear::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.mlp.fc1"),
                    d,
                    hidden,
                    Init::Uniform,
                )?,
                fc2: Linear::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.mlp.fc2"),
                    hidden,
                    d,
                    Init::Uniform,
                )?,
                se1: Linear::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.se.fc1"),
                    hidden,
                    squeeze,
                    Init::Uniform,
                )?,
                se2: Linear::register(
                    &mut s,
                    &mut rng,
                    &format!("{p}.se.fc2"),
                    squeeze,
                    hidden,
                    Init::Uniform,
                )?,
                fuse,
            });
        }
        let out = Linear::register(&mut s, &mut rng, "ref.out", d, cfg.human_dim, Init::Zero)?;
        Ok(RefinerModel {
            window: WindowPlan::new(cfg.history, cfg.horizon, cfg.tau)?,
            cfg,
            store: s,
            embed_history,
            embed_init,
            embed_robot,
            time1,
            time2,
            noise_in,
            pos,
            blocks,
            out,
        })
    }

    pub fn coeff_len(&self) -> usize {
        self.cfg.human_dim * self.cfg.tau
    }

    pub fn robot_len(&self) -> usize {
        self.cfg.robot_dim * self.cfg.tau
    }

    pub fn fingerprint(&self) -> u64 {
        self.store.fingerprint()
    }

    /// `[B, d]` time embedding on the tape.
    pub fn time_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, t: &[f64]) -> Result<Var> {
        for &ti in t {
            FlowTime::new(ti)?;
        }
        let d = self.cfg.d;
        let feats: Vec<T> = t
            .iter()
            .flat_map(|&ti| time_features(ti, d))
            .map(T::of)
            .collect();
        let x = tape.input(Tensor::new(&[t.len(), d], feats)?)?;
        let x = self.time1.forward(tape, x)?;
        let x = tape.silu(x)?;
        self.time2.forward(tape, x)
    }

    /// `C^r` rows (or the constant zero token in the ablation).
    pub fn robot_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, robot: Var) -> Result<Var> {
        if self.cfg.robot_condition {
            self.embed_robot.forward(tape, robot)
        } else {
            let b = tape.value(robot).rows();
            tape.input(Tensor::zeros(&[b, self.cfg.d]))
        }
    }

    /// Modulation for block `b` from `C^r` rows, broadcast over `n` tokens.
    pub fn modulation<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        b: usize,
        cr: Var,
        n: usize,
    ) -> Result<Modulation> {
        let d = self.cfg.d;
        let act = tape.silu(cr)?;
        let m = self.blocks[b].ada.forward(tape, act)?;
        let m = tape.repeat_rows(m, n)?;
        let mut part = |k: usize| tape.slice_cols(m, k * d, d);
        Ok(Modulation {
            gamma1: part(0)?,
            beta1: part(1)?,
            gate1: part(2)?,
            gamma2: part(3)?,
            beta2: part(4)?,
            gate2: part(5)?,
        })
    }

    /// One interaction-aware block on `[B*n, d]` tokens.
    pub fn block_forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        b: usize,
        h: Var,
        m: &Modulation,
    ) -> Result<Var> {
        let n = self.cfg.tokens();
        let blk = &self.blocks[b];
        let a = adaln_apply(tape, h, m.gamma1, m.beta1)?;
        let a = blk.attn.forward(tape, a, n)?;
        let a = tape.mul(m.gate1, a)?;
        let h = tape.add(h, a)?;

        let a = adaln_apply(tape, h, m.gamma2, m.beta2)?;
        let z = blk.fc1.forward(tape, a)?;
        let z = tape.gelu(z)?;
        // squeeze over the tokens of each sample, excite the hidden channels
        let s = tape.group_mean(z, n)?;
        let s = blk.se1.forward(tape, s)?;
        let s = tape.gelu(s)?;
        let s = blk.se2.forward(tape, s)?;
        let s = tape.sigmoid(s)?;
        let s = tape.repeat_rows(s, n)?;
        let z = tape.mul(z, s)?;
        let a = blk.fc2.forward(tape, z)?;
        let a = tape.mul(m.gate2, a)?;
        tape.add(h, a)
    }

    /// Velocity `[B*tau, 3J]` (token layout) for a batch at times `t`.
    pub fn velocity<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        inp: RefinerInputs,
        t: &[f64],
    ) -> Result<Var> {
        let (tau, n) = (self.cfg.tau, self.cfg.tokens());
        let b = t.len();
        if tape.value(inp.yt).rows() != b * tau
            || tape.value(inp.history).rows() != b
            || tape.value(inp.init).rows() != b
            || tape.value(inp.robot).rows() != b
        {
            return Err(Error::dim("refiner batch sizes disagree"));
        }
        let temb = self.time_tokens(tape, t)?;
        let ch = self.embed_history.forward(tape, inp.history)?;
        let ch = tape.add(ch, temb)?;
        let ci = self.embed_init.forward(tape, inp.init)?;
        let ci = tape.add(ci, temb)?;
        let cr = self.robot_tokens(tape, inp.robot)?;
        let e = self.noise_in.forward(tape, inp.yt)?;

        let stacked = tape.concat_rows(&[e, ch, ci])?;
        let order: Vec<usize> = (0..b)
            .flat_map(|s| {
                (0..tau)
                    .map(move |k| s * tau + k)
                    .chain([b * tau + s, b * tau + b + s])
            })
            .collect();
        let mut h = tape.gather_rows(stacked, order)?;
        let pos = tape.param_by_id(self.pos);
        let pos = tile_rows(tape, pos, b)?;
        h = tape.add(h, pos)?;

        let mut streams = Vec::with_capacity(self.blocks.len());
        for bi in 0..self.blocks.len() {
            if let (Some(src), Some(fuse)) = (self.cfg.skip_source(bi), &self.blocks[bi].fuse) {
                let cat = tape.concat_cols(&[h, streams[src]])?;
                h = fuse.forward(tape, cat)?;
            }
            let m = self.modulation(tape, bi, cr, n)?;
            h = self.block_forward(tape, bi, h, &m)?;
            streams.push(h);
        }
        let noise_rows: Vec<usize> = (0..b)
            .flat_map(|s| (0..tau).map(move |k| s * n + k))
            .collect();
        let h = tape.gather_rows(h, noise_rows)?;
        let h = tape.layer_norm(h, LN_EPS)?;
        self.out.forward(tape, h)
    }

    /// f32 inference. Coefficient blocks are flat `[B, 3J*tau]` (channel-major
    /// like [`crate::motion::FreqCoeffs`]); robot blocks `[B, 3K*tau]`.
    /// Returns the velocity in the same `[B, 3J*tau]` layout.
    pub fn forward_flat(
        &self,
        yt: &[f32],
        history: &[f32],
        init: &[f32],
        robot: &[f32],
        t: &[f64],
    ) -> Result<Vec<f32>> {
        let (dim, tau) = (self.cfg.human_dim, self.cfg.tau);
        let b = t.len();
        let n = self.coeff_len();
        if yt.len() != b * n
            || history.len() != b * n
            || init.len() != b * n
            || robot.len() != b * self.robot_len()
        {
            return Err(Error::dim("refiner inputs disagree with the batch size"));
        }
        let mut tape = Tape::new(&self.store);
        let inp = RefinerInputs {
            yt: tape.input(Tensor::new(
                &[b * tau, dim],
                coeffs_to_tokens(yt, dim, tau),
            )?)?,
            history: tape.input(Tensor::new(&[b, n], history.to_vec())?)?,
            init: tape.input(Tensor::new(&[b, n], init.to_vec())?)?,
            robot: tape.input(Tensor::new(&[b, self.robot_len()], robot.to_vec())?)?,
        };
        let v = self.velocity(&mut tape, inp, t)?;
        let out = tokens_to_coeffs(tape.value(v).data(), dim, tau);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("refiner velocity".into()));
        }
        Ok(out)
    }

    /// `C^r` for one `[T, 3K]` robot observation.
    pub fn embed_robot_obs(&self, obs: &[f32]) -> Result<Vec<f32>> {
        let yr = self.window.observed(obs, self.cfg.robot_dim)?;
        self.single(&self.embed_robot, yr)
    }

    /// `C_init` for one `[3J*tau]` coarse prediction.
    pub fn embed_init_coeffs(&self, coeffs: &[f32]) -> Result<Vec<f32>> {
        if coeffs.len() != self.coeff_len() {
            return Err(Error::dim("coarse prediction has the wrong size"));
        }
        self.single(&self.embed_init, coeffs.to_vec())
    }

    /// `C^h` for one `[T, 3J]` observation.
    pub fn embed_history_obs(&self, obs: &[f32]) -> Result<Vec<f32>> {
        let yo = self.window.observed(obs, self.cfg.human_dim)?;
        self.single(&self.embed_history, yo)
    }

    fn single(&self, lin: &Linear, x: Vec<f32>) -> Result<Vec<f32>> {
        let mut tape = Tape::new(&self.store);
        let v = tape.input(Tensor::new(&[1, x.len()], x)?)?;
        let y = lin.forward(&mut tape, v)?;
        Ok(tape.value(y).data().to_vec())
    }

    /// Flow-time embedding `[d]`; `t` must lie in `[0, 1]`.
    pub fn time_embed(&self, t: f64) -> Result<Vec<f32>> {
        let mut tape = Tape::new(&self.store);
        let v = self.time_tokens(&mut tape, &[t])?;
        Ok(tape.value(v).data().to_vec())
    }

    pub fn save(&self, path: &Path, meta: &RefinerMeta) -> Result<()> {
        Checkpoint::from_store(&self.store).save(path)?;
        write_sidecar(path, meta)
    }

    pub fn load(path: &Path) -> Result<(Self, RefinerMeta)> {
        let meta: RefinerMeta = read_sidecar(path)?;
        let mut m = RefinerModel::new(meta.model.clone())?;
        Checkpoint::load(path)?.restore_into(&mut m.store)?;
        Ok((m, meta))
    }
}

/// Hyperparameter sidecar of a refiner checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinerMeta {
    pub model: RefinerConfig,
    pub alpha: f64,
    pub predictor_fingerprint: u64,
    pub epoch: usize,
    pub best_val_median_ade: Option<f64>,
}

/// `[B, D, tau] -> [B, tau, D]`.
pub fn coeffs_to_tokens(x: &[f32], dim: usize, tau: usize) -> Vec<f32> {
    let n = dim * tau;
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        for c in 0..dim {
            for k in 0..tau {
                dst[k * dim + c] = src[c * tau + k];
            }
        }
    }
    out
}

/// `[B, tau, D] -> [B, D, tau]`.
pub fn tokens_to_coeffs(x: &[f32], dim: usize, tau: usize) -> Vec<f32> {
    let n = dim * tau;
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks(n).zip(out.chunks_mut(n)) {
        for k in 0..tau {
            for c in 0..dim {
                dst[c * tau + k] = src[k * dim + c];
            }
        }
    }
    out
}
