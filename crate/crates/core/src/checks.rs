//! Finite-difference gradient checks over every layer kind and the full
//! networks at reduced sizes, in f64.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::nn::gradcheck::{check_gradients, GradCheckOptions};
use crate::nn::{Init, Linear, Mlp, ParamStore, SelfAttention, Tape, Tensor, Var, LN_EPS};
use crate::predictor::{PredictorConfig, PredictorModel};
use crate::refiner::{adaln_apply, coeffs_to_tokens, RefinerConfig, RefinerInputs, RefinerModel};

/// Pass mark for the maximum relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCase {
    pub name: String,
    pub max_rel_err: f64,
    pub worst_param: String,
    pub checked: usize,
}

// Exactly-zero gradients (key biases under softmax shift invariance) see
// ~1e-10 of rounding noise in the central difference; the floor judges those
// on absolute error.
fn options() -> GradCheckOptions {
    GradCheckOptions {
        h: 1e-5,
        floor: 1e-5,
        max_per_param: 48,
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        (scale * rng.sample::<f64, _>(StandardNormal)) as f32
    })
}

/// Replace every all-zero parameter (zero-init heads, biases) with noise so
/// no path is trivially dead, and perturb the rest.
fn randomise(store: &mut ParamStore<f32>, rng: &mut ChaCha8Rng) {
    for name in store.names().to_vec() {
        let id = store.id(&name).expect("listed name");
        let v = store.value_mut(id);
        let dead = v.data().iter().all(|&x| x == 0.0);
        for x in v.data_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *x = if dead {
                (0.3 * z) as f32
            } else {
                *x + (0.05 * z) as f32
            };
        }
    }
}

fn run(
    name: &str,
    store: &ParamStore<f32>,
    loss: impl Fn(&mut Tape<'_, f64>) -> Result<Var>,
) -> Result<GradCase> {
    let s64 = store.cast::<f64>();
    let r = check_gradients(&s64, options(), loss)?;
    Ok(GradCase {
        name: name.to_string(),
        max_rel_err: r.max_rel_err,
        worst_param: r.worst_param,
        checked: r.checked,
    })
}

/// Weighted sum so every output coordinate carries a distinct gradient.
fn probe(tape: &mut Tape<'_, f64>, y: Var, w: &Tensor<f32>) -> Result<Var> {
    let w = tape.input(w.cast())?;
    let p = tape.mul(y, w)?;
    tape.sum_all(p)
}

/// Every check with its maximum relative error.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6772_6164);
    let mut out = Vec::new();
    let (rows, d) = (6, 8);

    // single layers with the input itself registered as a parameter
    let mut s = ParamStore::new();
    s.insert("x", randn(&mut rng, &[rows, d], 1.0))?;
    let lin = Linear::register(&mut s, &mut rng, "lin", d, 5, Init::Uniform)?;
    let mlp = Mlp::register(&mut s, &mut rng, "mlp", d, 12, d)?;
    let attn = SelfAttention::register(&mut s, &mut rng, "attn", d, 2)?;
    s.insert("gamma", randn(&mut rng, &[rows, d], 0.5))?;
    s.insert("beta", randn(&mut rng, &[rows, d], 0.5))?;
    s.insert("target", randn(&mut rng, &[rows, d], 1.0))?;
    randomise(&mut s, &mut rng);
    let w5 = randn(&mut rng, &[rows, 5], 1.0);
    let wd = randn(&mut rng, &[rows, d], 1.0);
    let wg = randn(&mut rng, &[rows / 3, d], 1.0);
    let wt = randn(&mut rng, &[2 * d, rows / 2], 1.0);

    out.push(run("linear", &s, |t| {
        let x = t.param("x")?;
        let y = lin.forward(t, x)?;
        probe(t, y, &w5)
    })?);
    out.push(run("layer_norm", &s, |t| {
        let x = t.param("x")?;
        let y = t.layer_norm(x, LN_EPS)?;
        probe(t, y, &wd)
    })?);
    for name in ["gelu", "silu", "sigmoid"] {
        out.push(run(name, &s, |t| {
            let x = t.param("x")?;
            let y = match name {
                "gelu" => t.gelu(x)?,
                "silu" => t.silu(x)?,
                _ => t.sigmoid(x)?,
            };
            probe(t, y, &wd)
        })?);
    }
    out.push(run("mlp", &s, |t| {
        let x = t.param("x")?;
        let y = mlp.forward(t, x)?;
        probe(t, y, &wd)
    })?);
    out.push(run("attention", &s, |t| {
        let x = t.param("x")?;
        let y = attn.forward(t, x, 3)?;
        probe(t, y, &wd)
    })?);
    out.push(run("adaln", &s, |t| {
        let (x, g, b) = (t.param("x")?, t.param("gamma")?, t.param("beta")?);
        let y = adaln_apply(t, x, g, b)?;
        probe(t, y, &wd)
    })?);
    out.push(run("group_mean", &s, |t| {
        let x = t.param("x")?;
        let y = t.group_mean(x, 3)?;
        probe(t, y, &wg)
    })?);
    out.push(run("repeat_gather_concat", &s, |t| {
        let x = t.param("x")?;
        let m = t.group_mean(x, 3)?;
        let r = t.repeat_rows(m, 3)?;
        let c = t.concat_cols(&[x, r])?;
        let c = t.slice_cols(c, 3, d)?;
        let g = t.gather_rows(c, vec![5, 0, 2, 2, 1, 4])?;
        let y = t.concat_rows(&[g])?;
        probe(t, y, &wd)
    })?);
    out.push(run("transpose_groups", &s, |t| {
        let x = t.param("x")?;
        let y = t.transpose_groups(x, 2)?;
        let y = t.gelu(y)?;
        probe(t, y, &wt)
    })?);
    out.push(run("mse", &s, |t| {
        let (x, y) = (t.param("x")?, t.param("target")?);
        let z = t.sub(x, y)?;
        let z = t.scale(z, 0.7)?;
        let z = t.add_scalar(z, 0.1)?;
        t.mse(z, y)
    })?);

    // refiner at reduced size
    let rcfg = RefinerConfig {
        d: 16,
        blocks: 2,
        heads: 2,
        mlp_ratio: 2,
        se_reduction: 4,
        tau: 5,
        history: 4,
        horizon: 8,
        human_dim: 12,
        robot_dim: 6,
        robot_condition: true,
        seed,
    };
    let mut refiner = RefinerModel::new(rcfg.clone())?;
    randomise(&mut refiner.store, &mut rng);
    let b = 2;
    let n = rcfg.human_dim * rcfg.tau;
    let yt = randn(&mut rng, &[b, n], 1.0);
    let yt = Tensor::new(
        &[b * rcfg.tau, rcfg.human_dim],
        coeffs_to_tokens(yt.data(), rcfg.human_dim, rcfg.tau),
    )?;
    let hist = randn(&mut rng, &[b, n], 0.5);
    let init = randn(&mut rng, &[b, n], 0.5);
    let robot = randn(&mut rng, &[b, rcfg.robot_dim * rcfg.tau], 0.5);
    let wv = randn(&mut rng, &[b * rcfg.tau, rcfg.human_dim], 1.0);
    let tokens = randn(&mut rng, &[b * rcfg.tokens(), rcfg.d], 1.0);
    let wtok = randn(&mut rng, &[b * rcfg.tokens(), rcfg.d], 1.0);
    let cr = randn(&mut rng, &[b, rcfg.d], 1.0);
    let t = [0.3, 0.8];

    out.push(run("refiner_block", &refiner.store, |tp| {
        let h = tp.input(tokens.cast())?;
        let c = tp.input(cr.cast())?;
        let m = refiner.modulation(tp, 0, c, rcfg.tokens())?;
        let y = refiner.block_forward(tp, 0, h, &m)?;
        probe(tp, y, &wtok)
    })?);
    out.push(run("refiner_full", &refiner.store, |tp| {
        let inp = RefinerInputs {
            yt: tp.input(yt.cast())?,
            history: tp.input(hist.cast())?,
            init: tp.input(init.cast())?,
            robot: tp.input(robot.cast())?,
        };
        let u = refiner.velocity(tp, inp, &t)?;
        probe(tp, u, &wv)
    })?);

    // coarse predictor at reduced size
    let pcfg = PredictorConfig {
        d: 8,
        blocks: 2,
        expansion: 2,
        tau: 5,
        history: 4,
        horizon: 8,
        human_dim: 6,
        seed,
    };
    let mut pred = PredictorModel::new(pcfg.clone())?;
    randomise(&mut pred.store, &mut rng);
    let pn = pcfg.human_dim * pcfg.tau;
    let yo = randn(&mut rng, &[b, pn], 0.5);
    let xt = randn(&mut rng, &[b * pcfg.human_dim, pcfg.tau], 1.0);
    let wp = randn(&mut rng, &[b * pcfg.human_dim, pcfg.tau], 1.0);
    out.push(run("predictor_full", &pred.store, |tp| {
        let y = tp.input(yo.cast())?;
        let x = tp.input(xt.cast())?;
        let u = pred.velocity(tp, y, x, &t)?;
        probe(tp, u, &wp)
    })?);
    Ok(out)
}
