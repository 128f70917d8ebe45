//! Flow matching on the straight (optimal-transport) path
//! `x_t = t x1 + (1 - t) x0`, with one-step and Euler samplers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Init, Linear, ParamStore, Tape, Tensor, Var};

/// Flow time in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct FlowTime(f64);

impl FlowTime {
    pub fn new(t: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::usage(format!("flow time {t} outside [0, 1]")));
        }
        Ok(FlowTime(t))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

pub fn interpolate(x0: &Tensor<f32>, x1: &Tensor<f32>, t: FlowTime) -> Result<Tensor<f32>> {
    let t = t.0 as f32;
    x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a)
}

/// Per-row interpolation with one time per row of `[rows, dim]` tensors.
pub fn interpolate_rows(x0: &Tensor<f32>, x1: &Tensor<f32>, t: &[f32]) -> Result<Tensor<f32>> {
    if x0.shape() != x1.shape() || x0.rows() != t.len() {
        return Err(Error::dim("interpolate_rows: shapes disagree"));
    }
    let d = x0.cols();
    Ok(Tensor::from_fn(x0.shape(), |i| {
        let ti = t[i / d];
        ti * x1.data()[i] + (1.0 - ti) * x0.data()[i]
    }))
}

/// `mean((u - (x1 - x0))^2)`.
pub fn fm_loss(u: &Tensor<f32>, x0: &Tensor<f32>, x1: &Tensor<f32>) -> Result<f64> {
    if u.shape() != x0.shape() || x0.shape() != x1.shape() {
        return Err(Error::dim(format!(
            "fm_loss shapes {:?} {:?} {:?}",
            u.shape(),
            x0.shape(),
            x1.shape()
        )));
    }
    let n = u.numel().max(1) as f64;
    Ok(u.data()
        .iter()
        .zip(x0.data())
        .zip(x1.data())
        .map(|((&u, &a), &b)| {
            let e = u as f64 - (b as f64 - a as f64);
            e * e
        })
        .sum::<f64>()
        / n)
}

/// A velocity network with its conditioning already bound.
pub trait VelocityField {
    /// Velocity at every row of `x` (`[batch, ...]`) at time `t`.
    fn velocity(&self, x: &Tensor<f32>, t: FlowTime) -> Result<Tensor<f32>>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor<f32>, FlowTime) -> Result<Tensor<f32>>,
{
    fn velocity(&self, x: &Tensor<f32>, t: FlowTime) -> Result<Tensor<f32>> {
        self(x, t)
    }
}

fn check_alpha(alpha: f64) -> Result<f32> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::config(format!(
            "alpha must be positive, got {alpha}"
        )));
    }
    Ok(alpha as f32)
}

fn finite(t: Tensor<f32>, what: &str) -> Result<Tensor<f32>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::Numeric(what.into()))
    }
}

/// `(x0 + u(x0, 0)) / alpha`.
pub fn sample_one_step<V: VelocityField + ?Sized>(
    field: &V,
    x0: &Tensor<f32>,
    alpha: f64,
) -> Result<Tensor<f32>> {
    let a = check_alpha(alpha)?;
    let d = field.velocity(x0, FlowTime(0.0))?;
    let x = x0.zip_map(&d, |x, v| x + v)?;
    finite(x.map(|v| v / a), "one-step sampler")
}

/// Explicit Euler on a uniform grid over `[0, 1]`, then `/ alpha`.
/// With `steps = 1` this is exactly [`sample_one_step`].
pub fn sample_euler<V: VelocityField + ?Sized>(
    field: &V,
    x0: &Tensor<f32>,
    steps: usize,
    alpha: f64,
) -> Result<Tensor<f32>> {
    let a = check_alpha(alpha)?;
    if steps == 0 {
        return Err(Error::usage("euler sampler needs steps >= 1"));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x0.clone();
    for i in 0..steps {
        let t = FlowTime((i as f64 * dt).min(1.0));
        let v = field.velocity(&x, t)?;
        // h = 1 for a single step, and 1.0 * v == v exactly
        let h = dt as f32;
        x = x.zip_map(&v, |x, v| x + h * v)?;
    }
    finite(x.map(|v| v / a), "euler sampler")
}

/// How source and target samples are paired inside a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Coupling {
    /// Pairs as drawn.
    Independent,
    /// Exact optimal assignment under squared distance within the batch.
    MinibatchOt,
}

/// Minimum-cost perfect matching of a square cost matrix (row-major).
/// Returns `assign[row] = col`.
pub fn hungarian(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // potentials formulation, 1-based with a virtual column 0
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

/// Reorder the rows of `x1` so that row i is paired with row i of `x0`
/// under the minibatch optimal assignment.
pub fn ot_pair(x0: &Tensor<f32>, x1: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x0.shape() != x1.shape() {
        return Err(Error::dim("ot_pair shapes differ"));
    }
    let (n, d) = (x0.rows(), x0.cols());
    // The optimal assignment is unchanged by translating either set; centring
    // both keeps the potentials small and the search short.
    let (m0, _) = column_stats(x0);
    let (m1, _) = column_stats(x1);
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = (0..d)
                .map(|c| {
                    let a = x0.row(i)[c] as f64 - m0[c];
                    let b = x1.row(j)[c] as f64 - m1[c];
                    (a - b) * (a - b)
                })
                .sum();
        }
    }
    let assign = hungarian(&cost, n);
    let mut data = Vec::with_capacity(n * d);
    for &j in &assign {
        data.extend_from_slice(x1.row(j));
    }
    Tensor::new(x0.shape(), data)
}

pub fn standard_normal(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

/// Small MLP velocity field on `R^dim` used for sampler sanity checks.
pub struct ToyField {
    pub store: ParamStore<f32>,
    layers: [Linear; 3],
    dim: usize,
}

/// Axis-aligned Gaussian target `N(mean, diag(std^2))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTask {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub coupling: Coupling,
    pub steps: usize,
    pub batch: usize,
    pub hidden: usize,
    pub lr: f64,
    /// Fraction of training pairs drawn at exactly t = 0.
    pub t0_share: f64,
    pub seed: u64,
}

impl Default for ToyTask {
    fn default() -> Self {
        ToyTask {
            mean: vec![1.0, -1.5],
            std: vec![0.8, 1.5],
            coupling: Coupling::MinibatchOt,
            steps: 1500,
            batch: 256,
            hidden: 64,
            lr: 2e-3,
            t0_share: 0.25,
            seed: 0,
        }
    }
}

impl ToyField {
    pub fn new(dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let layers = [
            Linear::register(
                &mut store,
                &mut rng,
                "toy.l0",
                dim + 1,
                hidden,
                Init::Uniform,
            )?,
            Linear::register(
                &mut store,
                &mut rng,
                "toy.l1",
                hidden,
                hidden,
                Init::Uniform,
            )?,
            Linear::register(&mut store, &mut rng, "toy.l2", hidden, dim, Init::Uniform)?,
        ];
        Ok(ToyField { store, layers, dim })
    }

    fn forward(&self, tape: &mut Tape<'_, f32>, x: &Tensor<f32>, t: &[f32]) -> Result<Var> {
        let n = x.rows();
        let mut input = Vec::with_capacity(n * (self.dim + 1));
        for (i, &ti) in t.iter().enumerate().take(n) {
            input.extend_from_slice(x.row(i));
            input.push(ti);
        }
        let h = tape.input(Tensor::new(&[n, self.dim + 1], input)?)?;
        let h = self.layers[0].forward(tape, h)?;
        let h = tape.gelu(h)?;
        let h = self.layers[1].forward(tape, h)?;
        let h = tape.gelu(h)?;
        self.layers[2].forward(tape, h)
    }

    /// Train on `task`; returns the final-step loss.
    pub fn train(&mut self, task: &ToyTask) -> Result<f64> {
        if task.mean.len() != self.dim || task.std.len() != self.dim {
            return Err(Error::dim("toy task dimension mismatch"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(task.seed ^ 0x746f_7921);
        let mut adam = Adam::new(&self.store);
        let mut last = f64::NAN;
        for step in 0..task.steps {
            let x0 = standard_normal(&mut rng, &[task.batch, self.dim]);
            let z = standard_normal(&mut rng, &[task.batch, self.dim]);
            let mut x1 = Tensor::from_fn(z.shape(), |i| {
                let c = i % self.dim;
                (task.mean[c] + task.std[c] * z.data()[i] as f64) as f32
            });
            if task.coupling == Coupling::MinibatchOt {
                x1 = ot_pair(&x0, &x1)?;
            }
            // a share of exact t=0 draws sharpens the field where the
            // one-step sampler reads it
            let t: Vec<f32> = (0..task.batch)
                .map(|_| {
                    if rng.random::<f64>() < task.t0_share {
                        0.0
                    } else {
                        rng.random::<f32>()
                    }
                })
                .collect();
            let xt = interpolate_rows(&x0, &x1, &t)?;
            let target = x1.zip_map(&x0, |b, a| b - a)?;
            let grads = {
                let mut tape = Tape::new(&self.store);
                let u = self.forward(&mut tape, &xt, &t)?;
                let tgt = tape.input(target)?;
                let loss = tape.mse(u, tgt)?;
                last = tape.value(loss).data()[0] as f64;
                tape.backward(loss)?
            };
            self.store.accumulate(grads)?;
            let progress = step as f64 / task.steps as f64;
            let lr = task.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            adam.step(&mut self.store, lr)?;
        }
        if !last.is_finite() {
            return Err(Error::Training("toy loss diverged".into()));
        }
        Ok(last)
    }
}

impl VelocityField for ToyField {
    fn velocity(&self, x: &Tensor<f32>, t: FlowTime) -> Result<Tensor<f32>> {
        let mut tape = Tape::new(&self.store);
        let tt = vec![t.0 as f32; x.rows()];
        let u = self.forward(&mut tape, x, &tt)?;
        Ok(tape.value(u).clone())
    }
}

/// Per-dimension mean and standard deviation of the rows of `x`.
pub fn column_stats(x: &Tensor<f32>) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for i in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    let std = var
        .iter()
        .map(|s| (s / (n as f64 - 1.0).max(1.0)).sqrt())
        .collect();
    (mean, std)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f32]) -> Tensor<f32> {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn interpolation_endpoints() {
        let (a, b) = (t(&[0.0, 1.0]), t(&[2.0, -1.0]));
        assert_eq!(interpolate(&a, &b, FlowTime::new(0.0).unwrap()).unwrap(), a);
        assert_eq!(interpolate(&a, &b, FlowTime::new(1.0).unwrap()).unwrap(), b);
        let mid = interpolate(&t(&[0.0]), &t(&[2.0]), FlowTime::new(0.5).unwrap()).unwrap();
        assert_eq!(mid.data(), &[1.0]);
        assert!(FlowTime::new(1.5).is_err());
    }

    #[test]
    fn loss_of_perfect_and_offset_velocity() {
        let (a, b) = (t(&[0.5, 1.0, -2.0]), t(&[1.0, 0.0, 3.0]));
        let u = b.zip_map(&a, |x, y| x - y).unwrap();
        assert_eq!(fm_loss(&u, &a, &b).unwrap(), 0.0);
        let shifted = u.map(|v| v + 0.25);
        assert!((fm_loss(&shifted, &a, &b).unwrap() - 0.0625).abs() < 1e-7);
    }

    #[test]
    fn constant_field_samplers() {
        let c = 0.75f32;
        let field = |x: &Tensor<f32>, _t: FlowTime| Ok(x.map(|_| c));
        let x0 = t(&[0.1, -0.4]);
        let s1 = sample_one_step(&field, &x0, 1.0).unwrap();
        assert_eq!(s1.data(), &[0.1 + c, -0.4 + c]);
        let s2 = sample_one_step(&field, &x0, 2.0).unwrap();
        assert_eq!(s2.data(), &[(0.1 + c) / 2.0, (-0.4 + c) / 2.0]);
        assert_eq!(sample_euler(&field, &x0, 1, 2.0).unwrap(), s2);
        assert!(sample_one_step(&field, &x0, 0.0).is_err());
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..=6 {
            let cost: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>()).collect();
            let assign = hungarian(&cost, n);
            let total: f64 = assign
                .iter()
                .enumerate()
                .map(|(i, &j)| cost[i * n + j])
                .sum();
            let mut perm: Vec<usize> = (0..n).collect();
            let mut best = f64::INFINITY;
            permute(&mut perm, 0, &mut |p| {
                best = best.min(p.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum());
            });
            assert!((total - best).abs() < 1e-12, "n={n}");
        }
    }

    fn permute(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
        if k == v.len() {
            f(v);
            return;
        }
        for i in k..v.len() {
            v.swap(k, i);
            permute(v, k + 1, f);
            v.swap(k, i);
        }
    }

    #[test]
    fn independent_coupling_collapses_one_step_samples() {
        // With independent pairs the optimal velocity at t=0 is E[x1] - x0,
        // so a single step lands on the target mean regardless of x0.
        let task = ToyTask {
            coupling: Coupling::Independent,
            steps: 1500,
            ..ToyTask::default()
        };
        let mut f = ToyField::new(2, 64, 1).unwrap();
        f.train(&task).unwrap();
        let x0 = standard_normal(&mut ChaCha8Rng::seed_from_u64(9), &[2000, 2]);
        let s = sample_one_step(&f, &x0, 1.0).unwrap();
        let (_, std) = column_stats(&s);
        assert!(
            std[0] < 0.5 * task.std[0] && std[1] < 0.5 * task.std[1],
            "{std:?}"
        );
    }
}
