//! Motion sequences and the truncated DCT used to represent them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gemm, MatRef, Tensor};

pub const FRAME_RATE: f32 = 60.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Agent {
    Human,
    Robot,
}

/// `[L, D]` joint coordinates in metres, robot-base frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MotionSequence {
    pub values: Tensor<f32>,
    pub rate: f32,
    pub agent: Agent,
}

impl MotionSequence {
    pub fn new(values: Tensor<f32>, agent: Agent) -> Result<Self> {
        if values.rank() != 2 || values.shape()[0] == 0 {
            return Err(Error::dim(format!(
                "motion needs shape [L>=1, D], got {:?}",
                values.shape()
            )));
        }
        if !values.is_finite() {
            return Err(Error::Numeric("motion sequence construction".into()));
        }
        Ok(MotionSequence {
            values,
            rate: FRAME_RATE,
            agent,
        })
    }

    pub fn from_frames(frames: Vec<f32>, dim: usize, agent: Agent) -> Result<Self> {
        if dim == 0 || !frames.len().is_multiple_of(dim) {
            return Err(Error::dim(format!(
                "{} values do not split into {dim}-dim frames",
                frames.len()
            )));
        }
        let len = frames.len() / dim;
        Self::new(Tensor::new(&[len, dim], frames)?, agent)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        self.values.row(i)
    }

    /// Frames `start..end`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(Error::dim(format!(
                "frame range {start}..{end} outside 0..{}",
                self.len()
            )));
        }
        let d = self.dim();
        let data = self.values.data()[start * d..end * d].to_vec();
        Ok(MotionSequence {
            values: Tensor::new(&[end - start, d], data)?,
            rate: self.rate,
            agent: self.agent,
        })
    }
}

/// Truncated DCT coefficients `[D, tau]` of a sequence of `full_length` frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqCoeffs {
    pub coeffs: Tensor<f32>,
    pub full_length: usize,
}

impl FreqCoeffs {
    pub fn new(coeffs: Tensor<f32>, full_length: usize) -> Result<Self> {
        if coeffs.rank() != 2 {
            return Err(Error::dim(format!(
                "coefficients must be [D, tau], got {:?}",
                coeffs.shape()
            )));
        }
        if coeffs.shape()[1] > full_length {
            return Err(Error::config(format!(
                "tau {} exceeds sequence length {full_length}",
                coeffs.shape()[1]
            )));
        }
        Ok(FreqCoeffs {
            coeffs,
            full_length,
        })
    }

    pub fn dim(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn tau(&self) -> usize {
        self.coeffs.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Residual {
    pub coeffs: Tensor<f32>,
}

/// Precomputed orthonormal DCT-II basis for a fixed `(L, tau)`.
#[derive(Clone, Debug)]
pub struct DctPlan {
    len: usize,
    tau: usize,
    /// `[tau, L]`, row k is the k-th basis vector.
    basis: Vec<f32>,
}

impl DctPlan {
    pub fn new(len: usize, tau: usize) -> Result<Self> {
        if tau == 0 || tau > len {
            return Err(Error::config(format!("need 0 < tau ({tau}) <= L ({len})")));
        }
        let mut basis = Vec::with_capacity(tau * len);
        let lf = len as f64;
        for k in 0..tau {
            let s = if k == 0 {
                (1.0 / lf).sqrt()
            } else {
                (2.0 / lf).sqrt()
            };
            for l in 0..len {
                let arg = std::f64::consts::PI * (2 * l + 1) as f64 * k as f64 / (2.0 * lf);
                basis.push((s * arg.cos()) as f32);
            }
        }
        Ok(DctPlan { len, tau, basis })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn tau(&self) -> usize {
        self.tau
    }

    pub fn basis(&self) -> &[f32] {
        &self.basis
    }

    /// Raw transform: `frames` is `[L, D]` row-major, result is `[D, tau]`.
    pub fn forward_raw(&self, frames: &[f32], dim: usize) -> Vec<f32> {
        debug_assert_eq!(frames.len(), self.len * dim);
        let mut out = vec![0.0f32; dim * self.tau];
        // out[D, tau] = frames^T[D, L] * basis^T[L, tau]
        let a = MatRef::t(frames, self.len, dim);
        let b = MatRef::t(&self.basis, self.tau, self.len);
        gemm(a, b, &mut out, false);
        out
    }

    /// Raw inverse: `coeffs` is `[D, tau]`, result is `[L, D]`.
    pub fn inverse_raw(&self, coeffs: &[f32], dim: usize) -> Vec<f32> {
        debug_assert_eq!(coeffs.len(), self.tau * dim);
        let mut out = vec![0.0f32; self.len * dim];
        // out[L, D] = basis^T[L, tau] * coeffs^T[tau, D]
        let a = MatRef::t(&self.basis, self.tau, self.len);
        let b = MatRef::t(coeffs, dim, self.tau);
        gemm(a, b, &mut out, false);
        out
    }

    pub fn dct(&self, x: &MotionSequence) -> Result<FreqCoeffs> {
        if x.len() != self.len {
            return Err(Error::dim(format!(
                "plan is for {} frames, got {}",
                self.len,
                x.len()
            )));
        }
        let d = x.dim();
        let c = self.forward_raw(x.values.data(), d);
        FreqCoeffs::new(Tensor::new(&[d, self.tau], c)?, self.len)
    }

    pub fn idct(&self, y: &FreqCoeffs, agent: Agent) -> Result<MotionSequence> {
        if y.tau() != self.tau || y.full_length != self.len {
            return Err(Error::dim(format!(
                "plan is (L={}, tau={}), coefficients are (L={}, tau={})",
                self.len,
                self.tau,
                y.full_length,
                y.tau()
            )));
        }
        let d = y.dim();
        let x = self.inverse_raw(y.coeffs.data(), d);
        MotionSequence::new(Tensor::new(&[self.len, d], x)?, agent)
    }
}

/// Coefficient views of one `T + F` window: padded observations, full
/// ground truth, and the future frames of a coefficient block.
#[derive(Clone, Debug)]
pub struct WindowPlan {
    pub history: usize,
    pub horizon: usize,
    pub plan: DctPlan,
}

impl WindowPlan {
    pub fn new(history: usize, horizon: usize, tau: usize) -> Result<Self> {
        if history == 0 {
            return Err(Error::config("history must be >= 1"));
        }
        Ok(WindowPlan {
            history,
            horizon,
            plan: DctPlan::new(history + horizon, tau)?,
        })
    }

    pub fn tau(&self) -> usize {
        self.plan.tau()
    }

    /// `[T, D]` observation -> `[D, tau]` coefficients of its padded form.
    pub fn observed(&self, obs: &[f32], dim: usize) -> Result<Vec<f32>> {
        if obs.len() != self.history * dim {
            return Err(Error::dim(format!(
                "observation has {} values, expected {} frames of {dim}",
                obs.len(),
                self.history
            )));
        }
        Ok(self
            .plan
            .forward_raw(&pad_frames(obs, dim, self.horizon), dim))
    }

    /// `[T+F, D]` frames -> `[D, tau]`.
    pub fn full(&self, frames: &[f32], dim: usize) -> Result<Vec<f32>> {
        if frames.len() != self.plan.len() * dim {
            return Err(Error::dim("window length disagrees with the plan"));
        }
        Ok(self.plan.forward_raw(frames, dim))
    }

    /// `[D, tau]` coefficients -> `[F, D]` predicted future frames.
    pub fn future(&self, coeffs: &[f32], dim: usize) -> Vec<f32> {
        let mut x = self.plan.inverse_raw(coeffs, dim);
        x.drain(..self.history * dim);
        x
    }

    /// `[D, tau]` coefficients -> `[T, D]` reconstructed history.
    pub fn past(&self, coeffs: &[f32], dim: usize) -> Vec<f32> {
        let mut x = self.plan.inverse_raw(coeffs, dim);
        x.truncate(self.history * dim);
        x
    }
}

/// Append `future` copies of the last observed frame.
pub fn pad_observation(obs: &MotionSequence, future: usize) -> MotionSequence {
    let d = obs.dim();
    let mut data = obs.values.data().to_vec();
    let last = obs.frame(obs.len() - 1).to_vec();
    data.reserve(future * d);
    for _ in 0..future {
        data.extend_from_slice(&last);
    }
    MotionSequence {
        values: Tensor::new(&[obs.len() + future, d], data).expect("shape by construction"),
        rate: obs.rate,
        agent: obs.agent,
    }
}

/// Raw-slice variant of [`pad_observation`]: `[T, D]` -> `[T+F, D]`.
pub fn pad_frames(obs: &[f32], dim: usize, future: usize) -> Vec<f32> {
    let mut data = Vec::with_capacity(obs.len() + future * dim);
    data.extend_from_slice(obs);
    let last = &obs[obs.len() - dim..];
    for _ in 0..future {
        data.extend_from_slice(last);
    }
    data
}

pub fn dct(x: &MotionSequence, tau: usize) -> Result<FreqCoeffs> {
    DctPlan::new(x.len(), tau)?.dct(x)
}

pub fn idct(y: &FreqCoeffs, len: usize, agent: Agent) -> Result<MotionSequence> {
    if len != y.full_length {
        return Err(Error::dim(format!(
            "coefficients describe {} frames, asked for {len}",
            y.full_length
        )));
    }
    DctPlan::new(len, y.tau())?.idct(y, agent)
}

pub fn residual(truth: &FreqCoeffs, init: &FreqCoeffs) -> Result<Residual> {
    Ok(Residual {
        coeffs: truth.coeffs.zip_map(&init.coeffs, |a, b| a - b)?,
    })
}

/// `IDCT(init + delta)`.
pub fn compose(
    init: &FreqCoeffs,
    delta: &Residual,
    len: usize,
    agent: Agent,
) -> Result<MotionSequence> {
    let sum = init.coeffs.zip_map(&delta.coeffs, |a, b| a + b)?;
    idct(&FreqCoeffs::new(sum, init.full_length)?, len, agent)
}
