use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{ParamStore, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// Weight initialisation for [`Linear::register`].
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero bias.
    Uniform,
    /// All zeros (adaLN-Zero heads, output projections).
    Zero,
    /// `N(0, std^2)` weights, zero bias.
    Normal(f64),
}

pub(crate) fn init_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    shape: &[usize],
    fan_in: usize,
    init: Init,
) -> Tensor<f32> {
    match init {
        Init::Zero => Tensor::zeros(shape),
        Init::Uniform => {
            let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
        }
        Init::Normal(std) => Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            (z * std) as f32
        }),
    }
}

/// Affine map `x W + b` with `W: [input, output]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: usize,
    pub bias: Option<usize>,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
    ) -> Result<Self> {
        let w = init_tensor(rng, &[input, output], input, init);
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(&[output]))?;
        Ok(Linear {
            weight,
            bias: Some(bias),
            input,
            output,
        })
    }

    pub fn register_no_bias<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        input: usize,
        output: usize,
        init: Init,
    ) -> Result<Self> {
        let w = init_tensor(rng, &[input, output], input, init);
        let weight = store.insert(format!("{name}.weight"), w)?;
        Ok(Linear {
            weight,
            bias: None,
            input,
            output,
        })
    }

    /// Re-bind to an existing store laid out by `register`.
    pub fn bind<T: Scalar>(store: &ParamStore<T>, name: &str, with_bias: bool) -> Result<Self> {
        let weight = store.id(&format!("{name}.weight"))?;
        let shape = store.value(weight).shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(format!("{name}.weight must be rank 2")));
        }
        let bias = if with_bias {
            Some(store.id(&format!("{name}.bias"))?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            input: shape[0],
            output: shape[1],
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let xv = tape.value(x);
        if xv.cols() != self.input {
            return Err(Error::dim(format!(
                "linear expects {} inputs, got shape {:?}",
                self.input,
                xv.shape()
            )));
        }
        let w = tape.param_by_id(self.weight);
        let b = self.bias.map(|b| tape.param_by_id(b));
        tape.linear(x, w, b)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
    ) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::register(
                store,
                rng,
                &format!("{name}.fc1"),
                input,
                hidden,
                Init::Uniform,
            )?,
            fc2: Linear::register(
                store,
                rng,
                &format!("{name}.fc2"),
                hidden,
                output,
                Init::Uniform,
            )?,
        })
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.fc2.forward(tape, h)
    }
}

/// Multi-head self-attention: fused QKV projection, attention core, output
/// projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore<f32>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "attention width {width} not divisible by {heads} heads"
            )));
        }
        Ok(SelfAttention {
            qkv: Linear::register(
                store,
                rng,
                &format!("{name}.qkv"),
                width,
                3 * width,
                Init::Uniform,
            )?,
            out: Linear::register(
                store,
                rng,
                &format!("{name}.out"),
                width,
                width,
                Init::Uniform,
            )?,
            heads,
        })
    }

    /// `tokens` is `[groups * n, width]`; attention runs within each group of `n`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, tokens: Var, n: usize) -> Result<Var> {
        let qkv = self.qkv.forward(tape, tokens)?;
        let mixed = tape.attention(qkv, n, self.heads)?;
        self.out.forward(tape, mixed)
    }
}

/// Stack `times` copies of `x` row-wise: `[r, c] -> [times * r, c]`.
pub fn tile_rows<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, times: usize) -> Result<Var> {
    if times == 1 {
        return Ok(x);
    }
    tape.concat_rows(&vec![x; times])
}

/// `[sin(w_k t), cos(w_k t)]` with `w_k` spaced geometrically over `1..=100`.
pub fn time_features(t: f64, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for k in 0..half {
        let w = if half > 1 {
            100f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        };
        out[k] = (w * t).sin();
        out[half + k] = (w * t).cos();
    }
    out
}
