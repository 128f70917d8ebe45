//! Reverse-mode gradient tape.
//!
//! Every op evaluates eagerly, stores its output on the tape and returns a
//! [`Var`] handle. [`Tape::backward`] walks the recorded nodes in reverse and
//! returns the gradient of a scalar loss with respect to every entry of the
//! parameter store the tape was opened on.
//!
//! Ops treat tensors as `rows x cols` matrices over the last dimension.
//! Batched sequence data is laid out as `[groups * tokens, features]`, and the
//! group-aware ops (`repeat_rows`, `group_mean`, `attention`,
//! `transpose_groups`) take the group size explicitly.

use super::scalar::{gemm, MatRef};
use super::{Gradients, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::exec;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

enum Op<T> {
    Input,
    Param(usize),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu {
        x: Var,
        th: Vec<T>,
    },
    Silu {
        x: Var,
        sig: Vec<T>,
    },
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<T>,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    Attention {
        qkv: Var,
        group: usize,
        heads: usize,
        probs: Vec<T>,
    },
    TransposeGroups {
        x: Var,
        groups: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    MeanAll(Var),
    SumAll(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddBias(..) => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Gelu { .. } => "gelu",
            Op::Silu { .. } => "silu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GroupMean { .. } => "group_mean",
            Op::Attention { .. } => "attention",
            Op::TransposeGroups { .. } => "transpose_groups",
            Op::GatherRows { .. } => "gather_rows",
            Op::ConcatRows(_) => "concat_rows",
            Op::ConcatCols(_) => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape(_) => "reshape",
            Op::MeanAll(_) => "mean_all",
            Op::SumAll(_) => "sum_all",
        }
    }
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
}

/// Recording of one forward pass over a borrowed parameter store.
pub struct Tape<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
}

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shape {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Tape {
            params,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.params.value(id),
            _ => node.value.as_ref().expect("non-param node carries a value"),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(op.name().to_string()));
        }
        self.nodes.push(Node {
            value: Some(value),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant (non-trainable) input.
    pub fn input(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        let id = self.params.id(name)?;
        Ok(self.param_by_id(id))
    }

    pub fn param_by_id(&mut self, id: usize) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 2 || av.cols() != bv.shape()[0] {
            return Err(Error::dim(format!(
                "matmul: {:?} x {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(
            MatRef::new(av.data(), m, k),
            MatRef::new(bv.data(), k, n),
            &mut out,
            false,
        );
        let shape = with_last(av.shape(), n);
        self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b))
    }

    /// Adds a `[c]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let c = xv.cols();
        if bv.numel() != c {
            return Err(Error::dim(format!(
                "add_bias: x {:?}, bias {:?}",
                xv.shape(),
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        self.push(out, Op::AddBias(x, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "add")?;
        let out = av.zip_map(bv, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "sub")?;
        let out = av.zip_map(bv, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(av, bv, "mul")?;
        let out = av.zip_map(bv, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
        let th: Vec<T> = xv
            .data()
            .iter()
            .map(|&v| (c * (v + k * v * v * v)).tanh_fast())
            .collect();
        let out: Vec<T> = xv
            .data()
            .iter()
            .zip(&th)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let out = Tensor::new(xv.shape(), out)?;
        self.push(out, Op::Gelu { x, th })
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sig: Vec<T> = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let out: Vec<T> = xv.data().iter().zip(&sig).map(|(&v, &s)| v * s).collect();
        let out = Tensor::new(xv.shape(), out)?;
        self.push(out, Op::Silu { x, sig })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push(out, Op::Sigmoid(x))
    }

    /// Per-row normalisation to zero mean and unit variance, no affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 {
            return Err(Error::dim(format!(
                "layer_norm needs >= 2 features, got {d}"
            )));
        }
        let inv_d = T::of(1.0 / d as f64);
        let eps = T::of(eps);
        let mut out = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.rows());
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let inv = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            inv_std.push(inv);
        }
        self.push(out, Op::LayerNorm { x, inv_std })
    }

    /// `[r, c] -> [r * times, c]`, each row repeated `times` times in place.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let mut out = Vec::with_capacity(xv.numel() * times);
        for row in xv.data().chunks(c) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let out = Tensor::new(&[xv.rows() * times, c], out)?;
        self.push(out, Op::RepeatRows { x, times })
    }

    /// Mean over each consecutive block of `group` rows: `[g*n, c] -> [g, c]`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if group == 0 || r % group != 0 {
            return Err(Error::dim(format!("group_mean: {r} rows, group {group}")));
        }
        let inv = T::of(1.0 / group as f64);
        let mut out = vec![T::zero(); (r / group) * c];
        for (g, block) in xv.data().chunks(group * c).enumerate() {
            let dst = &mut out[g * c..(g + 1) * c];
            for row in block.chunks(c) {
                for (o, &v) in dst.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            dst.iter_mut().for_each(|o| *o = *o * inv);
        }
        let out = Tensor::new(&[r / group, c], out)?;
        self.push(out, Op::GroupMean { x, group })
    }

    /// Multi-head scaled dot-product self-attention inside each group of
    /// `group` rows. `qkv` is `[g*n, 3d]` (query, key, value blocks); the
    /// result is `[g*n, d]`. No masking.
    pub fn attention(&mut self, qkv: Var, group: usize, heads: usize) -> Result<Var> {
        let v = self.value(qkv);
        let (r, c3) = (v.rows(), v.cols());
        if c3 % 3 != 0 || group == 0 || r % group != 0 {
            return Err(Error::dim(format!(
                "attention: qkv {:?}, group {group}",
                v.shape()
            )));
        }
        let d = c3 / 3;
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!(
                "attention: width {d} not divisible by {heads} heads"
            )));
        }
        let groups = r / group;
        let data = v.data();
        let per_group = exec::map_indexed(groups, |g| {
            attention_group_forward(&data[g * group * c3..(g + 1) * group * c3], group, d, heads)
        });
        let mut out = Vec::with_capacity(r * d);
        let mut probs = Vec::with_capacity(groups * heads * group * group);
        for (o, p) in per_group {
            out.extend_from_slice(&o);
            probs.extend_from_slice(&p);
        }
        let out = Tensor::new(&[r, d], out)?;
        self.push(
            out,
            Op::Attention {
                qkv,
                group,
                heads,
                probs,
            },
        )
    }

    /// `[groups * a, b] -> [groups * b, a]`, transposing each block.
    pub fn transpose_groups(&mut self, x: Var, groups: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, b) = (xv.rows(), xv.cols());
        if groups == 0 || r % groups != 0 {
            return Err(Error::dim(format!(
                "transpose_groups: {r} rows, {groups} groups"
            )));
        }
        let a = r / groups;
        let out = transpose_blocks(xv.data(), groups, a, b);
        let out = Tensor::new(&[groups * b, a], out)?;
        self.push(out, Op::TransposeGroups { x, groups })
    }

    /// Select rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= r {
                return Err(Error::dim(format!("gather_rows: index {i} >= {r}")));
            }
            out.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new(&[index.len(), c], out)?;
        self.push(out, Op::GatherRows { x, index })
    }

    /// Stack row-wise; all parts must share the column count.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_rows of nothing"));
        }
        let c = self.value(parts[0]).cols();
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != c {
                return Err(Error::dim(format!(
                    "concat_rows: cols {} vs {c}",
                    pv.cols()
                )));
            }
            rows += pv.rows();
            out.extend_from_slice(pv.data());
        }
        let out = Tensor::new(&[rows, c], out)?;
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Concatenate along the feature axis; all parts must share the row count.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::usage("concat_cols of nothing"));
        }
        let r = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(Error::dim("concat_cols: row counts differ"));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], out)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = (xv.rows(), xv.cols());
        if start + len > c || len == 0 {
            return Err(Error::dim(format!("slice_cols {start}+{len} of {c}")));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in xv.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(&[r, len], out)?;
        self.push(out, Op::SliceCols { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.numel() == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        let m = xv.sum() / T::of(xv.numel() as f64);
        self.push(Tensor::scalar(m), Op::MeanAll(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    // -- composites ------------------------------------------------------

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    /// Mean squared difference between `pred` and a constant target.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let diff = self.sub(pred, target)?;
        let sq = self.mul(diff, diff)?;
        self.mean_all(sq)
    }

    /// Consume the tape and return `d loss / d param` for every store entry.
    /// Entries the loss does not depend on get zero gradients.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads: Vec<Tensor<T>> = (0..self.params.len())
            .map(|i| Tensor::zeros(self.params.value(i).shape()))
            .collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient of {}",
                    self.nodes[i].op.name()
                )));
            }
            self.backprop_node(i, g, &mut grads, &mut param_grads)?;
        }
        Ok(Gradients { grads: param_grads })
    }

    fn backprop_node(
        &self,
        i: usize,
        g: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        param_grads: &mut [Tensor<T>],
    ) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let dst = param_grads[*id].data_mut();
                for (d, &v) in dst.iter_mut().zip(g.data()) {
                    *d = *d + v;
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                {
                    let slot = slot(grads, *a, av.shape());
                    gemm(
                        MatRef::new(g.data(), m, n),
                        MatRef::t(bv.data(), k, n),
                        slot.data_mut(),
                        true,
                    );
                }
                let slot = slot(grads, *b, bv.shape());
                gemm(
                    MatRef::t(av.data(), m, k),
                    MatRef::new(g.data(), m, n),
                    slot.data_mut(),
                    true,
                );
            }
            Op::AddBias(x, b) => {
                let c = g.cols();
                {
                    let bs = slot(grads, *b, self.value(*b).shape());
                    let dst = bs.data_mut();
                    for row in g.data().chunks(c) {
                        for (d, &v) in dst.iter_mut().zip(row) {
                            *d = *d + v;
                        }
                    }
                }
                add_into(grads, *x, g);
            }
            Op::Add(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, g.clone());
                add_into(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.zip_map(bv, |x, y| x * y)?;
                let gb = g.zip_map(av, |x, y| x * y)?;
                add_into(grads, *a, ga);
                add_into(grads, *b, gb);
            }
            Op::Scale(x, s) => {
                let s = *s;
                add_into(grads, *x, g.map(|v| v * s));
            }
            Op::AddScalar(x) => add_into(grads, *x, g),
            Op::Gelu { x, th } => {
                let xv = self.value(*x);
                let (c, half) = (T::of(GELU_C), T::of(0.5));
                let three_k = T::of(3.0 * GELU_K);
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(th)
                    .map(|((&gv, &v), &t)| {
                        let dudx = c * (T::one() + three_k * v * v);
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * dudx;
                        gv * d
                    })
                    .collect();
                add_into(grads, *x, Tensor::new(g.shape(), data)?);
            }
            Op::Silu { x, sig } => {
                let xv = self.value(*x);
                let data: Vec<T> = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .zip(sig)
                    .map(|((&gv, &v), &s)| gv * s * (T::one() + v * (T::one() - s)))
                    .collect();
                add_into(grads, *x, Tensor::new(g.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let y = out.expect("value");
                let gx = g.zip_map(y, |gv, s| gv * s * (T::one() - s))?;
                add_into(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = out.expect("value");
                let d = y.cols();
                let inv_d = T::of(1.0 / d as f64);
                let mut gx = vec![T::zero(); g.numel()];
                for (r, ((gr, yr), dst)) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                    .enumerate()
                {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    let inv = inv_std[r];
                    for ((o, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *o = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                add_into(grads, *x, Tensor::new(g.shape(), gx)?);
            }
            Op::RepeatRows { x, times } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let s = slot(grads, *x, xv.shape());
                let dst = s.data_mut();
                for (r, block) in g.data().chunks(c * times).enumerate() {
                    let d = &mut dst[r * c..(r + 1) * c];
                    for row in block.chunks(c) {
                        for (o, &v) in d.iter_mut().zip(row) {
                            *o = *o + v;
                        }
                    }
                }
            }
            Op::GroupMean { x, group } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let inv = T::of(1.0 / *group as f64);
                let s = slot(grads, *x, xv.shape());
                for (gi, dst) in s.data_mut().chunks_mut(group * c).enumerate() {
                    let src = &g.data()[gi * c..(gi + 1) * c];
                    for row in dst.chunks_mut(c) {
                        for (o, &v) in row.iter_mut().zip(src) {
                            *o = *o + v * inv;
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                group,
                heads,
                probs,
            } => {
                let v = self.value(*qkv);
                let (r, c3) = (v.rows(), v.cols());
                let d = c3 / 3;
                let groups = r / group;
                let n = *group;
                let pp = heads * n * n;
                let per_group = exec::map_indexed(groups, |gi| {
                    attention_group_backward(
                        &v.data()[gi * n * c3..(gi + 1) * n * c3],
                        &g.data()[gi * n * d..(gi + 1) * n * d],
                        &probs[gi * pp..(gi + 1) * pp],
                        n,
                        d,
                        *heads,
                    )
                });
                let mut gx = Vec::with_capacity(r * c3);
                for part in per_group {
                    gx.extend_from_slice(&part);
                }
                add_into(grads, *qkv, Tensor::new(v.shape(), gx)?);
            }
            Op::TransposeGroups { x, groups } => {
                let xv = self.value(*x);
                let (a, b) = (xv.rows() / groups, xv.cols());
                let back = transpose_blocks(g.data(), *groups, b, a);
                add_into(grads, *x, Tensor::new(xv.shape(), back)?);
            }
            Op::GatherRows { x, index } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let s = slot(grads, *x, xv.shape());
                let dst = s.data_mut();
                for (row, &src) in g.data().chunks(c).zip(index) {
                    for (o, &v) in dst[src * c..(src + 1) * c].iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let n = pv.numel();
                    let part = Tensor::new(pv.shape(), g.data()[offset..offset + n].to_vec())?;
                    offset += n;
                    add_into(grads, p, part);
                }
            }
            Op::ConcatCols(parts) => {
                let total = g.cols();
                let mut start = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let w = pv.cols();
                    let mut part = Vec::with_capacity(pv.numel());
                    for row in g.data().chunks(total) {
                        part.extend_from_slice(&row[start..start + w]);
                    }
                    start += w;
                    add_into(grads, p, Tensor::new(pv.shape(), part)?);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (c, len) = (xv.cols(), g.cols());
                let s = slot(grads, *x, xv.shape());
                for (dst, src) in s.data_mut().chunks_mut(c).zip(g.data().chunks(len)) {
                    for (o, &v) in dst[*start..start + len].iter_mut().zip(src) {
                        *o = *o + v;
                    }
                }
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                add_into(grads, *x, g.reshape(&shape)?);
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let gv = g.data()[0] / T::of(xv.numel() as f64);
                add_into(grads, *x, Tensor::full(xv.shape(), gv));
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                add_into(grads, *x, Tensor::full(xv.shape(), g.data()[0]));
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn slot<'a, T: Scalar>(
    grads: &'a mut [Option<Tensor<T>>],
    v: Var,
    shape: &[usize],
) -> &'a mut Tensor<T> {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

fn add_into<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (o, &x) in existing.data_mut().iter_mut().zip(g.data()) {
                *o = *o + x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn transpose_blocks<T: Scalar>(data: &[T], groups: usize, a: usize, b: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for g in 0..groups {
        let src = &data[g * a * b..(g + 1) * a * b];
        let dst = &mut out[g * a * b..(g + 1) * a * b];
        for i in 0..a {
            for j in 0..b {
                dst[j * a + i] = src[i * b + j];
            }
        }
    }
    out
}

/// One group: `qkv` is `[n, 3d]`. Returns (`[n, d]` output, `[heads, n, n]` probabilities).
fn attention_group_forward<T: Scalar>(
    qkv: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> (Vec<T>, Vec<T>) {
    let dh = d / heads;
    let c3 = 3 * d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = vec![T::zero(); heads * n * n];
    let (rs, rd) = (c3 as isize, d as isize);
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let p = &mut probs[h * n * n..(h + 1) * n * n];
        // scores = scale * Q K^T, read straight out of the strided qkv rows
        unsafe {
            T::gemm_raw(
                n,
                dh,
                n,
                scale,
                qkv[qo..].as_ptr(),
                rs,
                1,
                qkv[ko..].as_ptr(),
                1,
                rs,
                T::zero(),
                p.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        for row in p.chunks_mut(n) {
            let max = row.iter().fold(T::neg_infinity(), |m, &s| m.max(s));
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z = z + *s;
            }
            let inv = T::one() / z;
            row.iter_mut().for_each(|s| *s = *s * inv);
        }
        unsafe {
            T::gemm_raw(
                n,
                n,
                dh,
                T::one(),
                p.as_ptr(),
                n as isize,
                1,
                qkv[vo..].as_ptr(),
                rs,
                1,
                T::zero(),
                out[qo..].as_mut_ptr(),
                rd,
                1,
            );
        }
    }
    (out, probs)
}

fn attention_group_backward<T: Scalar>(
    qkv: &[T],
    gout: &[T],
    probs: &[T],
    n: usize,
    d: usize,
    heads: usize,
) -> Vec<T> {
    let dh = d / heads;
    let c3 = 3 * d;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let mut gx = vec![T::zero(); n * c3];
    let mut dp = vec![T::zero(); n];
    for h in 0..heads {
        let (qo, ko, vo) = (h * dh, d + h * dh, 2 * d + h * dh);
        let p = &probs[h * n * n..(h + 1) * n * n];
        for i in 0..n {
            let go = &gout[i * d + qo..i * d + qo + dh];
            let prow = &p[i * n..(i + 1) * n];
            // dV and dP
            for j in 0..n {
                let v = &qkv[j * c3 + vo..j * c3 + vo + dh];
                dp[j] = go.iter().zip(v).map(|(&a, &b)| a * b).sum();
                let pij = prow[j];
                let gv = &mut gx[j * c3 + vo..j * c3 + vo + dh];
                for (o, &gval) in gv.iter_mut().zip(go) {
                    *o = *o + pij * gval;
                }
            }
            let dot: T = prow.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
            for j in 0..n {
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                for t in 0..dh {
                    let kj = qkv[j * c3 + ko + t];
                    let qi = qkv[i * c3 + qo + t];
                    gx[i * c3 + qo + t] = gx[i * c3 + qo + t] + ds * kj;
                    gx[j * c3 + ko + t] = gx[j * c3 + ko + t] + ds * qi;
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store1(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert(name, t).unwrap();
        s
    }

    #[test]
    fn sum_gives_unit_gradients() {
        let s = store1("p", Tensor::new(&[3], vec![1.0, -2.0, 5.0]).unwrap());
        let mut tape = Tape::new(&s);
        let p = tape.param("p").unwrap();
        let l = tape.sum_all(p).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(0).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let s = store1("p", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new(&s);
        let p = tape.param("p").unwrap();
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum_all(sq).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(0).data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let s = store1("p", Tensor::zeros(&[2]));
        let mut tape = Tape::new(&s);
        let p = tape.param("p").unwrap();
        assert!(matches!(tape.backward(p), Err(Error::Usage(_))));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        let x = tape.input(Tensor::scalar(1.0)).unwrap();
        let err = tape.scale(x, f64::INFINITY).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref op) if op == "scale"));
        assert!(tape.input(Tensor::scalar(f64::NAN)).is_err());
    }

    #[test]
    fn untouched_params_get_zero_grads() {
        let mut s = store1("a", Tensor::full(&[2], 1.0));
        s.insert("b", Tensor::full(&[3], 1.0)).unwrap();
        let mut tape = Tape::new(&s);
        let a = tape.param("a").unwrap();
        let l = tape.sum_all(a).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(1).data(), &[0.0; 3]);
    }

    #[test]
    fn transpose_groups_layout() {
        let s = ParamStore::<f64>::new();
        let mut tape = Tape::new(&s);
        // two groups of [2, 3]
        let x = tape.input(Tensor::from_fn(&[4, 3], |i| i as f64)).unwrap();
        let y = tape.transpose_groups(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[6, 2]);
        assert_eq!(
            tape.value(y).data(),
            &[0.0, 3.0, 1.0, 4.0, 2.0, 5.0, 6.0, 9.0, 7.0, 10.0, 8.0, 11.0]
        );
    }
}
