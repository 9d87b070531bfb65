use std::collections::HashMap;
use std::sync::Arc;

use rayon::prelude::*;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::kernels::{self, Geom};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Epsilon added to the variance inside the square root of group norm.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
    L1Norm,
}

/// Convolution hyper-parameters. Kernels are square (2D) or cubic (3D).
///
/// Inputs are laid out `[C, H, W]` for `dims == 2` and `[C, D, H, W]` for
/// `dims == 3`. Convolution weights are `[C_out, C_in, k..]`; transposed
/// convolution weights are `[C_in, C_out, k..]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub dims: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(dims: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self { dims, kernel, stride, padding }
    }

    /// Stride-`stride` convolution with `(k−1)/2` padding.
    pub fn same(dims: usize, kernel: usize, stride: usize) -> Self {
        Self::new(dims, kernel, stride, (kernel - 1) / 2)
    }

    fn geom(&self) -> Geom {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        if self.dims == 2 {
            Geom { kernel: [1, k, k], stride: [1, s, s], pad: [0, p, p] }
        } else {
            Geom { kernel: [k; 3], stride: [s; 3], pad: [p; 3] }
        }
    }
}

/// Precomputed sparse sampling pattern: every output location reads a fixed
/// number of weighted taps from the source plane, identically for every
/// channel. Used for bilinear warping.
#[derive(Clone, Debug)]
pub struct GatherTable<T> {
    /// Number of spatial elements per channel in the source.
    pub source_len: usize,
    /// Spatial extents of the output (channel axis excluded).
    pub out_shape: Vec<usize>,
    pub taps: usize,
    /// `out_len · taps` flat source indices.
    pub index: Vec<u32>,
    /// `out_len · taps` weights; a zero weight marks an unused tap.
    pub weight: Vec<T>,
}

#[derive(Clone, Copy, Debug)]
struct ConvMeta {
    geom: Geom,
    in_ch: usize,
    out_ch: usize,
    in_ext: [usize; 3],
    out_ext: [usize; 3],
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, T),
    Abs(Var),
    Relu(Var),
    Sigmoid(Var),
    Conv { input: Var, weight: Var, bias: Option<Var>, meta: ConvMeta },
    ConvTranspose { input: Var, weight: Var, bias: Option<Var>, meta: ConvMeta },
    GroupNorm { input: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Reduce { input: Var, kind: ReduceKind, axis: usize, argmax: Vec<usize> },
    SumAll(Var),
    Softmax { input: Var, axis: usize },
    Reshape(Var),
    Concat(Vec<Var>),
    Gather { input: Var, table: Arc<GatherTable<T>> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order. A tape is single-threaded; individual kernels use the
/// rayon pool internally.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: HashMap<usize, Tensor<T>>,
    params: Vec<(ParamId, Var)>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// `(outer, n, inner)` split of `shape` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn sign<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sigmoid<T: Element>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // Keep the output strictly inside (0, 1) even where the exact value rounds.
    let hi = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(hi)
}

fn conv_extents(shape: &[usize], dims: usize) -> [usize; 3] {
    if dims == 2 {
        [1, shape[1], shape[2]]
    } else {
        [shape[1], shape[2], shape[3]]
    }
}

fn out_shape(ch: usize, ext: [usize; 3], dims: usize) -> Vec<usize> {
    if dims == 2 {
        vec![ch, ext[1], ext[2]]
    } else {
        vec![ch, ext[0], ext[1], ext[2]]
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaf_grads: HashMap::new(), params: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Binds a stored parameter as a gradient-tracking leaf. Binding the
    /// same parameter twice returns the same variable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.leaf(store.get(id).value.clone(), true);
        self.param_vars.insert(id, v);
        self.params.push((id, v));
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a gradient-tracking leaf, if any backward
    /// pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaf_grads.get(&v.0)
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    // ---------------------------------------------------------------- elementwise

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(TensorError::Dimension { op, left: sa.to_vec(), right: sb.to_vec() });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let ta = self.value(a);
        let tb = self.value(b).data();
        let n = tb.len().max(1);
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, tb[i % n])).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    /// `a + b`, with `b` either the same shape as `a` or equal to a trailing
    /// suffix of it (repeated along the leading axes).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("add", a, b)?;
        let out = self.binary(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("sub", a, b)?;
        let out = self.binary(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_broadcast("mul", a, b)?;
        let out = self.binary(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x + s);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::MulScalar(a, s), &[a])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a), &[a])
    }

    /// Numerically stable logistic function; outputs lie strictly in (0, 1).
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    // ---------------------------------------------------------------- convolution

    fn check_conv_input(&self, op: &'static str, a: Var, spec: &ConvSpec) -> Result<()> {
        if spec.dims != 2 && spec.dims != 3 {
            return Err(TensorError::Config(format!("{op}: dims must be 2 or 3, got {}", spec.dims)));
        }
        if spec.kernel == 0 || spec.stride == 0 {
            return Err(TensorError::Config(format!("{op}: kernel and stride must be positive")));
        }
        let rank = self.shape(a).len();
        if rank != spec.dims + 1 {
            return Err(TensorError::Dimension { op, left: self.shape(a).to_vec(), right: vec![spec.dims + 1] });
        }
        Ok(())
    }

    fn check_bias(&self, op: &'static str, bias: Option<Var>, channels: usize) -> Result<()> {
        if let Some(b) = bias {
            if self.shape(b) != [channels] {
                return Err(TensorError::Dimension { op, left: self.shape(b).to_vec(), right: vec![channels] });
            }
        }
        Ok(())
    }

    fn add_bias(out: &mut [T], bias: &[T], plane: usize) {
        for (chunk, &b) in out.chunks_mut(plane).zip(bias) {
            for v in chunk {
                *v += b;
            }
        }
    }

    /// Cross-correlation of `a` with `weight`, plus an optional per-channel bias.
    pub fn conv(&mut self, a: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        self.check_conv_input("conv", a, &spec)?;
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(a).to_vec();
        let mut expect = vec![ws.first().copied().unwrap_or(0), xs[0]];
        expect.extend(std::iter::repeat_n(spec.kernel, spec.dims));
        if ws != expect {
            return Err(TensorError::Dimension { op: "conv", left: xs, right: ws });
        }
        let (in_ch, out_ch) = (xs[0], ws[0]);
        self.check_bias("conv", bias, out_ch)?;
        let geom = spec.geom();
        let in_ext = conv_extents(&xs, spec.dims);
        let mut out_ext = [0; 3];
        for axis in 0..3 {
            out_ext[axis] =
                kernels::conv_output_extent(in_ext[axis], geom.kernel[axis], geom.stride[axis], geom.pad[axis])
                    .ok_or_else(|| TensorError::Dimension { op: "conv", left: xs.clone(), right: ws.clone() })?;
        }
        let meta = ConvMeta { geom, in_ch, out_ch, in_ext, out_ext };
        let mut out = kernels::conv_forward(
            self.value(a).data(),
            in_ch,
            in_ext,
            self.value(weight).data(),
            out_ch,
            out_ext,
            &geom,
        );
        if let Some(b) = bias {
            Self::add_bias(&mut out, self.value(b).data(), out_ext.iter().product());
        }
        let value = Tensor::new(out_shape(out_ch, out_ext, spec.dims), out)?;
        let parents: Vec<Var> = [a, weight].into_iter().chain(bias).collect();
        Ok(self.push(value, Op::Conv { input: a, weight, bias, meta }, &parents))
    }

    /// Transposed convolution. `output_padding` (< stride) extends the far
    /// edge so that the output can match an encoder extent exactly.
    pub fn conv_transpose(
        &mut self,
        a: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        output_padding: usize,
    ) -> Result<Var> {
        self.check_conv_input("conv_transpose", a, &spec)?;
        let ws = self.shape(weight).to_vec();
        let xs = self.shape(a).to_vec();
        let mut expect = vec![xs[0], ws.get(1).copied().unwrap_or(0)];
        expect.extend(std::iter::repeat_n(spec.kernel, spec.dims));
        if ws != expect {
            return Err(TensorError::Dimension { op: "conv_transpose", left: xs, right: ws });
        }
        if output_padding >= spec.stride {
            return Err(TensorError::Config(format!(
                "conv_transpose: output padding {output_padding} must be below stride {}",
                spec.stride
            )));
        }
        let (in_ch, out_ch) = (xs[0], ws[1]);
        self.check_bias("conv_transpose", bias, out_ch)?;
        let geom = spec.geom();
        let in_ext = conv_extents(&xs, spec.dims);
        let mut out_ext = [0; 3];
        for axis in 0..3 {
            let op = if spec.dims == 2 && axis == 0 { 0 } else { output_padding };
            out_ext[axis] = kernels::conv_transpose_output_extent(
                in_ext[axis],
                geom.kernel[axis],
                geom.stride[axis],
                geom.pad[axis],
                op,
            )
            .filter(|&e| e > 0)
            .ok_or_else(|| TensorError::Dimension {
                op: "conv_transpose",
                left: xs.clone(),
                right: ws.clone(),
            })?;
        }
        let meta = ConvMeta { geom, in_ch, out_ch, in_ext, out_ext };
        let mut out = kernels::conv_backward_input(
            self.value(a).data(),
            in_ch,
            in_ext,
            self.value(weight).data(),
            out_ch,
            out_ext,
            &geom,
        );
        if let Some(b) = bias {
            Self::add_bias(&mut out, self.value(b).data(), out_ext.iter().product());
        }
        let value = Tensor::new(out_shape(out_ch, out_ext, spec.dims), out)?;
        let parents: Vec<Var> = [a, weight].into_iter().chain(bias).collect();
        Ok(self.push(value, Op::ConvTranspose { input: a, weight, bias, meta }, &parents))
    }

    /// Transposed convolution whose output spatial extents must equal
    /// `target` (typically an encoder skip tensor). Picks the output padding.
    pub fn conv_transpose_to(
        &mut self,
        a: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
        target: &[usize],
    ) -> Result<Var> {
        self.check_conv_input("conv_transpose", a, &spec)?;
        let xs = self.shape(a).to_vec();
        let mismatch = || TensorError::Dimension { op: "conv_transpose", left: xs.clone(), right: target.to_vec() };
        if target.len() != spec.dims {
            return Err(mismatch());
        }
        let mut chosen = None;
        for op in 0..spec.stride {
            let ok = xs[1..].iter().zip(target).all(|(&i, &t)| {
                kernels::conv_transpose_output_extent(i, spec.kernel, spec.stride, spec.padding, op) == Some(t)
            });
            if ok {
                chosen = Some(op);
                break;
            }
        }
        let op = chosen.ok_or_else(mismatch)?;
        self.conv_transpose(a, weight, bias, spec, op)
    }

    // ---------------------------------------------------------------- normalization

    /// Group normalization over `[C, ...]` with per-channel affine `gamma`, `beta`.
    pub fn group_norm(&mut self, a: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.first().ok_or(TensorError::Axis { axis: 0, rank: 0 })?;
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!("group_norm: {c} channels not divisible into {groups} groups")));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::Dimension {
                    op: "group_norm",
                    left: shape.clone(),
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let x = self.value(a).data();
        let spatial = x.len() / c.max(1);
        let glen = spatial * (c / groups);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut mean = Vec::with_capacity(groups);
        let mut rstd = Vec::with_capacity(groups);
        let mut out = vec![T::zero(); x.len()];
        for (gi, (xs, os)) in x.chunks(glen).zip(out.chunks_mut(glen)).enumerate() {
            let m = xs.iter().map(|v| v.as_f64()).sum::<f64>() / glen as f64;
            let var = xs.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>() / glen as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            mean.push(m);
            rstd.push(r);
            let (tm, tr) = (T::lit(m), T::lit(r));
            for (j, (&xv, o)) in xs.iter().zip(os.iter_mut()).enumerate() {
                let ch = gi * (c / groups) + j / spatial;
                *o = g[ch] * ((xv - tm) * tr) + b[ch];
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::GroupNorm { input: a, gamma, beta, groups, mean, rstd }, &[a, gamma, beta]))
    }

    // ---------------------------------------------------------------- reductions

    /// Reduces `axis` away. The gradient of `Max` flows to the first maximal
    /// element along the axis.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let r = o * inner + i;
                out[r] = match kind {
                    ReduceKind::Sum => (0..n).map(|j| x[idx(j)]).sum(),
                    ReduceKind::Mean => (0..n).map(|j| x[idx(j)]).sum::<T>() / T::lit(n as f64),
                    ReduceKind::L1Norm => (0..n).map(|j| x[idx(j)].abs()).sum(),
                    ReduceKind::Max => {
                        let mut best = idx(0);
                        for j in 1..n {
                            if x[idx(j)] > x[best] {
                                best = idx(j);
                            }
                        }
                        argmax[r] = best;
                        x[best]
                    }
                };
            }
        }
        let mut oshape = shape.clone();
        oshape.remove(axis);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Reduce { input: a, kind, axis, argmax }, &[a]))
    }

    /// Sum of every element, as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::SumAll(a), &[a])
    }

    /// Softmax along `axis`, stabilized by subtracting the per-slice maximum.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis { axis, rank: shape.len() });
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let x = self.value(a).data();
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| x[idx(j)]).fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for j in 0..n {
                    let e = (x[idx(j)] - m).exp();
                    out[idx(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    out[idx(j)] = out[idx(j)] / z;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { input: a, axis }, &[a]))
    }

    // ---------------------------------------------------------------- layout

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let tail = self.shape(*first).get(1..).unwrap_or(&[]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != *tail {
                return Err(TensorError::Dimension {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Applies a [`GatherTable`] to every channel of `a` (`[C, ...]`).
    pub fn gather(&mut self, a: Var, table: Arc<GatherTable<T>>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = shape.first().copied().unwrap_or(0);
        let src: usize = shape.iter().skip(1).product();
        let out_len: usize = table.out_shape.iter().product();
        if src != table.source_len
            || table.index.len() != out_len * table.taps
            || table.weight.len() != out_len * table.taps
        {
            return Err(TensorError::Dimension { op: "gather", left: shape, right: vec![table.source_len] });
        }
        let x = self.value(a).data();
        let mut out = vec![T::zero(); c * out_len];
        if out_len > 0 {
            out.par_chunks_mut(out_len).zip(x.par_chunks(src.max(1))).for_each(|(o, xs)| {
                for (k, ov) in o.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for t in k * table.taps..(k + 1) * table.taps {
                        let w = table.weight[t];
                        if w != T::zero() {
                            acc += w * xs[table.index[t] as usize];
                        }
                    }
                    *ov = acc;
                }
            });
        }
        let mut oshape = vec![c];
        oshape.extend_from_slice(&table.out_shape);
        let value = Tensor::new(oshape, out)?;
        Ok(self.push(value, Op::Gather { input: a, table }, &[a]))
    }

    // ---------------------------------------------------------------- backward

    /// Back-propagates from a single-element `loss`. Gradients of
    /// gradient-tracking leaves accumulate across calls until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        let mut leaves = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                leaves.push((i, g));
                continue;
            }
            for (parent, pg) in self.node_backward(node, &g) {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot => *slot = Some(pg),
                }
            }
        }
        for (i, g) in leaves {
            match self.leaf_grads.get_mut(&i) {
                Some(acc) => acc.add_assign(&g),
                None => {
                    self.leaf_grads.insert(i, g);
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Sums a gradient of `a`'s shape down to the (suffix) shape of `b`.
    fn unbroadcast(&self, g: &[T], b: Var, f: impl Fn(usize, T) -> T) -> Tensor<T> {
        let tb = self.value(b);
        let n = tb.numel().max(1);
        let mut out = vec![T::zero(); tb.numel()];
        for (i, &gv) in g.iter().enumerate() {
            out[i % n] += f(i, gv);
        }
        Tensor::new(tb.shape().to_vec(), out).expect("shape")
    }

    fn like(&self, v: Var, data: Vec<T>) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), data).expect("shape")
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let gd = g.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.wants(*a) {
                    out.push((*a, g.clone()));
                }
                if self.wants(*b) {
                    out.push((*b, self.unbroadcast(gd, *b, |_, v| if neg { -v } else { v })));
                }
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (self.value(*a).data(), self.value(*b).data());
                let n = xb.len().max(1);
                if self.wants(*a) {
                    let d = gd.iter().enumerate().map(|(i, &v)| v * xb[i % n]).collect();
                    out.push((*a, self.like(*a, d)));
                }
                if self.wants(*b) {
                    out.push((*b, self.unbroadcast(gd, *b, |i, v| v * xa[i])));
                }
            }
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::MulScalar(a, s) => out.push((*a, g.map(|v| v * *s))),
            Op::Abs(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&v, &xv)| v * sign(xv)).collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(&v, &xv)| if xv > T::zero() { v } else { T::zero() }).collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let d = gd.iter().zip(y).map(|(&v, &yv)| v * yv * (T::one() - yv)).collect();
                out.push((*a, self.like(*a, d)));
            }
            Op::Conv { input, weight, bias, meta } => {
                if self.wants(*input) {
                    let d = kernels::conv_backward_input(
                        gd,
                        meta.out_ch,
                        meta.out_ext,
                        self.value(*weight).data(),
                        meta.in_ch,
                        meta.in_ext,
                        &meta.geom,
                    );
                    out.push((*input, self.like(*input, d)));
                }
                if self.wants(*weight) {
                    let d = kernels::conv_backward_weight(
                        gd,
                        meta.out_ch,
                        meta.out_ext,
                        self.value(*input).data(),
                        meta.in_ch,
                        meta.in_ext,
                        &meta.geom,
                    );
                    out.push((*weight, self.like(*weight, d)));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let plane: usize = meta.out_ext.iter().product();
                    let d = gd.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    out.push((b, self.like(b, d)));
                }
            }
            Op::ConvTranspose { input, weight, bias, meta } => {
                // Forward was the input-adjoint of a conv from out_ext to in_ext.
                if self.wants(*input) {
                    let d = kernels::conv_forward(
                        gd,
                        meta.out_ch,
                        meta.out_ext,
                        self.value(*weight).data(),
                        meta.in_ch,
                        meta.in_ext,
                        &meta.geom,
                    );
                    out.push((*input, self.like(*input, d)));
                }
                if self.wants(*weight) {
                    let d = kernels::conv_backward_weight(
                        self.value(*input).data(),
                        meta.in_ch,
                        meta.in_ext,
                        gd,
                        meta.out_ch,
                        meta.out_ext,
                        &meta.geom,
                    );
                    out.push((*weight, self.like(*weight, d)));
                }
                if let Some(b) = bias.filter(|b| self.wants(*b)) {
                    let plane: usize = meta.out_ext.iter().product();
                    let d = gd.chunks(plane).map(|c| c.iter().copied().sum()).collect();
                    out.push((b, self.like(b, d)));
                }
            }
            Op::GroupNorm { input, gamma, beta, groups, mean, rstd } => {
                let x = self.value(*input).data();
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let spatial = x.len() / c.max(1);
                let cg = c / groups;
                let glen = spatial * cg;
                let mut dx = vec![T::zero(); x.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for gi in 0..*groups {
                    let (m, r) = (mean[gi], rstd[gi]);
                    let base = gi * glen;
                    let mut s1 = 0.0;
                    let mut s2 = 0.0;
                    for j in 0..glen {
                        let ch = gi * cg + j / spatial;
                        let xhat = (x[base + j].as_f64() - m) * r;
                        let gv = gd[base + j].as_f64();
                        let dy = gv * gm[ch].as_f64();
                        s1 += dy;
                        s2 += dy * xhat;
                        dgamma[ch] += T::lit(gv * xhat);
                        dbeta[ch] += gd[base + j];
                    }
                    let inv = 1.0 / glen as f64;
                    for j in 0..glen {
                        let ch = gi * cg + j / spatial;
                        let xhat = (x[base + j].as_f64() - m) * r;
                        let dy = gd[base + j].as_f64() * gm[ch].as_f64();
                        dx[base + j] = T::lit(r * (dy - s1 * inv - xhat * s2 * inv));
                    }
                }
                if self.wants(*input) {
                    out.push((*input, self.like(*input, dx)));
                }
                if self.wants(*gamma) {
                    out.push((*gamma, self.like(*gamma, dgamma)));
                }
                if self.wants(*beta) {
                    out.push((*beta, self.like(*beta, dbeta)));
                }
            }
            Op::Reduce { input, kind, axis, argmax } => {
                let shape = self.shape(*input);
                let (outer, n, inner) = split_axis(shape, *axis);
                let x = self.value(*input).data();
                let mut d = vec![T::zero(); x.len()];
                match kind {
                    ReduceKind::Max => {
                        for (r, &src) in argmax.iter().enumerate() {
                            d[src] += gd[r];
                        }
                    }
                    _ => {
                        let scale = if *kind == ReduceKind::Mean { T::one() / T::lit(n as f64) } else { T::one() };
                        for o in 0..outer {
                            for j in 0..n {
                                for i in 0..inner {
                                    let src = (o * n + j) * inner + i;
                                    let gv = gd[o * inner + i] * scale;
                                    d[src] = if *kind == ReduceKind::L1Norm { gv * sign(x[src]) } else { gv };
                                }
                            }
                        }
                    }
                }
                out.push((*input, self.like(*input, d)));
            }
            Op::SumAll(a) => {
                let n = self.value(*a).numel();
                out.push((*a, self.like(*a, vec![gd[0]; n])));
            }
            Op::Softmax { input, axis } => {
                let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                let y = node.value.data();
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: T = (0..n).map(|j| gd[idx(j)] * y[idx(j)]).sum();
                        for j in 0..n {
                            d[idx(j)] = y[idx(j)] * (gd[idx(j)] - dot);
                        }
                    }
                }
                out.push((*input, self.like(*input, d)));
            }
            Op::Reshape(a) => {
                out.push((*a, self.like(*a, gd.to_vec())));
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    if self.wants(p) {
                        out.push((p, self.like(p, gd[offset..offset + n].to_vec())));
                    }
                    offset += n;
                }
            }
            Op::Gather { input, table } => {
                let src = table.source_len;
                let out_len: usize = table.out_shape.iter().product();
                let mut d = vec![T::zero(); self.value(*input).numel()];
                if src > 0 && out_len > 0 {
                    d.par_chunks_mut(src).zip(gd.par_chunks(out_len)).for_each(|(di, go)| {
                        for (k, &gv) in go.iter().enumerate() {
                            for t in k * table.taps..(k + 1) * table.taps {
                                let w = table.weight[t];
                                if w != T::zero() {
                                    di[table.index[t] as usize] += w * gv;
                                }
                            }
                        }
                    });
                }
                out.push((*input, self.like(*input, d)));
            }
        }
        out
    }
}
