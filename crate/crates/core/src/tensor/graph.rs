use std::fmt;
use std::sync::Arc;

use super::conv;
use super::params::{Gradients, ParameterSet};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// An operation defined outside this module.
///
/// `backward` must build its result out of graph operations so that the
/// returned gradients are themselves differentiable.
pub trait CustomOp: fmt::Debug + Send + Sync {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// One entry per input. Entries whose `needs` flag is false may be `None`.
    fn backward(
        &self,
        graph: &mut Graph,
        inputs: &[Var],
        output: Var,
        grad: Var,
        needs: &[bool],
    ) -> Result<Vec<Option<Var>>>;
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Pow(Var, f64),
    Tanh(Var),
    /// `x * (reference > 0 ? 1 : slope)`; the mask is piecewise constant in `reference`.
    MaskMul {
        x: Var,
        reference: Var,
        slope: f64,
    },
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    ReduceSum {
        x: Var,
    },
    Broadcast {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Pad {
        x: Var,
        axis: usize,
        start: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvInputGrad {
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
    },
    ConvWeightGrad {
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
    },
    SelectMax {
        x: Var,
        reference: Var,
        axis: usize,
    },
    ScatterMax {
        g: Var,
        reference: Var,
        axis: usize,
    },
    Custom {
        op: Arc<dyn CustomOp>,
        inputs: Vec<Var>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Pow(..) => "pow",
            Op::Tanh(..) => "tanh",
            Op::MaskMul { .. } => "mask_mul",
            Op::MatMul { .. } => "matmul",
            Op::ReduceSum { .. } => "reduce_sum",
            Op::Broadcast { .. } => "broadcast",
            Op::Reshape { .. } => "reshape",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::SelectMax { .. } => "select_max",
            Op::ScatterMax { .. } => "scatter_max",
            Op::Custom { op, .. } => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::AddScalar(x) | Op::Pow(x, _) | Op::Tanh(x) => vec![*x],
            Op::MaskMul { x, reference, .. } => vec![*x, *reference],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::ReduceSum { x }
            | Op::Broadcast { x }
            | Op::Reshape { x }
            | Op::Slice { x, .. }
            | Op::Pad { x, .. } => vec![*x],
            Op::Concat { xs, .. } => xs.clone(),
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::ConvInputGrad { g, w, .. } => vec![*g, *w],
            Op::ConvWeightGrad { x, g, .. } => vec![*x, *g],
            Op::SelectMax { x, reference, .. } => vec![*x, *reference],
            Op::ScatterMax { g, reference, .. } => vec![*g, *reference],
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Clone)]
struct Binding {
    set_id: u64,
    version: u64,
    name: String,
    var: Var,
}

/// Eagerly evaluated computation record.
///
/// Values are computed as nodes are added, so the graph doubles as the
/// activation cache for [`Graph::grad`]. Nodes only ever reference earlier
/// nodes, which keeps the record acyclic and topologically ordered.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<Binding>,
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Sum over `axes`, keeping them as size-1 dimensions.
fn reduce_sum(x: &Tensor, axes: &[usize]) -> Tensor {
    let mut out_shape = x.shape().to_vec();
    for &a in axes {
        out_shape[a] = 1;
    }
    let out_strides = strides(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let shape = x.shape();
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let mut o = 0usize;
    let eff: Vec<usize> = (0..nd)
        .map(|d| if axes.contains(&d) { 0 } else { out_strides[d] })
        .collect();
    for &v in x.data() {
        out.data_mut()[o] += v;
        for d in (0..nd).rev() {
            idx[d] += 1;
            o += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            o -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_to(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let xs = x.shape();
    if xs.len() != shape.len() || xs.iter().zip(shape).any(|(&a, &b)| a != b && a != 1) {
        return Err(Error::shape(
            "broadcast",
            format!("cannot broadcast {xs:?} to {shape:?}"),
        ));
    }
    let in_strides = strides(xs);
    let nd = shape.len();
    let eff: Vec<usize> = (0..nd)
        .map(|d| if xs[d] == 1 { 0 } else { in_strides[d] })
        .collect();
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; nd];
    let mut i = 0usize;
    for _ in 0..n {
        data.push(x.data()[i]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            i += eff[d];
            if idx[d] < shape[d] {
                break;
            }
            i -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    Tensor::new(shape.to_vec(), data)
}

fn argmax_along(reference: &Tensor, axis: usize) -> Vec<usize> {
    let (outer, len, inner) = split_axis(reference.shape(), axis);
    let r = reference.data();
    let mut out = Vec::with_capacity(outer * inner);
    for o in 0..outer {
        for i in 0..inner {
            let mut best = 0;
            let mut best_v = r[o * len * inner + i];
            for k in 1..len {
                let v = r[(o * len + k) * inner + i];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    out
}

fn matmul_dims(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> Result<(usize, usize, usize)> {
    let (&[ar, ac], &[br, bc]) = (a.shape(), b.shape()) else {
        return Err(Error::shape(
            "matmul",
            format!("expected 2-D operands, got {:?} and {:?}", a.shape(), b.shape()),
        ));
    };
    let (m, k1) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k1 != k2 {
        return Err(Error::shape(
            "matmul",
            format!(
                "inner dimensions differ: {:?}{} x {:?}{}",
                a.shape(),
                if ta { "^T" } else { "" },
                b.shape(),
                if tb { "^T" } else { "" }
            ),
        ));
    }
    Ok((m, k1, n))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// A leaf node. Inputs and constants only differ in whether a caller
    /// later asks for gradients with respect to them.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.push(Op::Leaf, t)
    }

    /// Binds a named parameter as a leaf, once per graph.
    pub fn param(&mut self, params: &ParameterSet, name: &str) -> Result<Var> {
        if let Some(b) = self
            .bindings
            .iter()
            .find(|b| b.set_id == params.id() && b.name == name)
        {
            return Ok(b.var);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?
            .clone();
        let var = self.push(Op::Leaf, t);
        self.bindings.push(Binding {
            set_id: params.id(),
            version: params.version(),
            name: name.to_string(),
            var,
        });
        Ok(var)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), t)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push(Op::AddScalar(x), t)
    }

    pub fn pow(&mut self, x: Var, p: f64) -> Var {
        let t = self.value(x).map(|v| v.powf(p));
        self.push(Op::Pow(x, p), t)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.pow(x, 2.0)
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.pow(x, 0.5)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), t)
    }

    pub fn mask_mul(&mut self, x: Var, reference: Var, slope: f64) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(reference));
        same_shape("mask_mul", tx, tr)?;
        let data = tx
            .data()
            .iter()
            .zip(tr.data())
            .map(|(&v, &r)| if r > 0.0 { v } else { slope * v })
            .collect();
        let t = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(Op::MaskMul { x, reference, slope }, t))
    }

    /// `max(x, 0) + slope * min(x, 0)`; the derivative at exactly 0 is `slope`.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.mask_mul(x, x, slope).expect("operand shapes agree")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `op(a) · op(b)` where `op` optionally transposes a 2-D operand.
    pub fn matmul(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (tva, tvb) = (self.value(a), self.value(b));
        let (m, k, n) = matmul_dims(tva, tvb, ta, tb)?;
        let (ac, bc) = (tva.shape()[1], tvb.shape()[1]);
        let sa = if ta { (1, ac) } else { (ac, 1) };
        let sb = if tb { (1, bc) } else { (bc, 1) };
        let mut out = vec![0.0; m * n];
        conv::gemm(m, k, n, tva.data(), sa, tvb.data(), sb, 0.0, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(Op::MatMul { a, b, ta, tb }, t))
    }

    /// `x · wᵀ + b` for `x: [N, I]`, `w: [O, I]`, `b: [O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w, false, true)?;
        let out = self.shape(y).to_vec();
        let b_len = self.value(b).len();
        let b2 = self.reshape(b, &[1, b_len])?;
        let bb = self.broadcast(b2, &out)?;
        self.add(y, bb)
    }

    pub fn reduce_sum(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let nd = self.shape(x).len();
        if axes.iter().any(|&a| a >= nd) {
            return Err(Error::shape(
                "reduce_sum",
                format!("axes {axes:?} out of range for rank {nd}"),
            ));
        }
        let t = reduce_sum(self.value(x), axes);
        Ok(self.push(
            Op::ReduceSum { x },
            t,
        ))
    }

    /// Sum of all entries as a `[1]` tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        let axes: Vec<usize> = (0..nd).collect();
        let s = self.reduce_sum(x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x)?;
        Ok(self.scale(s, 1.0 / n))
    }

    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = broadcast_to(self.value(x), shape)?;
        Ok(self.push(Op::Broadcast { x }, t))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::shape("concat", "no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} incompatible with {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let t = self.value(x);
                let len = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            t,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice { x, axis, start }, t))
    }

    /// Zero-pads `x` along `axis` so it occupies `[start, start + len)` of `total`.
    pub fn pad(&mut self, x: Var, axis: usize, start: usize, total: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + s[axis] > total {
            return Err(Error::shape(
                "pad",
                format!("{s:?} at {start} into {total} on axis {axis}"),
            ));
        }
        let (outer, len, inner) = split_axis(&s, axis);
        let mut shape = s;
        shape[axis] = total;
        let mut out = Tensor::zeros(&shape);
        let src = self.value(x).data();
        for o in 0..outer {
            let dst = (o * total + start) * inner;
            out.data_mut()[dst..dst + len * inner]
                .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
        }
        Ok(self.push(Op::Pad { x, axis, start }, out))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let t = conv::conv2d(self.value(x), self.value(w), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, stride, pad }, t))
    }

    fn conv2d_input_grad(
        &mut self,
        g: Var,
        w: Var,
        stride: usize,
        pad: usize,
        in_hw: (usize, usize),
    ) -> Result<Var> {
        let t = conv::conv2d_input_grad(self.value(g), self.value(w), stride, pad, in_hw)?;
        Ok(self.push(Op::ConvInputGrad { g, w, stride, pad }, t))
    }

    fn conv2d_weight_grad(
        &mut self,
        x: Var,
        g: Var,
        stride: usize,
        pad: usize,
        k: usize,
    ) -> Result<Var> {
        let t = conv::conv2d_weight_grad(self.value(x), self.value(g), stride, pad, k)?;
        Ok(self.push(Op::ConvWeightGrad { x, g, stride, pad }, t))
    }

    /// Adds a per-channel bias `b: [C]` to an NCHW tensor.
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = self.value(b).len();
        if s.len() != 4 || s[1] != c {
            return Err(Error::shape(
                "add_channel_bias",
                format!("bias of {c} for input {s:?}"),
            ));
        }
        let b4 = self.reshape(b, &[1, c, 1, 1])?;
        let bb = self.broadcast(b4, &s)?;
        self.add(x, bb)
    }

    /// Mean over the spatial axes of an NCHW tensor, giving `[N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::shape("global_avg_pool", format!("{s:?}")));
        }
        let r = self.reduce_sum(x, &[2, 3])?;
        let r = self.scale(r, 1.0 / (s[2] * s[3]) as f64);
        self.reshape(r, &[s[0], s[1]])
    }

    /// Picks, along `axis`, the entry of `x` at the position where
    /// `reference` is largest (first occurrence on ties).
    pub fn select_max(&mut self, x: Var, reference: Var, axis: usize) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(reference));
        same_shape("select_max", tx, tr)?;
        if axis >= tx.shape().len() {
            return Err(Error::shape("select_max", format!("axis {axis}")));
        }
        let (outer, len, inner) = split_axis(tx.shape(), axis);
        let arg = argmax_along(tr, axis);
        let mut data = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                data.push(tx.data()[(o * len + arg[o * inner + i]) * inner + i]);
            }
        }
        let mut shape = tx.shape().to_vec();
        shape[axis] = 1;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(Op::SelectMax { x, reference, axis }, t))
    }

    pub fn max_along(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.select_max(x, x, axis)
    }

    fn scatter_max(&mut self, g: Var, reference: Var, axis: usize) -> Result<Var> {
        let (tg, tr) = (self.value(g), self.value(reference));
        let (outer, len, inner) = split_axis(tr.shape(), axis);
        if tg.len() != outer * inner {
            return Err(Error::shape(
                "scatter_max",
                format!("{:?} into {:?}", tg.shape(), tr.shape()),
            ));
        }
        let arg = argmax_along(tr, axis);
        let mut out = Tensor::zeros(tr.shape());
        for o in 0..outer {
            for i in 0..inner {
                out.data_mut()[(o * len + arg[o * inner + i]) * inner + i] =
                    tg.data()[o * inner + i];
            }
        }
        Ok(self.push(Op::ScatterMax { g, reference, axis }, out))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let t = op.forward(&vals)?;
        Ok(self.push(
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            t,
        ))
    }

    fn ones_like(&mut self, v: Var) -> Var {
        let t = Tensor::full(self.shape(v), 1.0);
        self.constant(t)
    }

    /// Gradients of a one-element `output` with respect to `wrt`.
    pub fn grad(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape(
                "grad",
                format!(
                    "output must have one element, has shape {:?}",
                    self.shape(output)
                ),
            ));
        }
        let seed = self.ones_like(output);
        self.backprop(output, seed, wrt)
    }

    /// Vector-Jacobian product: pulls `seed` (shaped like `output`) back to `wrt`.
    ///
    /// The returned gradients are ordinary graph nodes and can be
    /// differentiated again.
    pub fn backprop(&mut self, output: Var, seed: Var, wrt: &[Var]) -> Result<Vec<Var>> {
        if self.shape(seed) != self.shape(output) {
            return Err(Error::shape(
                "backprop",
                format!(
                    "seed {:?} vs output {:?}",
                    self.shape(seed),
                    self.shape(output)
                ),
            ));
        }
        let last = output.0;
        let mut depends = vec![false; last + 1];
        for &w in wrt {
            if w.0 <= last {
                depends[w.0] = true;
            }
        }
        for i in 0..=last {
            if !depends[i] && self.nodes[i].op.inputs().iter().any(|v| depends[v.0]) {
                depends[i] = true;
            }
        }
        let mut acc: Vec<Option<Var>> = vec![None; last + 1];
        acc[last] = Some(seed);
        for i in (0..=last).rev() {
            if !depends[i] {
                continue;
            }
            let Some(g) = acc[i] else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let inputs = self.nodes[i].op.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| depends[v.0]).collect();
            if !needs.iter().any(|&n| n) {
                continue;
            }
            let grads = self.backward_node(Var(i), g, &needs)?;
            for ((v, gv), need) in inputs.into_iter().zip(grads).zip(needs) {
                if let (true, Some(gv)) = (need, gv) {
                    if self.shape(gv) != self.shape(v) {
                        return Err(Error::shape(
                            self.nodes[i].op.name(),
                            format!(
                                "backward produced {:?} for input {:?}",
                                self.shape(gv),
                                self.shape(v)
                            ),
                        ));
                    }
                    acc[v.0] = Some(match acc[v.0] {
                        Some(prev) => self.add(prev, gv)?,
                        None => gv,
                    });
                }
            }
        }
        Ok(wrt
            .iter()
            .map(|&w| match acc.get(w.0).copied().flatten() {
                Some(g) => g,
                None => {
                    let t = Tensor::zeros(self.shape(w));
                    self.constant(t)
                }
            })
            .collect())
    }

    fn backward_node(&mut self, node: Var, g: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[node.0].op.clone();
        let need = |i: usize| needs[i];
        Ok(match op {
            Op::Leaf => vec![],
            Op::Add(_, _) => vec![Some(g), Some(g)],
            Op::Sub(_, _) => {
                let nb = if need(1) { Some(self.neg(g)) } else { None };
                vec![Some(g), nb]
            }
            Op::Mul(a, b) => {
                let ga = if need(0) { Some(self.mul(g, b)?) } else { None };
                let gb = if need(1) { Some(self.mul(g, a)?) } else { None };
                vec![ga, gb]
            }
            Op::Scale(_, c) => vec![Some(self.scale(g, c))],
            Op::AddScalar(..) => vec![Some(g)],
            Op::Pow(x, p) => {
                let d = self.pow(x, p - 1.0);
                let d = self.scale(d, p);
                vec![Some(self.mul(g, d)?)]
            }
            Op::Tanh(_) => {
                let y2 = self.square(node);
                let one_minus = self.scale(y2, -1.0);
                let one_minus = self.add_scalar(one_minus, 1.0);
                vec![Some(self.mul(g, one_minus)?)]
            }
            Op::MaskMul {
                reference, slope, ..
            } => vec![Some(self.mask_mul(g, reference, slope)?), None],
            Op::MatMul { a, b, ta, tb } => {
                let ga = if need(0) {
                    Some(if ta {
                        self.matmul(b, g, tb, true)?
                    } else {
                        self.matmul(g, b, false, !tb)?
                    })
                } else {
                    None
                };
                let gb = if need(1) {
                    Some(if tb {
                        self.matmul(g, a, true, ta)?
                    } else {
                        self.matmul(a, g, !ta, false)?
                    })
                } else {
                    None
                };
                vec![ga, gb]
            }
            Op::ReduceSum { x } => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.broadcast(g, &shape)?)]
            }
            Op::Broadcast { x } => {
                let xs = self.shape(x).to_vec();
                let ys = self.shape(node).to_vec();
                let axes: Vec<usize> = (0..xs.len()).filter(|&d| xs[d] != ys[d]).collect();
                let r = if axes.is_empty() {
                    g
                } else {
                    self.reduce_sum(g, &axes)?
                };
                vec![Some(r)]
            }
            Op::Reshape { x } => {
                let shape = self.shape(x).to_vec();
                vec![Some(self.reshape(g, &shape)?)]
            }
            Op::Concat { xs, axis } => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for (i, &x) in xs.iter().enumerate() {
                    let len = self.shape(x)[axis];
                    out.push(if need(i) {
                        Some(self.slice(g, axis, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                out
            }
            Op::Slice { x, axis, start } => {
                let total = self.shape(x)[axis];
                vec![Some(self.pad(g, axis, start, total)?)]
            }
            Op::Pad { x, axis, start } => {
                let len = self.shape(x)[axis];
                vec![Some(self.slice(g, axis, start, len)?)]
            }
            Op::Conv2d { x, w, stride, pad } => {
                let gx = if need(0) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    Some(self.conv2d_input_grad(g, w, stride, pad, hw)?)
                } else {
                    None
                };
                let gw = if need(1) {
                    let k = self.shape(w)[2];
                    Some(self.conv2d_weight_grad(x, g, stride, pad, k)?)
                } else {
                    None
                };
                vec![gx, gw]
            }
            Op::ConvInputGrad {
                g: upstream,
                w,
                stride,
                pad,
            } => {
                let gg = if need(0) {
                    Some(self.conv2d(g, w, stride, pad)?)
                } else {
                    None
                };
                let gw = if need(1) {
                    let k = self.shape(w)[2];
                    Some(self.conv2d_weight_grad(g, upstream, stride, pad, k)?)
                } else {
                    None
                };
                vec![gg, gw]
            }
            Op::ConvWeightGrad {
                x,
                g: upstream,
                stride,
                pad,
            } => {
                let gx = if need(0) {
                    let s = self.shape(x);
                    let hw = (s[2], s[3]);
                    Some(self.conv2d_input_grad(upstream, g, stride, pad, hw)?)
                } else {
                    None
                };
                let gu = if need(1) {
                    Some(self.conv2d(x, g, stride, pad)?)
                } else {
                    None
                };
                vec![gx, gu]
            }
            Op::SelectMax {
                reference, axis, ..
            } => vec![Some(self.scatter_max(g, reference, axis)?), None],
            Op::ScatterMax {
                reference, axis, ..
            } => vec![Some(self.select_max(g, reference, axis)?), None],
            Op::Custom { op, inputs } => op.backward(self, &inputs, node, g, needs)?,
        })
    }

    /// Gradients of `loss` with respect to every parameter of `params`.
    ///
    /// Parameters never bound into this graph get zero gradients. Fails with
    /// [`Error::StaleCache`] if `params` was updated after binding.
    pub fn param_grads(&mut self, loss: Var, params: &ParameterSet) -> Result<Gradients> {
        let bound: Vec<Binding> = self
            .bindings
            .iter()
            .filter(|b| b.set_id == params.id())
            .cloned()
            .collect();
        if let Some(b) = bound.iter().find(|b| b.version != params.version()) {
            return Err(Error::StaleCache(format!(
                "`{}` bound at version {}, parameters now at {}",
                b.name,
                b.version,
                params.version()
            )));
        }
        let vars: Vec<Var> = bound.iter().map(|b| b.var).collect();
        let gvars = self.grad(loss, &vars)?;
        let mut grads = Gradients::zeros_like(params);
        for (b, gv) in bound.iter().zip(gvars) {
            grads.set(&b.name, self.value(gv).clone())?;
        }
        Ok(grads)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three_has_slope_six() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let d = g.grad(y, &[x]).unwrap();
        assert_eq!(g.value(d[0]).item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(2.0));
        let y = g.pow(x, 3.0);
        let d1 = g.grad(y, &[x]).unwrap()[0];
        assert!((g.value(d1).item() - 12.0).abs() < 1e-12);
        let d2 = g.grad(d1, &[x]).unwrap()[0];
        assert!((g.value(d2).item() - 12.0).abs() < 1e-12);
    }

    #[test]
    fn identity_linear_layer_passes_input_through() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 2], vec![0.3, -1.7]).unwrap());
        let w = g.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let b = g.constant(Tensor::zeros(&[2]));
        let y = g.linear(x, w, b).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -1.7]);
    }

    #[test]
    fn one_by_one_identity_conv_is_identity() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_fn(&[2, 3, 4, 5], |i| i as f64 * 0.1 - 2.0));
        let w = g.constant(Tensor::from_fn(&[3, 3, 1, 1], |i| {
            if i / 3 == i % 3 {
                1.0
            } else {
                0.0
            }
        }));
        let y = g.conv2d(x, w, 1, 0).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn unreachable_inputs_get_zero_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(1.0));
        let z = g.input(Tensor::full(&[3], 2.0));
        let y = g.scale(x, 4.0);
        let d = g.grad(y, &[x, z]).unwrap();
        assert_eq!(g.value(d[0]).item(), 4.0);
        assert_eq!(g.value(d[1]).data(), &[0.0; 3]);
    }

    #[test]
    fn concat_slice_round_trip() {
        let mut g = Graph::new();
        let a = g.input(Tensor::from_fn(&[2, 1, 3], |i| i as f64));
        let b = g.input(Tensor::from_fn(&[2, 2, 3], |i| 10.0 + i as f64));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 3, 3]);
        let back = g.slice(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(back), g.value(b));
    }

    #[test]
    fn shape_mismatch_names_the_op() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2]));
        let b = g.input(Tensor::zeros(&[3]));
        let err = g.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
    }

    #[test]
    fn max_along_routes_gradient_to_argmax() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(vec![1, 3, 2], vec![1.0, 5.0, 4.0, 2.0, 3.0, 0.0]).unwrap());
        let m = g.max_along(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0]);
        let s = g.sum_all(m).unwrap();
        let d = g.grad(s, &[x]).unwrap()[0];
        assert_eq!(g.value(d).data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }
}
