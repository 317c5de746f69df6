//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Values enter either as
//! constants (never differentiated) or as tracked leaves; every op records the
//! rule needed to push gradients back to its inputs. [`Graph::backward`] walks
//! the tape once in reverse.

use std::collections::BTreeMap;

use super::tensor::{gemm, Layout, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRowBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Embedding(Var, Vec<usize>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    CausalSoftmax(Var),
    LogSoftmax(Var),
    Gelu(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Vec<usize>),
    LogSigmoid(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug)]
pub struct Grads {
    per_node: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
    params: Vec<(usize, String)>,
}

impl Grads {
    /// Gradient of the loss w.r.t. `v`, or `None` if `v` is not tracked.
    pub fn wrt(&self, v: Var) -> Option<Tensor> {
        let (r, c) = self.shapes[v.0];
        self.per_node[v.0].as_ref().map(|g| Tensor::raw(r, c, g.clone()))
    }

    /// Gradients of every named parameter leaf. A parameter inserted more
    /// than once has its contributions summed.
    pub fn into_params(mut self) -> BTreeMap<String, Tensor> {
        let mut out: BTreeMap<String, Tensor> = BTreeMap::new();
        for (idx, name) in std::mem::take(&mut self.params) {
            let (r, c) = self.shapes[idx];
            let g = self.per_node[idx]
                .take()
                .unwrap_or_else(|| vec![0.0; r * c]);
            match out.get_mut(&name) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => {
                    out.insert(name, Tensor::raw(r, c, g));
                }
            }
        }
        out
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub(crate) fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise softmax of `x` (`rows x cols`); entries with `j > i + offset` are
/// masked out when `causal` is set.
pub(crate) fn softmax_rows(x: &[f64], rows: usize, cols: usize, causal: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let lim = causal.map_or(cols, |off| (i + off + 1).min(cols));
        let row = &x[i * cols..i * cols + lim];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[i * cols..i * cols + lim];
        let mut s = 0.0;
        for (d, &v) in o.iter_mut().zip(row) {
            *d = (v - mx).exp();
            s += *d;
        }
        let inv = 1.0 / s;
        o.iter_mut().for_each(|d| *d *= inv);
    }
    out
}

pub(crate) fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        let row = &x[i * cols..(i + 1) * cols];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        for (d, &v) in out[i * cols..(i + 1) * cols].iter_mut().zip(row) {
            *d = v - lse;
        }
    }
    out
}

pub(crate) fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    for j in 0..x.len() {
        out[j] = (x[j] - mean) * inv_std * gain[j] + bias[j];
    }
    inv_std
}

pub(crate) fn gelu_slice(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = gelu(*v));
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

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node {
            value,
            op,
            tracked,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn tracked(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Inserts a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = match t.shape().len() {
            2 => t,
            _ => {
                let (r, c) = t.dims2().expect("constant must be rank 1 or 2");
                Tensor::raw(r, c, t.into_data())
            }
        };
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            tracked: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Inserts a tracked leaf without a parameter name.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let v = self.constant(t);
        self.nodes[v.0].tracked = true;
        v
    }

    /// Inserts a tracked, named parameter. Its gradient is reported under
    /// `name` by [`Grads::into_params`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t.clone());
        self.nodes[v.0].param = Some(name.to_string());
        v
    }

    /// Inserts `t` as a named parameter when `trainable`, otherwise as a constant.
    pub fn maybe_param(&mut self, name: &str, t: &Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(name, t)
        } else {
            self.constant(t.clone())
        }
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        let s = self.nodes[v.0].value.shape();
        (s[0], s[1])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(dim_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            Layout::N,
            self.value(b).data(),
            Layout::N,
            &mut out,
            0.0,
        );
        let t = self.tracked(&[a, b]);
        self.push(Tensor::raw(m, n, out), Op::MatMul(a, b), t, "matmul")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(dim_err(op, self.value(a), self.value(b)));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (r, c) = self.dims(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::raw(r, c, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::Add(a, b), t, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_map(a, b, |x, y| x - y);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::Sub(a, b), t, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let t = self.tracked(&[a, b]);
        self.push(out, Op::Mul(a, b), t, "mul")
    }

    /// Adds a `1 x c` bias to every row of an `r x c` input.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(bias) != (1, c) {
            return Err(dim_err("add_row_bias", self.value(x), self.value(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            row.iter_mut().zip(&b).for_each(|(v, bb)| *v += bb);
        }
        let t = self.tracked(&[x, bias]);
        self.push(Tensor::raw(r, c, data), Op::AddRowBias(x, bias), t, "add_row_bias")
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v * s).collect();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, data), Op::Scale(x, s), t, "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|v| v + s).collect();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, data), Op::AddScalar(x), t, "add_scalar")
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_rows of nothing"));
        }
        let c = self.dims(parts[0]).1;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            if self.dims(p).1 != c {
                return Err(dim_err("concat_rows", self.value(parts[0]), self.value(p)));
            }
            rows += self.dims(p).0;
            data.extend_from_slice(self.value(p).data());
        }
        let t = self.tracked(parts);
        self.push(Tensor::raw(rows, c, data), Op::ConcatRows(parts.to_vec()), t, "concat_rows")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols of nothing"));
        }
        let r = self.dims(parts[0]).0;
        let mut cols = 0;
        for &p in parts {
            if self.dims(p).0 != r {
                return Err(dim_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            cols += self.dims(p).1;
        }
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let t = self.tracked(parts);
        self.push(Tensor::raw(r, cols, data), Op::ConcatCols(parts.to_vec()), t, "concat_cols")
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > r {
            return Err(Error::Dimension {
                op: "slice_rows",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(len, c, data), Op::SliceRows(x, start), t, "slice_rows")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if start + len > c {
            return Err(Error::Dimension {
                op: "slice_cols",
                left: vec![r, c],
                right: vec![start, len],
            });
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src.row(i)[start..start + len]);
        }
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, len, data), Op::SliceCols(x, start), t, "slice_cols")
    }

    /// Gathers rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.dims(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Dimension {
                op: "embedding",
                left: vec![v, d],
                right: vec![bad],
            });
        }
        let src = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(src.row(i));
        }
        let t = self.tracked(&[table]);
        self.push(
            Tensor::raw(ids.len(), d, data),
            Op::Embedding(table, ids.to_vec()),
            t,
            "embedding",
        )
    }

    /// Per-row layer normalisation with `1 x c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(gain) != (1, c) || self.dims(bias) != (1, c) {
            return Err(dim_err("layer_norm", self.value(x), self.value(gain)));
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut out = vec![0.0; r * c];
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let s = layer_norm_row(row, g, b, &mut out[i * c..(i + 1) * c]);
            let mean = row.iter().sum::<f64>() / c as f64;
            for j in 0..c {
                xhat[i * c + j] = (row[j] - mean) * s;
            }
            inv_std[i] = s;
        }
        let t = self.tracked(&[x, gain, bias]);
        self.push(
            Tensor::raw(r, c, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            t,
            "layer_norm",
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = softmax_rows(self.value(x).data(), r, c, None);
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, out), Op::Softmax(x), t, "softmax")
    }

    /// Softmax with entries above the diagonal masked to zero probability.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = softmax_rows(self.value(x).data(), r, c, Some(0));
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, out), Op::CausalSoftmax(x), t, "causal_softmax")
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let out = log_softmax_rows(self.value(x).data(), r, c);
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, out), Op::LogSoftmax(x), t, "log_softmax")
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, data), Op::Gelu(x), t, "gelu")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(c, r, data), Op::Transpose(x), t, "transpose")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), t, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        if n == 0 {
            return Err(Error::contract("mean of empty tensor"));
        }
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let t = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), t, "mean")
    }

    /// Picks column `idx[i]` from row `i`, giving an `r x 1` result.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if idx.len() != r || idx.iter().any(|&j| j >= c) {
            return Err(Error::Dimension {
                op: "gather",
                left: vec![r, c],
                right: vec![idx.len()],
            });
        }
        let src = self.value(x);
        let data = idx.iter().enumerate().map(|(i, &j)| src.get(i, j)).collect();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, 1, data), Op::Gather(x, idx.to_vec()), t, "gather")
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let data = self.value(x).data().iter().map(|&v| log_sigmoid(v)).collect();
        let t = self.tracked(&[x]);
        self.push(Tensor::raw(r, c, data), Op::LogSigmoid(x), t, "log_sigmoid")
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty graph"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].tracked {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| (n.value.shape()[0], n.value.shape()[1])).collect();
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.clone().map(|p| (i, p)))
            .collect();
        Ok(Grads {
            per_node: grads,
            shapes,
            params,
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].tracked {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    gemm(m, n, k, g, Layout::N, bv, Layout::T, ga, 1.0);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm(k, m, n, av, Layout::T, g, Layout::N, gb, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(ga) = self.acc(grads, *v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::AddRowBias(x, b) => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(p, q)| *p += q);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += s * q);
                }
            }
            Op::AddScalar(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(p, q)| *p += q);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                let mut col = 0;
                for p in parts {
                    let pc = self.dims(*p).1;
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..r {
                            for j in 0..pc {
                                gp[i * pc + j] += g[i * c + col + j];
                            }
                        }
                    }
                    col += pc;
                }
            }
            Op::SliceRows(x, start) => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::SliceCols(x, start) => {
                let c = self.dims(*x).1;
                let (r, len) = (out.shape()[0], out.shape()[1]);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::Embedding(table, ids) => {
                let d = self.dims(*table).1;
                if let Some(gt) = self.acc(grads, *table) {
                    for (row, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[row * d + j];
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (r, c) = self.dims(*x);
                let gv = self.value(*gain).data();
                if let Some(gg) = self.acc(grads, *gain) {
                    for i in 0..r * c {
                        gg[i % c] += g[i] * xhat[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *bias) {
                    for i in 0..r * c {
                        gb[i % c] += g[i];
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let n = c as f64;
                    for i in 0..r {
                        let row = i * c..(i + 1) * c;
                        let dxhat: Vec<f64> = g[row.clone()]
                            .iter()
                            .zip(gv)
                            .map(|(a, b)| a * b)
                            .collect();
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xhat[row.clone()])
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / n;
                        for j in 0..c {
                            gx[i * c + j] +=
                                inv_std[i] * (dxhat[j] - mean_d - xhat[i * c + j] * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                let c = out.shape()[1];
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, yrow) in y.chunks(c).enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = out.shape()[1];
                let y = out.data();
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, yrow) in y.chunks(c).enumerate() {
                        let grow = &g[i * c..(i + 1) * c];
                        let s: f64 = grow.iter().sum();
                        for j in 0..c {
                            gx[i * c + j] += grow[j] - yrow[j].exp() * s;
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.dims(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|v| *v += g[0] / n);
                }
            }
            Op::Gather(x, idx) => {
                let c = self.dims(*x).1;
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &j) in idx.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                }
            }
            Op::LogSigmoid(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * sigmoid(-xv[i]);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite-difference check of `build` w.r.t. every input entry.
    fn check_grad(inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Var) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss).unwrap();
        let h = 1e-5;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[k]).unwrap();
            for i in 0..t.len() {
                let eval = |delta: f64| {
                    let mut ins = inputs.clone();
                    ins[k].data_mut()[i] += delta;
                    let mut g2 = Graph::new();
                    let vs: Vec<Var> = ins.into_iter().map(|t| g2.constant(t)).collect();
                    let l = build(&mut g2, &vs);
                    g2.scalar_value(l).unwrap()
                };
                let numeric = (eval(h) - eval(-h)) / (2.0 * h);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / numeric.abs().max(1.0);
                assert!(rel < 1e-4, "input {k}[{i}]: analytic {a} vs numeric {numeric}");
            }
        }
    }

    /// Weighted sum with fixed pseudo-random weights so every output entry
    /// contributes a distinct gradient.
    fn weighted_sum(g: &mut Graph, x: Var) -> Var {
        let t = g.value(x).clone();
        let w: Vec<f64> = (0..t.len()).map(|i| ((i * 7 + 3) % 11) as f64 / 5.0 - 1.0).collect();
        let wv = g.constant(Tensor::raw(t.shape()[0], t.shape()[1], w));
        let p = g.mul(x, wv).unwrap();
        g.sum(p).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let s = g.sum(x).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let gr = g.backward(s).unwrap();
        assert_eq!(gr.wrt(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, 3, 5);
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let xv = g.constant(x.clone());
        let y = g.matmul(i, xv).unwrap();
        assert_eq!(g.value(y), &x);
        let bad = g.constant(Tensor::zeros(4, 2));
        match g.matmul(xv, bad) {
            Err(Error::Dimension { left, right, .. }) => {
                assert_eq!(left, vec![3, 5]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, 6, 9));
        let s = g.softmax(x).unwrap();
        let ls = g.log_softmax(x).unwrap();
        for i in 0..6 {
            let row = g.value(s).row(i);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..9 {
                assert!((row[j].ln() - g.value(ls).get(i, j)).abs() < 1e-10);
            }
        }
        let c = g.causal_softmax(x).unwrap();
        for i in 0..6 {
            assert!((g.value(c).row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(g.value(c).row(i)[i + 1..].iter().all(|&p| p == 0.0));
        }
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = rand_tensor(&mut rng, 3, 4);
        let b = rand_tensor(&mut rng, 4, 2);
        let c = rand_tensor(&mut rng, 3, 4);
        let bias = rand_tensor(&mut rng, 1, 4);
        check_grad(vec![a.clone(), b.clone()], |g, v| {
            let y = g.matmul(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone(), c.clone()], |g, v| {
            let s = g.add(v[0], v[1]).unwrap();
            let d = g.sub(s, v[1]).unwrap();
            let m = g.mul(d, v[1]).unwrap();
            let m = g.scale(m, 1.7).unwrap();
            let m = g.add_scalar(m, 0.3).unwrap();
            weighted_sum(g, m)
        });
        check_grad(vec![a.clone(), bias.clone()], |g, v| {
            let y = g.add_row_bias(v[0], v[1]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone(), c.clone()], |g, v| {
            let y = g.concat_rows(&[v[0], v[1]]).unwrap();
            let z = g.concat_cols(&[y, y]).unwrap();
            let s = g.slice_rows(z, 1, 4).unwrap();
            let s = g.slice_cols(s, 2, 5).unwrap();
            weighted_sum(g, s)
        });
        check_grad(vec![a.clone()], |g, v| {
            let e = g.embedding(v[0], &[2, 0, 2, 1]).unwrap();
            weighted_sum(g, e)
        });
        let gain = rand_tensor(&mut rng, 1, 4);
        check_grad(vec![a.clone(), gain, bias.clone()], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone()], |g, v| {
            let y = g.softmax(v[0]).unwrap();
            weighted_sum(g, y)
        });
        let sq = rand_tensor(&mut rng, 4, 4);
        check_grad(vec![sq], |g, v| {
            let y = g.causal_softmax(v[0]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone()], |g, v| {
            let y = g.log_softmax(v[0]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone()], |g, v| {
            let y = g.gelu(v[0]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone()], |g, v| {
            let y = g.transpose(v[0]).unwrap();
            weighted_sum(g, y)
        });
        check_grad(vec![a.clone()], |g, v| {
            let y = g.gather(v[0], &[3, 0, 1]).unwrap();
            let y = g.log_sigmoid(y).unwrap();
            let m = g.mean(y).unwrap();
            g.scale(m, 2.0).unwrap()
        });
    }

    #[test]
    fn two_layer_net_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(&mut rng, 5, 3);
        let w1 = rand_tensor(&mut rng, 3, 8);
        let b1 = rand_tensor(&mut rng, 1, 8);
        let w2 = rand_tensor(&mut rng, 8, 4);
        check_grad(vec![w1, b1, w2], |g, v| {
            let xv = g.constant(x.clone());
            let h = g.matmul(xv, v[0]).unwrap();
            let h = g.add_row_bias(h, v[1]).unwrap();
            let h = g.gelu(h).unwrap();
            let o = g.matmul(h, v[2]).unwrap();
            let lp = g.log_softmax(o).unwrap();
            let picked = g.gather(lp, &[0, 1, 2, 3, 0]).unwrap();
            let m = g.mean(picked).unwrap();
            g.scale(m, -1.0).unwrap()
        });
    }

    #[test]
    fn named_params_accumulate() {
        let w = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        let mut g = Graph::new();
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        let s = g.add(a, b).unwrap();
        let l = g.sum(s).unwrap();
        let p = g.backward(l).unwrap().into_params();
        assert_eq!(p["w"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(1e300));
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite("mul"))));
    }

    #[test]
    fn log_sigmoid_stable() {
        assert!((log_sigmoid(0.0) + std::f64::consts::LN_2).abs() < 1e-15);
        assert!(log_sigmoid(-800.0).is_finite());
        assert!(log_sigmoid(800.0).abs() < 1e-300);
    }
}
