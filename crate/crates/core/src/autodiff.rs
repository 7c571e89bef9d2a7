//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node to a [`Tape`]; `backward` walks the
//! nodes in exact reverse recording order, so inputs always precede the
//! nodes that consume them. Trainable values enter the tape through
//! [`Tape::param`] and their gradients are accumulated back into the
//! owning [`ParamStore`].

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// No padding; output length is `L - K + 1`.
    Valid,
    /// Zero padding that keeps the output length equal to `L`.
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Window {
    Global,
    Size(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sqrt(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    TransposeLast2(Var),
    IndexSelect {
        x: Var,
        axis: usize,
        index: Vec<usize>,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        pad_left: usize,
    },
    MaxPool {
        x: Var,
        window: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        window: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SelectPerRow {
        x: Var,
        index: Vec<usize>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Single-owner recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_cache: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    strides(shape)
        .into_iter()
        .zip(shape.iter().zip(out))
        .map(|(s, (&d, &o))| if d == 1 && o != 1 { 0 } else { s })
        .collect()
}

fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..numel(out) {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// (outer, len, inner) sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

fn add_into(buf: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    buf.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
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

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("internal shape arithmetic")
    }

    /// Records an input value. Gradients are tracked when the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut t = t;
        t.zero_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let t = t.with_requires_grad(false);
        self.push(t, Op::Leaf, false)
    }

    /// Records a trainable parameter; repeated requests for the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_cache.get(&id) {
            return v;
        }
        let src = store.get(id);
        let t = Self::tensor(src.shape().to_vec(), src.data().to_vec());
        let v = self.push(t, Op::Param(id), true);
        self.param_cache.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.data(a), self.data(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::tensor(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    /// Batched product of `[B, m, k]` and `[B, k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Shape {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(bs * m * n);
        for i in 0..bs {
            out.extend(matmul_raw(
                &da[i * m * k..(i + 1) * m * k],
                &db[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
            ));
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::tensor(vec![bs, m, n], out), Op::BatchMatMul(a, b), rg))
    }

    fn broadcast(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Vec<usize>, Vec<f64>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || Error::Shape {
            op,
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != sb.len() {
            return Err(bad());
        }
        let mut out_shape = Vec::with_capacity(sa.len());
        for (&x, &y) in sa.iter().zip(&sb) {
            out_shape.push(match (x, y) {
                _ if x == y => x,
                (1, _) => y,
                (_, 1) => x,
                _ => return Err(bad()),
            });
        }
        let (da, db) = (self.data(a), self.data(b));
        if sa == sb {
            return Ok((out_shape, da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()));
        }
        let mut out = vec![0.0; numel(&out_shape)];
        let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
        for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| out[o] = f(da[ia], db[ib]));
        Ok((out_shape, out))
    }

    /// Elementwise sum with same-rank broadcasting over size-1 axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::tensor(shape, out), Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::tensor(shape, out), Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.broadcast(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Self::tensor(shape, out), Op::Mul(a, b), rg))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Self::tensor(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `c - x`, e.g. the complementary routing probability.
    pub fn rsub_scalar(&mut self, c: f64, x: Var) -> Var {
        let neg = self.scale(x, -1.0);
        self.add_scalar(neg, c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.data(x).iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain { op: "log", value: bad });
        }
        Ok(self.unary(x, Op::Log(x), f64::ln))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if let Some(&bad) = self.data(x).iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain { op: "sqrt", value: bad });
        }
        Ok(self.unary(x, Op::Sqrt(x), f64::sqrt))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp(x, lo, hi), |v| v.clamp(lo, hi))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?.with_requires_grad(false);
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Swaps the last two axes (copying).
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: shape,
                rhs: vec![],
            });
        }
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let src = self.data(x);
        let mut out = vec![0.0; src.len()];
        for (blk, chunk) in src.chunks(m * n).enumerate() {
            let dst = &mut out[blk * m * n..(blk + 1) * m * n];
            for i in 0..m {
                for j in 0..n {
                    dst[j * m + i] = chunk[i * n + j];
                }
            }
        }
        let mut new_shape = shape;
        new_shape.swap(r - 2, r - 1);
        let rg = self.rg(x);
        Ok(self.push(Self::tensor(new_shape, out), Op::TransposeLast2(x), rg))
    }

    /// Gathers entries `index` along `axis`. Indices may repeat.
    pub fn index_select(&mut self, x: Var, axis: usize, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || index.iter().any(|&i| i >= shape[axis]) {
            return Err(Error::Shape {
                op: "index_select",
                lhs: shape,
                rhs: index.to_vec(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * index.len() * inner);
        for o in 0..outer {
            for &i in index {
                let base = (o * len + i) * inner;
                out.extend_from_slice(&src[base..base + inner]);
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            Self::tensor(new_shape, out),
            Op::IndexSelect {
                x,
                axis,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && axis < s.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let len = self.shape(v)[axis];
                let src = self.data(v);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let rg = xs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Self::tensor(shape, out),
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Cross-correlation of `x: [B, C, L]` with `kernel: [F, C, K]`
    /// (no kernel flip).
    pub fn conv1d(&mut self, x: Var, kernel: Var, padding: Padding) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(kernel).to_vec());
        if sx.len() != 3 || sk.len() != 3 || sx[1] != sk[1] {
            return Err(Error::Shape {
                op: "conv1d",
                lhs: sx,
                rhs: sk,
            });
        }
        let (b, c, l) = (sx[0], sx[1], sx[2]);
        let (f, k) = (sk[0], sk[2]);
        let (pl, pr) = match padding {
            Padding::Valid => (0, 0),
            Padding::Same => ((k - 1) / 2, k - 1 - (k - 1) / 2),
        };
        if k == 0 || k > l + pl + pr {
            return Err(Error::KernelTooLong {
                op: "conv1d",
                kernel: k,
                len: l,
            });
        }
        let out_len = l + pl + pr - k + 1;
        let (dx, dk) = (self.data(x), self.data(kernel));
        let mut out = vec![0.0; b * f * out_len];
        for bi in 0..b {
            for fi in 0..f {
                let o = &mut out[(bi * f + fi) * out_len..(bi * f + fi + 1) * out_len];
                for ci in 0..c {
                    let xr = &dx[(bi * c + ci) * l..(bi * c + ci + 1) * l];
                    let kr = &dk[(fi * c + ci) * k..(fi * c + ci + 1) * k];
                    for (j, oj) in o.iter_mut().enumerate() {
                        let mut s = 0.0;
                        for (t, &kv) in kr.iter().enumerate() {
                            let p = j + t;
                            if p >= pl && p - pl < l {
                                s += xr[p - pl] * kv;
                            }
                        }
                        *oj += s;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(kernel);
        Ok(self.push(
            Self::tensor(vec![b, f, out_len], out),
            Op::Conv1d {
                x,
                kernel,
                pad_left: pl,
            },
            rg,
        ))
    }

    fn pool_window(&self, x: Var, window: Window, op: &'static str) -> Result<(Vec<usize>, usize, usize)> {
        let shape = self.shape(x).to_vec();
        let l = *shape.last().ok_or(Error::EmptyTensor { op })?;
        if l == 0 || numel(&shape) == 0 {
            return Err(Error::EmptyTensor { op });
        }
        let w = match window {
            Window::Global => l,
            Window::Size(w) => w,
        };
        if w == 0 || w > l {
            return Err(Error::KernelTooLong { op, kernel: w, len: l });
        }
        Ok((shape, l, w))
    }

    /// Non-overlapping max pooling over the last axis. Ties resolve to
    /// the first maximal position.
    pub fn maxpool1d(&mut self, x: Var, window: Window) -> Result<Var> {
        let (mut shape, l, w) = self.pool_window(x, window, "maxpool1d")?;
        let n_out = l / w;
        let src = self.data(x);
        let rows = src.len() / l;
        let mut out = Vec::with_capacity(rows * n_out);
        let mut argmax = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            for j in 0..n_out {
                let base = r * l + j * w;
                let mut best = base;
                for p in base + 1..base + w {
                    if src[p] > src[best] {
                        best = p;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
        *shape.last_mut().unwrap() = n_out;
        let rg = self.rg(x);
        Ok(self.push(
            Self::tensor(shape, out),
            Op::MaxPool {
                x,
                window: w,
                argmax,
            },
            rg,
        ))
    }

    /// Position of the maximum inside its pooling window for every
    /// output of a [`Tape::maxpool1d`] node.
    pub fn pool_argmax(&self, v: Var) -> Option<Vec<usize>> {
        match &self.nodes[v.0].op {
            Op::MaxPool { argmax, window, .. } => Some(argmax.iter().map(|&p| p % window).collect()),
            _ => None,
        }
    }

    pub fn avgpool1d(&mut self, x: Var, window: Window) -> Result<Var> {
        let (mut shape, l, w) = self.pool_window(x, window, "avgpool1d")?;
        let n_out = l / w;
        let src = self.data(x);
        let rows = src.len() / l;
        let mut out = Vec::with_capacity(rows * n_out);
        for r in 0..rows {
            for j in 0..n_out {
                let base = r * l + j * w;
                out.push(src[base..base + w].iter().sum::<f64>() / w as f64);
            }
        }
        *shape.last_mut().unwrap() = n_out;
        let rg = self.rg(x);
        Ok(self.push(Self::tensor(shape, out), Op::AvgPool { x, window: w }, rg))
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: shape,
                rhs: vec![axis],
            });
        }
        let src = self.data(x);
        if src.iter().any(|v| v.is_nan()) {
            return Err(Error::NanInput { op: "softmax" });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - m).exp();
                    out[at(j)] = e;
                    z += e;
                }
                for j in 0..len {
                    out[at(j)] /= z;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Self::tensor(shape, out), Op::Softmax { x, axis }, rg))
    }

    /// Normalizes the last axis to zero mean and unit variance, then
    /// applies `gain` and `bias` (both shaped like the last axis).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if d == 0 || self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: shape,
                rhs: self.shape(gain).to_vec(),
            });
        }
        let (src, g, b) = (self.data(x), self.data(gain), self.data(bias));
        let rows = src.len() / d;
        let mut xhat = vec![0.0; src.len()];
        let mut out = vec![0.0; src.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &src[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Self::tensor(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Picks `x[r, index[r]]` from a `[R, M]` matrix.
    pub fn select_per_row(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != index.len() {
            return Err(Error::Shape {
                op: "select_per_row",
                lhs: shape,
                rhs: vec![index.len()],
            });
        }
        let m = shape[1];
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::LabelOutOfRange { label: bad, classes: m });
        }
        let src = self.data(x);
        let out = index.iter().enumerate().map(|(r, &i)| src[r * m + i]).collect();
        let rg = self.rg(x);
        Ok(self.push(
            Self::tensor(vec![index.len()], out),
            Op::SelectPerRow {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Affine map over the last axis: `x · weight + bias` with
    /// `weight: [in, out]` and `bias: [out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (fan_in, fan_out) = {
            let w = self.shape(weight);
            if w.len() != 2 {
                return Err(Error::Shape {
                    op: "linear",
                    lhs: shape,
                    rhs: w.to_vec(),
                });
            }
            (w[0], w[1])
        };
        if shape.last() != Some(&fan_in) {
            return Err(Error::Shape {
                op: "linear",
                lhs: shape,
                rhs: self.shape(weight).to_vec(),
            });
        }
        let rows = numel(&shape) / fan_in;
        let flat = self.reshape(x, &[rows, fan_in])?;
        let prod = self.matmul(flat, weight)?;
        let b = self.reshape(bias, &[1, fan_out])?;
        let y = self.add(prod, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = fan_out;
        self.reshape(y, &out_shape)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added
    /// to the tensors in `params`; repeated calls accumulate.
    pub fn backward(&self, loss: Var, params: &mut ParamStore) -> Result<Gradients> {
        let grads = self.gradients(loss)?;
        for node_idx in 0..=loss.0 {
            if let Op::Param(id) = self.nodes[node_idx].op {
                if let Some(g) = &grads.grads[node_idx] {
                    params.get_mut(id).accumulate_grad(g);
                }
            }
        }
        Ok(grads)
    }

    /// Reverse sweep without touching any parameter store.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Rank {
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.rg(*a) {
                    let ga = add_into(&mut grads[a.0], m * k);
                    matmul_grad_lhs(g, self.data(*b), ga, m, k, n);
                }
                if self.rg(*b) {
                    let gb = add_into(&mut grads[b.0], k * n);
                    matmul_grad_rhs(self.data(*a), g, gb, m, k, n);
                }
            }
            Op::BatchMatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.rg(*a) {
                    let db = self.data(*b);
                    let ga = add_into(&mut grads[a.0], bs * m * k);
                    for i in 0..bs {
                        matmul_grad_lhs(
                            &g[i * m * n..(i + 1) * m * n],
                            &db[i * k * n..(i + 1) * k * n],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            n,
                        );
                    }
                }
                if self.rg(*b) {
                    let da = self.data(*a);
                    let gb = add_into(&mut grads[b.0], bs * k * n);
                    for i in 0..bs {
                        matmul_grad_rhs(
                            &da[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            &mut gb[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let out_shape = node.value.shape();
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (ta, tb) = (broadcast_strides(&sa, out_shape), broadcast_strides(&sb, out_shape));
                let (da, db) = (self.data(*a), self.data(*b));
                let sign_b = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(node.op, Op::Mul(..));
                if self.rg(*a) {
                    let ga = add_into(&mut grads[a.0], da.len());
                    for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| {
                        ga[ia] += if is_mul { g[o] * db[ib] } else { g[o] };
                    });
                }
                if self.rg(*b) {
                    let gb = add_into(&mut grads[b.0], db.len());
                    for_each_broadcast(out_shape, &ta, &tb, |o, ia, ib| {
                        gb[ib] += if is_mul { g[o] * da[ia] } else { sign_b * g[o] };
                    });
                }
            }
            Op::Scale(x, c) => {
                let gx = add_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                let gx = add_into(&mut grads[x.0], g.len());
                gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            Op::Sigmoid(x) => {
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }
            Op::Exp(x) => {
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] * y[i];
                }
            }
            Op::Log(x) => {
                let xv = self.data(*x);
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    gx[i] += g[i] / xv[i];
                }
            }
            Op::Relu(x) => {
                let xv = self.data(*x);
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xv[i] > 0.0 {
                        gx[i] += g[i];
                    }
                }
            }
            Op::Sqrt(x) => {
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if y[i] > 0.0 {
                        gx[i] += g[i] * 0.5 / y[i];
                    }
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.data(*x);
                let gx = add_into(&mut grads[x.0], g.len());
                for i in 0..g.len() {
                    if xv[i] > *lo && xv[i] < *hi {
                        gx[i] += g[i];
                    }
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.shape(*x);
                let r = s.len();
                let (m, n) = (s[r - 2], s[r - 1]);
                let gx = add_into(&mut grads[x.0], g.len());
                for blk in 0..g.len() / (m * n) {
                    let off = blk * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            gx[off + i * n + j] += g[off + j * m + i];
                        }
                    }
                }
            }
            Op::IndexSelect { x, axis, index } => {
                let s = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&s, *axis);
                let gx = add_into(&mut grads[x.0], numel(&s));
                let mut src = 0;
                for o in 0..outer {
                    for &i in index {
                        let base = (o * len + i) * inner;
                        for t in 0..inner {
                            gx[base + t] += g[src + t];
                        }
                        src += inner;
                    }
                }
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for v in xs {
                    let len = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        let gv = add_into(&mut grads[v.0], outer * len * inner);
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for t in 0..len * inner {
                                gv[dst + t] += g[src + t];
                            }
                        }
                    }
                    offset += len;
                }
            }
            Op::Conv1d { x, kernel, pad_left } => {
                let (sx, sk) = (self.shape(*x), self.shape(*kernel));
                let (b, c, l) = (sx[0], sx[1], sx[2]);
                let (f, k) = (sk[0], sk[2]);
                let out_len = node.value.shape()[2];
                let pl = *pad_left;
                let (dx, dk) = (self.data(*x), self.data(*kernel));
                let mut gx_buf = self.rg(*x).then(|| vec![0.0; dx.len()]);
                let mut gk_buf = self.rg(*kernel).then(|| vec![0.0; dk.len()]);
                for bi in 0..b {
                    for fi in 0..f {
                        let go = &g[(bi * f + fi) * out_len..(bi * f + fi + 1) * out_len];
                        for ci in 0..c {
                            let xo = (bi * c + ci) * l;
                            let ko = (fi * c + ci) * k;
                            for (j, &gj) in go.iter().enumerate() {
                                for t in 0..k {
                                    let p = j + t;
                                    if p >= pl && p - pl < l {
                                        if let Some(gx) = gx_buf.as_mut() {
                                            gx[xo + p - pl] += gj * dk[ko + t];
                                        }
                                        if let Some(gk) = gk_buf.as_mut() {
                                            gk[ko + t] += gj * dx[xo + p - pl];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = gx_buf {
                    let acc = add_into(&mut grads[x.0], gx.len());
                    acc.iter_mut().zip(&gx).for_each(|(a, b)| *a += b);
                }
                if let Some(gk) = gk_buf {
                    let acc = add_into(&mut grads[kernel.0], gk.len());
                    acc.iter_mut().zip(&gk).for_each(|(a, b)| *a += b);
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                let gx = add_into(&mut grads[x.0], self.value(*x).numel());
                for (o, &p) in argmax.iter().enumerate() {
                    gx[p] += g[o];
                }
            }
            Op::AvgPool { x, window } => {
                let s = self.shape(*x);
                let l = *s.last().unwrap();
                let n_out = l / window;
                let gx = add_into(&mut grads[x.0], numel(s));
                for (o, &go) in g.iter().enumerate() {
                    let (r, j) = (o / n_out, o % n_out);
                    let base = r * l + j * window;
                    for p in base..base + window {
                        gx[p] += go / *window as f64;
                    }
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let gx = add_into(&mut grads[x.0], g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..len {
                            gx[at(j)] += y[at(j)] * (g[at(j)] - dot);
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
                let d = *node.value.shape().last().unwrap();
                let rows = g.len() / d;
                let gv = self.data(*gain);
                if self.rg(*x) {
                    let gx = add_into(&mut grads[x.0], g.len());
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            m1 += gh;
                            m2 += gh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += inv_std[r] * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if self.rg(*gain) {
                    let gg = add_into(&mut grads[gain.0], d);
                    for (i, &gi) in g.iter().enumerate() {
                        gg[i % d] += gi * xhat[i];
                    }
                }
                if self.rg(*bias) {
                    let gb = add_into(&mut grads[bias.0], d);
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                let gx = add_into(&mut grads[x.0], n);
                gx.iter_mut().for_each(|v| *v += g[0]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let gx = add_into(&mut grads[x.0], n);
                gx.iter_mut().for_each(|v| *v += g[0] / n as f64);
            }
            Op::SelectPerRow { x, index } => {
                let m = self.shape(*x)[1];
                let gx = add_into(&mut grads[x.0], index.len() * m);
                for (r, &i) in index.iter().enumerate() {
                    gx[r * m + i] += g[r];
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(br) {
                *o += av * bv;
            }
        }
    }
    out
}

// ga += g · bᵀ
fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let br = &b[p * n..(p + 1) * n];
            ga[i * k + p] += gr.iter().zip(br).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// gb += aᵀ · g
fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let gr = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let dst = &mut gb[p * n..(p + 1) * n];
            for (d, &gv) in dst.iter_mut().zip(gr) {
                *d += av * gv;
            }
        }
    }
}
