//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediates its backward rule needs. [`Graph::backward`] then walks the
//! tape in reverse exactly once. Parameters are bound lazily from a
//! [`ParamStore`]; binding the same parameter twice yields the same leaf, so
//! gradients from multiple uses accumulate additively.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::{c, Scalar, Tensor};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    generation: u64,
    index: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, T),
    ScaleBy(usize, usize),
    Silu(usize),
    Sigmoid(usize),
    Square(usize),
    SoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Conv1d {
        x: usize,
        kernel: usize,
        bias: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Rows {
        x: usize,
        start: usize,
    },
    Gather {
        x: usize,
        indices: Vec<usize>,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    Scan {
        u: usize,
        decay: usize,
        input: usize,
        output: usize,
        skip: usize,
        states: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<'s, T> {
    id: u64,
    generation: u64,
    store: Option<&'s ParamStore<T>>,
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, usize>,
    check_finite: bool,
}

impl<T: Scalar> Graph<'static, T> {
    /// A graph with no parameter store; inputs come from [`Graph::constant`]
    /// and [`Graph::variable`].
    pub fn new() -> Self {
        Graph::build(None)
    }
}

impl<T: Scalar> Default for Graph<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'s, T: Scalar> Graph<'s, T> {
    pub fn with_params(store: &'s ParamStore<T>) -> Self {
        Graph::build(Some(store))
    }

    fn build(store: Option<&'s ParamStore<T>>) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            generation: 0,
            store,
            nodes: Vec::new(),
            bound: HashMap::new(),
            check_finite: true,
        }
    }

    /// Toggles the NaN/Inf guard applied to every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    /// Drops every recorded node. Vars handed out before the reset become stale.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bound.clear();
        self.generation += 1;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id {
            return Err(Error::GraphLifetime(format!(
                "value belongs to graph {} but was used on graph {}",
                v.graph, self.id
            )));
        }
        if v.generation != self.generation || v.index >= self.nodes.len() {
            return Err(Error::GraphLifetime(format!(
                "value from generation {} used after the graph was reset (now {})",
                v.generation, self.generation
            )));
        }
        Ok(v.index)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var {
            graph: self.id,
            generation: self.generation,
            index: self.nodes.len() - 1,
        })
    }

    fn node(&self, i: usize) -> &Node<T> {
        &self.nodes[i]
    }

    fn ng(&self, inputs: &[usize]) -> bool {
        inputs.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn shape(&self, v: Var) -> Result<&[usize]> {
        Ok(self.value(v)?.shape())
    }

    /// Records a tensor that is not differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("constant", t, Op::Leaf, false)
    }

    /// Records a leaf whose gradient is reported by [`Grads::wrt`].
    pub fn variable(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push("variable", t, Op::Leaf, true)
    }

    /// Binds a parameter from the attached store. Repeated binds share a leaf.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&i) = self.bound.get(&id) {
            return Ok(Var {
                graph: self.id,
                generation: self.generation,
                index: i,
            });
        }
        let store = self
            .store
            .ok_or_else(|| Error::Contract("graph has no parameter store attached".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("parameter id {} out of range", id.0)));
        }
        let v = self.push("param", store.get(id).clone(), Op::Param, true)?;
        self.bound.insert(id, v.index);
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.node(ia).value.shape(), self.node(ib).value.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = mm(self.node(ia).value.data(), self.node(ib).value.data(), m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        let ng = self.ng(&[ia, ib]);
        self.push("matmul", t, Op::MatMul(ia, ib), ng)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let s = self.node(ia).value.shape();
        if s.len() != 2 {
            return Err(Error::shape("transpose", s, &[]));
        }
        let (r, cols) = (s[0], s[1]);
        let t = Tensor::new(&[cols, r], transpose(self.node(ia).value.data(), r, cols))?;
        let ng = self.ng(&[ia]);
        self.push("transpose", t, Op::Transpose(ia), ng)
    }

    /// `x · W + b` over the trailing axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x)?.to_vec();
        let ws = self.shape(w)?.to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let rows = xs[..xs.len() - 1].iter().product::<usize>();
        let flat = if xs.len() == 2 { x } else { self.reshape(x, &[rows, ws[0]])? };
        let y = self.matmul(flat, w)?;
        let y = self.add_bias(y, b)?;
        if xs.len() == 2 {
            Ok(y)
        } else {
            let mut out_shape = xs.clone();
            *out_shape.last_mut().unwrap() = ws[1];
            self.reshape(y, &out_shape)
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(usize, usize, Tensor<T>)> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (ta, tb) = (&self.node(ia).value, &self.node(ib).value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((ia, ib, Tensor::new(ta.shape(), data)?))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("add", a, b, |x, y| x + y)?;
        let ng = self.ng(&[ia, ib]);
        self.push("add", t, Op::Add(ia, ib), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("sub", a, b, |x, y| x - y)?;
        let ng = self.ng(&[ia, ib]);
        self.push("sub", t, Op::Sub(ia, ib), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, t) = self.binary("mul", a, b, |x, y| x * y)?;
        let ng = self.ng(&[ia, ib]);
        self.push("mul", t, Op::Mul(ia, ib), ng)
    }

    /// Adds a vector of length `cols(x)` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (ix, ib) = (self.idx(x)?, self.idx(b)?);
        let (tx, tb) = (&self.node(ix).value, &self.node(ib).value);
        let n = tx.cols();
        if tb.numel() != n {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let bias = tb.data();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i % n])
            .collect();
        let t = Tensor::new(tx.shape(), data)?;
        let ng = self.ng(&[ix, ib]);
        self.push("add_bias", t, Op::AddBias(ix, ib), ng)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.node(ix).value.map(|v| v * k);
        let ng = self.ng(&[ix]);
        self.push("scale", t, Op::Scale(ix, k), ng)
    }

    /// Multiplies every entry of `x` by the single entry of `s`.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        let (ix, is) = (self.idx(x)?, self.idx(s)?);
        let ts = &self.node(is).value;
        if ts.numel() != 1 {
            return Err(Error::shape("scale_by", self.node(ix).value.shape(), ts.shape()));
        }
        let k = ts.data()[0];
        let t = self.node(ix).value.map(|v| v * k);
        let ng = self.ng(&[ix, is]);
        self.push("scale_by", t, Op::ScaleBy(ix, is), ng)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.node(ix).value.map(|v| v * sigmoid(v));
        let ng = self.ng(&[ix]);
        self.push("silu", t, Op::Silu(ix), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.node(ix).value.map(sigmoid);
        let ng = self.ng(&[ix]);
        self.push("sigmoid", t, Op::Sigmoid(ix), ng)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.node(ix).value.map(|v| v * v);
        let ng = self.ng(&[ix]);
        self.push("square", t, Op::Square(ix), ng)
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the trailing axis, with per-row max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.node(ix).value;
        let cols = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[ix]);
        self.push("softmax_rows", t, Op::SoftmaxRows(ix), ng)
    }

    /// Layer normalisation over the trailing axis followed by `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let tx = &self.node(ix).value;
        let d = tx.cols();
        let (g, b) = (self.node(ig).value.data(), self.node(ib).value.data());
        if g.len() != d || b.len() != d {
            return Err(Error::shape("layer_norm", tx.shape(), self.node(ig).value.shape()));
        }
        let eps = c::<T>(eps);
        let n = c::<T>(d as f64);
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(tx.rows());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * inv;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let t = Tensor::new(tx.shape(), out)?;
        let ng = self.ng(&[ix, ig, ib]);
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Depthwise 1-D convolution along the token axis with zero "same" padding.
    ///
    /// `x` is `[L×d]`, `kernel` is `[w×d]` with odd `w`, `bias` has `d` entries.
    pub fn conv1d_same(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (ix, ik, ib) = (self.idx(x)?, self.idx(kernel)?, self.idx(bias)?);
        let (tx, tk, tb) = (&self.node(ix).value, &self.node(ik).value, &self.node(ib).value);
        let (xs, ks) = (tx.shape(), tk.shape());
        if xs.len() != 2 || ks.len() != 2 || ks[1] != xs[1] || tb.numel() != xs[1] {
            return Err(Error::shape("conv1d_same", xs, ks));
        }
        let w = ks[0];
        if w % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width must be odd, got {w}")));
        }
        let (l, d) = (xs[0], xs[1]);
        let out = conv1d_forward(tx.data(), tk.data(), tb.data(), l, d, w);
        let t = Tensor::new(xs, out)?;
        let ng = self.ng(&[ix, ik, ib]);
        self.push(
            "conv1d_same",
            t,
            Op::Conv1d {
                x: ix,
                kernel: ik,
                bias: ib,
            },
            ng,
        )
    }

    // ---- structure ------------------------------------------------------

    /// Concatenates 2-D tensors along the feature (column) axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.node(idx[0]).value.shape().to_vec();
        let rows = first[0];
        let mut widths = Vec::with_capacity(idx.len());
        for &i in &idx {
            let s = self.node(i).value.shape();
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat_cols", &first, s));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&i, &w) in idx.iter().zip(&widths) {
                out.extend_from_slice(&self.node(i).value.data()[r * w..(r + 1) * w]);
            }
        }
        let t = Tensor::new(&[rows, total], out)?;
        let ng = self.ng(&idx);
        self.push("concat_cols", t, Op::ConcatCols(idx), ng)
    }

    /// Concatenates 2-D tensors along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let idx = parts.iter().map(|&v| self.idx(v)).collect::<Result<Vec<_>>>()?;
        let first = self.node(idx[0]).value.shape().to_vec();
        let cols = first[1];
        let mut rows = 0;
        let mut out = Vec::new();
        for &i in &idx {
            let s = self.node(i).value.shape();
            if s.len() != 2 || s[1] != cols {
                return Err(Error::shape("concat_rows", &first, s));
            }
            rows += s[0];
            out.extend_from_slice(self.node(i).value.data());
        }
        let t = Tensor::new(&[rows, cols], out)?;
        let ng = self.ng(&idx);
        self.push("concat_rows", t, Op::ConcatRows(idx), ng)
    }

    /// Rows `start..start+len` of a 2-D tensor; rows past the end are zeros.
    pub fn rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.node(ix).value;
        let s = tx.shape();
        if s.len() != 2 || len == 0 || start >= s[0] {
            return Err(Error::shape("rows", s, &[start, len]));
        }
        let cols = s[1];
        let mut out = vec![T::zero(); len * cols];
        let avail = (s[0] - start).min(len);
        out[..avail * cols].copy_from_slice(&tx.data()[start * cols..(start + avail) * cols]);
        let t = Tensor::new(&[len, cols], out)?;
        let ng = self.ng(&[ix]);
        self.push("rows", t, Op::Rows { x: ix, start }, ng)
    }

    /// Picks flat entries of `x` into a 1-D tensor.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.node(ix).value;
        if indices.is_empty() || indices.iter().any(|&i| i >= tx.numel()) {
            return Err(Error::shape("gather", tx.shape(), indices));
        }
        let data = indices.iter().map(|&i| tx.data()[i]).collect();
        let t = Tensor::new(&[indices.len()], data)?;
        let ng = self.ng(&[ix]);
        self.push(
            "gather",
            t,
            Op::Gather {
                x: ix,
                indices: indices.to_vec(),
            },
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let ix = self.idx(x)?;
        let t = self.node(ix).value.clone().reshape(shape)?;
        let ng = self.ng(&[ix]);
        self.push("reshape", t, Op::Reshape(ix), ng)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let s = self.node(ix).value.data().iter().copied().sum::<T>();
        let ng = self.ng(&[ix]);
        self.push("sum", Tensor::scalar(s), Op::Sum(ix), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let tx = &self.node(ix).value;
        let s = tx.data().iter().copied().sum::<T>() / c::<T>(tx.numel() as f64);
        let ng = self.ng(&[ix]);
        self.push("mean", Tensor::scalar(s), Op::Mean(ix), ng)
    }

    /// Diagonal linear recurrence over the token axis.
    ///
    /// `h_t = decay ⊙ h_{t-1} + input ⊙ u_t`, `y_t = output ⊙ h_t + skip ⊙ u_t`,
    /// with `h_{-1} = 0`. `u` is `[L×c]`; the four coefficient tensors hold
    /// `c` entries each.
    pub fn diag_scan(&mut self, u: Var, decay: Var, input: Var, output: Var, skip: Var) -> Result<Var> {
        let iu = self.idx(u)?;
        let coeff = [decay, input, output, skip]
            .iter()
            .map(|&v| self.idx(v))
            .collect::<Result<Vec<_>>>()?;
        let tu = &self.node(iu).value;
        let us = tu.shape();
        if us.len() != 2 {
            return Err(Error::shape("diag_scan", us, &[]));
        }
        let (l, ch) = (us[0], us[1]);
        for &i in &coeff {
            if self.node(i).value.numel() != ch {
                return Err(Error::shape("diag_scan", us, self.node(i).value.shape()));
            }
        }
        let [a, bi, co, dk] = [0, 1, 2, 3].map(|k| self.node(coeff[k]).value.data());
        let ud = tu.data();
        let mut states = vec![T::zero(); l * ch];
        let mut out = vec![T::zero(); l * ch];
        for t in 0..l {
            for j in 0..ch {
                let prev = if t == 0 { T::zero() } else { states[(t - 1) * ch + j] };
                let h = a[j] * prev + bi[j] * ud[t * ch + j];
                states[t * ch + j] = h;
                out[t * ch + j] = co[j] * h + dk[j] * ud[t * ch + j];
            }
        }
        let t = Tensor::new(us, out)?;
        let ng = self.ng(&[iu, coeff[0], coeff[1], coeff[2], coeff[3]]);
        self.push(
            "diag_scan",
            t,
            Op::Scan {
                u: iu,
                decay: coeff[0],
                input: coeff[1],
                output: coeff[2],
                skip: coeff[3],
                states,
            },
            ng,
        )
    }

    // ---- reverse pass ---------------------------------------------------

    /// Back-propagates from a scalar `loss` through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = self.idx(loss)?;
        let lt = &self.node(root).value;
        if lt.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root] = Some(Tensor::ones(lt.shape()));

        for i in (0..=root).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backprop(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Grads {
            nodes: grads,
            graph: self.id,
            generation: self.generation,
            bound: self.bound.clone(),
        })
    }

    fn backprop(&self, i: usize, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[i];
        let gyd = gy.data();
        let mut send = |j: usize, g: Vec<T>| {
            if !self.nodes[j].needs_grad {
                return;
            }
            let shape = self.nodes[j].value.shape();
            match &mut grads[j] {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g) {
                        *a = *a + b;
                    }
                }
                slot @ None => *slot = Some(Tensor::new(shape, g).expect("gradient matches value shape")),
            }
        };
        let val = |j: usize| &self.nodes[j].value;

        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[*a].needs_grad {
                    send(*a, mm_a_bt(gyd, val(*b).data(), m, n, k));
                }
                if self.nodes[*b].needs_grad {
                    send(*b, mm_at_b(val(*a).data(), gyd, m, k, n));
                }
            }
            Op::Transpose(a) => {
                let s = val(*a).shape();
                send(*a, transpose(gyd, s[1], s[0]));
            }
            Op::Add(a, b) => {
                send(*a, gyd.to_vec());
                send(*b, gyd.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, gyd.to_vec());
                send(*b, gyd.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                send(*a, gyd.iter().zip(db).map(|(&g, &y)| g * y).collect());
                send(*b, gyd.iter().zip(da).map(|(&g, &x)| g * x).collect());
            }
            Op::AddBias(x, b) => {
                send(*x, gyd.to_vec());
                let n = val(*b).numel();
                let mut gb = vec![T::zero(); n];
                for (k, &g) in gyd.iter().enumerate() {
                    gb[k % n] = gb[k % n] + g;
                }
                send(*b, gb);
            }
            Op::Scale(x, k) => send(*x, gyd.iter().map(|&g| g * *k).collect()),
            Op::ScaleBy(x, s) => {
                let k = val(*s).data()[0];
                send(*x, gyd.iter().map(|&g| g * k).collect());
                let gs = gyd.iter().zip(val(*x).data()).map(|(&g, &v)| g * v).sum::<T>();
                send(*s, vec![gs]);
            }
            Op::Silu(x) => {
                let g = gyd
                    .iter()
                    .zip(val(*x).data())
                    .map(|(&g, &v)| {
                        let s = sigmoid(v);
                        g * (s + v * s * (T::one() - s))
                    })
                    .collect();
                send(*x, g);
            }
            Op::Sigmoid(x) => {
                let g = gyd
                    .iter()
                    .zip(node.value.data())
                    .map(|(&g, &s)| g * s * (T::one() - s))
                    .collect();
                send(*x, g);
            }
            Op::Square(x) => {
                let two = c::<T>(2.0);
                send(*x, gyd.iter().zip(val(*x).data()).map(|(&g, &v)| two * g * v).collect());
            }
            Op::SoftmaxRows(x) => {
                let cols = node.value.cols();
                let mut g = Vec::with_capacity(gyd.len());
                for (yr, gr) in node.value.data().chunks(cols).zip(gyd.chunks(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&y, &g)| y * g).sum::<T>();
                    g.extend(yr.iter().zip(gr).map(|(&y, &gv)| y * (gv - dot)));
                }
                send(*x, g);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = node.value.cols();
                let gam = val(*gamma).data();
                let n = c::<T>(d as f64);
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                let mut gx = Vec::with_capacity(gyd.len());
                for (r, (gr, hr)) in gyd.chunks(d).zip(xhat.chunks(d)).enumerate() {
                    let mut sum_dh = T::zero();
                    let mut sum_dh_h = T::zero();
                    for j in 0..d {
                        gg[j] = gg[j] + gr[j] * hr[j];
                        gb[j] = gb[j] + gr[j];
                        let dh = gr[j] * gam[j];
                        sum_dh = sum_dh + dh;
                        sum_dh_h = sum_dh_h + dh * hr[j];
                    }
                    let k = inv_std[r] / n;
                    for j in 0..d {
                        let dh = gr[j] * gam[j];
                        gx.push(k * (n * dh - sum_dh - hr[j] * sum_dh_h));
                    }
                }
                send(*x, gx);
                send(*gamma, gg);
                send(*beta, gb);
            }
            Op::Conv1d { x, kernel, bias } => {
                let s = val(*x).shape();
                let (l, d) = (s[0], s[1]);
                let w = val(*kernel).shape()[0];
                let pad = (w - 1) / 2;
                let (xd, kd) = (val(*x).data(), val(*kernel).data());
                let mut gx = vec![T::zero(); l * d];
                let mut gk = vec![T::zero(); w * d];
                let mut gb = vec![T::zero(); d];
                for t in 0..l {
                    for ch in 0..d {
                        let g = gyd[t * d + ch];
                        gb[ch] = gb[ch] + g;
                        for o in 0..w {
                            let src = t + o;
                            if src < pad || src - pad >= l {
                                continue;
                            }
                            let src = src - pad;
                            gx[src * d + ch] = gx[src * d + ch] + g * kd[o * d + ch];
                            gk[o * d + ch] = gk[o * d + ch] + g * xd[src * d + ch];
                        }
                    }
                }
                send(*x, gx);
                send(*kernel, gk);
                send(*bias, gb);
            }
            Op::ConcatCols(parts) => {
                let rows = node.value.shape()[0];
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    let mut g = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        g.extend_from_slice(&gyd[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    send(p, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    send(p, gyd[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::Rows { x, start } => {
                let s = val(*x).shape();
                let cols = s[1];
                let len = node.value.shape()[0];
                let avail = (s[0] - start).min(len);
                let mut g = vec![T::zero(); val(*x).numel()];
                g[start * cols..(start + avail) * cols].copy_from_slice(&gyd[..avail * cols]);
                send(*x, g);
            }
            Op::Gather { x, indices } => {
                let mut g = vec![T::zero(); val(*x).numel()];
                for (&k, &gv) in indices.iter().zip(gyd) {
                    g[k] = g[k] + gv;
                }
                send(*x, g);
            }
            Op::Reshape(x) => send(*x, gyd.to_vec()),
            Op::Sum(x) => send(*x, vec![gyd[0]; val(*x).numel()]),
            Op::Mean(x) => {
                let n = val(*x).numel();
                send(*x, vec![gyd[0] / c::<T>(n as f64); n]);
            }
            Op::Scan {
                u,
                decay,
                input,
                output,
                skip,
                states,
            } => {
                let s = val(*u).shape();
                let (l, ch) = (s[0], s[1]);
                let ud = val(*u).data();
                let [a, bi, co, dk] = [*decay, *input, *output, *skip].map(|k| val(k).data());
                let mut gu = vec![T::zero(); l * ch];
                let mut ga = vec![T::zero(); ch];
                let mut gbi = vec![T::zero(); ch];
                let mut gco = vec![T::zero(); ch];
                let mut gdk = vec![T::zero(); ch];
                let mut carry = vec![T::zero(); ch];
                for t in (0..l).rev() {
                    for j in 0..ch {
                        let k = t * ch + j;
                        let gyv = gyd[k];
                        gco[j] = gco[j] + gyv * states[k];
                        gdk[j] = gdk[j] + gyv * ud[k];
                        let gh = gyv * co[j] + carry[j];
                        let prev = if t == 0 { T::zero() } else { states[k - ch] };
                        ga[j] = ga[j] + gh * prev;
                        gbi[j] = gbi[j] + gh * ud[k];
                        gu[k] = gyv * dk[j] + gh * bi[j];
                        carry[j] = gh * a[j];
                    }
                }
                send(*u, gu);
                send(*decay, ga);
                send(*input, gbi);
                send(*output, gco);
                send(*skip, gdk);
            }
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Grads<T> {
    nodes: Vec<Option<Tensor<T>>>,
    graph: u64,
    generation: u64,
    bound: HashMap<ParamId, usize>,
}

impl<T: Scalar> Grads<T> {
    /// Gradient with respect to a leaf created by [`Graph::variable`] (or any
    /// other recorded value). `None` when the value is not on the loss path.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        if v.graph != self.graph || v.generation != self.generation {
            return None;
        }
        self.nodes.get(v.index).and_then(Option::as_ref)
    }

    /// Gradients for every parameter of `store`; unused parameters get zeros.
    pub fn params(&self, store: &ParamStore<T>) -> Gradients<T> {
        let mut out = Gradients::zeros_like(store);
        for (id, &node) in &self.bound {
            if let Some(g) = &self.nodes[node] {
                out.0[id.0] = g.clone();
            }
        }
        out
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

fn mm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    out
}

/// `G[m×n] · Bᵀ` where `B` is `[k×n]`.
fn mm_a_bt<T: Scalar>(g: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
        }
    }
    out
}

/// `Aᵀ · G` where `A` is `[m×k]` and `G` is `[m×n]`.
fn mm_at_b<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o = *o + av * gv;
            }
        }
    }
    out
}

fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for cidx in 0..cols {
            out[cidx * rows + r] = a[r * cols + cidx];
        }
    }
    out
}

fn conv1d_forward<T: Scalar>(x: &[T], k: &[T], b: &[T], l: usize, d: usize, w: usize) -> Vec<T> {
    let pad = (w - 1) / 2;
    let mut out = vec![T::zero(); l * d];
    for t in 0..l {
        for ch in 0..d {
            let mut acc = b[ch];
            for o in 0..w {
                let src = t + o;
                if src < pad || src - pad >= l {
                    continue;
                }
                acc = acc + k[o * d + ch] * x[(src - pad) * d + ch];
            }
            out[t * d + ch] = acc;
        }
    }
    out
}

#[cfg(test)]
mod tests;
