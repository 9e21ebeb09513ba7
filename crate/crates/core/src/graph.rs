//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of a forward pass. Calling
//! [`Tape::backward`] on a scalar node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! requires one. The op set is the small vocabulary needed by the encoder,
//! the task head and the 1D U-Net denoiser; all tensors are row-major.

use serde::{Deserialize, Serialize};

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar tensor");
        self.data[0]
    }

    /// Rows of a 2D tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        assert_eq!(self.shape.len(), 2);
        self.data.chunks(self.shape[1].max(1))
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Sigmoid(Var),
    Silu(Var),
    Reshape(Var),
    /// x: (n, in), w: (out, in), b: (out)
    Linear { x: Var, w: Var, b: Option<Var> },
    SliceCols { x: Var, start: usize },
    ConcatCols(Var, Var),
    StackRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    /// x: (B, Cin, L), w: (Cout, Cin, K), b: (Cout); zero "same" padding.
    Conv1d { x: Var, w: Var, b: Var },
    AvgPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    /// h: (B, C, L) + v: (B, C) broadcast over L
    AddPerChannel { h: Var, v: Var },
    /// gamma * h + delta with gamma, delta: (B, C)
    Film { h: Var, gamma: Var, delta: Var },
    BroadcastLen { v: Var, len: usize },
    Mean(Var),
    SmoothL1Mean { pred: Var, target: Vec<f64> },
    CrossEntropyMean { logits: Var, labels: Vec<usize> },
    MseMean { pred: Var, target: Vec<f64> },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence
    /// the loss (or does not require a gradient).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient with respect to `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

/// Recorded computation.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn smooth_l1(e: f64) -> (f64, f64) {
    let a = e.abs();
    if a < 1.0 {
        (0.5 * e * e, e)
    } else {
        (a - 0.5, e.signum())
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients (parameters, probed inputs).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(self.shape(a), self.shape(b), "{what}: shape mismatch");
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "add");
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "sub");
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same_shape(a, b, "mul");
        let data = self.value(a).data.iter().zip(&self.value(b).data).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let data = self.value(a).data.iter().map(|x| x + s).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::AddScalar(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|x| x.tanh()).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Sigmoid(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let data = self.value(a).data.iter().map(|&x| x * sigmoid(x)).collect();
        let rg = self.rg(a);
        self.push(Tensor::new(self.shape(a).to_vec(), data), Op::Silu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let data = self.value(a).data.clone();
        let rg = self.rg(a);
        self.push(Tensor::new(shape, data), Op::Reshape(a), rg)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xs, ws) = (self.shape(x), self.shape(w));
        assert_eq!(xs.len(), 2, "linear: input must be 2D");
        assert_eq!(ws.len(), 2, "linear: weight must be 2D");
        let (n, input) = (xs[0], xs[1]);
        let out = ws[0];
        assert_eq!(ws[1], input, "linear: weight/input width mismatch");
        if let Some(b) = b {
            assert_eq!(self.shape(b), [out], "linear: bias shape mismatch");
        }
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let mut data = vec![0.0; n * out];
        for i in 0..n {
            let xr = &xv[i * input..(i + 1) * input];
            let yr = &mut data[i * out..(i + 1) * out];
            for (o, y) in yr.iter_mut().enumerate() {
                let wr = &wv[o * input..(o + 1) * input];
                *y = xr.iter().zip(wr).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(b) = b {
            let bv = &self.value(b).data;
            for row in data.chunks_mut(out) {
                for (y, bb) in row.iter_mut().zip(bv) {
                    *y += bb;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(Tensor::new(vec![n, out], data), Op::Linear { x, w, b }, rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (n, m) = (s[0], s[1]);
        assert!(start + len <= m, "slice_cols out of range");
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&xv[i * m + start..i * m + start + len]);
        }
        let rg = self.rg(x);
        self.push(Tensor::new(vec![n, len], data), Op::SliceCols { x, start }, rg)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 2 && sb.len() == 2 && sa[0] == sb[0], "concat_cols shape mismatch");
        let (n, ma, mb) = (sa[0], sa[1], sb[1]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(n * (ma + mb));
        for i in 0..n {
            data.extend_from_slice(&av[i * ma..(i + 1) * ma]);
            data.extend_from_slice(&bv[i * mb..(i + 1) * mb]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![n, ma + mb], data), Op::ConcatCols(a, b), rg)
    }

    /// Stacks `(1, d)` or `(d)` nodes into an `(n, d)` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack_rows of nothing");
        let d = self.value(rows[0]).len();
        let mut data = Vec::with_capacity(rows.len() * d);
        let mut rg = false;
        for &r in rows {
            let v = self.value(r);
            assert_eq!(v.len(), d, "stack_rows: ragged rows");
            data.extend_from_slice(&v.data);
            rg |= self.rg(r);
        }
        self.push(Tensor::new(vec![rows.len(), d], data), Op::StackRows(rows.to_vec()), rg)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let (n, d) = (s[0], s[1]);
        let xv = &self.value(x).data;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            assert!(i < n, "gather_rows index out of range");
            data.extend_from_slice(&xv[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        self.push(
            Tensor::new(vec![idx.len(), d], data),
            Op::GatherRows { x, idx: idx.to_vec() },
            rg,
        )
    }

    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 3, "conv1d: input must be (B, C, L)");
        assert_eq!(ws.len(), 3, "conv1d: weight must be (Cout, Cin, K)");
        let (batch, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv1d: channel mismatch");
        assert_eq!(k % 2, 1, "conv1d: kernel must be odd");
        assert_eq!(self.shape(b), [cout], "conv1d: bias shape");
        let pad = k / 2;
        let xv = &self.value(x).data;
        let wv = &self.value(w).data;
        let bv = &self.value(b).data;
        let mut out = vec![0.0; batch * cout * len];
        for bi in 0..batch {
            for co in 0..cout {
                let orow = &mut out[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                orow.iter_mut().for_each(|o| *o = bv[co]);
                for ci in 0..cin {
                    let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                    for kk in 0..k {
                        let wt = wv[(co * cin + ci) * k + kk];
                        // out[l] += wt * x[l + kk - pad]
                        let (lo, hi) = valid_range(len, kk, pad);
                        let src = &xrow[lo + kk - pad..hi + kk - pad];
                        for (o, s) in orow[lo..hi].iter_mut().zip(src) {
                            *o += wt * s;
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(Tensor::new(vec![batch, cout, len], out), Op::Conv1d { x, w, b }, rg)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        assert_eq!(s[2] % 2, 0, "avg_pool2: odd length");
        let half = s[2] / 2;
        let data = self.value(x).data.chunks(2).map(|p| 0.5 * (p[0] + p[1])).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1], half], data), Op::AvgPool2(x), rg)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3);
        let data = self.value(x).data.iter().flat_map(|&v| [v, v]).collect();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![s[0], s[1], s[2] * 2], data), Op::Upsample2(x), rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "concat_channels: rank");
        assert!(sa[0] == sb[0] && sa[2] == sb[2], "concat_channels: shape mismatch");
        let (batch, ca, cb, len) = (sa[0], sa[1], sb[1], sa[2]);
        let (av, bv) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(batch * (ca + cb) * len);
        for bi in 0..batch {
            data.extend_from_slice(&av[bi * ca * len..(bi + 1) * ca * len]);
            data.extend_from_slice(&bv[bi * cb * len..(bi + 1) * cb * len]);
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::new(vec![batch, ca + cb, len], data), Op::ConcatChannels(a, b), rg)
    }

    pub fn add_per_channel(&mut self, h: Var, v: Var) -> Var {
        let s = self.shape(h).to_vec();
        assert_eq!(self.shape(v), [s[0], s[1]], "add_per_channel: shape mismatch");
        let len = s[2];
        let vv = &self.value(v).data;
        let mut data = self.value(h).data.clone();
        for (row, add) in data.chunks_mut(len).zip(vv) {
            row.iter_mut().for_each(|x| *x += add);
        }
        let rg = self.rg(h) || self.rg(v);
        self.push(Tensor::new(s, data), Op::AddPerChannel { h, v }, rg)
    }

    pub fn film(&mut self, h: Var, gamma: Var, delta: Var) -> Var {
        let s = self.shape(h).to_vec();
        assert_eq!(self.shape(gamma), [s[0], s[1]], "film: gamma shape");
        assert_eq!(self.shape(delta), [s[0], s[1]], "film: delta shape");
        let len = s[2];
        let (gv, dv) = (&self.value(gamma).data, &self.value(delta).data);
        let mut data = self.value(h).data.clone();
        for ((row, g), d) in data.chunks_mut(len).zip(gv).zip(dv) {
            row.iter_mut().for_each(|x| *x = g * *x + d);
        }
        let rg = self.rg(h) || self.rg(gamma) || self.rg(delta);
        self.push(Tensor::new(s, data), Op::Film { h, gamma, delta }, rg)
    }

    /// `(B, C)` to `(B, C, len)` by repetition along the last axis.
    pub fn broadcast_len(&mut self, v: Var, len: usize) -> Var {
        let s = self.shape(v).to_vec();
        assert_eq!(s.len(), 2);
        let data = self
            .value(v)
            .data
            .iter()
            .flat_map(|&x| std::iter::repeat(x).take(len))
            .collect();
        let rg = self.rg(v);
        self.push(Tensor::new(vec![s[0], s[1], len], data), Op::BroadcastLen { v, len }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.data.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(m), Op::Mean(x), rg)
    }

    /// Mean SmoothL1 (transition at 1) between `pred` and a fixed target.
    pub fn smooth_l1_mean(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = &self.value(pred).data;
        assert_eq!(p.len(), target.len(), "smooth_l1_mean: length mismatch");
        let s: f64 = p.iter().zip(target).map(|(a, b)| smooth_l1(a - b).0).sum();
        let m = s / p.len() as f64;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(m),
            Op::SmoothL1Mean { pred, target: target.to_vec() },
            rg,
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits` (n, classes).
    pub fn cross_entropy_mean(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits).to_vec();
        assert_eq!(s.len(), 2);
        let (n, k) = (s[0], s[1]);
        assert_eq!(labels.len(), n, "cross_entropy_mean: label count");
        let lv = &self.value(logits).data;
        let mut total = 0.0;
        for (row, &y) in lv.chunks(k).zip(labels) {
            assert!(y < k, "cross_entropy_mean: label out of range");
            total += log_sum_exp(row) - row[y];
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / n as f64),
            Op::CrossEntropyMean { logits, labels: labels.to_vec() },
            rg,
        )
    }

    pub fn mse_mean(&mut self, pred: Var, target: &[f64]) -> Var {
        let p = &self.value(pred).data;
        assert_eq!(p.len(), target.len(), "mse_mean: length mismatch");
        let s: f64 = p.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(s / p.len() as f64),
            Op::MseMean { pred, target: target.to_vec() },
            rg,
        )
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward from a non-scalar node");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        if !self.rg(root) {
            return Gradients { grads };
        }
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(&node.op, &node.value, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.rg(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}
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
            Op::Mul(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), w) in ga.iter_mut().zip(g).zip(bv) {
                        *x += y * w;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, y), w) in gb.iter_mut().zip(g).zip(av) {
                        *x += y * w;
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Tanh(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), t) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += y * (1.0 - t * t);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), s) in ga.iter_mut().zip(g).zip(&out.data) {
                        *x += y * s * (1.0 - s);
                    }
                }
            }
            Op::Silu(a) => {
                let av = &self.value(*a).data;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, y), &z) in ga.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(z);
                        *x += y * (s + z * s * (1.0 - s));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, input) = (xs[0], xs[1]);
                let outw = self.shape(*w)[0];
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..n {
                        let gr = &g[i * outw..(i + 1) * outw];
                        let dx = &mut gx[i * input..(i + 1) * input];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * input..(o + 1) * input];
                            dx.iter_mut().zip(wr).for_each(|(d, ww)| *d += go * ww);
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for i in 0..n {
                        let gr = &g[i * outw..(i + 1) * outw];
                        let xr = &xv[i * input..(i + 1) * input];
                        for (o, &go) in gr.iter().enumerate() {
                            if go == 0.0 {
                                continue;
                            }
                            let dw = &mut gw[o * input..(o + 1) * input];
                            dw.iter_mut().zip(xr).for_each(|(d, xx)| *d += go * xx);
                        }
                    }
                }
                if let Some(b) = b {
                    if let Some(gb) = self.acc(grads, *b) {
                        for row in g.chunks(outw) {
                            gb.iter_mut().zip(row).for_each(|(d, y)| *d += y);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let m = self.shape(*x)[1];
                let len = out.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, row) in g.chunks(len.max(1)).enumerate() {
                        let dst = &mut gx[i * m + start..i * m + start + len];
                        dst.iter_mut().zip(row).for_each(|(d, y)| *d += y);
                    }
                }
            }
            Op::ConcatCols(a, b) => {
                let (ma, mb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let m = ma + mb;
                if let Some(ga) = self.acc(grads, *a) {
                    for (i, row) in g.chunks(m).enumerate() {
                        let dst = &mut ga[i * ma..(i + 1) * ma];
                        dst.iter_mut().zip(&row[..ma]).for_each(|(d, y)| *d += y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (i, row) in g.chunks(m).enumerate() {
                        let dst = &mut gb[i * mb..(i + 1) * mb];
                        dst.iter_mut().zip(&row[ma..]).for_each(|(d, y)| *d += y);
                    }
                }
            }
            Op::StackRows(rows) => {
                let d = out.shape[1];
                for (i, r) in rows.iter().enumerate() {
                    if let Some(gr) = self.acc(grads, *r) {
                        gr.iter_mut().zip(&g[i * d..(i + 1) * d]).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                let d = out.shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in idx.iter().enumerate() {
                        let dst = &mut gx[i * d..(i + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(a, y)| *a += y);
                    }
                }
            }
            Op::Conv1d { x, w, b } => {
                let xs = self.shape(*x);
                let (batch, cin, len) = (xs[0], xs[1], xs[2]);
                let ws = self.shape(*w);
                let (cout, k) = (ws[0], ws[2]);
                let pad = k / 2;
                let xv = &self.value(*x).data;
                let wv = &self.value(*w).data;
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                            gb[co] += grow.iter().sum::<f64>();
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                            for ci in 0..cin {
                                let xrow = &xv[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for kk in 0..k {
                                    let (lo, hi) = valid_range(len, kk, pad);
                                    let src = &xrow[lo + kk - pad..hi + kk - pad];
                                    let s: f64 =
                                        grow[lo..hi].iter().zip(src).map(|(a, b)| a * b).sum();
                                    gw[(co * cin + ci) * k + kk] += s;
                                }
                            }
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for bi in 0..batch {
                        for co in 0..cout {
                            let grow = &g[(bi * cout + co) * len..(bi * cout + co + 1) * len];
                            for ci in 0..cin {
                                let xrow =
                                    &mut gx[(bi * cin + ci) * len..(bi * cin + ci + 1) * len];
                                for kk in 0..k {
                                    let wt = wv[(co * cin + ci) * k + kk];
                                    let (lo, hi) = valid_range(len, kk, pad);
                                    let dst = &mut xrow[lo + kk - pad..hi + kk - pad];
                                    for (d, gg) in dst.iter_mut().zip(&grow[lo..hi]) {
                                        *d += wt * gg;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::AvgPool2(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (pair, y) in gx.chunks_mut(2).zip(g) {
                        pair[0] += 0.5 * y;
                        pair[1] += 0.5 * y;
                    }
                }
            }
            Op::Upsample2(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (d, pair) in gx.iter_mut().zip(g.chunks(2)) {
                        *d += pair[0] + pair[1];
                    }
                }
            }
            Op::ConcatChannels(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, ca, cb, len) = (sa[0], sa[1], sb[1], sa[2]);
                let stride = (ca + cb) * len;
                if let Some(ga) = self.acc(grads, *a) {
                    for bi in 0..batch {
                        let src = &g[bi * stride..bi * stride + ca * len];
                        let dst = &mut ga[bi * ca * len..(bi + 1) * ca * len];
                        dst.iter_mut().zip(src).for_each(|(d, y)| *d += y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for bi in 0..batch {
                        let src = &g[bi * stride + ca * len..(bi + 1) * stride];
                        let dst = &mut gb[bi * cb * len..(bi + 1) * cb * len];
                        dst.iter_mut().zip(src).for_each(|(d, y)| *d += y);
                    }
                }
            }
            Op::AddPerChannel { h, v } => {
                let len = out.shape[2];
                if let Some(gh) = self.acc(grads, *h) {
                    gh.iter_mut().zip(g).for_each(|(d, y)| *d += y);
                }
                if let Some(gv) = self.acc(grads, *v) {
                    for (d, row) in gv.iter_mut().zip(g.chunks(len)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Film { h, gamma, delta } => {
                let len = out.shape[2];
                let hv = &self.value(*h).data;
                let gv = &self.value(*gamma).data;
                if let Some(gh) = self.acc(grads, *h) {
                    for ((drow, grow), gm) in gh.chunks_mut(len).zip(g.chunks(len)).zip(gv) {
                        drow.iter_mut().zip(grow).for_each(|(d, y)| *d += gm * y);
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for ((d, grow), hrow) in gg.iter_mut().zip(g.chunks(len)).zip(hv.chunks(len)) {
                        *d += grow.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
                if let Some(gd) = self.acc(grads, *delta) {
                    for (d, grow) in gd.iter_mut().zip(g.chunks(len)) {
                        *d += grow.iter().sum::<f64>();
                    }
                }
            }
            Op::BroadcastLen { v, len } => {
                if let Some(gv) = self.acc(grads, *v) {
                    for (d, row) in gv.iter_mut().zip(g.chunks(*len)) {
                        *d += row.iter().sum::<f64>();
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::SmoothL1Mean { pred, target } => {
                let pv = &self.value(*pred).data;
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *pred) {
                    for ((d, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        *d += g[0] * smooth_l1(p - t).1 / n;
                    }
                }
            }
            Op::CrossEntropyMean { logits, labels } => {
                let k = self.shape(*logits)[1];
                let lv = &self.value(*logits).data;
                let n = labels.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for ((drow, row), &y) in gl.chunks_mut(k).zip(lv.chunks(k)).zip(labels) {
                        let lse = log_sum_exp(row);
                        for (j, (d, z)) in drow.iter_mut().zip(row).enumerate() {
                            let p = (z - lse).exp();
                            let ind = if j == y { 1.0 } else { 0.0 };
                            *d += g[0] * (p - ind) / n;
                        }
                    }
                }
            }
            Op::MseMean { pred, target } => {
                let pv = &self.value(*pred).data;
                let n = pv.len() as f64;
                if let Some(gp) = self.acc(grads, *pred) {
                    for ((d, p), t) in gp.iter_mut().zip(pv).zip(target) {
                        *d += g[0] * 2.0 * (p - t) / n;
                    }
                }
            }
        }
    }
}

/// Output positions `l` in `[lo, hi)` for which `l + kk - pad` is a valid
/// input index.
fn valid_range(len: usize, kk: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(kk);
    let hi = (len + pad).saturating_sub(kk).min(len);
    (lo, hi.max(lo))
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|z| (z - m).exp()).sum::<f64>().ln()
}
