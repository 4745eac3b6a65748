//! Reverse-mode automatic differentiation over a recorded operation tape.
//!
//! Every operation appends a node to the [`Tape`]. Nodes are recorded in
//! topological order, so [`Tape::backward`] walks them once in reverse.
//! Gradients accumulate additively across `backward` calls until
//! [`Tape::zero_grads`] is called.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Sigmoid(Var),
    Conv2d { x: Var, w: Var, b: Var, pad: usize },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Concat(Vec<Var>),
    Softmax(Var),
    Log { x: Var, eps: f64 },
    Sum(Var),
    Mean(Var),
    /// Output element `k` reads input element `index[k]` (gather, transpose).
    Pick { x: Var, index: Vec<usize> },
    Reshape(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
    grad: Option<Vec<f64>>,
}

/// Records operations and computes gradients of scalar roots.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn check_nan(op: &'static str, t: &Tensor) -> Result<()> {
    if t.has_nan() {
        Err(Error::NanInput { op })
    } else {
        Ok(())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.ndim() != rank {
        return Err(Error::ShapeMismatch {
            op,
            left: t.shape().to_vec(),
            right: vec![rank],
        });
    }
    Ok(())
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

    /// A leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        let n = value.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: true,
            grad: Some(vec![0.0; n]),
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            tracked: false,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copies `v` into a new untracked leaf; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked node; `None` for untracked nodes.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            if let Some(g) = node.grad.as_mut() {
                g.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let grad = tracked.then(|| vec![0.0; value.len()]);
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            tracked,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn input(&self, op: &'static str, v: Var) -> Result<&Tensor> {
        let t = &self.nodes[v.0].value;
        check_nan(op, t)?;
        Ok(t)
    }

    /// `(m, k) x (k, n) -> (m, n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.input("matmul", a)?, self.input("matmul", b)?);
        if ta.ndim() != 2 || tb.ndim() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.input("add", a)?, self.input("add", b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` vector to every row of an `(m, n)` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.input("add_row", a)?, self.input("add_row", row)?);
        if ta.ndim() != 2 || tr.ndim() != 1 || ta.shape()[1] != tr.shape()[0] {
            return Err(mismatch("add_row", ta, tr));
        }
        let n = tr.len();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tr.data()[i % n])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::AddRow(a, row), &[a, row]))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.input("mul", a)?, self.input("mul", b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.input("scale", a)?;
        let data = ta.data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Scale(a, factor), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ta = self.input("relu", a)?;
        let data = ta.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Relu(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let ta = self.input("sigmoid", a)?;
        let data = ta.data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Sigmoid(a), &[a]))
    }

    /// Stride-1 cross-correlation with symmetric zero padding.
    ///
    /// `x: (B, Cin, H, W)`, `w: (Cout, Cin, kh, kw)`, `b: (Cout)` give
    /// `(B, Cout, H + 2·pad − kh + 1, W + 2·pad − kw + 1)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let (tx, tw, tb) = (
            self.input("conv2d", x)?,
            self.input("conv2d", w)?,
            self.input("conv2d", b)?,
        );
        expect_rank("conv2d", tx, 4)?;
        expect_rank("conv2d", tw, 4)?;
        let geom = ConvGeom::new(tx.shape(), tw.shape(), pad)
            .ok_or_else(|| mismatch("conv2d", tx, tw))?;
        if tb.shape() != [geom.cout] {
            return Err(mismatch("conv2d", tw, tb));
        }
        let mut out = vec![0.0; geom.batch * geom.cout * geom.oh * geom.ow];
        geom.forward(tx.data(), tw.data(), tb.data(), &mut out);
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.oh, geom.ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, pad }, &[x, w, b]))
    }

    /// Non-overlapping max pooling with a `size × size` window.
    ///
    /// Trailing rows/columns that do not fill a window are dropped; ties
    /// resolve to the first maximum in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let tx = self.input("max_pool2d", x)?;
        expect_rank("max_pool2d", tx, 4)?;
        let s = tx.shape();
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        if size == 0 || h < size || w < size {
            return Err(Error::ShapeMismatch {
                op: "max_pool2d",
                left: s.to_vec(),
                right: vec![size, size],
            });
        }
        let (oh, ow) = (h / size, w / size);
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        let data = tx.data();
        for plane in 0..bc {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for ky in 0..size {
                        for kx in 0..size {
                            let idx = base + (oy * size + ky) * w + ox * size + kx;
                            if data[idx] > data[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(data[best]);
                    argmax.push(best);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        Ok(self.push(value, Op::MaxPool2d { x, argmax }, &[x]))
    }

    /// `(B, C, H, W) -> (B, C)` spatial mean.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.input("global_avg_pool", x)?;
        expect_rank("global_avg_pool", tx, 4)?;
        let s = tx.shape();
        let hw = s[2] * s[3];
        let data = tx
            .data()
            .chunks(hw.max(1))
            .map(|plane| plane.iter().sum::<f64>() / hw as f64)
            .collect();
        let value = Tensor::new(vec![s[0], s[1]], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), &[x]))
    }

    /// Concatenates 2-D tensors with equal row counts along the column axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(Error::Empty("concat input"))?;
        let rows = self.value(*first).shape().first().copied().unwrap_or(0);
        let mut cols = 0;
        for &p in parts {
            let t = self.input("concat", p)?;
            if t.ndim() != 2 || t.shape()[0] != rows {
                return Err(mismatch("concat", self.value(*first), t));
            }
            cols += t.shape()[1];
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(value, Op::Concat(parts.to_vec()), parts))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.input("softmax", x)?;
        expect_rank("softmax", tx, 2)?;
        let k = tx.shape()[1];
        let mut data = Vec::with_capacity(tx.len());
        for row in tx.data().chunks(k.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            let mut total = 0.0;
            for &v in row {
                let e = libm::exp(v - max);
                total += e;
                data.push(e);
            }
            data[start..].iter_mut().for_each(|e| *e /= total);
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Softmax(x), &[x]))
    }

    /// Elementwise `ln(max(x, eps))`. The gradient is zero where the clamp is
    /// active. Pass `eps = 0.0` for the unclamped logarithm.
    pub fn log(&mut self, x: Var, eps: f64) -> Result<Var> {
        let tx = self.input("log", x)?;
        let data = tx.data().iter().map(|&v| libm::log(v.max(eps))).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(value, Op::Log { x, eps }, &[x]))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.input("sum", x)?;
        let value = Tensor::scalar(tx.data().iter().sum());
        Ok(self.push(value, Op::Sum(x), &[x]))
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.input("mean", x)?;
        if tx.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let value = Tensor::scalar(tx.data().iter().sum::<f64>() / tx.len() as f64);
        Ok(self.push(value, Op::Mean(x), &[x]))
    }

    /// Picks `x[i, index[i]]` for every row of a 2-D tensor.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.input("gather", x)?;
        expect_rank("gather", tx, 2)?;
        let (rows, k) = (tx.shape()[0], tx.shape()[1]);
        if index.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "gather",
                left: tx.shape().to_vec(),
                right: vec![index.len()],
            });
        }
        if let Some(bad) = index.iter().find(|&&c| c >= k) {
            return Err(invalid(alloc::format!(
                "gather: index {bad} out of range for {k} columns"
            )));
        }
        let flat: Vec<usize> = index.iter().enumerate().map(|(i, &c)| i * k + c).collect();
        let data = flat.iter().map(|&i| tx.data()[i]).collect();
        let value = Tensor::new(vec![rows], data)?;
        Ok(self.push(value, Op::Pick { x, index: flat }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let tx = self.input("reshape", x)?;
        let value = tx.clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// `x · wᵀ + b` for `x: (B, in)`, `w: (out, in)`, `b: (out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let wt = self.transpose(w)?;
        let y = self.matmul(x, wt)?;
        self.add_row(y, b)
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, w: Var) -> Result<Var> {
        let tw = self.input("transpose", w)?;
        expect_rank("transpose", tw, 2)?;
        let (r, c) = (tw.shape()[0], tw.shape()[1]);
        let index: Vec<usize> = (0..r * c).map(|k| (k % r) * c + k / r).collect();
        let data = index.iter().map(|&i| tw.data()[i]).collect();
        let value = Tensor::new(vec![c, r], data)?;
        Ok(self.push(value, Op::Pick { x: w, index }, &[w]))
    }

    /// Fills gradients of every tracked node with `∂root/∂node`, adding to
    /// whatever was accumulated by earlier calls.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 || root_node.value.ndim() > 1 {
            return Err(Error::NonScalarRoot(root_node.value.shape().to_vec()));
        }
        if !root_node.tracked {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            if let Some(acc) = self.nodes[i].grad.as_mut() {
                acc.iter_mut().zip(&g).for_each(|(a, d)| *a += d);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].tracked {
                return;
            }
            let n = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                send(*a, &mut |da| {
                    for r in 0..m {
                        for c in 0..n {
                            let go = g[r * n + c];
                            if go == 0.0 {
                                continue;
                            }
                            let brow = c;
                            for p in 0..k {
                                da[r * k + p] += go * tb.data()[p * n + brow];
                            }
                        }
                    }
                });
                send(*b, &mut |db| {
                    for r in 0..m {
                        for p in 0..k {
                            let av = ta.data()[r * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            let dst = &mut db[p * n..(p + 1) * n];
                            let src = &g[r * n..(r + 1) * n];
                            dst.iter_mut().zip(src).for_each(|(d, s)| *d += av * s);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                send(*a, &mut |da| add_assign(da, g));
                send(*b, &mut |db| add_assign(db, g));
            }
            Op::AddRow(a, row) => {
                send(*a, &mut |da| add_assign(da, g));
                send(*row, &mut |dr| {
                    let n = dr.len();
                    g.iter().enumerate().for_each(|(i, v)| dr[i % n] += v);
                });
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &mut |da| {
                    for ((d, go), y) in da.iter_mut().zip(g).zip(tb.data()) {
                        *d += go * y;
                    }
                });
                send(*b, &mut |db| {
                    for ((d, go), x) in db.iter_mut().zip(g).zip(ta.data()) {
                        *d += go * x;
                    }
                });
            }
            Op::Scale(a, f) => send(*a, &mut |da| {
                da.iter_mut().zip(g).for_each(|(d, go)| *d += go * f);
            }),
            Op::Relu(a) => {
                let ta = self.value(*a);
                send(*a, &mut |da| {
                    for ((d, go), x) in da.iter_mut().zip(g).zip(ta.data()) {
                        if *x > 0.0 {
                            *d += go;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = node.value.data();
                send(*a, &mut |da| {
                    for ((d, go), y) in da.iter_mut().zip(g).zip(out) {
                        *d += go * y * (1.0 - y);
                    }
                });
            }
            Op::Conv2d { x, w, b, pad } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let geom = ConvGeom::new(tx.shape(), tw.shape(), *pad).expect("checked in forward");
                send(*x, &mut |dx| geom.backward_input(g, tw.data(), dx));
                send(*w, &mut |dw| geom.backward_weight(g, tx.data(), dw));
                send(*b, &mut |db| {
                    let plane = geom.oh * geom.ow;
                    for (i, chunk) in g.chunks(plane).enumerate() {
                        db[i % geom.cout] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::MaxPool2d { x, argmax } => send(*x, &mut |dx| {
                for (go, &src) in g.iter().zip(argmax) {
                    dx[src] += go;
                }
            }),
            Op::GlobalAvgPool(x) => {
                let s = self.value(*x).shape();
                let hw = s[2] * s[3];
                send(*x, &mut |dx| {
                    for (plane, go) in dx.chunks_mut(hw.max(1)).zip(g) {
                        let share = go / hw as f64;
                        plane.iter_mut().for_each(|d| *d += share);
                    }
                });
            }
            Op::Concat(parts) => {
                let cols = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let pc = self.value(p).shape()[1];
                    send(p, &mut |dp| {
                        for (r, row) in dp.chunks_mut(pc.max(1)).enumerate() {
                            let src = &g[r * cols + offset..r * cols + offset + pc];
                            add_assign(row, src);
                        }
                    });
                    offset += pc;
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = node.value.shape()[1];
                send(*x, &mut |dx| {
                    for ((drow, yrow), grow) in
                        dx.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in drow.iter_mut().zip(yrow).zip(grow) {
                            *d += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Log { x, eps } => {
                let tx = self.value(*x);
                send(*x, &mut |dx| {
                    for ((d, go), v) in dx.iter_mut().zip(g).zip(tx.data()) {
                        if *v >= *eps && *v != 0.0 {
                            *d += go / v;
                        }
                    }
                });
            }
            Op::Sum(x) => send(*x, &mut |dx| dx.iter_mut().for_each(|d| *d += g[0])),
            Op::Mean(x) => send(*x, &mut |dx| {
                let share = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += share);
            }),
            Op::Pick { x, index } => send(*x, &mut |dx| {
                for (go, &src) in g.iter().zip(index) {
                    dx[src] += go;
                }
            }),
            Op::Reshape(x) => send(*x, &mut |dx| add_assign(dx, g)),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            orow.iter_mut().zip(brow).for_each(|(o, bv)| *o += av * bv);
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], pad: usize) -> Option<Self> {
        let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
        let (cout, wcin, kh, kw) = (w[0], w[1], w[2], w[3]);
        if wcin != cin || h + 2 * pad < kh || wd + 2 * pad < kw || kh == 0 || kw == 0 {
            return None;
        }
        Some(Self {
            batch,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            pad,
            oh: h + 2 * pad - kh + 1,
            ow: wd + 2 * pad - kw + 1,
        })
    }

    /// Output columns `ox` whose input column `ox + kx − pad` is in bounds.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    fn row_in(&self, oy: usize, ky: usize) -> Option<usize> {
        let iy = oy + ky;
        (iy >= self.pad && iy - self.pad < self.h).then(|| iy - self.pad)
    }

    fn forward(&self, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) {
        let (ohw, hw) = (self.oh * self.ow, self.h * self.w);
        for n in 0..self.batch {
            for co in 0..self.cout {
                let obase = (n * self.cout + co) * ohw;
                out[obase..obase + ohw].iter_mut().for_each(|o| *o = b[co]);
                for ci in 0..self.cin {
                    let xbase = (n * self.cin + ci) * hw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = w[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                            let (lo, hi) = self.col_range(kx);
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let orow = &mut out[obase + oy * self.ow + lo..obase + oy * self.ow + hi];
                                let xs = xbase + iy * self.w + lo + kx - self.pad;
                                let xrow = &x[xs..xs + (hi - lo)];
                                orow.iter_mut().zip(xrow).for_each(|(o, xv)| *o += wv * xv);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_input(&self, g: &[f64], w: &[f64], dx: &mut [f64]) {
        let (ohw, hw) = (self.oh * self.ow, self.h * self.w);
        for n in 0..self.batch {
            for co in 0..self.cout {
                let gbase = (n * self.cout + co) * ohw;
                for ci in 0..self.cin {
                    let xbase = (n * self.cin + ci) * hw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let wv = w[((co * self.cin + ci) * self.kh + ky) * self.kw + kx];
                            let (lo, hi) = self.col_range(kx);
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let grow = &g[gbase + oy * self.ow + lo..gbase + oy * self.ow + hi];
                                let xs = xbase + iy * self.w + lo + kx - self.pad;
                                let drow = &mut dx[xs..xs + (hi - lo)];
                                drow.iter_mut().zip(grow).for_each(|(d, gv)| *d += wv * gv);
                            }
                        }
                    }
                }
            }
        }
    }

    fn backward_weight(&self, g: &[f64], x: &[f64], dw: &mut [f64]) {
        let (ohw, hw) = (self.oh * self.ow, self.h * self.w);
        for n in 0..self.batch {
            for co in 0..self.cout {
                let gbase = (n * self.cout + co) * ohw;
                for ci in 0..self.cin {
                    let xbase = (n * self.cin + ci) * hw;
                    for ky in 0..self.kh {
                        for kx in 0..self.kw {
                            let (lo, hi) = self.col_range(kx);
                            let mut acc = 0.0;
                            for oy in 0..self.oh {
                                let Some(iy) = self.row_in(oy, ky) else { continue };
                                let grow = &g[gbase + oy * self.ow + lo..gbase + oy * self.ow + hi];
                                let xs = xbase + iy * self.w + lo + kx - self.pad;
                                let xrow = &x[xs..xs + (hi - lo)];
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                            dw[((co * self.cin + ci) * self.kh + ky) * self.kw + kx] += acc;
                        }
                    }
                }
            }
        }
    }
}
