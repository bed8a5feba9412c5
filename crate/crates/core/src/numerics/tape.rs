//! Reverse-mode differentiation over a linear operation tape.
//!
//! Every operation appends one node whose parents already live on the tape,
//! so insertion order is a topological order and the backward pass is a
//! single reverse sweep.

use std::sync::atomic::{AtomicU32, Ordering};

use super::tensor::{NumericsError, Result, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(0);

/// Handle to a value recorded on a [`GradTape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.idx
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Relu(Var),
    SoftmaxRows(Var),
    TransposeLastTwo(Var),
    ConcatLast(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Embedding { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f32>, inv_std: Vec<f32> },
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f32> },
    Conv2d { x: Var, kernel: Var, bias: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of operations for one forward/backward pass.
#[derive(Debug)]
pub struct GradTape {
    id: u32,
    nodes: Vec<Node>,
}

impl Default for GradTape {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(op: &'static str, data: &[f32]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NumericsError::NonFinite(op))
    }
}

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

/// `out[m,n] += a[m,k] * b[k,n]`
fn gemm_acc(a: &[f32], b: &[f32], out: &mut [f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_raw(x: &[f32], batch: usize, r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    for b in 0..batch {
        let off = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[off + j * r + i] = x[off + i * c + j];
            }
        }
    }
    out
}

fn accumulate(slot: &mut Option<Vec<f32>>, delta: &[f32]) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta.to_vec()),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().expect("tensors have rank >= 1")
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(NumericsError::DisconnectedGraph);
        }
        self.nodes.get(v.idx).ok_or(NumericsError::DisconnectedGraph)
    }

    fn val(&self, v: Var) -> Result<&Tensor> {
        Ok(&self.node(v)?.value)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.idx].requires_grad)
    }

    /// Records a leaf; gradients are tracked when the tensor requires them.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        self.push(t, Op::Leaf, rg)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(true))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.idx].value
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes.get(v.idx).and_then(|n| n.value.grad())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        let ((m, k), (k2, n)) = match (ta.dims2(), tb.dims2()) {
            (Some(x), Some(y)) => (x, y),
            _ => return Err(mismatch("matmul", ta.shape(), tb.shape())),
        };
        if k != k2 {
            return Err(mismatch("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(ta.data(), tb.data(), &mut out, m, k, n);
        check_finite("matmul", &out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn zip_same(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Result<(Vec<usize>, Vec<f32>)> {
        let (ta, tb) = (self.val(a)?, self.val(b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta.shape(), tb.shape()));
        }
        let out: Vec<f32> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        check_finite(op, &out)?;
        Ok((ta.shape().to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Add(a, b), rg))
    }

    /// Elementwise product of equal-shape tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Mul(a, b), rg))
    }

    /// Adds a `[n]` bias to every row of a tensor whose last axis is `n`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.val(x)?, self.val(bias)?);
        let n = last_dim(tx.shape());
        if tb.rank() != 1 || tb.numel() != n {
            return Err(mismatch("add_row", tx.shape(), tb.shape()));
        }
        let out: Vec<f32> = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(tb.data()).map(|(a, b)| a + b))
            .collect();
        check_finite("add_row", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::AddRow(x, bias), rg))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let tx = self.val(x)?;
        let out: Vec<f32> = tx.data().iter().map(|v| v * c).collect();
        check_finite("scale", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Scale(x, c), rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let out: Vec<f32> = tx.data().iter().map(|v| v.max(0.0)).collect();
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Relu(x), rg))
    }

    /// Softmax over the last axis, stabilised by subtracting each row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        check_finite("softmax_rows", tx.data())?;
        let n = last_dim(tx.shape());
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(n) {
            softmax_into(row, &mut out);
        }
        check_finite("softmax_rows", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SoftmaxRows(x), rg))
    }

    pub fn transpose_last_two(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let rank = tx.rank();
        if rank < 2 {
            return Err(NumericsError::InvalidShape(tx.shape().to_vec()));
        }
        let (r, c) = (tx.shape()[rank - 2], tx.shape()[rank - 1]);
        let batch = tx.numel() / (r * c);
        let out = transpose_raw(tx.data(), batch, r, c);
        let mut shape = tx.shape().to_vec();
        shape.swap(rank - 2, rank - 1);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::TransposeLastTwo(x), rg))
    }

    /// Concatenates along the last axis; leading dimensions must agree.
    pub fn concat_last_axis(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::InvalidShape(vec![]))?;
        let lead = {
            let s = self.val(*first)?.shape();
            s[..s.len() - 1].to_vec()
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.val(p)?.shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(mismatch("concat_last_axis", &lead, s));
            }
            widths.push(last_dim(s));
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.nodes[p.idx].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(shape, out), Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Stacks rank-2 tensors with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NumericsError::InvalidShape(vec![]))?;
        let (_, n) = self
            .val(*first)?
            .dims2()
            .ok_or_else(|| NumericsError::InvalidShape(self.nodes[first.idx].value.shape().to_vec()))?;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.val(p)?;
            match t.dims2() {
                Some((r, c)) if c == n => {
                    m += r;
                    out.extend_from_slice(t.data());
                }
                _ => return Err(mismatch("concat_rows", &[0, n], t.shape())),
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.val(x)?;
        let (m, n) = tx.dims2().ok_or_else(|| NumericsError::InvalidShape(tx.shape().to_vec()))?;
        if start >= end || end > m {
            return Err(NumericsError::IndexOutOfRange { op: "slice_rows", index: end, bound: m + 1 });
        }
        let out = tx.data()[start * n..end * n].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![end - start, n], out), Op::SliceRows(x, start), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let tx = self.val(x)?;
        if shape.contains(&0) || shape.iter().product::<usize>() != tx.numel() {
            return Err(mismatch("reshape", tx.shape(), &shape));
        }
        let out = tx.data().to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Reshape(x), rg))
    }

    /// Gathers rows of a `[vocab, d]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.val(table)?;
        let (v, d) = tt.dims2().ok_or_else(|| NumericsError::InvalidShape(tt.shape().to_vec()))?;
        if ids.is_empty() {
            return Err(NumericsError::InvalidShape(vec![0, d]));
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange { op: "embedding_lookup", index: id, bound: v });
            }
            out.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    /// Normalises the last axis to zero mean and unit variance, then applies
    /// a learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        const EPS: f64 = 1e-5;
        let (tx, tg, tb) = (self.val(x)?, self.val(gain)?, self.val(bias)?);
        let d = last_dim(tx.shape());
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.numel() / d;
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(d) {
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + EPS).sqrt();
            inv_std.push(is as f32);
            for (j, &v) in row.iter().enumerate() {
                let h = ((v as f64 - mean) * is) as f32;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = tx.shape().to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(Tensor::from_parts(shape, out), Op::LayerNorm { x, gain, bias, xhat, inv_std }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let s = tx.data().iter().map(|&v| v as f64).sum::<f64>() as f32;
        check_finite("sum", &[s])?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![1], vec![s]), Op::Sum(x), rg))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.val(x)?.numel();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f32)
    }

    /// Per-row negative log-likelihood `-log softmax(logits_i)[target_i]`.
    /// Rows whose target is `None` produce 0 and receive no gradient.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.val(logits)?;
        let (m, v) = tl.dims2().ok_or_else(|| NumericsError::InvalidShape(tl.shape().to_vec()))?;
        if targets.len() != m {
            return Err(mismatch("cross_entropy_rows", tl.shape(), &[targets.len()]));
        }
        let mut probs = Vec::with_capacity(m * v);
        let mut losses = Vec::with_capacity(m);
        for (row, t) in tl.data().chunks(v).zip(targets) {
            let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&x| (x as f64 - mx).exp()).sum();
            let lse = mx + z.ln();
            probs.extend(row.iter().map(|&x| ((x as f64 - mx).exp() / z) as f32));
            match t {
                Some(t) if *t >= v => {
                    return Err(NumericsError::IndexOutOfRange { op: "cross_entropy_rows", index: *t, bound: v })
                }
                Some(t) => losses.push((lse - row[*t] as f64) as f32),
                None => losses.push(0.0),
            }
        }
        check_finite("cross_entropy_rows", &losses)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::from_parts(vec![m], losses),
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            rg,
        ))
    }

    /// 3×3 convolution, stride 1, zero padding 1, over a `[C,H,W]` input with a
    /// `[O,C,3,3]` kernel and `[O]` bias.
    pub fn conv2d_3x3(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (tx, tk, tb) = (self.val(x)?, self.val(kernel)?, self.val(bias)?);
        let (c, h, w) = match tx.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(NumericsError::InvalidShape(s.to_vec())),
        };
        let o = match tk.shape() {
            [o, kc, 3, 3] if *kc == c => *o,
            s => return Err(mismatch("conv2d_3x3", tx.shape(), s)),
        };
        if tb.shape() != [o] {
            return Err(mismatch("conv2d_3x3", tk.shape(), tb.shape()));
        }
        let (xd, kd) = (tx.data(), tk.data());
        let mut out = vec![0.0f32; o * h * w];
        for oc in 0..o {
            let plane = &mut out[oc * h * w..(oc + 1) * h * w];
            plane.iter_mut().for_each(|v| *v = tb.data()[oc]);
            for ic in 0..c {
                let inp = &xd[ic * h * w..(ic + 1) * h * w];
                let kern = &kd[(oc * c + ic) * 9..(oc * c + ic + 1) * 9];
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = 0.0;
                        for ky in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = xx as isize + kx as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kern[ky * 3 + kx] * inp[iy as usize * w + ix as usize];
                            }
                        }
                        plane[y * w + xx] += acc;
                    }
                }
            }
        }
        check_finite("conv2d_3x3", &out)?;
        let rg = self.rg(&[x, kernel, bias]);
        Ok(self.push(Tensor::from_parts(vec![o, h, w], out), Op::Conv2d { x, kernel, bias }, rg))
    }

    /// 2×2 max pooling with stride 2 over `[C,H,W]`; odd trailing rows and
    /// columns are dropped. Ties go to the first element in scan order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let (c, h, w) = match tx.shape() {
            [c, h, w] if *h >= 2 && *w >= 2 => (*c, *h, *w),
            s => return Err(NumericsError::InvalidShape(s.to_vec())),
        };
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = ch * h * w + (2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = ch * h * w + (2 * y + dy) * w + 2 * xx + dx;
                        if tx.data()[idx] > tx.data()[best] {
                            best = idx;
                        }
                    }
                    out.push(tx.data()[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c, oh, ow], out), Op::MaxPool2 { x, argmax }, rg))
    }

    /// Mean over the spatial axes of `[C,H,W]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.val(x)?;
        let (c, hw) = match tx.shape() {
            [c, h, w] => (*c, h * w),
            s => return Err(NumericsError::InvalidShape(s.to_vec())),
        };
        let out: Vec<f32> = tx
            .data()
            .chunks(hw)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / hw as f64) as f32)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_parts(vec![c], out), Op::GlobalAvgPool(x), rg))
    }

    /// Runs the reverse sweep from a scalar `loss`, populating gradients on
    /// every node that requires them. If any gradient overflows, no node is
    /// touched and `NonFinite` is returned.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.val(loss)?;
        if lt.numel() != 1 {
            return Err(NumericsError::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.idx + 1];
        grads[loss.idx] = Some(vec![1.0]);
        let mut done = Vec::new();
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            check_finite("backward", &g)?;
            self.propagate(i, &g, &mut grads);
            done.push((i, g));
        }
        for (i, g) in done {
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.idx].requires_grad
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                let (m, k) = ta.dims2().unwrap();
                let n = tb.dims2().unwrap().1;
                if self.wants(*a) {
                    let bt = transpose_raw(tb.data(), 1, k, n);
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, &bt, &mut da, m, n, k);
                    accumulate(&mut grads[a.idx], &da);
                }
                if self.wants(*b) {
                    let at = transpose_raw(ta.data(), 1, m, k);
                    let mut db = vec![0.0; k * n];
                    gemm_acc(&at, g, &mut db, k, m, n);
                    accumulate(&mut grads[b.idx], &db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(&mut grads[v.idx], g);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if self.wants(*x) {
                    accumulate(&mut grads[x.idx], g);
                }
                if self.wants(*bias) {
                    let n = last_dim(out.shape());
                    let mut db = vec![0.0; n];
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(&mut grads[bias.idx], &db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[a.idx].value, &self.nodes[b.idx].value);
                if self.wants(*a) {
                    let d: Vec<f32> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads[a.idx], &d);
                }
                if self.wants(*b) {
                    let d: Vec<f32> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads[b.idx], &d);
                }
            }
            Op::Scale(x, c) => {
                let d: Vec<f32> = g.iter().map(|v| v * c).collect();
                accumulate(&mut grads[x.idx], &d);
            }
            Op::Relu(x) => {
                let tx = &self.nodes[x.idx].value;
                let d: Vec<f32> =
                    g.iter().zip(tx.data()).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect();
                accumulate(&mut grads[x.idx], &d);
            }
            Op::SoftmaxRows(x) => {
                let n = last_dim(out.shape());
                let mut d = Vec::with_capacity(g.len());
                for (gr, yr) in g.chunks(n).zip(out.data().chunks(n)) {
                    let dot: f32 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    d.extend(gr.iter().zip(yr).map(|(gv, yv)| yv * (gv - dot)));
                }
                accumulate(&mut grads[x.idx], &d);
            }
            Op::TransposeLastTwo(x) => {
                let s = out.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let d = transpose_raw(g, out.numel() / (r * c), r, c);
                accumulate(&mut grads[x.idx], &d);
            }
            Op::ConcatLast(parts) => {
                let total = last_dim(out.shape());
                let rows = out.numel() / total;
                let mut off = 0;
                for p in parts {
                    let w = last_dim(self.nodes[p.idx].value.shape());
                    if self.wants(*p) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        accumulate(&mut grads[p.idx], &d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.nodes[p.idx].value.numel();
                    if self.wants(*p) {
                        accumulate(&mut grads[p.idx], &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::SliceRows(x, start) => {
                let tx = &self.nodes[x.idx].value;
                let n = tx.dims2().unwrap().1;
                let mut d = vec![0.0; tx.numel()];
                d[start * n..start * n + g.len()].copy_from_slice(g);
                accumulate(&mut grads[x.idx], &d);
            }
            Op::Reshape(x) => accumulate(&mut grads[x.idx], g),
            Op::Embedding { table, ids } => {
                let tt = &self.nodes[table.idx].value;
                let d = tt.dims2().unwrap().1;
                let mut dt = vec![0.0; tt.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate(&mut grads[table.idx], &dt);
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let d = last_dim(out.shape());
                let gv = self.nodes[gain.idx].value.data();
                if self.wants(*gain) || self.wants(*bias) {
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    if self.wants(*gain) {
                        accumulate(&mut grads[gain.idx], &dg);
                    }
                    if self.wants(*bias) {
                        accumulate(&mut grads[bias.idx], &db);
                    }
                }
                if self.wants(*x) {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((gr, hr), &is) in g.chunks(d).zip(xhat.chunks(d)).zip(inv_std) {
                        let dh: Vec<f32> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let s1: f32 = dh.iter().sum();
                        let s2: f32 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        let nf = d as f32;
                        dx.extend(
                            dh.iter().zip(hr).map(|(dhj, hj)| is / nf * (nf * dhj - s1 - hj * s2)),
                        );
                    }
                    accumulate(&mut grads[x.idx], &dx);
                }
            }
            Op::Sum(x) => {
                let n = self.nodes[x.idx].value.numel();
                accumulate(&mut grads[x.idx], &vec![g[0]; n]);
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let v = self.nodes[logits.idx].value.dims2().unwrap().1;
                let mut d = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    if let Some(t) = t {
                        for j in 0..v {
                            d[r * v + j] = g[r] * probs[r * v + j];
                        }
                        d[r * v + t] -= g[r];
                    }
                }
                accumulate(&mut grads[logits.idx], &d);
            }
            Op::Conv2d { x, kernel, bias } => {
                let (tx, tk) = (&self.nodes[x.idx].value, &self.nodes[kernel.idx].value);
                let (c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2]);
                let o = tk.shape()[0];
                let (wx, wk) = (self.wants(*x), self.wants(*kernel));
                let mut dx = vec![0.0; if wx { tx.numel() } else { 0 }];
                let mut dk = vec![0.0; if wk { tk.numel() } else { 0 }];
                for oc in 0..o {
                    let gp = &g[oc * h * w..(oc + 1) * h * w];
                    for ic in 0..c {
                        let kbase = (oc * c + ic) * 9;
                        for y in 0..h {
                            for xx in 0..w {
                                let gv = gp[y * w + xx];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ky in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = xx as isize + kx as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let xi = ic * h * w + iy as usize * w + ix as usize;
                                        if wk {
                                            dk[kbase + ky * 3 + kx] += gv * tx.data()[xi];
                                        }
                                        if wx {
                                            dx[xi] += gv * tk.data()[kbase + ky * 3 + kx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if wx {
                    accumulate(&mut grads[x.idx], &dx);
                }
                if wk {
                    accumulate(&mut grads[kernel.idx], &dk);
                }
                if self.wants(*bias) {
                    let db: Vec<f32> = g.chunks(h * w).map(|p| p.iter().sum()).collect();
                    accumulate(&mut grads[bias.idx], &db);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![0.0; self.nodes[x.idx].value.numel()];
                for (gv, &src) in g.iter().zip(argmax) {
                    d[src] += gv;
                }
                accumulate(&mut grads[x.idx], &d);
            }
            Op::GlobalAvgPool(x) => {
                let tx = &self.nodes[x.idx].value;
                let hw = tx.numel() / tx.shape()[0];
                let d: Vec<f32> =
                    g.iter().flat_map(|&gv| std::iter::repeat_n(gv / hw as f32, hw)).collect();
                accumulate(&mut grads[x.idx], &d);
            }
        }
    }
}

/// Stable softmax of one row, appended to `out`.
fn softmax_into(row: &[f32], out: &mut Vec<f32>) {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = row.iter().map(|&v| ((v - mx) as f64).exp()).collect();
    let z: f64 = exps.iter().sum();
    out.extend(exps.iter().map(|e| (e / z) as f32));
}

/// Row-wise stable softmax outside any tape.
pub fn softmax(row: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(row.len());
    softmax_into(row, &mut out);
    out
}

/// Natural-log softmax of one row, in `f64`.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = mx + row.iter().map(|&v| (v as f64 - mx).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v as f64 - lse).collect()
}
