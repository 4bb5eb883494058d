//! Dense f32 tensors with reverse-mode automatic differentiation.
//!
//! Every op records its inputs so that [`Tensor::backward`] can replay the
//! graph in reverse creation order and accumulate gradients into parameter
//! sinks. Matrix products are delegated to `matrixmultiply::sgemm`; all other
//! kernels are plain loops. Single-threaded by construction (`Rc` handles),
//! which is what makes seeded runs bit-reproducible.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

/// Input floor for `log`, and the norm floor for row normalization.
pub const LOG_FLOOR: f32 = 1e-12;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Scale(f32),
    Matmul,
    Relu,
    Gelu,
    Exp,
    Log,
    Softmax,
    LayerNorm(f32),
    MeanAxis(usize),
    SumAxis(usize),
    SumAll,
    L2NormRows,
    Concat(usize),
    Reshape,
    Transpose,
    SliceCols(usize, usize),
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f32>,
    op: Op,
    inputs: Vec<Tensor>,
    requires_grad: bool,
    /// Shared with the owning `Parameter`; backward adds the leaf gradient here.
    grad_sink: Option<Rc<RefCell<GradBuf>>>,
}

/// Gradient accumulator shared between a `Parameter` and its graph leaves.
pub(crate) struct GradBuf {
    pub data: Vec<f32>,
    /// Set whenever backward reaches the leaf; distinguishes a genuinely
    /// zero gradient from a parameter the graph never touched.
    pub touched: bool,
}

/// Handle to a node of the computation graph.
#[derive(Clone)]
pub struct Tensor(Rc<Inner>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("op", &self.0.op)
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new(shape: Vec<usize>, data: Vec<f32>, op: Op, inputs: Vec<Tensor>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        let requires_grad = inputs.iter().any(|t| t.requires_grad());
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            op,
            inputs,
            requires_grad,
            grad_sink: None,
        }))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Invalid(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::new(shape.to_vec(), data, Op::Leaf, vec![]))
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::new(vec![1], vec![v], Op::Leaf, vec![])
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)], Op::Leaf, vec![])
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::new(shape.to_vec(), vec![v; numel(shape)], Op::Leaf, vec![])
    }

    /// Gradient-carrying leaf whose backward result is accumulated into `sink`.
    pub(crate) fn leaf_with_sink(
        data: Vec<f32>,
        shape: Vec<usize>,
        sink: Rc<RefCell<GradBuf>>,
    ) -> Tensor {
        Tensor(Rc::new(Inner {
            id: fresh_id(),
            shape,
            data,
            op: Op::Leaf,
            inputs: vec![],
            requires_grad: true,
            grad_sink: Some(sink),
        }))
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.0.data
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Cut the graph: same values, no history, no gradient.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.0.shape.clone(), self.0.data.clone(), Op::Leaf, vec![])
    }

    fn rows_cols(&self) -> (usize, usize) {
        let last = *self.0.shape.last().unwrap_or(&1);
        (self.numel() / last.max(1), last)
    }

    // ---- elementwise binary ops (rhs broadcasts: same shape, scalar, or last-dim vector) ----

    fn check_broadcast(&self, rhs: &Tensor, op: &'static str) -> Result<Bcast> {
        if self.shape() == rhs.shape() {
            Ok(Bcast::Same)
        } else if rhs.numel() == 1 {
            Ok(Bcast::Scalar)
        } else if rhs.0.shape.len() == 1 && rhs.numel() == *self.0.shape.last().unwrap_or(&0) {
            Ok(Bcast::Row)
        } else {
            Err(Error::Shape {
                op,
                lhs: self.0.shape.clone(),
                rhs: rhs.0.shape.clone(),
            })
        }
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let b = self.check_broadcast(rhs, "add")?;
        let data = bcast_zip(&self.0.data, &rhs.0.data, b, |a, c| a + c);
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            Op::Add,
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let b = self.check_broadcast(rhs, "sub")?;
        let data = bcast_zip(&self.0.data, &rhs.0.data, b, |a, c| a - c);
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            Op::Sub,
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let b = self.check_broadcast(rhs, "mul")?;
        let data = bcast_zip(&self.0.data, &rhs.0.data, b, |a, c| a * c);
        Ok(Tensor::new(
            self.0.shape.clone(),
            data,
            Op::Mul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    pub fn scale(&self, s: f32) -> Tensor {
        let data = self.0.data.iter().map(|v| v * s).collect();
        Tensor::new(self.0.shape.clone(), data, Op::Scale(s), vec![self.clone()])
    }

    // ---- matmul ----

    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.0.shape.len() != 2 || rhs.0.shape.len() != 2 || self.0.shape[1] != rhs.0.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.0.shape.clone(),
                rhs: rhs.0.shape.clone(),
            });
        }
        let (m, k) = (self.0.shape[0], self.0.shape[1]);
        let n = rhs.0.shape[1];
        let mut out = vec![0.0f32; m * n];
        sgemm(
            m, k, n, 1.0, &self.0.data, k as isize, 1, &rhs.0.data, n as isize, 1, &mut out,
        );
        Ok(Tensor::new(
            vec![m, n],
            out,
            Op::Matmul,
            vec![self.clone(), rhs.clone()],
        ))
    }

    // ---- elementwise unary ----

    pub fn relu(&self) -> Tensor {
        let data = self.0.data.iter().map(|&v| v.max(0.0)).collect();
        Tensor::new(self.0.shape.clone(), data, Op::Relu, vec![self.clone()])
    }

    pub fn gelu(&self) -> Tensor {
        let data = self.0.data.iter().map(|&v| gelu_fwd(v)).collect();
        Tensor::new(self.0.shape.clone(), data, Op::Gelu, vec![self.clone()])
    }

    pub fn exp(&self) -> Tensor {
        let data = self.0.data.iter().map(|&v| v.exp()).collect();
        Tensor::new(self.0.shape.clone(), data, Op::Exp, vec![self.clone()])
    }

    /// Natural log with input floored at `LOG_FLOOR`.
    pub fn log(&self) -> Tensor {
        let data = self.0.data.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect();
        Tensor::new(self.0.shape.clone(), data, Op::Log, vec![self.clone()])
    }

    // ---- row-wise ops over the last axis ----

    pub fn softmax(&self) -> Tensor {
        let (rows, cols) = self.rows_cols();
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &self.0.data[r * cols..(r + 1) * cols];
            let y = &mut data[r * cols..(r + 1) * cols];
            let mx = x.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for (yo, &xi) in y.iter_mut().zip(x) {
                *yo = (xi - mx).exp();
                sum += *yo;
            }
            for yo in y.iter_mut() {
                *yo /= sum;
            }
        }
        Tensor::new(self.0.shape.clone(), data, Op::Softmax, vec![self.clone()])
    }

    /// Normalize each row to zero mean / unit variance (no affine part).
    pub fn layer_norm(&self, eps: f32) -> Tensor {
        let (rows, cols) = self.rows_cols();
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &self.0.data[r * cols..(r + 1) * cols];
            let y = &mut data[r * cols..(r + 1) * cols];
            let mean = x.iter().sum::<f32>() / cols as f32;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / cols as f32;
            let inv = 1.0 / (var + eps).sqrt();
            for (yo, &xi) in y.iter_mut().zip(x) {
                *yo = (xi - mean) * inv;
            }
        }
        Tensor::new(
            self.0.shape.clone(),
            data,
            Op::LayerNorm(eps),
            vec![self.clone()],
        )
    }

    /// L2-normalize each row (last axis), with the norm floored at `LOG_FLOOR`.
    pub fn l2_normalize_rows(&self) -> Tensor {
        let (rows, cols) = self.rows_cols();
        let mut data = vec![0.0f32; self.numel()];
        for r in 0..rows {
            let x = &self.0.data[r * cols..(r + 1) * cols];
            let n = x.iter().map(|v| v * v).sum::<f32>().sqrt().max(LOG_FLOOR);
            for (yo, &xi) in data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *yo = xi / n;
            }
        }
        Tensor::new(
            self.0.shape.clone(),
            data,
            Op::L2NormRows,
            vec![self.clone()],
        )
    }

    // ---- reductions ----

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, true)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis(axis, false)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.0.shape.len() {
            return Err(Error::Invalid(format!(
                "axis {} out of range for shape {:?}",
                axis, self.0.shape
            )));
        }
        let (outer, len, inner) = axis_split(&self.0.shape, axis);
        let mut out_shape = self.0.shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut data = vec![0.0f32; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    data[o * inner + i] += self.0.data[base + i];
                }
            }
        }
        if mean {
            let inv = 1.0 / len as f32;
            for v in data.iter_mut() {
                *v *= inv;
            }
        }
        let op = if mean {
            Op::MeanAxis(axis)
        } else {
            Op::SumAxis(axis)
        };
        Ok(Tensor::new(out_shape, data, op, vec![self.clone()]))
    }

    pub fn sum_all(&self) -> Tensor {
        let s: f32 = self.0.data.iter().sum();
        Tensor::new(vec![1], vec![s], Op::SumAll, vec![self.clone()])
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f32)
    }

    // ---- layout ----

    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Invalid("concat of zero tensors".into()));
        }
        let rank = parts[0].0.shape.len();
        if axis >= rank {
            return Err(Error::Invalid(format!("concat axis {} out of range", axis)));
        }
        for p in &parts[1..] {
            if p.0.shape.len() != rank
                || p.0
                    .shape
                    .iter()
                    .zip(&parts[0].0.shape)
                    .enumerate()
                    .any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: parts[0].0.shape.clone(),
                    rhs: p.0.shape.clone(),
                });
            }
        }
        let mut out_shape = parts[0].0.shape.clone();
        out_shape[axis] = parts.iter().map(|p| p.0.shape[axis]).sum();
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut data = vec![0.0f32; numel(&out_shape)];
        let total_axis = out_shape[axis];
        let mut offset = 0usize;
        for p in parts {
            let len = p.0.shape[axis];
            for o in 0..outer {
                for l in 0..len {
                    let src = (o * len + l) * inner;
                    let dst = (o * total_axis + offset + l) * inner;
                    data[dst..dst + inner].copy_from_slice(&p.0.data[src..src + inner]);
                }
            }
            offset += len;
        }
        Ok(Tensor::new(out_shape, data, Op::Concat(axis), parts.to_vec()))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.0.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::new(
            shape.to_vec(),
            self.0.data.clone(),
            Op::Reshape,
            vec![self.clone()],
        ))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        if self.0.shape.len() != 2 {
            return Err(Error::Invalid(format!(
                "transpose expects rank 2, got {:?}",
                self.0.shape
            )));
        }
        let (m, n) = (self.0.shape[0], self.0.shape[1]);
        let mut data = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.0.data[i * n + j];
            }
        }
        Ok(Tensor::new(
            vec![n, m],
            data,
            Op::Transpose,
            vec![self.clone()],
        ))
    }

    /// Columns `[start, end)` of a rank-2 tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Tensor> {
        if self.0.shape.len() != 2 || end > self.0.shape[1] || start >= end {
            return Err(Error::Invalid(format!(
                "slice_cols [{start}, {end}) invalid for shape {:?}",
                self.0.shape
            )));
        }
        let (m, n) = (self.0.shape[0], self.0.shape[1]);
        let w = end - start;
        let mut data = vec![0.0f32; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&self.0.data[i * n + start..i * n + end]);
        }
        Ok(Tensor::new(
            vec![m, w],
            data,
            Op::SliceCols(start, end),
            vec![self.clone()],
        ))
    }

    /// Sum of squared differences, `sum((a-b)^2)`, as a scalar.
    pub fn squared_error(&self, rhs: &Tensor) -> Result<Tensor> {
        let d = self.sub(rhs)?;
        d.mul(&d)?.sum_all().pipe_ok()
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss, accumulating into parameter sinks.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.0.shape
            )));
        }
        // Gather reachable grad-requiring nodes; ids increase with creation
        // order so descending id order is a valid reverse topological order.
        let mut seen: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !t.requires_grad() || seen.contains_key(&t.0.id) {
                continue;
            }
            for inp in &t.0.inputs {
                stack.push(inp.clone());
            }
            seen.insert(t.0.id, t);
        }
        let mut order: Vec<Tensor> = seen.into_values().collect();
        order.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f32>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);

        for node in order {
            let g = match grads.remove(&node.0.id) {
                Some(g) => g,
                None => continue,
            };
            if let Some(sink) = &node.0.grad_sink {
                let mut s = sink.borrow_mut();
                s.touched = true;
                for (si, gi) in s.data.iter_mut().zip(&g) {
                    *si += gi;
                }
            }
            node.push_input_grads(&g, &mut grads);
        }
        Ok(())
    }

    fn push_input_grads(&self, g: &[f32], grads: &mut HashMap<u64, Vec<f32>>) {
        let inputs = &self.0.inputs;
        let mut acc = |t: &Tensor, gin: Vec<f32>| {
            if !t.requires_grad() {
                return;
            }
            let e = grads
                .entry(t.0.id)
                .or_insert_with(|| vec![0.0f32; t.numel()]);
            for (a, b) in e.iter_mut().zip(&gin) {
                *a += b;
            }
        };
        match &self.0.op {
            Op::Leaf => {}
            Op::Add => {
                acc(&inputs[0], g.to_vec());
                acc(&inputs[1], reduce_to(&inputs[1], &inputs[0], g, None));
            }
            Op::Sub => {
                acc(&inputs[0], g.to_vec());
                let neg: Vec<f32> = g.iter().map(|v| -v).collect();
                acc(&inputs[1], reduce_to(&inputs[1], &inputs[0], &neg, None));
            }
            Op::Mul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let bc = a.check_broadcast(b, "mul").expect("checked at forward");
                let ga = bcast_zip(g, &b.0.data, bc, |gi, bi| gi * bi);
                acc(a, ga);
                acc(b, reduce_to(b, a, g, Some(&a.0.data)));
            }
            Op::Scale(s) => acc(&inputs[0], g.iter().map(|v| v * s).collect()),
            Op::Matmul => {
                let (a, b) = (&inputs[0], &inputs[1]);
                let (m, k) = (a.0.shape[0], a.0.shape[1]);
                let n = b.0.shape[1];
                if a.requires_grad() {
                    // dA = G · B^T
                    let mut da = vec![0.0f32; m * k];
                    sgemm(m, n, k, 1.0, g, n as isize, 1, &b.0.data, 1, n as isize, &mut da);
                    acc(a, da);
                }
                if b.requires_grad() {
                    // dB = A^T · G
                    let mut db = vec![0.0f32; k * n];
                    sgemm(k, m, n, 1.0, &a.0.data, 1, k as isize, g, n as isize, 1, &mut db);
                    acc(b, db);
                }
            }
            Op::Relu => {
                let x = &inputs[0].0.data;
                acc(
                    &inputs[0],
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Gelu => {
                let x = &inputs[0].0.data;
                acc(
                    &inputs[0],
                    g.iter().zip(x).map(|(gi, &xi)| gi * gelu_grad(xi)).collect(),
                );
            }
            Op::Exp => {
                let y = &self.0.data;
                acc(&inputs[0], g.iter().zip(y).map(|(gi, yi)| gi * yi).collect());
            }
            Op::Log => {
                let x = &inputs[0].0.data;
                acc(
                    &inputs[0],
                    g.iter()
                        .zip(x)
                        .map(|(gi, &xi)| if xi > LOG_FLOOR { gi / xi } else { 0.0 })
                        .collect(),
                );
            }
            Op::Softmax => {
                let (rows, cols) = self.rows_cols();
                let y = &self.0.data;
                let mut gx = vec![0.0f32; y.len()];
                for r in 0..rows {
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let dot: f32 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for ((o, &yi), &gi) in gx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(gs)
                    {
                        *o = yi * (gi - dot);
                    }
                }
                acc(&inputs[0], gx);
            }
            Op::LayerNorm(eps) => {
                let (rows, cols) = self.rows_cols();
                let x = &inputs[0].0.data;
                let y = &self.0.data;
                let mut gx = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let xs = &x[r * cols..(r + 1) * cols];
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let mean = xs.iter().sum::<f32>() / cols as f32;
                    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>()
                        / cols as f32;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gmean = gs.iter().sum::<f32>() / cols as f32;
                    let gydot = gs.iter().zip(ys).map(|(a, b)| a * b).sum::<f32>() / cols as f32;
                    for ((o, &yi), &gi) in gx[r * cols..(r + 1) * cols]
                        .iter_mut()
                        .zip(ys)
                        .zip(gs)
                    {
                        *o = inv * (gi - gmean - yi * gydot);
                    }
                }
                acc(&inputs[0], gx);
            }
            Op::MeanAxis(axis) | Op::SumAxis(axis) => {
                let mean = matches!(self.0.op, Op::MeanAxis(_));
                let (outer, len, inner) = axis_split(&inputs[0].0.shape, *axis);
                let scale = if mean { 1.0 / len as f32 } else { 1.0 };
                let mut gx = vec![0.0f32; inputs[0].numel()];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            gx[base + i] = g[o * inner + i] * scale;
                        }
                    }
                }
                acc(&inputs[0], gx);
            }
            Op::SumAll => acc(&inputs[0], vec![g[0]; inputs[0].numel()]),
            Op::L2NormRows => {
                let (rows, cols) = self.rows_cols();
                let x = &inputs[0].0.data;
                let y = &self.0.data;
                let mut gx = vec![0.0f32; x.len()];
                for r in 0..rows {
                    let xs = &x[r * cols..(r + 1) * cols];
                    let ys = &y[r * cols..(r + 1) * cols];
                    let gs = &g[r * cols..(r + 1) * cols];
                    let n = xs.iter().map(|v| v * v).sum::<f32>().sqrt();
                    if n > LOG_FLOOR {
                        let dot: f32 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for ((o, &yi), &gi) in gx[r * cols..(r + 1) * cols]
                            .iter_mut()
                            .zip(ys)
                            .zip(gs)
                        {
                            *o = (gi - yi * dot) / n;
                        }
                    } else {
                        for (o, &gi) in gx[r * cols..(r + 1) * cols].iter_mut().zip(gs) {
                            *o = gi / LOG_FLOOR;
                        }
                    }
                }
                acc(&inputs[0], gx);
            }
            Op::Concat(axis) => {
                let out_shape = &self.0.shape;
                let (outer, total_axis, inner) = axis_split(out_shape, *axis);
                let mut offset = 0usize;
                for p in inputs {
                    let len = p.0.shape[*axis];
                    if p.requires_grad() {
                        let mut gp = vec![0.0f32; p.numel()];
                        for o in 0..outer {
                            for l in 0..len {
                                let src = (o * total_axis + offset + l) * inner;
                                let dst = (o * len + l) * inner;
                                gp[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                            }
                        }
                        acc(p, gp);
                    }
                    offset += len;
                }
            }
            Op::Reshape => acc(&inputs[0], g.to_vec()),
            Op::Transpose => {
                let (n, m) = (self.0.shape[0], self.0.shape[1]);
                let mut gx = vec![0.0f32; g.len()];
                for i in 0..n {
                    for j in 0..m {
                        gx[j * n + i] = g[i * m + j];
                    }
                }
                acc(&inputs[0], gx);
            }
            Op::SliceCols(start, _end) => {
                let (m, n) = (inputs[0].0.shape[0], inputs[0].0.shape[1]);
                let w = self.0.shape[1];
                let mut gx = vec![0.0f32; m * n];
                for i in 0..m {
                    gx[i * n + start..i * n + start + w]
                        .copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                acc(&inputs[0], gx);
            }
        }
    }
}

trait PipeOk: Sized {
    fn pipe_ok(self) -> Result<Self> {
        Ok(self)
    }
}
impl PipeOk for Tensor {}

/// (outer, axis length, inner) strides for reducing/broadcasting along `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row,
}

fn bcast_zip(a: &[f32], b: &[f32], bc: Bcast, f: impl Fn(f32, f32) -> f32) -> Vec<f32> {
    match bc {
        Bcast::Same => a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect(),
        Bcast::Scalar => a.iter().map(|&x| f(x, b[0])).collect(),
        Bcast::Row => {
            let n = b.len();
            a.iter()
                .enumerate()
                .map(|(i, &x)| f(x, b[i % n]))
                .collect()
        }
    }
}

/// Reduce an output-shaped gradient `g` down to `small`'s shape (for the
/// broadcast rhs of add/sub/mul). `mul_by` multiplies elementwise first.
fn reduce_to(small: &Tensor, big: &Tensor, g: &[f32], mul_by: Option<&[f32]>) -> Vec<f32> {
    let term = |i: usize| -> f32 {
        match mul_by {
            Some(m) => g[i] * m[i],
            None => g[i],
        }
    };
    if small.shape() == big.shape() {
        (0..g.len()).map(term).collect()
    } else if small.numel() == 1 {
        vec![(0..g.len()).map(term).sum()]
    } else {
        let n = small.numel();
        let mut out = vec![0.0f32; n];
        for i in 0..g.len() {
            out[i % n] += term(i);
        }
        out
    }
}

fn gelu_fwd(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const A: f32 = 0.044_715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f32) -> f32 {
    const C: f32 = 0.797_884_6;
    const A: f32 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
