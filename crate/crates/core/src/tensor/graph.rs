use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::{IndexTable, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduction {
    Max,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Activation { x: Var, kind: Activation },
    Softmax { x: Var },
    Gather { src: Var, table: IndexTable },
    Reduce { x: Var, kind: Reduction, argmax: Vec<u32> },
    Concat { xs: Vec<Var> },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: f64 },
    Abs { x: Var },
    WeightedSum { w: Var, x: Var },
    RowNorm { x: Var },
    Sum { x: Var },
    Reshape { x: Var },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Activation { .. } => "activation",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::Reduce { .. } => "reduce",
            Op::Concat { .. } => "concat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Abs { .. } => "abs",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::RowNorm { .. } => "row_norm",
            Op::Sum { .. } => "sum",
            Op::Reshape { .. } => "reshape",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Concat { xs } => xs.clone(),
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::WeightedSum { w, x } => vec![*w, *x],
            Op::Activation { x, .. }
            | Op::Softmax { x }
            | Op::Reduce { x, .. }
            | Op::Scale { x, .. }
            | Op::Abs { x }
            | Op::RowNorm { x }
            | Op::Sum { x }
            | Op::Reshape { x } => vec![*x],
            Op::Gather { src, .. } => vec![*src],
        }
    }
}

fn slot<'a, T: Real>(
    before: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut Vec<T>> {
    let n = &before[v.0];
    if !n.requires_grad {
        return None;
    }
    let len = n.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Computation tape. Nodes are appended in creation order, which is a
/// topological order, and [`Graph::backward`] walks it in reverse.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(data: &[T], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> Result<Var> {
        check_finite(value.data(), op.name())?;
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: receives a gradient on backward.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// Direct inputs of `v`, in argument order.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes[v.0].op.inputs()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(
            self.nodes[v.0].value.shape().to_vec(),
            g.clone(),
        ))
    }

    /// Forgets gradients so that `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    // ---------------------------------------------------------------- ops

    /// `y = x W + b` applied to every row of `x: [.., in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if ws.len() != 2 || bs.len() != 1 {
            return Err(Error::Dimension(format!(
                "linear expects W: [in, out] and b: [out], got {ws:?} and {bs:?}"
            )));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if *xs.last().unwrap() != cin || bs[0] != cout {
            return Err(Error::Dimension(format!(
                "linear: x {xs:?}, W {ws:?}, b {bs:?} are incompatible"
            )));
        }
        let mut shape = xs.to_vec();
        *shape.last_mut().unwrap() = cout;
        let rows = self.value(x).rows();
        let bias = self.value(b).data();
        let mut out: Vec<T> = Vec::with_capacity(rows * cout);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        T::gemm(
            rows,
            cin,
            cout,
            self.value(x).data(),
            (cin as isize, 1),
            self.value(w).data(),
            (cout as isize, 1),
            T::one(),
            &mut out,
        );
        self.push(Tensor::from_parts(shape, out), Op::Linear { x, w, b })
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let input = self.value(x);
        let data = match kind {
            Activation::Relu => input.data().iter().map(|&v| v.max(T::zero())).collect(),
            Activation::LeakyRelu(slope) => {
                let s = T::of(slope);
                input
                    .data()
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { v * s })
                    .collect()
            }
        };
        let shape = input.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Activation { x, kind })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    /// Softmax over the last axis, stabilised by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let k = input.channels();
        let mut out = Vec::with_capacity(input.numel());
        for row in input.data().chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e = *e / total;
            }
        }
        let shape = input.shape().to_vec();
        self.push(Tensor::from_parts(shape, out), Op::Softmax { x })
    }

    /// `out[i, k, :] = src[table[i, k], :]` for `src: [M, C]`.
    pub fn gather(&mut self, src: Var, table: &IndexTable) -> Result<Var> {
        let s = self.value(src);
        if s.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "gather source must be [M, C], got {:?}",
                s.shape()
            )));
        }
        let (m, c) = (s.shape()[0], s.shape()[1]);
        if let Some(max) = table.max_index() {
            if max >= m {
                return Err(Error::Index(format!(
                    "gather index {max} out of bounds for {m} rows"
                )));
            }
        }
        let mut out = Vec::with_capacity(table.data().len() * c);
        for &idx in table.data() {
            out.extend_from_slice(s.row(idx));
        }
        let shape = vec![table.rows(), table.cols(), c];
        self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                src,
                table: table.clone(),
            },
        )
    }

    /// Reduces `x: [N, K, C]` over its middle axis to `[N, C]`.
    pub fn reduce(&mut self, x: Var, kind: Reduction) -> Result<Var> {
        let input = self.value(x);
        if input.shape().len() != 3 {
            return Err(Error::Dimension(format!(
                "reduce expects [N, K, C], got {:?}",
                input.shape()
            )));
        }
        let (n, k, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let d = input.data();
        let mut out = vec![T::zero(); n * c];
        let mut argmax = Vec::new();
        match kind {
            Reduction::Mean => {
                let inv = T::one() / T::of(k as f64);
                for i in 0..n {
                    let o = &mut out[i * c..(i + 1) * c];
                    for j in 0..k {
                        let r = &d[(i * k + j) * c..(i * k + j + 1) * c];
                        for (acc, &v) in o.iter_mut().zip(r) {
                            *acc += v;
                        }
                    }
                    for v in o.iter_mut() {
                        *v *= inv;
                    }
                }
            }
            Reduction::Max => {
                argmax = vec![0u32; n * c];
                for i in 0..n {
                    let base = i * k * c;
                    out[i * c..(i + 1) * c].copy_from_slice(&d[base..base + c]);
                    for j in 1..k {
                        let r = &d[base + j * c..base + (j + 1) * c];
                        for ch in 0..c {
                            // Strict comparison keeps the lowest index on ties.
                            if r[ch] > out[i * c + ch] {
                                out[i * c + ch] = r[ch];
                                argmax[i * c + ch] = j as u32;
                            }
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::from_parts(vec![n, c], out),
            Op::Reduce { x, kind, argmax },
        )
    }

    /// Mean over the channel axis: `[N, K, C] -> [N, K]`.
    pub fn mean_channels(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::Dimension(format!(
                "mean_channels expects [N, K, C], got {s:?}"
            )));
        }
        let flat = self.reshape(x, vec![s[0] * s[1], s[2], 1])?;
        let m = self.reduce(flat, Reduction::Mean)?;
        self.reshape(m, vec![s[0], s[1]])
    }

    /// Concatenates along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Dimension("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        for &v in xs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::Dimension(format!(
                    "concat: {:?} incompatible with {:?}",
                    s,
                    self.shape(*first)
                )));
            }
        }
        let rows = self.value(*first).rows();
        let widths: Vec<usize> = xs.iter().map(|&v| self.value(v).channels()).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &v in xs {
                out.extend_from_slice(self.value(v).row(r));
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        self.push(Tensor::from_parts(shape, out), Op::Concat { xs: xs.to_vec() })
    }

    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op) -> Result<Var> {
        self.same_shape(a, b, op.name())?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, data), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_map(a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let input = self.value(x);
        let data = input.data().iter().map(|&v| v * f).collect();
        let shape = input.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Scale { x, factor })
    }

    /// Elementwise magnitude; the subgradient at zero is zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let data = input.data().iter().map(|v| v.abs()).collect();
        let shape = input.shape().to_vec();
        self.push(Tensor::from_parts(shape, data), Op::Abs { x })
    }

    /// `y[n, :] = sum_k w[n, k] * x[n, k, :]` for `w: [N, K]`, `x: [N, K, C]`.
    pub fn weighted_sum(&mut self, w: Var, x: Var) -> Result<Var> {
        let (ws, xs) = (self.shape(w), self.shape(x));
        if ws.len() != 2 || xs.len() != 3 || ws[0] != xs[0] || ws[1] != xs[1] {
            return Err(Error::Dimension(format!(
                "weighted_sum: weights {ws:?} do not index values {xs:?}"
            )));
        }
        let (n, k, c) = (xs[0], xs[1], xs[2]);
        let (wd, xd) = (self.value(w).data(), self.value(x).data());
        let mut out = vec![T::zero(); n * c];
        for i in 0..n {
            let o = &mut out[i * c..(i + 1) * c];
            for j in 0..k {
                let a = wd[i * k + j];
                let r = &xd[(i * k + j) * c..(i * k + j + 1) * c];
                for (acc, &v) in o.iter_mut().zip(r) {
                    *acc += a * v;
                }
            }
        }
        self.push(Tensor::from_parts(vec![n, c], out), Op::WeightedSum { w, x })
    }

    /// Euclidean norm over the last axis. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        let c = input.channels();
        let data = input
            .data()
            .chunks(c)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let mut shape = input.shape()[..input.shape().len() - 1].to_vec();
        if shape.is_empty() {
            shape.push(1);
        }
        self.push(Tensor::from_parts(shape, data), Op::RowNorm { x })
    }

    /// Sum of all elements as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(total), Op::Sum { x })
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape { x })
    }

    // ----------------------------------------------------------- backward

    /// Reverse-mode sweep from a scalar `loss`. A second call without
    /// [`Graph::zero_grad`] is a contract error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward already ran on this graph; call zero_grad first".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gy) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy);
            self.grads[idx] = Some(gy);
        }
        self.backward_done = true;
        Ok(())
    }

    fn propagate(&mut self, idx: usize, gy: &[T]) {
        // Inputs always precede `idx`, so splitting here separates the
        // node being processed from the ones receiving gradient.
        let (before, rest) = self.nodes.split_at(idx);
        let node = &rest[0];
        let grads = &mut self.grads;
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (&before[x.0].value, &before[w.0].value);
                let (cin, cout) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if let Some(gx) = slot(before, grads, *x) {
                    T::gemm(
                        rows,
                        cout,
                        cin,
                        gy,
                        (cout as isize, 1),
                        wv.data(),
                        (1, cout as isize),
                        T::one(),
                        gx,
                    );
                }
                if let Some(gw) = slot(before, grads, *w) {
                    T::gemm(
                        cin,
                        rows,
                        cout,
                        xv.data(),
                        (1, cin as isize),
                        gy,
                        (cout as isize, 1),
                        T::one(),
                        gw,
                    );
                }
                if let Some(gb) = slot(before, grads, *b) {
                    for row in gy.chunks(cout) {
                        for (acc, &g) in gb.iter_mut().zip(row) {
                            *acc += g;
                        }
                    }
                }
            }
            Op::Activation { x, kind } => {
                let xv = before[x.0].value.data();
                let low = match kind {
                    Activation::Relu => T::zero(),
                    Activation::LeakyRelu(s) => T::of(*s),
                };
                if let Some(gx) = slot(before, grads, *x) {
                    for ((acc, &g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        *acc += if v > T::zero() { g } else { g * low };
                    }
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = node.value.channels();
                if let Some(gx) = slot(before, grads, *x) {
                    for ((gxr, gyr), yr) in gx.chunks_mut(k).zip(gy.chunks(k)).zip(y.chunks(k)) {
                        let dot: T = gyr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                        for ((acc, &g), &p) in gxr.iter_mut().zip(gyr).zip(yr) {
                            *acc += p * (g - dot);
                        }
                    }
                }
            }
            Op::Gather { src, table } => {
                let c = before[src.0].value.channels();
                if let Some(gs) = slot(before, grads, *src) {
                    for (j, &idx) in table.data().iter().enumerate() {
                        let dst = &mut gs[idx * c..(idx + 1) * c];
                        for (acc, &g) in dst.iter_mut().zip(&gy[j * c..(j + 1) * c]) {
                            *acc += g;
                        }
                    }
                }
            }
            Op::Reduce { x, kind, argmax } => {
                let s = before[x.0].value.shape();
                let (n, k, c) = (s[0], s[1], s[2]);
                if let Some(gx) = slot(before, grads, *x) {
                    match kind {
                        Reduction::Mean => {
                            let inv = T::one() / T::of(k as f64);
                            for i in 0..n {
                                for j in 0..k {
                                    let dst = &mut gx[(i * k + j) * c..(i * k + j + 1) * c];
                                    for (acc, &g) in dst.iter_mut().zip(&gy[i * c..(i + 1) * c]) {
                                        *acc += g * inv;
                                    }
                                }
                            }
                        }
                        Reduction::Max => {
                            for i in 0..n {
                                for ch in 0..c {
                                    let j = argmax[i * c + ch] as usize;
                                    gx[(i * k + j) * c + ch] += gy[i * c + ch];
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let total = node.value.channels();
                let rows = node.value.rows();
                let mut offset = 0;
                for v in xs {
                    let w = before[v.0].value.channels();
                    if let Some(gx) = slot(before, grads, *v) {
                        for r in 0..rows {
                            let src = &gy[r * total + offset..r * total + offset + w];
                            for (acc, &g) in gx[r * w..(r + 1) * w].iter_mut().zip(src) {
                                *acc += g;
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gx) = slot(before, grads, *v) {
                        for (acc, &g) in gx.iter_mut().zip(gy) {
                            *acc += g;
                        }
                    }
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = slot(before, grads, *a) {
                    for (acc, &g) in ga.iter_mut().zip(gy) {
                        *acc += g;
                    }
                }
                if let Some(gb) = slot(before, grads, *b) {
                    for (acc, &g) in gb.iter_mut().zip(gy) {
                        *acc -= g;
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (before[a.0].value.data(), before[b.0].value.data());
                if let Some(ga) = slot(before, grads, *a) {
                    for ((acc, &g), &o) in ga.iter_mut().zip(gy).zip(bv) {
                        *acc += g * o;
                    }
                }
                if let Some(gb) = slot(before, grads, *b) {
                    for ((acc, &g), &o) in gb.iter_mut().zip(gy).zip(av) {
                        *acc += g * o;
                    }
                }
            }
            Op::Scale { x, factor } => {
                let f = T::of(*factor);
                if let Some(gx) = slot(before, grads, *x) {
                    for (acc, &g) in gx.iter_mut().zip(gy) {
                        *acc += g * f;
                    }
                }
            }
            Op::Abs { x } => {
                let xv = before[x.0].value.data();
                if let Some(gx) = slot(before, grads, *x) {
                    for ((acc, &g), &v) in gx.iter_mut().zip(gy).zip(xv) {
                        if v > T::zero() {
                            *acc += g;
                        } else if v < T::zero() {
                            *acc -= g;
                        }
                    }
                }
            }
            Op::WeightedSum { w, x } => {
                let xs = before[x.0].value.shape();
                let (n, k, c) = (xs[0], xs[1], xs[2]);
                let (wd, xd) = (before[w.0].value.data(), before[x.0].value.data());
                if let Some(gw) = slot(before, grads, *w) {
                    for i in 0..n {
                        let g = &gy[i * c..(i + 1) * c];
                        for j in 0..k {
                            let r = &xd[(i * k + j) * c..(i * k + j + 1) * c];
                            gw[i * k + j] += g.iter().zip(r).map(|(&a, &b)| a * b).sum::<T>();
                        }
                    }
                }
                if let Some(gx) = slot(before, grads, *x) {
                    for i in 0..n {
                        let g = &gy[i * c..(i + 1) * c];
                        for j in 0..k {
                            let a = wd[i * k + j];
                            let dst = &mut gx[(i * k + j) * c..(i * k + j + 1) * c];
                            for (acc, &gv) in dst.iter_mut().zip(g) {
                                *acc += a * gv;
                            }
                        }
                    }
                }
            }
            Op::RowNorm { x } => {
                let xv = &before[x.0].value;
                let c = xv.channels();
                let norms = node.value.data();
                if let Some(gx) = slot(before, grads, *x) {
                    for (r, (&nrm, &g)) in norms.iter().zip(gy).enumerate() {
                        if nrm > T::zero() {
                            let f = g / nrm;
                            for (acc, &v) in gx[r * c..(r + 1) * c].iter_mut().zip(xv.row(r)) {
                                *acc += f * v;
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = slot(before, grads, *x) {
                    for acc in gx.iter_mut() {
                        *acc += gy[0];
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = slot(before, grads, *x) {
                    for (acc, &g) in gx.iter_mut().zip(gy) {
                        *acc += g;
                    }
                }
            }
        }
    }

    /// Fingerprint of every piecewise branch taken in the forward pass
    /// (activation signs, max-pool winners, magnitude signs, zero norms,
    /// gather tables).
    /// Two evaluations with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Activation { x, .. } | Op::Abs { x } => {
                    for &v in self.nodes[x.0].value.data() {
                        let class: u8 = if v > T::zero() {
                            2
                        } else if v < T::zero() {
                            0
                        } else {
                            1
                        };
                        class.hash(&mut h);
                    }
                }
                Op::Reduce { argmax, .. } => argmax.hash(&mut h),
                // neighbour tables recomputed from perturbed coordinates
                Op::Gather { table, .. } => table.data().hash(&mut h),
                Op::RowNorm { .. } => {
                    for &v in node.value.data() {
                        (v == T::zero()).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }
}
