//! Taped reverse-mode differentiation over dense 2-D tensors.
//!
//! A [`Graph`] records every forward op as a node. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients into every node that
//! (transitively) depends on a trainable leaf. Ops take and return [`Var`]
//! handles, which are only meaningful for the graph that produced them.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{MsgcaError, Result};

pub type Matrix = Array2<f64>;

/// Dense 2-D array participating in a computation, with an optional gradient.
#[derive(Clone, Debug)]
pub struct Tensor {
    values: Matrix,
    grad: Option<Matrix>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(values: Matrix, requires_grad: bool) -> Self {
        Tensor {
            values,
            grad: None,
            requires_grad,
        }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Matrix {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut Matrix {
        &mut self.values
    }

    pub fn grad(&self) -> Option<&Matrix> {
        self.grad.as_ref()
    }

    pub fn set_grad(&mut self, grad: Option<Matrix>) {
        if let Some(g) = &grad {
            assert_eq!(
                g.dim(),
                self.values.dim(),
                "gradient shape must match values"
            );
        }
        self.grad = grad;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Elu(Var),
    SoftmaxRows(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    Transpose(Var),
    GatherRows(Var, Rc<[usize]>),
    SliceCols(Var, usize),
    SegmentSoftmax(Var, Rc<[usize]>),
    SparseAggregate {
        weights: Var,
        source: Var,
        index: Rc<[usize]>,
        offsets: Rc<[usize]>,
    },
    BlockMatMulNT(Var, Var, usize),
    BlockMatMul(Var, Var, usize),
    BlockTranspose(Var),
    Reshape(Var),
    CrossEntropy(Var, Rc<[usize]>),
}

struct Node {
    tensor: Tensor,
    op: Op,
}

/// A single computation tape. Not shared across threads; build one per
/// forward/backward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn shape_err(op: &str, a: (usize, usize), b: (usize, usize)) -> MsgcaError {
    MsgcaError::Shape(format!(
        "{op}: incompatible shapes {}x{} and {}x{}",
        a.0, a.1, b.0, b.1
    ))
}

/// Sigmoid kept strictly inside (0, 1) in floating point.
pub(crate) fn sigmoid(x: f64) -> f64 {
    const HI: f64 = 1.0 - f64::EPSILON / 2.0;
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, HI)
}

/// Dot product with independent partial sums, so the additions pipeline.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn softmax_slice(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn tensor(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].tensor.values
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].tensor.values.dim()
    }

    /// Scalar value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.nodes[v.0].tensor.grad.as_ref()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn push(&mut self, values: Matrix, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|&v| self.requires(v));
        #[cfg(debug_assertions)]
        {
            let finite_inputs = inputs
                .iter()
                .all(|&v| self.value(v).iter().all(|x| x.is_finite()));
            if finite_inputs {
                debug_assert!(
                    values.iter().all(|x| x.is_finite()),
                    "{op:?} produced a non-finite value from finite inputs"
                );
            }
        }
        self.nodes.push(Node {
            tensor: Tensor::new(values, requires_grad),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, values: Matrix) -> Var {
        self.nodes.push(Node {
            tensor: Tensor::new(values, false),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf; receives a gradient on [`Graph::backward`].
    pub fn variable(&mut self, values: Matrix) -> Var {
        self.nodes.push(Node {
            tensor: Tensor::new(values, true),
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(shape_err("matmul", sa, sb));
        }
        let out = self.value(a).dot(self.value(b));
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Element-wise sum; `b` may also be a 1xm row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if sa == sb {
            self.value(a) + self.value(b)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            self.value(a) + &self.value(b).row(0)
        } else {
            return Err(shape_err("add", sa, sb));
        };
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Element-wise product; `b` may also be an nx1 column or 1xm row broadcast.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let out = if sa == sb || sb == (sa.0, 1) || sb == (1, sa.1) {
            self.value(a) * self.value(b)
        } else {
            return Err(shape_err("mul", sa, sb));
        };
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a) * factor;
        self.push(out, Op::Scale(a, factor), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { slope * x });
        self.push(out, Op::LeakyRelu(a, slope), &[a])
    }

    /// ELU with unit scale.
    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| if x > 0.0 { x } else { x.exp_m1() });
        self.push(out, Op::Elu(a), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).to_owned();
        for mut row in out.rows_mut() {
            softmax_slice(row.as_slice_mut().expect("owned rows are contiguous"));
        }
        self.push(out, Op::SoftmaxRows(a), &[a])
    }

    /// Mean of all entries, as a 1x1 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let n = m.len().max(1) as f64;
        let out = Array2::from_elem((1, 1), m.sum() / n);
        self.push(out, Op::Mean(a), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("row counts checked");
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(shape_err(
                    "concat_rows",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("column counts checked");
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a), &[a])
    }

    /// Row `r` of the output is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: impl Into<Rc<[usize]>>) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let src = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= src.nrows()) {
            return Err(MsgcaError::Shape(format!(
                "gather_rows: index {bad} out of range for {} rows",
                src.nrows()
            )));
        }
        let cols = src.ncols();
        let mut data = Vec::with_capacity(index.len() * cols);
        match src.as_slice() {
            Some(flat) => {
                for &i in index.iter() {
                    data.extend_from_slice(&flat[i * cols..(i + 1) * cols]);
                }
            }
            None => {
                for &i in index.iter() {
                    data.extend(src.row(i).iter());
                }
            }
        }
        let out = Array2::from_shape_vec((index.len(), cols), data).expect("gathered shape");
        Ok(self.push(out, Op::GatherRows(a, index), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if start + len > s.1 {
            return Err(MsgcaError::Shape(format!(
                "slice_cols: columns {start}..{} out of range for {}x{}",
                start + len,
                s.0,
                s.1
            )));
        }
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        Ok(self.push(out, Op::SliceCols(a, start), &[a]))
    }

    /// Softmax over contiguous segments of an Ex1 column; segment `k` spans
    /// rows `offsets[k]..offsets[k + 1]`.
    pub fn segment_softmax(&mut self, a: Var, offsets: impl Into<Rc<[usize]>>) -> Result<Var> {
        let offsets: Rc<[usize]> = offsets.into();
        let s = self.shape(a);
        if s.1 != 1 || offsets.last().copied() != Some(s.0) {
            return Err(MsgcaError::Shape(format!(
                "segment_softmax: expected an {}x1 column covered by the segments, got {}x{}",
                offsets.last().copied().unwrap_or(0),
                s.0,
                s.1
            )));
        }
        let mut out = self.value(a).to_owned();
        {
            let flat = out.as_slice_mut().expect("owned column is contiguous");
            for w in offsets.windows(2) {
                if w[1] > w[0] {
                    softmax_slice(&mut flat[w[0]..w[1]]);
                }
            }
        }
        Ok(self.push(out, Op::SegmentSoftmax(a, offsets), &[a]))
    }

    /// Weighted neighbourhood sum: output row `c` is
    /// `sum over e in offsets[c]..offsets[c+1] of weights[e] * source[index[e]]`.
    pub fn sparse_aggregate(
        &mut self,
        weights: Var,
        source: Var,
        index: impl Into<Rc<[usize]>>,
        offsets: impl Into<Rc<[usize]>>,
    ) -> Result<Var> {
        let index: Rc<[usize]> = index.into();
        let offsets: Rc<[usize]> = offsets.into();
        let (sw, ss) = (self.shape(weights), self.shape(source));
        if sw != (index.len(), 1) || offsets.last().copied() != Some(index.len()) {
            return Err(shape_err("sparse_aggregate", sw, (index.len(), 1)));
        }
        if index.iter().any(|&i| i >= ss.0) {
            return Err(MsgcaError::Shape(
                "sparse_aggregate: source index out of range".into(),
            ));
        }
        let (n_out, k) = (offsets.len() - 1, ss.1);
        let w = self.value(weights).as_standard_layout();
        let w = w.as_slice().expect("standard layout");
        let x = self.value(source).as_standard_layout();
        let x = x.as_slice().expect("standard layout");
        let mut out = vec![0.0; n_out * k];
        for (c, row) in out.chunks_exact_mut(k.max(1)).enumerate().take(n_out) {
            for e in offsets[c]..offsets[c + 1] {
                let src = &x[index[e] * k..(index[e] + 1) * k];
                for (o, &v) in row.iter_mut().zip(src) {
                    *o += w[e] * v;
                }
            }
        }
        let out = Array2::from_shape_vec((n_out, k), out).expect("aggregate shape");
        Ok(self.push(
            out,
            Op::SparseAggregate {
                weights,
                source,
                index,
                offsets,
            },
            &[weights, source],
        ))
    }

    /// Per block of `block` rows: `A_b * B_b^T`. Both inputs are (n*block)xk;
    /// the output is (n*block)xblock.
    pub fn block_matmul_nt(&mut self, a: Var, b: Var, block: usize) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || block == 0 || sa.0 % block != 0 {
            return Err(shape_err("block_matmul_nt", sa, sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Array2::zeros((sa.0, block));
        for start in (0..sa.0).step_by(block) {
            let r = start..start + block;
            let prod = av
                .slice(s![r.clone(), ..])
                .dot(&bv.slice(s![r.clone(), ..]).t());
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        Ok(self.push(out, Op::BlockMatMulNT(a, b, block), &[a, b]))
    }

    /// Per block of `block` rows: `P_b * V_b`, with `P` (n*block)xblock and
    /// `V` (n*block)xm.
    pub fn block_matmul(&mut self, p: Var, v: Var, block: usize) -> Result<Var> {
        let (sp, sv) = (self.shape(p), self.shape(v));
        if sp.0 != sv.0 || sp.1 != block || block == 0 || sp.0 % block != 0 {
            return Err(shape_err("block_matmul", sp, sv));
        }
        let (pv, vv) = (self.value(p), self.value(v));
        let mut out = Array2::zeros((sv.0, sv.1));
        for start in (0..sp.0).step_by(block) {
            let r = start..start + block;
            let prod = pv
                .slice(s![r.clone(), ..])
                .dot(&vv.slice(s![r.clone(), ..]));
            out.slice_mut(s![r, ..]).assign(&prod);
        }
        Ok(self.push(out, Op::BlockMatMul(p, v, block), &[p, v]))
    }

    /// Transposes each block of `block` rows: (n*block)xm becomes (n*m)xblock.
    pub fn block_transpose(&mut self, a: Var, block: usize) -> Result<Var> {
        let sa = self.shape(a);
        if block == 0 || !sa.0.is_multiple_of(block) {
            return Err(MsgcaError::Shape(format!(
                "block_transpose: {} rows not divisible by block {block}",
                sa.0
            )));
        }
        let out = block_transpose(self.value(a), block);
        Ok(self.push(out, Op::BlockTranspose(a), &[a]))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let sa = self.shape(a);
        if sa.0 * sa.1 != rows * cols {
            return Err(shape_err("reshape", sa, (rows, cols)));
        }
        let out = Array2::from_shape_vec((rows, cols), self.value(a).iter().cloned().collect())
            .expect("element count checked");
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// Mean softmax cross-entropy of `logits` (nxC) against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: impl Into<Rc<[usize]>>) -> Result<Var> {
        let labels: Rc<[usize]> = labels.into();
        let s = self.shape(logits);
        if labels.len() != s.0 || s.0 == 0 {
            return Err(MsgcaError::Shape(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                s.0
            )));
        }
        if labels.iter().any(|&l| l >= s.1) {
            return Err(MsgcaError::Shape(
                "cross_entropy: label out of range".into(),
            ));
        }
        let z = self.value(logits);
        let mut total = 0.0;
        for (row, &label) in z.rows().into_iter().zip(labels.iter()) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        let out = Array2::from_elem((1, 1), total / s.0 as f64);
        Ok(self.push(out, Op::CrossEntropy(logits, labels), &[logits]))
    }

    /// Reverse pass from a 1x1 root. Gradients are retained on leaf nodes
    /// that require them (see [`Graph::grad`]).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != (1, 1) {
            let s = self.shape(root);
            return Err(MsgcaError::Shape(format!(
                "backward: root must be 1x1, got {}x{}",
                s.0, s.1
            )));
        }
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones((1, 1)));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].tensor.grad = Some(g);
            } else {
                self.backprop_node(i, g, &mut grads);
            }
        }
        Ok(())
    }

    // Takes the node's gradient by value so element-wise rules can reuse it.
    fn backprop_node(&self, i: usize, mut g: Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.tensor.values;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].tensor.requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &delta,
                slot => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.requires(*b) {
                    acc(*b, self.value(*a).t().dot(&g));
                }
            }
            Op::Add(a, b) => {
                if self.requires(*b) {
                    if self.shape(*b) == g.dim() {
                        acc(*b, g.clone());
                    } else {
                        acc(*b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                }
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires(*b) {
                    let full = &g * av;
                    let sb = bv.dim();
                    let delta = if sb == full.dim() {
                        full
                    } else if sb.1 == 1 {
                        full.sum_axis(Axis(1)).insert_axis(Axis(1))
                    } else {
                        full.sum_axis(Axis(0)).insert_axis(Axis(0))
                    };
                    acc(*b, delta);
                }
                if self.requires(*a) {
                    g *= bv;
                    acc(*a, g);
                }
            }
            Op::Scale(a, f) => {
                g *= *f;
                acc(*a, g);
            }
            Op::Sigmoid(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(out)
                    .for_each(|d, &y| *d *= y * (1.0 - y));
                acc(*a, d);
            }
            Op::Relu(a) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                acc(*a, d);
            }
            Op::LeakyRelu(a, slope) => {
                let mut d = g;
                Zip::from(&mut d).and(self.value(*a)).for_each(|d, &x| {
                    if x <= 0.0 {
                        *d *= slope
                    }
                });
                acc(*a, d);
            }
            Op::Elu(a) => {
                let mut d = g;
                Zip::from(&mut d)
                    .and(self.value(*a))
                    .and(out)
                    .for_each(|d, &x, &y| {
                        if x <= 0.0 {
                            *d *= y + 1.0
                        }
                    });
                acc(*a, d);
            }
            Op::SoftmaxRows(a) => {
                let mut d = g;
                d *= out;
                let dots = d.sum_axis(Axis(1));
                Zip::from(d.rows_mut())
                    .and(out.rows())
                    .and(&dots)
                    .for_each(|mut drow, yrow, &dot| drow.scaled_add(-dot, &yrow));
                acc(*a, d);
            }
            Op::Mean(a) => {
                let s = self.shape(*a);
                let n = (s.0 * s.1).max(1) as f64;
                acc(*a, Array2::from_elem(s, g[[0, 0]] / n));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.requires(p) {
                        acc(p, g.slice(s![.., start..start + w]).to_owned());
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    if self.requires(p) {
                        acc(p, g.slice(s![start..start + h, ..]).to_owned());
                    }
                    start += h;
                }
            }
            Op::Transpose(a) => acc(*a, g.t().as_standard_layout().into_owned()),
            Op::GatherRows(a, index) => {
                let shape = self.shape(*a);
                let k = shape.1;
                let mut d = vec![0.0; shape.0 * k];
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().expect("standard layout");
                for (r, &src) in index.iter().enumerate() {
                    for (x, &v) in d[src * k..(src + 1) * k]
                        .iter_mut()
                        .zip(&gs[r * k..(r + 1) * k])
                    {
                        *x += v;
                    }
                }
                acc(*a, Array2::from_shape_vec(shape, d).expect("gather shape"));
            }
            Op::SliceCols(a, start) => {
                let mut d = Array2::zeros(self.shape(*a));
                d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                acc(*a, d);
            }
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = g;
                d *= out;
                for w in offsets.windows(2) {
                    let dot: f64 = d.slice(s![w[0]..w[1], 0]).sum();
                    for e in w[0]..w[1] {
                        d[[e, 0]] -= dot * out[[e, 0]];
                    }
                }
                acc(*a, d);
            }
            Op::SparseAggregate {
                weights,
                source,
                index,
                offsets,
            } => {
                let (xv, wv) = (self.value(*source), self.value(*weights));
                let k = xv.ncols();
                let x = xv.as_standard_layout();
                let x = x.as_slice().expect("standard layout");
                let w = wv.as_standard_layout();
                let w = w.as_slice().expect("standard layout");
                let gs = g.as_standard_layout();
                let gs = gs.as_slice().expect("standard layout");
                let mut dw = vec![0.0; w.len()];
                let mut dx = vec![0.0; x.len()];
                let (need_w, need_x) = (self.requires(*weights), self.requires(*source));
                for c in 0..offsets.len() - 1 {
                    let grow = &gs[c * k..(c + 1) * k];
                    for e in offsets[c]..offsets[c + 1] {
                        let j = index[e];
                        if need_w {
                            dw[e] = dot(grow, &x[j * k..(j + 1) * k]);
                        }
                        if need_x {
                            for (d, &gv) in dx[j * k..(j + 1) * k].iter_mut().zip(grow) {
                                *d += w[e] * gv;
                            }
                        }
                    }
                }
                if need_w {
                    acc(
                        *weights,
                        Array2::from_shape_vec(wv.dim(), dw).expect("weight shape"),
                    );
                }
                if need_x {
                    acc(
                        *source,
                        Array2::from_shape_vec(xv.dim(), dx).expect("source shape"),
                    );
                }
            }
            Op::BlockMatMulNT(a, b, block) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut da = Array2::zeros(av.dim());
                let mut db = Array2::zeros(bv.dim());
                for start in (0..av.nrows()).step_by(*block) {
                    let r = start..start + block;
                    let gb = g.slice(s![r.clone(), ..]);
                    da.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&bv.slice(s![r.clone(), ..])));
                    db.slice_mut(s![r.clone(), ..])
                        .assign(&gb.t().dot(&av.slice(s![r, ..])));
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::BlockMatMul(p, v, block) => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let mut dp = Array2::zeros(pv.dim());
                let mut dv = Array2::zeros(vv.dim());
                for start in (0..pv.nrows()).step_by(*block) {
                    let r = start..start + block;
                    let gb = g.slice(s![r.clone(), ..]);
                    dp.slice_mut(s![r.clone(), ..])
                        .assign(&gb.dot(&vv.slice(s![r.clone(), ..]).t()));
                    dv.slice_mut(s![r.clone(), ..])
                        .assign(&pv.slice(s![r, ..]).t().dot(&gb));
                }
                acc(*p, dp);
                acc(*v, dv);
            }
            Op::BlockTranspose(a) => {
                let inner = self.shape(*a).1;
                acc(*a, block_transpose(&g, inner));
            }
            Op::Reshape(a) => {
                let s = self.shape(*a);
                acc(
                    *a,
                    Array2::from_shape_vec(s, g.iter().cloned().collect())
                        .expect("element count preserved"),
                );
            }
            Op::CrossEntropy(logits, labels) => {
                let z = self.value(*logits);
                let n = z.nrows() as f64;
                let mut d = z.to_owned();
                for (mut row, &label) in d.rows_mut().into_iter().zip(labels.iter()) {
                    softmax_slice(row.as_slice_mut().expect("owned rows are contiguous"));
                    row[label] -= 1.0;
                }
                d *= g[[0, 0]] / n;
                acc(*logits, d);
            }
        }
    }
}

fn block_transpose(a: &Matrix, block: usize) -> Matrix {
    let (rows, cols) = a.dim();
    let n = rows / block;
    let mut out = Array2::zeros((n * cols, block));
    for b in 0..n {
        out.slice_mut(s![b * cols..(b + 1) * cols, ..])
            .assign(&a.slice(s![b * block..(b + 1) * block, ..]).t());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut g = Graph::new();
        let a = g.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.5]]);
        let i = g.constant(Array2::eye(3));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));

        let x = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let y = g.constant(array![[0.0], [1.0]]);
        let z = g.matmul(x, y).unwrap();
        assert_eq!(g.value(z), &array![[2.0], [4.0]]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Array2::zeros((2, 3)));
        let b = g.constant(Array2::zeros((2, 3)));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3 and 2x3"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_analytic() {
        let mut g = Graph::new();
        let z = g.constant(Array2::zeros((1, 4)));
        let s = g.softmax_rows(z);
        for &v in g.value(s).iter() {
            assert!((v - 0.25).abs() < 1e-15);
        }
        let x = g.constant(array![[0.0, 2f64.ln()]]);
        let s = g.softmax_rows(x);
        assert!((g.value(s)[[0, 0]] - 1.0 / 3.0).abs() < 1e-15);
        assert!((g.value(s)[[0, 1]] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn sigmoid_stays_open_interval() {
        assert!(sigmoid(1e4) < 1.0);
        assert!(sigmoid(-1e4) > 0.0);
        assert!((sigmoid(0.0) - 0.5).abs() < 1e-16);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let a = g.variable(Array2::zeros((2, 2)));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let w = g.variable(array![[1.0, 2.0]]);
        let sq = g.mul(w, w).unwrap();
        let m = g.mean(sq);
        let f = g.scale(m, 2.0);
        g.backward(f).unwrap();
        assert_eq!(g.grad(w).unwrap(), &array![[2.0, 4.0]]);
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let mut g = Graph::new();
        let w = g.variable(array![[3.0]]);
        let a = g.add(w, w).unwrap();
        let b = g.mul(a, w).unwrap();
        g.backward(b).unwrap();
        // d(2w^2)/dw = 4w
        assert_eq!(g.grad(w).unwrap()[[0, 0]], 12.0);
    }

    #[test]
    fn block_transpose_round_trip() {
        let a = Array2::from_shape_fn((6, 2), |(i, j)| (i * 10 + j) as f64);
        let t = block_transpose(&a, 3);
        assert_eq!(t.dim(), (4, 3));
        assert_eq!(t[[1, 2]], a[[2, 1]]);
        assert_eq!(t[[2, 0]], a[[3, 0]]);
        assert_eq!(block_transpose(&t, 2), a);
    }
}
