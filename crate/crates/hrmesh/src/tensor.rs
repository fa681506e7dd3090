//! Minimal dense reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes recording one forward pass; `backward`
//! sweeps it in reverse and accumulates exact gradients. Parameters live
//! outside the tape in a [`ParamStore`] (which also owns the Adam state) and
//! are injected as leaves at the start of each forward pass; after backward,
//! leaf gradients are flushed back into the store.
//!
//! Everything is 64-bit. Shapes are `(rows, cols)`; scalars are `(1, 1)`.
//! The op set is deliberately small: dense matrix products, pointwise
//! nonlinearities, and the gather/segment operations that realize
//! degree-normalized hypergraph aggregation and per-neighborhood softmax.

use crate::{Error, Result};
use std::collections::BTreeMap;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul(Id, Id),
    Add(Id, Id),
    /// `(n, m) + (1, m)` row-broadcast.
    AddBias(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Min(Id, Id),
    Max(Id, Id),
    /// Row-scalar multiply: `(n, 1) * (n, m)`.
    ScaleRows(Id, Id),
    Scale(Id, f64),
    AddConst(Id, #[allow(dead_code)] f64),
    Relu(Id),
    Tanh(Id),
    Sigmoid(Id),
    Exp(Id),
    Log(Id),
    Softplus(Id),
    Clamp(Id, f64, f64),
    SoftmaxRows(Id),
    Sum(Id),
    Mean(Id),
    RowSum(Id),
    ConcatCols(Id, Id),
    SliceCols(Id, usize, usize),
    GatherRows(Id, std::rc::Rc<Vec<usize>>),
    SegmentSum(Id, std::rc::Rc<Vec<usize>>, #[allow(dead_code)] usize),
    SegmentMean(Id, std::rc::Rc<Vec<usize>>, usize),
    /// Softmax over `(k, 1)` values grouped by segment id.
    SegmentSoftmax(Id, std::rc::Rc<Vec<usize>>, usize),
}

struct Node {
    op: Op,
    shape: (usize, usize),
    data: Vec<f64>,
    needs_grad: bool,
    /// Index into the ParamStore when this leaf mirrors a parameter.
    param: Option<usize>,
}

/// Records one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn shape(&self, id: Id) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    pub fn data(&self, id: Id) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn value(&self, id: Id) -> f64 {
        debug_assert_eq!(self.nodes[id.0].data.len(), 1);
        self.nodes[id.0].data[0]
    }

    fn push(&mut self, op: Op, shape: (usize, usize), data: Vec<f64>, needs_grad: bool) -> Id {
        debug_assert_eq!(data.len(), shape.0 * shape.1);
        self.nodes.push(Node { op, shape, data, needs_grad, param: None });
        Id(self.nodes.len() - 1)
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, shape: (usize, usize), data: Vec<f64>) -> Id {
        self.push(Op::Leaf, shape, data, false)
    }

    pub fn scalar(&mut self, v: f64) -> Id {
        self.constant((1, 1), vec![v])
    }

    /// Differentiable leaf (used by tests and FD oracles).
    pub fn variable(&mut self, shape: (usize, usize), data: Vec<f64>) -> Id {
        self.push(Op::Leaf, shape, data, true)
    }

    /// Leaf mirroring a named parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Id {
        let idx = store.index(name).unwrap_or_else(|| panic!("unknown parameter {name}"));
        let p = &store.params[idx];
        let id = self.push(Op::Leaf, p.shape, p.data.clone(), true);
        self.nodes[id.0].param = Some(idx);
        id
    }

    pub fn matmul(&mut self, a: Id, b: Id) -> Id {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        assert_eq!(k, k2, "matmul shape mismatch");
        let mut out = vec![0.0; n * m];
        kernels::matmul(&self.nodes[a.0].data, &self.nodes[b.0].data, &mut out, n, k, m);
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Matmul(a, b), (n, m), out, needs)
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x + y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Add(a, b), self.shape(a), data, needs)
    }

    pub fn add_bias(&mut self, a: Id, bias: Id) -> Id {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(bias), (1, m), "bias shape mismatch");
        let mut data = self.nodes[a.0].data.clone();
        let b = &self.nodes[bias.0].data;
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] += b[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        self.push(Op::AddBias(a, bias), (n, m), data, needs)
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x - y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Sub(a, b), self.shape(a), data, needs)
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b), "mul shape mismatch");
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Mul(a, b), self.shape(a), data, needs)
    }

    pub fn min(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x.min(*y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Min(a, b), self.shape(a), data, needs)
    }

    pub fn max(&mut self, a: Id, b: Id) -> Id {
        assert_eq!(self.shape(a), self.shape(b));
        let data: Vec<f64> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(x, y)| x.max(*y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::Max(a, b), self.shape(a), data, needs)
    }

    /// `(n, 1)` row scales applied to `(n, m)`.
    pub fn scale_rows(&mut self, s: Id, a: Id) -> Id {
        let (n, m) = self.shape(a);
        assert_eq!(self.shape(s), (n, 1), "scale_rows shape mismatch");
        let mut data = self.nodes[a.0].data.clone();
        let sv = &self.nodes[s.0].data;
        for i in 0..n {
            for j in 0..m {
                data[i * m + j] *= sv[i];
            }
        }
        let needs = self.needs(a) || self.needs(s);
        self.push(Op::ScaleRows(s, a), (n, m), data, needs)
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c * x).collect();
        let needs = self.needs(a);
        self.push(Op::Scale(a, c), self.shape(a), data, needs)
    }

    pub fn add_const(&mut self, a: Id, c: f64) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| c + x).collect();
        let needs = self.needs(a);
        self.push(Op::AddConst(a, c), self.shape(a), data, needs)
    }

    pub fn relu(&mut self, a: Id) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(Op::Relu(a), self.shape(a), data, needs)
    }

    pub fn tanh(&mut self, a: Id) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.tanh()).collect();
        let needs = self.needs(a);
        self.push(Op::Tanh(a), self.shape(a), data, needs)
    }

    pub fn sigmoid(&mut self, a: Id) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|&x| sigmoid(x)).collect();
        let needs = self.needs(a);
        self.push(Op::Sigmoid(a), self.shape(a), data, needs)
    }

    pub fn exp(&mut self, a: Id) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.exp()).collect();
        let needs = self.needs(a);
        self.push(Op::Exp(a), self.shape(a), data, needs)
    }

    pub fn log(&mut self, a: Id) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.ln()).collect();
        let needs = self.needs(a);
        self.push(Op::Log(a), self.shape(a), data, needs)
    }

    /// Numerically stable `ln(1 + exp(x))`.
    pub fn softplus(&mut self, a: Id) -> Id {
        let data: Vec<f64> =
            self.nodes[a.0].data.iter().map(|&x| x.max(0.0) + (-x.abs()).exp().ln_1p()).collect();
        let needs = self.needs(a);
        self.push(Op::Softplus(a), self.shape(a), data, needs)
    }

    pub fn clamp(&mut self, a: Id, lo: f64, hi: f64) -> Id {
        let data: Vec<f64> = self.nodes[a.0].data.iter().map(|x| x.clamp(lo, hi)).collect();
        let needs = self.needs(a);
        self.push(Op::Clamp(a, lo, hi), self.shape(a), data, needs)
    }

    pub fn softmax_rows(&mut self, a: Id) -> Id {
        let (n, m) = self.shape(a);
        let mut data = vec![0.0; n * m];
        for i in 0..n {
            let row = &self.nodes[a.0].data[i * m..(i + 1) * m];
            let mx = row.iter().cloned().fold(f64::MIN, f64::max);
            let mut z = 0.0;
            for j in 0..m {
                let e = (row[j] - mx).exp();
                data[i * m + j] = e;
                z += e;
            }
            for j in 0..m {
                data[i * m + j] /= z;
            }
        }
        let needs = self.needs(a);
        self.push(Op::SoftmaxRows(a), (n, m), data, needs)
    }

    pub fn sum(&mut self, a: Id) -> Id {
        let s: f64 = self.nodes[a.0].data.iter().sum();
        let needs = self.needs(a);
        self.push(Op::Sum(a), (1, 1), vec![s], needs)
    }

    pub fn mean(&mut self, a: Id) -> Id {
        let len = self.nodes[a.0].data.len().max(1);
        let s: f64 = self.nodes[a.0].data.iter().sum::<f64>() / len as f64;
        let needs = self.needs(a);
        self.push(Op::Mean(a), (1, 1), vec![s], needs)
    }

    pub fn row_sum(&mut self, a: Id) -> Id {
        let (n, m) = self.shape(a);
        let data: Vec<f64> =
            (0..n).map(|i| self.nodes[a.0].data[i * m..(i + 1) * m].iter().sum()).collect();
        let needs = self.needs(a);
        self.push(Op::RowSum(a), (n, 1), data, needs)
    }

    pub fn concat_cols(&mut self, a: Id, b: Id) -> Id {
        let (n, m1) = self.shape(a);
        let (n2, m2) = self.shape(b);
        assert_eq!(n, n2, "concat_cols row mismatch");
        let mut data = Vec::with_capacity(n * (m1 + m2));
        for i in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[i * m1..(i + 1) * m1]);
            data.extend_from_slice(&self.nodes[b.0].data[i * m2..(i + 1) * m2]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Op::ConcatCols(a, b), (n, m1 + m2), data, needs)
    }

    pub fn slice_cols(&mut self, a: Id, start: usize, len: usize) -> Id {
        let (n, m) = self.shape(a);
        assert!(start + len <= m, "slice_cols out of range");
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&self.nodes[a.0].data[i * m + start..i * m + start + len]);
        }
        let needs = self.needs(a);
        self.push(Op::SliceCols(a, start, len), (n, len), data, needs)
    }

    pub fn gather_rows(&mut self, a: Id, ids: std::rc::Rc<Vec<usize>>) -> Id {
        let (_, m) = self.shape(a);
        let mut data = Vec::with_capacity(ids.len() * m);
        for &r in ids.iter() {
            data.extend_from_slice(&self.nodes[a.0].data[r * m..(r + 1) * m]);
        }
        let needs = self.needs(a);
        let k = ids.len();
        self.push(Op::GatherRows(a, ids), (k, m), data, needs)
    }

    pub fn segment_sum(&mut self, a: Id, ids: std::rc::Rc<Vec<usize>>, n_segments: usize) -> Id {
        let (k, m) = self.shape(a);
        assert_eq!(k, ids.len(), "segment id length mismatch");
        let mut data = vec![0.0; n_segments * m];
        for (row, &seg) in ids.iter().enumerate() {
            for j in 0..m {
                data[seg * m + j] += self.nodes[a.0].data[row * m + j];
            }
        }
        let needs = self.needs(a);
        self.push(Op::SegmentSum(a, ids, n_segments), (n_segments, m), data, needs)
    }

    /// Mean of the rows mapped to each segment; empty segments yield zeros.
    pub fn segment_mean(&mut self, a: Id, ids: std::rc::Rc<Vec<usize>>, n_segments: usize) -> Id {
        let (k, m) = self.shape(a);
        assert_eq!(k, ids.len(), "segment id length mismatch");
        let mut counts = vec![0usize; n_segments];
        for &seg in ids.iter() {
            counts[seg] += 1;
        }
        let mut data = vec![0.0; n_segments * m];
        for (row, &seg) in ids.iter().enumerate() {
            for j in 0..m {
                data[seg * m + j] += self.nodes[a.0].data[row * m + j];
            }
        }
        for (seg, &c) in counts.iter().enumerate() {
            if c > 0 {
                for j in 0..m {
                    data[seg * m + j] /= c as f64;
                }
            }
        }
        let needs = self.needs(a);
        self.push(Op::SegmentMean(a, ids, n_segments), (n_segments, m), data, needs)
    }

    /// Softmax of `(k, 1)` scores within each segment.
    pub fn segment_softmax(&mut self, a: Id, ids: std::rc::Rc<Vec<usize>>, n_segments: usize) -> Id {
        let (k, m) = self.shape(a);
        assert_eq!(m, 1, "segment_softmax expects a column vector");
        assert_eq!(k, ids.len());
        let x = &self.nodes[a.0].data;
        let mut maxes = vec![f64::MIN; n_segments];
        for (row, &seg) in ids.iter().enumerate() {
            maxes[seg] = maxes[seg].max(x[row]);
        }
        let mut sums = vec![0.0; n_segments];
        let mut data = vec![0.0; k];
        for (row, &seg) in ids.iter().enumerate() {
            let e = (x[row] - maxes[seg]).exp();
            data[row] = e;
            sums[seg] += e;
        }
        for (row, &seg) in ids.iter().enumerate() {
            data[row] /= sums[seg];
        }
        let needs = self.needs(a);
        self.push(Op::SegmentSoftmax(a, ids, n_segments), (k, 1), data, needs)
    }

    /// Reverse sweep from a scalar loss. Returns per-node gradients; leaf
    /// gradients of parameters can then be flushed with
    /// [`Tape::accumulate_param_grads`].
    pub fn backward(&self, loss: Id) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Tensor("backward expects a scalar loss".into()));
        }
        if !self.value(loss).is_finite() {
            return Err(Error::Tensor(format!("non-finite loss {}", self.value(loss))));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                // Leaf gradients are the output of the sweep; everything
                // else is dropped once consumed.
                grads[idx] = Some(g.clone());
            }
            let acc = |target: Id, delta: Vec<f64>, grads: &mut Vec<Option<Vec<f64>>>| {
                if !self.needs(target) {
                    return;
                }
                let slot = &mut grads[target.0];
                match slot {
                    Some(existing) => {
                        for (e, d) in existing.iter_mut().zip(&delta) {
                            *e += d;
                        }
                    }
                    None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (n, k) = self.shape(*a);
                    let (_, m) = self.shape(*b);
                    if self.needs(*a) {
                        let mut da = vec![0.0; n * k];
                        kernels::matmul_grad_lhs(&g, &self.nodes[b.0].data, &mut da, n, k, m);
                        acc(*a, da, &mut grads);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * m];
                        kernels::matmul_grad_rhs(&self.nodes[a.0].data, &g, &mut db, n, k, m);
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.clone(), &mut grads);
                }
                Op::AddBias(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    if self.needs(*b) {
                        let (n, m) = node.shape;
                        let mut db = vec![0.0; m];
                        for i in 0..n {
                            for j in 0..m {
                                db[j] += g[i * m + j];
                            }
                        }
                        acc(*b, db, &mut grads);
                    }
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads);
                    acc(*b, g.iter().map(|x| -x).collect(), &mut grads);
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        let d: Vec<f64> =
                            g.iter().zip(&self.nodes[b.0].data).map(|(x, y)| x * y).collect();
                        acc(*a, d, &mut grads);
                    }
                    if self.needs(*b) {
                        let d: Vec<f64> =
                            g.iter().zip(&self.nodes[a.0].data).map(|(x, y)| x * y).collect();
                        acc(*b, d, &mut grads);
                    }
                }
                Op::Min(a, b) | Op::Max(a, b) => {
                    let is_min = matches!(node.op, Op::Min(..));
                    let ad = &self.nodes[a.0].data;
                    let bd = &self.nodes[b.0].data;
                    if self.needs(*a) {
                        let d: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, x)| {
                                let take_a = if is_min { ad[i] <= bd[i] } else { ad[i] >= bd[i] };
                                if take_a {
                                    *x
                                } else {
                                    0.0
                                }
                            })
                            .collect();
                        acc(*a, d, &mut grads);
                    }
                    if self.needs(*b) {
                        let d: Vec<f64> = g
                            .iter()
                            .enumerate()
                            .map(|(i, x)| {
                                let take_a = if is_min { ad[i] <= bd[i] } else { ad[i] >= bd[i] };
                                if take_a {
                                    0.0
                                } else {
                                    *x
                                }
                            })
                            .collect();
                        acc(*b, d, &mut grads);
                    }
                }
                Op::ScaleRows(s, a) => {
                    let (n, m) = node.shape;
                    if self.needs(*s) {
                        let ad = &self.nodes[a.0].data;
                        let d: Vec<f64> = (0..n)
                            .map(|i| (0..m).map(|j| g[i * m + j] * ad[i * m + j]).sum())
                            .collect();
                        acc(*s, d, &mut grads);
                    }
                    if self.needs(*a) {
                        let sv = &self.nodes[s.0].data;
                        let mut d = vec![0.0; n * m];
                        for i in 0..n {
                            for j in 0..m {
                                d[i * m + j] = g[i * m + j] * sv[i];
                            }
                        }
                        acc(*a, d, &mut grads);
                    }
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|x| c * x).collect(), &mut grads),
                Op::AddConst(a, _) => acc(*a, g.clone(), &mut grads),
                Op::Relu(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(x, &v)| if v > 0.0 { *x } else { 0.0 })
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::Tanh(a) => {
                    let d: Vec<f64> =
                        g.iter().zip(&node.data).map(|(x, y)| x * (1.0 - y * y)).collect();
                    acc(*a, d, &mut grads);
                }
                Op::Sigmoid(a) => {
                    let d: Vec<f64> =
                        g.iter().zip(&node.data).map(|(x, y)| x * y * (1.0 - y)).collect();
                    acc(*a, d, &mut grads);
                }
                Op::Exp(a) => {
                    let d: Vec<f64> = g.iter().zip(&node.data).map(|(x, y)| x * y).collect();
                    acc(*a, d, &mut grads);
                }
                Op::Log(a) => {
                    let d: Vec<f64> =
                        g.iter().zip(&self.nodes[a.0].data).map(|(x, v)| x / v).collect();
                    acc(*a, d, &mut grads);
                }
                Op::Softplus(a) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(x, &v)| x * sigmoid(v))
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::Clamp(a, lo, hi) => {
                    let d: Vec<f64> = g
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(x, &v)| if v >= *lo && v <= *hi { *x } else { 0.0 })
                        .collect();
                    acc(*a, d, &mut grads);
                }
                Op::SoftmaxRows(a) => {
                    let (n, m) = node.shape;
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        let y = &node.data[i * m..(i + 1) * m];
                        let gr = &g[i * m..(i + 1) * m];
                        let dotgy: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            d[i * m + j] = y[j] * (gr[j] - dotgy);
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::Sum(a) => {
                    let len = self.nodes[a.0].data.len();
                    acc(*a, vec![g[0]; len], &mut grads);
                }
                Op::Mean(a) => {
                    let len = self.nodes[a.0].data.len();
                    acc(*a, vec![g[0] / len as f64; len], &mut grads);
                }
                Op::RowSum(a) => {
                    let (n, m) = self.shape(*a);
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] = g[i];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::ConcatCols(a, b) => {
                    let (n, m1) = self.shape(*a);
                    let (_, m2) = self.shape(*b);
                    let m = m1 + m2;
                    if self.needs(*a) {
                        let mut d = Vec::with_capacity(n * m1);
                        for i in 0..n {
                            d.extend_from_slice(&g[i * m..i * m + m1]);
                        }
                        acc(*a, d, &mut grads);
                    }
                    if self.needs(*b) {
                        let mut d = Vec::with_capacity(n * m2);
                        for i in 0..n {
                            d.extend_from_slice(&g[i * m + m1..(i + 1) * m]);
                        }
                        acc(*b, d, &mut grads);
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let (n, m) = self.shape(*a);
                    let mut d = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..*len {
                            d[i * m + start + j] = g[i * len + j];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::GatherRows(a, ids) => {
                    let (n, m) = self.shape(*a);
                    let mut d = vec![0.0; n * m];
                    for (row, &src) in ids.iter().enumerate() {
                        for j in 0..m {
                            d[src * m + j] += g[row * m + j];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SegmentSum(a, ids, _) => {
                    let (k, m) = self.shape(*a);
                    let mut d = vec![0.0; k * m];
                    for (row, &seg) in ids.iter().enumerate() {
                        for j in 0..m {
                            d[row * m + j] = g[seg * m + j];
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SegmentMean(a, ids, n_segments) => {
                    let (k, m) = self.shape(*a);
                    let mut counts = vec![0usize; *n_segments];
                    for &seg in ids.iter() {
                        counts[seg] += 1;
                    }
                    let mut d = vec![0.0; k * m];
                    for (row, &seg) in ids.iter().enumerate() {
                        for j in 0..m {
                            d[row * m + j] = g[seg * m + j] / counts[seg] as f64;
                        }
                    }
                    acc(*a, d, &mut grads);
                }
                Op::SegmentSoftmax(a, ids, n_segments) => {
                    // Per segment: dx_i = y_i (g_i - sum_j g_j y_j).
                    let mut dots = vec![0.0; *n_segments];
                    for (row, &seg) in ids.iter().enumerate() {
                        dots[seg] += g[row] * node.data[row];
                    }
                    let d: Vec<f64> = ids
                        .iter()
                        .enumerate()
                        .map(|(row, &seg)| node.data[row] * (g[row] - dots[seg]))
                        .collect();
                    acc(*a, d, &mut grads);
                }
            }
        }
        Ok(Gradients { grads })
    }

    /// Flushes leaf gradients from a backward pass into the parameter store.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(pidx) = node.param {
                if let Some(Some(g)) = grads.grads.get(idx) {
                    for (pg, gv) in store.params[pidx].grad.iter_mut().zip(g) {
                        *pg += gv;
                    }
                }
            }
        }
    }

    /// Like [`Tape::accumulate_param_grads`] but into caller-owned buffers
    /// indexed by parameter position (for worker-local accumulation).
    pub fn collect_param_grads(&self, grads: &Gradients, out: &mut [Vec<f64>]) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Some(pidx) = node.param {
                if let Some(Some(g)) = grads.grads.get(idx) {
                    for (pg, gv) in out[pidx].iter_mut().zip(g) {
                        *pg += gv;
                    }
                }
            }
        }
    }
}

/// Dense matrix-product kernels shared by the forward pass and both
/// backward contractions. All use the cache-friendly i-k-j traversal with a
/// zero skip that exploits ReLU sparsity.
mod kernels {
    /// `out += a (n x k) * b (k x m)`, `out` zero-initialized by the caller.
    pub fn matmul(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let orow = &mut out[i * m..(i + 1) * m];
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[l * m..(l + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    }

    /// `da = g (n x m) * b^T (m x k)`: per entry a row-row dot product.
    pub fn matmul_grad_lhs(g: &[f64], b: &[f64], da: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for l in 0..k {
                let brow = &b[l * m..(l + 1) * m];
                let mut s = 0.0;
                for (gv, bv) in grow.iter().zip(brow) {
                    s += gv * bv;
                }
                da[i * k + l] = s;
            }
        }
    }

    /// `db = a^T (k x n) * g (n x m)`: scaled row accumulation.
    pub fn matmul_grad_rhs(a: &[f64], g: &[f64], db: &mut [f64], n: usize, k: usize, m: usize) {
        for i in 0..n {
            let grow = &g[i * m..(i + 1) * m];
            for l in 0..k {
                let av = a[i * k + l];
                if av == 0.0 {
                    continue;
                }
                let drow = &mut db[l * m..(l + 1) * m];
                for (d, &gv) in drow.iter_mut().zip(grow) {
                    *d += av * gv;
                }
            }
        }
    }

}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: Id) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
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

// ---------------------------------------------------------------------------
// Log-probabilities and entropies
// ---------------------------------------------------------------------------

pub const LOG_2PI: f64 = 1.8378770664093453;

/// Per-row diagonal Gaussian log-density of constant observations `x`
/// against tensor mean and log-std (all `(n, d)`).
pub fn gaussian_logprob(tape: &mut Tape, x: Id, mean: Id, log_std: Id) -> Id {
    let (n, d) = tape.shape(mean);
    assert_eq!(tape.shape(x), (n, d));
    assert_eq!(tape.shape(log_std), (n, d));
    let diff = tape.sub(x, mean);
    let neg_log_std = tape.scale(log_std, -1.0);
    let inv_std = tape.exp(neg_log_std);
    let z = tape.mul(diff, inv_std);
    let z2 = tape.mul(z, z);
    let mut per_coord = tape.scale(z2, -0.5);
    let half_log = tape.scale(log_std, -1.0);
    per_coord = tape.add(per_coord, half_log);
    let per_coord = tape.add_const(per_coord, -0.5 * LOG_2PI);
    tape.row_sum(per_coord)
}

/// Per-row diagonal Gaussian entropy from log-std `(n, d)`.
pub fn gaussian_entropy(tape: &mut Tape, log_std: Id) -> Id {
    let (_, d) = tape.shape(log_std);
    let s = tape.row_sum(log_std);
    tape.add_const(s, 0.5 * d as f64 * (LOG_2PI + 1.0))
}

/// Per-row Bernoulli log-probability of constant actions `a` in {0, 1}
/// under logits: `a * l - softplus(l)`.
pub fn bernoulli_logprob(tape: &mut Tape, actions: Id, logits: Id) -> Id {
    let al = tape.mul(actions, logits);
    let sp = tape.softplus(logits);
    tape.sub(al, sp)
}

/// Per-row Bernoulli entropy: `softplus(l) - l * sigmoid(l)`.
pub fn bernoulli_entropy(tape: &mut Tape, logits: Id) -> Id {
    let sp = tape.softplus(logits);
    let sig = tape.sigmoid(logits);
    let ls = tape.mul(logits, sig);
    tape.sub(sp, ls)
}

// ---------------------------------------------------------------------------
// Parameter store and Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: (usize, usize),
    pub data: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Named parameters with Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    order: Vec<String>,
    index: BTreeMap<String, usize>,
    params: Vec<Param>,
    pub step: u64,
}

/// Adam hyperparameters; `grad_clip_norm` is a global-norm clip applied
/// before the moment update.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, grad_clip_norm: 0.5 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: (usize, usize), data: Vec<f64>) {
        assert_eq!(data.len(), shape.0 * shape.1);
        assert!(!self.index.contains_key(name), "duplicate parameter {name}");
        let n = data.len();
        self.index.insert(name.to_string(), self.params.len());
        self.order.push(name.to_string());
        self.params.push(Param { shape, data, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] });
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> &Param {
        &self.params[self.index[name]]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Param {
        let i = self.index[name];
        &mut self.params[i]
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Zeroed gradient buffers shaped like the parameters, for worker-local
    /// accumulation.
    pub fn grad_buffers(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| vec![0.0; p.data.len()]).collect()
    }

    /// Adds worker-local gradient buffers into the store's gradients.
    pub fn merge_grad_buffers(&mut self, bufs: &[Vec<f64>]) {
        for (p, buf) in self.params.iter_mut().zip(bufs) {
            for (g, b) in p.grad.iter_mut().zip(buf) {
                *g += b;
            }
        }
    }

    /// Scales all accumulated gradients, e.g. by 1/batch.
    pub fn scale_grads(&mut self, c: f64) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g *= c);
        }
    }

    pub fn grad_global_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam update over all parameters. Gradients are globally
    /// norm-clipped first and zeroed afterwards. A non-finite gradient
    /// aborts the step, leaving parameters untouched.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> Result<()> {
        if self.params.iter().any(|p| p.grad.iter().any(|g| !g.is_finite())) {
            self.zero_grads();
            return Err(Error::Tensor("non-finite gradient; step aborted".into()));
        }
        let norm = self.grad_global_norm();
        let scale = if norm > cfg.grad_clip_norm && norm > 0.0 { cfg.grad_clip_norm / norm } else { 1.0 };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            for k in 0..p.data.len() {
                let g = p.grad[k] * scale;
                p.m[k] = cfg.beta1 * p.m[k] + (1.0 - cfg.beta1) * g;
                p.v[k] = cfg.beta2 * p.v[k] + (1.0 - cfg.beta2) * g * g;
                let mhat = p.m[k] / bc1;
                let vhat = p.v[k] / bc2;
                p.data[k] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        Ok(())
    }

    /// Serializes parameters and optimizer state to JSON.
    pub fn to_json(&self) -> serde_json::Value {
        let mut params = serde_json::Map::new();
        for (name, p) in self.order.iter().map(|n| (n, self.get(n))) {
            params.insert(
                name.clone(),
                serde_json::json!({
                    "shape": [p.shape.0, p.shape.1],
                    "data": p.data,
                    "m": p.m,
                    "v": p.v,
                }),
            );
        }
        serde_json::json!({ "step": self.step, "params": params })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let mut store = ParamStore::new();
        store.step = value["step"].as_u64().unwrap_or(0);
        let params = value["params"]
            .as_object()
            .ok_or_else(|| Error::Format("checkpoint missing params".into()))?;
        for (name, pv) in params {
            let shape = pv["shape"]
                .as_array()
                .and_then(|a| Some((a.first()?.as_u64()? as usize, a.get(1)?.as_u64()? as usize)))
                .ok_or_else(|| Error::Format("bad param shape".into()))?;
            let vecf = |key: &str| -> Result<Vec<f64>> {
                pv[key]
                    .as_array()
                    .ok_or_else(|| Error::Format(format!("bad param field {key}")))?
                    .iter()
                    .map(|x| x.as_f64().ok_or_else(|| Error::Format("non-numeric value".into())))
                    .collect()
            };
            store.insert(name, shape, vecf("data")?);
            let idx = store.index[name];
            store.params[idx].m = vecf("m")?;
            store.params[idx].v = vecf("v")?;
        }
        Ok(store)
    }
}
