//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! Every op appends a node holding its forward value plus whatever the
//! backward rule needs (argmax positions, norms, softmax probabilities).
//! Nodes are appended in evaluation order, so the node list is already a
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Kinks follow one convention throughout: the subgradient is 0 exactly at
//! the kink of `relu`/`min(·, 0)`, and max/min reductions route the gradient
//! to the lowest index among ties.

use std::ops::Range;

use super::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};
use crate::error::{Error, Result};

/// Floor applied to every norm in a denominator.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubScalar(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    MinZero(Var),
    NormalizeRows { x: Var, norms: Vec<f64>, floored: Vec<bool> },
    Cosine { a: Var, b: Var, na: f64, nb: f64, floored: (bool, bool) },
    MaxRows(Var, Vec<usize>),
    MaxCols(Var, Vec<usize>),
    /// Stores, per output entry, the flat index of the winning input entry.
    PickMax(Var, Vec<usize>),
    SegmentSumCols(Var, Vec<Range<usize>>),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    Sum(Var),
    WeightedSum(Var, Vec<f64>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    trainable: bool,
}

/// Gradients from one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if it was reached.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Records primitive ops for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kink_margin: f64,
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            kink_margin: f64::INFINITY,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Smallest distance of any differentiable input from a kink seen so far.
    ///
    /// Finite-difference checks resample points where this falls below the
    /// step size, since the two one-sided derivatives differ there.
    pub fn kink_margin(&self) -> f64 {
        self.kink_margin
    }

    /// Constant input; receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false, false)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// The single value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, trainable: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            trainable,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn note_kink(&mut self, v: Var, margin: f64) {
        if self.rg(v) && margin < self.kink_margin {
            self.kink_margin = margin;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg, false))
    }

    /// `a · bᵀ`; rows of `a` against rows of `b`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        if tb.cols() != k {
            return Err(Error::dim(format!(
                "matmul_bt inner dimensions {:?} x {:?}ᵀ",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = Tensor::from_parts(vec![m, n], matmul_bt_raw(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMulBt(a, b), rg, false))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg, false)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg, false))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(format!("{what}: shapes {sa:?} and {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// Adds a row vector to every row of a matrix.
    pub fn add_row(&mut self, m: Var, row: Var) -> Result<Var> {
        let (tm, tr) = (self.value(m), self.value(row));
        let cols = tm.cols();
        if tr.len() != cols {
            return Err(Error::dim(format!(
                "add_row: {:?} + row {:?}",
                tm.shape(),
                tr.shape()
            )));
        }
        let data = tm
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tr.data()[i % cols])
            .collect();
        let out = Tensor::from_parts(tm.shape().to_vec(), data);
        let rg = self.rg(m) || self.rg(row);
        Ok(self.push(out, Op::AddRow(m, row), rg, false))
    }

    /// `a - s` with `s` a one-element node broadcast over `a`.
    pub fn sub_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if !self.value(s).is_scalar_like() {
            return Err(Error::dim("sub_scalar: subtrahend must hold one value"));
        }
        let sv = self.scalar(s);
        let out = self.value(a).map(|v| v - sv);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::SubScalar(a, s), rg, false))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, c), rg, false)
    }

    /// `a + c` for a constant `c`.
    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(out, Op::Offset(a), rg, false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let margin = self.value(a).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(a, margin);
        let out = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg, false)
    }

    /// `min(x, 0)` elementwise.
    pub fn min_zero(&mut self, a: Var) -> Var {
        let margin = self.value(a).data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        self.note_kink(a, margin);
        let out = self.value(a).map(|v| if v < 0.0 { v } else { 0.0 });
        let rg = self.rg(a);
        self.push(out, Op::MinZero(a), rg, false)
    }

    /// Scales each row to unit norm, with the norm floored at [`NORM_EPS`].
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let (r, c) = (t.rows(), t.cols());
        let mut norms = Vec::with_capacity(r);
        let mut floored = Vec::with_capacity(r);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row(i);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let f = n < NORM_EPS;
            let n = n.max(NORM_EPS);
            data.extend(row.iter().map(|v| v / n));
            norms.push(n);
            floored.push(f);
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, Op::NormalizeRows { x, norms, floored }, rg, false)
    }

    /// Cosine of two equally sized tensors viewed as flat vectors, clamped to [-1, 1].
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.len() != tb.len() || ta.is_empty() {
            return Err(Error::dim(format!(
                "cosine: lengths {} and {}",
                ta.len(),
                tb.len()
            )));
        }
        let dot: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        let (na, nb) = (ta.norm(), tb.norm());
        let floored = (na < NORM_EPS, nb < NORM_EPS);
        let (na, nb) = (na.max(NORM_EPS), nb.max(NORM_EPS));
        let c = (dot / (na * nb)).clamp(-1.0, 1.0);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(
            Tensor::scalar(c),
            Op::Cosine { a, b, na, nb, floored },
            rg,
            false,
        ))
    }

    /// Per-row maximum, shape `[rows]`.
    pub fn max_pool_rows(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.is_empty() {
            return Err(Error::dim("max_pool_rows on empty matrix"));
        }
        let mut vals = Vec::with_capacity(t.rows());
        let mut arg = Vec::with_capacity(t.rows());
        let mut margin = f64::INFINITY;
        for i in 0..t.rows() {
            let (j, v, gap) = argmax(t.row(i).iter().copied());
            vals.push(v);
            arg.push(j);
            margin = margin.min(gap);
        }
        self.note_kink(m, margin);
        let rg = self.rg(m);
        Ok(self.push(Tensor::from_parts(vec![vals.len()], vals), Op::MaxRows(m, arg), rg, false))
    }

    /// Per-column maximum, shape `[cols]`.
    pub fn max_pool_cols(&mut self, m: Var) -> Result<Var> {
        let t = self.value(m);
        if t.is_empty() {
            return Err(Error::dim("max_pool_cols on empty matrix"));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut vals = Vec::with_capacity(c);
        let mut arg = Vec::with_capacity(c);
        let mut margin = f64::INFINITY;
        for j in 0..c {
            let (i, v, gap) = argmax((0..r).map(|i| t.get(i, j)));
            vals.push(v);
            arg.push(i);
            margin = margin.min(gap);
        }
        self.note_kink(m, margin);
        let rg = self.rg(m);
        Ok(self.push(Tensor::from_parts(vec![c], vals), Op::MaxCols(m, arg), rg, false))
    }

    /// Max over each block of `group` consecutive rows: `(rows/group) × cols`.
    pub fn group_max_rows(&mut self, m: Var, group: usize) -> Result<Var> {
        let t = self.value(m);
        let r = t.rows();
        if group == 0 || !r.is_multiple_of(group) {
            return Err(Error::dim(format!("group_max_rows: {r} rows in groups of {group}")));
        }
        let ranges: Vec<Range<usize>> = (0..r / group).map(|b| b * group..(b + 1) * group).collect();
        self.segment_max_rows(m, &ranges)
    }

    /// Max over each row segment: `segments.len() × cols`.
    pub fn segment_max_rows(&mut self, m: Var, segments: &[Range<usize>]) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = (t.rows(), t.cols());
        check_segments(segments, r)?;
        let mut vals = Vec::with_capacity(segments.len() * c);
        let mut picks = Vec::with_capacity(segments.len() * c);
        let mut margin = f64::INFINITY;
        for seg in segments {
            for j in 0..c {
                let (i, v, gap) = argmax(seg.clone().map(|i| t.get(i, j)));
                vals.push(v);
                picks.push((seg.start + i) * c + j);
                margin = margin.min(gap);
            }
        }
        self.note_kink(m, margin);
        let out = Tensor::from_parts(vec![segments.len(), c], vals);
        let rg = self.rg(m);
        Ok(self.push(out, Op::PickMax(m, picks), rg, false))
    }

    /// Min over each segment of a flat vector: shape `[segments.len()]`.
    pub fn segment_min(&mut self, v: Var, segments: &[Range<usize>]) -> Result<Var> {
        let t = self.value(v);
        check_segments(segments, t.len())?;
        let mut vals = Vec::with_capacity(segments.len());
        let mut picks = Vec::with_capacity(segments.len());
        let mut margin = f64::INFINITY;
        for seg in segments {
            let (i, m, gap) = argmax(t.data()[seg.clone()].iter().map(|x| -x));
            vals.push(-m);
            picks.push(seg.start + i);
            margin = margin.min(gap);
        }
        self.note_kink(v, margin);
        let rg = self.rg(v);
        Ok(self.push(Tensor::from_parts(vec![vals.len()], vals), Op::PickMax(v, picks), rg, false))
    }

    /// Per-row max over the entries where `allowed` is true: shape `[rows]`.
    pub fn masked_max_rows(&mut self, m: Var, allowed: &[bool]) -> Result<Var> {
        let t = self.value(m);
        if allowed.len() != t.len() {
            return Err(Error::dim("masked_max_rows: mask size mismatch"));
        }
        let (r, c) = (t.rows(), t.cols());
        let mut vals = Vec::with_capacity(r);
        let mut picks = Vec::with_capacity(r);
        let mut margin = f64::INFINITY;
        for i in 0..r {
            let cands: Vec<usize> = (0..c).filter(|&j| allowed[i * c + j]).collect();
            if cands.is_empty() {
                return Err(Error::Contract(format!("masked_max_rows: row {i} has no candidates")));
            }
            let (p, v, gap) = argmax(cands.iter().map(|&j| t.get(i, j)));
            vals.push(v);
            picks.push(i * c + cands[p]);
            margin = margin.min(gap);
        }
        self.note_kink(m, margin);
        let rg = self.rg(m);
        Ok(self.push(Tensor::from_parts(vec![r], vals), Op::PickMax(m, picks), rg, false))
    }

    /// Sums each column segment: `rows × segments.len()`.
    pub fn segment_sum_cols(&mut self, m: Var, segments: &[Range<usize>]) -> Result<Var> {
        let t = self.value(m);
        let (r, c) = (t.rows(), t.cols());
        check_segments(segments, c)?;
        let mut out = Vec::with_capacity(r * segments.len());
        for i in 0..r {
            let row = t.row(i);
            for seg in segments {
                out.push(row[seg.clone()].iter().sum());
            }
        }
        let out = Tensor::from_parts(vec![r, segments.len()], out);
        let rg = self.rg(m);
        Ok(self.push(out, Op::SegmentSumCols(m, segments.to_vec()), rg, false))
    }

    pub fn select_rows(&mut self, m: Var, rows: &[usize]) -> Result<Var> {
        let t = self.value(m);
        let c = t.cols();
        if let Some(&bad) = rows.iter().find(|&&i| i >= t.rows()) {
            return Err(Error::dim(format!("select_rows: row {bad} of {}", t.rows())));
        }
        let mut data = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_parts(vec![rows.len(), c], data);
        let rg = self.rg(m);
        Ok(self.push(out, Op::SelectRows(m, rows.to_vec()), rg, false))
    }

    /// Side-by-side concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat_cols of nothing"))?;
        let r = self.value(*first).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(Error::dim("concat_cols: row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![r, total], data);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg, false))
    }

    /// Flat-index gather into a vector.
    pub fn gather(&mut self, m: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(m);
        if let Some(&bad) = indices.iter().find(|&&i| i >= t.len()) {
            return Err(Error::dim(format!("gather: index {bad} of {}", t.len())));
        }
        let data = indices.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(vec![indices.len()], data);
        let rg = self.rg(m);
        Ok(self.push(out, Op::Gather(m, indices.to_vec()), rg, false))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg, false)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::dim("mean of empty tensor"));
        }
        self.weighted_sum(a, &vec![1.0 / n as f64; n])
    }

    /// `Σ wᵢ aᵢ` with constant weights.
    pub fn weighted_sum(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let t = self.value(a);
        if weights.len() != t.len() {
            return Err(Error::dim("weighted_sum: weight count mismatch"));
        }
        let v = t.data().iter().zip(weights).map(|(x, w)| x * w).sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(v), Op::WeightedSum(a, weights.to_vec()), rg, false))
    }

    /// Mean softmax cross-entropy of each logit row at its label.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        if labels.len() != r {
            return Err(Error::dim("cross_entropy: one label per row required"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = Vec::with_capacity(r * c);
        let mut total = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = t.row(i);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[label];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        let out = Tensor::scalar(total / r as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
            false,
        ))
    }

    /// Exact reverse-mode gradients of a one-element `root`.
    ///
    /// Every trainable leaf gets an entry, zero-filled when the root does not
    /// depend on it.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = &self.nodes[root.0].value;
        if !root_val.is_scalar_like() {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                root_val.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::from_parts(root_val.shape().to_vec(), vec![1.0]));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }

        for (i, node) in self.nodes.iter().enumerate() {
            if node.trainable && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                let shape = self.value(v).shape().to_vec();
                *slot = Some(Tensor::from_parts(shape, g.into_data()));
            }
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    self.accumulate(grads, *a, like(*a, matmul_bt_raw(gd, tb.data(), m, n, k)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, like(*b, matmul_at_raw(ta.data(), gd, m, k, n)));
                }
            }
            Op::MatMulBt(a, b) => {
                // out = a bᵀ; da = g b, db = gᵀ a
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    self.accumulate(grads, *a, like(*a, matmul_raw(gd, tb.data(), m, n, k)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, like(*b, matmul_at_raw(gd, ta.data(), m, n, k)));
                }
            }
            Op::Transpose(a) => {
                let gt = g.transpose();
                self.accumulate(grads, *a, like(*a, gt.into_data()));
            }
            Op::Reshape(a) | Op::Offset(a) => {
                self.accumulate(grads, *a, like(*a, gd.to_vec()));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, like(*a, gd.to_vec()));
                self.accumulate(grads, *b, like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, like(*a, gd.to_vec()));
                self.accumulate(grads, *b, like(*b, gd.iter().map(|v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, like(*a, gd.iter().zip(tb).map(|(g, y)| g * y).collect()));
                self.accumulate(grads, *b, like(*b, gd.iter().zip(ta).map(|(g, x)| g * x).collect()));
            }
            Op::AddRow(m, row) => {
                self.accumulate(grads, *m, like(*m, gd.to_vec()));
                if self.rg(*row) {
                    let c = self.value(*row).len();
                    let mut acc = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        acc[i % c] += v;
                    }
                    self.accumulate(grads, *row, like(*row, acc));
                }
            }
            Op::SubScalar(a, s) => {
                self.accumulate(grads, *a, like(*a, gd.to_vec()));
                let total: f64 = gd.iter().sum();
                self.accumulate(grads, *s, like(*s, vec![-total]));
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, like(*a, gd.iter().map(|v| v * c).collect()));
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::MinZero(a) => {
                let x = self.value(*a).data();
                let d = gd.iter().zip(x).map(|(g, x)| if *x < 0.0 { *g } else { 0.0 }).collect();
                self.accumulate(grads, *a, like(*a, d));
            }
            Op::NormalizeRows { x, norms, floored } => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for (i, (&n, &fl)) in norms.iter().zip(floored).enumerate() {
                    let yr = &y[i * c..(i + 1) * c];
                    let gr = &gd[i * c..(i + 1) * c];
                    let dot = if fl { 0.0 } else { yr.iter().zip(gr).map(|(a, b)| a * b).sum() };
                    for j in 0..c {
                        d[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(grads, *x, like(*x, d));
            }
            Op::Cosine { a, b, na, nb, floored } => {
                let gv = gd[0];
                let c = node.value.data()[0];
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let d = ta
                        .iter()
                        .zip(tb)
                        .map(|(x, y)| {
                            let radial = if floored.0 { 0.0 } else { c * x / (na * na) };
                            gv * (y / (na * nb) - radial)
                        })
                        .collect();
                    self.accumulate(grads, *a, like(*a, d));
                }
                if self.rg(*b) {
                    let d = tb
                        .iter()
                        .zip(ta)
                        .map(|(y, x)| {
                            let radial = if floored.1 { 0.0 } else { c * y / (nb * nb) };
                            gv * (x / (na * nb) - radial)
                        })
                        .collect();
                    self.accumulate(grads, *b, like(*b, d));
                }
            }
            Op::MaxRows(m, arg) => {
                let t = self.value(*m);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (i, &j) in arg.iter().enumerate() {
                    d[i * c + j] += gd[i];
                }
                self.accumulate(grads, *m, like(*m, d));
            }
            Op::MaxCols(m, arg) => {
                let t = self.value(*m);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (j, &i) in arg.iter().enumerate() {
                    d[i * c + j] += gd[j];
                }
                self.accumulate(grads, *m, like(*m, d));
            }
            Op::PickMax(m, picks) | Op::Gather(m, picks) => {
                let mut d = vec![0.0; self.value(*m).len()];
                for (o, &p) in picks.iter().enumerate() {
                    d[p] += gd[o];
                }
                self.accumulate(grads, *m, like(*m, d));
            }
            Op::SegmentSumCols(m, segs) => {
                let t = self.value(*m);
                let (r, c) = (t.rows(), t.cols());
                let ns = segs.len();
                let mut d = vec![0.0; r * c];
                for i in 0..r {
                    for (s, seg) in segs.iter().enumerate() {
                        let gv = gd[i * ns + s];
                        for j in seg.clone() {
                            d[i * c + j] = gv;
                        }
                    }
                }
                self.accumulate(grads, *m, like(*m, d));
            }
            Op::SelectRows(m, rows) => {
                let t = self.value(*m);
                let c = t.cols();
                let mut d = vec![0.0; t.len()];
                for (o, &i) in rows.iter().enumerate() {
                    for j in 0..c {
                        d[i * c + j] += gd[o * c + j];
                    }
                }
                self.accumulate(grads, *m, like(*m, d));
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                        }
                        self.accumulate(grads, p, like(p, d));
                    }
                    offset += c;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, like(*a, vec![gd[0]; n]));
            }
            Op::WeightedSum(a, w) => {
                self.accumulate(grads, *a, like(*a, w.iter().map(|w| w * gd[0]).collect()));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = self.value(*logits).cols();
                let scale = gd[0] / labels.len() as f64;
                let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= scale;
                }
                self.accumulate(grads, *logits, like(*logits, d));
            }
        }
    }
}

fn check_segments(segments: &[Range<usize>], len: usize) -> Result<()> {
    for seg in segments {
        if seg.is_empty() || seg.end > len {
            return Err(Error::dim(format!("segment {seg:?} invalid for length {len}")));
        }
    }
    Ok(())
}

/// `(first argmax, max, gap to runner-up)`; the gap is infinite for one element.
fn argmax(values: impl Iterator<Item = f64>) -> (usize, f64, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    let mut second = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best.1 {
            second = best.1;
            best = (i, v);
        } else if v > second {
            second = v;
        }
    }
    (best.0, best.1, best.1 - second)
}
