//! Reverse-mode differentiation over a flat tape.
//!
//! Forward values are computed eagerly as nodes are appended; `backward`
//! walks the tape in reverse and accumulates gradients into the
//! [`ParamStore`] for `param`/`lookup` leaves. Node values are `Rc<Tensor>`,
//! so parameter leaves share storage with the store instead of copying.

use std::collections::BTreeMap;
use std::ops::Range;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Rc<Tensor>,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameter tensors plus their gradient accumulators.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: &str, value: Tensor, trainable: bool) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter `{name}`"
        );
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.params.push(Parameter {
            name: name.to_string(),
            value: Rc::new(value),
            grad,
            trainable,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    /// Adds `delta` into a parameter's gradient accumulator regardless of
    /// the trainable flag. The tape uses the flag; callers wiring custom
    /// gradients decide for themselves.
    pub fn accumulate_grad(&mut self, id: ParamId, delta: &Tensor) {
        self.params[id.0].grad.add_scaled(delta, 1.0);
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) {
        let p = &mut self.params[id.0];
        assert_eq!(p.value.shape(), value.shape(), "shape change for {}", p.name);
        p.value = Rc::new(value);
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Snapshot of parameter values (cheap: shares the Rc payloads).
    pub fn snapshot_values(&self) -> Vec<Rc<Tensor>> {
        self.params.iter().map(|p| Rc::clone(&p.value)).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Rc<Tensor>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = Rc::clone(v);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Reduce over rows; a `m×n` input becomes `1×n`.
    Rows,
    /// Reduce over columns; a `m×n` input becomes `m×1`.
    Cols,
    /// Reduce everything to a scalar.
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    Row,
    Col,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Lookup(ParamId, Vec<usize>),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId, Broadcast),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LogSumExp(NodeId, Axis),
    ConcatCols(Vec<NodeId>),
    StackRows(Vec<NodeId>),
    Transpose(NodeId),
    Slice(NodeId, Range<usize>, Range<usize>),
    Pick(NodeId, usize, usize),
    SumAll(NodeId),
    AddN(Vec<NodeId>),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.push_rc(Rc::new(value), op)
    }

    fn push_rc(&mut self, value: Rc<Tensor>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; gradients stop here.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let value = Rc::clone(&store.get(id).value);
        self.push_rc(value, Op::Param(id))
    }

    /// Selects rows of an embedding table. Duplicate indices accumulate
    /// gradient into the same row.
    pub fn lookup(&mut self, store: &ParamStore, id: ParamId, rows: &[usize]) -> Result<NodeId> {
        let table = store.value(id);
        let cols = table.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= table.rows() {
                return Err(Error::Shape {
                    op: "lookup",
                    detail: format!("row {r} out of {}", table.rows()),
                });
            }
            data.extend_from_slice(table.row(r));
        }
        let value = Tensor::from_vec(rows.len(), cols, data)?;
        Ok(self.push(value, Op::Lookup(id, rows.to_vec())))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Elementwise add; `b` may also be a row (`1×n`) or column (`m×1`)
    /// vector broadcast against matrix `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        let broadcast = if (ar, ac) == (br, bc) {
            Broadcast::None
        } else if br == 1 && bc == ac {
            Broadcast::Row
        } else if bc == 1 && br == ar {
            Broadcast::Col
        } else {
            return Err(Error::Shape {
                op: "add",
                detail: format!("{ar}x{ac} + {br}x{bc}"),
            });
        };
        let va = self.value(a);
        let vb = self.value(b);
        let mut out = Tensor::zeros(ar, ac);
        for r in 0..ar {
            for c in 0..ac {
                let b_val = match broadcast {
                    Broadcast::None => vb.get(r, c),
                    Broadcast::Row => vb.get(0, c),
                    Broadcast::Col => vb.get(r, 0),
                };
                out.set(r, c, va.get(r, c) + b_val);
            }
        }
        Ok(self.push(out, Op::Add(a, b, broadcast)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "sub",
                detail: format!("{:?} - {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let mut out = self.value(a).clone();
        out.add_scaled(self.value(b), -1.0);
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("{:?} * {:?}", self.value(a).shape(), self.value(b).shape()),
            });
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x * factor).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("same size");
        self.push(out, Op::Scale(a, factor))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("same size");
        self.push(out, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let out = Tensor::from_vec(va.rows(), va.cols(), data).expect("same size");
        self.push(out, Op::Sigmoid(a))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.shape();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let row = va.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..cols {
                denom += (row[c] - max).exp();
            }
            for c in 0..cols {
                out.set(r, c, (row[c] - max).exp() / denom);
            }
        }
        self.push(out, Op::Softmax(a))
    }

    pub fn log_sum_exp(&mut self, a: NodeId, axis: Axis) -> NodeId {
        let va = self.value(a);
        let out = lse_forward(va, axis);
        self.push(out, Op::LogSumExp(a, axis))
    }

    /// Concatenation along the last axis; inputs must agree on rows.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(Error::Shape {
                    op: "concat",
                    detail: format!(
                        "row mismatch: {} vs {}",
                        rows,
                        self.value(p).rows()
                    ),
                });
            }
            cols += self.value(p).cols();
        }
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut offset = 0;
            for &p in parts {
                let vp = self.value(p);
                let width = vp.cols();
                out.data_mut()[r * cols + offset..r * cols + offset + width]
                    .copy_from_slice(vp.row(r));
                offset += width;
            }
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks inputs along the first axis; inputs must agree on cols.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).cols() != cols {
                return Err(Error::Shape {
                    op: "stack",
                    detail: format!("col mismatch: {} vs {}", cols, self.value(p).cols()),
                });
            }
            rows += self.value(p).rows();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::from_vec(rows, cols, data)?;
        Ok(self.push(out, Op::StackRows(parts.to_vec())))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transposed();
        self.push(out, Op::Transpose(a))
    }

    pub fn slice(&mut self, a: NodeId, rows: Range<usize>, cols: Range<usize>) -> Result<NodeId> {
        let va = self.value(a);
        if rows.end > va.rows() || cols.end > va.cols() || rows.is_empty() || cols.is_empty() {
            return Err(Error::Shape {
                op: "slice",
                detail: format!("{rows:?},{cols:?} of {}x{}", va.rows(), va.cols()),
            });
        }
        let mut out = Tensor::zeros(rows.len(), cols.len());
        for (ri, r) in rows.clone().enumerate() {
            for (ci, c) in cols.clone().enumerate() {
                out.set(ri, ci, va.get(r, c));
            }
        }
        Ok(self.push(out, Op::Slice(a, rows, cols)))
    }

    /// Selects a single element as a 1×1 node.
    pub fn pick(&mut self, a: NodeId, r: usize, c: usize) -> Result<NodeId> {
        let va = self.value(a);
        if r >= va.rows() || c >= va.cols() {
            return Err(Error::Shape {
                op: "pick",
                detail: format!("({r},{c}) of {}x{}", va.rows(), va.cols()),
            });
        }
        let out = Tensor::scalar(va.get(r, c));
        Ok(self.push(out, Op::Pick(a, r, c)))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a))
    }

    /// Sum of same-shaped nodes.
    pub fn add_n(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        assert!(!parts.is_empty());
        let shape = self.value(parts[0]).shape();
        let mut out = self.value(parts[0]).clone();
        for &p in &parts[1..] {
            if self.value(p).shape() != shape {
                return Err(Error::Shape {
                    op: "add_n",
                    detail: format!("{:?} vs {:?}", shape, self.value(p).shape()),
                });
            }
            out.add_scaled(self.value(p), 1.0);
        }
        Ok(self.push(out, Op::AddN(parts.to_vec())))
    }

    /// Runs the reverse pass from a scalar `loss` node, accumulating
    /// parameter gradients into `store` (trainable parameters only).
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Invalid(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => {
                    let p = &mut store.params[id.0];
                    if p.trainable {
                        p.grad.add_scaled(&grad, 1.0);
                    }
                }
                Op::Lookup(id, rows) => {
                    let p = &mut store.params[id.0];
                    if p.trainable {
                        let cols = grad.cols();
                        for (i, &r) in rows.iter().enumerate() {
                            for c in 0..cols {
                                let v = p.grad.get(r, c) + grad.get(i, c);
                                p.grad.set(r, c, v);
                            }
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let da = grad.matmul(&self.value(*b).transposed())?;
                    let db = self.value(*a).transposed().matmul(&grad)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b, broadcast) => {
                    accumulate(&mut grads, *a, grad.clone());
                    let db = match broadcast {
                        Broadcast::None => grad,
                        Broadcast::Row => {
                            let mut db = Tensor::zeros(1, grad.cols());
                            for r in 0..grad.rows() {
                                for c in 0..grad.cols() {
                                    db.set(0, c, db.get(0, c) + grad.get(r, c));
                                }
                            }
                            db
                        }
                        Broadcast::Col => {
                            let mut db = Tensor::zeros(grad.rows(), 1);
                            for r in 0..grad.rows() {
                                for c in 0..grad.cols() {
                                    db.set(r, 0, db.get(r, 0) + grad.get(r, c));
                                }
                            }
                            db
                        }
                    };
                    accumulate(&mut grads, *b, db);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, grad.clone());
                    let mut db = Tensor::zeros(grad.rows(), grad.cols());
                    db.add_scaled(&grad, -1.0);
                    accumulate(&mut grads, *b, db);
                }
                Op::Mul(a, b) => {
                    let mut da = self.value(*b).clone();
                    for (g, x) in da.data_mut().iter_mut().zip(grad.data()) {
                        *g *= x;
                    }
                    let mut db = self.value(*a).clone();
                    for (g, x) in db.data_mut().iter_mut().zip(grad.data()) {
                        *g *= x;
                    }
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Scale(a, factor) => {
                    let mut da = grad;
                    for g in da.data_mut() {
                        *g *= factor;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let mut da = grad;
                    for (g, &t) in da.data_mut().iter_mut().zip(y.data()) {
                        *g *= 1.0 - t * t;
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let mut da = grad;
                    for (g, &s) in da.data_mut().iter_mut().zip(y.data()) {
                        *g *= s * (1.0 - s);
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax(a) => {
                    // dx = y ⊙ (dy − <dy, y>_row)
                    let y = &node.value;
                    let (rows, cols) = y.shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        let mut dot = 0.0;
                        for c in 0..cols {
                            dot += grad.get(r, c) * y.get(r, c);
                        }
                        for c in 0..cols {
                            da.set(r, c, y.get(r, c) * (grad.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSumExp(a, axis) => {
                    let x = self.value(*a);
                    let out = &node.value;
                    let (rows, cols) = x.shape();
                    let mut da = Tensor::zeros(rows, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let (g, o) = match axis {
                                Axis::Rows => (grad.get(0, c), out.get(0, c)),
                                Axis::Cols => (grad.get(r, 0), out.get(r, 0)),
                                Axis::All => (grad.get(0, 0), out.get(0, 0)),
                            };
                            da.set(r, c, g * (x.get(r, c) - o).exp());
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let (pr, pc) = vp.shape();
                        let mut dp = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            for c in 0..pc {
                                dp.set(r, c, grad.get(r, offset + c));
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        offset += pc;
                    }
                }
                Op::StackRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let vp = self.value(p);
                        let (pr, pc) = vp.shape();
                        let mut dp = Tensor::zeros(pr, pc);
                        for r in 0..pr {
                            for c in 0..pc {
                                dp.set(r, c, grad.get(offset + r, c));
                            }
                        }
                        accumulate(&mut grads, p, dp);
                        offset += pr;
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads, *a, grad.transposed());
                }
                Op::Slice(a, rows, cols) => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    for (ri, r) in rows.clone().enumerate() {
                        for (ci, c) in cols.clone().enumerate() {
                            da.set(r, c, grad.get(ri, ci));
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Pick(a, r, c) => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    da.set(*r, *c, grad.item());
                    accumulate(&mut grads, *a, da);
                }
                Op::SumAll(a) => {
                    let va = self.value(*a);
                    let mut da = Tensor::zeros(va.rows(), va.cols());
                    da.fill(grad.item());
                    accumulate(&mut grads, *a, da);
                }
                Op::AddN(parts) => {
                    for &p in parts {
                        accumulate(&mut grads, p, grad.clone());
                    }
                }
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(g) => g.add_scaled(&delta, 1.0),
        slot @ None => *slot = Some(delta),
    }
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn lse_forward(x: &Tensor, axis: Axis) -> Tensor {
    let (rows, cols) = x.shape();
    match axis {
        Axis::Rows => {
            let mut out = Tensor::zeros(1, cols);
            for c in 0..cols {
                let mut max = f64::NEG_INFINITY;
                for r in 0..rows {
                    max = max.max(x.get(r, c));
                }
                let mut sum = 0.0;
                for r in 0..rows {
                    sum += (x.get(r, c) - max).exp();
                }
                out.set(0, c, max + sum.ln());
            }
            out
        }
        Axis::Cols => {
            let mut out = Tensor::zeros(rows, 1);
            for r in 0..rows {
                let row = x.row(r);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
                out.set(r, 0, max + sum.ln());
            }
            out
        }
        Axis::All => {
            let max = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = x.data().iter().map(|v| (v - max).exp()).sum();
            Tensor::scalar(max + sum.ln())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lse_of_two_zeros_is_ln_two() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![0.0, 0.0]));
        let y = tape.log_sum_exp(x, Axis::All);
        assert!((tape.value(y).item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_of_constant_vector_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![3.7; 5]));
        let y = tape.softmax(x);
        for &v in tape.value(y).data() {
            assert!((v - 0.2).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_params_collect_no_gradient() {
        let mut store = ParamStore::new();
        let frozen = store.register("frozen", Tensor::row_vector(vec![1.0, 2.0]), false);
        let live = store.register("live", Tensor::row_vector(vec![3.0, 4.0]), true);
        let mut tape = Tape::new();
        let a = tape.param(&store, frozen);
        let b = tape.param(&store, live);
        let prod = tape.mul(a, b).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(frozen).data(), &[0.0, 0.0]);
        assert_eq!(store.grad(live).data(), &[1.0, 2.0]);
    }

    #[test]
    fn duplicate_lookup_rows_accumulate() {
        let mut store = ParamStore::new();
        let table = store.register(
            "table",
            Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            true,
        );
        let mut tape = Tape::new();
        let rows = tape.lookup(&store, table, &[1, 1, 0]).unwrap();
        let loss = tape.sum_all(rows);
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(table).data(), &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row_vector(vec![1.0, 2.0]));
        assert!(tape.backward(x, &mut store).is_err());
    }
}
