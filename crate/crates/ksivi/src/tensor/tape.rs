//! Operation tape for reverse-mode differentiation.
//!
//! Values are computed eagerly as nodes are pushed, so intermediate results
//! (e.g. sample coordinates needed for a bandwidth heuristic) can be read
//! mid-graph. `backward` walks the node list once in reverse creation order,
//! which is a reverse topological order because operands always precede their
//! consumers.

use super::{matmul_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

/// Recorded primitive. Scalar-constant forms (`Scale`, `AddScalar`) are fused
/// variants of multiply/add with a constant operand.
#[derive(Clone, Copy, Debug)]
pub enum Op {
    Leaf,
    Const,
    Add(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MatMul {
        a: usize,
        b: usize,
        ta: bool,
        tb: bool,
    },
    Relu(usize),
    Exp(usize),
    Ln(usize),
    PowConst(usize, f64),
    Scale(usize, f64),
    AddScalar(usize, f64),
    SumAll(usize),
    SumRows(usize),
    SumCols(usize),
    BroadcastRow(usize),
    BroadcastCol(usize),
    BroadcastScalar(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    /// Tracked leaf: receives a gradient from `backward`.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Untracked input: never accumulates a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn tracked_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "add shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o += x;
        }
        let tracked = self.tracked_any(&[a.0, b.0]);
        self.push(out, Op::Add(a.0, b.0), tracked)
    }

    /// a - b, composed as add(a, scale(b, -1)).
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "mul shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o *= x;
        }
        let tracked = self.tracked_any(&[a.0, b.0]);
        self.push(out, Op::Mul(a.0, b.0), tracked)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(va.same_shape(vb), "div shape {:?} vs {:?}", va.shape(), vb.shape());
        let mut out = va.clone();
        for (o, &x) in out.data_mut().iter_mut().zip(vb.data()) {
            *o /= x;
        }
        let tracked = self.tracked_any(&[a.0, b.0]);
        self.push(out, Op::Div(a.0, b.0), tracked)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_opt(a, b, false, false)
    }

    /// A * B^T.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_opt(a, b, false, true)
    }

    /// A^T * B.
    pub fn matmul_tn(&mut self, a: Var, b: Var) -> Var {
        self.matmul_opt(a, b, true, false)
    }

    pub fn matmul_opt(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let out = super::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        let tracked = self.tracked_any(&[a.0, b.0]);
        self.push(out, Op::MatMul { a: a.0, b: b.0, ta, tb }, tracked)
    }

    /// Rectified linear unit; derivative at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(|x| if x > 0.0 { x } else { 0.0 });
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::Relu(a.0), tracked)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::exp);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::Exp(a.0), tracked)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.map(f64::ln);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::Ln(a.0), tracked)
    }

    /// Element-wise x^p for constant p. Small integer exponents take a
    /// multiply-only path (powf is an order of magnitude slower).
    pub fn pow_const(&mut self, a: Var, p: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| pow_fast(x, p));
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::PowConst(a.0, p), tracked)
    }

    /// Multiply every element by a scalar constant.
    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x * s);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::Scale(a.0, s), tracked)
    }

    /// Add a scalar constant to every element.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.nodes[a.0].value.map(|x| x + s);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::AddScalar(a.0, s), tracked)
    }

    /// Sum all entries to a 1x1 scalar.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let tracked = self.nodes[a.0].tracked;
        self.push(Tensor::scalar(s), Op::SumAll(a.0), tracked)
    }

    /// Row sums: (r, c) -> (r, 1).
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let data: Vec<f64> = (0..v.rows()).map(|i| v.row_slice(i).iter().sum()).collect();
        let out = Tensor::new(v.rows(), 1, data);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::SumRows(a.0), tracked)
    }

    /// Column sums: (r, c) -> (1, c).
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let v = &self.nodes[a.0].value;
        let mut data = vec![0.0; v.cols()];
        for i in 0..v.rows() {
            for (acc, &x) in data.iter_mut().zip(v.row_slice(i)) {
                *acc += x;
            }
        }
        let out = Tensor::new(1, v.cols(), data);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::SumCols(a.0), tracked)
    }

    /// Replicate a (1, c) row to (rows, c).
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.rows(), 1, "broadcast_row source must be 1xC");
        let mut data = Vec::with_capacity(rows * v.cols());
        for _ in 0..rows {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, v.cols(), data);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::BroadcastRow(a.0), tracked)
    }

    /// Replicate an (r, 1) column to (r, cols).
    pub fn broadcast_col(&mut self, a: Var, cols: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert_eq!(v.cols(), 1, "broadcast_col source must be Rx1");
        let mut data = Vec::with_capacity(v.rows() * cols);
        for i in 0..v.rows() {
            let x = v.data()[i];
            data.extend(std::iter::repeat(x).take(cols));
        }
        let out = Tensor::new(v.rows(), cols, data);
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::BroadcastCol(a.0), tracked)
    }

    /// Replicate a 1x1 scalar to (rows, cols).
    pub fn broadcast_scalar(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = &self.nodes[a.0].value;
        assert!(v.is_scalar(), "broadcast_scalar source must be 1x1");
        let out = Tensor::full(rows, cols, v.item());
        let tracked = self.nodes[a.0].tracked;
        self.push(out, Op::BroadcastScalar(a.0), tracked)
    }

    /// Reverse pass from a scalar root. Every tracked node is visited exactly
    /// once; gradients of independent leaves accumulate additively.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_node = &self.nodes[root.0];
        if !root_node.value.is_scalar() {
            let (rows, cols) = root_node.value.shape();
            return Err(Error::NonScalarRoot { rows, cols });
        }
        if !root_node.tracked {
            return Err(Error::UntrackedGraph);
        }

        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(1.0));

        for id in (0..=root.0).rev() {
            if !self.nodes[id].tracked {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[id];
        match node.op {
            Op::Leaf | Op::Const => {}
            Op::Add(a, b) => {
                self.acc_into(grads, a, |buf| axpy(buf, 1.0, g));
                self.acc_into(grads, b, |buf| axpy(buf, 1.0, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc_into(grads, a, |buf| acc_prod(buf, g, vb));
                self.acc_into(grads, b, |buf| acc_prod(buf, g, va));
            }
            Op::Div(a, b) => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                self.acc_into(grads, a, |buf| {
                    for ((o, &gi), &bi) in buf.data_mut().iter_mut().zip(g.data()).zip(vb.data()) {
                        *o += gi / bi;
                    }
                });
                self.acc_into(grads, b, |buf| {
                    for (((o, &gi), &ai), &bi) in buf
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(va.data())
                        .zip(vb.data())
                    {
                        *o -= gi * ai / (bi * bi);
                    }
                });
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (&self.nodes[a].value, &self.nodes[b].value);
                // d/dA and d/dB for each transposition pattern.
                self.acc_into(grads, a, |buf| match (ta, tb) {
                    (false, false) => matmul_acc(buf, g, vb, false, true),
                    (false, true) => matmul_acc(buf, g, vb, false, false),
                    (true, false) => matmul_acc(buf, vb, g, false, true),
                    (true, true) => matmul_acc(buf, vb, g, true, true),
                });
                self.acc_into(grads, b, |buf| match (ta, tb) {
                    (false, false) => matmul_acc(buf, va, g, true, false),
                    (false, true) => matmul_acc(buf, g, va, true, false),
                    (true, false) => matmul_acc(buf, va, g, false, false),
                    (true, true) => matmul_acc(buf, g, va, true, true),
                });
            }
            Op::Relu(a) => {
                let va = &self.nodes[a].value;
                self.acc_into(grads, a, |buf| {
                    for ((o, &gi), &xi) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        if xi > 0.0 {
                            *o += gi;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let vout = &node.value;
                self.acc_into(grads, a, |buf| acc_prod(buf, g, vout));
            }
            Op::Ln(a) => {
                let va = &self.nodes[a].value;
                self.acc_into(grads, a, |buf| {
                    for ((o, &gi), &xi) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gi / xi;
                    }
                });
            }
            Op::PowConst(a, p) => {
                let va = &self.nodes[a].value;
                self.acc_into(grads, a, |buf| {
                    for ((o, &gi), &xi) in buf.data_mut().iter_mut().zip(g.data()).zip(va.data()) {
                        *o += gi * p * pow_fast(xi, p - 1.0);
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc_into(grads, a, |buf| axpy(buf, s, g));
            }
            Op::AddScalar(a, _) => {
                self.acc_into(grads, a, |buf| axpy(buf, 1.0, g));
            }
            Op::SumAll(a) => {
                let gs = g.item();
                self.acc_into(grads, a, |buf| {
                    for o in buf.data_mut() {
                        *o += gs;
                    }
                });
            }
            Op::SumRows(a) => {
                self.acc_into(grads, a, |buf| {
                    let cols = buf.cols();
                    for i in 0..buf.rows() {
                        let gi = g.data()[i];
                        for o in &mut buf.row_slice_mut(i)[..cols] {
                            *o += gi;
                        }
                    }
                });
            }
            Op::SumCols(a) => {
                self.acc_into(grads, a, |buf| {
                    for i in 0..buf.rows() {
                        for (o, &gj) in buf.row_slice_mut(i).iter_mut().zip(g.data()) {
                            *o += gj;
                        }
                    }
                });
            }
            Op::BroadcastRow(a) => {
                self.acc_into(grads, a, |buf| {
                    for i in 0..g.rows() {
                        for (o, &gi) in buf.data_mut().iter_mut().zip(g.row_slice(i)) {
                            *o += gi;
                        }
                    }
                });
            }
            Op::BroadcastCol(a) => {
                self.acc_into(grads, a, |buf| {
                    for i in 0..g.rows() {
                        buf.data_mut()[i] += g.row_slice(i).iter().sum::<f64>();
                    }
                });
            }
            Op::BroadcastScalar(a) => {
                let s: f64 = g.data().iter().sum();
                self.acc_into(grads, a, |buf| {
                    buf.data_mut()[0] += s;
                });
            }
        }
    }

    fn acc_into(&self, grads: &mut [Option<Tensor>], target: usize, apply: impl FnOnce(&mut Tensor)) {
        if !self.nodes[target].tracked {
            return;
        }
        let buf = grads[target].get_or_insert_with(|| {
            let (r, c) = self.nodes[target].value.shape();
            Tensor::zeros(r, c)
        });
        apply(buf);
    }
}

#[inline]
fn pow_fast(x: f64, p: f64) -> f64 {
    if p == 2.0 {
        x * x
    } else if p == 3.0 {
        x * x * x
    } else if p == 1.0 {
        x
    } else if p == 0.5 {
        x.sqrt()
    } else if p == -0.5 {
        1.0 / x.sqrt()
    } else if p == -1.0 {
        1.0 / x
    } else if p == -1.5 {
        1.0 / (x * x.sqrt())
    } else if p == -2.0 {
        1.0 / (x * x)
    } else if p == 0.0 {
        1.0
    } else {
        x.powf(p)
    }
}

fn axpy(buf: &mut Tensor, s: f64, g: &Tensor) {
    for (o, &x) in buf.data_mut().iter_mut().zip(g.data()) {
        *o += s * x;
    }
}

fn acc_prod(buf: &mut Tensor, g: &Tensor, v: &Tensor) {
    for ((o, &gi), &vi) in buf.data_mut().iter_mut().zip(g.data()).zip(v.data()) {
        *o += gi * vi;
    }
}

/// Gradient map returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root with respect to a tracked leaf; `None` for
    /// untracked or unreached nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
