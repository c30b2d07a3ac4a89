//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends one node holding its output value and enough
//! metadata to replay the adjoint step. Nodes are created in topological
//! order by construction, so `backward` is a single reverse sweep.
//! Iteration and accumulation orders are fixed, which makes gradients
//! bit-reproducible for a given graph.
//!
//! Forward outputs are checked for NaN/Inf at every node; a non-finite
//! value aborts the computation with an error naming the operation.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Tanh,
    Sigmoid,
    Exp,
    Ln,
}

/// Reduction kinds; `Max` caches argmax indices for adjoint routing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Max,
    Mean,
}

enum Op {
    Leaf,
    /// `[m,k] x [k,n] -> [m,n]`
    MatMul { a: NodeId, b: NodeId },
    /// `[m,c] x [n,c]^T -> [m,n]`
    MatMulBT { a: NodeId, b: NodeId },
    /// `[m,k] x [k] -> [m]`
    MatVec { a: NodeId, x: NodeId },
    /// `[m] x [m,k] -> [k]`
    VecMat { x: NodeId, a: NodeId },
    /// `[n] . [n] -> [1]`
    Dot { a: NodeId, b: NodeId },
    Binary {
        kind: BinaryKind,
        a: NodeId,
        b: NodeId,
    },
    /// Row-broadcast add: `[r,c] + [c] -> [r,c]`.
    AddRow { a: NodeId, b: NodeId },
    Unary { kind: UnaryKind, x: NodeId },
    ScalarMul { x: NodeId, c: f64 },
    Clamp { x: NodeId, lo: f64, hi: f64 },
    /// Numerically stable masked softmax over a vector. `masked[i] == true`
    /// excludes position `i`; excluded outputs are exactly zero.
    Softmax { x: NodeId, masked: Vec<bool> },
    Reduce {
        kind: ReduceKind,
        x: NodeId,
        axis: usize,
        /// Cached argmax per output element; ties keep the first index.
        argmax: Vec<usize>,
    },
    /// Concatenation of vectors into one vector.
    Concat { parts: Vec<NodeId> },
    /// Stacks equal-length vectors as matrix rows.
    StackRows { rows: Vec<NodeId> },
    /// Extracts row `index` of a matrix as a vector.
    Row { x: NodeId, index: usize },
    Reshape { x: NodeId },
    /// Embedding-style row lookup. Rows whose index equals `skip` come out
    /// as zeros and receive no gradient, keeping that table row frozen.
    Gather {
        table: NodeId,
        indices: Vec<usize>,
        skip: Option<usize>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of one backward pass, indexable by node id.
pub struct Gradients {
    offsets: Vec<usize>,
    lens: Vec<usize>,
    adj: Vec<f64>,
}

impl Gradients {
    /// Gradient buffer for `id`; zeros if the node does not influence the loss.
    pub fn get(&self, id: NodeId) -> &[f64] {
        let o = self.offsets[id.0];
        &self.adj[o..o + self.lens[id.0]]
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Registers an input or parameter value. Finiteness is guaranteed by
    /// the `Tensor` contract.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn fetch(&self, op: &'static str, id: NodeId) -> Result<&Tensor> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(Error::IndexOutOfRange {
            op,
            index: id.0,
            bound: self.nodes.len(),
        })
    }

    fn finish(&mut self, op: &'static str, node_op: Op, shape: Vec<usize>, data: Vec<f64>) -> Result<NodeId> {
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op });
        }
        Ok(self.push(node_op, Tensor::new_unchecked(shape, data)))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.fetch("matmul", a)?, self.fetch("matmul", b)?);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        let (da, db) = (ta.data(), tb.data());
        for i in 0..m {
            for l in 0..k {
                let a_il = da[i * k + l];
                let brow = &db[l * n..(l + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a_il * brow[j];
                }
            }
        }
        self.finish("matmul", Op::MatMul { a, b }, vec![m, n], out)
    }

    /// Product against a transposed right operand: `[m,c] x [n,c] -> [m,n]`.
    /// Lets row-major weight matrices multiply without materializing a
    /// transposed copy.
    pub fn matmul_bt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.fetch("matmul_bt", a)?, self.fetch("matmul_bt", b)?);
        if !ta.is_matrix() || !tb.is_matrix() || ta.cols() != tb.cols() {
            return Err(Error::shape(
                "matmul_bt",
                format!("{:?} x {:?}^T", ta.shape(), tb.shape()),
            ));
        }
        let (m, c, n) = (ta.rows(), ta.cols(), tb.rows());
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let arow = &da[i * c..(i + 1) * c];
            for j in 0..n {
                let brow = &db[j * c..(j + 1) * c];
                let mut acc = 0.0;
                for l in 0..c {
                    acc += arow[l] * brow[l];
                }
                out[i * n + j] = acc;
            }
        }
        self.finish("matmul_bt", Op::MatMulBT { a, b }, vec![m, n], out)
    }

    pub fn matvec(&mut self, a: NodeId, x: NodeId) -> Result<NodeId> {
        let (ta, tx) = (self.fetch("matvec", a)?, self.fetch("matvec", x)?);
        if !ta.is_matrix() || !tx.is_vector() || ta.cols() != tx.numel() {
            return Err(Error::shape(
                "matvec",
                format!("{:?} x {:?}", ta.shape(), tx.shape()),
            ));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (da, dx) = (ta.data(), tx.data());
        let mut out = vec![0.0; m];
        for i in 0..m {
            let arow = &da[i * k..(i + 1) * k];
            let mut acc = 0.0;
            for l in 0..k {
                acc += arow[l] * dx[l];
            }
            out[i] = acc;
        }
        self.finish("matvec", Op::MatVec { a, x }, vec![m], out)
    }

    pub fn vecmat(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (tx, ta) = (self.fetch("vecmat", x)?, self.fetch("vecmat", a)?);
        if !tx.is_vector() || !ta.is_matrix() || tx.numel() != ta.rows() {
            return Err(Error::shape(
                "vecmat",
                format!("{:?} x {:?}", tx.shape(), ta.shape()),
            ));
        }
        let (m, k) = (ta.rows(), ta.cols());
        let (dx, da) = (tx.data(), ta.data());
        let mut out = vec![0.0; k];
        for i in 0..m {
            let xi = dx[i];
            let arow = &da[i * k..(i + 1) * k];
            for j in 0..k {
                out[j] += xi * arow[j];
            }
        }
        self.finish("vecmat", Op::VecMat { x, a }, vec![k], out)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.fetch("dot", a)?, self.fetch("dot", b)?);
        if !ta.is_vector() || !tb.is_vector() || ta.numel() != tb.numel() {
            return Err(Error::shape(
                "dot",
                format!("{:?} . {:?}", ta.shape(), tb.shape()),
            ));
        }
        let acc: f64 = ta.data().iter().zip(tb.data()).map(|(u, v)| u * v).sum();
        self.finish("dot", Op::Dot { a, b }, vec![1], vec![acc])
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, op: &'static str, kind: BinaryKind, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.fetch(op, a)?, self.fetch(op, b)?);
        let broadcast = kind == BinaryKind::Div && tb.numel() == 1;
        if !broadcast && ta.shape() != tb.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        if kind == BinaryKind::Div && tb.data().iter().any(|v| *v == 0.0) {
            return Err(Error::DivisionByZero { op });
        }
        let (da, db) = (ta.data(), tb.data());
        let out: Vec<f64> = match kind {
            BinaryKind::Add => da.iter().zip(db).map(|(u, v)| u + v).collect(),
            BinaryKind::Sub => da.iter().zip(db).map(|(u, v)| u - v).collect(),
            BinaryKind::Mul => da.iter().zip(db).map(|(u, v)| u * v).collect(),
            BinaryKind::Div => {
                if broadcast {
                    let s = db[0];
                    da.iter().map(|u| u / s).collect()
                } else {
                    da.iter().zip(db).map(|(u, v)| u / v).collect()
                }
            }
        };
        let shape = ta.shape().to_vec();
        self.finish(op, Op::Binary { kind, a, b }, shape, out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("add", BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("sub", BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("mul", BinaryKind::Mul, a, b)
    }

    /// Elementwise division. A single-element denominator broadcasts over
    /// `a`, which is how attention weights are rescaled by their maximum.
    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary("div", BinaryKind::Div, a, b)
    }

    /// Adds a length-`c` bias vector to every row of an `[r,c]` matrix.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.fetch("add_row", a)?, self.fetch("add_row", b)?);
        if !ta.is_matrix() || !tb.is_vector() || ta.cols() != tb.numel() {
            return Err(Error::shape(
                "add_row",
                format!("{:?} + {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, c) = (ta.rows(), ta.cols());
        let (da, db) = (ta.data(), tb.data());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] = da[i * c + j] + db[j];
            }
        }
        self.finish("add_row", Op::AddRow { a, b }, vec![r, c], out)
    }

    fn unary(&mut self, op: &'static str, kind: UnaryKind, x: NodeId) -> Result<NodeId> {
        let tx = self.fetch(op, x)?;
        let out: Vec<f64> = match kind {
            UnaryKind::Tanh => tx.data().iter().map(|v| v.tanh()).collect(),
            UnaryKind::Sigmoid => tx.data().iter().map(|v| sigmoid(*v)).collect(),
            UnaryKind::Exp => tx.data().iter().map(|v| v.exp()).collect(),
            UnaryKind::Ln => tx.data().iter().map(|v| v.ln()).collect(),
        };
        let shape = tx.shape().to_vec();
        self.finish(op, Op::Unary { kind, x }, shape, out)
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("tanh", UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("sigmoid", UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("exp", UnaryKind::Exp, x)
    }

    pub fn ln(&mut self, x: NodeId) -> Result<NodeId> {
        self.unary("ln", UnaryKind::Ln, x)
    }

    pub fn scalar_mul(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::invalid("scalar_mul", "factor must be finite"));
        }
        let tx = self.fetch("scalar_mul", x)?;
        let out: Vec<f64> = tx.data().iter().map(|v| v * c).collect();
        let shape = tx.shape().to_vec();
        self.finish("scalar_mul", Op::ScalarMul { x, c }, shape, out)
    }

    /// Clamps values into `[lo, hi]`. Clamped positions get zero gradient.
    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> Result<NodeId> {
        if !(lo < hi) {
            return Err(Error::invalid("clamp", "lower bound must be below upper"));
        }
        let tx = self.fetch("clamp", x)?;
        let out: Vec<f64> = tx.data().iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = tx.shape().to_vec();
        self.finish("clamp", Op::Clamp { x, lo, hi }, shape, out)
    }

    // ---- softmax and reductions --------------------------------------------

    /// Stable softmax over a vector with excluded positions.
    ///
    /// The running maximum of the included logits is subtracted before
    /// exponentiation, so any constant shift of the logits cancels exactly.
    /// Excluded positions (`masked[i] == true`) produce exactly 0.
    pub fn softmax_masked(&mut self, x: NodeId, masked: &[bool]) -> Result<NodeId> {
        let tx = self.fetch("softmax", x)?;
        if !tx.is_vector() || tx.numel() != masked.len() {
            return Err(Error::shape(
                "softmax",
                format!("input {:?} vs mask length {}", tx.shape(), masked.len()),
            ));
        }
        let d = tx.data();
        let mut m = f64::NEG_INFINITY;
        for (v, skip) in d.iter().zip(masked) {
            if !skip && *v > m {
                m = *v;
            }
        }
        if m == f64::NEG_INFINITY {
            return Err(Error::AllMasked { op: "softmax" });
        }
        let mut out = vec![0.0; d.len()];
        let mut sum = 0.0;
        for i in 0..d.len() {
            if !masked[i] {
                let e = (d[i] - m).exp();
                out[i] = e;
                sum += e;
            }
        }
        for v in out.iter_mut() {
            *v /= sum;
        }
        let shape = tx.shape().to_vec();
        self.finish(
            "softmax",
            Op::Softmax {
                x,
                masked: masked.to_vec(),
            },
            shape,
            out,
        )
    }

    /// Reduction along `axis` (0 for a vector or down matrix columns,
    /// 1 across matrix rows). The output of a vector reduction is `[1]`.
    pub fn reduce(&mut self, kind: ReduceKind, x: NodeId, axis: usize) -> Result<NodeId> {
        let tx = self.fetch("reduce", x)?;
        let (rows, cols, vector) = if tx.is_vector() {
            if axis != 0 {
                return Err(Error::invalid("reduce", "vector reduction needs axis 0"));
            }
            (1, tx.numel(), true)
        } else if tx.is_matrix() {
            if axis > 1 {
                return Err(Error::invalid("reduce", "axis must be 0 or 1"));
            }
            (tx.rows(), tx.cols(), false)
        } else {
            return Err(Error::shape("reduce", format!("{:?}", tx.shape())));
        };
        let d = tx.data();
        // Treat a vector as one row reduced along axis 1.
        let eff_axis = if vector { 1 } else { axis };
        let (out_len, red_len) = if eff_axis == 0 { (cols, rows) } else { (rows, cols) };
        let mut out = vec![0.0; out_len];
        let mut argmax = Vec::new();
        let at = |i: usize, j: usize| d[i * cols + j];
        match kind {
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..out_len {
                    let mut acc = 0.0;
                    for r in 0..red_len {
                        acc += if eff_axis == 0 { at(r, o) } else { at(o, r) };
                    }
                    out[o] = if kind == ReduceKind::Mean {
                        acc / red_len as f64
                    } else {
                        acc
                    };
                }
            }
            ReduceKind::Max => {
                argmax = vec![0; out_len];
                for o in 0..out_len {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_r = 0;
                    for r in 0..red_len {
                        let v = if eff_axis == 0 { at(r, o) } else { at(o, r) };
                        // Strict comparison keeps the first index on ties.
                        if v > best {
                            best = v;
                            best_r = r;
                        }
                    }
                    out[o] = best;
                    argmax[o] = best_r;
                }
            }
        }
        let shape = if vector { vec![1] } else { vec![out_len] };
        self.finish("reduce", Op::Reduce { kind, x, axis, argmax }, shape, out)
    }

    // ---- structure ----------------------------------------------------------

    /// Concatenates vectors in order into one vector.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "needs at least one part"));
        }
        let mut out = Vec::new();
        for &p in parts {
            let tp = self.fetch("concat", p)?;
            if !tp.is_vector() {
                return Err(Error::shape("concat", format!("{:?}", tp.shape())));
            }
            out.extend_from_slice(tp.data());
        }
        let len = out.len();
        self.finish(
            "concat",
            Op::Concat {
                parts: parts.to_vec(),
            },
            vec![len],
            out,
        )
    }

    /// Stacks equal-length vectors as the rows of a new matrix.
    pub fn stack_rows(&mut self, rows: &[NodeId]) -> Result<NodeId> {
        if rows.is_empty() {
            return Err(Error::invalid("stack_rows", "needs at least one row"));
        }
        let width = self.fetch("stack_rows", rows[0])?.numel();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let tr = self.fetch("stack_rows", r)?;
            if !tr.is_vector() || tr.numel() != width {
                return Err(Error::shape(
                    "stack_rows",
                    format!("expected [{}], got {:?}", width, tr.shape()),
                ));
            }
            out.extend_from_slice(tr.data());
        }
        let n = rows.len();
        self.finish(
            "stack_rows",
            Op::StackRows {
                rows: rows.to_vec(),
            },
            vec![n, width],
            out,
        )
    }

    /// Extracts matrix row `index` as a vector.
    pub fn row(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let tx = self.fetch("row", x)?;
        if !tx.is_matrix() {
            return Err(Error::shape("row", format!("{:?}", tx.shape())));
        }
        if index >= tx.rows() {
            return Err(Error::IndexOutOfRange {
                op: "row",
                index,
                bound: tx.rows(),
            });
        }
        let out = tx.row(index).to_vec();
        let w = tx.cols();
        self.finish("row", Op::Row { x, index }, vec![w], out)
    }

    /// Reinterprets a node under a new shape with the same element count.
    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let tx = self.fetch("reshape", x)?;
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != tx.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", tx.shape(), shape),
            ));
        }
        let out = tx.data().to_vec();
        self.finish("reshape", Op::Reshape { x }, shape, out)
    }

    /// Looks up `indices` as rows of a `[v,d]` table, producing `[len,d]`.
    /// Rows with index equal to `skip` are emitted as zeros and excluded
    /// from the gradient, which keeps a padding row permanently frozen.
    pub fn gather(&mut self, table: NodeId, indices: &[usize], skip: Option<usize>) -> Result<NodeId> {
        let tt = self.fetch("gather", table)?;
        if !tt.is_matrix() {
            return Err(Error::shape("gather", format!("{:?}", tt.shape())));
        }
        if indices.is_empty() {
            return Err(Error::invalid("gather", "needs at least one index"));
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut out = vec![0.0; indices.len() * d];
        for (t, &ix) in indices.iter().enumerate() {
            if ix >= v {
                return Err(Error::IndexOutOfRange {
                    op: "gather",
                    index: ix,
                    bound: v,
                });
            }
            if Some(ix) != skip {
                out[t * d..(t + 1) * d].copy_from_slice(tt.row(ix));
            }
        }
        let rows = indices.len();
        self.finish(
            "gather",
            Op::Gather {
                table,
                indices: indices.to_vec(),
                skip,
            },
            vec![rows, d],
            out,
        )
    }

    // ---- backward -----------------------------------------------------------

    /// Accumulates `d loss / d node` for every node by one reverse sweep.
    /// `loss` must hold a single element. The tape is not consumed; running
    /// backward again on the same tape reproduces the same bits.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let tl = self.fetch("backward", loss)?;
        if tl.numel() != 1 {
            return Err(Error::NonScalarLoss { len: tl.numel() });
        }
        let mut offsets = Vec::with_capacity(self.nodes.len());
        let mut lens = Vec::with_capacity(self.nodes.len());
        let mut total = 0;
        for n in &self.nodes {
            offsets.push(total);
            lens.push(n.value.numel());
            total += n.value.numel();
        }
        let mut adj = vec![0.0; total];
        adj[offsets[loss.0]] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            let (lower, upper) = adj.split_at_mut(offsets[i]);
            let g = &upper[..lens[i]];
            if g.iter().all(|v| *v == 0.0) {
                continue;
            }
            let node = &self.nodes[i];
            let val = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    let (da, db) = (ta.data(), tb.data());
                    // dA[i,l] += sum_j g[i,j] * B[l,j]
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            for l in 0..k {
                                let brow = &db[l * n..(l + 1) * n];
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += grow[j] * brow[j];
                                }
                                ga[r * k + l] += acc;
                            }
                        }
                    }
                    // dB[l,j] += sum_i A[i,l] * g[i,j]
                    {
                        let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                        for r in 0..m {
                            let grow = &g[r * n..(r + 1) * n];
                            let arow = &da[r * k..(r + 1) * k];
                            for l in 0..k {
                                let a_rl = arow[l];
                                let brow = &mut gb[l * n..(l + 1) * n];
                                for j in 0..n {
                                    brow[j] += a_rl * grow[j];
                                }
                            }
                        }
                    }
                }
                Op::MatMulBT { a, b } => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, c, n) = (ta.rows(), ta.cols(), tb.rows());
                    let (da, db) = (ta.data(), tb.data());
                    // dA[i,:] += sum_j g[i,j] * B[j,:]
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &mut ga[i * c..(i + 1) * c];
                            for j in 0..n {
                                let gij = grow[j];
                                let brow = &db[j * c..(j + 1) * c];
                                for l in 0..c {
                                    arow[l] += gij * brow[l];
                                }
                            }
                        }
                    }
                    // dB[j,:] += sum_i g[i,j] * A[i,:]
                    {
                        let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            let arow = &da[i * c..(i + 1) * c];
                            for j in 0..n {
                                let gij = grow[j];
                                let brow = &mut gb[j * c..(j + 1) * c];
                                for l in 0..c {
                                    brow[l] += gij * arow[l];
                                }
                            }
                        }
                    }
                }
                Op::MatVec { a, x } => {
                    let (ta, tx) = (&self.nodes[a.0].value, &self.nodes[x.0].value);
                    let (m, k) = (ta.rows(), ta.cols());
                    let (da, dx) = (ta.data(), tx.data());
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for r in 0..m {
                            let gr = g[r];
                            let arow = &mut ga[r * k..(r + 1) * k];
                            for l in 0..k {
                                arow[l] += gr * dx[l];
                            }
                        }
                    }
                    {
                        let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                        for r in 0..m {
                            let gr = g[r];
                            let arow = &da[r * k..(r + 1) * k];
                            for l in 0..k {
                                gx[l] += gr * arow[l];
                            }
                        }
                    }
                }
                Op::VecMat { x, a } => {
                    let (tx, ta) = (&self.nodes[x.0].value, &self.nodes[a.0].value);
                    let (m, k) = (ta.rows(), ta.cols());
                    let (dx, da) = (tx.data(), ta.data());
                    {
                        let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                        for r in 0..m {
                            let arow = &da[r * k..(r + 1) * k];
                            let mut acc = 0.0;
                            for j in 0..k {
                                acc += g[j] * arow[j];
                            }
                            gx[r] += acc;
                        }
                    }
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for r in 0..m {
                            let xr = dx[r];
                            let arow = &mut ga[r * k..(r + 1) * k];
                            for j in 0..k {
                                arow[j] += xr * g[j];
                            }
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = g[0];
                    let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for (gi, bi) in ga.iter_mut().zip(db) {
                            *gi += g0 * bi;
                        }
                    }
                    {
                        let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                        for (gi, ai) in gb.iter_mut().zip(da) {
                            *gi += g0 * ai;
                        }
                    }
                }
                Op::Binary { kind, a, b } => {
                    let (da, db) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                    match kind {
                        BinaryKind::Add => {
                            let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                            for (gi, gv) in ga.iter_mut().zip(g) {
                                *gi += gv;
                            }
                            let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                            for (gi, gv) in gb.iter_mut().zip(g) {
                                *gi += gv;
                            }
                        }
                        BinaryKind::Sub => {
                            let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                            for (gi, gv) in ga.iter_mut().zip(g) {
                                *gi += gv;
                            }
                            let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                            for (gi, gv) in gb.iter_mut().zip(g) {
                                *gi -= gv;
                            }
                        }
                        BinaryKind::Mul => {
                            let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                            for i in 0..g.len() {
                                ga[i] += g[i] * db[i];
                            }
                            let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                            for i in 0..g.len() {
                                gb[i] += g[i] * da[i];
                            }
                        }
                        BinaryKind::Div => {
                            if db.len() == 1 && da.len() > 1 {
                                let s = db[0];
                                let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                                for i in 0..g.len() {
                                    ga[i] += g[i] / s;
                                }
                                let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                                let mut acc = 0.0;
                                for i in 0..g.len() {
                                    acc += g[i] * da[i];
                                }
                                gb[0] -= acc / (s * s);
                            } else {
                                let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                                for i in 0..g.len() {
                                    ga[i] += g[i] / db[i];
                                }
                                let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                                for i in 0..g.len() {
                                    gb[i] -= g[i] * da[i] / (db[i] * db[i]);
                                }
                            }
                        }
                    }
                }
                Op::AddRow { a, b } => {
                    let c = self.nodes[b.0].value.numel();
                    let r = g.len() / c;
                    {
                        let ga = &mut lower[offsets[a.0]..offsets[a.0] + lens[a.0]];
                        for (gi, gv) in ga.iter_mut().zip(g) {
                            *gi += gv;
                        }
                    }
                    {
                        let gb = &mut lower[offsets[b.0]..offsets[b.0] + lens[b.0]];
                        for i in 0..r {
                            for j in 0..c {
                                gb[j] += g[i * c + j];
                            }
                        }
                    }
                }
                Op::Unary { kind, x } => {
                    let dx = self.nodes[x.0].value.data();
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    match kind {
                        UnaryKind::Tanh => {
                            for i in 0..g.len() {
                                gx[i] += g[i] * (1.0 - val[i] * val[i]);
                            }
                        }
                        UnaryKind::Sigmoid => {
                            for i in 0..g.len() {
                                gx[i] += g[i] * val[i] * (1.0 - val[i]);
                            }
                        }
                        UnaryKind::Exp => {
                            for i in 0..g.len() {
                                gx[i] += g[i] * val[i];
                            }
                        }
                        UnaryKind::Ln => {
                            for i in 0..g.len() {
                                gx[i] += g[i] / dx[i];
                            }
                        }
                    }
                }
                Op::ScalarMul { x, c } => {
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    for i in 0..g.len() {
                        gx[i] += g[i] * c;
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let dx = self.nodes[x.0].value.data();
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    for i in 0..g.len() {
                        if dx[i] >= *lo && dx[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
                Op::Softmax { x, masked } => {
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    let mut s = 0.0;
                    for i in 0..g.len() {
                        if !masked[i] {
                            s += g[i] * val[i];
                        }
                    }
                    for i in 0..g.len() {
                        if !masked[i] {
                            gx[i] += val[i] * (g[i] - s);
                        }
                    }
                }
                Op::Reduce { kind, x, axis, argmax } => {
                    let tx = &self.nodes[x.0].value;
                    let (rows, cols, vector) = if tx.is_vector() {
                        (1, tx.numel(), true)
                    } else {
                        (tx.rows(), tx.cols(), false)
                    };
                    let eff_axis = if vector { 1 } else { *axis };
                    let red_len = if eff_axis == 0 { rows } else { cols };
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    match kind {
                        ReduceKind::Sum | ReduceKind::Mean => {
                            let scale = if *kind == ReduceKind::Mean {
                                1.0 / red_len as f64
                            } else {
                                1.0
                            };
                            for o in 0..g.len() {
                                let gv = g[o] * scale;
                                for r in 0..red_len {
                                    let ix = if eff_axis == 0 { r * cols + o } else { o * cols + r };
                                    gx[ix] += gv;
                                }
                            }
                        }
                        ReduceKind::Max => {
                            for o in 0..g.len() {
                                let r = argmax[o];
                                let ix = if eff_axis == 0 { r * cols + o } else { o * cols + r };
                                gx[ix] += g[o];
                            }
                        }
                    }
                }
                Op::Concat { parts } => {
                    let mut at = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.numel();
                        let gp = &mut lower[offsets[p.0]..offsets[p.0] + lens[p.0]];
                        for i in 0..len {
                            gp[i] += g[at + i];
                        }
                        at += len;
                    }
                }
                Op::StackRows { rows } => {
                    let w = self.nodes[rows[0].0].value.numel();
                    for (r, &row_id) in rows.iter().enumerate() {
                        let gr = &mut lower[offsets[row_id.0]..offsets[row_id.0] + lens[row_id.0]];
                        for j in 0..w {
                            gr[j] += g[r * w + j];
                        }
                    }
                }
                Op::Row { x, index } => {
                    let w = g.len();
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    for j in 0..w {
                        gx[index * w + j] += g[j];
                    }
                }
                Op::Reshape { x } => {
                    let gx = &mut lower[offsets[x.0]..offsets[x.0] + lens[x.0]];
                    for (gi, gv) in gx.iter_mut().zip(g) {
                        *gi += gv;
                    }
                }
                Op::Gather { table, indices, skip } => {
                    let d = self.nodes[table.0].value.cols();
                    let gt = &mut lower[offsets[table.0]..offsets[table.0] + lens[table.0]];
                    for (t, &ix) in indices.iter().enumerate() {
                        if Some(ix) == *skip {
                            continue;
                        }
                        let grow = &g[t * d..(t + 1) * d];
                        let trow = &mut gt[ix * d..(ix + 1) * d];
                        for j in 0..d {
                            trow[j] += grow[j];
                        }
                    }
                }
            }
        }
        Ok(Gradients { offsets, lens, adj })
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Central-difference gradient of a scalar function of several tensors.
///
/// Each coordinate of each tensor is perturbed by `+eps` and `-eps` with
/// everything else held fixed. Returns one gradient buffer per input, in
/// input order.
pub fn finite_diff_grad<F>(f: &F, params: &[Tensor], eps: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[Tensor]) -> Result<f64>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::invalid("finite_diff", "eps must be positive"));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = vec![0.0; params[p].numel()];
        for i in 0..params[p].numel() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let up = f(&work)?;
            work[p].data_mut()[i] = orig - eps;
            let down = f(&work)?;
            work[p].data_mut()[i] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::NonFinite { op: "finite_diff" });
            }
            g[i] = (up - down) / (2.0 * eps);
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Largest relative disagreement between two gradient buffers.
///
/// The denominator is guarded by `max(|a|, |b|, 1e-8)` so that near-zero
/// coordinates compare absolutely instead of blowing up.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        let denom = a.abs().max(n.abs()).max(1e-8);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}
