//! Model building blocks: token embedding, GRU/LSTM cells, a bidirectional
//! runner, attention heads, and the dense sigmoid output layer.
//!
//! Parameters live outside any tape as plain tensors. For each forward pass
//! they are mounted onto a fresh [`Tape`] as leaf nodes (`mount` methods),
//! and the layer functions compose graph nodes from there.
//!
//! The scaled attention head divides the softmax weights by their maximum
//! and multiplies by a ceiling `lambda`, so the strongest position always
//! carries weight exactly `lambda` no matter how many positions compete.
//! Plain softmax attention is kept as a baseline, as is skipping attention
//! entirely and reading the last unmasked hidden state.

use rand::{Rng, RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::seqdata::PAD_INDEX;
use crate::tape::{NodeId, ReduceKind, Tape};
use crate::tensor::Tensor;

/// Recurrent cell family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    Gru,
    Lstm,
}

/// How the per-position hidden states are pooled into one feature vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    /// Softmax weights rescaled so the maximum equals `lambda`.
    Scaled,
    /// Plain softmax weights.
    Standard,
    /// No attention: the last unmasked hidden state is the feature.
    LastHidden,
}

/// Form of the per-position attention score.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreMode {
    /// One projection row yields a scalar score per position.
    Scalar,
    /// `dim` projection rows followed by a learned context vector.
    ContextVector { dim: usize },
}

impl ScoreMode {
    pub fn dim(&self) -> usize {
        match self {
            ScoreMode::Scalar => 1,
            ScoreMode::ContextVector { dim } => *dim,
        }
    }
}

/// Uniform init over `[-sqrt(6/(fan_in+fan_out)), +sqrt(...))`.
pub fn glorot_uniform(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new_unchecked(vec![rows, cols], data)
}

fn glorot_vector(rng: &mut impl Rng, len: usize) -> Tensor {
    let limit = (6.0 / (len + 1) as f64).sqrt();
    let data = (0..len).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new_unchecked(vec![len], data)
}

// ---- parameters -------------------------------------------------------------

/// Token embedding table `[vocab, d]`. Row [`PAD_INDEX`] stays zero and is
/// never updated.
#[derive(Clone, Debug)]
pub struct EmbeddingParams {
    pub table: Tensor,
}

impl EmbeddingParams {
    pub fn init(rng: &mut impl Rng, vocab_size: usize, embed_dim: usize) -> Self {
        let mut table = glorot_uniform(rng, vocab_size, embed_dim);
        table.row_mut(PAD_INDEX).fill(0.0);
        EmbeddingParams { table }
    }
}

/// Gated recurrent unit: update gate `z`, reset gate `r`, candidate state.
/// `w_*` act on the input, `u_*` on the previous hidden state.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruParams {
    pub fn init(rng: &mut impl Rng, hidden: usize, input: usize) -> Self {
        GruParams {
            w_z: glorot_uniform(rng, hidden, input),
            u_z: glorot_uniform(rng, hidden, hidden),
            b_z: Tensor::zeros(vec![hidden]),
            w_r: glorot_uniform(rng, hidden, input),
            u_r: glorot_uniform(rng, hidden, hidden),
            b_r: Tensor::zeros(vec![hidden]),
            w_h: glorot_uniform(rng, hidden, input),
            u_h: glorot_uniform(rng, hidden, hidden),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        GruParams {
            w_z: Tensor::zeros(vec![hidden, input]),
            u_z: Tensor::zeros(vec![hidden, hidden]),
            b_z: Tensor::zeros(vec![hidden]),
            w_r: Tensor::zeros(vec![hidden, input]),
            u_r: Tensor::zeros(vec![hidden, hidden]),
            b_r: Tensor::zeros(vec![hidden]),
            w_h: Tensor::zeros(vec![hidden, input]),
            u_h: Tensor::zeros(vec![hidden, hidden]),
            b_h: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_z.numel()
    }

    pub fn mount(&self, tape: &mut Tape) -> GruNodes {
        GruNodes {
            w_z: tape.leaf(self.w_z.clone()),
            u_z: tape.leaf(self.u_z.clone()),
            b_z: tape.leaf(self.b_z.clone()),
            w_r: tape.leaf(self.w_r.clone()),
            u_r: tape.leaf(self.u_r.clone()),
            b_r: tape.leaf(self.b_r.clone()),
            w_h: tape.leaf(self.w_h.clone()),
            u_h: tape.leaf(self.u_h.clone()),
            b_h: tape.leaf(self.b_h.clone()),
            hidden: self.hidden(),
        }
    }
}

/// LSTM gates acting on the concatenation `[h_prev, x]`: forget, input,
/// candidate, output.
#[derive(Clone, Debug)]
pub struct LstmParams {
    pub w_f: Tensor,
    pub b_f: Tensor,
    pub w_i: Tensor,
    pub b_i: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl LstmParams {
    pub fn init(rng: &mut impl Rng, hidden: usize, input: usize) -> Self {
        let width = hidden + input;
        LstmParams {
            w_f: glorot_uniform(rng, hidden, width),
            b_f: Tensor::zeros(vec![hidden]),
            w_i: glorot_uniform(rng, hidden, width),
            b_i: Tensor::zeros(vec![hidden]),
            w_c: glorot_uniform(rng, hidden, width),
            b_c: Tensor::zeros(vec![hidden]),
            w_o: glorot_uniform(rng, hidden, width),
            b_o: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn zeros(hidden: usize, input: usize) -> Self {
        let width = hidden + input;
        LstmParams {
            w_f: Tensor::zeros(vec![hidden, width]),
            b_f: Tensor::zeros(vec![hidden]),
            w_i: Tensor::zeros(vec![hidden, width]),
            b_i: Tensor::zeros(vec![hidden]),
            w_c: Tensor::zeros(vec![hidden, width]),
            b_c: Tensor::zeros(vec![hidden]),
            w_o: Tensor::zeros(vec![hidden, width]),
            b_o: Tensor::zeros(vec![hidden]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.b_f.numel()
    }

    pub fn mount(&self, tape: &mut Tape) -> LstmNodes {
        LstmNodes {
            w_f: tape.leaf(self.w_f.clone()),
            b_f: tape.leaf(self.b_f.clone()),
            w_i: tape.leaf(self.w_i.clone()),
            b_i: tape.leaf(self.b_i.clone()),
            w_c: tape.leaf(self.w_c.clone()),
            b_c: tape.leaf(self.b_c.clone()),
            w_o: tape.leaf(self.w_o.clone()),
            b_o: tape.leaf(self.b_o.clone()),
            hidden: self.hidden(),
        }
    }
}

/// Either recurrent cell, so the two directions can be stored uniformly.
#[derive(Clone, Debug)]
pub enum CellParams {
    Gru(GruParams),
    Lstm(LstmParams),
}

impl CellParams {
    pub fn init(rng: &mut impl Rng, kind: CellKind, hidden: usize, input: usize) -> Self {
        match kind {
            CellKind::Gru => CellParams::Gru(GruParams::init(rng, hidden, input)),
            CellKind::Lstm => CellParams::Lstm(LstmParams::init(rng, hidden, input)),
        }
    }

    pub fn kind(&self) -> CellKind {
        match self {
            CellParams::Gru(_) => CellKind::Gru,
            CellParams::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            CellParams::Gru(g) => g.hidden(),
            CellParams::Lstm(l) => l.hidden(),
        }
    }

    pub fn mount(&self, tape: &mut Tape) -> CellNodes {
        match self {
            CellParams::Gru(g) => CellNodes::Gru(g.mount(tape)),
            CellParams::Lstm(l) => CellNodes::Lstm(l.mount(tape)),
        }
    }
}

/// Attention scorer. `w_a` is `[dim, 2H]`, `b_a` is `[dim]`; for the
/// scalar form `dim == 1` and `context` is absent, otherwise scores are
/// dot products against the learned `context` vector.
///
/// `lambda` is the rescaled maximum weight and must lie in `(0, 1]`.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub w_a: Tensor,
    pub b_a: Tensor,
    pub context: Option<Tensor>,
    pub lambda: f64,
}

impl AttentionParams {
    pub fn init(rng: &mut impl Rng, hidden2: usize, score: ScoreMode, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        let dim = score.dim();
        if dim == 0 {
            return Err(Error::invalid("attention", "score dimension must be positive"));
        }
        Ok(AttentionParams {
            w_a: glorot_uniform(rng, dim, hidden2),
            b_a: Tensor::zeros(vec![dim]),
            context: match score {
                ScoreMode::Scalar => None,
                ScoreMode::ContextVector { dim } => Some(glorot_vector(rng, dim)),
            },
            lambda,
        })
    }

    pub fn mount(&self, tape: &mut Tape) -> AttentionNodes {
        AttentionNodes {
            w_a: tape.leaf(self.w_a.clone()),
            b_a: tape.leaf(self.b_a.clone()),
            context: self.context.as_ref().map(|c| tape.leaf(c.clone())),
            lambda: self.lambda,
        }
    }
}

pub(crate) fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::invalid(
            "attention",
            format!("lambda must lie in (0, 1], got {lambda}"),
        ));
    }
    Ok(())
}

/// Output projection `[K, 2H]` plus bias, squeezed through a sigmoid.
#[derive(Clone, Debug)]
pub struct DenseParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl DenseParams {
    pub fn init(rng: &mut impl Rng, outputs: usize, inputs: usize) -> Self {
        DenseParams {
            w: glorot_uniform(rng, outputs, inputs),
            b: Tensor::zeros(vec![outputs]),
        }
    }

    pub fn mount(&self, tape: &mut Tape) -> DenseNodes {
        DenseNodes {
            w: tape.leaf(self.w.clone()),
            b: tape.leaf(self.b.clone()),
        }
    }
}

/// Two-layer perceptron head: `sigmoid(W2 tanh(W1 x + b1) + b2)`.
#[derive(Clone, Debug)]
pub struct MlpParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl MlpParams {
    pub fn init(rng: &mut impl Rng, inputs: usize, hidden: usize, outputs: usize) -> Result<Self> {
        if inputs == 0 || hidden == 0 || outputs == 0 {
            return Err(Error::invalid("mlp", "dimensions must be positive"));
        }
        Ok(MlpParams {
            w1: glorot_uniform(rng, hidden, inputs),
            b1: Tensor::zeros(vec![hidden]),
            w2: glorot_uniform(rng, outputs, hidden),
            b2: Tensor::zeros(vec![outputs]),
        })
    }

    pub fn inputs(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub fn outputs(&self) -> usize {
        self.w2.rows()
    }

    pub fn mount(&self, tape: &mut Tape) -> MlpNodes {
        MlpNodes {
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("mlp.w1".into(), &self.w1),
            ("mlp.b1".into(), &self.b1),
            ("mlp.w2".into(), &self.w2),
            ("mlp.b2".into(), &self.b2),
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// Rebuilds the head from `(name, tensor)` pairs in the order of
    /// [`named_tensors`], checking name order and shape consistency.
    ///
    /// [`named_tensors`]: MlpParams::named_tensors
    pub fn from_named(tensors: &[(String, Tensor)]) -> Result<Self> {
        let names: Vec<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
        if names != ["mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2"] {
            return Err(Error::invalid("mlp", format!("unexpected tensor set {names:?}")));
        }
        let (w1, b1, w2, b2) = (&tensors[0].1, &tensors[1].1, &tensors[2].1, &tensors[3].1);
        let consistent = w1.is_matrix()
            && w2.is_matrix()
            && b1.shape() == [w1.rows()]
            && b2.shape() == [w2.rows()]
            && w2.cols() == w1.rows();
        if !consistent {
            return Err(Error::invalid("mlp", "tensor shapes are inconsistent"));
        }
        Ok(MlpParams {
            w1: w1.clone(),
            b1: b1.clone(),
            w2: w2.clone(),
            b2: b2.clone(),
        })
    }

    /// Straight-line inference without a tape.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.inputs() {
            return Err(Error::shape(
                "mlp",
                format!("input length {} vs expected {}", x.len(), self.inputs()),
            ));
        }
        let hidden: Vec<f64> = (0..self.hidden())
            .map(|i| {
                let s: f64 = self.w1.row(i).iter().zip(x).map(|(a, b)| a * b).sum();
                (s + self.b1.data()[i]).tanh()
            })
            .collect();
        Ok((0..self.outputs())
            .map(|k| {
                let s: f64 = self.w2.row(k).iter().zip(&hidden).map(|(a, b)| a * b).sum();
                crate::tape::sigmoid(s + self.b2.data()[k])
            })
            .collect())
    }
}

/// Tape forward pass of the perceptron head for one input vector.
pub fn mlp_forward(tape: &mut Tape, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
    let s = tape.matvec(nodes.w1, x)?;
    let s = tape.add(s, nodes.b1)?;
    let h = tape.tanh(s)?;
    let o = tape.matvec(nodes.w2, h)?;
    let o = tape.add(o, nodes.b2)?;
    tape.sigmoid(o)
}

/// Static description of a segment classifier.
#[derive(Clone, Debug)]
pub struct ModelShape {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    pub label_count: usize,
    pub cell: CellKind,
    pub score: ScoreMode,
    pub lambda: f64,
}

/// Every trainable tensor of the segment classifier.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embedding: EmbeddingParams,
    pub cell_fwd: CellParams,
    pub cell_bwd: CellParams,
    pub attention: AttentionParams,
    pub dense: DenseParams,
}

impl ModelParams {
    pub fn init(rng: &mut impl Rng, shape: &ModelShape) -> Result<Self> {
        if shape.vocab_size < 2 {
            return Err(Error::invalid("model", "vocabulary needs padding and unknown entries"));
        }
        if shape.embed_dim == 0 || shape.hidden_size == 0 || shape.label_count == 0 {
            return Err(Error::invalid("model", "dimensions must be positive"));
        }
        Ok(ModelParams {
            embedding: EmbeddingParams::init(rng, shape.vocab_size, shape.embed_dim),
            cell_fwd: CellParams::init(rng, shape.cell, shape.hidden_size, shape.embed_dim),
            cell_bwd: CellParams::init(rng, shape.cell, shape.hidden_size, shape.embed_dim),
            attention: AttentionParams::init(rng, 2 * shape.hidden_size, shape.score, shape.lambda)?,
            dense: DenseParams::init(rng, shape.label_count, 2 * shape.hidden_size),
        })
    }

    pub fn hidden_size(&self) -> usize {
        self.cell_fwd.hidden()
    }

    pub fn embed_dim(&self) -> usize {
        self.embedding.table.cols()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.table.rows()
    }

    pub fn label_count(&self) -> usize {
        self.dense.w.rows()
    }

    pub fn cell_kind(&self) -> CellKind {
        self.cell_fwd.kind()
    }

    pub fn score_mode(&self) -> ScoreMode {
        match &self.attention.context {
            None => ScoreMode::Scalar,
            Some(c) => ScoreMode::ContextVector { dim: c.numel() },
        }
    }

    pub fn mount(&self, tape: &mut Tape) -> ModelNodes {
        ModelNodes {
            table: tape.leaf(self.embedding.table.clone()),
            fwd: self.cell_fwd.mount(tape),
            bwd: self.cell_bwd.mount(tape),
            attention: self.attention.mount(tape),
            dense: self.dense.mount(tape),
        }
    }

    /// Trainable tensors in a fixed order shared by the optimizer state,
    /// checkpoints, and gradient extraction.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![("embedding.table".into(), &self.embedding.table)];
        push_cell(&mut out, "fwd", &self.cell_fwd);
        push_cell(&mut out, "bwd", &self.cell_bwd);
        out.push(("attention.w_a".into(), &self.attention.w_a));
        out.push(("attention.b_a".into(), &self.attention.b_a));
        if let Some(c) = &self.attention.context {
            out.push(("attention.context".into(), c));
        }
        out.push(("dense.w".into(), &self.dense.w));
        out.push(("dense.b".into(), &self.dense.b));
        out
    }

    /// Mutable view over the same tensors, same order as [`named_tensors`].
    ///
    /// [`named_tensors`]: ModelParams::named_tensors
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.embedding.table];
        push_cell_mut(&mut out, &mut self.cell_fwd);
        push_cell_mut(&mut out, &mut self.cell_bwd);
        out.push(&mut self.attention.w_a);
        out.push(&mut self.attention.b_a);
        if let Some(c) = &mut self.attention.context {
            out.push(c);
        }
        out.push(&mut self.dense.w);
        out.push(&mut self.dense.b);
        out
    }

    /// Rebuilds parameters from `(name, tensor)` pairs, for checkpoint
    /// restore. Names, order, and shapes must exactly match a model of
    /// `shape`.
    pub fn from_named(shape: &ModelShape, tensors: &[(String, Tensor)]) -> Result<Self> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut model = ModelParams::init(&mut rng, shape)?;
        let expected: Vec<String> = model.named_tensors().iter().map(|(n, _)| n.clone()).collect();
        if expected.len() != tensors.len() {
            return Err(Error::invalid(
                "model",
                format!("expected {} tensors, got {}", expected.len(), tensors.len()),
            ));
        }
        let mut slots = model.tensors_mut();
        for ((slot, want), (name, tensor)) in slots.iter_mut().zip(&expected).zip(tensors) {
            if name != want {
                return Err(Error::invalid(
                    "model",
                    format!("tensor order mismatch: `{name}` where `{want}` belongs"),
                ));
            }
            if slot.shape() != tensor.shape() {
                return Err(Error::invalid(
                    "model",
                    format!("tensor `{}` has shape {:?}, expected {:?}", name, tensor.shape(), slot.shape()),
                ));
            }
            **slot = tensor.clone();
        }
        drop(slots);
        Ok(model)
    }
}

fn push_cell<'a>(out: &mut Vec<(String, &'a Tensor)>, dir: &str, cell: &'a CellParams) {
    match cell {
        CellParams::Gru(g) => {
            for (name, t) in [
                ("w_z", &g.w_z),
                ("u_z", &g.u_z),
                ("b_z", &g.b_z),
                ("w_r", &g.w_r),
                ("u_r", &g.u_r),
                ("b_r", &g.b_r),
                ("w_h", &g.w_h),
                ("u_h", &g.u_h),
                ("b_h", &g.b_h),
            ] {
                out.push((format!("gru_{dir}.{name}"), t));
            }
        }
        CellParams::Lstm(l) => {
            for (name, t) in [
                ("w_f", &l.w_f),
                ("b_f", &l.b_f),
                ("w_i", &l.w_i),
                ("b_i", &l.b_i),
                ("w_c", &l.w_c),
                ("b_c", &l.b_c),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
            ] {
                out.push((format!("lstm_{dir}.{name}"), t));
            }
        }
    }
}

fn push_cell_mut<'a>(out: &mut Vec<&'a mut Tensor>, cell: &'a mut CellParams) {
    match cell {
        CellParams::Gru(g) => {
            out.push(&mut g.w_z);
            out.push(&mut g.u_z);
            out.push(&mut g.b_z);
            out.push(&mut g.w_r);
            out.push(&mut g.u_r);
            out.push(&mut g.b_r);
            out.push(&mut g.w_h);
            out.push(&mut g.u_h);
            out.push(&mut g.b_h);
        }
        CellParams::Lstm(l) => {
            out.push(&mut l.w_f);
            out.push(&mut l.b_f);
            out.push(&mut l.w_i);
            out.push(&mut l.b_i);
            out.push(&mut l.w_c);
            out.push(&mut l.b_c);
            out.push(&mut l.w_o);
            out.push(&mut l.b_o);
        }
    }
}

// ---- mounted views ----------------------------------------------------------

pub struct GruNodes {
    pub w_z: NodeId,
    pub u_z: NodeId,
    pub b_z: NodeId,
    pub w_r: NodeId,
    pub u_r: NodeId,
    pub b_r: NodeId,
    pub w_h: NodeId,
    pub u_h: NodeId,
    pub b_h: NodeId,
    hidden: usize,
}

pub struct LstmNodes {
    pub w_f: NodeId,
    pub b_f: NodeId,
    pub w_i: NodeId,
    pub b_i: NodeId,
    pub w_c: NodeId,
    pub b_c: NodeId,
    pub w_o: NodeId,
    pub b_o: NodeId,
    hidden: usize,
}

pub enum CellNodes {
    Gru(GruNodes),
    Lstm(LstmNodes),
}

impl CellNodes {
    pub fn hidden(&self) -> usize {
        match self {
            CellNodes::Gru(g) => g.hidden,
            CellNodes::Lstm(l) => l.hidden,
        }
    }
}

pub struct AttentionNodes {
    pub w_a: NodeId,
    pub b_a: NodeId,
    pub context: Option<NodeId>,
    pub lambda: f64,
}

pub struct DenseNodes {
    pub w: NodeId,
    pub b: NodeId,
}

pub struct ModelNodes {
    pub table: NodeId,
    pub fwd: CellNodes,
    pub bwd: CellNodes,
    pub attention: AttentionNodes,
    pub dense: DenseNodes,
}

impl ModelNodes {
    /// Mounted leaf ids in the same order as [`ModelParams::named_tensors`],
    /// so gradients can be copied back onto the parameter tensors.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut out = vec![self.table];
        for cell in [&self.fwd, &self.bwd] {
            match cell {
                CellNodes::Gru(g) => out.extend([
                    g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h,
                ]),
                CellNodes::Lstm(l) => {
                    out.extend([l.w_f, l.b_f, l.w_i, l.b_i, l.w_c, l.b_c, l.w_o, l.b_o])
                }
            }
        }
        out.push(self.attention.w_a);
        out.push(self.attention.b_a);
        if let Some(c) = self.attention.context {
            out.push(c);
        }
        out.push(self.dense.w);
        out.push(self.dense.b);
        out
    }
}

// ---- forward ops ------------------------------------------------------------

/// Embeds token indices as rows of the table: `[T, d]`. Padding positions
/// come out as zero rows and never receive gradient.
pub fn embed(tape: &mut Tape, table: NodeId, tokens: &[usize]) -> Result<NodeId> {
    tape.gather(table, tokens, Some(PAD_INDEX))
}

/// One GRU step.
///
/// The update gate blends the previous state with the candidate:
/// `h = z * (h_prev - cand) + cand`, i.e. `z` close to 1 keeps the old
/// state. The reset gate multiplies the recurrent term of the candidate.
pub fn gru_step(tape: &mut Tape, p: &GruNodes, x: NodeId, h_prev: NodeId) -> Result<NodeId> {
    let z = {
        let wx = tape.matvec(p.w_z, x)?;
        let uh = tape.matvec(p.u_z, h_prev)?;
        let s = tape.add(wx, uh)?;
        let s = tape.add(s, p.b_z)?;
        tape.sigmoid(s)?
    };
    let r = {
        let wx = tape.matvec(p.w_r, x)?;
        let uh = tape.matvec(p.u_r, h_prev)?;
        let s = tape.add(wx, uh)?;
        let s = tape.add(s, p.b_r)?;
        tape.sigmoid(s)?
    };
    let cand = {
        let wx = tape.matvec(p.w_h, x)?;
        let uh = tape.matvec(p.u_h, h_prev)?;
        let gated = tape.mul(r, uh)?;
        let s = tape.add(wx, gated)?;
        let s = tape.add(s, p.b_h)?;
        tape.tanh(s)?
    };
    let diff = tape.sub(h_prev, cand)?;
    let scaled = tape.mul(z, diff)?;
    tape.add(scaled, cand)
}

/// One LSTM step over the concatenated `[h_prev, x]` input.
/// Returns `(h, c)`.
pub fn lstm_step(
    tape: &mut Tape,
    p: &LstmNodes,
    x: NodeId,
    h_prev: NodeId,
    c_prev: NodeId,
) -> Result<(NodeId, NodeId)> {
    let hx = tape.concat(&[h_prev, x])?;
    let gate = |tape: &mut Tape, w: NodeId, b: NodeId| -> Result<NodeId> {
        let s = tape.matvec(w, hx)?;
        tape.add(s, b)
    };
    let f = {
        let s = gate(tape, p.w_f, p.b_f)?;
        tape.sigmoid(s)?
    };
    let i = {
        let s = gate(tape, p.w_i, p.b_i)?;
        tape.sigmoid(s)?
    };
    let cand = {
        let s = gate(tape, p.w_c, p.b_c)?;
        tape.tanh(s)?
    };
    let o = {
        let s = gate(tape, p.w_o, p.b_o)?;
        tape.sigmoid(s)?
    };
    let kept = tape.mul(f, c_prev)?;
    let written = tape.mul(i, cand)?;
    let c = tape.add(kept, written)?;
    let ct = tape.tanh(c)?;
    let h = tape.mul(o, ct)?;
    Ok((h, c))
}

struct CellState {
    h: NodeId,
    c: Option<NodeId>,
}

fn cell_start(tape: &mut Tape, cell: &CellNodes) -> CellState {
    let h = tape.leaf(Tensor::zeros(vec![cell.hidden()]));
    let c = match cell {
        CellNodes::Gru(_) => None,
        CellNodes::Lstm(_) => Some(tape.leaf(Tensor::zeros(vec![cell.hidden()]))),
    };
    CellState { h, c }
}

fn cell_step(tape: &mut Tape, cell: &CellNodes, x: NodeId, state: CellState) -> Result<CellState> {
    match cell {
        CellNodes::Gru(g) => Ok(CellState {
            h: gru_step(tape, g, x, state.h)?,
            c: None,
        }),
        CellNodes::Lstm(l) => {
            let (h, c) = lstm_step(tape, l, x, state.h, state.c.expect("lstm state"))?;
            Ok(CellState { h, c: Some(c) })
        }
    }
}

/// Runs both directions over an embedded segment `[T, d]` from zero initial
/// states and concatenates per-position states into `[T, 2H]`: row `t` is
/// `[h_fwd(t), h_bwd(t)]` where the backward pass consumed positions
/// `T-1 ..= t`.
pub fn bidir_run(tape: &mut Tape, fwd: &CellNodes, bwd: &CellNodes, x: NodeId) -> Result<NodeId> {
    if fwd.hidden() != bwd.hidden() {
        return Err(Error::shape(
            "bidir_run",
            format!("direction widths {} vs {}", fwd.hidden(), bwd.hidden()),
        ));
    }
    let t_len = {
        let tx = tape.value(x);
        if !tx.is_matrix() {
            return Err(Error::shape("bidir_run", format!("{:?}", tx.shape())));
        }
        tx.rows()
    };
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        rows.push(tape.row(x, t)?);
    }
    let mut forward = Vec::with_capacity(t_len);
    let mut state = cell_start(tape, fwd);
    for &r in &rows {
        state = cell_step(tape, fwd, r, state)?;
        forward.push(state.h);
    }
    let mut backward = Vec::with_capacity(t_len);
    let mut state = cell_start(tape, bwd);
    for t in (0..t_len).rev() {
        state = cell_step(tape, bwd, rows[t], state)?;
        backward.push(state.h);
    }
    backward.reverse();
    let mut cat = Vec::with_capacity(t_len);
    for t in 0..t_len {
        cat.push(tape.concat(&[forward[t], backward[t]])?);
    }
    tape.stack_rows(&cat)
}

/// Node handles of one attention application.
pub struct AttentionGraph {
    pub alpha: NodeId,
    pub alpha_max: NodeId,
    pub alpha_scaled: NodeId,
    pub context: NodeId,
}

/// Plain-value snapshot of an attention application.
#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub alpha: Vec<f64>,
    pub alpha_max: f64,
    pub alpha_scaled: Vec<f64>,
    pub context: Vec<f64>,
}

impl AttentionGraph {
    pub fn snapshot(&self, tape: &Tape) -> AttentionOutput {
        AttentionOutput {
            alpha: tape.value(self.alpha).data().to_vec(),
            alpha_max: tape.value(self.alpha_max).data()[0],
            alpha_scaled: tape.value(self.alpha_scaled).data().to_vec(),
            context: tape.value(self.context).data().to_vec(),
        }
    }
}

/// Per-position scores: `tanh(h W_a^T + b_a)` reduced to one scalar per
/// position, either directly (scalar mode) or against the context vector.
fn attention_scores(tape: &mut Tape, att: &AttentionNodes, h: NodeId) -> Result<NodeId> {
    let proj = tape.matmul_bt(h, att.w_a)?;
    let proj = tape.add_row(proj, att.b_a)?;
    let u = tape.tanh(proj)?;
    match att.context {
        Some(ctx) => tape.matvec(u, ctx),
        None => {
            let t_len = tape.value(u).rows();
            if tape.value(u).cols() != 1 {
                return Err(Error::shape("attention", "scalar scores need a single projection row"));
            }
            tape.reshape(u, vec![t_len])
        }
    }
}

/// Attention with max-rescaled weights.
///
/// Softmax weights are divided by their maximum and multiplied by `lambda`,
/// so the strongest unmasked position carries exactly `lambda` and relative
/// order is preserved. Masked positions keep weight exactly zero. The
/// context vector is the weighted sum of the per-position hidden states.
pub fn scaled_attention(
    tape: &mut Tape,
    att: &AttentionNodes,
    h: NodeId,
    masked: &[bool],
) -> Result<AttentionGraph> {
    check_lambda(att.lambda)?;
    let scores = attention_scores(tape, att, h)?;
    let alpha = tape.softmax_masked(scores, masked)?;
    let alpha_max = tape.reduce(ReduceKind::Max, alpha, 0)?;
    let ratio = tape.div(alpha, alpha_max)?;
    let alpha_scaled = tape.scalar_mul(ratio, att.lambda)?;
    let context = tape.vecmat(alpha_scaled, h)?;
    Ok(AttentionGraph {
        alpha,
        alpha_max,
        alpha_scaled,
        context,
    })
}

/// Plain softmax attention; the context uses the raw weights. The reported
/// `alpha_scaled` equals `alpha`.
pub fn standard_attention(
    tape: &mut Tape,
    att: &AttentionNodes,
    h: NodeId,
    masked: &[bool],
) -> Result<AttentionGraph> {
    let scores = attention_scores(tape, att, h)?;
    let alpha = tape.softmax_masked(scores, masked)?;
    let alpha_max = tape.reduce(ReduceKind::Max, alpha, 0)?;
    let context = tape.vecmat(alpha, h)?;
    Ok(AttentionGraph {
        alpha,
        alpha_max,
        alpha_scaled: alpha,
        context,
    })
}

/// Hidden-state row of the last unmasked position.
pub fn last_hidden(tape: &mut Tape, h: NodeId, masked: &[bool]) -> Result<NodeId> {
    let rows = tape.value(h).rows();
    if rows != masked.len() {
        return Err(Error::shape(
            "last_hidden",
            format!("{} rows vs mask length {}", rows, masked.len()),
        ));
    }
    let last = masked
        .iter()
        .rposition(|m| !*m)
        .ok_or(Error::AllMasked { op: "last_hidden" })?;
    tape.row(h, last)
}

/// `sigmoid(W v + b)`, one probability per label.
pub fn dense_sigmoid(tape: &mut Tape, d: &DenseNodes, v: NodeId) -> Result<NodeId> {
    let s = tape.matvec(d.w, v)?;
    let s = tape.add(s, d.b)?;
    tape.sigmoid(s)
}

/// Inverted dropout: keeps each entry with probability `1 - rate`, scaling
/// kept entries by `1/(1-rate)` so the expectation is unchanged. Inference
/// (`training == false`) and `rate == 0` pass the node through untouched.
pub fn dropout(
    tape: &mut Tape,
    x: NodeId,
    rate: f64,
    rng: &mut dyn RngCore,
    training: bool,
) -> Result<NodeId> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::invalid(
            "dropout",
            format!("rate must lie in [0, 1), got {rate}"),
        ));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let numel = tape.value(x).numel();
    let scale = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..numel)
        .map(|_| if rng.gen_bool(rate) { 0.0 } else { scale })
        .collect();
    let m = tape.leaf(Tensor::new_unchecked(shape, mask));
    tape.mul(x, m)
}

/// Pooling choice plus dropout rates for one segment forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardSettings {
    pub attention: AttentionKind,
    /// Dropout on the embedded input, before the recurrent layer.
    pub input_dropout: f64,
    /// Dropout on the pooled feature, before the dense output.
    pub feature_dropout: f64,
}

/// Handles produced by one segment forward pass.
pub struct SegmentGraph {
    /// Sigmoid output, one probability per label.
    pub pred: NodeId,
    /// Present for the attention variants.
    pub attention: Option<AttentionGraph>,
}

/// Full segment classifier: embed, dropout, bidirectional encoder, pooling
/// (attention or last hidden state), dropout, dense sigmoid.
///
/// Dropout is active only when an RNG is supplied; pass `None` at inference.
pub fn segment_forward(
    tape: &mut Tape,
    nodes: &ModelNodes,
    tokens: &[usize],
    masked: &[bool],
    settings: &ForwardSettings,
    mut rng: Option<&mut dyn RngCore>,
) -> Result<SegmentGraph> {
    if tokens.len() != masked.len() {
        return Err(Error::shape(
            "segment_forward",
            format!("{} tokens vs {} mask entries", tokens.len(), masked.len()),
        ));
    }
    let mut x = embed(tape, nodes.table, tokens)?;
    if let Some(r) = rng.as_deref_mut() {
        x = dropout(tape, x, settings.input_dropout, r, true)?;
    }
    let h = bidir_run(tape, &nodes.fwd, &nodes.bwd, x)?;
    let (mut feature, attention) = match settings.attention {
        AttentionKind::Scaled => {
            let a = scaled_attention(tape, &nodes.attention, h, masked)?;
            (a.context, Some(a))
        }
        AttentionKind::Standard => {
            let a = standard_attention(tape, &nodes.attention, h, masked)?;
            (a.context, Some(a))
        }
        AttentionKind::LastHidden => (last_hidden(tape, h, masked)?, None),
    };
    if let Some(r) = rng.as_deref_mut() {
        feature = dropout(tape, feature, settings.feature_dropout, r, true)?;
    }
    let pred = dense_sigmoid(tape, &nodes.dense, feature)?;
    Ok(SegmentGraph { pred, attention })
}
