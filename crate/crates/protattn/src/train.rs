//! Loss, optimizer, and the epoch loop for the segment classifier.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    check_lambda, segment_forward, AttentionKind, CellKind, ForwardSettings, ModelParams,
    ModelShape, ScoreMode,
};
use crate::seqdata::SegmentDataset;
use crate::tape::{NodeId, ReduceKind, Tape};
use crate::tensor::Tensor;

/// Dropout rate on embedded inputs, before the recurrent layer.
pub const INPUT_DROPOUT: f64 = 0.3;
/// Dropout rate on the pooled feature, before the dense output.
pub const FEATURE_DROPOUT: f64 = 0.2;
/// Probabilities are clamped to `[CLAMP, 1 - CLAMP]` before the logarithm.
pub const CLAMP: f64 = 1e-12;

/// Everything a segment-classifier training run needs besides the data.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub seed: u64,
    pub attention: AttentionKind,
    pub score: ScoreMode,
    pub cell: CellKind,
    pub segment_size: usize,
    pub n: usize,
    pub embed_dim: usize,
    pub hidden_size: usize,
    /// Fraction of parent sequences held out for validation when no
    /// explicit validation set is given.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            lambda: 1.0,
            seed: 42,
            attention: AttentionKind::Scaled,
            score: ScoreMode::Scalar,
            cell: CellKind::Gru,
            segment_size: 100,
            n: 3,
            embed_dim: 32,
            hidden_size: 70,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs/batch_size", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive and finite"));
        }
        check_lambda(self.lambda)?;
        if self.n == 0 || self.segment_size < self.n {
            return Err(Error::config(
                "segment_size",
                format!("segment size {} must be at least n = {}", self.segment_size, self.n),
            ));
        }
        if self.embed_dim == 0 || self.hidden_size == 0 {
            return Err(Error::config("embed_dim/hidden_size", "must be positive"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction", "must lie strictly between 0 and 1"));
        }
        Ok(())
    }

    pub fn forward_settings(&self) -> ForwardSettings {
        ForwardSettings {
            attention: self.attention,
            input_dropout: INPUT_DROPOUT,
            feature_dropout: FEATURE_DROPOUT,
        }
    }

    pub fn model_shape(&self, vocab_size: usize, label_count: usize) -> ModelShape {
        ModelShape {
            vocab_size,
            embed_dim: self.embed_dim,
            hidden_size: self.hidden_size,
            label_count,
            cell: self.cell,
            score: self.score,
            lambda: self.lambda,
        }
    }
}

/// Mean binary cross entropy over the label dimension:
/// `-(1/K) * sum_k [y_k ln p_k + (1-y_k) ln(1-p_k)]`, with `p` clamped to
/// `[1e-12, 1-1e-12]` so saturated sigmoids cannot produce `ln 0`.
pub fn bce_loss(tape: &mut Tape, pred: NodeId, target: &[f64]) -> Result<NodeId> {
    let k = tape.value(pred).numel();
    if k != target.len() {
        return Err(Error::shape(
            "bce_loss",
            format!("{} predictions vs {} targets", k, target.len()),
        ));
    }
    if target.iter().any(|y| !(0.0..=1.0).contains(y)) {
        return Err(Error::invalid("bce_loss", "targets must lie in [0, 1]"));
    }
    let shape = tape.value(pred).shape().to_vec();
    let y = tape.leaf(Tensor::new_unchecked(shape.clone(), target.to_vec()));
    let ones = tape.leaf(Tensor::filled(shape, 1.0));
    let p = tape.clamp(pred, CLAMP, 1.0 - CLAMP)?;
    let ln_p = tape.ln(p)?;
    let hit = tape.mul(y, ln_p)?;
    let not_p = tape.sub(ones, p)?;
    let not_y = tape.sub(ones, y)?;
    let ln_not_p = tape.ln(not_p)?;
    let miss = tape.mul(not_y, ln_not_p)?;
    let sum = tape.add(hit, miss)?;
    let mean = tape.reduce(ReduceKind::Mean, sum, 0)?;
    tape.scalar_mul(mean, -1.0)
}

/// Adam optimizer state: one pair of moment buffers per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    /// Moment buffers sized for parameters with the given element counts.
    /// Defaults: beta1 0.9, beta2 0.999, eps 1e-8.
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&s| vec![0.0; s]).collect(),
            v: sizes.iter().map(|&s| vec![0.0; s]).collect(),
        }
    }

    pub fn for_model(lr: f64, model: &ModelParams) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamState::new(lr, &sizes)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update. Consumes each tensor's gradient buffer;
    /// a missing or non-finite gradient aborts before touching any weight.
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} parameters vs {} moment buffers", params.len(), self.m.len()),
            ));
        }
        for p in params.iter() {
            let g = p
                .grad()
                .ok_or_else(|| Error::invalid("adam_step", "parameter is missing its gradient"))?;
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "adam_step" });
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let g = p.take_grad().expect("checked above");
            if g.len() != self.m[k].len() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient length {} vs buffer {}", g.len(), self.m[k].len()),
                ));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            let data = p.data_mut();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One completed epoch of the curve.
#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

/// Per-epoch training and validation losses with wall time.
#[derive(Clone, Debug, Default)]
pub struct LossCurve(pub Vec<EpochStats>);

impl LossCurve {
    /// CSV with header `epoch,train_loss,val_loss,seconds`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.0 {
            out.push_str(&format!(
                "{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val_loss, e.seconds
            ));
        }
        out
    }
}

/// Incremental trainer; [`run_epoch`] advances one epoch so callers can
/// interleave their own per-epoch measurements.
///
/// [`run_epoch`]: Trainer::run_epoch
pub struct Trainer {
    cfg: TrainConfig,
    model: ModelParams,
    adam: AdamState,
    dataset: SegmentDataset,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    external_val: Option<SegmentDataset>,
    rng: ChaCha8Rng,
    epochs_done: usize,
}

impl Trainer {
    /// Initializes the model from `cfg.seed` and splits off validation
    /// parents unless an explicit validation set is supplied.
    ///
    /// The split happens at the parent-sequence level so segments of one
    /// sequence never straddle the train/validation boundary.
    pub fn new(
        dataset: SegmentDataset,
        external_val: Option<SegmentDataset>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if dataset.segments.is_empty() {
            return Err(Error::invalid("train", "dataset has no segments"));
        }
        if let Some(val) = &external_val {
            if val.label_count != dataset.label_count || val.token_len != dataset.token_len {
                return Err(Error::invalid(
                    "train",
                    "validation set disagrees with training set in labels or token length",
                ));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let shape = cfg.model_shape(dataset.vocab_size, dataset.label_count);
        let model = ModelParams::init(&mut rng, &shape)?;
        let adam = AdamState::for_model(cfg.learning_rate, &model);

        let (train_idx, val_idx) = if external_val.is_some() {
            ((0..dataset.segments.len()).collect(), Vec::new())
        } else {
            split_by_parent(&dataset, cfg.val_fraction, &mut rng)
        };
        if train_idx.is_empty() {
            return Err(Error::invalid("train", "validation split left no training segments"));
        }
        Ok(Trainer {
            cfg,
            model,
            adam,
            dataset,
            train_idx,
            val_idx,
            external_val,
            rng,
            epochs_done: 0,
        })
    }

    pub fn model(&self) -> &ModelParams {
        &self.model
    }

    pub fn into_model(self) -> ModelParams {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn train_indices(&self) -> &[usize] {
        &self.train_idx
    }

    pub fn val_indices(&self) -> &[usize] {
        &self.val_idx
    }

    /// One pass over the shuffled training segments. The reported training
    /// loss is the mean of per-sample losses as seen during the pass (with
    /// dropout active); the validation loss is dropout-free. Without any
    /// validation segments the validation column repeats the training loss.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        let start = Instant::now();
        self.train_idx.shuffle(&mut self.rng);
        let settings = self.cfg.forward_settings();
        let mut sum = 0.0;
        let mut count = 0usize;
        let order = self.train_idx.clone();
        for chunk in order.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let nodes = self.model.mount(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let seg = &self.dataset.segments[i];
                let g = segment_forward(
                    &mut tape,
                    &nodes,
                    &seg.tokens,
                    &seg.mask,
                    &settings,
                    Some(&mut self.rng),
                )?;
                losses.push(bce_loss(&mut tape, g.pred, &seg.label)?);
            }
            let stacked = tape.concat(&losses)?;
            let mean = tape.reduce(ReduceKind::Mean, stacked, 0)?;
            let grads = tape.backward(mean)?;
            for &l in &losses {
                sum += tape.value(l).data()[0];
            }
            count += losses.len();
            let ids = nodes.leaf_ids();
            let mut tensors = self.model.tensors_mut();
            for (t, id) in tensors.iter_mut().zip(&ids) {
                t.set_grad(grads.get(*id).to_vec())?;
            }
            self.adam.step(&mut tensors)?;
        }
        let train_loss = sum / count as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite { op: "train" });
        }
        let val_loss = match (&self.external_val, self.val_idx.is_empty()) {
            (Some(val), _) => evaluate_loss(&self.model, val, self.cfg.attention)?,
            (None, false) => evaluate_indexed(
                &self.model,
                &self.dataset,
                &self.val_idx,
                self.cfg.attention,
                self.cfg.batch_size,
            )?,
            (None, true) => train_loss,
        };
        self.epochs_done += 1;
        Ok(EpochStats {
            epoch: self.epochs_done,
            train_loss,
            val_loss,
            seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn split_by_parent(
    dataset: &SegmentDataset,
    fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut parents: Vec<&str> = Vec::new();
    for seg in &dataset.segments {
        if parents.last() != Some(&seg.parent.as_str()) && !parents.contains(&seg.parent.as_str()) {
            parents.push(&seg.parent);
        }
    }
    let mut order: Vec<usize> = (0..parents.len()).collect();
    order.shuffle(rng);
    let mut val_count = (parents.len() as f64 * fraction).round() as usize;
    val_count = val_count.min(parents.len().saturating_sub(1));
    if parents.len() > 1 && fraction > 0.0 {
        val_count = val_count.max(1);
    }
    let val_parents: std::collections::HashSet<&str> =
        order[..val_count].iter().map(|&i| parents[i]).collect();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (i, seg) in dataset.segments.iter().enumerate() {
        if val_parents.contains(seg.parent.as_str()) {
            val_idx.push(i);
        } else {
            train_idx.push(i);
        }
    }
    (train_idx, val_idx)
}

/// Mean per-sample loss over a dataset with dropout disabled.
pub fn evaluate_loss(
    model: &ModelParams,
    dataset: &SegmentDataset,
    attention: AttentionKind,
) -> Result<f64> {
    let idx: Vec<usize> = (0..dataset.segments.len()).collect();
    evaluate_indexed(model, dataset, &idx, attention, 32)
}

fn evaluate_indexed(
    model: &ModelParams,
    dataset: &SegmentDataset,
    indices: &[usize],
    attention: AttentionKind,
    batch_size: usize,
) -> Result<f64> {
    if indices.is_empty() {
        return Err(Error::invalid("evaluate_loss", "no segments to evaluate"));
    }
    let settings = ForwardSettings {
        attention,
        input_dropout: 0.0,
        feature_dropout: 0.0,
    };
    let mut sum = 0.0;
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let nodes = model.mount(&mut tape);
        for &i in chunk {
            let seg = &dataset.segments[i];
            let g = segment_forward(&mut tape, &nodes, &seg.tokens, &seg.mask, &settings, None)?;
            let loss = bce_loss(&mut tape, g.pred, &seg.label)?;
            sum += tape.value(loss).data()[0];
        }
    }
    Ok(sum / indices.len() as f64)
}

/// Trains a fresh model for `config.epochs` epochs and returns it with the
/// full loss curve. Deterministic for a fixed (config, dataset) pair.
pub fn train_segment_model(
    dataset: &SegmentDataset,
    config: &TrainConfig,
) -> Result<(ModelParams, LossCurve)> {
    let mut trainer = Trainer::new(dataset.clone(), None, config.clone())?;
    let mut curve = LossCurve::default();
    for _ in 0..config.epochs {
        curve.0.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_model(), curve))
}
