//! Whole-sequence pipeline: classify segments with a trained model, average
//! and max-rescale the per-segment outputs into one vector per sequence,
//! train a small perceptron head on those vectors, and score predictions.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{MlpCheckpoint, ModelCheckpoint};
use crate::error::{Error, Result};
use crate::layers::{
    mlp_forward, segment_forward, AttentionKind, ForwardSettings, MlpParams, ModelParams,
};
use crate::seqdata::{build_segment_dataset, LabelTable, LabeledSequence, Segment, SegmentDataset, Vocabulary};
use crate::tape::{ReduceKind, Tape};
use crate::train::{bce_loss, train_segment_model, AdamState, LossCurve, TrainConfig};

/// One sequence's pooled segment outputs: entries in `[0, 1]`, maximum
/// exactly 1 unless every segment output was zero.
#[derive(Clone, Debug)]
pub struct SequenceRepresentation {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Sigmoid output vectors for every segment of a dataset, dropout disabled.
pub fn classify_dataset(
    model: &ModelParams,
    dataset: &SegmentDataset,
    attention: AttentionKind,
) -> Result<Vec<Vec<f64>>> {
    classify_segments(model, &dataset.segments, attention)
}

/// Sigmoid output vectors for a list of segments, dropout disabled.
pub fn classify_segments(
    model: &ModelParams,
    segments: &[Segment],
    attention: AttentionKind,
) -> Result<Vec<Vec<f64>>> {
    if segments.is_empty() {
        return Err(Error::invalid("classify_segments", "no segments given"));
    }
    let settings = ForwardSettings {
        attention,
        input_dropout: 0.0,
        feature_dropout: 0.0,
    };
    let mut out = Vec::with_capacity(segments.len());
    for chunk in segments.chunks(32) {
        let mut tape = Tape::new();
        let nodes = model.mount(&mut tape);
        for seg in chunk {
            let g = segment_forward(&mut tape, &nodes, &seg.tokens, &seg.mask, &settings, None)?;
            out.push(tape.value(g.pred).data().to_vec());
        }
    }
    Ok(out)
}

/// Pools per-segment output vectors into one sequence vector: the entrywise
/// mean, rescaled by its maximum so the largest entry becomes exactly 1.
/// An all-zero mean passes through unscaled.
pub fn aggregate(id: &str, vectors: &[Vec<f64>]) -> Result<SequenceRepresentation> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::invalid("aggregate", "no segment vectors"))?;
    let k = first.len();
    if vectors.iter().any(|v| v.len() != k) {
        return Err(Error::shape("aggregate", "segment vectors differ in length"));
    }
    let mut mean = vec![0.0; k];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= vectors.len() as f64;
    }
    let max = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max > 0.0 {
        for m in &mut mean {
            *m /= max;
        }
    }
    Ok(SequenceRepresentation {
        id: id.to_string(),
        vector: mean,
    })
}

/// Builds the pooled representation of every sequence: segment, tokenize
/// against `vocab`, classify, aggregate. Sequences too short to yield a
/// single token are skipped with a warning.
pub fn represent_sequences(
    model: &ModelParams,
    attention: AttentionKind,
    sequences: &[LabeledSequence],
    vocab: &Vocabulary,
    segment_size: usize,
    n: usize,
) -> Result<Vec<SequenceRepresentation>> {
    let mut out = Vec::with_capacity(sequences.len());
    for seq in sequences {
        let single = std::slice::from_ref(seq);
        let dataset = build_segment_dataset(single, segment_size, n, vocab, model.label_count())?;
        if dataset.segments.is_empty() {
            continue;
        }
        let vectors = classify_dataset(model, &dataset, attention)?;
        out.push(aggregate(&seq.id, &vectors)?);
    }
    Ok(out)
}

/// CSV rows `id,v_0,...,v_{K-1}`, one per representation, no header.
pub fn representations_to_csv(reps: &[SequenceRepresentation]) -> String {
    let mut out = String::new();
    for r in reps {
        out.push_str(&r.id);
        for v in &r.vector {
            out.push(',');
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    out
}

/// Perceptron-head training settings.
#[derive(Clone, Debug)]
pub struct MlpConfig {
    /// Hidden width; `None` matches the input width.
    pub hidden: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            hidden: None,
            epochs: 200,
            batch_size: 32,
            learning_rate: 0.01,
            seed: 42,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("mlp_epochs/mlp_batch_size", "must be positive"));
        }
        if self.hidden == Some(0) {
            return Err(Error::config("mlp_hidden", "must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("mlp_learning_rate", "must be positive and finite"));
        }
        Ok(())
    }
}

/// Trains the perceptron head on `(vector, multi-hot target)` pairs with
/// binary cross entropy and Adam. Deterministic per seed.
pub fn train_mlp(vectors: &[Vec<f64>], targets: &[Vec<f64>], cfg: &MlpConfig) -> Result<MlpParams> {
    cfg.validate()?;
    if vectors.is_empty() || vectors.len() != targets.len() {
        return Err(Error::invalid(
            "train_mlp",
            format!("{} vectors vs {} targets", vectors.len(), targets.len()),
        ));
    }
    let inputs = vectors[0].len();
    let outputs = targets[0].len();
    if vectors.iter().any(|v| v.len() != inputs) || targets.iter().any(|t| t.len() != outputs) {
        return Err(Error::shape("train_mlp", "ragged vectors or targets"));
    }
    let hidden = cfg.hidden.unwrap_or(inputs);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mlp = MlpParams::init(&mut rng, inputs, hidden, outputs)?;
    let mut adam = AdamState::new(
        cfg.learning_rate,
        &[mlp.w1.numel(), mlp.b1.numel(), mlp.w2.numel(), mlp.b2.numel()],
    );
    let mut order: Vec<usize> = (0..vectors.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let nodes = mlp.mount(&mut tape);
            let mut losses = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let x = tape.leaf(crate::tensor::Tensor::new_unchecked(
                    vec![inputs],
                    vectors[i].clone(),
                ));
                let pred = mlp_forward(&mut tape, &nodes, x)?;
                losses.push(bce_loss(&mut tape, pred, &targets[i])?);
            }
            let stacked = tape.concat(&losses)?;
            let mean = tape.reduce(ReduceKind::Mean, stacked, 0)?;
            let grads = tape.backward(mean)?;
            let ids = [nodes.w1, nodes.b1, nodes.w2, nodes.b2];
            let mut tensors = mlp.tensors_mut();
            for (t, id) in tensors.iter_mut().zip(&ids) {
                t.set_grad(grads.get(*id).to_vec())?;
            }
            adam.step(&mut tensors)?;
        }
    }
    Ok(mlp)
}

/// Mean binary cross entropy of the head over a labeled set.
pub fn evaluate_mlp_loss(mlp: &MlpParams, vectors: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    if vectors.is_empty() || vectors.len() != targets.len() {
        return Err(Error::invalid("evaluate_mlp_loss", "empty or mismatched inputs"));
    }
    let mut sum = 0.0;
    for (v, t) in vectors.iter().zip(targets) {
        let p = mlp.predict(v)?;
        if p.len() != t.len() {
            return Err(Error::shape("evaluate_mlp_loss", "target length mismatch"));
        }
        let k = p.len() as f64;
        let mut loss = 0.0;
        for (pi, yi) in p.iter().zip(t) {
            let pc = pi.clamp(crate::train::CLAMP, 1.0 - crate::train::CLAMP);
            loss -= yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln();
        }
        sum += loss / k;
    }
    Ok(sum / vectors.len() as f64)
}

/// Thresholds the head's sigmoid outputs into a label set. Outputs at or
/// above `threshold` are kept; if none qualify, the single highest-scoring
/// label is returned so predictions are never empty.
pub fn predict(mlp: &MlpParams, vector: &[f64], threshold: f64) -> Result<BTreeSet<usize>> {
    check_threshold(threshold)?;
    let probs = mlp.predict(vector)?;
    Ok(apply_threshold(&probs, threshold))
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(
            "predict",
            format!("threshold must lie in (0, 1), got {threshold}"),
        ));
    }
    Ok(())
}

fn apply_threshold(probs: &[f64], threshold: f64) -> BTreeSet<usize> {
    let mut set: BTreeSet<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, p)| **p >= threshold)
        .map(|(k, _)| k)
        .collect();
    if set.is_empty() {
        let argmax = probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (k, &p)| {
                if p > best.1 {
                    (k, p)
                } else {
                    best
                }
            })
            .0;
        set.insert(argmax);
    }
    set
}

/// Applies the threshold-or-argmax rule to each probability vector.
pub fn threshold_sets(outputs: &[Vec<f64>], threshold: f64) -> Result<Vec<BTreeSet<usize>>> {
    check_threshold(threshold)?;
    Ok(outputs.iter().map(|p| apply_threshold(p, threshold)).collect())
}

/// Recovers index sets from multi-hot rows; entries above 0.5 count as set.
pub fn sets_from_multi_hot(rows: &[Vec<f64>]) -> Vec<BTreeSet<usize>> {
    rows.iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .filter(|(_, v)| **v > 0.5)
                .map(|(k, _)| k)
                .collect()
        })
        .collect()
}

/// Denominator used for per-sample recall.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RecallMode {
    /// Standard recall: hits divided by the true set size.
    ByTruth,
    /// Compatibility variant dividing by the predicted set size, which
    /// makes recall coincide with precision.
    ByPrediction,
}

/// Averages of per-sample precision, recall, and F1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub avg_f1: f64,
    pub n: usize,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "samples            {}\naverage precision  {:.4}\naverage recall     {:.4}\naverage f1         {:.4}\n",
            self.n, self.avg_precision, self.avg_recall, self.avg_f1
        )
    }

    /// CSV with header `avg_precision,avg_recall,avg_f1,n`.
    pub fn to_csv(&self) -> String {
        format!(
            "avg_precision,avg_recall,avg_f1,n\n{},{},{},{}\n",
            self.avg_precision, self.avg_recall, self.avg_f1, self.n
        )
    }
}

/// Per-sample set-overlap metrics, averaged over samples.
///
/// Precision is `|Y ∩ Y'| / |Y'|`, recall divides by the denominator picked
/// by `mode`, and F1 is `2 |Y ∩ Y'| / (|Y| + |Y'|)`.
pub fn metrics(
    truth: &[BTreeSet<usize>],
    predicted: &[BTreeSet<usize>],
    mode: RecallMode,
) -> Result<MetricsReport> {
    if truth.is_empty() || truth.len() != predicted.len() {
        return Err(Error::invalid(
            "metrics",
            format!("{} truth sets vs {} predictions", truth.len(), predicted.len()),
        ));
    }
    let mut p_sum = 0.0;
    let mut r_sum = 0.0;
    let mut f_sum = 0.0;
    for (y, y_hat) in truth.iter().zip(predicted) {
        if y_hat.is_empty() {
            return Err(Error::invalid("metrics", "a predicted set is empty"));
        }
        if y.is_empty() {
            return Err(Error::invalid("metrics", "a true label set is empty"));
        }
        let hits = y.intersection(y_hat).count() as f64;
        p_sum += hits / y_hat.len() as f64;
        r_sum += match mode {
            RecallMode::ByTruth => hits / y.len() as f64,
            RecallMode::ByPrediction => hits / y_hat.len() as f64,
        };
        f_sum += 2.0 * hits / (y.len() + y_hat.len()) as f64;
    }
    let n = truth.len();
    Ok(MetricsReport {
        avg_precision: p_sum / n as f64,
        avg_recall: r_sum / n as f64,
        avg_f1: f_sum / n as f64,
        n,
    })
}

/// Settings for one end-to-end run.
#[derive(Clone, Debug)]
pub struct PipelineConfig {
    pub train: TrainConfig,
    pub mlp: MlpConfig,
    pub threshold: f64,
    pub recall: RecallMode,
    /// Extra key-value pairs echoed into the checkpoints.
    pub config_echo: Vec<(String, String)>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            train: TrainConfig::default(),
            mlp: MlpConfig::default(),
            threshold: 0.5,
            recall: RecallMode::ByTruth,
            config_echo: Vec::new(),
        }
    }
}

/// Everything a finished run produced.
pub struct PipelineOutcome {
    pub model: ModelCheckpoint,
    pub mlp: MlpCheckpoint,
    pub curve: LossCurve,
    pub train_reps: Vec<SequenceRepresentation>,
    pub test_reps: Vec<SequenceRepresentation>,
    pub predictions: Vec<(String, BTreeSet<usize>)>,
    pub metrics: MetricsReport,
}

impl PipelineOutcome {
    /// Writes model.ckpt, mlp.ckpt, loss_curve.csv, representation CSVs,
    /// predictions.tsv, metrics.txt, and metrics.csv into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.model.save(&dir.join("model.ckpt"))?;
        self.mlp.save(&dir.join("mlp.ckpt"))?;
        std::fs::write(dir.join("loss_curve.csv"), self.curve.to_csv())?;
        std::fs::write(
            dir.join("representations_train.csv"),
            representations_to_csv(&self.train_reps),
        )?;
        std::fs::write(
            dir.join("representations_test.csv"),
            representations_to_csv(&self.test_reps),
        )?;
        let mut tsv = String::new();
        for (id, set) in &self.predictions {
            let names: Vec<&str> = set
                .iter()
                .filter_map(|&k| self.mlp.labels.name(k))
                .collect();
            tsv.push_str(&format!("{}\t{}\n", id, names.join(",")));
        }
        std::fs::write(dir.join("predictions.tsv"), tsv)?;
        std::fs::write(dir.join("metrics.txt"), self.metrics.to_text())?;
        std::fs::write(dir.join("metrics.csv"), self.metrics.to_csv())?;
        Ok(())
    }
}

fn multi_hot(labels: &BTreeSet<usize>, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; k];
    for &l in labels {
        v[l] = 1.0;
    }
    v
}

/// End-to-end run: build the vocabulary from the training corpus, train the
/// segment classifier, pool representations for both corpora, train the
/// perceptron head, predict on the test corpus, and score.
///
/// Artifacts are written into `out_dir` when given.
pub fn run_pipeline(
    train_seqs: &[LabeledSequence],
    test_seqs: &[LabeledSequence],
    labels: &LabelTable,
    cfg: &PipelineConfig,
    out_dir: Option<&Path>,
) -> Result<PipelineOutcome> {
    cfg.train.validate()?;
    cfg.mlp.validate()?;
    if labels.is_empty() {
        return Err(Error::invalid("run_pipeline", "empty label table"));
    }
    if train_seqs.is_empty() || test_seqs.is_empty() {
        return Err(Error::invalid("run_pipeline", "empty corpus"));
    }

    let vocab = Vocabulary::build(train_seqs, cfg.train.n)?;
    let dataset = build_segment_dataset(
        train_seqs,
        cfg.train.segment_size,
        cfg.train.n,
        &vocab,
        labels.len(),
    )?;
    let (model, curve) = train_segment_model(&dataset, &cfg.train)?;

    let train_reps = represent_sequences(
        &model,
        cfg.train.attention,
        train_seqs,
        &vocab,
        cfg.train.segment_size,
        cfg.train.n,
    )?;
    let test_reps = represent_sequences(
        &model,
        cfg.train.attention,
        test_seqs,
        &vocab,
        cfg.train.segment_size,
        cfg.train.n,
    )?;

    let train_labels: HashMap<&str, &BTreeSet<usize>> =
        train_seqs.iter().map(|s| (s.id.as_str(), &s.labels)).collect();
    let test_labels: HashMap<&str, &BTreeSet<usize>> =
        test_seqs.iter().map(|s| (s.id.as_str(), &s.labels)).collect();
    let k = labels.len();
    let vectors: Vec<Vec<f64>> = train_reps.iter().map(|r| r.vector.clone()).collect();
    let targets: Vec<Vec<f64>> = train_reps
        .iter()
        .map(|r| multi_hot(train_labels[r.id.as_str()], k))
        .collect();
    let mlp = train_mlp(&vectors, &targets, &cfg.mlp)?;

    let mut predictions = Vec::with_capacity(test_reps.len());
    let mut truth = Vec::with_capacity(test_reps.len());
    for rep in &test_reps {
        predictions.push((rep.id.clone(), predict(&mlp, &rep.vector, cfg.threshold)?));
        truth.push(test_labels[rep.id.as_str()].clone());
    }
    let predicted_sets: Vec<BTreeSet<usize>> =
        predictions.iter().map(|(_, s)| s.clone()).collect();
    let report = metrics(&truth, &predicted_sets, cfg.recall)?;

    let outcome = PipelineOutcome {
        model: ModelCheckpoint {
            model,
            attention: cfg.train.attention,
            segment_size: cfg.train.segment_size,
            n: cfg.train.n,
            seed: cfg.train.seed,
            labels: LabelTable::from_names(labels.names().to_vec()),
            vocab,
            config: cfg.config_echo.clone(),
        },
        mlp: MlpCheckpoint {
            mlp,
            threshold: cfg.threshold,
            seed: cfg.mlp.seed,
            labels: LabelTable::from_names(labels.names().to_vec()),
            config: cfg.config_echo.clone(),
        },
        curve,
        train_reps,
        test_reps,
        predictions,
        metrics: report,
    };
    if let Some(dir) = out_dir {
        outcome.write_artifacts(dir)?;
    }
    Ok(outcome)
}
