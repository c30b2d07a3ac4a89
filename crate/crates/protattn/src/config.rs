//! Flat `key = value` run configuration with documented defaults.
//!
//! Lines starting with `#` and blank lines are ignored. Every key has a
//! default; unknown keys are rejected by name. [`RunConfig::to_text`]
//! renders the fully resolved document for echoing into output
//! directories, so a run is reconstructible from its artifacts.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{AttentionKind, CellKind, ScoreMode};
use crate::pipeline::{MlpConfig, PipelineConfig, RecallMode};
use crate::synth::SynthSpec;
use crate::train::TrainConfig;

/// Every tunable of the toolkit, as parsed from a config file.
#[derive(Clone, Debug)]
pub struct RunConfig {
    // Corpus and artifact paths. Empty means "not set".
    pub train_sequences: String,
    pub train_labels: String,
    pub test_sequences: String,
    pub test_labels: String,
    pub out_dir: String,
    pub checkpoint: String,
    pub mlp_checkpoint: String,

    // Segment model.
    pub n: usize,
    pub segment_size: usize,
    pub embedding_dim: usize,
    pub hidden_size: usize,
    pub cell: String,
    pub attention: String,
    pub attention_score: String,
    /// Score projection width for `attention_score = context`; 0 picks
    /// `hidden_size`.
    pub attention_dim: usize,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub seed: u64,

    // Prediction head and scoring.
    pub threshold: f64,
    pub recall: String,
    /// 0 picks the representation width.
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_batch_size: usize,
    pub mlp_learning_rate: f64,

    // Synthetic benchmark.
    pub synth_vocab: usize,
    pub synth_seq_len: usize,
    pub synth_classes: usize,
    pub synth_motifs_per_class: usize,
    pub synth_motif_len: usize,
    pub synth_train: usize,
    pub synth_val: usize,
    pub synth_test: usize,
    pub synth_multi_label_prob: f64,

    // Comparison harness.
    pub compare_lambdas: Vec<f64>,
    pub compare_baselines: bool,
    pub compare_seeds: usize,
    pub plateau_fraction: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train_sequences: String::new(),
            train_labels: String::new(),
            test_sequences: String::new(),
            test_labels: String::new(),
            out_dir: "out".into(),
            checkpoint: "model.ckpt".into(),
            mlp_checkpoint: "mlp.ckpt".into(),
            n: 3,
            segment_size: 100,
            embedding_dim: 32,
            hidden_size: 70,
            cell: "gru".into(),
            attention: "scaled".into(),
            attention_score: "scalar".into(),
            attention_dim: 0,
            lambda: 1.0,
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-3,
            val_fraction: 0.1,
            seed: 42,
            threshold: 0.5,
            recall: "truth".into(),
            mlp_hidden: 0,
            mlp_epochs: 200,
            mlp_batch_size: 32,
            mlp_learning_rate: 0.01,
            synth_vocab: 20,
            synth_seq_len: 100,
            synth_classes: 8,
            synth_motifs_per_class: 8,
            synth_motif_len: 3,
            synth_train: 2000,
            synth_val: 500,
            synth_test: 500,
            synth_multi_label_prob: 0.35,
            compare_lambdas: vec![1.0, 0.5, 0.1],
            compare_baselines: true,
            compare_seeds: 5,
            plateau_fraction: 0.95,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &'static str, value: &str) -> Result<T> {
    value
        .parse::<T>()
        .map_err(|_| Error::config(key, format!("cannot parse `{value}`")))
}

fn parse_bool(key: &'static str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(key, format!("expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Parses a config document over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config("syntax", format!("line {}: expected `key = value`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config("config", format!("cannot read {}: {e}", path.display()))
        })?;
        RunConfig::parse(&text)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "train_sequences" => self.train_sequences = value.into(),
            "train_labels" => self.train_labels = value.into(),
            "test_sequences" => self.test_sequences = value.into(),
            "test_labels" => self.test_labels = value.into(),
            "out_dir" => self.out_dir = value.into(),
            "checkpoint" => self.checkpoint = value.into(),
            "mlp_checkpoint" => self.mlp_checkpoint = value.into(),
            "n" => self.n = parse_num("n", value)?,
            "segment_size" => self.segment_size = parse_num("segment_size", value)?,
            "embedding_dim" => self.embedding_dim = parse_num("embedding_dim", value)?,
            "hidden_size" => self.hidden_size = parse_num("hidden_size", value)?,
            "cell" => self.cell = value.into(),
            "attention" => self.attention = value.into(),
            "attention_score" => self.attention_score = value.into(),
            "attention_dim" => self.attention_dim = parse_num("attention_dim", value)?,
            "lambda" => self.lambda = parse_num("lambda", value)?,
            "epochs" => self.epochs = parse_num("epochs", value)?,
            "batch_size" => self.batch_size = parse_num("batch_size", value)?,
            "learning_rate" => self.learning_rate = parse_num("learning_rate", value)?,
            "val_fraction" => self.val_fraction = parse_num("val_fraction", value)?,
            "seed" => self.seed = parse_num("seed", value)?,
            "threshold" => self.threshold = parse_num("threshold", value)?,
            "recall" => self.recall = value.into(),
            "mlp_hidden" => self.mlp_hidden = parse_num("mlp_hidden", value)?,
            "mlp_epochs" => self.mlp_epochs = parse_num("mlp_epochs", value)?,
            "mlp_batch_size" => self.mlp_batch_size = parse_num("mlp_batch_size", value)?,
            "mlp_learning_rate" => {
                self.mlp_learning_rate = parse_num("mlp_learning_rate", value)?
            }
            "synth_vocab" => self.synth_vocab = parse_num("synth_vocab", value)?,
            "synth_seq_len" => self.synth_seq_len = parse_num("synth_seq_len", value)?,
            "synth_classes" => self.synth_classes = parse_num("synth_classes", value)?,
            "synth_motifs_per_class" => {
                self.synth_motifs_per_class = parse_num("synth_motifs_per_class", value)?
            }
            "synth_motif_len" => self.synth_motif_len = parse_num("synth_motif_len", value)?,
            "synth_train" => self.synth_train = parse_num("synth_train", value)?,
            "synth_val" => self.synth_val = parse_num("synth_val", value)?,
            "synth_test" => self.synth_test = parse_num("synth_test", value)?,
            "synth_multi_label_prob" => {
                self.synth_multi_label_prob = parse_num("synth_multi_label_prob", value)?
            }
            "compare_lambdas" => {
                let mut lambdas = Vec::new();
                for part in value.split(',') {
                    lambdas.push(parse_num::<f64>("compare_lambdas", part.trim())?);
                }
                self.compare_lambdas = lambdas;
            }
            "compare_baselines" => self.compare_baselines = parse_bool("compare_baselines", value)?,
            "compare_seeds" => self.compare_seeds = parse_num("compare_seeds", value)?,
            "plateau_fraction" => self.plateau_fraction = parse_num("plateau_fraction", value)?,
            other => {
                return Err(Error::Config {
                    key: other.to_string(),
                    detail: "unknown key".into(),
                });
            }
        }
        Ok(())
    }

    /// The fully resolved document, one `key = value` line per field.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let lambdas: Vec<String> = self.compare_lambdas.iter().map(|l| format!("{l}")).collect();
        let pairs: Vec<(&str, String)> = vec![
            ("train_sequences", self.train_sequences.clone()),
            ("train_labels", self.train_labels.clone()),
            ("test_sequences", self.test_sequences.clone()),
            ("test_labels", self.test_labels.clone()),
            ("out_dir", self.out_dir.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("mlp_checkpoint", self.mlp_checkpoint.clone()),
            ("n", self.n.to_string()),
            ("segment_size", self.segment_size.to_string()),
            ("embedding_dim", self.embedding_dim.to_string()),
            ("hidden_size", self.hidden_size.to_string()),
            ("cell", self.cell.clone()),
            ("attention", self.attention.clone()),
            ("attention_score", self.attention_score.clone()),
            ("attention_dim", self.attention_dim.to_string()),
            ("lambda", format!("{}", self.lambda)),
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("learning_rate", format!("{}", self.learning_rate)),
            ("val_fraction", format!("{}", self.val_fraction)),
            ("seed", self.seed.to_string()),
            ("threshold", format!("{}", self.threshold)),
            ("recall", self.recall.clone()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("mlp_epochs", self.mlp_epochs.to_string()),
            ("mlp_batch_size", self.mlp_batch_size.to_string()),
            ("mlp_learning_rate", format!("{}", self.mlp_learning_rate)),
            ("synth_vocab", self.synth_vocab.to_string()),
            ("synth_seq_len", self.synth_seq_len.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_motifs_per_class", self.synth_motifs_per_class.to_string()),
            ("synth_motif_len", self.synth_motif_len.to_string()),
            ("synth_train", self.synth_train.to_string()),
            ("synth_val", self.synth_val.to_string()),
            ("synth_test", self.synth_test.to_string()),
            ("synth_multi_label_prob", format!("{}", self.synth_multi_label_prob)),
            ("compare_lambdas", lambdas.join(",")),
            ("compare_baselines", self.compare_baselines.to_string()),
            ("compare_seeds", self.compare_seeds.to_string()),
            ("plateau_fraction", format!("{}", self.plateau_fraction)),
        ];
        pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }

    pub fn cell_kind(&self) -> Result<CellKind> {
        match self.cell.as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::config("cell", format!("expected gru or lstm, got `{other}`"))),
        }
    }

    pub fn attention_kind(&self) -> Result<AttentionKind> {
        match self.attention.as_str() {
            "scaled" => Ok(AttentionKind::Scaled),
            "standard" => Ok(AttentionKind::Standard),
            "last-hidden" | "none" => Ok(AttentionKind::LastHidden),
            other => Err(Error::config(
                "attention",
                format!("expected scaled, standard, or last-hidden, got `{other}`"),
            )),
        }
    }

    pub fn score_mode(&self) -> Result<ScoreMode> {
        match self.attention_score.as_str() {
            "scalar" => Ok(ScoreMode::Scalar),
            "context" => Ok(ScoreMode::ContextVector {
                dim: if self.attention_dim == 0 {
                    self.hidden_size
                } else {
                    self.attention_dim
                },
            }),
            other => Err(Error::config(
                "attention_score",
                format!("expected scalar or context, got `{other}`"),
            )),
        }
    }

    pub fn recall_mode(&self) -> Result<RecallMode> {
        match self.recall.as_str() {
            "truth" => Ok(RecallMode::ByTruth),
            "prediction" => Ok(RecallMode::ByPrediction),
            other => Err(Error::config(
                "recall",
                format!("expected truth or prediction, got `{other}`"),
            )),
        }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            lambda: self.lambda,
            seed: self.seed,
            attention: self.attention_kind()?,
            score: self.score_mode()?,
            cell: self.cell_kind()?,
            segment_size: self.segment_size,
            n: self.n,
            embed_dim: self.embedding_dim,
            hidden_size: self.hidden_size,
            val_fraction: self.val_fraction,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn mlp_config(&self) -> Result<MlpConfig> {
        let cfg = MlpConfig {
            hidden: if self.mlp_hidden == 0 {
                None
            } else {
                Some(self.mlp_hidden)
            },
            epochs: self.mlp_epochs,
            batch_size: self.mlp_batch_size,
            learning_rate: self.mlp_learning_rate,
            seed: self.seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        Ok(PipelineConfig {
            train: self.train_config()?,
            mlp: self.mlp_config()?,
            threshold: self.threshold,
            recall: self.recall_mode()?,
            config_echo: self.to_pairs(),
        })
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            vocab: self.synth_vocab,
            seq_len: self.synth_seq_len,
            classes: self.synth_classes,
            motifs_per_class: self.synth_motifs_per_class,
            motif_len: self.synth_motif_len,
            train_count: self.synth_train,
            val_count: self.synth_val,
            test_count: self.synth_test,
            multi_label_prob: self.synth_multi_label_prob,
        }
    }

    /// Seeds for the comparison harness: `seed, seed+1, ...`.
    pub fn compare_seed_list(&self) -> Vec<u64> {
        (0..self.compare_seeds as u64).map(|i| self.seed + i).collect()
    }
}
