//! Command-line front end: train, embed, evaluate, predict, and compare.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use protattn::checkpoint::{MlpCheckpoint, ModelCheckpoint};
use protattn::config::RunConfig;
use protattn::error::{Error, Result};
use protattn::pipeline::{
    metrics, predict, represent_sequences, representations_to_csv, train_mlp,
    SequenceRepresentation,
};
use protattn::seqdata::{
    build_segment_dataset, load_corpus, load_corpus_with_table, load_fasta, LabeledSequence,
    Vocabulary,
};
use protattn::synth::{compare_variants, default_variants, CompareSettings, ComparisonReport};
use protattn::train::train_segment_model;

const USAGE: &str = "\
usage: protattn <command> --config PATH [--seed N] [--out DIR]

commands:
  train-segments  train the segment classifier on the training corpus
  embed           write pooled representations for the test corpus
  train-mlp       train the prediction head on pooled representations
  evaluate        score predictions against the labeled test corpus
  predict         write label predictions for the test corpus
  compare         run the synthetic attention comparison harness

flags:
  --config PATH   run configuration file (required)
  --seed N        override the configured seed
  --out DIR       override the configured output directory

Checkpoint keys (`checkpoint`, `mlp_checkpoint`) are resolved inside the
output directory unless absolute. Every command writes the fully resolved
configuration to <out>/resolved.cfg.
";

fn main() -> ExitCode {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.is_empty() || matches!(args[0].as_str(), "help" | "--help" | "-h") {
        print!("{USAGE}");
        return if args.is_empty() { ExitCode::from(2) } else { ExitCode::SUCCESS };
    }
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

#[derive(Debug)]
struct Cli {
    command: String,
    config: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

fn parse_cli(args: &[String]) -> Result<Cli> {
    let command = args[0].clone();
    let mut config = None;
    let mut seed = None;
    let mut out = None;
    let mut it = args[1..].iter();
    while let Some(flag) = it.next() {
        let mut value = || {
            it.next()
                .ok_or_else(|| Error::config(flag.clone(), "flag needs a value"))
        };
        match flag.as_str() {
            "--config" => config = Some(PathBuf::from(value()?)),
            "--seed" => {
                let v = value()?;
                seed = Some(v.parse::<u64>().map_err(|_| {
                    Error::config("--seed", format!("cannot parse `{v}`"))
                })?);
            }
            "--out" => out = Some(PathBuf::from(value()?)),
            other => {
                return Err(Error::config(other.to_string(), "unknown flag"));
            }
        }
    }
    let config = config.ok_or_else(|| Error::config("--config", "flag is required"))?;
    Ok(Cli {
        command,
        config,
        seed,
        out,
    })
}

fn run(args: &[String]) -> Result<()> {
    let cli = parse_cli(args)?;
    let mut cfg = RunConfig::from_file(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.display().to_string();
    }
    let out_dir = PathBuf::from(&cfg.out_dir);
    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("resolved.cfg"), cfg.to_text())?;

    match cli.command.as_str() {
        "train-segments" => cmd_train_segments(&cfg, &out_dir),
        "embed" => cmd_embed(&cfg, &out_dir),
        "train-mlp" => cmd_train_mlp(&cfg, &out_dir),
        "evaluate" => cmd_evaluate(&cfg, &out_dir),
        "predict" => cmd_predict(&cfg, &out_dir),
        "compare" => cmd_compare(&cfg, &out_dir),
        other => Err(Error::config(
            "command",
            format!("unknown command `{other}`; try `protattn help`"),
        )),
    }
}

/// Errors with the key name when a required path was left unset.
fn require_path(value: &str, key: &'static str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::config(key, "path is required for this command"));
    }
    Ok(PathBuf::from(value))
}

/// Relative checkpoint names live inside the output directory.
fn artifact_path(out_dir: &Path, value: &str) -> PathBuf {
    let p = PathBuf::from(value);
    if p.is_absolute() {
        p
    } else {
        out_dir.join(p)
    }
}

fn unlabeled(records: Vec<(String, String)>) -> Vec<LabeledSequence> {
    records
        .into_iter()
        .map(|(id, residues)| LabeledSequence {
            id,
            residues,
            labels: BTreeSet::new(),
        })
        .collect()
}

fn multi_hot(labels: &BTreeSet<usize>, k: usize) -> Vec<f64> {
    let mut row = vec![0.0; k];
    for &l in labels {
        row[l] = 1.0;
    }
    row
}

fn predictions_tsv(
    predictions: &[(String, BTreeSet<usize>)],
    checkpoint: &MlpCheckpoint,
) -> String {
    let mut tsv = String::new();
    for (id, set) in predictions {
        let names: Vec<&str> = set.iter().filter_map(|&k| checkpoint.labels.name(k)).collect();
        tsv.push_str(&format!("{}\t{}\n", id, names.join(",")));
    }
    tsv
}

fn cmd_train_segments(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let fasta = require_path(&cfg.train_sequences, "train_sequences")?;
    let labels_path = require_path(&cfg.train_labels, "train_labels")?;
    let train_cfg = cfg.train_config()?;
    let (sequences, labels) = load_corpus(&fasta, &labels_path)?;
    log::info!(
        "training corpus: {} sequences, {} labels",
        sequences.len(),
        labels.len()
    );
    let vocab = Vocabulary::build(&sequences, train_cfg.n)?;
    let dataset = build_segment_dataset(
        &sequences,
        train_cfg.segment_size,
        train_cfg.n,
        &vocab,
        labels.len(),
    )?;
    let (model, curve) = train_segment_model(&dataset, &train_cfg)?;
    let checkpoint = ModelCheckpoint {
        model,
        attention: train_cfg.attention,
        segment_size: train_cfg.segment_size,
        n: train_cfg.n,
        seed: train_cfg.seed,
        labels,
        vocab,
        config: cfg.to_pairs(),
    };
    let ckpt_path = artifact_path(out_dir, &cfg.checkpoint);
    checkpoint.save(&ckpt_path)?;
    std::fs::write(out_dir.join("loss_curve.csv"), curve.to_csv())?;
    println!(
        "trained {} epochs; wrote {} and loss_curve.csv",
        curve.0.len(),
        ckpt_path.display()
    );
    Ok(())
}

/// Loads the segment model and pools representations for a corpus.
fn embed_corpus(
    checkpoint: &ModelCheckpoint,
    sequences: &[LabeledSequence],
) -> Result<Vec<SequenceRepresentation>> {
    represent_sequences(
        &checkpoint.model,
        checkpoint.attention,
        sequences,
        &checkpoint.vocab,
        checkpoint.segment_size,
        checkpoint.n,
    )
}

fn cmd_embed(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let fasta = require_path(&cfg.test_sequences, "test_sequences")?;
    let checkpoint = ModelCheckpoint::load(&artifact_path(out_dir, &cfg.checkpoint))?;
    let sequences = unlabeled(load_fasta(&fasta)?);
    let reps = embed_corpus(&checkpoint, &sequences)?;
    std::fs::write(
        out_dir.join("representations.csv"),
        representations_to_csv(&reps),
    )?;
    println!("embedded {} sequences into representations.csv", reps.len());
    Ok(())
}

fn cmd_train_mlp(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let fasta = require_path(&cfg.train_sequences, "train_sequences")?;
    let labels_path = require_path(&cfg.train_labels, "train_labels")?;
    let checkpoint = ModelCheckpoint::load(&artifact_path(out_dir, &cfg.checkpoint))?;
    let sequences = load_corpus_with_table(&fasta, &labels_path, &checkpoint.labels)?;
    let reps = embed_corpus(&checkpoint, &sequences)?;
    let by_id: HashMap<&str, &BTreeSet<usize>> =
        sequences.iter().map(|s| (s.id.as_str(), &s.labels)).collect();
    let k = checkpoint.labels.len();
    let vectors: Vec<Vec<f64>> = reps.iter().map(|r| r.vector.clone()).collect();
    let targets: Vec<Vec<f64>> = reps
        .iter()
        .map(|r| multi_hot(by_id[r.id.as_str()], k))
        .collect();
    let mlp = train_mlp(&vectors, &targets, &cfg.mlp_config()?)?;
    let head = MlpCheckpoint {
        mlp,
        threshold: cfg.threshold,
        seed: cfg.seed,
        labels: checkpoint.labels.clone(),
        config: cfg.to_pairs(),
    };
    let path = artifact_path(out_dir, &cfg.mlp_checkpoint);
    head.save(&path)?;
    println!(
        "trained prediction head on {} representations; wrote {}",
        reps.len(),
        path.display()
    );
    Ok(())
}

fn cmd_evaluate(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let fasta = require_path(&cfg.test_sequences, "test_sequences")?;
    let labels_path = require_path(&cfg.test_labels, "test_labels")?;
    let model = ModelCheckpoint::load(&artifact_path(out_dir, &cfg.checkpoint))?;
    let head = MlpCheckpoint::load(&artifact_path(out_dir, &cfg.mlp_checkpoint))?;
    let sequences = load_corpus_with_table(&fasta, &labels_path, &model.labels)?;
    let by_id: HashMap<&str, &BTreeSet<usize>> =
        sequences.iter().map(|s| (s.id.as_str(), &s.labels)).collect();
    let reps = embed_corpus(&model, &sequences)?;
    let mut predictions = Vec::with_capacity(reps.len());
    let mut truth = Vec::with_capacity(reps.len());
    for rep in &reps {
        predictions.push((rep.id.clone(), predict(&head.mlp, &rep.vector, head.threshold)?));
        truth.push(by_id[rep.id.as_str()].clone());
    }
    let predicted: Vec<BTreeSet<usize>> = predictions.iter().map(|(_, s)| s.clone()).collect();
    let report = metrics(&truth, &predicted, cfg.recall_mode()?)?;
    std::fs::write(out_dir.join("predictions.tsv"), predictions_tsv(&predictions, &head))?;
    std::fs::write(out_dir.join("metrics.txt"), report.to_text())?;
    std::fs::write(out_dir.join("metrics.csv"), report.to_csv())?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_predict(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let fasta = require_path(&cfg.test_sequences, "test_sequences")?;
    let model = ModelCheckpoint::load(&artifact_path(out_dir, &cfg.checkpoint))?;
    let head = MlpCheckpoint::load(&artifact_path(out_dir, &cfg.mlp_checkpoint))?;
    let sequences = unlabeled(load_fasta(&fasta)?);
    let reps = embed_corpus(&model, &sequences)?;
    let mut predictions = Vec::with_capacity(reps.len());
    for rep in &reps {
        predictions.push((rep.id.clone(), predict(&head.mlp, &rep.vector, head.threshold)?));
    }
    let tsv = predictions_tsv(&predictions, &head);
    std::fs::write(out_dir.join("predictions.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

/// Per-epoch curves of every run: variant, seed, epoch, losses, val F1.
fn curves_csv(report: &ComparisonReport) -> String {
    let mut out = String::from("variant,seed,epoch,train_loss,val_loss,val_f1\n");
    for variant in &report.variants {
        for run in &variant.runs {
            for (stats, f1) in run.curve.0.iter().zip(&run.val_f1_curve) {
                out.push_str(&format!(
                    "{},{},{},{},{},{}\n",
                    variant.name, run.seed, stats.epoch, stats.train_loss, stats.val_loss, f1
                ));
            }
        }
    }
    out
}

fn cmd_compare(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    let spec = cfg.synth_spec();
    spec.validate()?;
    let base = cfg.train_config()?;
    let variants = default_variants(&base, &cfg.compare_lambdas, cfg.compare_baselines);
    let settings = CompareSettings {
        plateau_fraction: cfg.plateau_fraction,
        threshold: cfg.threshold,
        mlp: cfg.mlp_config()?,
    };
    let report = compare_variants(&spec, &variants, &cfg.compare_seed_list(), &settings)?;
    std::fs::write(out_dir.join("comparison.csv"), report.to_csv())?;
    let table = report.to_table();
    std::fs::write(out_dir.join("comparison.txt"), &table)?;
    std::fs::write(out_dir.join("curves.csv"), curves_csv(&report))?;
    print!("{table}");
    Ok(())
}
