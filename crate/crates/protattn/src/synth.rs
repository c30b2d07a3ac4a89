//! Synthetic planted-motif benchmark and the variant comparison harness.
//!
//! Each class owns a disjoint set of short motifs. A sequence of a class
//! scatters every class motif once, at random non-overlapping positions,
//! over uniform noise residues. Because many positions carry signal, plain
//! softmax attention spreads its weights thin over long segments; this is
//! exactly the regime the max-rescaled variant is built for, so the two
//! are compared head-to-head here.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::AttentionKind;
use crate::pipeline::{
    classify_dataset, metrics, predict, represent_sequences, sets_from_multi_hot, threshold_sets,
    train_mlp, MlpConfig, RecallMode,
};
use crate::seqdata::{build_segment_dataset, LabelTable, LabeledSequence, Vocabulary};
use crate::train::{LossCurve, TrainConfig, Trainer};

/// Residue alphabet the generator draws from, amino-acid style.
pub const ALPHABET: &[u8] = b"ACDEFGHIKLMNPQRSTVWY";

/// Shape of a generated benchmark corpus.
#[derive(Clone, Debug)]
pub struct SynthSpec {
    /// Distinct residue letters in use, at most [`ALPHABET`] length.
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
    /// Motifs owned by each class; all planted once per sequence.
    pub motifs_per_class: usize,
    /// Residues per motif.
    pub motif_len: usize,
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Chance that a sequence blends motifs of two classes and carries
    /// both labels.
    pub multi_label_prob: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            vocab: 20,
            seq_len: 100,
            classes: 8,
            motifs_per_class: 8,
            motif_len: 3,
            train_count: 2000,
            val_count: 500,
            test_count: 500,
            multi_label_prob: 0.35,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("synth_classes", "need at least two classes"));
        }
        if self.vocab < 2 || self.vocab > ALPHABET.len() {
            return Err(Error::config(
                "synth_vocab",
                format!("must lie in 2..={}", ALPHABET.len()),
            ));
        }
        if self.motif_len == 0 || self.motifs_per_class == 0 {
            return Err(Error::config("synth_motifs", "motif size and count must be positive"));
        }
        if self.seq_len / self.motif_len < self.motifs_per_class {
            return Err(Error::config(
                "synth_seq_len",
                format!(
                    "{} motifs of {} residues cannot fit in {} positions",
                    self.motifs_per_class, self.motif_len, self.seq_len
                ),
            ));
        }
        let distinct = (self.vocab as f64).powi(self.motif_len as i32);
        if (self.classes * self.motifs_per_class) as f64 > distinct {
            return Err(Error::config(
                "synth_motifs",
                format!(
                    "{} classes x {} motifs exceed the {} distinct {}-grams available",
                    self.classes, self.motifs_per_class, distinct, self.motif_len
                ),
            ));
        }
        if !(0.0..1.0).contains(&self.multi_label_prob) {
            return Err(Error::config("synth_multi_label_prob", "must lie in [0, 1)"));
        }
        if self.train_count == 0 || self.val_count == 0 || self.test_count == 0 {
            return Err(Error::config("synth_counts", "all split counts must be positive"));
        }
        Ok(())
    }
}

/// A generated corpus with its label table and the planted ground truth.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub train: Vec<LabeledSequence>,
    pub val: Vec<LabeledSequence>,
    pub test: Vec<LabeledSequence>,
    pub labels: LabelTable,
    /// Planted motifs per class, for inspection and oracle checks.
    pub motifs: Vec<Vec<String>>,
}

fn draw_motifs(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<String>> {
    let mut seen: HashSet<String> = HashSet::new();
    let mut flat = Vec::with_capacity(spec.classes * spec.motifs_per_class);
    while flat.len() < spec.classes * spec.motifs_per_class {
        let motif: String = (0..spec.motif_len)
            .map(|_| ALPHABET[rng.gen_range(0..spec.vocab)] as char)
            .collect();
        if seen.insert(motif.clone()) {
            flat.push(motif);
        }
    }
    flat.chunks(spec.motifs_per_class).map(|c| c.to_vec()).collect()
}

/// Builds one sequence carrying every motif of `classes` (primary first),
/// planted once each at randomly chosen non-overlapping block positions,
/// with uniform noise everywhere else.
fn build_sequence(
    spec: &SynthSpec,
    motifs: &[Vec<String>],
    classes: &[usize],
    rng: &mut ChaCha8Rng,
) -> String {
    let mut residues: Vec<u8> = (0..spec.seq_len)
        .map(|_| ALPHABET[rng.gen_range(0..spec.vocab)])
        .collect();
    // Motif placements come from disjoint fixed-size blocks, so planted
    // motifs never overwrite each other.
    let block_count = spec.seq_len / spec.motif_len;
    let mut blocks: Vec<usize> = (0..block_count).collect();
    blocks.shuffle(rng);

    let mut planted: Vec<&str> = Vec::new();
    if classes.len() == 1 {
        planted.extend(motifs[classes[0]].iter().map(String::as_str));
    } else {
        // Two-label blend: the primary class contributes the first half
        // rounded up, the secondary the rest.
        let head = spec.motifs_per_class.div_ceil(2);
        planted.extend(motifs[classes[0]][..head].iter().map(String::as_str));
        planted.extend(
            motifs[classes[1]][..spec.motifs_per_class - head]
                .iter()
                .map(String::as_str),
        );
    }
    for (motif, block) in planted.iter().zip(&blocks) {
        let at = block * spec.motif_len;
        residues[at..at + spec.motif_len].copy_from_slice(motif.as_bytes());
    }
    String::from_utf8(residues).expect("alphabet is ASCII")
}

fn build_split(
    spec: &SynthSpec,
    motifs: &[Vec<String>],
    name: &str,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<LabeledSequence> {
    (0..count)
        .map(|i| {
            let primary = i % spec.classes;
            let mut classes = vec![primary];
            if rng.gen_bool(spec.multi_label_prob) {
                let mut other = rng.gen_range(0..spec.classes - 1);
                if other >= primary {
                    other += 1;
                }
                classes.push(other);
            }
            let residues = build_sequence(spec, motifs, &classes, rng);
            LabeledSequence {
                id: format!("{name}{i:05}"),
                residues,
                labels: classes.iter().copied().collect::<BTreeSet<usize>>(),
            }
        })
        .collect()
}

/// Generates the three splits deterministically from `seed`. Primary
/// classes rotate round-robin, so each split is class-balanced within one
/// sequence.
pub fn generate(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let motifs = draw_motifs(spec, &mut rng);
    let train = build_split(spec, &motifs, "train", spec.train_count, &mut rng);
    let val = build_split(spec, &motifs, "val", spec.val_count, &mut rng);
    let test = build_split(spec, &motifs, "test", spec.test_count, &mut rng);
    let labels = LabelTable::from_names((0..spec.classes).map(|c| format!("class{c}")).collect());
    Ok(SynthCorpus {
        train,
        val,
        test,
        labels,
        motifs,
    })
}

/// A named training configuration entering the comparison.
#[derive(Clone, Debug)]
pub struct VariantSpec {
    pub name: String,
    pub config: TrainConfig,
}

/// The usual comparison line-up over a base configuration: a last-hidden
/// baseline, plain softmax attention, and one rescaled variant per lambda.
pub fn default_variants(base: &TrainConfig, lambdas: &[f64], include_baselines: bool) -> Vec<VariantSpec> {
    let mut out = Vec::new();
    if include_baselines {
        out.push(VariantSpec {
            name: "Base.".into(),
            config: TrainConfig {
                attention: AttentionKind::LastHidden,
                ..base.clone()
            },
        });
        out.push(VariantSpec {
            name: "Base.+Attn.".into(),
            config: TrainConfig {
                attention: AttentionKind::Standard,
                ..base.clone()
            },
        });
    }
    for &lambda in lambdas {
        out.push(VariantSpec {
            name: format!("λ = {lambda}"),
            config: TrainConfig {
                attention: AttentionKind::Scaled,
                lambda,
                ..base.clone()
            },
        });
    }
    out
}

/// Knobs of the harness that are not part of any single training run.
#[derive(Clone, Debug)]
pub struct CompareSettings {
    /// A run plateaus at the first epoch reaching this fraction of its own
    /// final validation F1.
    pub plateau_fraction: f64,
    pub threshold: f64,
    pub mlp: MlpConfig,
}

impl Default for CompareSettings {
    fn default() -> Self {
        CompareSettings {
            plateau_fraction: 0.95,
            threshold: 0.5,
            mlp: MlpConfig::default(),
        }
    }
}

/// One (variant, seed) training run.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    /// Whole-pipeline F1 on the held-out test split.
    pub final_f1: f64,
    /// First epoch (1-based) reaching the plateau fraction of the run's
    /// final validation F1.
    pub epochs_to_plateau: usize,
    /// Validation minus training loss at the plateau epoch.
    pub gap_at_plateau: f64,
    /// Segment-level validation F1 after each epoch.
    pub val_f1_curve: Vec<f64>,
    pub curve: LossCurve,
}

/// All runs of one variant.
#[derive(Clone, Debug)]
pub struct VariantReport {
    pub name: String,
    pub runs: Vec<SeedRun>,
}

fn median(values: &mut Vec<f64>) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

impl VariantReport {
    pub fn median_final_f1(&self) -> f64 {
        median(&mut self.runs.iter().map(|r| r.final_f1).collect())
    }

    pub fn median_epochs_to_plateau(&self) -> f64 {
        median(&mut self.runs.iter().map(|r| r.epochs_to_plateau as f64).collect())
    }

    pub fn median_gap_at_plateau(&self) -> f64 {
        median(&mut self.runs.iter().map(|r| r.gap_at_plateau).collect())
    }
}

/// Comparison of every variant over a shared corpus and seed set.
#[derive(Clone, Debug)]
pub struct ComparisonReport {
    pub variants: Vec<VariantReport>,
    pub seeds: Vec<u64>,
    pub plateau_fraction: f64,
}

impl ComparisonReport {
    pub fn variant(&self, name: &str) -> Option<&VariantReport> {
        self.variants.iter().find(|v| v.name == name)
    }

    /// Per-run rows: `variant,seed,final_f1,epochs_to_plateau,gap_at_plateau`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("variant,seed,final_f1,epochs_to_plateau,gap_at_plateau\n");
        for v in &self.variants {
            for r in &v.runs {
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    v.name, r.seed, r.final_f1, r.epochs_to_plateau, r.gap_at_plateau
                ));
            }
        }
        out
    }

    /// Plain-text summary: one column per variant, median rows.
    pub fn to_table(&self) -> String {
        let metric_width = 22;
        let col_width = self
            .variants
            .iter()
            .map(|v| v.name.chars().count())
            .max()
            .unwrap_or(0)
            .max(12)
            + 2;
        let pad = |s: &str, w: usize| {
            let len = s.chars().count();
            format!("{}{}", s, " ".repeat(w.saturating_sub(len)))
        };
        let mut out = pad("metric (median)", metric_width);
        for v in &self.variants {
            out.push_str(&pad(&v.name, col_width));
        }
        out.push('\n');
        let rows: [(&str, Box<dyn Fn(&VariantReport) -> String>); 3] = [
            ("final F1", Box::new(|v| format!("{:.4}", v.median_final_f1()))),
            (
                "epochs to plateau",
                Box::new(|v| format!("{}", v.median_epochs_to_plateau())),
            ),
            (
                "val-train gap",
                Box::new(|v| format!("{:.4}", v.median_gap_at_plateau())),
            ),
        ];
        for (label, cell) in rows {
            out.push_str(&pad(label, metric_width));
            for v in &self.variants {
                out.push_str(&pad(&cell(v), col_width));
            }
            out.push('\n');
        }
        out
    }
}

/// Trains one variant on one pre-generated corpus.
fn run_one(
    corpus: &SynthCorpus,
    base: &TrainConfig,
    seed: u64,
    settings: &CompareSettings,
) -> Result<SeedRun> {
    let mut cfg = base.clone();
    cfg.seed = seed;
    let k = corpus.labels.len();
    let vocab = Vocabulary::build(&corpus.train, cfg.n)?;
    let train_ds = build_segment_dataset(&corpus.train, cfg.segment_size, cfg.n, &vocab, k)?;
    let val_ds = build_segment_dataset(&corpus.val, cfg.segment_size, cfg.n, &vocab, k)?;
    let val_truth = sets_from_multi_hot(
        &val_ds.segments.iter().map(|s| s.label.clone()).collect::<Vec<_>>(),
    );

    let mut trainer = Trainer::new(train_ds, Some(val_ds.clone()), cfg.clone())?;
    let mut curve = LossCurve::default();
    let mut val_f1_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let stats = trainer.run_epoch()?;
        curve.0.push(stats);
        let outputs = classify_dataset(trainer.model(), &val_ds, cfg.attention)?;
        let predicted = threshold_sets(&outputs, settings.threshold)?;
        val_f1_curve.push(metrics(&val_truth, &predicted, RecallMode::ByTruth)?.avg_f1);
    }
    let final_val_f1 = *val_f1_curve.last().expect("at least one epoch");
    let epochs_to_plateau = val_f1_curve
        .iter()
        .position(|&f1| f1 >= settings.plateau_fraction * final_val_f1)
        .expect("the final epoch always qualifies")
        + 1;
    let at = epochs_to_plateau - 1;
    let gap_at_plateau = curve.0[at].val_loss - curve.0[at].train_loss;

    let model = trainer.into_model();
    let train_reps =
        represent_sequences(&model, cfg.attention, &corpus.train, &vocab, cfg.segment_size, cfg.n)?;
    let test_reps =
        represent_sequences(&model, cfg.attention, &corpus.test, &vocab, cfg.segment_size, cfg.n)?;
    let label_of = |seqs: &[LabeledSequence], id: &str| -> Vec<f64> {
        let set = &seqs.iter().find(|s| s.id == id).expect("own corpus").labels;
        let mut row = vec![0.0; k];
        for &l in set {
            row[l] = 1.0;
        }
        row
    };
    let vectors: Vec<Vec<f64>> = train_reps.iter().map(|r| r.vector.clone()).collect();
    let targets: Vec<Vec<f64>> = train_reps
        .iter()
        .map(|r| label_of(&corpus.train, &r.id))
        .collect();
    let mlp_cfg = MlpConfig {
        seed,
        ..settings.mlp.clone()
    };
    let mlp = train_mlp(&vectors, &targets, &mlp_cfg)?;
    let mut predicted = Vec::with_capacity(test_reps.len());
    let mut truth = Vec::with_capacity(test_reps.len());
    for rep in &test_reps {
        predicted.push(predict(&mlp, &rep.vector, settings.threshold)?);
        let seq = corpus.test.iter().find(|s| s.id == rep.id).expect("own corpus");
        truth.push(seq.labels.clone());
    }
    let final_f1 = metrics(&truth, &predicted, RecallMode::ByTruth)?.avg_f1;

    Ok(SeedRun {
        seed,
        final_f1,
        epochs_to_plateau,
        gap_at_plateau,
        val_f1_curve,
        curve,
    })
}

/// Runs every variant over every seed on identical corpora (one corpus per
/// seed, shared across variants) and reports per-run and median results.
pub fn compare_variants(
    spec: &SynthSpec,
    variants: &[VariantSpec],
    seeds: &[u64],
    settings: &CompareSettings,
) -> Result<ComparisonReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::invalid("compare_variants", "need at least one variant and one seed"));
    }
    if !(settings.plateau_fraction > 0.0 && settings.plateau_fraction <= 1.0) {
        return Err(Error::invalid("compare_variants", "plateau fraction must lie in (0, 1]"));
    }
    let mut corpora = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        corpora.push(generate(spec, seed)?);
    }
    let mut reports = Vec::with_capacity(variants.len());
    for variant in variants {
        log::info!("comparing variant {}", variant.name);
        let mut runs = Vec::with_capacity(seeds.len());
        for (&seed, corpus) in seeds.iter().zip(&corpora) {
            runs.push(run_one(corpus, &variant.config, seed, settings)?);
        }
        reports.push(VariantReport {
            name: variant.name.clone(),
            runs,
        });
    }
    Ok(ComparisonReport {
        variants: reports,
        seeds: seeds.to_vec(),
        plateau_fraction: settings.plateau_fraction,
    })
}
