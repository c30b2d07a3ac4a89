//! End-to-end smoke tests of the command-line binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn binary() -> &'static str {
    env!("CARGO_BIN_EXE_protattn")
}

fn run(args: &[&str]) -> Output {
    Command::new(binary())
        .args(args)
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Thirty residues of cycling noise with a motif planted at a salt-dependent
/// position.
fn make_seq(motif: &str, salt: usize) -> String {
    let alphabet = b"ACDEFGHIKLMNPQRSTVWY";
    let mut s: Vec<u8> = (0..30).map(|i| alphabet[(i * 7 + salt * 3) % 20]).collect();
    let at = (salt * 5) % (30 - motif.len());
    s[at..at + motif.len()].copy_from_slice(motif.as_bytes());
    String::from_utf8(s).expect("ascii residues")
}

/// Writes a two-class corpus and returns (sequences, labels) paths.
fn write_corpus(dir: &Path, stem: &str, count: usize) -> (PathBuf, PathBuf) {
    let mut fasta = String::new();
    let mut labels = String::new();
    for i in 0..count {
        let (motif, label) = if i % 2 == 0 { ("ACD", "alpha") } else { ("WYW", "beta") };
        let id = format!("{stem}{i}");
        fasta.push_str(&format!(">{id}\n{}\n", make_seq(motif, i)));
        if i == 0 {
            labels.push_str(&format!("{id}\talpha,beta\n"));
        } else {
            labels.push_str(&format!("{id}\t{label}\n"));
        }
    }
    let fasta_path = dir.join(format!("{stem}.fasta"));
    let labels_path = dir.join(format!("{stem}.tsv"));
    std::fs::write(&fasta_path, fasta).expect("fasta");
    std::fs::write(&labels_path, labels).expect("labels");
    (fasta_path, labels_path)
}

/// A full config pointing at a tiny corpus, sized to finish in milliseconds.
fn write_config(dir: &Path, out_dir: &Path) -> PathBuf {
    let (train_fasta, train_labels) = write_corpus(dir, "train", 8);
    let (test_fasta, test_labels) = write_corpus(dir, "test", 4);
    let text = format!(
        "train_sequences = {}\n\
         train_labels = {}\n\
         test_sequences = {}\n\
         test_labels = {}\n\
         out_dir = {}\n\
         n = 3\n\
         segment_size = 30\n\
         embedding_dim = 6\n\
         hidden_size = 6\n\
         epochs = 2\n\
         batch_size = 4\n\
         learning_rate = 0.01\n\
         val_fraction = 0.25\n\
         seed = 11\n\
         mlp_epochs = 30\n\
         mlp_batch_size = 8\n",
        train_fasta.display(),
        train_labels.display(),
        test_fasta.display(),
        test_labels.display(),
        out_dir.display(),
    );
    let path = dir.join("run.cfg");
    std::fs::write(&path, text).expect("config");
    path
}

#[test]
fn workflow_train_embed_head_evaluate_predict() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), &out);
    let cfg = cfg.to_str().expect("utf8 path");

    let train = run(&["train-segments", "--config", cfg]);
    assert_eq!(exit_code(&train), 0, "train-segments failed: {}", stderr(&train));
    assert!(out.join("model.ckpt").is_file());
    assert!(out.join("loss_curve.csv").is_file());
    assert!(out.join("resolved.cfg").is_file());
    let curve = std::fs::read_to_string(out.join("loss_curve.csv")).expect("curve");
    assert!(curve.starts_with("epoch,train_loss,val_loss,seconds\n"));
    assert_eq!(curve.lines().count(), 3, "two epochs plus header");

    let embed = run(&["embed", "--config", cfg]);
    assert_eq!(exit_code(&embed), 0, "embed failed: {}", stderr(&embed));
    let reps = std::fs::read_to_string(out.join("representations.csv")).expect("representations");
    assert_eq!(reps.lines().count(), 4, "one row per test sequence");
    for line in reps.lines() {
        assert_eq!(line.split(',').count(), 3, "id plus one value per label");
    }

    let head = run(&["train-mlp", "--config", cfg]);
    assert_eq!(exit_code(&head), 0, "train-mlp failed: {}", stderr(&head));
    assert!(out.join("mlp.ckpt").is_file());

    let evaluate = run(&["evaluate", "--config", cfg]);
    assert_eq!(exit_code(&evaluate), 0, "evaluate failed: {}", stderr(&evaluate));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).expect("metrics");
    let mut lines = metrics.lines();
    assert_eq!(lines.next(), Some("avg_precision,avg_recall,avg_f1,n"));
    let row: Vec<&str> = lines.next().expect("metrics row").split(',').collect();
    for value in &row[..3] {
        let v: f64 = value.parse().expect("metric value");
        assert!((0.0..=1.0).contains(&v), "metric {v} outside [0, 1]");
    }
    assert_eq!(row[3], "4");

    let predict = run(&["predict", "--config", cfg]);
    assert_eq!(exit_code(&predict), 0, "predict failed: {}", stderr(&predict));
    let tsv = std::fs::read_to_string(out.join("predictions.tsv")).expect("predictions");
    assert_eq!(tsv.lines().count(), 4);
    for line in tsv.lines() {
        let (id, labels) = line.split_once('\t').expect("id TAB labels");
        assert!(id.starts_with("test"));
        assert!(!labels.is_empty(), "threshold fallback guarantees a label");
        for name in labels.split(',') {
            assert!(name == "alpha" || name == "beta", "unknown label {name}");
        }
    }

    // The resolved config echo parses back to the same document.
    let echoed = std::fs::read_to_string(out.join("resolved.cfg")).expect("echo");
    assert!(echoed.contains("segment_size = 30"));
    assert!(echoed.contains("seed = 11"));
}

#[test]
fn reruns_differ_only_in_wall_clock_seconds() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_a = dir.path().join("a");
    let cfg = write_config(dir.path(), &out_a);
    let cfg = cfg.to_str().expect("utf8 path");
    let out_b = dir.path().join("b");

    let first = run(&["train-segments", "--config", cfg]);
    assert_eq!(exit_code(&first), 0, "{}", stderr(&first));
    let second = run(&["train-segments", "--config", cfg, "--out", out_b.to_str().unwrap()]);
    assert_eq!(exit_code(&second), 0, "{}", stderr(&second));

    let curve_a = std::fs::read_to_string(out_a.join("loss_curve.csv")).expect("curve A");
    let curve_b = std::fs::read_to_string(out_b.join("loss_curve.csv")).expect("curve B");
    assert_eq!(curve_a.lines().count(), curve_b.lines().count());
    for (la, lb) in curve_a.lines().zip(curve_b.lines()) {
        let a: Vec<&str> = la.split(',').collect();
        let b: Vec<&str> = lb.split(',').collect();
        assert_eq!(a[..3], b[..3], "losses must be reproducible; only seconds may differ");
    }

    // The trained parameters are bit-identical; only the echoed output
    // directory distinguishes the checkpoint files.
    let model_a = protattn::checkpoint::ModelCheckpoint::load(&out_a.join("model.ckpt")).expect("ckpt A");
    let model_b = protattn::checkpoint::ModelCheckpoint::load(&out_b.join("model.ckpt")).expect("ckpt B");
    for ((name_a, ta), (name_b, tb)) in model_a
        .model
        .named_tensors()
        .into_iter()
        .zip(model_b.model.named_tensors())
    {
        assert_eq!(name_a, name_b);
        let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b, "tensor {name_a} must be reproducible");
    }
}

#[test]
fn seed_override_changes_the_outcome() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out_a = dir.path().join("a");
    let cfg = write_config(dir.path(), &out_a);
    let cfg = cfg.to_str().expect("utf8 path");
    let out_b = dir.path().join("b");

    assert_eq!(exit_code(&run(&["train-segments", "--config", cfg])), 0);
    let other = run(&[
        "train-segments",
        "--config",
        cfg,
        "--seed",
        "12",
        "--out",
        out_b.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&other), 0, "{}", stderr(&other));
    let model_a = std::fs::read(out_a.join("model.ckpt")).expect("ckpt A");
    let model_b = std::fs::read(out_b.join("model.ckpt")).expect("ckpt B");
    assert_ne!(model_a, model_b, "a different seed must produce a different model");
    let echoed = std::fs::read_to_string(out_b.join("resolved.cfg")).expect("echo");
    assert!(echoed.contains("seed = 12"), "override must appear in the echo");
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().expect("tempdir");

    // Missing required corpus path, named in the message.
    let bare = dir.path().join("bare.cfg");
    std::fs::write(&bare, "epochs = 1\n").expect("config");
    let out = run(&["train-segments", "--config", bare.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("train_sequences"), "stderr: {}", stderr(&out));

    // Unknown key, named in the message.
    let typo = dir.path().join("typo.cfg");
    std::fs::write(&typo, "hiden_size = 6\n").expect("config");
    let out = run(&["train-segments", "--config", typo.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("hiden_size"), "stderr: {}", stderr(&out));

    // Unreadable config file.
    let out = run(&["train-segments", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(exit_code(&out), 2);

    // Unknown command and missing --config flag.
    let out = run(&["transmogrify", "--config", bare.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("transmogrify"));
    let out = run(&["train-segments"]);
    assert_eq!(exit_code(&out), 2);
    assert!(stderr(&out).contains("--config"));

    // Runtime failures (a valid config whose corpus is missing) exit 1.
    let ghost = dir.path().join("ghost.cfg");
    std::fs::write(
        &ghost,
        format!(
            "train_sequences = /nonexistent.fasta\ntrain_labels = /nonexistent.tsv\nout_dir = {}\n",
            dir.path().join("out").display()
        ),
    )
    .expect("config");
    let out = run(&["train-segments", "--config", ghost.to_str().unwrap()]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn help_prints_usage() {
    let out = run(&["help"]);
    assert_eq!(exit_code(&out), 0);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("train-segments"));
    assert!(text.contains("--config"));
    let none = run(&[]);
    assert_eq!(exit_code(&none), 2, "no command is a usage error");
}

#[test]
fn compare_writes_report_files() {
    let dir = tempfile::tempdir().expect("tempdir");
    let out = dir.path().join("out");
    let text = format!(
        "out_dir = {}\n\
         epochs = 1\n\
         hidden_size = 6\n\
         embedding_dim = 6\n\
         segment_size = 21\n\
         learning_rate = 0.01\n\
         synth_vocab = 12\n\
         synth_seq_len = 21\n\
         synth_classes = 2\n\
         synth_motifs_per_class = 3\n\
         synth_motif_len = 3\n\
         synth_train = 24\n\
         synth_val = 8\n\
         synth_test = 8\n\
         synth_multi_label_prob = 0.0\n\
         compare_lambdas = 1.0\n\
         compare_baselines = false\n\
         compare_seeds = 1\n\
         mlp_epochs = 20\n",
        out.display()
    );
    let cfg = dir.path().join("compare.cfg");
    std::fs::write(&cfg, text).expect("config");
    let result = run(&["compare", "--config", cfg.to_str().unwrap()]);
    assert_eq!(exit_code(&result), 0, "compare failed: {}", stderr(&result));

    let csv = std::fs::read_to_string(out.join("comparison.csv")).expect("comparison csv");
    assert_eq!(csv.lines().count(), 2, "header plus one run row");
    assert!(csv.starts_with("variant,seed,final_f1,epochs_to_plateau,gap_at_plateau\n"));
    let table = std::fs::read_to_string(out.join("comparison.txt")).expect("table");
    assert!(table.contains("λ = 1"));
    let curves = std::fs::read_to_string(out.join("curves.csv")).expect("curves");
    assert_eq!(curves.lines().count(), 2, "header plus one epoch row");
    let stdout = String::from_utf8_lossy(&result.stdout);
    assert!(stdout.contains("final F1"), "summary table goes to stdout");
}
