//! Acceptance suite: every headline behavior of the toolkit, each test
//! printing one `acceptance <name>: PASS/FAIL (...)` line with the measured
//! quantities.
//!
//! The four benchmark tests (convergence, accuracy ordering, generalization
//! gap, lambda rate probe) share a single desk-scale comparison run over the
//! default synthetic corpus: five variants, five seeds, four epochs each.

use std::collections::BTreeSet;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use protattn::checkpoint::{MlpCheckpoint, ModelCheckpoint};
use protattn::layers::{
    embed, gru_step, lstm_step, mlp_forward, scaled_attention, standard_attention, bidir_run,
    dense_sigmoid, segment_forward, AttentionGraph, AttentionKind, AttentionParams, CellKind,
    CellNodes, CellParams, DenseParams, ForwardSettings, GruParams, LstmParams, MlpParams,
    ScoreMode,
};
use protattn::pipeline::{metrics, run_pipeline, MlpConfig, PipelineConfig, RecallMode};
use protattn::seqdata::PAD_INDEX;
use protattn::synth::{
    compare_variants, default_variants, generate, CompareSettings, ComparisonReport, SynthSpec,
};
use protattn::tape::{finite_diff_grad, max_rel_error, NodeId, ReduceKind, Tape};
use protattn::tensor::Tensor;
use protattn::train::TrainConfig;
use protattn::Result;

/// Prints the verdict line and fails the test when `ok` is false.
fn check(name: &str, ok: bool, detail: &str) {
    println!("acceptance {name}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).expect("test tensor")
}

/// Reduces any node to the scalar mean of its entries.
fn mean_all(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let n = tape.value(x).numel();
    let flat = tape.reshape(x, vec![n])?;
    tape.reduce(ReduceKind::Mean, flat, 0)
}

// ---- gradient parity --------------------------------------------------------

type Graph<'a> = dyn Fn(&[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)> + 'a;

/// Worst relative error between tape gradients and central differences,
/// across every parameter tensor of one graph.
fn compare_grads(params: &[Tensor], graph: &Graph) -> f64 {
    let (tape, ids, loss) = graph(params).expect("forward");
    assert_eq!(ids.len(), params.len(), "graph must expose one leaf per parameter");
    let grads = tape.backward(loss).expect("backward");
    let f = |ps: &[Tensor]| graph(ps).map(|(t, _, l)| t.value(l).data()[0]);
    let numeric = finite_diff_grad(&f, params, 1e-5).expect("finite differences");
    ids.iter()
        .zip(&numeric)
        .map(|(id, n)| max_rel_error(grads.get(*id), n))
        .fold(0.0_f64, f64::max)
}

fn embedding_parity(rng: &mut ChaCha8Rng) -> f64 {
    let v = rng.gen_range(3..=6);
    let d = rng.gen_range(2..=5);
    let t = rng.gen_range(2..=8);
    let tokens: Vec<usize> = (0..t)
        .map(|i| if i == 0 { PAD_INDEX } else { rng.gen_range(1..v) })
        .collect();
    let params = vec![rand_tensor(rng, vec![v, d], 0.8)];
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let table = tape.leaf(ps[0].clone());
        let x = embed(&mut tape, table, &tokens)?;
        let loss = mean_all(&mut tape, x)?;
        Ok((tape, vec![table], loss))
    };
    compare_grads(&params, &graph)
}

fn gru_parity(rng: &mut ChaCha8Rng) -> f64 {
    let hidden = rng.gen_range(2..=6);
    let input = rng.gen_range(2..=5);
    let t = rng.gen_range(2..=4);
    let p = GruParams::init(rng, hidden, input);
    let params = vec![
        p.w_z, p.u_z, p.b_z, p.w_r, p.u_r, p.b_r, p.w_h, p.u_h, p.b_h,
        rand_tensor(rng, vec![t, input], 0.8),
    ];
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let gp = GruParams {
            w_z: ps[0].clone(),
            u_z: ps[1].clone(),
            b_z: ps[2].clone(),
            w_r: ps[3].clone(),
            u_r: ps[4].clone(),
            b_r: ps[5].clone(),
            w_h: ps[6].clone(),
            u_h: ps[7].clone(),
            b_h: ps[8].clone(),
        };
        let mut tape = Tape::new();
        let nodes = gp.mount(&mut tape);
        let x = tape.leaf(ps[9].clone());
        let mut h = tape.leaf(Tensor::zeros(vec![hidden]));
        for step in 0..t {
            let xt = tape.row(x, step)?;
            h = gru_step(&mut tape, &nodes, xt, h)?;
        }
        let loss = mean_all(&mut tape, h)?;
        let ids = vec![
            nodes.w_z, nodes.u_z, nodes.b_z, nodes.w_r, nodes.u_r, nodes.b_r, nodes.w_h,
            nodes.u_h, nodes.b_h, x,
        ];
        Ok((tape, ids, loss))
    };
    compare_grads(&params, &graph)
}

fn lstm_parity(rng: &mut ChaCha8Rng) -> f64 {
    let hidden = rng.gen_range(2..=6);
    let input = rng.gen_range(2..=5);
    let t = rng.gen_range(2..=4);
    let p = LstmParams::init(rng, hidden, input);
    let params = vec![
        p.w_f, p.b_f, p.w_i, p.b_i, p.w_c, p.b_c, p.w_o, p.b_o,
        rand_tensor(rng, vec![t, input], 0.8),
    ];
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let lp = LstmParams {
            w_f: ps[0].clone(),
            b_f: ps[1].clone(),
            w_i: ps[2].clone(),
            b_i: ps[3].clone(),
            w_c: ps[4].clone(),
            b_c: ps[5].clone(),
            w_o: ps[6].clone(),
            b_o: ps[7].clone(),
        };
        let mut tape = Tape::new();
        let nodes = lp.mount(&mut tape);
        let x = tape.leaf(ps[8].clone());
        let mut h = tape.leaf(Tensor::zeros(vec![hidden]));
        let mut c = tape.leaf(Tensor::zeros(vec![hidden]));
        for step in 0..t {
            let xt = tape.row(x, step)?;
            let (h2, c2) = lstm_step(&mut tape, &nodes, xt, h, c)?;
            h = h2;
            c = c2;
        }
        let loss = mean_all(&mut tape, h)?;
        let ids = vec![
            nodes.w_f, nodes.b_f, nodes.w_i, nodes.b_i, nodes.w_c, nodes.b_c, nodes.w_o,
            nodes.b_o, x,
        ];
        Ok((tape, ids, loss))
    };
    compare_grads(&params, &graph)
}

fn bidir_parity(rng: &mut ChaCha8Rng, kind: CellKind) -> f64 {
    let hidden = rng.gen_range(2..=4);
    let input = rng.gen_range(2..=4);
    let t = rng.gen_range(2..=6);
    let fwd = CellParams::init(rng, kind, hidden, input);
    let bwd = CellParams::init(rng, kind, hidden, input);
    let mut params = cell_tensors(&fwd);
    params.extend(cell_tensors(&bwd));
    params.push(rand_tensor(rng, vec![t, input], 0.8));
    let half = (params.len() - 1) / 2;
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let fwd = cell_from_tensors(kind, &ps[..half]);
        let bwd = cell_from_tensors(kind, &ps[half..2 * half]);
        let mut tape = Tape::new();
        let fwd_nodes = fwd.mount(&mut tape);
        let bwd_nodes = bwd.mount(&mut tape);
        let x = tape.leaf(ps[2 * half].clone());
        let h = bidir_run(&mut tape, &fwd_nodes, &bwd_nodes, x)?;
        let loss = mean_all(&mut tape, h)?;
        let mut ids = cell_ids(&fwd_nodes);
        ids.extend(cell_ids(&bwd_nodes));
        ids.push(x);
        Ok((tape, ids, loss))
    };
    compare_grads(&params, &graph)
}

fn cell_tensors(p: &CellParams) -> Vec<Tensor> {
    match p {
        CellParams::Gru(g) => vec![
            g.w_z.clone(),
            g.u_z.clone(),
            g.b_z.clone(),
            g.w_r.clone(),
            g.u_r.clone(),
            g.b_r.clone(),
            g.w_h.clone(),
            g.u_h.clone(),
            g.b_h.clone(),
        ],
        CellParams::Lstm(l) => vec![
            l.w_f.clone(),
            l.b_f.clone(),
            l.w_i.clone(),
            l.b_i.clone(),
            l.w_c.clone(),
            l.b_c.clone(),
            l.w_o.clone(),
            l.b_o.clone(),
        ],
    }
}

fn cell_from_tensors(kind: CellKind, ps: &[Tensor]) -> CellParams {
    match kind {
        CellKind::Gru => CellParams::Gru(GruParams {
            w_z: ps[0].clone(),
            u_z: ps[1].clone(),
            b_z: ps[2].clone(),
            w_r: ps[3].clone(),
            u_r: ps[4].clone(),
            b_r: ps[5].clone(),
            w_h: ps[6].clone(),
            u_h: ps[7].clone(),
            b_h: ps[8].clone(),
        }),
        CellKind::Lstm => CellParams::Lstm(LstmParams {
            w_f: ps[0].clone(),
            b_f: ps[1].clone(),
            w_i: ps[2].clone(),
            b_i: ps[3].clone(),
            w_c: ps[4].clone(),
            b_c: ps[5].clone(),
            w_o: ps[6].clone(),
            b_o: ps[7].clone(),
        }),
    }
}

fn cell_ids(nodes: &CellNodes) -> Vec<NodeId> {
    match nodes {
        CellNodes::Gru(g) => vec![
            g.w_z, g.u_z, g.b_z, g.w_r, g.u_r, g.b_r, g.w_h, g.u_h, g.b_h,
        ],
        CellNodes::Lstm(l) => vec![l.w_f, l.b_f, l.w_i, l.b_i, l.w_c, l.b_c, l.w_o, l.b_o],
    }
}

fn attention_parity(rng: &mut ChaCha8Rng, standard: bool, score: ScoreMode) -> f64 {
    let hidden2 = 2 * rng.gen_range(1..=3);
    let t = rng.gen_range(2..=8);
    let lambda = rng.gen_range(0.2..=1.0);
    let p = AttentionParams::init(rng, hidden2, score, lambda).expect("attention init");
    let has_ctx = p.context.is_some();
    let mut masked: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.25)).collect();
    masked[0] = false;
    let mut params = vec![p.w_a, p.b_a];
    if let Some(c) = p.context {
        params.push(c);
    }
    params.push(rand_tensor(rng, vec![t, hidden2], 0.8));
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let ap = AttentionParams {
            w_a: ps[0].clone(),
            b_a: ps[1].clone(),
            context: if has_ctx { Some(ps[2].clone()) } else { None },
            lambda,
        };
        let mut tape = Tape::new();
        let nodes = ap.mount(&mut tape);
        let h = tape.leaf(ps.last().expect("hidden matrix").clone());
        let graph = if standard {
            standard_attention(&mut tape, &nodes, h, &masked)?
        } else {
            scaled_attention(&mut tape, &nodes, h, &masked)?
        };
        let loss = mean_all(&mut tape, graph.context)?;
        let mut ids = vec![nodes.w_a, nodes.b_a];
        if let Some(c) = nodes.context {
            ids.push(c);
        }
        ids.push(h);
        Ok((tape, ids, loss))
    };
    compare_grads(&params, &graph)
}

fn dense_parity(rng: &mut ChaCha8Rng) -> f64 {
    let outputs = rng.gen_range(2..=5);
    let inputs = rng.gen_range(2..=6);
    let p = DenseParams::init(rng, outputs, inputs);
    let params = vec![p.w, p.b, rand_tensor(rng, vec![inputs], 0.8)];
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let dp = DenseParams {
            w: ps[0].clone(),
            b: ps[1].clone(),
        };
        let mut tape = Tape::new();
        let nodes = dp.mount(&mut tape);
        let v = tape.leaf(ps[2].clone());
        let pred = dense_sigmoid(&mut tape, &nodes, v)?;
        let loss = mean_all(&mut tape, pred)?;
        Ok((tape, vec![nodes.w, nodes.b, v], loss))
    };
    compare_grads(&params, &graph)
}

fn mlp_parity(rng: &mut ChaCha8Rng) -> f64 {
    let inputs = rng.gen_range(2..=5);
    let hidden = rng.gen_range(2..=6);
    let outputs = rng.gen_range(2..=5);
    let p = MlpParams::init(rng, inputs, hidden, outputs).expect("mlp init");
    let params = vec![p.w1, p.b1, p.w2, p.b2, rand_tensor(rng, vec![inputs], 0.8)];
    let graph = move |ps: &[Tensor]| -> Result<(Tape, Vec<NodeId>, NodeId)> {
        let mp = MlpParams {
            w1: ps[0].clone(),
            b1: ps[1].clone(),
            w2: ps[2].clone(),
            b2: ps[3].clone(),
        };
        let mut tape = Tape::new();
        let nodes = mp.mount(&mut tape);
        let x = tape.leaf(ps[4].clone());
        let pred = mlp_forward(&mut tape, &nodes, x)?;
        let loss = mean_all(&mut tape, pred)?;
        Ok((tape, vec![nodes.w1, nodes.b1, nodes.w2, nodes.b2, x], loss))
    };
    compare_grads(&params, &graph)
}

#[test]
fn gradient_parity_for_every_layer() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for _ in 0..3 {
        for err in [
            embedding_parity(&mut rng),
            gru_parity(&mut rng),
            lstm_parity(&mut rng),
            bidir_parity(&mut rng, CellKind::Gru),
            bidir_parity(&mut rng, CellKind::Lstm),
            attention_parity(&mut rng, false, ScoreMode::Scalar),
            attention_parity(&mut rng, false, ScoreMode::ContextVector { dim: 3 }),
            attention_parity(&mut rng, true, ScoreMode::Scalar),
            attention_parity(&mut rng, true, ScoreMode::ContextVector { dim: 3 }),
            dense_parity(&mut rng),
            mlp_parity(&mut rng),
        ] {
            worst = worst.max(err);
            cases += 1;
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    check(
        "gradient-parity",
        worst < 1e-4 && seconds < 120.0,
        &format!("worst relative error {worst:.3e} over {cases} layer cases in {seconds:.1}s"),
    );
}

// ---- attention invariants ---------------------------------------------------

/// Builds one attention graph over a random hidden matrix and returns its
/// snapshot together with the mask.
fn random_attention(
    rng: &mut ChaCha8Rng,
    standard: bool,
    scale: f64,
    t: usize,
    lambda: f64,
    any_masked: bool,
) -> (Vec<bool>, protattn::layers::AttentionOutput) {
    let hidden2 = 2 * rng.gen_range(1..=3);
    let score = if rng.gen_bool(0.3) {
        ScoreMode::ContextVector { dim: rng.gen_range(2..=4) }
    } else {
        ScoreMode::Scalar
    };
    let p = AttentionParams::init(rng, hidden2, score, lambda).expect("attention init");
    let mut masked: Vec<bool> = (0..t)
        .map(|_| any_masked && rng.gen_bool(0.3))
        .collect();
    masked[0] = false;
    let h = rand_tensor(rng, vec![t, hidden2], scale);
    let mut tape = Tape::new();
    let nodes = p.mount(&mut tape);
    let hid = tape.leaf(h);
    let graph: AttentionGraph = if standard {
        standard_attention(&mut tape, &nodes, hid, &masked).expect("attention")
    } else {
        scaled_attention(&mut tape, &nodes, hid, &masked).expect("attention")
    };
    (masked, graph.snapshot(&tape))
}

#[test]
fn attention_invariants_on_random_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa77e);
    let mut worst_norm: f64 = 0.0;
    let mut worst_max: f64 = 0.0;
    for _ in 0..1000 {
        let t = rng.gen_range(2..=12);
        let lambda = rng.gen_range(0.05..=1.0);
        let (masked, out) = random_attention(&mut rng, false, 1.5, t, lambda, true);
        let sum: f64 = out.alpha.iter().sum();
        worst_norm = worst_norm.max((sum - 1.0).abs());
        let max_scaled = out
            .alpha_scaled
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        worst_max = worst_max.max((max_scaled - lambda).abs());
        for (i, &m) in masked.iter().enumerate() {
            if m {
                assert_eq!(out.alpha[i], 0.0, "masked weight must be exactly zero");
                assert_eq!(out.alpha_scaled[i], 0.0, "masked scaled weight must be exactly zero");
            }
        }
        for i in 0..t {
            for j in 0..t {
                assert!(
                    !(out.alpha[i] > out.alpha[j] && out.alpha_scaled[i] < out.alpha_scaled[j]),
                    "rescaling inverted the order of positions {i} and {j}"
                );
            }
        }
    }
    // Vanishing regime: near-uniform logits spread less than ln 2 apart. The
    // rescaled maximum stays pinned at 1 while the plain softmax maximum
    // falls below 2/T at every length.
    let mut standard_max_at_512 = f64::NAN;
    for &t in &[2usize, 3, 8, 64, 128, 256, 512] {
        let (_, scaled) = random_attention(&mut rng, false, 0.04, t, 1.0, false);
        let max_scaled = scaled
            .alpha_scaled
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(max_scaled, 1.0, "rescaled maximum must be exactly 1 at T = {t}");
        let (_, standard) = random_attention(&mut rng, true, 0.04, t, 1.0, false);
        let max_standard = standard
            .alpha
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(
            max_standard < 2.0 / t as f64,
            "plain softmax maximum {max_standard} at T = {t} should vanish below {}",
            2.0 / t as f64
        );
        if t == 512 {
            standard_max_at_512 = max_standard;
        }
    }
    check(
        "attention-invariants",
        worst_norm < 1e-12 && worst_max < 1e-12,
        &format!(
            "1000 inputs: normalization off by {worst_norm:.1e}, max-vs-lambda off by \
             {worst_max:.1e}; at T = 512 the plain softmax max fell to {standard_max_at_512:.5} \
             while the rescaled max stayed 1"
        ),
    );
}

// ---- shared desk-scale comparison fixture -----------------------------------

struct Fixture {
    report: ComparisonReport,
    seconds: f64,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// Training settings sized for the synthetic benchmark on one CPU core.
fn desk_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 32,
        learning_rate: 5e-3,
        lambda: 1.0,
        seed: 42,
        attention: AttentionKind::Scaled,
        score: ScoreMode::Scalar,
        cell: CellKind::Gru,
        segment_size: 100,
        n: 3,
        embed_dim: 12,
        hidden_size: 12,
        val_fraction: 0.1,
    }
}

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let started = Instant::now();
        let base = desk_train_config();
        let variants = default_variants(&base, &[1.0, 0.5, 0.1], true);
        let report = compare_variants(
            &SynthSpec::default(),
            &variants,
            &[42, 43, 44, 45, 46],
            &CompareSettings::default(),
        )
        .expect("comparison harness");
        Fixture {
            report,
            seconds: started.elapsed().as_secs_f64(),
        }
    })
}

fn median_epochs(name: &str) -> f64 {
    fixture()
        .report
        .variant(name)
        .unwrap_or_else(|| panic!("variant {name} missing"))
        .median_epochs_to_plateau()
}

fn median_f1(name: &str) -> f64 {
    fixture()
        .report
        .variant(name)
        .unwrap_or_else(|| panic!("variant {name} missing"))
        .median_final_f1()
}

fn median_gap(name: &str) -> f64 {
    fixture()
        .report
        .variant(name)
        .unwrap_or_else(|| panic!("variant {name} missing"))
        .median_gap_at_plateau()
}

#[test]
fn convergence_beats_standard_attention() {
    let scaled = median_epochs("λ = 1");
    let standard = median_epochs("Base.+Attn.");
    let seconds = fixture().seconds;
    check(
        "convergence-replication",
        scaled <= 0.6 * standard && seconds < 1200.0,
        &format!(
            "median epochs to plateau: rescaled {scaled} vs standard {standard} \
             (ratio {:.2}, needs <= 0.6); comparison took {seconds:.0}s of the 1200s budget",
            scaled / standard
        ),
    );
}

#[test]
fn final_f1_ordering_holds_with_margin() {
    let scaled = median_f1("λ = 1");
    let standard = median_f1("Base.+Attn.");
    let last_hidden = median_f1("Base.");
    check(
        "accuracy-ordering",
        scaled - standard >= 0.01 && standard - last_hidden >= 0.01,
        &format!(
            "median final F1: rescaled {scaled:.4} > standard {standard:.4} > last-hidden \
             {last_hidden:.4}; margins {:.4} and {:.4} (each needs >= 0.01)",
            scaled - standard,
            standard - last_hidden
        ),
    );
}

#[test]
fn generalization_gap_stays_small() {
    let scaled = median_gap("λ = 1");
    let last_hidden = median_gap("Base.");
    check(
        "generalization-gap",
        scaled <= 0.5 * last_hidden,
        &format!(
            "median val-train loss gap at plateau: rescaled {scaled:.4} vs last-hidden \
             {last_hidden:.4} (needs <= half)"
        ),
    );
}

#[test]
fn smaller_lambda_never_converges_faster() {
    let e01 = median_epochs("λ = 0.1");
    let e05 = median_epochs("λ = 0.5");
    let e10 = median_epochs("λ = 1");
    check(
        "lambda-rate-probe",
        e01 >= e05 && e05 >= e10,
        &format!("median epochs to plateau: λ=0.1 -> {e01}, λ=0.5 -> {e05}, λ=1 -> {e10}"),
    );
}

// ---- metrics oracle ---------------------------------------------------------

fn random_set(rng: &mut ChaCha8Rng, universe: usize) -> BTreeSet<usize> {
    loop {
        let set: BTreeSet<usize> = (0..universe).filter(|_| rng.gen_bool(0.4)).collect();
        if !set.is_empty() {
            return set;
        }
    }
}

/// Intersection size by explicit enumeration over the label universe.
fn overlap(a: &BTreeSet<usize>, b: &BTreeSet<usize>, universe: usize) -> usize {
    (0..universe).filter(|k| a.contains(k) && b.contains(k)).count()
}

#[test]
fn metrics_match_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x04ac1e);
    let universe = 8;
    let mut truth = Vec::with_capacity(1000);
    let mut predicted = Vec::with_capacity(1000);
    for _ in 0..1000 {
        truth.push(random_set(&mut rng, universe));
        predicted.push(random_set(&mut rng, universe));
    }
    for mode in [RecallMode::ByTruth, RecallMode::ByPrediction] {
        // Per-pair comparison, exact.
        let mut p_sum = 0.0;
        let mut r_sum = 0.0;
        let mut f_sum = 0.0;
        for (y, yp) in truth.iter().zip(&predicted) {
            let inter = overlap(y, yp, universe) as f64;
            let p = inter / yp.len() as f64;
            let r = match mode {
                RecallMode::ByTruth => inter / y.len() as f64,
                RecallMode::ByPrediction => inter / yp.len() as f64,
            };
            let f = 2.0 * inter / (y.len() + yp.len()) as f64;
            let single = metrics(
                std::slice::from_ref(y),
                std::slice::from_ref(yp),
                mode,
            )
            .expect("single-pair metrics");
            assert_eq!(single.avg_precision, p, "precision must match enumeration exactly");
            assert_eq!(single.avg_recall, r, "recall must match enumeration exactly");
            assert_eq!(single.avg_f1, f, "F1 must match enumeration exactly");
            p_sum += p;
            r_sum += r;
            f_sum += f;
        }
        // Aggregated comparison, exact (same accumulation order).
        let report = metrics(&truth, &predicted, mode).expect("batch metrics");
        let n = truth.len() as f64;
        assert_eq!(report.avg_precision, p_sum / n);
        assert_eq!(report.avg_recall, r_sum / n);
        assert_eq!(report.avg_f1, f_sum / n);
        assert_eq!(report.n, truth.len());
    }
    check(
        "metrics-oracle",
        true,
        "1000 random label-set pairs match enumeration exactly in both recall conventions",
    );
}

// ---- determinism and round-trip ---------------------------------------------

fn tiny_pipeline_config() -> PipelineConfig {
    PipelineConfig {
        train: TrainConfig {
            epochs: 2,
            batch_size: 16,
            learning_rate: 5e-3,
            lambda: 1.0,
            seed: 42,
            attention: AttentionKind::Scaled,
            score: ScoreMode::Scalar,
            cell: CellKind::Gru,
            segment_size: 40,
            n: 3,
            embed_dim: 8,
            hidden_size: 8,
            val_fraction: 0.2,
        },
        mlp: MlpConfig {
            hidden: None,
            epochs: 40,
            batch_size: 16,
            learning_rate: 0.01,
            seed: 42,
        },
        threshold: 0.5,
        recall: RecallMode::ByTruth,
        config_echo: Vec::new(),
    }
}

#[test]
fn pipeline_is_deterministic_and_checkpoints_round_trip() {
    let spec = SynthSpec {
        vocab: 12,
        seq_len: 40,
        classes: 3,
        motifs_per_class: 4,
        motif_len: 3,
        train_count: 60,
        val_count: 10,
        test_count: 24,
        multi_label_prob: 0.3,
    };
    let corpus = generate(&spec, 5).expect("synthetic corpus");
    let cfg = tiny_pipeline_config();

    let dir_a = tempfile::tempdir().expect("tempdir");
    let dir_b = tempfile::tempdir().expect("tempdir");
    let outcome = run_pipeline(&corpus.train, &corpus.test, &corpus.labels, &cfg, Some(dir_a.path()))
        .expect("first pipeline run");
    run_pipeline(&corpus.train, &corpus.test, &corpus.labels, &cfg, Some(dir_b.path()))
        .expect("second pipeline run");
    let metrics_a = std::fs::read(dir_a.path().join("metrics.csv")).expect("metrics A");
    let metrics_b = std::fs::read(dir_b.path().join("metrics.csv")).expect("metrics B");
    let identical_metrics = metrics_a == metrics_b;
    let predictions_a = std::fs::read(dir_a.path().join("predictions.tsv")).expect("tsv A");
    let predictions_b = std::fs::read(dir_b.path().join("predictions.tsv")).expect("tsv B");
    let identical_predictions = predictions_a == predictions_b;

    // Model checkpoint: reload and replay 100 random segments bit-for-bit.
    let reloaded = ModelCheckpoint::load(&dir_a.path().join("model.ckpt")).expect("model reload");
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let settings = ForwardSettings {
        attention: outcome.model.attention,
        input_dropout: 0.0,
        feature_dropout: 0.0,
    };
    let vocab_size = outcome.model.model.vocab_size();
    let mut model_matches = 0usize;
    for _ in 0..100 {
        let t = rng.gen_range(3..=10);
        let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..vocab_size)).collect();
        let mut masked: Vec<bool> = (0..t).map(|_| rng.gen_bool(0.2)).collect();
        masked[0] = false;
        let run = |model: &protattn::layers::ModelParams| -> Vec<u64> {
            let mut tape = Tape::new();
            let nodes = model.mount(&mut tape);
            let graph = segment_forward(&mut tape, &nodes, &tokens, &masked, &settings, None)
                .expect("forward");
            tape.value(graph.pred).data().iter().map(|v| v.to_bits()).collect()
        };
        if run(&outcome.model.model) == run(&reloaded.model) {
            model_matches += 1;
        }
    }

    // Prediction-head checkpoint: reload and replay 100 random vectors.
    let head = MlpCheckpoint::load(&dir_a.path().join("mlp.ckpt")).expect("head reload");
    let inputs = outcome.mlp.mlp.inputs();
    let mut head_matches = 0usize;
    for _ in 0..100 {
        let v: Vec<f64> = (0..inputs).map(|_| rng.gen_range(0.0..1.0)).collect();
        let a: Vec<u64> = outcome.mlp.mlp.predict(&v).expect("head forward").iter().map(|x| x.to_bits()).collect();
        let b: Vec<u64> = head.mlp.predict(&v).expect("head forward").iter().map(|x| x.to_bits()).collect();
        if a == b {
            head_matches += 1;
        }
    }

    check(
        "determinism-round-trip",
        identical_metrics && identical_predictions && model_matches == 100 && head_matches == 100,
        &format!(
            "reruns byte-identical (metrics {identical_metrics}, predictions \
             {identical_predictions}); checkpoint replay bit-identical on {model_matches}/100 \
             segment inputs and {head_matches}/100 head inputs"
        ),
    );
}
