//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs without the libtest harness; the process exits non-zero if any
//! criterion fails.

use std::collections::HashSet;
use std::fs;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use srmil::eval::{
    attention_skew, auc_binary, run_probe, train_and_test, train_and_test_abmil, AttentionStats, ProbeConfig, SkewReport,
    SplitData,
};
use srmil::graph::{
    assign_splits, build_edges, generate_synthetic_dataset, Dataset, PatchBag, SplitFractions, SynthConfig,
};
use srmil::model::{
    classify, decode, encode, prepare_all, AbmilDims, ModelDims, ModelParams, ModelState, PreparedGraph,
};
use srmil::objective::{
    apply_mask, classification_loss, joint_loss, joint_loss_on_tape, recon_loss, sample_mask, LossWeights, MaskPlan,
};
use srmil::rng::{stream, Stream};
use srmil::tensor::{grad_check, Tape, Tensor, TensorId, LAYER_NORM_EPS, LEAKY_SLOPE};
use srmil::train::TrainConfig;
use srmil::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `n` distinct cells of a `side × side` box, offset to include negative coordinates.
fn random_coords(rng: &mut ChaCha8Rng, n: usize, side: i32) -> Vec<[i32; 2]> {
    let mut cells: Vec<[i32; 2]> = (0..side).flat_map(|y| (0..side).map(move |x| [x - side / 2, y - side / 2])).collect();
    cells.shuffle(rng);
    cells.truncate(n);
    cells
}

fn random_bag(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> PatchBag {
    let side = ((2 * n) as f64).sqrt().ceil() as i32 + 1;
    PatchBag {
        bag_id: "random".into(),
        dim,
        features: (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect(),
        coords: random_coords(rng, n, side),
        label: rng.gen_range(0..classes),
        instance_labels: None,
    }
}

// ---------------------------------------------------------------- 1

/// Checks every input of `f` in turn, the others held constant.
fn check_all(inputs: &[Tensor], f: impl Fn(&mut Tape, &[TensorId]) -> Result<TensorId>) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 0..inputs.len() {
        let check = grad_check(
            |tape, x| {
                let ids: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == k { x } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &ids)
            },
            &inputs[k],
            1e-5,
        )
        .unwrap();
        worst = worst.max(check.max_rel_error);
    }
    worst
}

/// Projects `out` onto fixed random weights so every output element matters.
fn project(tape: &mut Tape, out: TensorId, seed: u64) -> Result<TensorId> {
    let shape = tape.value(out).shape().to_vec();
    let w = random(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let w = tape.constant(w);
    let p = tape.mul(out, w)?;
    tape.sum(p)
}

fn primitive_errors(rng: &mut ChaCha8Rng) -> Vec<(&'static str, f64)> {
    let a = random(rng, &[4, 5]);
    let b = random(rng, &[5, 3]);
    let c = random(rng, &[4, 5]);
    let bias = random(rng, &[5]);
    let w4 = random(rng, &[4]);
    let logits = random(rng, &[6]);
    let seg: Arc<[usize]> = Arc::from(vec![0, 0, 1, 2, 2, 2]);
    let gather: Arc<[usize]> = Arc::from(vec![3, 0, 0, 2, 1, 3]);
    let rows_idx: Arc<[usize]> = Arc::from(vec![1, 3]);
    let token = random(rng, &[5]);
    let gain = random(rng, &[5]);
    vec![
        ("matmul", check_all(&[a.clone(), b], |t, x| {
            let y = t.matmul(x[0], x[1])?;
            project(t, y, 1)
        })),
        ("add", check_all(&[a.clone(), c.clone()], |t, x| {
            let y = t.add(x[0], x[1])?;
            project(t, y, 2)
        })),
        ("mul", check_all(&[a.clone(), c.clone()], |t, x| {
            let y = t.mul(x[0], x[1])?;
            project(t, y, 3)
        })),
        ("add_bias", check_all(&[a.clone(), bias.clone()], |t, x| {
            let y = t.add_bias(x[0], x[1])?;
            project(t, y, 4)
        })),
        ("scale", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.scale(x[0], -1.7)?;
            project(t, y, 5)
        })),
        ("scale_rows", check_all(&[a.clone(), w4], |t, x| {
            let y = t.scale_rows(x[0], x[1])?;
            project(t, y, 6)
        })),
        ("reshape", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.reshape(x[0], vec![2, 10])?;
            project(t, y, 7)
        })),
        ("slice_cols", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.slice_cols(x[0], 1, 3)?;
            project(t, y, 8)
        })),
        ("concat_cols", check_all(&[a.clone(), c.clone()], |t, x| {
            let y = t.concat_cols(&[x[0], x[1]])?;
            project(t, y, 9)
        })),
        ("concat_rows", check_all(&[a.clone(), bias.clone()], |t, x| {
            let y = t.concat_rows(&[x[0], x[1]])?;
            project(t, y, 10)
        })),
        ("gather_rows", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.gather_rows(x[0], gather.clone())?;
            project(t, y, 11)
        })),
        ("scatter_add_rows", check_all(&[random(rng, &[6, 5])], |t, x| {
            let y = t.scatter_add_rows(x[0], gather.clone(), 4)?;
            project(t, y, 12)
        })),
        ("segment_softmax", check_all(std::slice::from_ref(&logits), |t, x| {
            let y = t.segment_softmax(x[0], seg.clone())?;
            project(t, y, 13)
        })),
        ("leaky_relu", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.leaky_relu(x[0], LEAKY_SLOPE)?;
            project(t, y, 14)
        })),
        ("elu", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.elu(x[0])?;
            project(t, y, 15)
        })),
        ("tanh", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.tanh(x[0])?;
            project(t, y, 16)
        })),
        ("layer_norm", check_all(&[a.clone(), gain, bias.clone()], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], LAYER_NORM_EPS)?;
            project(t, y, 17)
        })),
        ("row_cosine_distance", check_all(&[a.clone(), c.clone()], |t, x| {
            let y = t.row_cosine_distance(x[0], x[1])?;
            project(t, y, 18)
        })),
        ("cross_entropy", check_all(&[logits], |t, x| t.cross_entropy(x[0], 4))),
        ("sum", check_all(std::slice::from_ref(&a), |t, x| t.sum(x[0]))),
        ("mean", check_all(std::slice::from_ref(&a), |t, x| {
            let y = t.tanh(x[0])?;
            t.mean(y)
        })),
        ("overwrite_rows", check_all(&[a, token], |t, x| {
            let y = t.overwrite_rows(x[0], rows_idx.clone(), x[1])?;
            project(t, y, 19)
        })),
    ]
}

/// The complete training objective with one parameter (or the features) replaced by `x`.
fn joint_objective(
    tape: &mut Tape,
    state: &ModelState,
    graph: &PreparedGraph,
    plan: &MaskPlan,
    target: Option<usize>,
    x: TensorId,
) -> Result<TensorId> {
    let mut k = 0;
    let params: ModelParams<TensorId> = state.params.map(&mut |_, _, t| {
        let id = if target == Some(k) { x } else { tape.constant(t.clone()) };
        k += 1;
        id
    });
    let original = if target.is_none() { x } else { tape.constant(graph.features.clone()) };
    let masked = apply_mask(tape, original, plan, params.mask_token)?;
    let corrupted = encode(tape, &params, &state.dims, masked, &graph.index)?;
    let reconstructed = decode(tape, &params, &state.dims, &corrupted, &graph.index)?;
    let recon = recon_loss(tape, original, reconstructed, plan)?;
    let corr_logits = classify(tape, &params, &corrupted, &graph.index)?;
    let corr = classification_loss(tape, corr_logits, graph.label)?;
    let complete = encode(tape, &params, &state.dims, original, &graph.index)?;
    let comp_logits = classify(tape, &params, &complete, &graph.index)?;
    let comp = classification_loss(tape, comp_logits, graph.label)?;
    Ok(joint_loss_on_tape(tape, recon, comp, corr, &LossWeights::default())?.0)
}

fn gradient_correctness() -> Outcome {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let prims = primitive_errors(&mut rng);
    let (worst_prim, prim_err) = prims
        .iter()
        .copied()
        .fold(("", 0.0), |acc, (n, e)| if e > acc.1 { (n, e) } else { acc });

    let dims = ModelDims {
        input_dim: 16,
        hidden: 8,
        heads: 2,
        layers: 2,
        classes: 2,
        classifier_hidden: 8,
    };
    let state = ModelState::init(dims, 7).unwrap();
    let graph = PreparedGraph::from_bag(&random_bag(&mut rng, 12, 16, 2)).unwrap();
    let plan = sample_mask(12, 0.5, &mut rng).unwrap();
    let leaves = state.params.flatten();
    let mut joint_err: f64 = 0.0;
    for (k, leaf) in leaves.iter().enumerate() {
        let check = grad_check(|t, x| joint_objective(t, &state, &graph, &plan, Some(k), x), leaf, 1e-5).unwrap();
        joint_err = joint_err.max(check.max_rel_error);
    }
    let check = grad_check(|t, x| joint_objective(t, &state, &graph, &plan, None, x), &graph.features, 1e-5).unwrap();
    joint_err = joint_err.max(check.max_rel_error);
    let secs = started.elapsed().as_secs_f64();
    outcome(
        prim_err <= 1e-4 && joint_err <= 1e-4 && secs < 60.0,
        format!(
            "{} primitives max rel err {prim_err:.2e} ({worst_prim}); joint loss over {} tensors {joint_err:.2e}; {secs:.1}s",
            prims.len(),
            leaves.len() + 1
        ),
    )
}

// ---------------------------------------------------------------- 2

fn attention_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let dims = ModelDims {
        input_dim: 8,
        hidden: 16,
        heads: 4,
        layers: 2,
        classes: 2,
        classifier_hidden: 8,
    };
    let state = ModelState::init(dims, 3).unwrap();
    let mut worst: f64 = 0.0;
    let mut segments = 0usize;
    for _ in 0..100 {
        let n = rng.gen_range(1..=300);
        let g = PreparedGraph::from_bag(&random_bag(&mut rng, n, 8, 2)).unwrap();
        let mut tape = Tape::new();
        let p = state.bind(&mut tape, false);
        let f = tape.constant(g.features.clone());
        let enc = encode(&mut tape, &p, &state.dims, f, &g.index).unwrap();
        for head in enc.attention.iter().flatten() {
            let mut sums = vec![0.0; g.index.num_nodes()];
            for (e, &a) in tape.value(*head).data().iter().enumerate() {
                sums[g.index.dst[e]] += a;
            }
            segments += sums.len();
            worst = sums.iter().fold(worst, |w, s| w.max((s - 1.0).abs()));
        }
    }
    outcome(worst <= 1e-9, format!("{segments} segments, max |sum − 1| = {worst:.2e}"))
}

// ---------------------------------------------------------------- 3

fn graph_construction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=120);
        let side = rng.gen_range(((n as f64).sqrt().ceil() as i32).max(1)..=24);
        let coords = random_coords(&mut rng, n, side);
        let mut fast = build_edges(&coords).unwrap();
        let mut brute = Vec::new();
        for (i, a) in coords.iter().enumerate() {
            for (j, b) in coords.iter().enumerate() {
                let d2 = (a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2);
                if i != j && d2 <= 8 {
                    brute.push((j, i));
                }
            }
        }
        fast.sort_unstable();
        brute.sort_unstable();
        mismatches += usize::from(fast != brute);
    }
    let side = 15;
    let grid: Vec<[i32; 2]> = (0..side).flat_map(|y| (0..side).map(move |x| [x, y])).collect();
    let edges = build_edges(&grid).unwrap();
    let mut degree = vec![0usize; grid.len()];
    for &(_, i) in &edges {
        degree[i] += 1;
    }
    let interior: HashSet<usize> = grid
        .iter()
        .enumerate()
        .filter(|(_, c)| (2..side - 2).contains(&c[0]) && (2..side - 2).contains(&c[1]))
        .map(|(i, _)| i)
        .collect();
    let bad_degree = interior.iter().filter(|&&i| degree[i] != 24).count();
    outcome(
        mismatches == 0 && bad_degree == 0,
        format!(
            "{mismatches}/1000 edge sets differ from brute force; {bad_degree}/{} interior nodes without degree 24",
            interior.len()
        ),
    )
}

// ---------------------------------------------------------------- 4

fn masking_distribution() -> Outcome {
    let mut rng = stream(404, Stream::Mask);
    let mut freq = [0usize; 20];
    let mut wrong_count = 0;
    for _ in 0..10_000 {
        let plan = sample_mask(20, 0.7, &mut rng).unwrap();
        wrong_count += usize::from(plan.len() != 14);
        for &i in plan.indices() {
            freq[i] += 1;
        }
    }
    let rates: Vec<f64> = freq.iter().map(|&c| c as f64 / 10_000.0).collect();
    let worst = rates.iter().fold(0.0f64, |w, r| w.max((r - 0.7).abs()));
    outcome(
        wrong_count == 0 && worst <= 0.02,
        format!("{wrong_count} draws with a count other than 14; max |freq − 0.7| = {worst:.4}"),
    )
}

// ---------------------------------------------------------------- 5

fn recon_value(original: &Tensor, recon: &Tensor, plan: &MaskPlan) -> f64 {
    let mut tape = Tape::new();
    let o = tape.constant(original.clone());
    let r = tape.constant(recon.clone());
    let l = recon_loss(&mut tape, o, r, plan).unwrap();
    tape.value(l).item()
}

fn loss_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let (mut perfect, mut scale_gap, mut max_loss, mut sum_gap): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for _ in 0..500 {
        let n = rng.gen_range(2..40);
        let x = random(&mut rng, &[n, 16]);
        let plan = sample_mask(n, 0.7, &mut rng).unwrap();
        perfect = perfect.max(recon_value(&x, &x, &plan).abs());

        let r = random(&mut rng, &[n, 16]);
        let mut scaled = r.clone();
        for i in 0..n {
            let s = rng.gen_range(1e-3..1e3);
            scaled.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        scale_gap = scale_gap.max((recon_value(&x, &r, &plan) - recon_value(&x, &scaled, &plan)).abs());
        max_loss = max_loss.max(recon_value(&x, &r, &plan));
        max_loss = max_loss.max(recon_value(&x, &x.map(|v| -v), &plan));

        let (rl, cl, kl) = (rng.gen_range(0.0..2.0), rng.gen_range(0.0..5.0), rng.gen_range(0.0..5.0));
        let w = LossWeights::default();
        let b = joint_loss(rl, cl, kl, &w).unwrap();
        sum_gap = sum_gap.max((b.total - (1.8 * rl + 0.1 * cl + 0.1 * kl)).abs());
        let mut tape = Tape::new();
        let ids = [rl, cl, kl].map(|v| tape.constant(Tensor::scalar(v)));
        let (total, _) = joint_loss_on_tape(&mut tape, ids[0], ids[1], ids[2], &w).unwrap();
        sum_gap = sum_gap.max((tape.value(total).item() - (1.8 * rl + 0.1 * cl + 0.1 * kl)).abs());
    }
    outcome(
        perfect <= 1e-12 && scale_gap <= 1e-12 && max_loss <= 2.0 && sum_gap <= 1e-12,
        format!(
            "perfect {perfect:.1e}, scale gap {scale_gap:.1e}, max loss {max_loss:.6}, weighted-sum gap {sum_gap:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 6

fn auc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let mut mismatches = 0;
    for _ in 0..50 {
        let levels = rng.gen_range(2..50u32);
        let scores: Vec<f64> = (0..1000).map(|_| f64::from(rng.gen_range(0..levels)) / f64::from(levels)).collect();
        let labels: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.35)).collect();
        let (mut twice, mut pairs) = (0u64, 0u64);
        for (i, &p) in labels.iter().enumerate() {
            for (j, &q) in labels.iter().enumerate() {
                if p && !q {
                    pairs += 1;
                    twice += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        let brute = twice as f64 / (2 * pairs) as f64;
        mismatches += usize::from(auc_binary(&scores, &labels).unwrap() != brute);
    }
    outcome(mismatches == 0, format!("{mismatches}/50 inputs of 1000 samples differ from pair counting"))
}

// ---------------------------------------------------------------- 7–10

/// Benchmark data: the default generator with the default 60/15/25 split.
fn benchmark_data() -> SplitData {
    let bags = generate_synthetic_dataset(&SynthConfig::default(), 0).unwrap();
    let splits = assign_splits(bags.len(), &SplitFractions::default(), &mut stream(0, Stream::Split)).unwrap();
    SplitData::from_dataset(&Dataset::from_assignment(bags, &splits).unwrap()).unwrap()
}

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn bench_dims() -> ModelDims {
    ModelDims {
        input_dim: 16,
        hidden: 32,
        heads: 4,
        layers: 2,
        classes: 2,
        classifier_hidden: 32,
    }
}

fn bench_train(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-4,
        epochs: 40,
        seed,
        ..TrainConfig::default()
    }
}

fn abmil_dims() -> AbmilDims {
    AbmilDims {
        input_dim: 16,
        hidden: 32,
        attention_dim: 16,
        classes: 2,
    }
}

struct Benchmark {
    full: Vec<f64>,
    comp_only: Vec<f64>,
    comp_corr: Vec<f64>,
    ratio_zero: Vec<f64>,
    /// Attention maxima of the first seed's models on the test bags.
    skew: Option<SkewReport>,
    probe_recall: Vec<(f64, f64)>,
    seconds: f64,
}

fn run_benchmark() -> Benchmark {
    let started = Instant::now();
    let data = benchmark_data();
    let acc = |cfg: TrainConfig| train_and_test(&data, bench_dims(), &cfg).unwrap().2.accuracy;
    let base = LossWeights::default();
    let mut b = Benchmark {
        full: Vec::new(),
        comp_only: Vec::new(),
        comp_corr: Vec::new(),
        ratio_zero: Vec::new(),
        skew: None,
        probe_recall: Vec::new(),
        seconds: 0.0,
    };
    for seed in SEEDS {
        let (srmil, _, report) = train_and_test(&data, bench_dims(), &bench_train(seed)).unwrap();
        b.full.push(report.accuracy);
        let (abmil, _, _) = train_and_test_abmil(&data, abmil_dims(), &bench_train(seed)).unwrap();
        let rows = run_probe(&data, &srmil, &abmil, &ProbeConfig::default(), seed).unwrap();
        let recall = |name: &str| rows.iter().find(|r| r.source == name).unwrap().metrics.recall;
        b.probe_recall.push((recall("srmil"), recall("raw")));
        if b.skew.is_none() {
            b.skew = Some(attention_skew(&data.test, &srmil, &abmil).unwrap());
        }
        let comp_only = LossWeights { recon: 0.0, corr: 0.0, ..base };
        b.comp_only.push(acc(TrainConfig { loss_weights: comp_only, ..bench_train(seed) }));
        let comp_corr = LossWeights { recon: 0.0, ..base };
        b.comp_corr.push(acc(TrainConfig { loss_weights: comp_corr, ..bench_train(seed) }));
        b.ratio_zero.push(acc(TrainConfig { mask_ratio: 0.0, ..bench_train(seed) }));
        eprintln!("  benchmark seed {seed} done after {:.0}s", started.elapsed().as_secs_f64());
    }
    b.seconds = started.elapsed().as_secs_f64();
    b
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fmt(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(" ")
}

fn ablation_direction(b: &Benchmark) -> Outcome {
    let wins = b.full.iter().zip(&b.comp_only).filter(|(f, c)| f >= c).count();
    let (mf, mc) = (mean(&b.full), mean(&b.comp_only));
    outcome(
        mf >= mc && wins >= 4 && b.seconds <= 7200.0,
        format!(
            "full {mf:.3} [{}] vs comp-only {mc:.3} [{}]; full ≥ comp-only in {wins}/5 seeds",
            fmt(&b.full),
            fmt(&b.comp_only)
        ),
    )
}

fn ratio_zero_equivalence(b: &Benchmark) -> Outcome {
    let gap = (mean(&b.ratio_zero) - mean(&b.comp_corr)).abs();
    outcome(
        gap <= 0.02,
        format!(
            "ratio 0 {:.3} [{}] vs comp+corr {:.3} [{}]; |Δ| = {gap:.3}",
            mean(&b.ratio_zero),
            fmt(&b.ratio_zero),
            mean(&b.comp_corr),
            fmt(&b.comp_corr)
        ),
    )
}

fn histogram_line(s: &AttentionStats) -> String {
    s.histogram.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn skew_direction(b: &Benchmark) -> Outcome {
    let skew = b.skew.as_ref().expect("benchmark ran");
    let (a, s) = (&skew.abmil, &skew.srmil);
    println!("         abmil max-attention histogram (20 bins over [0,1]): {}", histogram_line(a));
    println!("         srmil max-attention histogram (20 bins over [0,1]): {}", histogram_line(s));
    outcome(
        a.median_max > s.median_max,
        format!("median max attention abmil {:.4} vs srmil {:.4}", a.median_max, s.median_max),
    )
}

fn probe_direction(b: &Benchmark) -> Outcome {
    let ok = b.probe_recall.iter().filter(|(s, r)| s >= r).count();
    let per_seed: Vec<String> = b.probe_recall.iter().map(|(s, r)| format!("{s:.3}/{r:.3}")).collect();
    outcome(
        ok == SEEDS.len(),
        format!("srmil/raw instance recall per seed: {}; srmil ≥ raw in {ok}/5", per_seed.join(" ")),
    )
}

// ---------------------------------------------------------------- 11

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let cfg = root.path().join("run.toml");
    let data = root.path().join("data");
    fs::write(
        &cfg,
        format!(
            "seed = 11\nmanifest = {:?}\n[synth]\nn_bags = 12\ngrid_side = 16\nmean_nodes = 60\nnode_jitter = 10\n\
             [model]\nhidden = 16\nheads = 4\nclassifier_hidden = 16\n[train]\nepochs = 3\nlr = 1e-3\n",
            data.join("manifest.jsonl").to_str().unwrap()
        ),
    )
    .unwrap();
    let cli = |args: &[&str]| srmil::cli::run(std::iter::once("srmil").chain(args.iter().copied()));
    let c = cfg.to_str().unwrap();
    if cli(&["synth", "--config", c, "--out", data.to_str().unwrap()]) != 0 {
        return outcome(false, "synth failed");
    }
    let runs = [root.path().join("a"), root.path().join("b")];
    for dir in &runs {
        if cli(&["train", "--config", c, "--out", dir.to_str().unwrap()]) != 0 {
            return outcome(false, "train failed");
        }
    }
    let same = |f: &str| fs::read(runs[0].join(f)).unwrap() == fs::read(runs[1].join(f)).unwrap();
    let (log, ckpt) = (same(srmil::cli::LOG), same(srmil::cli::CHECKPOINT));
    outcome(log && ckpt, format!("identical log: {log}; identical checkpoint: {ckpt}"))
}

// ---------------------------------------------------------------- 12

fn permute_bag(bag: &PatchBag, perm: &[usize]) -> PatchBag {
    let d = bag.dim;
    PatchBag {
        features: perm.iter().flat_map(|&i| bag.features[i * d..(i + 1) * d].iter().copied()).collect(),
        coords: perm.iter().map(|&i| bag.coords[i]).collect(),
        instance_labels: bag.instance_labels.as_ref().map(|l| perm.iter().map(|&i| l[i]).collect()),
        ..bag.clone()
    }
}

fn permutation_invariance() -> Outcome {
    let cfg = SynthConfig {
        n_bags: 20,
        ..SynthConfig::default()
    };
    let bags = generate_synthetic_dataset(&cfg, 12).unwrap();
    let state = ModelState::init(bench_dims(), 12).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1212);
    let mut worst: f64 = 0.0;
    for (bag, g) in bags.iter().zip(prepare_all(&bags).unwrap()) {
        let base = state.forward_bag(&g).unwrap().logits;
        for _ in 0..20 {
            let mut perm: Vec<usize> = (0..bag.len()).collect();
            perm.shuffle(&mut rng);
            let p = PreparedGraph::from_bag(&permute_bag(bag, &perm)).unwrap();
            let logits = state.forward_bag(&p).unwrap().logits;
            worst = base.iter().zip(&logits).fold(worst, |w, (a, b)| w.max((a - b).abs()));
        }
    }
    outcome(worst < 1e-9, format!("400 permutations, max |Δ logit| = {worst:.2e}"))
}

fn main() -> ExitCode {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |id: usize, name: &'static str, o: Outcome| {
        println!("{} [{id:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        results.push((id, name, o));
    };
    record(1, "gradient correctness", gradient_correctness());
    record(2, "attention normalization", attention_normalization());
    record(3, "graph construction oracle", graph_construction());
    record(4, "masking distribution", masking_distribution());
    record(5, "loss identities", loss_identities());
    record(6, "AUC oracle", auc_oracle());
    let bench = run_benchmark();
    record(7, "ablation direction", ablation_direction(&bench));
    record(8, "mask-ratio-zero equivalence", ratio_zero_equivalence(&bench));
    record(9, "attention-skew direction", skew_direction(&bench));
    record(10, "KNN probe direction", probe_direction(&bench));
    record(11, "determinism", determinism());
    record(12, "permutation invariance", permutation_invariance());
    let failed: Vec<usize> = results.iter().filter(|r| !r.2.pass).map(|r| r.0).collect();
    println!(
        "acceptance: {}/{} passed (benchmark {:.0}s)",
        results.len() - failed.len(),
        results.len(),
        bench.seconds
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
