//! Acceptance run: one PASS/FAIL line per headline criterion. Exits non-zero
//! when any criterion fails.

use std::time::{Duration, Instant};

use mebnn_core::flops::{count_flops, exit_cost_table, multi_exit_cost, reduction_rate, single_exit_cost};
use mebnn_core::mapper::{estimate, plan, simulate, DeviceProfile, ReusePolicy, Strategy};
use mebnn_core::metrics::ece;
use mebnn_core::netir::{
    FixedPointFormat, GraphBuilder, LayerKind, LayerNode, NetworkGraph, QuantScope, TensorShape, Weights,
};
use mebnn_core::pipeline::{run_pipeline, PipelineConfig};
use mebnn_core::rng::Rng;
use mebnn_core::runtime::{apply_fixed_point, confidence_exit, mcd_layer, Engine, ExitMode, InferenceOptions, Tensor};
use mebnn_core::samples;
use mebnn_core::trainer::{
    evaluate, loss_and_gradients, loss_with_masks, train, Dataset, Generator, SyntheticDataset, TrainConfig,
};
use mebnn_core::transform::{annotate_quantization, insert_exits, insert_mcd, ExitPolicy, McdPolicy};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn run(name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let mut o = f();
    let took = start.elapsed();
    if let Some(limit) = limit {
        if took > limit {
            o.passed = false;
            o.detail.push_str(&format!("; exceeded {:.0?} limit", limit));
        }
    }
    let tag = if o.passed { "PASS" } else { "FAIL" };
    println!("{tag}  {name:<28} {} [{:.2?}]", o.detail, took);
    o.passed
}

fn flop_identity() -> Outcome {
    let mains = [
        1u64,
        7,
        64,
        1_000,
        4_096,
        12_345,
        99_991,
        1 << 20,
        3_000_000,
        987_654_321,
    ];
    let exits = [1u64, 2, 13, 100, 555, 2_048, 10_007, 65_536, 400_000, 1 << 30];
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &main in &mains {
        for &exit in &exits {
            for n_exit in 1..=8u64 {
                for k in 1..=10u64 {
                    let n_sample = n_exit * k;
                    let se = single_exit_cost(main, exit, n_sample) as f64;
                    let me = multi_exit_cost(main, exit, n_sample, n_exit).expect("divisible") as f64;
                    let rate = reduction_rate(exit as f64 / main as f64, n_sample, n_exit);
                    worst = worst.max((rate * me - se).abs() / se);
                    cases += 1;
                }
            }
        }
    }
    outcome(worst <= 1e-12, format!("{cases} cases, max relative error {worst:.2e}"))
}

fn worked_ratio() -> Outcome {
    let rate = reduction_rate(0.5, 6, 3);
    // main 2, exit 1: six single-exit passes vs one body and two exit passes
    let oracle = single_exit_cost(2, 1, 6) as f64 / multi_exit_cost(2, 1, 6, 3).expect("divisible") as f64;
    outcome(
        rate == 4.5 && oracle == 4.5,
        format!("rate {rate}, ratio oracle {oracle}"),
    )
}

/// Counts multiply-adds by walking every output element and kernel tap.
fn brute_force_flops(node: &LayerNode) -> u64 {
    let (input, output) = (node.input_shape.expect("shaped"), node.output_shape.expect("shaped"));
    match node.kind {
        LayerKind::Input => 0,
        LayerKind::Conv2D { kernel, .. } => {
            let mut n = 0;
            for _ in 0..output.numel() {
                for _ in 0..input.channels {
                    for _ in 0..kernel * kernel {
                        n += 2;
                    }
                }
            }
            n
        }
        LayerKind::Dense { .. } => {
            let mut n = 0;
            for _ in 0..output.numel() {
                for _ in 0..input.numel() {
                    n += 2;
                }
            }
            n
        }
        _ => (0..output.numel()).map(|_| 1u64).sum(),
    }
}

fn flop_recount() -> Outcome {
    let mut rng = Rng::new(2024);
    for i in 0..100 {
        let g = samples::random_bayesian(&mut rng);
        let r = count_flops(&g).expect("shaped");
        let (mut main, mut exit) = (0, 0);
        for n in g.nodes() {
            let f = brute_force_flops(n);
            if r.per_layer[&n.id] != f {
                return outcome(false, format!("graph {i} node {}: {} vs {f}", n.id, r.per_layer[&n.id]));
            }
            if n.exit_branch || n.kind.is_exit() {
                exit += f;
            } else {
                main += f;
            }
        }
        if (main, exit) != (r.flop_main, r.flop_exit) {
            return outcome(false, format!("graph {i}: totals differ"));
        }
    }
    outcome(true, "100 random graphs, per-layer and totals equal")
}

fn dropout_semantics() -> Outcome {
    let n = 100_000;
    let ones = Tensor::filled(TensorShape::vector(n), 1.0);
    let mut notes = Vec::new();
    let mut ok = true;
    for (i, p) in [0.875, 0.75, 0.625, 0.5].into_iter().enumerate() {
        let seed = 100 + i as u64;
        let a = mcd_layer(
            &ones,
            p,
            &mut Rng::new(seed),
            mebnn_core::netir::Granularity::ElementWise,
        );
        let b = mcd_layer(
            &ones,
            p,
            &mut Rng::new(seed),
            mebnn_core::netir::Granularity::ElementWise,
        );
        let same = a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits());
        let drop = a.data.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let mean = a.data.iter().sum::<f64>() / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let z_drop = (drop - (1.0 - p)) / sigma;
        let z_mean = (mean - p * p) / (p * sigma);
        ok &= same && z_drop.abs() <= 4.0 && z_mean.abs() <= 4.0;
        notes.push(format!("p={p}: z_drop {z_drop:+.2} z_mean {z_mean:+.2}"));
    }
    outcome(ok, format!("{}; masks bit-identical", notes.join(", ")))
}

fn mapper_oracle() -> Outcome {
    let mut rng = Rng::new(77);
    let dev = DeviceProfile::unlimited();
    let mut strategies = [0usize; 3];
    for i in 0..600 {
        let (g, p) = samples::random_mapping(&mut rng);
        strategies[match p.strategy {
            Strategy::Spatial => 0,
            Strategy::Temporal => 1,
            Strategy::Mixed(_) => 2,
        }] += 1;
        let a = estimate(&p, &g, &dev).expect("valid plan").latency_cycles;
        let s = simulate(&p, &g, &dev).expect("valid plan").latency_cycles;
        if a != s {
            return outcome(false, format!("plan {i}: estimate {a} vs simulated {s}"));
        }
    }
    outcome(
        true,
        format!(
            "600 plans (spatial {}, temporal {}, mixed {}) agree exactly",
            strategies[0], strategies[1], strategies[2]
        ),
    )
}

fn mapping_trend() -> Outcome {
    let g = samples::lenet_three_exit();
    let dev = DeviceProfile::unlimited();
    let samples_grid = [3usize, 6, 12, 24];
    let est = |n: usize, s: Strategy| {
        let p = plan(&g, n, s, &ReusePolicy::default()).expect("divisible");
        (p.n_pass as i64, estimate(&p, &g, &dev).expect("valid plan"))
    };
    let spatial: Vec<u64> = samples_grid
        .iter()
        .map(|&n| est(n, Strategy::Spatial).1.bayesian_cycles)
        .collect();
    let spread = spatial.iter().max().unwrap() - spatial.iter().min().unwrap();
    let temporal: Vec<(i64, i64)> = samples_grid
        .iter()
        .map(|&n| {
            let (x, e) = est(n, Strategy::Temporal);
            (x, e.latency_cycles as i64)
        })
        .collect();
    // exact affine check in integers, then the least-squares R^2
    let (x0, y0) = temporal[0];
    let (x1, y1) = temporal[temporal.len() - 1];
    let affine = temporal
        .iter()
        .all(|&(x, y)| (y - y0) * (x1 - x0) == (y1 - y0) * (x - x0));
    let n = temporal.len() as f64;
    let mx = temporal.iter().map(|t| t.0 as f64).sum::<f64>() / n;
    let my = temporal.iter().map(|t| t.1 as f64).sum::<f64>() / n;
    let sxy: f64 = temporal.iter().map(|t| (t.0 as f64 - mx) * (t.1 as f64 - my)).sum();
    let sxx: f64 = temporal.iter().map(|t| (t.0 as f64 - mx).powi(2)).sum();
    let syy: f64 = temporal.iter().map(|t| (t.1 as f64 - my).powi(2)).sum();
    let r2 = sxy * sxy / (sxx * syy);
    outcome(
        spread == 0 && affine,
        format!(
            "spatial bayesian cycles {spatial:?} (spread {spread}); temporal {:?} affine {affine}, R^2 {r2}",
            temporal.iter().map(|t| t.1).collect::<Vec<_>>()
        ),
    )
}

struct ToyRun {
    se_acc: f64,
    se_ece: f64,
    me_acc: f64,
    me_ece: f64,
    keep: f64,
    trained: NetworkGraph,
    data: Dataset,
}

const TOY_SAMPLES: usize = 30;

fn toy_run(seed: u64) -> ToyRun {
    let data = SyntheticDataset::new(
        Generator::GaussianBlobs {
            classes: 4,
            dims: 8,
            spread: 1.0,
        },
        2000,
        500,
        1000,
        seed,
    )
    .generate();
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let base = samples::mlp("blobs", 8, &[32, 32], 4);
    let se = train(&base, &data, &cfg).expect("trains").graph;
    let se_report = evaluate(&se, &data.test, 1, seed).expect("evaluates");

    let anchors = samples::mlp_hidden_outputs(&base);
    let me = insert_exits(&base, &ExitPolicy::ExplicitIds(anchors)).expect("hidden anchors");
    let mut best: Option<(f64, f64, NetworkGraph)> = None;
    for keep in [0.875, 0.75, 0.625, 0.5] {
        let g = insert_mcd(&me, &McdPolicy::new(1, keep)).expect("one layer per exit");
        let trained = train(&g, &data, &cfg).expect("trains").graph;
        let val = evaluate(&trained, &data.val, TOY_SAMPLES, seed)
            .expect("evaluates")
            .ensemble()
            .ece;
        if best.as_ref().is_none_or(|b| val < b.0) {
            best = Some((val, keep, trained));
        }
    }
    let (_, keep, trained) = best.expect("nonempty grid");
    let report = evaluate(&trained, &data.test, TOY_SAMPLES, seed).expect("evaluates");
    ToyRun {
        se_acc: se_report.ensemble().accuracy,
        se_ece: se_report.ensemble().ece,
        me_acc: report.ensemble().accuracy,
        me_ece: report.ensemble().ece,
        keep,
        trained,
        data,
    }
}

fn calibration_trend(runs: &[ToyRun]) -> Outcome {
    let ece_wins = runs.iter().filter(|r| r.me_ece <= r.se_ece).count();
    let acc_ok = runs.iter().filter(|r| r.me_acc >= r.se_acc - 0.01).count();
    let rows: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "keep {} ece {:.4}/{:.4} acc {:.3}/{:.3}",
                r.keep, r.me_ece, r.se_ece, r.me_acc, r.se_acc
            )
        })
        .collect();
    outcome(
        ece_wins >= 4 && acc_ok >= 4,
        format!(
            "ece wins {ece_wins}/5, accuracy held {acc_ok}/5 (ours/single-exit: {})",
            rows.join("; ")
        ),
    )
}

fn gradient_check() -> Outcome {
    let base = samples::mlp("g", 5, &[7, 6], 3);
    let me = insert_exits(&base, &ExitPolicy::ExplicitIds(samples::mlp_hidden_outputs(&base))).expect("anchors");
    let mut g = insert_mcd(&me, &McdPolicy::new(1, 0.75)).expect("fits");
    g.initialize_weights(31, true).expect("fresh");
    let engine = Engine::new(&g, InferenceOptions::default()).expect("valid");
    let masks = engine.draw_masks(&mut Rng::new(9));
    let dropped = masks.iter().flatten().filter(|&&m| m == 0.0).count();
    let x = Tensor::vector(vec![0.3, -0.8, 0.55, 1.2, -0.1]);
    let label = 2;
    let (_, grads) = loss_and_gradients(&g, &x, label, &masks).expect("valid");
    let eps = 1e-4;
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (id, gr) in &grads {
        let w = g.node(*id).unwrap().weights.clone().unwrap();
        let analytic: Vec<f64> = gr.kernel.iter().chain(&gr.bias).copied().collect();
        for (i, &a) in analytic.iter().enumerate() {
            let probe = |delta: f64| {
                let mut wp: Weights = w.clone();
                if i < wp.kernel.len() {
                    wp.kernel[i] += delta;
                } else {
                    wp.bias[i - w.kernel.len()] += delta;
                }
                let mut p = g.clone();
                p.set_weights(*id, wp).expect("same size");
                loss_with_masks(&p, &x, label, &masks).expect("valid")
            };
            let numeric = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let scale = numeric.abs().max(a.abs());
            if scale > 1e-7 {
                worst = worst.max((numeric - a).abs() / scale);
            }
            checked += 1;
        }
    }
    outcome(
        worst <= 1e-4 && dropped > 0,
        format!("{checked} parameters, {dropped} dropped units held fixed, max relative error {worst:.2e}"),
    )
}

fn ece_hand_case() -> Outcome {
    let probs = vec![vec![0.95, 0.05], vec![0.95, 0.05], vec![0.65, 0.35], vec![0.55, 0.45]];
    let r = ece(&probs, &[0, 1, 0, 0], 10).expect("valid");
    outcome(r.ece == 0.425, format!("ece {}", r.ece))
}

/// Three exits over a 10-class problem with every weight zero: each exit
/// outputs the uniform distribution.
fn uniform_net() -> NetworkGraph {
    let mut b = GraphBuilder::new("uniform", 10, TensorShape::vector(6));
    b.push(LayerKind::Dense { out_features: 8 });
    b.push(LayerKind::ReLU);
    b.push(LayerKind::Dense { out_features: 8 });
    b.push(LayerKind::ReLU);
    b.push(LayerKind::Dense { out_features: 10 });
    b.push_exit();
    let base = b.build().expect("valid");
    let me = insert_exits(&base, &ExitPolicy::ExplicitIds(samples::mlp_hidden_outputs(&base))).expect("anchors");
    let mut g = insert_mcd(&me, &McdPolicy::new(1, 0.5)).expect("fits");
    let ids: Vec<_> = g
        .nodes()
        .iter()
        .filter(|n| n.kind.is_weighted())
        .map(|n| n.id)
        .collect();
    for id in ids {
        let (k, bias) = g.node(id).unwrap().weight_lens().unwrap();
        g.set_weights(
            id,
            Weights {
                kernel: vec![0.0; k],
                bias: vec![0.0; bias],
            },
        )
        .expect("sizes match");
    }
    g
}

fn confidence_exiting() -> Outcome {
    let mut rng = Rng::new(5);
    let mut trained = samples::mlp("c", 6, &[8, 8], 10);
    let me = insert_exits(
        &trained,
        &ExitPolicy::ExplicitIds(samples::mlp_hidden_outputs(&trained)),
    )
    .expect("anchors");
    trained = insert_mcd(&me, &McdPolicy::new(1, 0.75)).expect("fits");
    trained.initialize_weights(3, true).expect("fresh");
    let uniform = uniform_net();
    let inputs: Vec<Tensor> = (0..200)
        .map(|_| Tensor::vector((0..6).map(|_| rng.uniform(-2.0, 2.0)).collect()))
        .collect();
    let n_sample = 6;
    let table = exit_cost_table(&trained, (n_sample / 3) as u64).expect("shaped");

    let mut all_first = true;
    let mut all_last = true;
    let (mut spent, mut oracle) = (0u64, 0u64);
    let mut reached = [0usize; 3];
    for (i, x) in inputs.iter().enumerate() {
        for mode in [ExitMode::PerExit, ExitMode::CumulativeEnsemble] {
            let low = confidence_exit(&trained, x, 1e-12, mode, n_sample, i as u64).expect("valid");
            all_first &= low.exit == 0 && low.flops_spent == table[0];
            let high = confidence_exit(&uniform, x, 0.999, mode, n_sample, i as u64).expect("valid");
            all_last &= high.exit == 2;
            let mid = confidence_exit(&trained, x, 0.2, mode, n_sample, i as u64).expect("valid");
            spent += mid.flops_spent;
            oracle += table[mid.exit];
            reached[mid.exit] += 1;
        }
    }
    outcome(
        all_first && all_last && spent == oracle,
        format!(
            "threshold 1e-12 -> exit 1: {all_first}; uniform net at 0.999 -> final exit: {all_last}; \
             expected FLOPs {} = oracle {} (exits reached {reached:?})",
            spent as f64 / 400.0,
            oracle as f64 / 400.0
        ),
    )
}

fn pipeline_determinism() -> Outcome {
    let base = samples::mlp("blobs", 8, &[16, 16], 4);
    let cfg = PipelineConfig::quick();
    let a = run_pipeline(&base, &cfg, 7).expect("pipeline runs");
    let b = run_pipeline(&base, &cfg, 7).expect("pipeline runs");
    let same = a.plan_document == b.plan_document && a.results_csv == b.results_csv && a.hw_csv == b.hw_csv;
    outcome(
        same,
        format!(
            "plan {} bytes, results {} rows, hw {} rows identical across runs",
            a.plan_document.len(),
            a.results_csv.lines().count() - 1,
            a.hw_csv.lines().count() - 1
        ),
    )
}

fn quantization(run: &ToyRun) -> Outcome {
    let fmt = FixedPointFormat::with_total_bits(16).expect("supported");
    let q = annotate_quantization(&run.trained, fmt, QuantScope::Both);
    let full = evaluate(&run.trained, &run.data.test, TOY_SAMPLES, 1)
        .expect("evaluates")
        .ensemble()
        .accuracy;
    let fixed = evaluate(&q, &run.data.test, TOY_SAMPLES, 1)
        .expect("evaluates")
        .ensemble()
        .accuracy;
    let mut rng = Rng::new(99);
    let formats: Vec<FixedPointFormat> = [4u8, 6, 8, 16, 32]
        .iter()
        .flat_map(|&b| (1..=b.min(12)).map(move |i| FixedPointFormat::new(b, i, true).expect("valid")))
        .collect();
    let mut idempotent = true;
    for i in 0..1_000_000 {
        let f = formats[i % formats.len()];
        let x = rng.uniform(-5000.0, 5000.0) * if i % 3 == 0 { 1e-3 } else { 1.0 };
        let once = apply_fixed_point(x, f);
        idempotent &= apply_fixed_point(once, f).to_bits() == once.to_bits();
    }
    let delta = (fixed - full).abs();
    outcome(
        delta <= 0.01 && idempotent,
        format!("16-bit accuracy {fixed:.4} vs {full:.4} (delta {delta:.4}); idempotent on 1e6 values: {idempotent}"),
    )
}

fn main() {
    let secs = |s| Some(Duration::from_secs(s));
    let mut all = true;
    all &= run("flop_reduction_identity", secs(1), flop_identity);
    all &= run("worked_reduction_point", None, worked_ratio);
    all &= run("flop_brute_force_recount", secs(10), flop_recount);
    all &= run("dropout_semantics", secs(5), dropout_semantics);
    all &= run("mapper_simulation_oracle", secs(30), mapper_oracle);
    all &= run("mapping_latency_trend", None, mapping_trend);
    let start = Instant::now();
    let runs: Vec<ToyRun> = (1..=5).map(toy_run).collect();
    let toy_time = start.elapsed();
    all &= run("calibration_trend", None, || {
        let mut o = calibration_trend(&runs);
        if toy_time > Duration::from_secs(300) {
            o.passed = false;
        }
        o.detail.push_str(&format!("; training and evaluation {toy_time:.1?}"));
        o
    });
    all &= run("gradient_check", secs(10), gradient_check);
    all &= run("ece_hand_case", None, ece_hand_case);
    all &= run("confidence_exiting", secs(5), confidence_exiting);
    all &= run("pipeline_determinism", None, pipeline_determinism);
    all &= run("fixed_point_16bit", None, || quantization(&runs[0]));
    if !all {
        std::process::exit(1);
    }
}
