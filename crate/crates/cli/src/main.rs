use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use mebnn_core::dse::{exit_policy_for, TAU};
use mebnn_core::flops::{cached_cost, count_flops, exit_cost_table, passes, reduction_rate};
use mebnn_core::mapper::{check_fit, estimate, plan, simulate, DeviceProfile, HwEstimate, ReusePolicy, Strategy};
use mebnn_core::netir::{load_graph, save_graph, FixedPointFormat, Granularity, NetworkGraph, QuantScope};
use mebnn_core::pipeline::{run_pipeline, PipelineConfig};
use mebnn_core::plan_doc::{emit_plan, HardwarePlan};
use mebnn_core::runtime::{confidence_exit, ensemble, forward_mc, read_bten, write_bten, ExitMode};
use mebnn_core::trainer::{evaluate, train, Generator, SyntheticDataset, TrainConfig};
use mebnn_core::transform::{
    annotate_quantization, insert_exits, insert_mcd, scale_channels, ChannelFraction, McdPolicy,
};
use mebnn_core::{samples, selftest};

#[derive(Parser)]
#[command(name = "mebnn", version, about = "Multi-exit Monte-Carlo-dropout network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add exits, dropout layers, channel scaling or quantization to a graph.
    Transform(TransformArgs),
    /// Train a graph on a synthetic dataset.
    Train(TrainArgs),
    /// Monte-Carlo inference on a BTEN tensor batch.
    Infer(InferArgs),
    /// FLOP report.
    Flops(FlopsArgs),
    /// Hardware estimate next to the event simulation.
    Map(MapArgs),
    /// Design-space exploration: search, map and emit the winning plan.
    Dse(DseArgs),
    /// Emit a hardware-plan document.
    Emit(EmitArgs),
    /// Run the built-in invariant checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum GranularityArg {
    Element,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    PerExit,
    Cumulative,
}

impl From<ModeArg> for ExitMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PerExit => ExitMode::PerExit,
            ModeArg::Cumulative => ExitMode::CumulativeEnsemble,
        }
    }
}

#[derive(Args)]
struct TransformArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Total number of exits, the final one included.
    #[arg(long, default_value_t = 1)]
    exits: usize,
    #[arg(long, default_value_t = 0)]
    mcd_layers: usize,
    #[arg(long, default_value_t = 0.75)]
    keep_rate: f64,
    #[arg(long, value_enum, default_value = "element")]
    granularity: GranularityArg,
    /// `1`, `1/2`, `1/4` or `1/8`.
    #[arg(long, value_parser = parse_fraction)]
    channel_fraction: Option<ChannelFraction>,
    /// Fixed-point width for weights and activations; 32 leaves the graph unannotated.
    #[arg(long)]
    bitwidth: Option<u8>,
    /// Initializes missing weights with this seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 0.1)]
    lr: f64,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 2000)]
    n_train: usize,
    #[arg(long, default_value_t = 0)]
    n_val: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 1.0)]
    spread: f64,
    /// Samples used for the test-split evaluation.
    #[arg(long, default_value_t = 6)]
    n_sample: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also writes the test inputs as a BTEN batch.
    #[arg(long)]
    test_inputs: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 6)]
    n_sample: usize,
    /// Confidence threshold for early exiting; without it every exit runs.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "cumulative")]
    mode: ModeArg,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FlopsArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    n_sample: Option<u64>,
    /// Writes the report as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct MappingArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Device profile file, or `zcu102-like` / `unlimited`.
    #[arg(long, default_value = "zcu102-like")]
    device: String,
    #[arg(long, default_value_t = 6)]
    n_sample: usize,
    #[arg(long, default_value = "spatial", value_parser = parse_strategy)]
    strategy: Strategy,
    #[arg(long, default_value_t = 1)]
    reuse: usize,
}

#[derive(Args)]
struct MapArgs {
    #[command(flatten)]
    mapping: MappingArgs,
    /// Re-maps the plan embedded in this document instead of planning anew.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    #[command(flatten)]
    mapping: MappingArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Emits even when the plan exceeds the device.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct DseArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Pipeline configuration (JSON); defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Small grids and datasets, for smoke runs.
    #[arg(long, conflicts_with = "config")]
    quick: bool,
    #[arg(long)]
    device: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force: bool,
    /// Directory for results.csv, hw_candidates.csv, plan.json and graph.json.
    #[arg(long)]
    out: PathBuf,
}

fn parse_strategy(s: &str) -> Result<Strategy, String> {
    s.parse().map_err(|e: mebnn_core::mapper::MapError| e.to_string())
}

fn parse_fraction(s: &str) -> Result<ChannelFraction, String> {
    ChannelFraction::parse(s).ok_or_else(|| format!("`{s}` (expected 1, 1/2, 1/4 or 1/8)"))
}

fn read_graph(path: &Path) -> Result<NetworkGraph> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    load_graph(&text).with_context(|| format!("loading {}", path.display()))
}

fn read_device(name: &str) -> Result<DeviceProfile> {
    match name {
        "zcu102-like" => Ok(samples::zcu102_like()),
        "unlimited" => Ok(DeviceProfile::unlimited()),
        path => {
            let text = fs::read_to_string(path).with_context(|| format!("reading device profile {path}"))?;
            DeviceProfile::from_json(&text).with_context(|| format!("loading device profile {path}"))
        }
    }
}

fn write_out(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn transform(a: TransformArgs) -> Result<()> {
    let mut g = read_graph(&a.graph)?;
    if a.exits > 1 {
        g = insert_exits(&g, &exit_policy_for(&g, a.exits)?)?;
    }
    if a.mcd_layers > 0 {
        let granularity = match a.granularity {
            GranularityArg::Element => Granularity::ElementWise,
            GranularityArg::Channel => Granularity::ChannelWise,
        };
        let policy = McdPolicy {
            granularity,
            ..McdPolicy::new(a.mcd_layers, a.keep_rate)
        };
        g = insert_mcd(&g, &policy)?;
    }
    if let Some(f) = a.channel_fraction {
        g = scale_channels(&g, f)?;
    }
    if let Some(seed) = a.seed {
        g.initialize_weights(seed, false)?;
    }
    if let Some(bits) = a.bitwidth.filter(|&b| b != 32) {
        g = annotate_quantization(&g, FixedPointFormat::with_total_bits(bits)?, QuantScope::Both);
    }
    write_out(a.out.as_deref(), &save_graph(&g))
}

fn blob_dataset(graph: &NetworkGraph, a: &TrainArgs) -> Result<SyntheticDataset> {
    let shape = graph.input_shape();
    if shape.height != 1 || shape.width != 1 {
        bail!(
            "synthetic datasets are vectors; graph `{}` takes {shape} inputs",
            graph.name()
        );
    }
    Ok(SyntheticDataset::new(
        Generator::GaussianBlobs {
            classes: graph.num_classes(),
            dims: shape.channels,
            spread: a.spread,
        },
        a.n_train,
        a.n_val,
        a.n_test,
        a.seed,
    ))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let data = blob_dataset(&g, &a)?.generate();
    let cfg = TrainConfig {
        lr: a.lr,
        batch_size: a.batch_size,
        epochs: a.epochs,
        seed: a.seed,
        ..TrainConfig::default()
    };
    let outcome = train(&g, &data, &cfg)?;
    for (e, l) in outcome.loss_curve.iter().enumerate() {
        eprintln!("epoch {:>3}  loss {l:.6}", e + 1);
    }
    eprintln!("train accuracy {:.4}", outcome.train_accuracy);
    let report = evaluate(&outcome.graph, &data.test, a.n_sample, a.seed)?;
    for (i, r) in report.per_exit.iter().enumerate() {
        eprintln!("exit {} test: accuracy {:.4} ece {:.4}", i + 1, r.accuracy, r.ece);
    }
    eprint!("ensemble test: {}", report.ensemble());
    if let Some(p) = &a.test_inputs {
        fs::write(p, write_bten(&data.test.inputs)?).with_context(|| format!("writing {}", p.display()))?;
    }
    write_out(a.out.as_deref(), &save_graph(&outcome.graph))
}

fn infer(a: InferArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let bytes = fs::read(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let inputs = read_bten(&bytes)?;
    let n_pass = passes(a.n_sample as u64, g.n_exit() as u64)?;
    let full_cost = cached_cost(&g)?.total(n_pass);
    let mut rows = Vec::with_capacity(inputs.len());
    for (i, x) in inputs.iter().enumerate() {
        let seed = mebnn_core::rng::item_seed(a.seed, i as u64);
        let (exit, probs, flops) = match a.threshold {
            Some(t) => {
                let d = confidence_exit(&g, x, t, a.mode.into(), a.n_sample, seed)?;
                (d.exit, d.probs, d.flops_spent)
            }
            None => {
                let pred = forward_mc(&g, x, a.n_sample, seed)?;
                (g.n_exit() - 1, ensemble(&pred, g.n_exit())?, full_cost)
            }
        };
        let class = mebnn_core::metrics::argmax(&probs);
        rows.push(json!({
            "index": i,
            "exit": exit + 1,
            "class": class,
            "confidence": probs[class],
            "probs": probs,
            "flops": flops,
        }));
    }
    let doc = json!({
        "graph": g.name(),
        "n_sample": a.n_sample,
        "seed": a.seed,
        "threshold": a.threshold,
        "predictions": rows,
    });
    write_out(a.out.as_deref(), &format!("{}\n", serde_json::to_string_pretty(&doc)?))
}

fn flops_cmd(a: FlopsArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let report = count_flops(&g)?;
    let cached = cached_cost(&g)?;
    let n_sample = a.n_sample.unwrap_or(g.n_exit() as u64);
    let n_pass = passes(n_sample, g.n_exit() as u64)?;
    let exits = exit_cost_table(&g, n_pass)?;
    let rate = reduction_rate(report.alpha, n_sample, g.n_exit() as u64);

    let mut t = String::new();
    writeln!(t, "{:>4}  {:<16} {:<6} {:>12}", "id", "kind", "part", "flops")?;
    for n in g.nodes() {
        let part = if mebnn_core::flops::is_exit_node(n) {
            "exit"
        } else {
            "main"
        };
        writeln!(
            t,
            "{:>4}  {:<16} {:<6} {:>12}",
            n.id,
            n.kind.name(),
            part,
            report.per_layer[&n.id]
        )?;
    }
    writeln!(
        t,
        "flop_main {}  flop_exit {}  alpha {:.6}",
        report.flop_main, report.flop_exit, report.alpha
    )?;
    writeln!(
        t,
        "cached: non-bayesian {}  bayesian {} per pass",
        cached.non_bayesian, cached.bayesian
    )?;
    writeln!(
        t,
        "n_sample {n_sample}  n_pass {n_pass}  sampling cost {}",
        cached.total(n_pass)
    )?;
    for (i, c) in exits.iter().enumerate() {
        writeln!(t, "stop at exit {}: {c}", i + 1)?;
    }
    writeln!(t, "reduction rate vs single exit: {rate:.6}")?;
    print!("{t}");
    if let Some(p) = &a.out {
        let doc = json!({
            "graph": g.name(),
            "per_layer": report.per_layer,
            "flop_main": report.flop_main,
            "flop_exit": report.flop_exit,
            "alpha": report.alpha,
            "non_bayesian": cached.non_bayesian,
            "bayesian_per_pass": cached.bayesian,
            "n_sample": n_sample,
            "n_pass": n_pass,
            "sampling_cost": cached.total(n_pass),
            "exit_costs": exits,
            "reduction_rate": rate,
        });
        write_out(Some(p), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    }
    Ok(())
}

fn side_by_side(left: (&str, &HwEstimate), right: (&str, &HwEstimate)) -> String {
    let (a, b) = (left.1, right.1);
    let rows: [(&str, String, String); 9] = [
        (
            "latency_cycles",
            a.latency_cycles.to_string(),
            b.latency_cycles.to_string(),
        ),
        (
            "latency_ms",
            format!("{:.6}", a.latency_ms),
            format!("{:.6}", b.latency_ms),
        ),
        (
            "backbone_cycles",
            a.backbone_cycles.to_string(),
            b.backbone_cycles.to_string(),
        ),
        ("clone_cycles", a.clone_cycles.to_string(), b.clone_cycles.to_string()),
        (
            "bayesian_cycles",
            a.bayesian_cycles.to_string(),
            b.bayesian_cycles.to_string(),
        ),
        ("dsp", a.dsp.to_string(), b.dsp.to_string()),
        ("bram_kb", a.bram_kb.to_string(), b.bram_kb.to_string()),
        ("lut", a.lut.to_string(), b.lut.to_string()),
        ("ff", a.ff.to_string(), b.ff.to_string()),
    ];
    let mut t = format!("{:<16} {:>14} {:>14}\n", "", left.0, right.0);
    for (name, l, r) in rows {
        let flag = if l == r { "" } else { "  *" };
        t.push_str(&format!("{name:<16} {l:>14} {r:>14}{flag}\n"));
    }
    t
}

fn map_cmd(a: MapArgs) -> Result<()> {
    let g = read_graph(&a.mapping.graph)?;
    let (p, device, embedded) = match &a.plan {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let doc = HardwarePlan::from_document(&text)?;
            (doc.mapping.clone(), doc.device.clone(), Some(doc))
        }
        None => (
            plan(
                &g,
                a.mapping.n_sample,
                a.mapping.strategy,
                &ReusePolicy::Uniform(a.mapping.reuse),
            )?,
            read_device(&a.mapping.device)?,
            None,
        ),
    };
    let est = estimate(&p, &g, &device)?;
    let sim = simulate(&p, &g, &device)?;
    println!(
        "{} on {}: {} engine(s), {} pass(es)",
        p.strategy,
        device.name,
        p.n_engines(),
        p.n_pass
    );
    print!("{}", side_by_side(("estimate", &est), ("simulated", &sim)));
    let fit = check_fit(&est, &device);
    for v in &fit.violations {
        println!(
            "over budget: {} {} > {} (+{:.1}%)",
            v.resource, v.demand, v.capacity, v.overage_pct
        );
    }
    if let Some(doc) = &embedded {
        print!("{}", side_by_side(("embedded", &doc.estimate), ("re-estimated", &est)));
        doc.verify(&g)?;
        println!("plan verified");
    }
    if let Some(out) = &a.out {
        let doc = json!({ "plan": p, "estimate": est, "simulated": sim, "fits": fit.fits() });
        write_out(Some(out), &format!("{}\n", serde_json::to_string_pretty(&doc)?))?;
    }
    Ok(())
}

fn emit(a: EmitArgs) -> Result<()> {
    let g = read_graph(&a.mapping.graph)?;
    let device = read_device(&a.mapping.device)?;
    let p = plan(
        &g,
        a.mapping.n_sample,
        a.mapping.strategy,
        &ReusePolicy::Uniform(a.mapping.reuse),
    )?;
    let doc = emit_plan(&g, &p, &device, a.seed, a.force)?;
    for line in &doc.summary {
        eprintln!("{line}");
    }
    write_out(a.out.as_deref(), &doc.to_document())
}

fn dse(a: DseArgs) -> Result<()> {
    let g = read_graph(&a.graph)?;
    let mut cfg = match (&a.config, a.quick) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        (None, true) => PipelineConfig::quick(),
        (None, false) => PipelineConfig::default(),
    };
    if let Some(d) = &a.device {
        cfg.device = read_device(d)?;
    }
    cfg.force |= a.force;
    let out = run_pipeline(&g, &cfg, a.seed)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (name, text) in [
        ("results.csv", &out.results_csv),
        ("hw_candidates.csv", &out.hw_csv),
        ("plan.json", &out.plan_document),
        ("graph.json", &out.graph_document),
    ] {
        write_out(Some(&a.out.join(name)), text)?;
    }
    let p1 = &out.phase1;
    println!("phase 1: {} points, {} feasible", p1.points.len(), p1.ranked.len());
    println!("  winner   {}", p1.best());
    println!("  acc-opt  {}", p1.points[p1.acc_opt]);
    println!("  ece-opt  {}", p1.points[p1.ece_opt]);
    let sel = out.phase3.selected();
    println!(
        "phase 3: {} candidates; reference accuracy {:.4} (tolerance {TAU})",
        out.phase3.candidates.len(),
        out.phase3.reference_accuracy
    );
    println!(
        "  chosen   {} bits, channels {}, reuse {}, {} -> {} cycles, accuracy {:.4}",
        sel.bitwidth,
        sel.channel_fraction.label(),
        sel.reuse,
        sel.strategy,
        sel.estimate.latency_cycles,
        sel.accuracy
    );
    for line in &out.plan.summary {
        println!("  {line}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Transform(a) => transform(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Flops(a) => flops_cmd(a)?,
        Command::Map(a) => map_cmd(a)?,
        Command::Dse(a) => dse(a)?,
        Command::Emit(a) => emit(a)?,
        Command::Selftest { seed } => {
            let checks = selftest::run(seed);
            for c in &checks {
                println!("{c}");
            }
            return Ok(checks.iter().all(|c| c.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
