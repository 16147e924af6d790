//! Fast invariant suite behind the `selftest` subcommand.

use std::fmt;

use crate::flops::{cached_cost, count_flops, layer_flops, multi_exit_cost, reduction_rate, single_exit_cost};
use crate::mapper::{estimate, plan, simulate, DeviceProfile, ReusePolicy, Strategy};
use crate::metrics::ece;
use crate::netir::FixedPointFormat;
use crate::plan_doc::{emit_plan, HardwarePlan};
use crate::rng::Rng;
use crate::runtime::{apply_fixed_point, confidence_exit, mcd_layer, ExitMode, Tensor};
use crate::samples;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{tag} {:<22} {}", self.name, self.detail)
    }
}

fn check(name: &'static str, passed: bool, detail: impl Into<String>) -> Check {
    Check {
        name,
        passed,
        detail: detail.into(),
    }
}

fn flop_ratio() -> Check {
    let mut worst = 0.0f64;
    for main in [10u64, 1_000, 123_457] {
        for exit in [1u64, 50, 9_999] {
            for n_exit in [1u64, 2, 3, 4] {
                for k in [1u64, 2, 5] {
                    let n_sample = n_exit * k;
                    let se = single_exit_cost(main, exit, n_sample) as f64;
                    let me = multi_exit_cost(main, exit, n_sample, n_exit).expect("divisible") as f64;
                    let r = reduction_rate(exit as f64 / main as f64, n_sample, n_exit);
                    worst = worst.max((r * me - se).abs() / se);
                }
            }
        }
    }
    check("flop_ratio", worst <= 1e-12, format!("max relative error {worst:.3e}"))
}

fn flop_partition(rng: &mut Rng) -> Check {
    for _ in 0..50 {
        let g = samples::random_bayesian(rng);
        let r = count_flops(&g).expect("shapes inferred");
        let sum: u64 = g.nodes().iter().map(|n| layer_flops(n).expect("shapes inferred")).sum();
        let cached = cached_cost(&g).expect("shapes inferred");
        if sum != r.total() || cached.total(1) != r.total() {
            return check("flop_partition", false, format!("graph with {} nodes", g.nodes().len()));
        }
    }
    check(
        "flop_partition",
        true,
        "50 graphs: layer sum = main + exit = cached(1 pass)",
    )
}

fn dropout_rates() -> Check {
    let n = 100_000;
    let ones = Tensor::filled(crate::netir::TensorShape::vector(n), 1.0);
    for (i, p) in [0.875, 0.75, 0.625, 0.5].into_iter().enumerate() {
        let mut a = Rng::new(11 + i as u64);
        let mut b = Rng::new(11 + i as u64);
        let out = mcd_layer(&ones, p, &mut a, crate::netir::Granularity::ElementWise);
        let again = mcd_layer(&ones, p, &mut b, crate::netir::Granularity::ElementWise);
        let dropped = out.data.iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let mean = out.data.iter().sum::<f64>() / n as f64;
        if (dropped - (1.0 - p)).abs() > 4.0 * sigma || (mean - p * p).abs() > 4.0 * p * sigma || out != again {
            return check(
                "dropout_rates",
                false,
                format!("keep {p}: drop {dropped:.4}, mean {mean:.4}"),
            );
        }
    }
    check(
        "dropout_rates",
        true,
        "drop rate and mean within 4 sigma; masks reproducible",
    )
}

fn mapper_oracle(rng: &mut Rng) -> Check {
    let dev = DeviceProfile::unlimited();
    for i in 0..100 {
        let (g, p) = samples::random_mapping(rng);
        let a = estimate(&p, &g, &dev).expect("valid plan");
        let s = simulate(&p, &g, &dev).expect("valid plan");
        if a.latency_cycles != s.latency_cycles {
            return check(
                "mapper_oracle",
                false,
                format!(
                    "plan {i}: estimate {} vs simulated {}",
                    a.latency_cycles, s.latency_cycles
                ),
            );
        }
    }
    check("mapper_oracle", true, "100 random plans: estimate = simulation")
}

fn spatial_flat() -> Check {
    let g = samples::lenet_three_exit();
    let dev = DeviceProfile::unlimited();
    let bayes: Vec<u64> = [3, 6, 12, 24]
        .into_iter()
        .map(|n| {
            let p = plan(&g, n, Strategy::Spatial, &ReusePolicy::default()).expect("divisible");
            estimate(&p, &g, &dev).expect("valid plan").bayesian_cycles
        })
        .collect();
    check(
        "spatial_flat",
        bayes.windows(2).all(|w| w[0] == w[1]),
        format!("bayesian cycles {bayes:?}"),
    )
}

fn ece_hand_case() -> Check {
    let probs = vec![vec![0.95, 0.05], vec![0.95, 0.05], vec![0.65, 0.35], vec![0.55, 0.45]];
    let r = ece(&probs, &[0, 1, 0, 0], 10).expect("valid input");
    check("ece_hand_case", r.ece == 0.425, format!("ece {}", r.ece))
}

fn fixed_point_idempotent(rng: &mut Rng) -> Check {
    for bits in [4, 6, 8, 16] {
        let fmt = FixedPointFormat::with_total_bits(bits).expect("supported width");
        for _ in 0..20_000 {
            let x = rng.uniform(-64.0, 64.0);
            let q = apply_fixed_point(x, fmt);
            if apply_fixed_point(q, fmt) != q {
                return check("fixed_point_idempotent", false, format!("{bits} bits at {x}"));
            }
        }
    }
    check("fixed_point_idempotent", true, "80000 values")
}

fn exit_extremes() -> Check {
    let mut g = samples::lenet_three_exit();
    g.initialize_weights(5, true).expect("fresh graph");
    let x = Tensor::filled(g.input_shape(), 0.5);
    let early = confidence_exit(&g, &x, 1e-9, ExitMode::PerExit, 6, 1).expect("valid input");
    check(
        "exit_extremes",
        early.exit == 0,
        format!("threshold 1e-9 exits at {}", early.exit + 1),
    )
}

fn plan_roundtrip() -> Check {
    let g = samples::lenet_three_exit();
    let dev = samples::zcu102_like();
    let p = plan(&g, 6, Strategy::Mixed(2), &ReusePolicy::Uniform(4)).expect("valid plan");
    let doc = emit_plan(&g, &p, &dev, 0, false).map(|d| d.to_document());
    let ok = doc
        .as_ref()
        .ok()
        .and_then(|d| HardwarePlan::from_document(d).ok())
        .is_some_and(|back| back.verify(&g).is_ok() && Some(&back.to_document()) == doc.as_ref().ok());
    check("plan_roundtrip", ok, "emit, reload, verify, re-emit")
}

/// Runs every check; all randomness derives from `seed`.
pub fn run(seed: u64) -> Vec<Check> {
    let mut rng = Rng::new(seed);
    vec![
        flop_ratio(),
        flop_partition(&mut rng),
        dropout_rates(),
        mapper_oracle(&mut rng),
        spatial_flat(),
        ece_hand_case(),
        fixed_point_idempotent(&mut rng),
        exit_extremes(),
        plan_roundtrip(),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_checks_pass() {
        for c in super::run(0) {
            assert!(c.passed, "{c}");
        }
    }
}
