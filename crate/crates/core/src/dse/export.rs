use super::{DesignPoint, HwCandidate};

pub const RESULT_COLUMNS: [&str; 20] = [
    "n_exit",
    "keep_rate",
    "mcd_layers",
    "threshold",
    "exit_mode",
    "bitwidth",
    "channel_fraction",
    "strategy",
    "reuse",
    "accuracy",
    "accuracy_std",
    "ece",
    "ece_std",
    "static_flops",
    "expected_flops",
    "latency_cycles",
    "dsp",
    "bram_kb",
    "lut",
    "ff",
];

fn real(v: f64) -> String {
    format!("{v:.6}")
}

fn finish(w: csv::Writer<Vec<u8>>) -> String {
    String::from_utf8(w.into_inner().expect("in-memory writer")).expect("csv output is UTF-8")
}

/// Result table with a fixed column order; FLOPs are fractions of the
/// single-exit baseline, reals printed with six decimals.
pub fn export_results(points: &[DesignPoint]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(RESULT_COLUMNS).expect("in-memory write");
    for p in points {
        let m = p.metrics.as_ref().expect("evaluated point");
        w.write_record([
            p.n_exit.to_string(),
            real(p.keep_rate),
            p.mcd_layers_per_exit.to_string(),
            p.confidence_threshold.map(real).unwrap_or_default(),
            p.exit_mode.label().to_string(),
            p.bitwidth.to_string(),
            p.channel_fraction.label().to_string(),
            p.strategy.to_string(),
            p.reuse.to_string(),
            real(m.accuracy),
            real(m.accuracy_std),
            real(m.ece),
            real(m.ece_std),
            real(m.static_flops),
            real(m.expected_flops),
            m.latency_cycles.to_string(),
            m.dsp.to_string(),
            m.bram_kb.to_string(),
            m.lut.to_string(),
            m.ff.to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

pub fn export_hw_candidates(candidates: &[HwCandidate], selected: Option<usize>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "bitwidth",
        "channel_fraction",
        "reuse",
        "strategy",
        "accuracy",
        "accuracy_ok",
        "fits",
        "latency_cycles",
        "dsp",
        "bram_kb",
        "lut",
        "ff",
        "selected",
    ])
    .expect("in-memory write");
    for (i, c) in candidates.iter().enumerate() {
        w.write_record([
            c.bitwidth.to_string(),
            c.channel_fraction.label().to_string(),
            c.reuse.to_string(),
            c.strategy.to_string(),
            real(c.accuracy),
            c.accuracy_ok.to_string(),
            c.fits.to_string(),
            c.estimate.latency_cycles.to_string(),
            c.estimate.dsp.to_string(),
            c.estimate.bram_kb.to_string(),
            c.estimate.lut.to_string(),
            c.estimate.ff.to_string(),
            (selected == Some(i)).to_string(),
        ])
        .expect("in-memory write");
    }
    finish(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dse::PointMetrics;
    use crate::mapper::Strategy;
    use crate::runtime::ExitMode;
    use crate::transform::ChannelFraction;

    fn se_point() -> DesignPoint {
        DesignPoint {
            n_exit: 1,
            keep_rate: 1.0,
            mcd_layers_per_exit: 0,
            confidence_threshold: None,
            exit_mode: ExitMode::CumulativeEnsemble,
            bitwidth: 32,
            channel_fraction: ChannelFraction::Full,
            strategy: Strategy::Spatial,
            reuse: 1,
            metrics: Some(PointMetrics {
                accuracy: 0.75,
                accuracy_std: 0.002,
                ece: 0.084,
                ece_std: 0.0008,
                static_flops: 1.0,
                expected_flops: 1.0,
                latency_cycles: 1234,
                dsp: 10,
                bram_kb: 3,
                lut: 1300,
                ff: 900,
            }),
        }
    }

    #[test]
    fn empty_set_is_header_only() {
        let out = export_results(&[]);
        assert_eq!(out, format!("{}\n", RESULT_COLUMNS.join(",")));
    }

    #[test]
    fn single_row_with_unit_flops() {
        let out = export_results(&[se_point()]);
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(
            lines[1],
            "1,1.000000,0,,cumulative,32,1,spatial,1,0.750000,0.002000,0.084000,0.000800,1.000000,1.000000,1234,10,3,1300,900"
        );
        assert_eq!(export_results(&[se_point()]), out);
    }
}
