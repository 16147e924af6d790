use crate::netir::FixedPointFormat;

/// Quantizes `x` to the nearest multiple of `2^-fractional_bits`
/// (ties to even), saturating at the format's range. NaN maps to zero.
pub fn apply_fixed_point(x: f64, fmt: FixedPointFormat) -> f64 {
    if x.is_nan() {
        return 0.0;
    }
    let scale = (fmt.fractional_bits() as f64).exp2();
    let (lo, hi) = code_range(fmt);
    (x * scale).round_ties_even().clamp(lo, hi) / scale
}

/// Smallest and largest integer codes of the format.
fn code_range(fmt: FixedPointFormat) -> (f64, f64) {
    let total = fmt.total_bits as i32;
    if fmt.signed {
        let half = 2f64.powi(total - 1);
        (-half, half - 1.0)
    } else {
        (0.0, 2f64.powi(total) - 1.0)
    }
}

/// Largest representable value.
pub fn max_value(fmt: FixedPointFormat) -> f64 {
    code_range(fmt).1 / (fmt.fractional_bits() as f64).exp2()
}

pub fn quantize_slice(values: &mut [f64], fmt: FixedPointFormat) {
    for v in values {
        *v = apply_fixed_point(*v, fmt);
    }
}
