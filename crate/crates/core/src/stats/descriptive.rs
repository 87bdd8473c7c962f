//! Plain descriptive statistics over slices.

/// Shifted by the first value so a constant slice returns that value exactly.
pub fn mean(x: &[f64]) -> f64 {
    let Some(&x0) = x.first() else {
        return f64::NAN;
    };
    x0 + x.iter().map(|v| v - x0).sum::<f64>() / x.len() as f64
}

/// Population (1/n) variance.
pub fn variance_pop(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

/// Sample (1/(n-1)) variance.
pub fn variance_sample(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Percentile `q` in [0, 100] of an ascending-sorted slice, interpolating
/// linearly between order statistics at rank `q/100 * (n-1)`.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "percentile of empty slice");
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = (q / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// Percentile of an unsorted slice.
pub fn percentile(x: &[f64], q: f64) -> f64 {
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    percentile_linear(&s, q)
}

pub fn median(x: &[f64]) -> f64 {
    percentile(x, 50.0)
}
