use crate::error::{Error, Result};

/// Softmax cost per matrix element: max-compare, subtract, exp, sum-add,
/// divide.
pub const SOFTMAX_FLOPS: u64 = 5;

/// Attention-core FLOPs of one head over a sequence of length `s` with width
/// `d`: `QKᵀ` and `AV` at `2·s·s·d` each plus the softmax.
pub fn attention_flops(s: u64, d: u64) -> u64 {
    4 * s * s * d + SOFTMAX_FLOPS * s * s
}

/// Joint attention over `C·N` tokens in each of `L` layers.
pub fn flops_msa(c: u64, n: u64, d: u64, l: u64) -> u64 {
    l * attention_flops(c * n, d)
}

/// Spatial attention in every layer plus channel attention in `m` layers.
pub fn flops_dsa(c: u64, n: u64, d: u64, l: u64, m: u64) -> Result<u64> {
    if m > l {
        return Err(Error::Config(format!("{m} channel-attention layers exceed depth {l}")));
    }
    Ok(l * c * attention_flops(n, d) + m * n * attention_flops(c, d))
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid("loglog_slope", "need at least two points"));
    }
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return Err(Error::invalid("loglog_slope", "coordinates must be positive and finite"));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x.ln(), y.ln())).collect();
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("loglog_slope", "all x values are equal"));
    }
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    Ok(sxy / sxx)
}
