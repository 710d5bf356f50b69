use crate::error::{Error, Result};

/// Two-sided 95% standard normal quantile.
pub const WILSON_Z: f64 = 1.959964;

pub fn exact_match(x_star: &[u32], x: &[u32]) -> bool {
    x_star == x
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartialMatch {
    /// Fraction of positions holding the same token.
    pub fraction: f64,
    /// The sequences differ in length; only the common prefix was scored.
    pub length_mismatch: bool,
}

pub fn partial_match(x_star: &[u32], x: &[u32]) -> PartialMatch {
    let n = x_star.len().min(x.len());
    let hits = x_star.iter().zip(x).filter(|(a, b)| a == b).count();
    PartialMatch {
        fraction: if n == 0 { 0.0 } else { hits as f64 / n as f64 },
        length_mismatch: x_star.len() != x.len(),
    }
}

/// Fraction of masked positions recovered; `None` for an empty mask.
pub fn pii_match(x_star: &[u32], x: &[u32], mask: &[usize]) -> Option<f64> {
    if mask.is_empty() {
        return None;
    }
    let hits = mask
        .iter()
        .filter(|&&p| p < x_star.len() && p < x.len() && x_star[p] == x[p])
        .count();
    Some(hits as f64 / mask.len() as f64)
}

/// Wilson score interval for a binomial proportion at 95% confidence.
pub fn wilson_interval(successes: u64, trials: u64) -> Result<(f64, f64)> {
    if trials == 0 || successes > trials {
        return Err(Error::Contract(format!(
            "wilson interval needs 0 <= successes <= trials, trials > 0; got {successes}/{trials}"
        )));
    }
    let (n, z) = (trials as f64, WILSON_Z);
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Ok(((centre - half).max(0.0), (centre + half).min(1.0)))
}
