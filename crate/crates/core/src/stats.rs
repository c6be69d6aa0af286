//! Small numeric helpers shared by the harness and tests.

/// Mean and population standard deviation. Empty input gives `(0, 0)`.
pub fn mean_and_population_sd(samples: &[f64]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `|a - b| <= max(atol, rtol * max(|a|, |b|))`.
pub fn rel_close(a: f64, b: f64, rtol: f64, atol: f64) -> bool {
    (a - b).abs() <= atol.max(rtol * a.abs().max(b.abs()))
}
