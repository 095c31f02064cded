//! Shared oracles for the integration tests, implemented independently of
//! the library code they check.

use nalgebra::Matrix2;

/// Matrix exponential of a 2x2 matrix by scaling and squaring with a Taylor
/// series, accurate to roughly machine precision for the norms used here.
pub fn expm2(a: &Matrix2<f64>) -> Matrix2<f64> {
    let norm = a.abs().row_sum().max();
    let k = if norm > 0.5 {
        (norm / 0.5).log2().ceil() as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(k);
    let mut term = Matrix2::identity();
    let mut sum = Matrix2::identity();
    for i in 1..=40 {
        term = term * scaled / i as f64;
        sum += term;
        if term.abs().max() < 1e-300 {
            break;
        }
    }
    let mut result = sum;
    for _ in 0..k {
        result = result * result;
    }
    result
}

/// Median of a sample; panics on an empty slice.
pub fn median(samples: &mut [f64]) -> f64 {
    assert!(!samples.is_empty());
    samples.sort_by(|a, b| a.partial_cmp(b).expect("comparable"));
    let n = samples.len();
    if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    }
}

/// Prints the per-criterion verdict line, then enforces it.
pub fn report(id: &str, description: &str, pass: bool, detail: &str) {
    let tag = if pass { "[PASS]" } else { "[FAIL]" };
    println!("{tag} {id}: {description} ({detail})");
    assert!(pass, "{id} failed: {detail}");
}
