//! Shared helpers for unit tests: a central-difference gradient checker and
//! seeded RNG construction.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference gradient of a scalar function at `x`.
pub(crate) fn fd_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    let mut g = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let h = 1e-5 * x[i].abs().max(1.0);
        buf[i] = x[i] + h;
        let up = f(&buf);
        buf[i] = x[i] - h;
        let dn = f(&buf);
        buf[i] = x[i];
        g.push((up - dn) / (2.0 * h));
    }
    g
}

/// Asserts `|a-b| <= tol * max(1, |a|, |b|)`.
pub(crate) fn assert_close(a: f64, b: f64, tol: f64) {
    let scale = a.abs().max(b.abs()).max(1.0);
    assert!(
        (a - b).abs() <= tol * scale,
        "values differ: {a} vs {b} (tol {tol})"
    );
}
