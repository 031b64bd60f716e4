//! Central finite differences for gradient verification. Deliberately knows
//! nothing about the tape: it only re-evaluates a closure at perturbed inputs.

/// d f / d x_i ≈ (f(x + h e_i) - f(x - h e_i)) / 2h for every i.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut xs = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Relative error with floor: |a-b| / max(|a|, |b|, 1e-8).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a, n))
        .fold(0.0, f64::max)
}
