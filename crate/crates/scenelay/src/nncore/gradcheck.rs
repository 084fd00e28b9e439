//! Central finite differences, used by the gradcheck command and the
//! layer-level oracle tests.

/// d f / d x_i ≈ (f(x + ε e_i) − f(x − ε e_i)) / 2ε, for every i.
pub fn numerical_grad<F>(x: &[f64], eps: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + eps;
        let hi = f(&buf);
        buf[i] = orig - eps;
        let lo = f(&buf);
        buf[i] = orig;
        out.push((hi - lo) / (2.0 * eps));
    }
    out
}

/// |a − n| / max(|a| + |n|, 1e-8); symmetric, safe when both are near zero.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}
