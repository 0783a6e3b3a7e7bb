//! One-dimensional quadrature rules used by the fluctuation measures and by
//! the square-root integral representation.

use gauss_quad::{GaussHermite, GaussLegendre};

use crate::{Error, Result};

/// Gauss-Legendre nodes and weights mapped to `[lo, hi]`.
pub fn legendre(n: usize, lo: f64, hi: f64) -> Result<Vec<(f64, f64)>> {
    if n < 2 {
        return Err(Error::InvalidParameter("Gauss-Legendre needs at least 2 nodes".into()));
    }
    let rule = GaussLegendre::new(n.try_into().map_err(|_| Error::InvalidParameter("bad node count".into()))?);
    let half = 0.5 * (hi - lo);
    let mid = 0.5 * (hi + lo);
    Ok(rule.nodes().zip(rule.weights()).map(|(&x, &w)| (mid + half * x, half * w)).collect())
}

/// Gauss-Hermite nodes and weights for the unit Gaussian `e^{-x²/2}/√(2π)`.
pub fn hermite_unit_gaussian(n: usize) -> Result<Vec<(f64, f64)>> {
    if n < 1 {
        return Err(Error::InvalidParameter("Gauss-Hermite needs at least 1 node".into()));
    }
    let rule = GaussHermite::new(n.try_into().map_err(|_| Error::InvalidParameter("bad node count".into()))?);
    let s = std::f64::consts::PI.sqrt();
    Ok(rule
        .nodes()
        .zip(rule.weights())
        .map(|(&x, &w)| (std::f64::consts::SQRT_2 * x, w / s))
        .collect())
}

/// Composite Gauss-Legendre integral of `f` over `[lo, hi]` split into
/// `panels` equal pieces.
pub fn integrate(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize, nodes: usize) -> Result<f64> {
    let h = (hi - lo) / panels as f64;
    let rule = legendre(nodes, 0.0, h)?;
    let mut s = 0.0;
    for p in 0..panels {
        let base = lo + p as f64 * h;
        for &(x, w) in &rule {
            s += w * f(base + x);
        }
    }
    Ok(s)
}
