//! Python bindings: thin wrappers returning floats, lists and dicts.

use std::sync::Arc;

use pyo3::exceptions::{PyOverflowError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use blockrg::cluster::{brute_force_log_partition, cluster_expand, PolymerGas, SiteFunction, UltralocalMeasure};
use blockrg::flow::{growth_audit, solve_fixed_point, vacuum_energy_backfill, FlowSchedule, SurrogateMaps};
use blockrg::gaussian_flow::{free_step_identity_check, resolvent_identity_check, FreeFlow, GaussParams};
use blockrg::lattice::TorusLattice;
use blockrg::polymer::{counting_bounds_report, Polymer};
use blockrg::rg_step::{micro_state, rg_step, StepControls};

fn py_err(e: blockrg::Error) -> PyErr {
    use blockrg::Error as E;
    match e {
        E::CapExceeded(_) => PyOverflowError::new_err(e.to_string()),
        E::InvalidParameter(_) | E::LatticeMismatch(_) | E::Hypothesis(_) | E::Precondition(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Serializable report to native Python objects through `json.loads`.
fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// `a_k = a(1 - L^-2)/(1 - L^-2k)`.
#[pyfunction]
fn a_k(a: f64, l: usize, k: u32) -> PyResult<f64> {
    blockrg::gaussian_flow::a_k(a, l, k).map_err(py_err)
}

/// Residuals of the single free-step identities on random fields.
#[pyfunction]
#[pyo3(signature = (d, l, side_exp, k=1, a=1.0, mu_bar=0.0, samples=20, seed=0))]
#[allow(clippy::too_many_arguments)]
fn free_step_identities<'py>(
    py: Python<'py>,
    d: usize,
    l: usize,
    side_exp: u32,
    k: u32,
    a: f64,
    mu_bar: f64,
    samples: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let flow = FreeFlow::new(GaussParams { d, l, side_exp, k, a, mu_bar }).map_err(py_err)?;
    to_py(py, &free_step_identity_check(&flow, samples, seed).map_err(py_err)?)
}

/// `(r, relative error)` of the resolvent identity.
#[pyfunction]
#[pyo3(signature = (d, l, side_exp, rs, k=1, a=1.0))]
fn resolvent_errors(d: usize, l: usize, side_exp: u32, rs: Vec<f64>, k: u32, a: f64) -> PyResult<Vec<(f64, f64)>> {
    let flow = FreeFlow::new(GaussParams { d, l, side_exp, k, a, mu_bar: 0.0 }).map_err(py_err)?;
    let rows = resolvent_identity_check(&flow, &rs).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.r, r.relative_error)).collect())
}

/// Polymer counts through cube 0 against the path bound.
#[pyfunction]
#[pyo3(signature = (d, side_exp, max_size, a=3.0, kappa0=1.0, l=3))]
fn polymer_counts<'py>(
    py: Python<'py>,
    d: usize,
    side_exp: u32,
    max_size: usize,
    a: f64,
    kappa0: f64,
    l: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let grid = TorusLattice::new(d, l, side_exp, 0).map_err(py_err)?;
    to_py(py, &counting_bounds_report(&grid, max_size, a, kappa0).map_err(py_err)?)
}

/// `log Ξ` of a one-site-per-cube gas on a ring of `3^side_exp` cubes; each activity is
/// a polynomial in the mean over its cubes. Returns `(cluster, brute force)`.
#[pyfunction]
#[pyo3(signature = (polymers, measure, side_exp=2, n_max=12, oracle=true))]
fn cluster_log_partition(
    polymers: Vec<(Vec<usize>, Vec<f64>)>,
    measure: Vec<(f64, f64)>,
    side_exp: u32,
    n_max: usize,
    oracle: bool,
) -> PyResult<(f64, Option<f64>)> {
    let lat = TorusLattice::new(1, 3, side_exp, 0).map_err(py_err)?;
    let mu = UltralocalMeasure::new(measure).map_err(py_err)?;
    let mut terms = Vec::new();
    for (cubes, coeffs) in polymers {
        let poly = Polymer::new(&lat, cubes).map_err(py_err)?;
        let members = poly.cubes.clone();
        let f: SiteFunction = Arc::new(move |v: &[f64]| {
            let s = members.iter().map(|&c| v[c]).sum::<f64>() / members.len() as f64;
            coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
        });
        terms.push((poly, f));
    }
    let gas = PolymerGas::one_site_per_cube(lat, terms).map_err(py_err)?;
    let res = cluster_expand(&gas, &mu, n_max).map_err(py_err)?;
    let exact = if oracle { Some(brute_force_log_partition(&gas, &mu).map_err(py_err)?.log_partition) } else { None };
    Ok((res.log_partition(), exact))
}

/// Fixed point of the surrogate flow: convergence report, growth rows and
/// back-filled vacuum energies.
#[pyfunction]
#[pyo3(signature = (levels=20, l=3, lambda_=1.0, delta=8, d=3, beta=0.1))]
fn surrogate_flow<'py>(
    py: Python<'py>,
    levels: u32,
    l: usize,
    lambda_: f64,
    delta: u32,
    d: usize,
    beta: f64,
) -> PyResult<Bound<'py, PyAny>> {
    let schedule = FlowSchedule::new(d, l, levels, lambda_, delta, beta).map_err(py_err)?;
    let maps = SurrogateMaps::default().with_schedule(schedule).map_err(py_err)?;
    let (fp, rep) = solve_fixed_point(&maps, None, 1e-15, 200).map_err(py_err)?;
    let growth = growth_audit(&maps, &fp).map_err(py_err)?;
    let vac = vacuum_energy_backfill(&maps, &fp).map_err(py_err)?;
    to_py(py, &serde_json::json!({ "convergence": rep, "growth": growth, "vacuum": vac }))
}

/// One step on the micro-torus at coupling `lambda_`; the step report.
#[pyfunction]
#[pyo3(signature = (lambda_=1e-3, nodes_per_site=2, n_max=10))]
fn micro_step<'py>(py: Python<'py>, lambda_: f64, nodes_per_site: usize, n_max: usize) -> PyResult<Bound<'py, PyAny>> {
    let state = micro_state(lambda_).map_err(py_err)?;
    let controls = StepControls { nodes_per_site, n_max, ..StepControls::default() };
    let (_, rep) = py.detach(|| rg_step(&state, &controls)).map_err(py_err)?;
    to_py(py, &rep)
}

#[pymodule]
fn blockrg_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(a_k, m)?)?;
    m.add_function(wrap_pyfunction!(free_step_identities, m)?)?;
    m.add_function(wrap_pyfunction!(resolvent_errors, m)?)?;
    m.add_function(wrap_pyfunction!(polymer_counts, m)?)?;
    m.add_function(wrap_pyfunction!(cluster_log_partition, m)?)?;
    m.add_function(wrap_pyfunction!(surrogate_flow, m)?)?;
    m.add_function(wrap_pyfunction!(micro_step, m)?)?;
    Ok(())
}
