//! One function per subcommand. Each returns a finished `Output`; nothing is
//! written until the whole run has succeeded or failed an assertion.

use std::collections::BTreeMap;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use serde_json::json;

use blockrg::averaging::BlockMap;
use blockrg::cluster::{
    brute_force_log_partition, cluster_expand, truncation_energy, truncation_energy_quadrature, PolymerGas, SiteFunction,
    UltralocalMeasure, MAX_POLYMERS,
};
use blockrg::flow::{
    contraction_probe, growth_audit, solve_fixed_point, vacuum_energy_backfill, ConvergenceReport, FlowSchedule,
    GrowthAudit, PipelineMaps, StepMaps, SurrogateMaps, VacuumEnergy,
};
use blockrg::gaussian_flow::{
    a_k, a_k_recursion_residual, coupling_growth_exponent, free_step_identity_check, log_spaced, mass_at_level,
    resolvent_identity_check, scaling_identity_defect, FreeFlow, GaussParams,
};
use blockrg::greens::{decay_probes, off_block_max, parametrix, random_walk_expansion, LocalOperator, PartitionOfUnity};
use blockrg::lattice::{inner_product, Field, TorusLattice};
use blockrg::linalg::{max_abs, max_abs_diff};
use blockrg::polymer::{counting_bounds_report, geometry_audit, Polymer};
use blockrg::rg_step::{quartic_functional, rg_step, Fluctuation, FlowState, FlowStateJson, StepControls};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::report::{at_most, info, num, positive, residual, Output};

fn random_field(lat: TorusLattice, amplitude: f64, rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(lat, |_| rng.random_range(-amplitude..amplitude))
}

fn free_flow(cfg: &RunConfig, k: u32) -> CliResult<FreeFlow> {
    let g = &cfg.global;
    let mu_bar = mass_at_level(g.mu_bar, g.l, g.side_exp, k);
    Ok(FreeFlow::new(GaussParams { d: g.d, l: g.l, side_exp: g.side_exp, k, a: g.a, mu_bar })?)
}

/// Starting state built from the global block: `μ = 0.1λ^{1/2}`, `E = 0.1λ²∫φ⁴`.
pub fn default_state(cfg: &RunConfig) -> CliResult<FlowState> {
    let g = cfg.step_geometry();
    let lambda = cfg.global.lambda;
    let k = cfg.global.k;
    let e = quartic_functional(g.field_lattice(k)?, g.cube_exp(k), 0.1 * lambda * lambda)?;
    Ok(FlowState::new(g, k, 0.0, 0.1 * lambda.sqrt(), lambda, Some(e))?)
}

fn averaging_claims(cfg: &RunConfig, out: &mut Output, rng: &mut ChaCha8Rng) -> CliResult<()> {
    let g = &cfg.global;
    let tol = cfg.identities.algebra_tolerance;
    let fine = TorusLattice::new(g.d, g.l, g.side_exp, g.k as i32)?;
    let map = BlockMap::new(fine, 1)?;
    let nc = map.coarse.n_sites();
    let (q, qt) = (map.q_matrix(), map.qt_matrix());
    let eye = DMatrix::identity(nc, nc);
    out.claims.push(residual("averaging", "max|QQt - I|", max_abs_diff(&(&q * &qt), &eye), 0.0, tol));
    let p = &qt * &q;
    out.claims.push(residual("averaging", "max|P^2 - P|", max_abs_diff(&(&p * &p), &p), 0.0, tol));
    let (mut adjoint, mut scale): (f64, f64) = (0.0, 0.0);
    for _ in 0..5 {
        let f = random_field(fine, 1.0, rng);
        let h = random_field(map.coarse, 1.0, rng);
        let lhs = inner_product(&map.apply_q(&f)?, &h)?;
        let rhs = inner_product(&f, &map.apply_qt(&h)?)?;
        adjoint = adjoint.max((lhs - rhs).abs());
        scale = scale.max(map.scale_commutation_defect(&f)?);
    }
    out.claims.push(residual("averaging", "max|<Qf,g> - <f,Qtg>|", adjoint, 0.0, tol));
    out.claims.push(residual("averaging", "scale commutation defect", scale, 0.0, tol));
    Ok(())
}

fn free_step_claims(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let id = &cfg.identities;
    let ak = a_k_recursion_residual(cfg.global.a, cfg.global.l, cfg.gaussian_flow.k_max)?;
    out.claims.push(residual("gaussian", "a_k recursion relative gap", ak, 0.0, id.algebra_tolerance));
    let flow = free_flow(cfg, cfg.global.k)?;
    let rep = free_step_identity_check(&flow, id.samples, cfg.seed)?;
    for (name, v) in [
        ("quadratic form", rep.quadratic_form),
        ("minimum identity", rep.minimum_identity),
        ("psi variational equation", rep.psi_variational),
        ("psi residual split", rep.psi_residual_split),
        ("psi consistency", rep.psi_consistency),
        ("joint action expansion", rep.joint_expansion),
        ("minimizer equation", rep.minimizer_equation),
    ] {
        out.claims.push(residual("gaussian", name, v, 0.0, id.tolerance));
    }
    let scaling = scaling_identity_defect(&flow, cfg.seed)?;
    out.claims.push(residual("gaussian", "scaling identity", scaling, 0.0, id.tolerance));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let big = random_field(flow.next, 1.0, &mut rng);
    let bsi = flow.block_spin_integral_defect(&big)?;
    out.claims.push(residual("gaussian", "block-spin integral (log)", bsi, 0.0, id.tolerance));
    if flow.params.mu_bar > 0.0 {
        let nd = flow.normalization_defect()?;
        out.claims.push(residual("gaussian", "normalization (log)", nd, 0.0, id.tolerance));
    }
    Ok(())
}

fn resolvent_claims(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let gf = &cfg.gaussian_flow;
    let flow = free_flow(cfg, cfg.global.k)?;
    let rs = log_spaced(gf.r_min, gf.r_max, gf.r_count);
    let rows = resolvent_identity_check(&flow, &rs)?;
    for row in &rows {
        out.claims.push(residual("resolvent", &format!("relative error r={}", row.r), row.relative_error, 0.0, cfg.identities.resolvent_tolerance));
    }
    out.series("resolvent_relative_error", rows.iter().map(|r| (r.r, r.relative_error)));
    Ok(())
}

fn pipeline_claims(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let id = &cfg.identities;
    let controls = cfg.step_controls();
    controls.validate()?;
    let state = default_state(cfg)?;
    let fl = Arc::new(Fluctuation::new(&state, &controls)?);
    let audit = fl.identity_audit(controls.audit_samples, cfg.seed)?;
    for (name, v) in [
        ("change of variables", audit.change_of_variables),
        ("fluctuation substitution", audit.w_substitution),
        ("localization assembly", audit.assembly),
        ("localization telescope", audit.telescope),
    ] {
        out.claims.push(residual("step", name, v, 0.0, id.tolerance));
    }
    out.claims.push(info("step", "disconnected localization weight", audit.disconnected_weight));
    out.claims.push(info("step", "walk expansion error", fl.walk_error));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let phi = random_field(state.field_lattice(), 0.1, &mut rng);
    let cluster = fl.outcome(&phi)?.log_xi;
    let direct = fl.direct_log_xi(&phi)?;
    out.claims.push(residual("step", "log Xi cluster vs direct quadrature", cluster, direct, id.log_xi_tolerance));
    Ok(())
}

pub fn verify_identities(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    averaging_claims(cfg, out, &mut rng)?;
    free_step_claims(cfg, out)?;
    resolvent_claims(cfg, out)?;
    pipeline_claims(cfg, out)?;
    Ok(())
}

pub fn gaussian_flow(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let g = &cfg.global;
    let header = ["k", "a_k", "mu_bar_k", "log_z_increment", "identity_residual"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for k in 1..g.side_exp {
        let flow = free_flow(cfg, k)?;
        let rep = free_step_identity_check(&flow, cfg.identities.samples, cfg.seed)?;
        let worst = rep.worst();
        out.claims.push(residual("gaussian", &format!("identity residual k={k}"), worst, 0.0, cfg.identities.tolerance));
        rows.push(vec![
            k.to_string(),
            num(flow.a_k),
            num(flow.params.mu_bar),
            num(flow.log_z_increment()?),
            num(worst),
        ]);
    }
    let ak = a_k_recursion_residual(g.a, g.l, cfg.gaussian_flow.k_max)?;
    out.claims.push(residual("gaussian", "a_k recursion relative gap", ak, 0.0, cfg.identities.algebra_tolerance));
    let limit = g.a * (1.0 - (g.l as f64).powi(-2));
    let last = a_k(g.a, g.l, cfg.gaussian_flow.k_max)?;
    out.claims.push(residual("gaussian", "a_k at k_max vs a(1 - L^-2)", last, limit, 1e-12 * limit.abs().max(1.0)));
    out.series("a_k", (1..=cfg.gaussian_flow.k_max).map(|k| (k as f64, a_k(g.a, g.l, k).unwrap_or(f64::NAN))));
    resolvent_claims(cfg, out)?;
    out.table = Some((header, rows));
    Ok(())
}

pub fn greens_decay(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let gr = &cfg.greens;
    let flow = FreeFlow::new(GaussParams { d: 1, l: cfg.global.l, side_exp: gr.side_exp, k: 1, a: gr.a, mu_bar: 0.0 })?;
    let probes = decay_probes(&flow, &gr.r_values, gr.region_units)?;
    let header = ["probe", "separation", "block_norm", "gamma", "prefactor"].map(String::from).to_vec();
    let mut rows = Vec::new();
    for p in &probes {
        out.claims.push(positive("decay", &format!("rate {}", p.label), p.fit.gamma));
        for &(sep, v) in &p.fit.samples {
            rows.push(vec![p.label.clone(), num(sep), num(v), num(p.fit.gamma), num(p.fit.prefactor)]);
        }
        out.series(&format!("block_norm {}", p.label), p.fit.samples.iter().copied());
    }
    let pou = PartitionOfUnity::new(flow.fine, gr.m)?;
    let n_cubes = pou.n_cubes();
    if let Some(&bad) = gr.gated_cubes.iter().find(|&&c| c >= n_cubes) {
        return Err(CliError::Config(format!("greens.gated_cubes: cube {bad} out of range 0..{n_cubes}")));
    }
    let par = parametrix(&LocalOperator::free(&flow), &pou)?;
    out.claims.push(residual("walk", "parametrix identity", par.identity_residual(), 0.0, cfg.identities.tolerance));
    let walk = random_walk_expansion(&par, gr.walk_order, None)?;
    out.claims.push(at_most("walk", "max per-order ratio", walk.diagnostics.max_ratio, 0.5));
    out.claims.push(info("walk", "largest Green's function entry", max_abs(flow.green())));
    out.claims.push(residual("walk", "max|walk sum - G|", max_abs_diff(&walk.total, flow.green()), 0.0, gr.walk_tolerance));
    out.series("walk_order_norm", walk.diagnostics.order_norms.iter().enumerate().map(|(n, v)| (n as f64, *v)));
    let s: Vec<f64> = (0..n_cubes).map(|c| if gr.gated_cubes.contains(&c) { 0.0 } else { 1.0 }).collect();
    let gated = random_walk_expansion(&par, gr.walk_order, Some(&s))?;
    out.claims.push(residual("walk", "off-block entries with gated cubes", off_block_max(&gated.total, &pou, &s), 0.0, 1e-12));
    for &p0 in &gr.truncations {
        let measured = truncation_energy_quadrature(p0, 24)?;
        out.claims.push(residual("truncation", &format!("eps0 quadrature vs closed form p0={p0}"), measured, truncation_energy(p0), 1e-10));
        out.claims.push(at_most("truncation", &format!("eps0 vs 10 exp(-p0^2/2) p0={p0}"), measured, 10.0 * (-0.5 * p0 * p0).exp()));
    }
    out.table = Some((header, rows));
    Ok(())
}

pub fn polymers(cfg: &RunConfig, out: &mut Output) -> CliResult<()> {
    let pc = &cfg.polymers;
    let grid = TorusLattice::new(pc.d, cfg.global.l, pc.side_exp, 0)?;
    let rep = counting_bounds_report(&grid, pc.max_size, pc.size_weight, pc.kappa0)?;
    let header = ["size", "count", "path_bound", "sum_size_weight", "sum_tree_weight"].map(String::from).to_vec();
    let rows = rep
        .rows
        .iter()
        .map(|r| vec![r.size.to_string(), r.count.to_string(), num(r.path_bound), num(r.sum_size_weight), num(r.sum_tree_weight)])
        .collect();
    out.series("count", rep.rows.iter().map(|r| (r.size as f64, r.count as f64)));
    out.series("path_bound", rep.rows.iter().map(|r| (r.size as f64, r.path_bound)));
    out.claims.push(residual("counting", "sizes above the path bound", rep.violations as f64, 0.0, 0.0));
    out.claims.push(at_most("counting", "size-weighted sum vs geometric majorant", rep.size_sum, rep.majorant));
    out.claims.push(info("counting", "tree-weighted sum", rep.tree_sum));
    out.claims.push(info("counting", "tail estimate beyond cap", rep.tail_estimate));
    let audit = geometry_audit(&grid, pc.max_size, pc.pair_size)?;
    for (name, v) in [
        ("tree distance vs size violations", audit.size_tree_violations),
        ("nested pair violations", audit.nested_pair_violations),
        ("connected cover violations", audit.cover_violations),
        ("path bound violations", audit.path_violations),
        ("reblocked size violations", audit.reblock_size_violations),
    ] {
        out.claims.push(residual("geometry", name, v as f64, 0.0, 0.0));
    }
    out.claims.push(info("geometry", "polymers audited", audit.polymers as f64));
    out.claims.push(info("geometry", "nested pairs", audit.nested_pairs as f64));
    out.claims.push(info("geometry", "connected covers", audit.covers as f64));
    out.claims.push(info("geometry", "reblocked tree-distance exceptions", audit.reblock_tree_violations as f64));
    out.table = Some((header, rows));
    Ok(())
}

/// A polymer gas on a torus of cubes, one site per cube; each activity is a
/// polynomial in the mean field value over the polymer.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GasJson {
    pub d: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    pub side_exp: u32,
    pub polymers: Vec<PolymerActivityJson>,
}

fn default_l() -> usize {
    3
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolymerActivityJson {
    pub cubes: Vec<usize>,
    /// `c_0 + c_1 s + c_2 s² + ...` with `s` the mean over the polymer.
    pub coefficients: Vec<f64>,
}

fn mean_polynomial(cubes: Vec<usize>, coefficients: Vec<f64>) -> SiteFunction {
    Arc::new(move |v: &[f64]| {
        let s = cubes.iter().map(|&c| v[c]).sum::<f64>() / cubes.len() as f64;
        coefficients.iter().rev().fold(0.0, |acc, c| acc * s + c)
    })
}

impl GasJson {
    pub fn check_caps(&self, oracle: bool) -> CliResult<()> {
        let p = self.polymers.len();
        if p > MAX_POLYMERS {
            return Err(CliError::Cap(format!("{p} polymers exceed the family cap {MAX_POLYMERS}")));
        }
        if oracle && p > 16 {
            return Err(CliError::Cap(format!("{p} polymers exceed the brute-force cap 16")));
        }
        Ok(())
    }

    pub fn build(&self) -> CliResult<PolymerGas> {
        let lat = TorusLattice::new(self.d, self.l, self.side_exp, 0)?;
        let mut terms = Vec::new();
        for p in &self.polymers {
            let poly = Polymer::new(&lat, p.cubes.clone())?;
            terms.push((poly.clone(), mean_polynomial(poly.cubes, p.coefficients.clone())));
        }
        Ok(PolymerGas::one_site_per_cube(lat, terms)?)
    }
}

fn random_gas(cfg: &RunConfig, rng: &mut ChaCha8Rng) -> (GasJson, UltralocalMeasure) {
    let cc = &cfg.cluster;
    let n_sites = 9;
    let atoms = rng.random_range(2..=cc.atoms);
    let points: Vec<(f64, f64)> = (0..atoms).map(|_| (rng.random_range(-1.5..1.5), rng.random_range(0.2..1.0))).collect();
    let total: f64 = points.iter().map(|p| p.1).sum();
    let mu = UltralocalMeasure { points: points.into_iter().map(|(x, w)| (x, w / total)).collect() };
    let n_poly = rng.random_range(1..=cc.max_polymers);
    let mut polymers: Vec<PolymerActivityJson> = Vec::new();
    while polymers.len() < n_poly {
        let start = rng.random_range(0..n_sites);
        let len = rng.random_range(1..=cc.max_polymer_size.min(n_sites));
        let mut cubes: Vec<usize> = (0..len).map(|i| (start + i) % n_sites).collect();
        cubes.sort_unstable();
        if polymers.iter().any(|p| p.cubes == cubes) {
            continue;
        }
        let c = cc.activity;
        let coefficients = vec![rng.random_range(-c..c), rng.random_range(-c..c) * 2.0 / 3.0, rng.random_range(-c..c) / 6.0];
        polymers.push(PolymerActivityJson { cubes, coefficients });
    }
    (GasJson { d: 1, l: 3, side_exp: 2, polymers }, mu)
}

fn amplitudes_json(h: &BTreeMap<Polymer, f64>) -> serde_json::Value {
    h.iter().map(|(p, v)| json!({ "cubes": p.cubes, "value": v })).collect()
}

/// Runs the expansion on one gas, optionally against brute force.
fn cluster_instance(
    label: &str,
    gas: &GasJson,
    mu: &UltralocalMeasure,
    n_max: usize,
    oracle: bool,
    tolerance: f64,
    out: &mut Output,
) -> CliResult<serde_json::Value> {
    let built = gas.build()?;
    let res = cluster_expand(&built, mu, n_max)?;
    let log_xi = res.log_partition();
    out.claims.push(info(label, "log Xi from connected amplitudes", log_xi));
    out.claims.push(info(label, "series tail estimate", res.connected.tail_estimate));
    out.series(&format!("{label} order sum"), res.connected.order_sums.iter().enumerate().map(|(n, v)| ((n + 1) as f64, *v)));
    let mut doc = json!({
        "label": label,
        "log_partition": log_xi,
        "summable": res.connected.summable,
        "tail_estimate": if res.connected.tail_estimate.is_finite() { json!(res.connected.tail_estimate) } else { json!("inf") },
        "order_sums": res.connected.order_sums,
        "k_sharp": amplitudes_json(&res.k_sharp),
        "h_sharp": amplitudes_json(&res.connected.h_sharp),
    });
    if oracle {
        let bf = brute_force_log_partition(&built, mu)?;
        out.claims.push(residual(label, "log Xi vs brute force", log_xi, bf.log_partition, tolerance));
        doc["oracle_log_partition"] = json!(bf.log_partition);
        doc["oracle_h_sharp"] = amplitudes_json(&bf.h_sharp);
    }
    Ok(doc)
}

pub struct ClusterInputs {
    pub gas: Option<GasJson>,
    pub measure: Option<UltralocalMeasure>,
    pub oracle: bool,
}

pub fn cluster(cfg: &RunConfig, inputs: &ClusterInputs, out: &mut Output) -> CliResult<()> {
    let cc = &cfg.cluster;
    if cc.n_max > 40 {
        return Err(CliError::Cap(format!("cluster.n_max = {} exceeds 40", cc.n_max)));
    }
    if cc.max_polymers > MAX_POLYMERS.min(16) {
        return Err(CliError::Cap(format!("cluster.max_polymers = {} exceeds the brute-force cap 16", cc.max_polymers)));
    }
    let mut docs = Vec::new();
    match &inputs.gas {
        Some(gas) => {
            gas.check_caps(inputs.oracle)?;
            let mu = inputs.measure.clone().ok_or_else(|| CliError::Config("--input needs --measure".into()))?;
            let mu = UltralocalMeasure::new(mu.points)?;
            docs.push(cluster_instance("input", gas, &mu, cc.n_max, inputs.oracle, cc.tolerance, out)?);
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            for i in 0..cc.instances {
                let (gas, mu) = random_gas(cfg, &mut rng);
                docs.push(cluster_instance(&format!("instance {i}"), &gas, &mu, cc.n_max, true, cc.tolerance, out)?);
            }
            // single polymer: H# = log(1 + K#)
            let lat = TorusLattice::new(1, 3, 1, 0)?;
            let mu = UltralocalMeasure::new(vec![(-1.0, 0.3), (0.5, 0.7)])?;
            let one = Polymer::new(&lat, vec![1])?;
            let f: SiteFunction = Arc::new(|v: &[f64]| 0.2 * v[1] - 0.1);
            let gas = PolymerGas::one_site_per_cube(lat, vec![(one.clone(), f)])?;
            let res = cluster_expand(&gas, &mu, cc.n_max)?;
            let k_sharp: f64 = 0.3 * ((-0.3f64).exp() - 1.0) + 0.7 * (0.0f64.exp() - 1.0);
            out.claims.push(residual("single polymer", "H# vs log(1 + K#)", res.connected.h_sharp[&one], k_sharp.ln_1p(), 1e-14));
        }
    }
    out.details = json!({ "instances": docs });
    Ok(())
}

pub struct StepInputs {
    pub state: Option<FlowStateJson>,
    pub controls: Option<StepControls>,
}

pub fn step(cfg: &RunConfig, inputs: &StepInputs, out: &mut Output) -> CliResult<Result<FlowStateJson, String>> {
    let controls = inputs.controls.unwrap_or_else(|| cfg.step_controls());
    controls.validate()?;
    let state = match &inputs.state {
        Some(js) => FlowState::from_json(js)?,
        None => default_state(cfg)?,
    };
    let (next, rep) = rg_step(&state, &controls)?;
    let tol = cfg.identities.tolerance;
    let lf = state.geometry.l as f64;
    let growth = lf.powi(coupling_growth_exponent(state.geometry.d));
    out.claims.push(residual("step", "lambda_next", rep.lambda_next, growth * rep.lambda, 0.0));
    out.claims.push(residual("step", "evenness defect", rep.evenness_defect, 0.0, 1e-10));
    out.claims.push(residual("step", "re-extracted coefficient", rep.normalized_residual, 0.0, 1e-10));
    out.claims.push(residual("step", "log Xi cluster vs direct", rep.log_xi_cluster, rep.log_xi_direct, cfg.identities.log_xi_tolerance));
    out.claims.push(residual("step", "pipeline identities", rep.audit.worst_identity(), 0.0, tol));
    out.claims.push(residual("step", "chi probes outside the domain", (rep.chi.probes - rep.chi.inside) as f64, 0.0, 0.0));
    out.claims.push(at_most("step", "eps0 vs exp(-p0^2/2)", rep.epsilon0, rep.epsilon0_envelope));
    for b in &rep.bounds {
        out.claims.push(info("step bound", &format!("{} / envelope", b.name), b.ratio));
    }
    for (name, v) in [
        ("epsilon_next", rep.epsilon_next),
        ("mu_next", rep.mu_next),
        ("epsilon_star", rep.epsilon_star),
        ("mu_star", rep.mu_star),
        ("E_star sampled norm", rep.e_star_norm),
        ("L3 E sampled norm", rep.l3_norm),
        ("series tail", rep.series_tail),
    ] {
        out.claims.push(info("step", name, v));
    }
    out.details = serde_json::to_value(&rep).map_err(|e| CliError::Io(e.to_string()))?;
    // opaque pieces of E_{k+1} cannot be written; the report still stands
    Ok(next.to_json().map_err(|e| e.to_string()))
}

pub enum FlowMaps {
    Surrogate(SurrogateMaps),
    Pipeline,
}

fn flow_tables<M: StepMaps>(
    maps: &M,
    rep: &ConvergenceReport,
    growth: &GrowthAudit,
    vac: &VacuumEnergy,
    probe: Option<f64>,
    cfg: &RunConfig,
    out: &mut Output,
) -> CliResult<()> {
    let fc = &cfg.flow;
    out.claims.push(info("flow", "iterations", rep.iterations as f64));
    out.claims.push(residual("flow", "converged", if rep.converged { 1.0 } else { 0.0 }, 1.0, 0.0));
    out.claims.push(at_most("flow", "Picard contraction ratio", rep.contraction_ratio, 0.5));
    if let Some(p) = probe {
        out.claims.push(at_most("flow", "random-pair contraction ratio", p, 0.5));
    }
    let res = rep.residual_mu.max(rep.residual_e).max(rep.forward_residual);
    out.claims.push(residual("flow", "fixed-point residual", res, 0.0, fc.residual_tolerance));
    out.claims.push(residual("flow", "mu_K = 0 and E_0 = 0", if rep.boundary_exact && growth.boundary_exact { 0.0 } else { 1.0 }, 0.0, 0.0));
    out.claims.push(at_most("flow", "max growth ratio", growth.max_ratio, 1.0));
    out.claims.push(info("flow", "vacuum energy constant b", vac.b));
    out.claims.push(residual("flow", "vacuum energy within envelope", if vac.holds { 0.0 } else { 1.0 }, 0.0, 0.0));
    let header = ["k", "lambda", "mu", "epsilon", "e_norm", "mu_ratio", "e_ratio"].map(String::from).to_vec();
    let rows = growth
        .rows
        .iter()
        .map(|r| {
            vec![
                r.k.to_string(),
                num(r.lambda),
                num(r.mu),
                num(vac.epsilon[r.k]),
                num(r.e_norm),
                num(r.mu_ratio),
                num(r.e_ratio),
            ]
        })
        .collect();
    out.series("mu", growth.rows.iter().map(|r| (r.k as f64, r.mu)));
    out.series("e_norm", growth.rows.iter().map(|r| (r.k as f64, r.e_norm)));
    out.series("epsilon", vac.epsilon.iter().enumerate().map(|(k, e)| (k as f64, *e)));
    out.series("increment", rep.increments.iter().enumerate().map(|(n, v)| ((n + 1) as f64, *v)));
    out.table = Some((header, rows));
    out.details = json!({ "levels": maps.schedule().len(), "convergence": rep });
    Ok(())
}

pub fn flow(cfg: &RunConfig, maps: &FlowMaps, out: &mut Output) -> CliResult<()> {
    let fc = &cfg.flow;
    match maps {
        FlowMaps::Surrogate(s) => {
            let schedule = FlowSchedule::new(fc.d, cfg.global.l, fc.levels, fc.lambda, fc.delta, cfg.global.beta)?;
            let m = s.clone().with_schedule(schedule)?;
            let (fp, rep) = solve_fixed_point(&m, None, fc.tolerance, fc.max_iter)?;
            let probe = contraction_probe(&m, 32, cfg.seed)?;
            let growth = growth_audit(&m, &fp)?;
            let vac = vacuum_energy_backfill(&m, &fp)?;
            flow_tables(&m, &rep, &growth, &vac, Some(probe), cfg, out)
        }
        FlowMaps::Pipeline => {
            // the pipeline runs on the global micro-torus, in its dimension
            let geometry = cfg.step_geometry();
            let cap = PipelineMaps::max_levels(&geometry);
            if fc.levels > cap {
                return Err(CliError::Cap(format!("{} levels exceed the {cap} the pipeline torus holds", fc.levels)));
            }
            let schedule = FlowSchedule::new(geometry.d, geometry.l, fc.levels, fc.lambda, fc.delta, cfg.global.beta)?;
            let m = PipelineMaps::new(geometry, cfg.step_controls(), schedule)?;
            let (fp, rep) = solve_fixed_point(&m, None, fc.tolerance, fc.max_iter)?;
            let growth = growth_audit(&m, &fp)?;
            let vac = vacuum_energy_backfill(&m, &fp)?;
            flow_tables(&m, &rep, &growth, &vac, None, cfg, out)
        }
    }
}
