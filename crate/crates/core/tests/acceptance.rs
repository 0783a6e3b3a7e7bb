//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use blockrg::averaging::BlockMap;
use blockrg::cluster::{
    brute_force_log_partition, cluster_expand, truncation_energy, truncation_energy_quadrature, PolymerGas, SiteFunction,
    UltralocalMeasure,
};
use blockrg::flow::{
    contraction_probe, growth_audit, linear_fixed_point, solve_fixed_point, vacuum_energy_backfill, FlowSchedule,
    SurrogateMaps,
};
use blockrg::functional::{LocalFunctional, Monomial};
use blockrg::gaussian_flow::{
    a_k_recursion_residual, coupling_growth_exponent, free_step_identity_check, log_spaced, resolvent_identity_check,
    FreeFlow, GaussParams,
};
use blockrg::greens::{
    decay_probes, off_block_max, parametrix, random_walk_expansion, LocalOperator, PartitionOfUnity,
};
use blockrg::lattice::{inner_product, Field, TorusLattice};
use blockrg::linalg::{max_abs, max_abs_diff};
use blockrg::polymer::{geometry_audit, Polymer};
use blockrg::rg_step::{micro_state, power_structure, rg_step, StepControls};

type Outcome = std::result::Result<String, String>;

fn check(ok: bool, what: String) -> Outcome {
    if ok { Ok(what) } else { Err(what) }
}

fn field(lat: TorusLattice, rng: &mut ChaCha8Rng) -> Field {
    Field::from_fn(lat, |_| rng.random_range(-1.0..1.0))
}

fn averaging_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for (d, side_exp) in [(1, 3), (2, 2), (3, 2)] {
        let fine = TorusLattice::new(d, 3, side_exp, 1).map_err(|e| e.to_string())?;
        let map = BlockMap::new(fine, 1).map_err(|e| e.to_string())?;
        let nc = map.coarse.n_sites();
        let q = map.q_matrix();
        let qt = map.qt_matrix();
        worst = worst.max(max_abs_diff(&(&q * &qt), &DMatrix::identity(nc, nc)));
        let p = &qt * &q;
        worst = worst.max(max_abs_diff(&(&p * &p), &p));
        for _ in 0..5 {
            let f = field(fine, &mut rng);
            let g = field(map.coarse, &mut rng);
            let lhs = inner_product(&map.apply_q(&f).map_err(|e| e.to_string())?, &g).map_err(|e| e.to_string())?;
            let rhs = inner_product(&f, &map.apply_qt(&g).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            worst = worst.max((lhs - rhs).abs());
            worst = worst.max(map.scale_commutation_defect(&f).map_err(|e| e.to_string())?);
        }
    }
    check(worst < 1e-13, format!("worst defect {worst:.2e} (tol 1e-13) on d = 1, 2, 3"))
}

fn gaussian_identities() -> Outcome {
    let ak = a_k_recursion_residual(1.0, 3, 64).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for (d, side_exp) in [(1, 3), (2, 2)] {
        let flow = FreeFlow::new(GaussParams { d, l: 3, side_exp, k: 1, a: 1.0, mu_bar: 0.1 }).map_err(|e| e.to_string())?;
        let rep = free_step_identity_check(&flow, 100, 7).map_err(|e| e.to_string())?;
        worst = worst.max(rep.minimum_identity).max(rep.joint_expansion).max(rep.quadratic_form);
    }
    check(
        ak < 1e-13 && worst < 1e-9,
        format!("a_k recursion residual {ak:.2e} (tol 1e-13, k ≤ 64); minimum/expansion/quadratic-form worst {worst:.2e} (tol 1e-9, 100 fields)"),
    )
}

fn resolvent_identity() -> Outcome {
    let rs = log_spaced(1e-4, 1e6, 20);
    let mut worst: f64 = 0.0;
    let mut sizes = Vec::new();
    for (d, l, side_exp) in [(1, 3, 2), (2, 3, 2)] {
        let flow = FreeFlow::new(GaussParams { d, l, side_exp, k: 1, a: 1.0, mu_bar: 0.0 }).map_err(|e| e.to_string())?;
        sizes.push(format!("d={d}: {} fine, {} coarse", flow.fine.n_sites(), flow.coarse.n_sites()));
        for row in resolvent_identity_check(&flow, &rs).map_err(|e| e.to_string())? {
            worst = worst.max(row.relative_error);
        }
    }
    check(worst < 1e-8, format!("20 r-values, worst relative error {worst:.2e} (tol 1e-8); {}", sizes.join(", ")))
}

fn random_walk() -> Outcome {
    let flow = FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 4, k: 1, a: 1.0, mu_bar: 0.0 }).map_err(|e| e.to_string())?;
    let pou = PartitionOfUnity::new(flow.fine, 2).map_err(|e| e.to_string())?;
    let par = parametrix(&LocalOperator::free(&flow), &pou).map_err(|e| e.to_string())?;
    let walk = random_walk_expansion(&par, 8, None).map_err(|e| e.to_string())?;
    let err = max_abs_diff(&walk.total, flow.green());
    let scale = max_abs(flow.green());
    let s = [1.0, 0.0, 1.0];
    let gated = random_walk_expansion(&par, 8, Some(&s)).map_err(|e| e.to_string())?;
    let off = off_block_max(&gated.total, &pou, &s);
    check(
        pou.n_cubes() == 3 && walk.diagnostics.max_ratio <= 0.5 && err < 1e-6 && off < 1e-12,
        format!(
            "{} cubes of {} sites, max per-order ratio {:.3} (≤ 0.5), error {err:.2e} at order 8 (< 1e-6, entries up to {scale:.2}), off-block {off:.1e} (< 1e-12)",
            pou.n_cubes(),
            flow.fine.n_sites() / pou.n_cubes(),
            walk.diagnostics.max_ratio
        ),
    )
}

fn polymer_combinatorics() -> Outcome {
    let grid = TorusLattice::new(2, 3, 2, 0).map_err(|e| e.to_string())?;
    let a = geometry_audit(&grid, 6, 6).map_err(|e| e.to_string())?;
    let v = a.size_tree_violations + a.nested_pair_violations + a.cover_violations + a.path_violations;
    check(
        v == 0 && a.nested_pairs > 0 && a.covers > 0,
        format!(
            "{} polymers to size 6, {} nested pairs, {} covers, {v} violations",
            a.polymers, a.nested_pairs, a.covers
        ),
    )
}

fn random_gas(rng: &mut ChaCha8Rng) -> blockrg::Result<(PolymerGas, UltralocalMeasure)> {
    let lat = TorusLattice::new(1, 3, 2, 0)?;
    let n_sites = lat.n_sites();
    let atoms = rng.random_range(2..=3);
    let points: Vec<(f64, f64)> = (0..atoms).map(|_| (rng.random_range(-1.5..1.5), rng.random_range(0.2..1.0))).collect();
    let total: f64 = points.iter().map(|p| p.1).sum();
    let mu = UltralocalMeasure::new(points.into_iter().map(|(x, w)| (x, w / total)).collect())?;
    let n_poly = rng.random_range(1..=5);
    let mut entries: Vec<(Polymer, SiteFunction)> = Vec::new();
    while entries.len() < n_poly {
        let start = rng.random_range(0..n_sites);
        let len = rng.random_range(1..=3);
        let mut cubes: Vec<usize> = (0..len).map(|i| (start + i) % n_sites).collect();
        cubes.sort_unstable();
        let poly = Polymer::new(&lat, cubes.clone())?;
        if entries.iter().any(|(p, _)| *p == poly) {
            continue;
        }
        let (c0, c1, c2) = (rng.random_range(-0.03..0.03), rng.random_range(-0.02..0.02), rng.random_range(-0.005..0.005));
        let f: SiteFunction = Arc::new(move |v: &[f64]| {
            let s = cubes.iter().map(|&c| v[c]).sum::<f64>() / cubes.len() as f64;
            c0 + c1 * s + c2 * s * s
        });
        entries.push((poly, f));
    }
    Ok((PolymerGas::one_site_per_cube(lat, entries)?, mu))
}

fn cluster_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst: f64 = 0.0;
    let instances = 30;
    for _ in 0..instances {
        let (gas, mu) = random_gas(&mut rng).map_err(|e| e.to_string())?;
        let res = cluster_expand(&gas, &mu, 12).map_err(|e| e.to_string())?;
        let bf = brute_force_log_partition(&gas, &mu).map_err(|e| e.to_string())?;
        worst = worst.max((res.log_partition() - bf.log_partition).abs());
    }
    let lat = TorusLattice::new(1, 3, 1, 0).map_err(|e| e.to_string())?;
    let mu = UltralocalMeasure::new(vec![(-1.0, 0.3), (0.5, 0.7)]).map_err(|e| e.to_string())?;
    let one = Polymer::from_sorted_unchecked(vec![1]);
    let f: SiteFunction = Arc::new(|v: &[f64]| 0.2 * v[1] - 0.1);
    let gas = PolymerGas::one_site_per_cube(lat, vec![(one.clone(), f)]).map_err(|e| e.to_string())?;
    let res = cluster_expand(&gas, &mu, 12).map_err(|e| e.to_string())?;
    let k_sharp = 0.3 * ((-0.3f64).exp() - 1.0) + 0.7 * (0.0f64.exp() - 1.0);
    let single = (res.connected.h_sharp[&one] - k_sharp.ln_1p()).abs();
    check(
        worst < 1e-10 && single < 1e-14,
        format!("{instances} random instances, worst |ΣH# - log Ξ| {worst:.2e} (tol 1e-10); single polymer gap {single:.1e}"),
    )
}

fn normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut residual: f64 = 0.0;
    let mut spread: f64 = 0.0;
    let mut quadratic: f64 = 0.0;
    for (d, side_exp, spacing) in [(1, 3, 1), (2, 2, 1)] {
        let lat = TorusLattice::new(d, 3, side_exp, spacing).map_err(|e| e.to_string())?;
        for _ in 0..6 {
            let mut f = LocalFunctional::new(lat, 1).map_err(|e| e.to_string())?;
            let mut q = LocalFunctional::new(lat, 1).map_err(|e| e.to_string())?;
            let cl = f.cube_lattice();
            let (c0, c2, c4) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let (g, pair) = (rng.random_range(-0.5..0.5), rng.random_range(-0.2..0.2));
            for c in 0..cl.n_sites() {
                let x = Polymer::from_sorted_unchecked(vec![c]);
                for (coeff, p, g_pow, dir) in [(c0, 0, 0, 0), (c2, 2, 0, 0), (c4, 4, 0, 0), (g, 1, 1, d - 1), (0.3, 0, 2, 0)] {
                    f.add_monomial(&x, Monomial::new(coeff, p, g_pow, dir)).map_err(|e| e.to_string())?;
                }
                for (coeff, p, g_pow, dir) in [(c0, 0, 0, 0), (c2, 2, 0, 0), (g, 1, 1, 0)] {
                    q.add_monomial(&x, Monomial::new(coeff, p, g_pow, dir)).map_err(|e| e.to_string())?;
                }
                let mut two = vec![c, cl.shift(c, 0, 1)];
                two.sort_unstable();
                let y = Polymer::new(&cl, two).map_err(|e| e.to_string())?;
                f.add_monomial(&y, Monomial::new(pair, 2, 0, 0)).map_err(|e| e.to_string())?;
            }
            let n = f.normalize().map_err(|e| e.to_string())?;
            spread = spread.max(n.epsilon_spread).max(n.mu_spread);
            let again = n.remainder.normalize().map_err(|e| e.to_string())?;
            residual = again.extractions.iter().map(|x| x.max_abs()).fold(residual, f64::max);
            let nq = q.normalize().map_err(|e| e.to_string())?;
            for _ in 0..3 {
                let phi = field(lat, &mut rng);
                quadratic = quadratic.max(nq.remainder.evaluate_total(&phi).map_err(|e| e.to_string())?.abs());
            }
        }
    }
    check(
        residual < 1e-10 && spread < 1e-10 && quadratic < 1e-10,
        format!("re-extraction {residual:.2e}, base-cube spread {spread:.2e}, quadratic remainder {quadratic:.2e} (tol 1e-10)"),
    )
}

fn full_step() -> Outcome {
    let controls = StepControls::default();
    let hi = micro_state(1e-3).map_err(|e| e.to_string())?;
    let lo = micro_state(1e-4).map_err(|e| e.to_string())?;
    let (next, _) = rg_step(&hi, &controls).map_err(|e| e.to_string())?;
    let (ps, rep, _) = power_structure(&hi, &lo, &controls).map_err(|e| e.to_string())?;
    let lf = hi.geometry.l as f64;
    let lambda_exact = next.lambda == lf.powi(coupling_growth_exponent(hi.geometry.d)) * hi.lambda;
    let xi_gap = (rep.log_xi_cluster - rep.log_xi_direct).abs();
    let ok = lambda_exact
        && rep.evenness_defect < 1e-10
        && rep.normalized_residual < 1e-10
        && xi_gap < 1e-7
        && rep.audit.worst_identity() < 1e-9
        && rep.chi.inside == rep.chi.probes
        && ps.mu_star_ok
        && ps.e_star_ok;
    check(
        ok,
        format!(
            "λ' = {} (exact: {lambda_exact}), evenness {:.1e}, re-extraction {:.1e}, log Ξ' gap {xi_gap:.1e}, identities {:.1e}, μ* ratio {:.3} -> {:.3}, E* ratio {:.3} -> {:.3}",
            next.lambda,
            rep.evenness_defect,
            rep.normalized_residual,
            rep.audit.worst_identity(),
            ps.mu_star_ratio.0,
            ps.mu_star_ratio.1,
            ps.e_star_ratio.0,
            ps.e_star_ratio.1
        ),
    )
}

fn flow_solver() -> Outcome {
    let schedule = FlowSchedule::new(3, 3, 20, 1.0, 8, 0.1).map_err(|e| e.to_string())?;
    let maps = SurrogateMaps::default().with_schedule(schedule).map_err(|e| e.to_string())?;
    let (fp, rep) = solve_fixed_point(&maps, None, 1e-15, 200).map_err(|e| e.to_string())?;
    let probe = contraction_probe(&maps, 32, 3).map_err(|e| e.to_string())?;
    let growth = growth_audit(&maps, &fp).map_err(|e| e.to_string())?;
    let vac = vacuum_energy_backfill(&maps, &fp).map_err(|e| e.to_string())?;
    let linear = SurrogateMaps::linear(0.1, schedule).map_err(|e| e.to_string())?;
    let (lfp, _) = solve_fixed_point(&linear, None, 1e-16, 200).map_err(|e| e.to_string())?;
    let direct = linear_fixed_point(&schedule, 0.1).map_err(|e| e.to_string())?;
    let lin_gap = lfp.mu.iter().zip(&direct).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let residual = rep.residual_mu.max(rep.residual_e).max(rep.forward_residual);
    let ok = rep.converged
        && rep.contraction_ratio <= 0.5
        && probe <= 0.5
        && residual < 1e-12
        && rep.boundary_exact
        && growth.boundary_exact
        && growth.max_ratio <= 1.0
        && vac.holds
        && lin_gap < 1e-12;
    check(
        ok,
        format!(
            "K = 20: Picard ratio {:.3}, probe ratio {probe:.3}, residual {residual:.1e}, growth max {:.3}, vacuum envelope {}, linear gap {lin_gap:.1e}",
            rep.contraction_ratio, growth.max_ratio, vac.holds
        ),
    )
}

fn decay_probes_and_truncation() -> Outcome {
    let flow = FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 4, k: 1, a: 1.0, mu_bar: 0.0 }).map_err(|e| e.to_string())?;
    let probes = decay_probes(&flow, &[0.0, 1.0, 10.0], 9).map_err(|e| e.to_string())?;
    let min_rate = probes.iter().map(|p| p.fit.gamma).fold(f64::INFINITY, f64::min);
    let mut worst: f64 = 0.0;
    let mut agree: f64 = 0.0;
    for p0 in [1.0, 1.5, 2.0, 3.0, 1e3f64.ln()] {
        let measured = truncation_energy_quadrature(p0, 24).map_err(|e| e.to_string())?;
        agree = agree.max((measured - truncation_energy(p0)).abs());
        worst = worst.max(measured / ((-0.5 * p0 * p0).exp() * 10.0));
    }
    check(
        min_rate > 0.0 && worst <= 1.0 && agree < 1e-10,
        format!("{} decay fits, smallest rate {min_rate:.3}; ε⁰ / (10 e^(-p0²/2)) ≤ {worst:.3}", probes.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome, u64); 10] = [
        ("averaging algebra", averaging_algebra, 1),
        ("gaussian flow identities", gaussian_identities, 10),
        ("resolvent identity", resolvent_identity, 30),
        ("random-walk expansion", random_walk, 60),
        ("polymer combinatorics", polymer_combinatorics, 60),
        ("cluster-expansion oracle", cluster_oracle, 120),
        ("normalization", normalization, 5),
        ("full rg step", full_step, 600),
        ("flow solver", flow_solver, 10),
        ("decay probes", decay_probes_and_truncation, 60),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let out = run();
        let took = t.elapsed();
        let in_time = took <= Duration::from_secs(*budget);
        let (ok, detail) = match out {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "{} {:>2} {name}: {detail} [{:.2} s, budget {budget} s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            took.as_secs_f64()
        );
    }
    if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE }
}
