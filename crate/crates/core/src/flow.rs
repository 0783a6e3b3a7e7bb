//! The counterterm flow as a fixed point: `μ` runs backward from `μ_K = 0`,
//! `E` runs forward from `E_0 = 0`, and `ε` is filled in afterwards.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::functional::{FieldDomain, LocalFunctional};
use crate::gaussian_flow::{coupling_at_level, coupling_growth_exponent};
use crate::rg_step::{scaling_parts, FlowState, Fluctuation, StepControls, StepGeometry};
use crate::{Error, Result};

/// `λ_k = L^{-(4-d)(N-k)} λ` with `N = K + Δ`, so `λ_K = L^{-(4-d)Δ} λ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSchedule {
    pub d: usize,
    pub l: usize,
    /// Last level `K`.
    pub levels: u32,
    pub lambda: f64,
    pub delta: u32,
    pub beta: f64,
}

impl FlowSchedule {
    pub fn new(d: usize, l: usize, levels: u32, lambda: f64, delta: u32, beta: f64) -> Result<Self> {
        if !(1..=3).contains(&d) || l < 2 {
            return Err(Error::InvalidParameter(format!("need d in 1..=3 and L ≥ 2, got d = {d}, L = {l}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("λ = {lambda} must be positive")));
        }
        if !(beta > 0.0 && beta < 0.25) {
            return Err(Error::InvalidParameter(format!("β = {beta} must lie in (0, 1/4)")));
        }
        Ok(FlowSchedule { d, l, levels, lambda, delta, beta })
    }

    pub fn lambda_at(&self, k: usize) -> f64 {
        coupling_at_level(self.lambda, self.l, self.d, self.levels + self.delta, k as u32)
    }

    pub fn len(&self) -> usize {
        self.levels as usize + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn lf(&self) -> f64 {
        self.l as f64
    }
}

/// What one step does to `(μ_k, E_k)`: the linear scalings and the starred
/// terms.
#[derive(Clone, Debug)]
pub struct StepImage<E> {
    pub l1: f64,
    pub l2: f64,
    /// `ℒ₃E_k`, living on level `k + 1`.
    pub l3: E,
    pub epsilon_star: f64,
    pub mu_star: f64,
    /// `E*_k`, living on level `k + 1`.
    pub e_star: E,
}

pub trait StepMaps {
    type E: Clone;

    fn schedule(&self) -> &FlowSchedule;

    fn zero(&self, k: usize) -> Result<Self::E>;

    /// Upper bound on `‖E‖_{k,κ}`.
    fn norm(&self, k: usize, e: &Self::E) -> Result<f64>;

    fn combine(&self, a: f64, x: &Self::E, b: f64, y: &Self::E) -> Result<Self::E>;

    fn image(&self, k: usize, mu: f64, e: &Self::E) -> Result<StepImage<Self::E>>;

    /// A random `E` with norm at most `radius`, when the maps can draw one.
    fn random_e(&self, _k: usize, _radius: f64, _rng: &mut ChaCha8Rng) -> Option<Self::E> {
        None
    }
}

#[derive(Clone, Debug)]
pub struct FlowSequence<E> {
    pub mu: Vec<f64>,
    pub e: Vec<E>,
}

impl<E: Clone> FlowSequence<E> {
    pub fn zero<M: StepMaps<E = E>>(maps: &M) -> Result<Self> {
        let n = maps.schedule().len();
        Ok(FlowSequence { mu: vec![0.0; n], e: (0..n).map(|k| maps.zero(k)).collect::<Result<_>>()? })
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }
}

/// `‖ξ‖ = sup_k max(λ_k^{-1/2-β}|μ_k|, λ_k^{-β}‖E_k‖)`.
pub fn seq_norm<M: StepMaps>(maps: &M, seq: &FlowSequence<M::E>) -> Result<f64> {
    let s = maps.schedule();
    let mut worst: f64 = 0.0;
    for k in 0..seq.len() {
        let lam = s.lambda_at(k);
        worst = worst.max(seq.mu[k].abs() * lam.powf(-0.5 - s.beta));
        worst = worst.max(maps.norm(k, &seq.e[k])? * lam.powf(-s.beta));
    }
    Ok(worst)
}

/// `‖ξ - η‖` in the sequence norm.
pub fn seq_distance<M: StepMaps>(maps: &M, x: &FlowSequence<M::E>, y: &FlowSequence<M::E>) -> Result<f64> {
    let diff = FlowSequence {
        mu: x.mu.iter().zip(&y.mu).map(|(a, b)| a - b).collect(),
        e: x.e.iter().zip(&y.e).map(|(a, b)| maps.combine(1.0, a, -1.0, b)).collect::<Result<_>>()?,
    };
    seq_norm(maps, &diff)
}

fn images<M: StepMaps>(maps: &M, seq: &FlowSequence<M::E>) -> Result<Vec<StepImage<M::E>>> {
    let last = seq.len() - 1;
    (0..last).map(|k| maps.image(k, seq.mu[k], &seq.e[k])).collect()
}

/// `μ'_k = L^{-2}(μ_{k+1} - ℒ₂E_k - μ*_k)` for `k < K`, `μ'_K = 0`;
/// `E'_k = ℒ₃E_{k-1} + E*_{k-1}` for `k ≥ 1`, `E'_0 = 0`.
pub fn apply_t<M: StepMaps>(maps: &M, seq: &FlowSequence<M::E>) -> Result<FlowSequence<M::E>> {
    let s = maps.schedule();
    let n = seq.len();
    if n != s.len() {
        return Err(Error::InvalidParameter(format!("sequence has {n} entries, schedule {}", s.len())));
    }
    let img = images(maps, seq)?;
    let l2 = s.lf().powi(-2);
    let mut mu = vec![0.0; n];
    let mut e = vec![maps.zero(0)?];
    for k in 0..n - 1 {
        mu[k] = l2 * (seq.mu[k + 1] - img[k].l2 - img[k].mu_star);
        e.push(maps.combine(1.0, &img[k].l3, 1.0, &img[k].e_star)?);
    }
    Ok(FlowSequence { mu, e })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub iterations: usize,
    /// `‖ξ^{(n+1)} - ξ^{(n)}‖` per iteration.
    pub increments: Vec<f64>,
    /// Largest ratio of consecutive increments above the noise floor.
    pub contraction_ratio: f64,
    pub converged: bool,
    /// Componentwise residual of the fixed-point equations.
    pub residual_mu: f64,
    pub residual_e: f64,
    /// `max |μ_{k+1} - L²μ_k - ℒ₂E_k - μ*_k|`.
    pub forward_residual: f64,
    pub norm: f64,
    /// `‖ξ‖ < 1`.
    pub in_unit_ball: bool,
    pub boundary_exact: bool,
}

/// Picard iteration of `T` from `start` (the zero sequence by default).
pub fn solve_fixed_point<M: StepMaps>(
    maps: &M,
    start: Option<FlowSequence<M::E>>,
    tol: f64,
    max_iter: usize,
) -> Result<(FlowSequence<M::E>, ConvergenceReport)> {
    let mut cur = match start {
        Some(s) => s,
        None => FlowSequence::zero(maps)?,
    };
    let floor = 1e3 * f64::EPSILON;
    let mut increments = Vec::new();
    let mut ratio: f64 = 0.0;
    let mut growing = 0;
    let mut converged = false;
    for _ in 0..max_iter {
        let next = apply_t(maps, &cur)?;
        let inc = seq_distance(maps, &next, &cur)?;
        if let Some(&prev) = increments.last() {
            if prev > floor {
                let r = inc / prev;
                ratio = ratio.max(r);
                growing = if r >= 1.0 { growing + 1 } else { 0 };
                if growing >= 3 {
                    return Err(Error::NoContraction(format!(
                        "increments grew three times in a row: {:?}",
                        &increments[increments.len().saturating_sub(3)..]
                    )));
                }
            }
        }
        increments.push(inc);
        cur = next;
        if inc <= tol {
            converged = true;
            break;
        }
    }
    let report = fixed_point_report(maps, &cur, increments, ratio, converged)?;
    Ok((cur, report))
}

fn fixed_point_report<M: StepMaps>(
    maps: &M,
    seq: &FlowSequence<M::E>,
    increments: Vec<f64>,
    ratio: f64,
    converged: bool,
) -> Result<ConvergenceReport> {
    let s = maps.schedule();
    let n = seq.len();
    let img = images(maps, seq)?;
    let lf = s.lf();
    let mut residual_mu: f64 = seq.mu[n - 1].abs();
    let mut residual_e = maps.norm(0, &seq.e[0])?;
    let mut forward: f64 = 0.0;
    for k in 0..n - 1 {
        let back = lf.powi(-2) * (seq.mu[k + 1] - img[k].l2 - img[k].mu_star);
        residual_mu = residual_mu.max((seq.mu[k] - back).abs());
        forward = forward.max((seq.mu[k + 1] - lf * lf * seq.mu[k] - img[k].l2 - img[k].mu_star).abs());
        let e_next = maps.combine(1.0, &img[k].l3, 1.0, &img[k].e_star)?;
        residual_e = residual_e.max(maps.norm(k + 1, &maps.combine(1.0, &seq.e[k + 1], -1.0, &e_next)?)?);
    }
    let norm = seq_norm(maps, seq)?;
    Ok(ConvergenceReport {
        iterations: increments.len(),
        increments,
        contraction_ratio: ratio,
        converged,
        residual_mu,
        residual_e,
        forward_residual: forward,
        norm,
        in_unit_ball: norm < 1.0,
        boundary_exact: seq.mu[n - 1] == 0.0 && maps.norm(0, &seq.e[0])? == 0.0,
    })
}

/// Largest `‖Tξ - Tη‖ / ‖ξ - η‖` over random pairs in the unit ball.
pub fn contraction_probe<M: StepMaps>(maps: &M, samples: usize, seed: u64) -> Result<f64> {
    let s = maps.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Result<FlowSequence<M::E>> {
        let n = s.len();
        let mut mu = vec![0.0; n];
        let mut e = vec![maps.zero(0)?];
        for k in 0..n {
            let lam = s.lambda_at(k);
            if k + 1 < n {
                mu[k] = rng.random_range(-1.0..1.0) * lam.powf(0.5 + s.beta);
            }
            if k > 0 {
                let r = rng.random_range(0.0..1.0) * lam.powf(s.beta);
                e.push(maps.random_e(k, r, rng).ok_or_else(|| Error::Precondition("maps cannot draw E".into()))?);
            }
        }
        Ok(FlowSequence { mu, e })
    };
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let x = draw(&mut rng)?;
        let y = draw(&mut rng)?;
        let d = seq_distance(maps, &x, &y)?;
        if d > 0.0 {
            worst = worst.max(seq_distance(maps, &apply_t(maps, &x)?, &apply_t(maps, &y)?)? / d);
        }
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VacuumEnergy {
    pub epsilon: Vec<f64>,
    /// Measured `b = L^{-d} max_k |ℒ₁E_k + ε*_k| λ_k^{-β}`.
    pub b: f64,
    /// `b Σ_{j<n} L^{((4-d)β-d)j} λ_{K-n}^β` at `k = K - n`.
    pub envelope: Vec<f64>,
    pub holds: bool,
}

/// `ε_K = 0`, `ε_k = L^{-d}(ε_{k+1} - ℒ₁E_k - ε*_k)`.
pub fn vacuum_energy_backfill<M: StepMaps>(maps: &M, seq: &FlowSequence<M::E>) -> Result<VacuumEnergy> {
    let s = maps.schedule();
    let n = seq.len();
    let img = images(maps, seq)?;
    let ld = s.lf().powi(s.d as i32);
    let mut eps = vec![0.0; n];
    for k in (0..n - 1).rev() {
        eps[k] = (eps[k + 1] - img[k].l1 - img[k].epsilon_star) / ld;
    }
    let b = (0..n - 1)
        .map(|k| (img[k].l1 + img[k].epsilon_star).abs() * s.lambda_at(k).powf(-s.beta) / ld)
        .fold(0.0, f64::max);
    let q = s.lf().powf(coupling_growth_exponent(s.d) as f64 * s.beta - s.d as f64);
    let envelope: Vec<f64> = (0..n)
        .map(|k| {
            let steps = (n - 1 - k) as i32;
            b * (0..steps).map(|j| q.powi(j)).sum::<f64>() * s.lambda_at(k).powf(s.beta)
        })
        .collect();
    let holds = eps.iter().zip(&envelope).all(|(e, env)| e.abs() <= env * (1.0 + 1e-12) + 1e-300);
    Ok(VacuumEnergy { epsilon: eps, b, envelope, holds })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthRow {
    pub k: usize,
    pub lambda: f64,
    pub mu: f64,
    pub e_norm: f64,
    /// `|μ_k| / λ_k^{1/2+β}`.
    pub mu_ratio: f64,
    /// `‖E_k‖ / λ_k^β`.
    pub e_ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GrowthAudit {
    pub rows: Vec<GrowthRow>,
    pub max_ratio: f64,
    pub boundary_exact: bool,
}

pub fn growth_audit<M: StepMaps>(maps: &M, seq: &FlowSequence<M::E>) -> Result<GrowthAudit> {
    let s = maps.schedule();
    let mut rows = Vec::new();
    for k in 0..seq.len() {
        let lam = s.lambda_at(k);
        let e_norm = maps.norm(k, &seq.e[k])?;
        rows.push(GrowthRow {
            k,
            lambda: lam,
            mu: seq.mu[k],
            e_norm,
            mu_ratio: seq.mu[k].abs() / lam.powf(0.5 + s.beta),
            e_ratio: e_norm / lam.powf(s.beta),
        });
    }
    let max_ratio = rows.iter().map(|r| r.mu_ratio.max(r.e_ratio)).fold(0.0, f64::max);
    let boundary_exact = seq.mu[seq.len() - 1] == 0.0 && rows[0].e_norm == 0.0;
    Ok(GrowthAudit { rows, max_ratio, boundary_exact })
}

/// Smooth maps obeying the step bounds, acting on a short coefficient
/// vector in place of `E`. The norm of `E` is its sup norm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SurrogateMaps {
    /// Length of the coefficient vector standing in for `E`.
    pub dim: usize,
    pub epsilon: f64,
    /// `ℒ₁E = c · mean(E)`.
    pub l1_coeff: f64,
    /// `ℒ₂E = c L^{-ε} λ^{1/2+6ε} mean(E)`.
    pub l2_coeff: f64,
    /// `ℒ₃E = c · shift(E)`.
    pub l3_coeff: f64,
    /// `ε* = c λ^{1/4-10ε} (1 + ½ tanh(μ λ^{-1/2}))`.
    pub epsilon_star_coeff: f64,
    /// `μ* = c λ^{3/4-4ε} (1 + g tanh(μ λ^{-1/2}) + g tanh(mean(E) λ^{-β}))`.
    pub mu_star_coeff: f64,
    /// `E* = c λ^{1/4-10ε} (u + g tanh²(μ λ^{-1/2}) v + g tanh(E λ^{-β}))`.
    pub e_star_coeff: f64,
    /// The coupling `g` of the starred maps to `(μ, E)`.
    pub coupling: f64,
    /// Overall factor on `μ*`.
    pub mu_star_scale: f64,
    #[serde(skip)]
    pub schedule: Option<FlowSchedule>,
}

impl Default for SurrogateMaps {
    fn default() -> Self {
        SurrogateMaps {
            dim: 4,
            epsilon: 0.01,
            l1_coeff: 0.1,
            l2_coeff: 0.1,
            l3_coeff: 0.25,
            epsilon_star_coeff: 0.1,
            mu_star_coeff: 0.1,
            e_star_coeff: 0.1,
            coupling: 0.1,
            mu_star_scale: 1.0,
            schedule: None,
        }
    }
}

impl SurrogateMaps {
    pub fn with_schedule(mut self, schedule: FlowSchedule) -> Result<Self> {
        if self.dim == 0 {
            return Err(Error::InvalidParameter("surrogate dimension must be positive".into()));
        }
        if !(self.epsilon >= 0.0 && 10.0 * self.epsilon + schedule.beta < 0.25) {
            return Err(Error::InvalidParameter("need β < 1/4 - 10ε".into()));
        }
        self.schedule = Some(schedule);
        Ok(self)
    }

    /// `μ* = c λ^{3/4}` and nothing else.
    pub fn linear(mu_star: f64, schedule: FlowSchedule) -> Result<Self> {
        SurrogateMaps {
            epsilon: 0.0,
            l1_coeff: 0.0,
            l2_coeff: 0.0,
            l3_coeff: 0.0,
            epsilon_star_coeff: 0.0,
            mu_star_coeff: mu_star,
            e_star_coeff: 0.0,
            coupling: 0.0,
            ..SurrogateMaps::default()
        }
        .with_schedule(schedule)
    }

    pub fn zero(schedule: FlowSchedule) -> Result<Self> {
        Self::linear(0.0, schedule)?.with_schedule(schedule)
    }

    fn mean(e: &[f64]) -> f64 {
        e.iter().sum::<f64>() / e.len() as f64
    }
}

impl StepMaps for SurrogateMaps {
    type E = Vec<f64>;

    fn schedule(&self) -> &FlowSchedule {
        self.schedule.as_ref().expect("surrogate maps need a schedule")
    }

    fn zero(&self, _k: usize) -> Result<Vec<f64>> {
        Ok(vec![0.0; self.dim])
    }

    fn norm(&self, _k: usize, e: &Vec<f64>) -> Result<f64> {
        Ok(e.iter().fold(0.0, |m, v| m.max(v.abs())))
    }

    fn combine(&self, a: f64, x: &Vec<f64>, b: f64, y: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(x.iter().zip(y).map(|(p, q)| a * p + b * q).collect())
    }

    fn image(&self, k: usize, mu: f64, e: &Vec<f64>) -> Result<StepImage<Vec<f64>>> {
        let s = self.schedule();
        let lam = s.lambda_at(k);
        let eps = self.epsilon;
        let g = self.coupling;
        let mean = Self::mean(e);
        let tmu = (mu / lam.sqrt()).tanh();
        let te = (mean * lam.powf(-s.beta)).tanh();
        let n = self.dim;
        let mut l3 = vec![0.0; n];
        for i in 0..n {
            l3[(i + 1) % n] = self.l3_coeff * e[i];
        }
        let e_env = self.e_star_coeff * lam.powf(0.25 - 10.0 * eps);
        let e_star = (0..n)
            .map(|i| {
                let u = if i == 0 { 1.0 } else { 0.0 };
                let v = if i % 2 == 0 { 1.0 } else { -1.0 };
                e_env * (u + g * tmu * tmu * v + g * (e[i] * lam.powf(-s.beta)).tanh())
            })
            .collect();
        Ok(StepImage {
            l1: self.l1_coeff * mean,
            l2: self.l2_coeff * s.lf().powf(-eps) * lam.powf(0.5 + 6.0 * eps) * mean,
            l3,
            epsilon_star: self.epsilon_star_coeff * lam.powf(0.25 - 10.0 * eps) * (1.0 + 0.5 * tmu),
            mu_star: self.mu_star_scale * self.mu_star_coeff * lam.powf(0.75 - 4.0 * eps) * (1.0 + g * tmu + g * te),
            e_star,
        })
    }

    fn random_e(&self, _k: usize, radius: f64, rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        Some((0..self.dim).map(|_| radius * rng.random_range(-1.0..1.0)).collect())
    }
}

/// The linear surrogate `μ*_k = c λ_k^{3/4}` fixed point as the solution of
/// the bidiagonal system `L²μ_k - μ_{k+1} = -μ*_k`, `μ_K = 0`.
pub fn linear_fixed_point(schedule: &FlowSchedule, mu_star: f64) -> Result<Vec<f64>> {
    let n = schedule.len();
    let l2 = schedule.lf().powi(2);
    let a = DMatrix::from_fn(n, n, |i, j| {
        if i == n - 1 {
            if j == n - 1 { 1.0 } else { 0.0 }
        } else if i == j {
            l2
        } else if j == i + 1 {
            -1.0
        } else {
            0.0
        }
    });
    let b = DVector::from_fn(n, |i, _| if i == n - 1 { 0.0 } else { -mu_star * schedule.lambda_at(i).powf(0.75) });
    let x = a.lu().solve(&b).ok_or_else(|| Error::Singular("linear flow system".into()))?;
    Ok(x.as_slice().to_vec())
}

/// `‖ξ(t)‖` for the fixed points with `μ*` scaled by each `t`.
pub fn monotone_probe(maps: &SurrogateMaps, ts: &[f64], tol: f64) -> Result<Vec<(f64, f64)>> {
    ts.iter()
        .map(|&t| {
            let m = SurrogateMaps { mu_star_scale: t * maps.mu_star_scale, ..maps.clone() };
            let (_, rep) = solve_fixed_point(&m, None, tol, 200)?;
            Ok((t, rep.norm))
        })
        .collect()
}

/// The step maps produced by the full small-field step, with level `k` of the
/// flow run as step level `k + 1` on a fixed micro-torus.
pub struct PipelineMaps {
    pub geometry: StepGeometry,
    pub controls: StepControls,
    pub schedule: FlowSchedule,
}

impl PipelineMaps {
    /// Number of flow levels the torus can hold.
    pub fn max_levels(geometry: &StepGeometry) -> u32 {
        geometry.side_exp.saturating_sub(geometry.m + 1)
    }

    pub fn new(geometry: StepGeometry, controls: StepControls, schedule: FlowSchedule) -> Result<Self> {
        if schedule.d != geometry.d || schedule.l != geometry.l {
            return Err(Error::InvalidParameter("schedule and geometry disagree on d or L".into()));
        }
        let cap = Self::max_levels(&geometry);
        if schedule.levels > cap {
            return Err(Error::CapExceeded(format!("{} levels exceed the {cap} this torus holds", schedule.levels)));
        }
        Ok(PipelineMaps { geometry, controls, schedule })
    }

    fn domain(&self, k: usize) -> Result<FieldDomain> {
        FieldDomain::new(self.schedule.lambda_at(k), self.controls.epsilon, self.controls.alpha)
    }
}

impl StepMaps for PipelineMaps {
    type E = LocalFunctional;

    fn schedule(&self) -> &FlowSchedule {
        &self.schedule
    }

    fn zero(&self, k: usize) -> Result<LocalFunctional> {
        let level = k as u32 + 1;
        LocalFunctional::new(self.geometry.field_lattice(level)?, self.geometry.cube_exp(level))
    }

    fn norm(&self, k: usize, e: &LocalFunctional) -> Result<f64> {
        if e.terms.is_empty() {
            return Ok(0.0);
        }
        Ok(e.global_norm_best(&self.domain(k)?, self.controls.kappa)?.value)
    }

    fn combine(&self, a: f64, x: &LocalFunctional, b: f64, y: &LocalFunctional) -> Result<LocalFunctional> {
        x.linear_combination(a, y, b)
    }

    fn image(&self, k: usize, mu: f64, e: &LocalFunctional) -> Result<StepImage<LocalFunctional>> {
        let state = FlowState::new(self.geometry, k as u32 + 1, 0.0, mu, self.schedule.lambda_at(k), Some(e.clone()))?;
        state.check_hypotheses(&self.controls)?;
        let fl = Arc::new(Fluctuation::new(&state, &self.controls)?);
        let (e_part, s_part) = scaling_parts(&fl, &self.controls)?;
        Ok(StepImage {
            l1: e_part.epsilon,
            l2: e_part.mu,
            l3: e_part.remainder,
            epsilon_star: s_part.epsilon,
            mu_star: s_part.mu,
            e_star: s_part.remainder,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, ProptestConfig};

    fn schedule() -> FlowSchedule {
        FlowSchedule::new(3, 3, 20, 1.0, 8, 0.1).unwrap()
    }

    fn surrogate() -> SurrogateMaps {
        SurrogateMaps::default().with_schedule(schedule()).unwrap()
    }

    #[test]
    fn schedule_endpoints() {
        let s = schedule();
        assert!((s.lambda_at(20) - 3f64.powi(-8)).abs() < 1e-18);
        assert!((s.lambda_at(19) * 3.0 - s.lambda_at(20)).abs() < 1e-18);
    }

    #[test]
    fn norm_examples() {
        let m = surrogate();
        let mut seq = FlowSequence::zero(&m).unwrap();
        assert_eq!(seq_norm(&m, &seq).unwrap(), 0.0);
        let s = schedule();
        for k in 0..seq.len() {
            seq.mu[k] = s.lambda_at(k).powf(0.5 + s.beta);
        }
        assert!((seq_norm(&m, &seq).unwrap() - 1.0).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..seq.len() {
            seq.mu[k] = rng.random_range(-1e-3..1e-3);
            seq.e[k] = (0..4).map(|_| rng.random_range(-1e-2..1e-2)).collect();
        }
        let mut want: f64 = 0.0;
        for k in 0..seq.len() {
            let lam = s.lambda_at(k);
            want = want.max(seq.mu[k].abs() / lam.powf(0.6));
            for v in &seq.e[k] {
                want = want.max(v.abs() / lam.powf(0.1));
            }
        }
        assert!((seq_norm(&m, &seq).unwrap() - want).abs() <= 1e-12 * want);
    }

    #[test]
    fn zero_maps() {
        let m = SurrogateMaps::zero(schedule()).unwrap();
        let mut seq = FlowSequence::zero(&m).unwrap();
        seq.mu[5] = 0.3;
        seq.e[4] = vec![1.0; 4];
        let t = apply_t(&m, &seq).unwrap();
        assert!((t.mu[4] - 0.3 / 9.0).abs() < 1e-15);
        assert!(t.e.iter().all(|e| e.iter().all(|v| *v == 0.0)));
        let (fp, rep) = solve_fixed_point(&m, None, 1e-14, 10).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!(fp.mu.iter().all(|v| *v == 0.0));
    }

    /// Surrogate maps with `μ*` or `ε*` replaced by constants.
    struct Constant {
        inner: SurrogateMaps,
        mu_star: f64,
        epsilon_star: f64,
    }

    impl StepMaps for Constant {
        type E = Vec<f64>;
        fn schedule(&self) -> &FlowSchedule {
            self.inner.schedule()
        }
        fn zero(&self, k: usize) -> Result<Vec<f64>> {
            self.inner.zero(k)
        }
        fn norm(&self, k: usize, e: &Vec<f64>) -> Result<f64> {
            self.inner.norm(k, e)
        }
        fn combine(&self, a: f64, x: &Vec<f64>, b: f64, y: &Vec<f64>) -> Result<Vec<f64>> {
            self.inner.combine(a, x, b, y)
        }
        fn image(&self, k: usize, mu: f64, e: &Vec<f64>) -> Result<StepImage<Vec<f64>>> {
            let mut img = self.inner.image(k, mu, e)?;
            img.mu_star = self.mu_star;
            img.epsilon_star = self.epsilon_star;
            Ok(img)
        }
    }

    #[test]
    fn constant_mu_star_telescopes() {
        let c = 0.01;
        let maps = Constant { inner: SurrogateMaps::zero(schedule()).unwrap(), mu_star: c, epsilon_star: 0.0 };
        let seq = FlowSequence { mu: (0..21).map(|k| 1e-3 * k as f64).collect(), e: vec![vec![0.0; 4]; 21] };
        let t = apply_t(&maps, &seq).unwrap();
        for k in 0..20 {
            assert!((t.mu[k] - (seq.mu[k + 1] - c) / 9.0).abs() < 1e-16);
        }
        // μ_{K-n} = -c Σ_{j=1}^n L^{-2j}
        let (fp, _) = solve_fixed_point(&maps, None, 1e-16, 100).unwrap();
        for n in 0..=20 {
            let want: f64 = -c * (1..=n).map(|j| 9f64.powi(-(j as i32))).sum::<f64>();
            assert!((fp.mu[20 - n] - want).abs() < 1e-16);
        }
    }

    #[test]
    fn linear_surrogate_matches_direct_solve() {
        let s = schedule();
        let m = SurrogateMaps::linear(0.1, s).unwrap();
        let (fp, rep) = solve_fixed_point(&m, None, 1e-15, 100).unwrap();
        let direct = linear_fixed_point(&s, 0.1).unwrap();
        for (a, b) in fp.mu.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(rep.residual_mu < 1e-12);
    }

    #[test]
    fn surrogate_fixed_point() {
        let m = surrogate();
        let (fp, rep) = solve_fixed_point(&m, None, 1e-14, 200).unwrap();
        assert!(rep.converged && rep.contraction_ratio <= 0.5, "{rep:?}");
        assert!(rep.residual_mu < 1e-12 && rep.residual_e < 1e-12 && rep.forward_residual < 1e-12);
        assert!(rep.boundary_exact && rep.in_unit_ball);
        let audit = growth_audit(&m, &fp).unwrap();
        assert!(audit.max_ratio <= 1.0 && audit.boundary_exact);
        let vac = vacuum_energy_backfill(&m, &fp).unwrap();
        assert!(vac.holds, "{vac:?}");
        assert!(contraction_probe(&m, 20, 1).unwrap() <= 0.5);
    }

    #[test]
    fn uniqueness_from_two_starts() {
        let m = surrogate();
        let (a, _) = solve_fixed_point(&m, None, 1e-15, 200).unwrap();
        let s = schedule();
        let mut start = FlowSequence::zero(&m).unwrap();
        for k in 0..20 {
            start.mu[k] = 0.5 * s.lambda_at(k).powf(0.6);
            start.e[k + 1] = vec![-0.5 * s.lambda_at(k + 1).powf(0.1); 4];
        }
        let (b, _) = solve_fixed_point(&m, Some(start), 1e-15, 200).unwrap();
        assert!(seq_distance(&m, &a, &b).unwrap() < 1e-13);
    }

    #[test]
    fn vacuum_energy_examples() {
        let s = schedule();
        let m = SurrogateMaps::zero(s).unwrap();
        let fp = FlowSequence::zero(&m).unwrap();
        assert!(vacuum_energy_backfill(&m, &fp).unwrap().epsilon.iter().all(|e| *e == 0.0));
        let c = 0.02;
        let maps = Constant { inner: m, mu_star: 0.0, epsilon_star: c };
        let vac = vacuum_energy_backfill(&maps, &fp).unwrap();
        // ε_{K-n} = -c Σ_{j=1}^n L^{-3j}
        for n in 0..=20usize {
            let want: f64 = -c * (1..=n).map(|j| 27f64.powi(-(j as i32))).sum::<f64>();
            assert!((vac.epsilon[20 - n] - want).abs() < 1e-17);
        }
        assert!(vac.holds);
    }

    #[test]
    fn monotone_in_mu_star() {
        let m = surrogate();
        let norms = monotone_probe(&m, &[0.0, 0.25, 0.5, 0.75, 1.0], 1e-14).unwrap();
        for w in norms.windows(2) {
            assert!(w[1].1 >= w[0].1 - 1e-14, "{norms:?}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn fixed_points_satisfy_forward_form(mu_c in 0.0f64..0.3, e_c in 0.0f64..0.3, g in 0.0f64..0.5, levels in 2u32..20) {
            let s = FlowSchedule::new(3, 3, levels, 1.0, 8, 0.1).unwrap();
            let m = SurrogateMaps { mu_star_coeff: mu_c, e_star_coeff: e_c, coupling: g, ..SurrogateMaps::default() }
                .with_schedule(s).unwrap();
            let (fp, rep) = solve_fixed_point(&m, None, 1e-15, 200).unwrap();
            prop_assert!(rep.forward_residual < 1e-12);
            prop_assert!(rep.contraction_ratio <= 0.5);
            prop_assert_eq!(fp.mu[levels as usize], 0.0);
        }

        #[test]
        fn apply_t_respects_boundary(seed in 0u64..1000) {
            let m = surrogate();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let seq = FlowSequence {
                mu: (0..21).map(|_| rng.random_range(-1e-3..1e-3)).collect(),
                e: (0..21).map(|_| (0..4).map(|_| rng.random_range(-1e-2..1e-2)).collect()).collect(),
            };
            let t = apply_t(&m, &seq).unwrap();
            prop_assert_eq!(t.mu[20], 0.0);
            prop_assert!(t.e[0].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn pipeline_maps_single_level() {
        let g = crate::rg_step::micro_geometry();
        let s = FlowSchedule::new(1, 3, 1, 1e-3 * 27.0, 0, 0.1).unwrap();
        let c = StepControls { nodes_per_site: 2, audit_samples: 1, ..StepControls::default() };
        let maps = PipelineMaps::new(g, c, s).unwrap();
        let (fp, rep) = solve_fixed_point(&maps, None, 1e-10, 30).unwrap();
        assert!(rep.converged && rep.boundary_exact, "{rep:?}");
        assert!(rep.residual_mu < 1e-10);
        assert!(fp.mu[0].is_finite());
        assert!(PipelineMaps::new(g, c, FlowSchedule::new(1, 3, 2, 1.0, 0, 0.1).unwrap()).is_err());
    }
}
