//! One small-field renormalization step on a micro-torus.
//!
//! The fluctuation field `W` lives on the unit lattice and is integrated
//! exactly by tensor quadrature against a truncated Gaussian. Its effect on
//! the fine field is `𝒲(s) = a_k G_k(s) Q_kᵀ C_k^{1/2}(s·W)`, where `G_k(s)`
//! is the random-walk expansion weighted by the cube parameters `s_□` and
//! `s·W` zeroes `W` on cubes with `s_□ = 0`. Localization uses the exact
//! inclusion-exclusion over `s ∈ {0, 1}` in place of `s`-integrals.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_expand, tensor_integral, truncation_energy, PolymerGas, SiteFunction, UltralocalMeasure};
use crate::functional::{
    log_power, small_field_membership, potential, FieldDomain, Normalization, FunctionalTermJson, LocalFunctional, Monomial, NormStrategy,
};
use crate::gaussian_flow::{coupling_growth_exponent, FreeFlow, GaussParams};
use crate::greens::{parametrix, random_walk_expansion, CubeMask, LocalOperator, PartitionOfUnity, WalkDiagnostics};
use crate::lattice::{Field, TorusLattice};
use crate::linalg::{max_abs_diff, quad_form, spd_inverse};
use crate::polymer::{is_connected, spanning_tree_length, Polymer};
use crate::{Error, Result};

/// Largest number of cubes whose `s`-patterns are enumerated.
pub const MAX_STEP_CUBES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepGeometry {
    pub d: usize,
    pub l: usize,
    /// `log_L` of the fine sites per side.
    pub side_exp: u32,
    /// `log_L M`.
    pub m: u32,
    pub a: f64,
    #[serde(default)]
    pub mu_bar: f64,
}

impl StepGeometry {
    pub fn field_lattice(&self, k: u32) -> Result<TorusLattice> {
        TorusLattice::new(self.d, self.l, self.side_exp, k as i32)
    }

    pub fn cube_exp(&self, k: u32) -> u32 {
        self.m + k
    }
}

#[derive(Clone, Debug)]
pub struct FlowState {
    pub k: u32,
    pub epsilon: f64,
    pub mu: f64,
    pub lambda: f64,
    pub e: LocalFunctional,
    pub geometry: StepGeometry,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowStateJson {
    pub k: u32,
    pub epsilon: f64,
    pub mu: f64,
    pub lambda: f64,
    pub geometry: StepGeometry,
    #[serde(default)]
    pub e_terms: Vec<FunctionalTermJson>,
}

impl FlowState {
    pub fn new(geometry: StepGeometry, k: u32, epsilon: f64, mu: f64, lambda: f64, e: Option<LocalFunctional>) -> Result<Self> {
        if k == 0 {
            return Err(Error::InvalidParameter("steps start at k = 1".into()));
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("λ = {lambda} must be nonnegative")));
        }
        let lat = geometry.field_lattice(k)?;
        let cube_exp = geometry.cube_exp(k);
        if cube_exp > geometry.side_exp {
            return Err(Error::InvalidParameter("cubes larger than the torus".into()));
        }
        let e = match e {
            Some(e) => {
                if e.field_lattice() != lat || e.cube_exp() != cube_exp {
                    return Err(Error::LatticeMismatch("E_k is not on the level-k polymers".into()));
                }
                e
            }
            None => LocalFunctional::new(lat, cube_exp)?,
        };
        Ok(FlowState { k, epsilon, mu, lambda, e, geometry })
    }

    pub fn from_json(js: &FlowStateJson) -> Result<Self> {
        let lat = js.geometry.field_lattice(js.k)?;
        let e = LocalFunctional::from_json(lat, js.geometry.cube_exp(js.k), &js.e_terms)?;
        Self::new(js.geometry, js.k, js.epsilon, js.mu, js.lambda, Some(e))
    }

    /// Serializes the state; opaque pieces of `E_k` cannot be written.
    pub fn to_json(&self) -> Result<FlowStateJson> {
        Ok(FlowStateJson {
            k: self.k,
            epsilon: self.epsilon,
            mu: self.mu,
            lambda: self.lambda,
            geometry: self.geometry,
            e_terms: self.e.to_json()?,
        })
    }

    pub fn field_lattice(&self) -> TorusLattice {
        self.e.field_lattice()
    }

    pub fn domain(&self, c: &StepControls) -> Result<FieldDomain> {
        FieldDomain::new(self.lambda.max(f64::MIN_POSITIVE), c.epsilon, c.alpha)
    }

    /// `V_k(□, φ)` on one cube.
    pub fn potential_term(&self, cube: usize, phi: &Field) -> Result<f64> {
        self.field_lattice().check_same(&phi.lattice)?;
        let sites = self.e.cube_map().members(cube);
        Ok(potential(&self.field_lattice(), sites, phi, self.epsilon, self.mu, self.lambda))
    }

    /// `V_k(φ) = Σ_□ V_k(□, φ)`.
    pub fn potential(&self, phi: &Field) -> Result<f64> {
        (0..self.e.cube_lattice().n_sites()).map(|c| self.potential_term(c, phi)).sum()
    }

    /// `E⁺_k(X, φ) = -V_k(X, φ) + E_k(X, φ)` with `V_k` on single cubes.
    pub fn e_plus(&self, poly: &Polymer, phi: &Field) -> Result<f64> {
        let v = if poly.size() == 1 { self.potential_term(poly.cubes[0], phi)? } else { 0.0 };
        Ok(self.e.evaluate(poly, phi)? - v)
    }

    /// Polymers carrying a piece of `E⁺_k`.
    pub fn e_plus_polymers(&self) -> Vec<Polymer> {
        let mut v: Vec<Polymer> =
            (0..self.e.cube_lattice().n_sites()).map(|c| Polymer::from_sorted_unchecked(vec![c])).collect();
        for p in self.e.terms.keys() {
            if !v.contains(p) {
                v.push(p.clone());
            }
        }
        v.sort();
        v
    }

    /// `δE⁺_k(X, φ, 𝒲) = E⁺_k(X, φ + 𝒲) - E⁺_k(X, φ)`, refusing `φ ∉ ½R_k`.
    pub fn delta_eplus(&self, poly: &Polymer, phi: &Field, wcal: &Field, domain: &FieldDomain) -> Result<f64> {
        domain.scaled(0.5).check(phi)?;
        Ok(self.e_plus(poly, &phi.axpy(1.0, wcal)?)? - self.e_plus(poly, phi)?)
    }

    /// `|μ_k| ≤ λ_k^{1/2}` and `‖E_k‖_{k,κ} ≤ 1`.
    pub fn check_hypotheses(&self, c: &StepControls) -> Result<f64> {
        if self.mu.abs() > self.lambda.sqrt() {
            return Err(Error::Hypothesis(format!("|μ_k| = {} exceeds λ_k^(1/2) = {}", self.mu.abs(), self.lambda.sqrt())));
        }
        let norm = if self.e.terms.is_empty() { 0.0 } else { self.e.global_norm_best(&self.domain(c)?, c.kappa)?.value };
        if norm > 1.0 {
            return Err(Error::Hypothesis(format!("‖E_k‖ = {norm} exceeds 1")));
        }
        Ok(norm)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StepControls {
    /// Gauss-Hermite nodes per fluctuation site.
    pub nodes_per_site: usize,
    /// Order of the connected-amplitude series.
    pub n_max: usize,
    /// Order of the random-walk expansion of `G_k(s)`.
    pub walk_order: usize,
    pub kappa: f64,
    pub epsilon: f64,
    pub alpha: f64,
    /// `p_k = (-log λ_k)^p`.
    pub p: u32,
    /// `p_{0,k} = (-log λ_k)^{p0}`, the fluctuation truncation.
    pub p0: u32,
    pub fd_step: f64,
    /// Random fields added to the sampled-norm family.
    pub sample_fields: usize,
    pub audit_samples: usize,
    pub seed: u64,
}

impl Default for StepControls {
    fn default() -> Self {
        StepControls {
            nodes_per_site: 3,
            n_max: 12,
            walk_order: 16,
            kappa: 1.0,
            epsilon: 0.01,
            alpha: 0.75,
            p: 2,
            p0: 1,
            fd_step: 1e-2,
            sample_fields: 2,
            audit_samples: 8,
            seed: 0,
        }
    }
}

impl StepControls {
    pub fn validate(&self) -> Result<()> {
        if self.p0 >= self.p {
            return Err(Error::InvalidParameter("need p0 < p".into()));
        }
        if self.nodes_per_site < 1 || self.n_max < 1 {
            return Err(Error::InvalidParameter("node count and series order must be positive".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(Error::InvalidParameter("finite-difference step must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FluctuationOutcome {
    pub h_sharp: BTreeMap<Polymer, f64>,
    /// `Σ_Y H#(Y) = log Ξ′` from the cluster expansion.
    pub log_xi: f64,
    pub tail_estimate: f64,
    pub summable: bool,
    pub max_k_sharp: f64,
}

/// Everything about the fluctuation integral that does not depend on `φ`.
pub struct Fluctuation {
    pub state: FlowState,
    pub flow: FreeFlow,
    pub measure: UltralocalMeasure,
    pub p0: f64,
    /// `ε⁰_k = -log ∫ χ dμ_Gauss` per unit-lattice site.
    pub epsilon0: f64,
    pub n_max: usize,
    pub n_cubes: usize,
    pub walk: WalkDiagnostics,
    /// `max |G_k(1) - G_k|` for the truncated walk.
    pub walk_error: f64,
    /// Fine sites of each cube.
    w_cube_sites: Vec<Vec<usize>>,
    /// `a_k G_k Q_kᵀ C_k^{1/2}`.
    wcal_exact: DMatrix<f64>,
    /// `a_k G_k(1_P) Q_kᵀ C_k^{1/2} 1_P`, indexed by the pattern mask `P`.
    pattern_maps: Vec<DMatrix<f64>>,
    pub sqrt_c: DMatrix<f64>,
    e_plus_polys: Vec<Polymer>,
    e_plus_masks: Vec<CubeMask>,
    /// Every nonempty cube set.
    pub zs: Vec<Polymer>,
    pub disconnected: Vec<bool>,
    cache: Mutex<HashMap<Vec<u64>, Arc<FluctuationOutcome>>>,
    pub evaluations: Mutex<usize>,
}

fn mask_of(poly: &Polymer) -> CubeMask {
    poly.cubes.iter().fold(0, |m, &c| m | (1 << c))
}

fn polymer_of(mask: CubeMask) -> Polymer {
    Polymer::from_sorted_unchecked((0..64).filter(|&c| mask & (1 << c) != 0).collect())
}

impl Fluctuation {
    pub fn new(state: &FlowState, c: &StepControls) -> Result<Self> {
        c.validate()?;
        let g = state.geometry;
        let flow = FreeFlow::new(GaussParams { d: g.d, l: g.l, side_exp: g.side_exp, k: state.k, a: g.a, mu_bar: g.mu_bar })?;
        let cubes = state.e.cube_map();
        let n_cubes = cubes.coarse.n_sites();
        if n_cubes > MAX_STEP_CUBES {
            return Err(Error::CapExceeded(format!("{n_cubes} cubes exceed the step cap {MAX_STEP_CUBES}")));
        }
        // W-sites grouped by the cube of their fine members
        let mut w_cube_sites = vec![Vec::new(); n_cubes];
        for y in 0..flow.coarse.n_sites() {
            let cube = cubes.block_of(flow.qk.members(y)[0]);
            if flow.qk.members(y).iter().any(|&x| cubes.block_of(x) != cube) {
                return Err(Error::LatticeMismatch("unit blocks straddle polymer cubes".into()));
            }
            w_cube_sites[cube].push(y);
        }
        let lambda = state.lambda.max(f64::MIN_POSITIVE);
        let p0 = log_power(lambda.min(0.5), c.p0 as f64);
        let measure = UltralocalMeasure::truncated_hermite(p0, c.nodes_per_site)?;
        let sqrt_c = flow.sqrt_covariance()?;
        let qt = flow.qk.qt_matrix();
        let wcal_exact = flow.green() * &qt * &sqrt_c * flow.a_k;

        let pou = PartitionOfUnity::new(flow.fine, g.m)?;
        let par = parametrix(&LocalOperator::free(&flow), &pou)?;
        let walk = random_walk_expansion(&par, c.walk_order, None)?;
        let walk_error = max_abs_diff(&walk.total, flow.green());
        let n_w = flow.coarse.n_sites();
        let mut pattern_maps = Vec::with_capacity(1 << n_cubes);
        for pmask in 0..(1u64 << n_cubes) {
            let gate = DMatrix::from_fn(n_w, n_w, |i, j| {
                if i == j && w_cube_sites.iter().enumerate().any(|(cb, s)| pmask & (1 << cb) != 0 && s.contains(&i)) {
                    1.0
                } else {
                    0.0
                }
            });
            pattern_maps.push(walk.restricted(pmask) * &qt * &sqrt_c * gate * flow.a_k);
        }
        let e_plus_polys = state.e_plus_polymers();
        let e_plus_masks = e_plus_polys.iter().map(mask_of).collect();
        let zs: Vec<Polymer> = (1..(1u64 << n_cubes)).map(polymer_of).collect();
        let disconnected = zs.iter().map(|z| !is_connected(&cubes.coarse, &z.cubes).unwrap_or(false)).collect();
        Ok(Fluctuation {
            state: state.clone(),
            flow,
            measure,
            p0,
            epsilon0: truncation_energy(p0),
            n_max: c.n_max,
            n_cubes,
            walk: walk.diagnostics,
            walk_error,
            w_cube_sites,
            wcal_exact,
            pattern_maps,
            sqrt_c,
            e_plus_polys,
            e_plus_masks,
            zs,
            disconnected,
            cache: Mutex::new(HashMap::new()),
            evaluations: Mutex::new(0),
        })
    }

    pub fn n_w_sites(&self) -> usize {
        self.flow.coarse.n_sites()
    }

    /// `𝒲(1_P)` for the pattern `P`.
    pub fn wcal(&self, pattern: CubeMask, w: &[f64]) -> Field {
        let v = &self.pattern_maps[pattern as usize] * DVector::from_column_slice(w);
        Field { lattice: self.flow.fine, values: v.as_slice().to_vec() }
    }

    /// `a_k G_k Q_kᵀ C_k^{1/2} W` with the exact `G_k`.
    pub fn wcal_exact(&self, w: &[f64]) -> Field {
        let v = &self.wcal_exact * DVector::from_column_slice(w);
        Field { lattice: self.flow.fine, values: v.as_slice().to_vec() }
    }

    fn e_plus_at(&self, phi: &Field) -> Result<Vec<f64>> {
        self.e_plus_polys.iter().map(|p| self.state.e_plus(p, phi)).collect()
    }

    /// `Σ_{X ⊆ P} δE⁺(X, φ, 𝒲(1_P))`.
    fn pattern_sum(&self, phi: &Field, base: &[f64], pattern: CubeMask, w: &[f64]) -> Result<f64> {
        let shifted = phi.axpy(1.0, &self.wcal(pattern, w))?;
        let mut s = 0.0;
        for (i, poly) in self.e_plus_polys.iter().enumerate() {
            if self.e_plus_masks[i] & !pattern == 0 {
                s += self.state.e_plus(poly, &shifted)? - base[i];
            }
        }
        Ok(s)
    }

    /// `H(Z, W) = Σ_{X ⊆ Z} δE⁺(X, Z) = Σ_{∅≠P⊆Z} (-1)^{|Z∖P|} Σ_{X⊆P} δE⁺(X, 𝒲(1_P))`.
    pub fn local_activity(&self, phi: &Field, base: &[f64], z: CubeMask, w: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        let mut sub = z;
        while sub != 0 {
            let sign = if (z & !sub).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
            total += sign * self.pattern_sum(phi, base, sub, w)?;
            sub = (sub - 1) & z;
        }
        Ok(total)
    }

    /// `δE⁺(Y, Z)` for every `Z ⊇ Y`: the mixed `s`-differences of
    /// `δE⁺(Y, φ, 𝒲(s))` over `Z∖Y` with `s = 1` on `Y` and `0` off `Z`.
    pub fn localization_expansion(&self, y: &Polymer, phi: &Field, w: &[f64]) -> Result<BTreeMap<Polymer, f64>> {
        let ym = mask_of(y);
        let base = self.state.e_plus(y, phi)?;
        let full: CubeMask = (1 << self.n_cubes) - 1;
        let rest = full & !ym;
        let mut f: HashMap<CubeMask, f64> = HashMap::new();
        let mut sub = rest;
        loop {
            let pattern = ym | sub;
            let shifted = phi.axpy(1.0, &self.wcal(pattern, w))?;
            f.insert(pattern, self.state.e_plus(y, &shifted)? - base);
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        let mut out = BTreeMap::new();
        let mut zsub = rest;
        loop {
            let z = ym | zsub;
            let mut v = 0.0;
            let mut u = zsub;
            loop {
                let sign = if (zsub & !u).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 };
                v += sign * f[&(ym | u)];
                if u == 0 {
                    break;
                }
                u = (u - 1) & zsub;
            }
            out.insert(polymer_of(z), v);
            if zsub == 0 {
                break;
            }
            zsub = (zsub - 1) & rest;
        }
        Ok(out)
    }

    /// The polymer gas `H(Z, ·)` over `W` at background `φ`.
    pub fn gas(self: &Arc<Self>, phi: &Field) -> Result<PolymerGas> {
        let base = Arc::new(self.e_plus_at(phi)?);
        let phi = Arc::new(phi.clone());
        let mut activities: Vec<SiteFunction> = Vec::new();
        for z in &self.zs {
            let (this, base, phi) = (self.clone(), base.clone(), phi.clone());
            let zm = mask_of(z);
            activities.push(Arc::new(move |w: &[f64]| this.local_activity(&phi, &base, zm, w).unwrap_or(f64::NAN)));
        }
        PolymerGas::new(self.state.e.cube_lattice(), self.w_cube_sites.clone(), self.zs.clone(), activities)
    }

    /// Runs the cluster expansion of `Ξ′(φ) = ∫ exp(Σ_X δE⁺(X, φ, 𝒲)) dμ*`.
    pub fn outcome(self: &Arc<Self>, phi: &Field) -> Result<Arc<FluctuationOutcome>> {
        let key: Vec<u64> = phi.values.iter().map(|v| v.to_bits()).collect();
        if let Some(hit) = self.cache.lock().map_err(|_| Error::Precondition("cache poisoned".into()))?.get(&key) {
            return Ok(hit.clone());
        }
        let gas = self.gas(phi)?;
        let res = cluster_expand(&gas, &self.measure, self.n_max)?;
        let h = &res.connected.h_sharp;
        if h.values().any(|v| !v.is_finite()) {
            return Err(Error::Domain("fluctuation amplitudes are not finite".into()));
        }
        let out = Arc::new(FluctuationOutcome {
            log_xi: h.values().sum(),
            h_sharp: h.clone(),
            tail_estimate: res.connected.tail_estimate,
            summable: res.connected.summable,
            max_k_sharp: res.k_sharp.values().fold(0.0, |m, v| m.max(v.abs())),
        });
        if let Ok(mut n) = self.evaluations.lock() {
            *n += 1;
        }
        if let Ok(mut c) = self.cache.lock() {
            c.insert(key, out.clone());
        }
        Ok(out)
    }

    /// `log Ξ′(φ)` by direct tensor quadrature over every `W` site.
    pub fn direct_log_xi(&self, phi: &Field) -> Result<f64> {
        let base = self.e_plus_at(phi)?;
        let full: CubeMask = (1 << self.n_cubes) - 1;
        let sites: Vec<usize> = (0..self.n_w_sites()).collect();
        let z = tensor_integral(&self.measure, &sites, self.n_w_sites(), |w| {
            self.pattern_sum(phi, &base, full, w).map(f64::exp).unwrap_or(f64::NAN)
        })?;
        Ok(z.ln())
    }

    /// `E#_k(Y, φ)` as a functional whose pieces share one cached cluster run.
    pub fn sharp_functional(self: &Arc<Self>, fd_step: f64) -> Result<LocalFunctional> {
        let mut f = self.state.e.empty_like();
        f.fd_step = fd_step;
        for z in &self.zs {
            let this = self.clone();
            let key = z.clone();
            f.add_opaque(
                z,
                "E#",
                Arc::new(move |phi: &Field| match this.outcome(phi) {
                    Ok(o) => o.h_sharp.get(&key).copied().unwrap_or(0.0),
                    Err(_) => f64::NAN,
                }),
            )?;
        }
        Ok(f)
    }

    fn random_w(&self, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<f64> {
        use rand::Rng;
        (0..self.n_w_sites()).map(|_| self.measure.points[rng.random_range(0..self.measure.len())].0).collect()
    }

    /// Checks each exact identity of the pipeline at random points.
    pub fn identity_audit(&self, samples: usize, seed: u64) -> Result<PipelineAudit> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let flow = &self.flow;
        let coupling = flow.params.a * (flow.params.l as f64).powi(-2);
        let delta_k = flow.effective_quadratic_form();
        let c_inv = spd_inverse(&flow.covariance()?, "C_k")?;
        let d_next = flow.effective_quadratic_form_next()?;
        let w_unit = flow.coarse.site_weight();
        let full: CubeMask = (1 << self.n_cubes) - 1;
        let mut audit = PipelineAudit::default();
        for _ in 0..samples {
            let big_next = Field::from_fn(flow.next, |_| rng.random_range(-1.0..1.0));
            let z = Field::from_fn(flow.coarse, |_| rng.random_range(-1.0..1.0));
            let phi0 = flow.minimizer_next(&big_next)?;
            let psi = flow.psi(&big_next, &phi0)?;
            let big = psi.axpy(1.0, &z)?;
            let kernel = big_next.axpy(-1.0, &flow.q.apply_q(&big)?)?;
            let lhs = 0.5 * coupling * kernel.norm_sq()
                + 0.5 * w_unit * quad_form(&delta_k, &DVector::from_column_slice(&big.values));
            let rhs = 0.5 * quad_form(&d_next, &DVector::from_column_slice(&big_next.values))
                + 0.5 * w_unit * quad_form(&c_inv, &DVector::from_column_slice(&z.values));
            audit.change_of_variables = audit.change_of_variables.max((lhs - rhs).abs() / (1.0 + lhs.abs()));

            let w: Vec<f64> = self.random_w(&mut rng);
            let fluct = &self.sqrt_c * DVector::from_column_slice(&w);
            let moved = psi.axpy(1.0, &Field { lattice: flow.coarse, values: fluct.as_slice().to_vec() })?;
            let lhs = flow.minimizer(&moved)?;
            let rhs = phi0.axpy(1.0, &self.wcal_exact(&w))?;
            let gap = lhs.axpy(-1.0, &rhs)?.sup_norm();
            audit.w_substitution = audit.w_substitution.max(gap / (1.0 + lhs.sup_norm()));

            let phi = phi0.scaled(0.1);
            let base = self.e_plus_at(&phi)?;
            let wc = self.wcal(full, &w);
            let shifted = phi.axpy(1.0, &wc)?;
            let total_shift: f64 =
                self.e_plus_at(&shifted)?.iter().zip(&base).map(|(a, b)| a - b).sum::<f64>();
            let by_pieces = self.pattern_sum(&phi, &base, full, &w)?;
            audit.assembly = audit.assembly.max((total_shift - by_pieces).abs());
            let by_z: f64 = self
                .zs
                .iter()
                .map(|z| self.local_activity(&phi, &base, mask_of(z), &w))
                .sum::<Result<f64>>()?;
            audit.telescope = audit.telescope.max((by_z - by_pieces).abs());
            let mut disc: f64 = 0.0;
            for y in &self.e_plus_polys {
                for (z, v) in self.localization_expansion(y, &phi, &w)? {
                    let i = self.zs.iter().position(|q| *q == z).unwrap_or(0);
                    if self.disconnected[i] {
                        disc = disc.max(v.abs());
                    }
                }
            }
            audit.disconnected_weight = audit.disconnected_weight.max(disc);
        }
        audit.samples = samples;
        Ok(audit)
    }

    /// `χ_k(Ψ_k + C_k^{1/2} W) = 1` on probe fields `|W| ≤ p_{0,k}` at `Φ_{k+1} = 0`.
    pub fn chi_probe(&self, c: &StepControls, probes: usize) -> Result<ChiProbe> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed ^ 0x5eed);
        let domain = self.state.domain(c)?;
        let pk = log_power(domain.lambda.min(0.5), c.p as f64);
        let n = self.n_w_sites();
        let mut fields: Vec<Vec<f64>> = vec![vec![self.p0; n], vec![-self.p0; n]];
        for _ in 0..probes {
            fields.push((0..n).map(|_| if rng.random_bool(0.5) { self.p0 } else { -self.p0 }).collect());
        }
        let mut inside = 0;
        let mut failing = None;
        for w in &fields {
            let v = &self.sqrt_c * DVector::from_column_slice(w);
            let big = Field { lattice: self.flow.coarse, values: v.as_slice().to_vec() };
            let rep = small_field_membership(&self.flow, &big, &domain, pk)?;
            if rep.member {
                inside += 1;
            } else if failing.is_none() {
                failing = rep.failing;
            }
        }
        Ok(ChiProbe { probes: fields.len(), inside, p_k: pk, p0_k: self.p0, failing })
    }

    /// `max |δE⁺(X, φ, 𝒲)| / (λ^{1/4-10ε} e^{-κ d_M(X)})` over random `W`.
    pub fn delta_eplus_ratio(&self, c: &StepControls, phi: &Field, samples: usize) -> Result<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(c.seed ^ 0xde17a);
        let lambda = self.state.lambda.max(f64::MIN_POSITIVE);
        let env = lambda.powf(0.25 - 10.0 * c.epsilon);
        let base = self.e_plus_at(phi)?;
        let mut worst: f64 = 0.0;
        for _ in 0..samples {
            let w = self.random_w(&mut rng);
            let shifted = phi.axpy(1.0, &self.wcal_exact(&w))?;
            for (i, poly) in self.e_plus_polys.iter().enumerate() {
                let dm = spanning_tree_length(&self.state.e.cube_lattice(), &poly.cubes);
                let v = (self.state.e_plus(poly, &shifted)? - base[i]).abs();
                worst = worst.max(v / (env * (-c.kappa * dm).exp()));
            }
        }
        Ok(worst)
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct PipelineAudit {
    /// `(aL^{-2}/2)|Φ_{k+1} - QΦ|² + ½⟨Φ, Δ_kΦ⟩ = ½⟨Φ_{k+1}, DΦ_{k+1}⟩ + ½⟨Z, C_k^{-1}Z⟩` at `Φ = Ψ_k + Z`.
    pub change_of_variables: f64,
    /// `φ_k(Ψ_k + C_k^{1/2}W) = φ⁰_{k+1} + 𝒲`.
    pub w_substitution: f64,
    /// `E⁺(φ + 𝒲) - E⁺(φ) = Σ_X δE⁺(X)`.
    pub assembly: f64,
    /// `Σ_Z H(Z) = Σ_X δE⁺(X)` at `s ≡ 1`.
    pub telescope: f64,
    /// Largest `|δE⁺(Y, Z)|` over disconnected `Z`.
    pub disconnected_weight: f64,
    pub samples: usize,
}

impl PipelineAudit {
    pub fn worst_identity(&self) -> f64 {
        self.change_of_variables.max(self.w_substitution).max(self.assembly).max(self.telescope)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChiProbe {
    pub probes: usize,
    pub inside: usize,
    pub p_k: f64,
    pub p0_k: f64,
    pub failing: Option<String>,
}

/// `(ε⁰_k, E#_k)` at the background `φ⁰_{k+1}`, with the cluster run there.
pub fn fluctuation_integral(
    state: &FlowState,
    controls: &StepControls,
    phi0_next: &Field,
) -> Result<(f64, LocalFunctional, Arc<FluctuationOutcome>)> {
    let fl = Arc::new(Fluctuation::new(state, controls)?);
    state.domain(controls)?.scaled(0.5).check(phi0_next)?;
    let out = fl.outcome(phi0_next)?;
    let sharp = fl.sharp_functional(controls.fd_step)?;
    Ok((fl.epsilon0, sharp, out))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundCheck {
    pub name: String,
    pub value: f64,
    pub envelope: f64,
    /// `value / envelope`, the measured constant.
    pub ratio: f64,
}

impl BoundCheck {
    fn new(name: &str, value: f64, envelope: f64) -> Self {
        let ratio = if envelope > 0.0 { value.abs() / envelope } else if value == 0.0 { 0.0 } else { f64::INFINITY };
        BoundCheck { name: name.to_string(), value, envelope, ratio }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepReport {
    pub k: u32,
    pub lambda: f64,
    pub lambda_next: f64,
    /// `λ_{k+1} / λ_k - L^{4-d}`.
    pub lambda_ratio_gap: f64,
    pub epsilon0: f64,
    /// `e^{-p_{0,k}²/2}`.
    pub epsilon0_envelope: f64,
    pub chi: ChiProbe,
    pub audit: PipelineAudit,
    pub walk_max_ratio: f64,
    pub walk_error: f64,
    pub log_xi_cluster: f64,
    pub log_xi_direct: f64,
    pub series_tail: f64,
    pub summable: bool,
    pub l1: f64,
    pub l2: f64,
    pub epsilon_star: f64,
    pub mu_star: f64,
    pub e_norm: f64,
    pub l3_norm: f64,
    /// Sampled (lower-bound) norm of `E*` on `R_{k+1}`.
    pub e_star_norm: f64,
    pub epsilon_next: f64,
    pub mu_next: f64,
    /// Largest coefficient re-extracted from `E_{k+1}` on small polymers.
    pub normalized_residual: f64,
    pub evenness_defect: f64,
    pub delta_eplus_ratio: f64,
    pub bounds: Vec<BoundCheck>,
    pub cluster_runs: usize,
}

/// `(ℒ₁E, ℒ₂E, ℒ₃E)` and `(ε*, μ*, E*)`: `E_k` and `E#_k` reblocked,
/// rescaled and normalized.
pub fn scaling_parts(fl: &Arc<Fluctuation>, controls: &StepControls) -> Result<(Normalization, Normalization)> {
    let sharp = fl.sharp_functional(controls.fd_step)?;
    let e_part = fl.state.e.reblock()?.scale_down()?.normalize()?;
    let s_part = sharp.reblock()?.scale_down()?.normalize()?;
    Ok((e_part, s_part))
}

/// `E_{k+1} = ℒ₃E_k + E*_k` with `(ℒ₁, ℒ₂)` and `(ε*, μ*)` extracted from
/// the rescaled, reblocked `E_k` and `E#_k`.
pub fn rg_step(state: &FlowState, controls: &StepControls) -> Result<(FlowState, StepReport)> {
    let e_norm = state.check_hypotheses(controls)?;
    let fl = Arc::new(Fluctuation::new(state, controls)?);
    let g = state.geometry;
    let lf = g.l as f64;
    let lat = state.field_lattice();
    let audit = fl.identity_audit(controls.audit_samples, controls.seed)?;
    let chi = fl.chi_probe(controls, controls.audit_samples)?;
    let zero = Field::zeros(lat);
    let out0 = fl.outcome(&zero)?;
    let log_xi_direct = fl.direct_log_xi(&zero)?;
    let delta_ratio = fl.delta_eplus_ratio(controls, &zero, controls.audit_samples)?;

    let (e_part, s_part) = scaling_parts(&fl, controls)?;
    let ld = lf.powi(g.d as i32);
    let epsilon_next = ld * (state.epsilon + fl.epsilon0) + e_part.epsilon + s_part.epsilon;
    let mu_next = lf * lf * state.mu + e_part.mu + s_part.mu;
    let lambda_next = lf.powi(coupling_growth_exponent(g.d)) * state.lambda;
    let e_next = e_part.remainder.linear_combination(1.0, &s_part.remainder, 1.0)?;
    let next = FlowState::new(g, state.k + 1, epsilon_next, mu_next, lambda_next, Some(e_next.clone()))?;

    let dom_next = FieldDomain::new(lambda_next.max(f64::MIN_POSITIVE), controls.epsilon, controls.alpha)?;
    let l3_norm = if e_part.remainder.terms.is_empty() {
        0.0
    } else {
        e_part.remainder.global_norm(&dom_next, controls.kappa, NormStrategy::Analytic)?.value
    };
    let mut e_star_norm: f64 = 0.0;
    for poly in s_part.remainder.terms.keys() {
        e_star_norm =
            e_star_norm.max(s_part.remainder.norm_sampled(poly, &dom_next, controls.sample_fields, controls.seed)?);
    }
    let recheck = e_next.normalize()?;
    let normalized_residual = recheck.extractions.iter().map(|x| x.max_abs()).fold(0.0, f64::max);
    let probe = dom_next.sample_family(e_next.field_lattice(), 1, controls.seed).pop().unwrap_or(Field::zeros(lat));
    let evenness_defect = e_next.evenness_defect(&probe)?;

    let lam = state.lambda;
    let eps = controls.epsilon;
    let bounds = vec![
        BoundCheck::new("L2 vs L^-eps lambda^(1/2+6eps) |E|", e_part.mu, lf.powf(-eps) * lam.powf(0.5 + 6.0 * eps) * e_norm),
        BoundCheck::new("mu* vs L^d lambda^(3/4-4eps)", s_part.mu, ld * lam.powf(0.75 - 4.0 * eps)),
        BoundCheck::new("E* vs L^d lambda^(1/4-10eps)", e_star_norm, ld * lam.powf(0.25 - 10.0 * eps)),
        BoundCheck::new("L1 vs |E|", e_part.epsilon, e_norm),
    ];
    let report = StepReport {
        k: state.k,
        lambda: state.lambda,
        lambda_next,
        lambda_ratio_gap: if state.lambda > 0.0 {
            lambda_next / state.lambda - lf.powi(coupling_growth_exponent(g.d))
        } else {
            0.0
        },
        epsilon0: fl.epsilon0,
        epsilon0_envelope: (-0.5 * fl.p0 * fl.p0).exp(),
        chi,
        audit,
        walk_max_ratio: fl.walk.max_ratio,
        walk_error: fl.walk_error,
        log_xi_cluster: out0.log_xi,
        log_xi_direct,
        series_tail: out0.tail_estimate,
        summable: out0.summable,
        l1: e_part.epsilon,
        l2: e_part.mu,
        epsilon_star: s_part.epsilon,
        mu_star: s_part.mu,
        e_norm,
        l3_norm,
        e_star_norm,
        epsilon_next,
        mu_next,
        normalized_residual,
        evenness_defect,
        delta_eplus_ratio: delta_ratio,
        bounds,
        cluster_runs: fl.evaluations.lock().map(|n| *n).unwrap_or(0),
    };
    Ok((next, report))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PowerStructure {
    pub lambda_hi: f64,
    pub lambda_lo: f64,
    /// `|μ*| / (L^d λ^{3/4-4ε})` at both couplings.
    pub mu_star_ratio: (f64, f64),
    /// `‖E*‖ / (L^d λ^{1/4-10ε})` at both couplings.
    pub e_star_ratio: (f64, f64),
    pub mu_star_ok: bool,
    pub e_star_ok: bool,
}

/// Runs the step on two members of one family, `hi` at the larger coupling,
/// and checks that the measured envelope constants do not grow as `λ` drops.
pub fn power_structure(hi: &FlowState, lo: &FlowState, controls: &StepControls) -> Result<(PowerStructure, StepReport, StepReport)> {
    if lo.lambda >= hi.lambda {
        return Err(Error::InvalidParameter("the second state must have the smaller coupling".into()));
    }
    let (_, hi_rep) = rg_step(hi, controls)?;
    let (_, lo_rep) = rg_step(lo, controls)?;
    let get = |r: &StepReport, i: usize| r.bounds[i].ratio;
    let ps = PowerStructure {
        lambda_hi: hi.lambda,
        lambda_lo: lo.lambda,
        mu_star_ratio: (get(&hi_rep, 1), get(&lo_rep, 1)),
        e_star_ratio: (get(&hi_rep, 2), get(&lo_rep, 2)),
        mu_star_ok: get(&lo_rep, 1) <= get(&hi_rep, 1) * (1.0 + 1e-6),
        e_star_ok: get(&lo_rep, 2) <= get(&hi_rep, 2) * (1.0 + 1e-6),
    };
    Ok((ps, hi_rep, lo_rep))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DerivativeRow {
    pub direction: String,
    /// Symmetric difference of `μ*`.
    pub dmu_star: f64,
    /// Step-halved forward difference `2D⁺(h/2) - D⁺(h)` of `μ*`.
    pub dmu_star_forward: f64,
    /// Sampled norm of the symmetric difference of `E*`.
    pub de_star: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CauchyReport {
    pub step: f64,
    pub rows: Vec<DerivativeRow>,
}

fn starred(state: &FlowState, c: &StepControls) -> Result<(f64, LocalFunctional)> {
    let fl = Arc::new(Fluctuation::new(state, c)?);
    let n = fl.sharp_functional(c.fd_step)?.reblock()?.scale_down()?.normalize()?;
    Ok((n.mu, n.remainder))
}

/// Finite-difference derivatives of `(μ*, E*)` along `μ` and along each
/// polynomial direction `Ė` (added to `E_k`).
pub fn cauchy_derivatives(
    state: &FlowState,
    c: &StepControls,
    directions: &[(String, LocalFunctional)],
    h: f64,
) -> Result<CauchyReport> {
    let norm = state.check_hypotheses(c)?;
    if state.mu.abs() > 0.5 * state.lambda.sqrt() || norm > 0.5 {
        return Err(Error::Precondition("state is not an interior point".into()));
    }
    let dom_next = FieldDomain::new(
        (state.lambda * (state.geometry.l as f64).powi(coupling_growth_exponent(state.geometry.d))).max(f64::MIN_POSITIVE),
        c.epsilon,
        c.alpha,
    )?;
    let (mu0, _) = starred(state, c)?;
    let mut rows = Vec::new();
    let shifted = |dir: &str, t: f64| -> Result<FlowState> {
        let mut s = state.clone();
        if dir == "mu" {
            s.mu += t;
        } else {
            let e = &directions.iter().find(|d| d.0 == dir).ok_or_else(|| Error::InvalidParameter(dir.into()))?.1;
            s.e = s.e.linear_combination(1.0, e, t)?;
        }
        Ok(s)
    };
    let names: Vec<String> = std::iter::once("mu".to_string()).chain(directions.iter().map(|d| d.0.clone())).collect();
    for name in names {
        let (mp, ep) = starred(&shifted(&name, h)?, c)?;
        let (mm, em) = starred(&shifted(&name, -h)?, c)?;
        let (mh, _) = starred(&shifted(&name, 0.5 * h)?, c)?;
        let diff = ep.linear_combination(1.0 / (2.0 * h), &em, -1.0 / (2.0 * h))?;
        let mut de: f64 = 0.0;
        for poly in diff.terms.keys() {
            de = de.max(diff.norm_sampled(poly, &dom_next, 0, c.seed)?);
        }
        rows.push(DerivativeRow {
            direction: name,
            dmu_star: (mp - mm) / (2.0 * h),
            dmu_star_forward: 2.0 * (mh - mu0) / (0.5 * h) - (mp - mu0) / h,
            de_star: de,
        });
    }
    Ok(CauchyReport { step: h, rows })
}

/// A small even polynomial `E_k`: `c ∫φ⁴` on every cube.
pub fn quartic_functional(field: TorusLattice, cube_exp: u32, c: f64) -> Result<LocalFunctional> {
    let mut e = LocalFunctional::new(field, cube_exp)?;
    for cube in 0..e.cube_lattice().n_sites() {
        e.add_monomial(&Polymer::from_sorted_unchecked(vec![cube]), Monomial::new(c, 4, 0, 0))?;
    }
    Ok(e)
}

/// The micro-torus used by the acceptance run: `d = 1`, `L = 3`, 27 fine
/// sites at `k = 1`, 9 fluctuation sites in 3 cubes.
pub fn micro_geometry() -> StepGeometry {
    StepGeometry { d: 1, l: 3, side_exp: 3, m: 1, a: 20.0, mu_bar: 0.0 }
}

/// The micro-torus family at coupling `λ`: `μ_k = 0.1λ^{1/2}` and
/// `E_k = 0.1λ² ∫φ⁴` per cube.
pub fn micro_state(lambda: f64) -> Result<FlowState> {
    let g = micro_geometry();
    let e = quartic_functional(g.field_lattice(1)?, g.cube_exp(1), 0.1 * lambda * lambda)?;
    FlowState::new(g, 1, 0.0, 0.1 * lambda.sqrt(), lambda, Some(e))
}
