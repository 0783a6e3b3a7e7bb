//! Polymer functionals `E(X, φ)`.
//!
//! A functional stores, for each polymer, a list of pieces. A piece is either
//! a local monomial `c ∫ φ^p (∂_μφ)^q` over a set of sites, or an opaque
//! evaluator. Gradient monomials only run over bonds with both ends inside
//! their support, so every piece depends on `φ` in its polymer alone.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::averaging::BlockMap;
use crate::gaussian_flow::FreeFlow;
use crate::greens::holder_seminorm;
use crate::lattice::{forward_derivative, interior_bonds, scale_field, Field, ScaleDirection, TorusLattice};
use crate::polymer::{spanning_tree_length, Polymer, Reblocking};
use crate::{Error, Result};

/// The field-domain bounds at coupling `λ`, scaled by `rho`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldDomain {
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub rho: f64,
}

impl FieldDomain {
    pub fn new(lambda: f64, epsilon: f64, alpha: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidParameter(format!("λ = {lambda} must be positive")));
        }
        if !(epsilon > 0.0 && epsilon < 0.025) {
            return Err(Error::InvalidParameter(format!("ε = {epsilon} must lie in (0, 1/40)")));
        }
        if !(alpha > 0.5 && alpha < 1.0) {
            return Err(Error::InvalidParameter(format!("α = {alpha} must lie in (1/2, 1)")));
        }
        Ok(FieldDomain { lambda, epsilon, alpha, rho: 1.0 })
    }

    pub fn scaled(&self, rho: f64) -> Self {
        FieldDomain { rho: self.rho * rho, ..*self }
    }

    /// `ρ λ^{-1/4-3ε}`.
    pub fn field_bound(&self) -> f64 {
        self.rho * self.lambda.powf(-0.25 - 3.0 * self.epsilon)
    }

    /// `ρ λ^{-1/4-2ε}`.
    pub fn gradient_bound(&self) -> f64 {
        self.rho * self.lambda.powf(-0.25 - 2.0 * self.epsilon)
    }

    /// `ρ λ^{-1/4-ε}`.
    pub fn holder_bound(&self) -> f64 {
        self.rho * self.lambda.powf(-0.25 - self.epsilon)
    }

    /// Checks all three bounds, naming the first that fails.
    pub fn check(&self, phi: &Field) -> Result<()> {
        let f = phi.sup_norm();
        if f >= self.field_bound() {
            return Err(Error::Domain(format!("|φ| = {f} ≥ {}", self.field_bound())));
        }
        for mu in 0..phi.lattice.d {
            let g = forward_derivative(phi, mu).sup_norm();
            if g >= self.gradient_bound() {
                return Err(Error::Domain(format!("|∂φ| = {g} ≥ {}", self.gradient_bound())));
            }
        }
        let h = holder_seminorm(phi, self.alpha)?;
        if h >= self.holder_bound() {
            return Err(Error::Domain(format!("|δ_α ∂φ| = {h} ≥ {}", self.holder_bound())));
        }
        Ok(())
    }

    pub fn contains(&self, phi: &Field) -> bool {
        self.check(phi).is_ok()
    }

    /// Fields inside the domain: constants near the field bound, a ramp
    /// near the gradient bound, and random fields scaled until they fit.
    pub fn sample_family(&self, lat: TorusLattice, random: usize, seed: u64) -> Vec<Field> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = self.field_bound() * (1.0 - 1e-9);
        let mut out = vec![Field::constant(lat, b), Field::constant(lat, -b), Field::constant(lat, 0.5 * b)];
        let n = lat.sites_per_side() as f64;
        let wave = Field::from_fn(lat, |x| (2.0 * std::f64::consts::PI * lat.coords(x)[0] as f64 / n).cos());
        out.push(self.fit_inside(&wave.scaled(b)));
        for _ in 0..random {
            let raw = Field::from_fn(lat, |_| rng.random_range(-1.0..1.0));
            out.push(self.fit_inside(&raw.scaled(b)));
        }
        out.retain(|f| self.contains(f));
        out
    }

    fn fit_inside(&self, f: &Field) -> Field {
        let mut g = f.clone();
        for _ in 0..200 {
            if self.contains(&g) {
                return g;
            }
            g = g.scaled(0.9);
        }
        Field::zeros(f.lattice)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Monomial {
    pub coeff: f64,
    pub field_power: u32,
    pub grad_power: u32,
    pub direction: usize,
}

impl Monomial {
    pub fn new(coeff: f64, field_power: u32, grad_power: u32, direction: usize) -> Self {
        Monomial { coeff, field_power, grad_power, direction }
    }
}

#[derive(Clone, Debug)]
pub struct PolyTerm {
    pub mono: Monomial,
    /// Cubes whose sites carry the sum.
    pub support: Vec<usize>,
    /// `(x, x + e_μ)` pairs, or `(x, x)` when there is no gradient.
    points: Arc<Vec<(usize, usize)>>,
}

pub type Evaluator = Arc<dyn Fn(&Field) -> f64 + Send + Sync>;

#[derive(Clone)]
pub struct OpaqueTerm {
    pub eval: Evaluator,
    pub label: String,
}

impl fmt::Debug for OpaqueTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Opaque({})", self.label)
    }
}

#[derive(Clone, Debug)]
pub enum Piece {
    Poly(PolyTerm),
    Opaque(OpaqueTerm),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CertificateKind {
    Upper,
    Lower,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormCertificate {
    pub value: f64,
    pub kind: CertificateKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormStrategy {
    Analytic,
    Sampled,
}

#[derive(Clone, Debug)]
pub struct LocalFunctional {
    cubes: Arc<BlockMap>,
    pub terms: BTreeMap<Polymer, Vec<Piece>>,
    pub even: bool,
    pub symmetric: bool,
    /// Step for finite-difference derivatives of opaque pieces.
    pub fd_step: f64,
}

fn falling(n: u32, k: u32) -> f64 {
    if k > n {
        return 0.0;
    }
    ((n - k + 1)..=n).map(|v| v as f64).product()
}

impl LocalFunctional {
    /// An empty functional on `field` whose polymers are made of cubes with
    /// `L^cube_exp` sites per side.
    pub fn new(field: TorusLattice, cube_exp: u32) -> Result<Self> {
        Ok(LocalFunctional {
            cubes: Arc::new(BlockMap::new(field, cube_exp)?),
            terms: BTreeMap::new(),
            even: true,
            symmetric: true,
            fd_step: 1e-2,
        })
    }

    pub fn empty_like(&self) -> Self {
        LocalFunctional { terms: BTreeMap::new(), ..self.clone() }
    }

    pub fn field_lattice(&self) -> TorusLattice {
        self.cubes.fine
    }

    pub fn cube_lattice(&self) -> TorusLattice {
        self.cubes.coarse
    }

    pub fn cube_map(&self) -> &BlockMap {
        &self.cubes
    }

    pub fn cube_exp(&self) -> u32 {
        self.cubes.j
    }

    pub fn polymer_sites(&self, poly: &Polymer) -> Vec<usize> {
        let mut s: Vec<usize> = poly.cubes.iter().flat_map(|&c| self.cubes.members(c).iter().copied()).collect();
        s.sort_unstable();
        s
    }

    pub fn volume(&self, poly: &Polymer) -> f64 {
        poly.size() as f64 * self.cubes.block_size() as f64 * self.field_lattice().site_weight()
    }

    fn check_polymer(&self, poly: &Polymer) -> Result<()> {
        if poly.cubes.is_empty() || poly.cubes.iter().any(|&c| c >= self.cube_lattice().n_sites()) {
            return Err(Error::InvalidParameter(format!("polymer {:?} not on the cube lattice", poly.cubes)));
        }
        Ok(())
    }

    fn poly_term(&self, mono: Monomial, support: Vec<usize>) -> Result<PolyTerm> {
        let lat = self.field_lattice();
        if mono.grad_power > 0 && mono.direction >= lat.d {
            return Err(Error::InvalidParameter(format!("direction {} in dimension {}", mono.direction, lat.d)));
        }
        let mut sites: Vec<usize> = support.iter().flat_map(|&c| self.cubes.members(c).iter().copied()).collect();
        sites.sort_unstable();
        let points = if mono.grad_power == 0 {
            sites.iter().map(|&x| (x, x)).collect()
        } else {
            interior_bonds(&lat, &sites, mono.direction)
        };
        Ok(PolyTerm { mono, support, points: Arc::new(points) })
    }

    /// Adds `c ∫_X φ^p (∂_μφ)^q` to `E(X)`.
    pub fn add_monomial(&mut self, poly: &Polymer, mono: Monomial) -> Result<()> {
        self.add_monomial_on(poly, mono, poly.cubes.clone())
    }

    /// Adds a monomial summed over the cubes `support ⊆ X` to `E(X)`.
    pub fn add_monomial_on(&mut self, poly: &Polymer, mono: Monomial, support: Vec<usize>) -> Result<()> {
        self.check_polymer(poly)?;
        if !support.iter().all(|c| poly.contains(*c)) {
            return Err(Error::InvalidParameter("monomial support leaves its polymer".into()));
        }
        if (mono.field_power + mono.grad_power) % 2 == 1 {
            self.even = false;
        }
        let term = self.poly_term(mono, support)?;
        self.terms.entry(poly.clone()).or_default().push(Piece::Poly(term));
        Ok(())
    }

    pub fn add_opaque(&mut self, poly: &Polymer, label: &str, eval: Evaluator) -> Result<()> {
        self.check_polymer(poly)?;
        self.terms
            .entry(poly.clone())
            .or_default()
            .push(Piece::Opaque(OpaqueTerm { eval, label: label.to_string() }));
        Ok(())
    }

    pub fn is_polynomial(&self) -> bool {
        self.terms.values().flatten().all(|p| matches!(p, Piece::Poly(_)))
    }

    fn eval_poly(&self, t: &PolyTerm, phi: &Field) -> f64 {
        let lat = self.field_lattice();
        let a = lat.spacing();
        let (p, q) = (t.mono.field_power as i32, t.mono.grad_power as i32);
        let s: f64 = t
            .points
            .iter()
            .map(|&(x, y)| {
                let base = phi.values[x].powi(p);
                if q == 0 {
                    base
                } else {
                    base * ((phi.values[y] - phi.values[x]) / a).powi(q)
                }
            })
            .sum();
        t.mono.coeff * lat.site_weight() * s
    }

    fn eval_piece(&self, piece: &Piece, phi: &Field) -> f64 {
        match piece {
            Piece::Poly(t) => self.eval_poly(t, phi),
            Piece::Opaque(o) => (o.eval)(phi),
        }
    }

    pub fn evaluate(&self, poly: &Polymer, phi: &Field) -> Result<f64> {
        self.field_lattice().check_same(&phi.lattice)?;
        Ok(self.terms.get(poly).map_or(0.0, |ps| ps.iter().map(|p| self.eval_piece(p, phi)).sum()))
    }

    /// Like [`Self::evaluate`] but refuses fields outside `domain`.
    pub fn evaluate_checked(&self, poly: &Polymer, phi: &Field, domain: &FieldDomain) -> Result<f64> {
        domain.check(phi)?;
        self.evaluate(poly, phi)
    }

    /// `E(φ) = Σ_X E(X, φ)`.
    pub fn evaluate_total(&self, phi: &Field) -> Result<f64> {
        self.field_lattice().check_same(&phi.lattice)?;
        Ok(self.terms.values().flatten().map(|p| self.eval_piece(p, phi)).sum())
    }

    fn deriv_poly(&self, t: &PolyTerm, phi0: &Field, dirs: &[&Field]) -> f64 {
        let lat = self.field_lattice();
        let a = lat.spacing();
        let n = dirs.len();
        let (p, q) = (t.mono.field_power, t.mono.grad_power);
        if n as u32 > p + q {
            return 0.0;
        }
        let mut total = 0.0;
        for &(x, y) in t.points.iter() {
            let f0 = phi0.values[x];
            let g0 = if q == 0 { 0.0 } else { (phi0.values[y] - phi0.values[x]) / a };
            for subset in 0u32..(1 << n) {
                let ns = subset.count_ones();
                let ng = n as u32 - ns;
                if ns > p || ng > q {
                    continue;
                }
                let mut v = falling(p, ns) * f0.powi((p - ns) as i32) * falling(q, ng) * g0.powi((q - ng) as i32);
                for (i, f) in dirs.iter().enumerate() {
                    if subset & (1 << i) != 0 {
                        v *= f.values[x];
                    } else {
                        v *= (f.values[y] - f.values[x]) / a;
                    }
                }
                total += v;
            }
        }
        t.mono.coeff * lat.site_weight() * total
    }

    fn deriv_opaque(&self, o: &OpaqueTerm, phi0: &Field, dirs: &[&Field]) -> Result<f64> {
        let n = dirs.len();
        if n == 0 {
            return Ok((o.eval)(phi0));
        }
        let scale = dirs.iter().map(|f| f.sup_norm()).fold(0.0, f64::max);
        if scale == 0.0 {
            return Ok(0.0);
        }
        let central = |h: f64| -> Result<f64> {
            let mut acc = 0.0;
            for signs in 0u32..(1 << n) {
                let mut shifted = phi0.clone();
                let mut sign = 1.0;
                for (i, f) in dirs.iter().enumerate() {
                    let s = if signs & (1 << i) != 0 { 1.0 } else { -1.0 };
                    sign *= s;
                    shifted = shifted.axpy(s * h, f)?;
                }
                acc += sign * (o.eval)(&shifted);
            }
            Ok(acc / (2.0 * h).powi(n as i32))
        };
        let h = self.fd_step / scale;
        let coarse = central(h)?;
        let fine = central(0.5 * h)?;
        Ok((4.0 * fine - coarse) / 3.0)
    }

    /// `E_n(X, φ₀; f₁, …, f_n) = ∂ⁿ/∂t₁…∂t_n E(X, φ₀ + Σ t_i f_i)` at `t = 0`,
    /// exact on monomials and by Richardson-extrapolated central differences on
    /// opaque pieces.
    pub fn derivative(&self, poly: &Polymer, phi0: &Field, dirs: &[&Field]) -> Result<f64> {
        if dirs.len() > 4 {
            return Err(Error::InvalidParameter("derivatives above fourth order are not supported".into()));
        }
        let lat = self.field_lattice();
        lat.check_same(&phi0.lattice)?;
        for f in dirs {
            lat.check_same(&f.lattice)?;
        }
        let mut total = 0.0;
        if let Some(pieces) = self.terms.get(poly) {
            for p in pieces {
                total += match p {
                    Piece::Poly(t) => self.deriv_poly(t, phi0, dirs),
                    Piece::Opaque(o) => self.deriv_opaque(o, phi0, dirs)?,
                };
            }
        }
        Ok(total)
    }

    /// Triangle-inequality bound on `sup_{φ∈domain} |E(X, φ)|`.
    pub fn norm_analytic(&self, poly: &Polymer, domain: &FieldDomain) -> Result<f64> {
        let w = self.field_lattice().site_weight();
        let (bf, bg) = (domain.field_bound(), domain.gradient_bound());
        let mut s = 0.0;
        for p in self.terms.get(poly).map(|v| v.as_slice()).unwrap_or(&[]) {
            match p {
                Piece::Poly(t) => {
                    s += t.mono.coeff.abs()
                        * w
                        * t.points.len() as f64
                        * bf.powi(t.mono.field_power as i32)
                        * bg.powi(t.mono.grad_power as i32)
                }
                Piece::Opaque(o) => {
                    return Err(Error::Precondition(format!("no analytic norm for opaque piece {}", o.label)));
                }
            }
        }
        Ok(s)
    }

    /// Largest `|E(X, φ)|` over the sample family of `domain`.
    pub fn norm_sampled(&self, poly: &Polymer, domain: &FieldDomain, random: usize, seed: u64) -> Result<f64> {
        let mut best: f64 = 0.0;
        for f in domain.sample_family(self.field_lattice(), random, seed) {
            best = best.max(self.evaluate(poly, &f)?.abs());
        }
        Ok(best)
    }

    pub fn norm(&self, poly: &Polymer, domain: &FieldDomain, strategy: NormStrategy) -> Result<NormCertificate> {
        Ok(match strategy {
            NormStrategy::Analytic => {
                NormCertificate { value: self.norm_analytic(poly, domain)?, kind: CertificateKind::Upper }
            }
            NormStrategy::Sampled => {
                NormCertificate { value: self.norm_sampled(poly, domain, 8, 0)?, kind: CertificateKind::Lower }
            }
        })
    }

    /// `sup_X ‖E(X)‖ e^{κ d_M(X)}` over the stored polymers.
    pub fn global_norm(&self, domain: &FieldDomain, kappa: f64, strategy: NormStrategy) -> Result<NormCertificate> {
        let mut best: f64 = 0.0;
        let mut kind = match strategy {
            NormStrategy::Analytic => CertificateKind::Upper,
            NormStrategy::Sampled => CertificateKind::Lower,
        };
        for poly in self.terms.keys() {
            let c = self.norm(poly, domain, strategy)?;
            kind = c.kind;
            let dm = spanning_tree_length(&self.cube_lattice(), &poly.cubes);
            best = best.max(c.value * (kappa * dm).exp());
        }
        Ok(NormCertificate { value: best, kind })
    }

    /// Analytic norm when every piece is a monomial, sampled otherwise.
    pub fn global_norm_best(&self, domain: &FieldDomain, kappa: f64) -> Result<NormCertificate> {
        if self.is_polynomial() {
            self.global_norm(domain, kappa, NormStrategy::Analytic)
        } else {
            self.global_norm(domain, kappa, NormStrategy::Sampled)
        }
    }

    /// `F_{L^{-1}}(X, φ) = F(LX, φ_L)`: the same site sets read at spacing
    /// divided by `L`.
    pub fn scale_down(&self) -> Result<LocalFunctional> {
        let old = self.field_lattice();
        let new_lat = old.scaled_down();
        let lf = old.l as f64;
        let sigma = crate::lattice::field_scaling_exponent(old.d);
        let mut out = LocalFunctional::new(new_lat, self.cube_exp())?;
        out.even = self.even;
        out.symmetric = self.symmetric;
        out.fd_step = self.fd_step;
        for (poly, pieces) in &self.terms {
            for p in pieces {
                match p {
                    Piece::Poly(t) => {
                        let m = t.mono;
                        let factor = lf.powi(old.d as i32)
                            * lf.powf(-sigma * m.field_power as f64)
                            * lf.powf(-(sigma + 1.0) * m.grad_power as f64);
                        let mono = Monomial { coeff: m.coeff * factor, ..m };
                        let term = PolyTerm { mono, ..t.clone() };
                        out.terms.entry(poly.clone()).or_default().push(Piece::Poly(term));
                    }
                    Piece::Opaque(o) => {
                        let inner = o.eval.clone();
                        let eval: Evaluator = Arc::new(move |phi: &Field| inner(&scale_field(phi, ScaleDirection::Up)));
                        out.terms
                            .entry(poly.clone())
                            .or_default()
                            .push(Piece::Opaque(OpaqueTerm { eval, label: format!("{}@L^-1", o.label) }));
                    }
                }
            }
        }
        Ok(out)
    }

    /// `(ℬE)(Y) = Σ_{X̄ = Y} E(X)` on polymers of `L`-times larger cubes.
    pub fn reblock(&self) -> Result<LocalFunctional> {
        let reb = Reblocking::new(self.cube_lattice())?;
        let mut out = LocalFunctional::new(self.field_lattice(), self.cube_exp() + 1)?;
        out.even = self.even;
        out.symmetric = self.symmetric;
        out.fd_step = self.fd_step;
        for (poly, pieces) in &self.terms {
            let bar = reb.reblock(poly);
            let moved = pieces.iter().map(|p| match p {
                Piece::Poly(t) => {
                    let mut support: Vec<usize> = t.support.iter().map(|&c| out.cubes.block_of(self.cubes.members(c)[0])).collect();
                    support.sort_unstable();
                    support.dedup();
                    Piece::Poly(PolyTerm { support, ..t.clone() })
                }
                other => other.clone(),
            });
            out.terms.entry(bar).or_default().extend(moved);
        }
        Ok(out)
    }

    /// `a·self + b·other` on the same geometry.
    pub fn linear_combination(&self, a: f64, other: &LocalFunctional, b: f64) -> Result<LocalFunctional> {
        if self.field_lattice() != other.field_lattice() || self.cube_exp() != other.cube_exp() {
            return Err(Error::LatticeMismatch("functionals on different geometries".into()));
        }
        let mut out = self.empty_like();
        out.even = self.even && other.even;
        out.symmetric = self.symmetric && other.symmetric;
        for (src, c) in [(self, a), (other, b)] {
            for (poly, pieces) in &src.terms {
                for p in pieces {
                    out.terms.entry(poly.clone()).or_default().push(scale_piece(p, c));
                }
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, c: f64) -> LocalFunctional {
        let mut out = self.clone();
        for pieces in out.terms.values_mut() {
            for p in pieces.iter_mut() {
                *p = scale_piece(p, c);
            }
        }
        out
    }

    pub fn is_small(&self, poly: &Polymer) -> bool {
        spanning_tree_length(&self.cube_lattice(), &poly.cubes) < self.field_lattice().l as f64
    }

    /// Minimal-image displacement along `mu` from the centre of the least cube
    /// of `X`, in continuum units.
    pub fn base_displacement(&self, poly: &Polymer, mu: usize) -> Field {
        let lat = self.field_lattice();
        let side = lat.l.pow(self.cube_exp());
        let c = self.cube_lattice().coords(poly.cubes[0]);
        let base = lat.index(&[c[0] * side, c[1] * side, c[2] * side]);
        Field::from_fn(lat, |x| lat.displacement(x, base, mu) as f64 * lat.spacing())
    }

    /// The relevant coefficients of `E(X)` at zero field.
    pub fn extraction(&self, poly: &Polymer) -> Result<Extraction> {
        let lat = self.field_lattice();
        let zero = Field::zeros(lat);
        let one = Field::constant(lat, 1.0);
        let vol = self.volume(poly);
        let alpha0 = self.evaluate(poly, &zero)? / vol;
        let alpha2 = self.derivative(poly, &zero, &[&one, &one])? / (2.0 * vol);
        let sites = self.polymer_sites(poly);
        let w = lat.site_weight();
        let mut alpha2_dir = Vec::with_capacity(lat.d);
        let mut undetermined = Vec::new();
        for mu in 0..lat.d {
            let g = self.base_displacement(poly, mu);
            let dmu = self.bond_basis_slope(poly, mu, &g);
            if dmu.abs() <= 1e-12 * vol {
                alpha2_dir.push(0.0);
                undetermined.push(mu);
                continue;
            }
            let e2 = self.derivative(poly, &zero, &[&one, &g])?;
            let int_g: f64 = w * sites.iter().map(|&x| g.values[x]).sum::<f64>();
            alpha2_dir.push((e2 - 2.0 * alpha2 * int_g) / dmu);
        }
        Ok(Extraction { polymer: poly.cubes.clone(), alpha0, alpha2, alpha2_dir, undetermined })
    }

    /// `Σ_{□⊂X} w Σ_{bonds in □} ∂_μ g`, the response of the `φ∂_μφ` basis.
    fn bond_basis_slope(&self, poly: &Polymer, mu: usize, g: &Field) -> f64 {
        let lat = self.field_lattice();
        let a = lat.spacing();
        let mut s = 0.0;
        for &c in &poly.cubes {
            for (x, y) in interior_bonds(&lat, self.cubes.members(c), mu) {
                s += (g.values[y] - g.values[x]) / a;
            }
        }
        s * lat.site_weight()
    }

    /// `ℛE` together with the extracted energy and mass.
    pub fn normalize(&self) -> Result<Normalization> {
        let lat = self.field_lattice();
        let mut remainder = self.clone();
        let mut extractions = Vec::new();
        for poly in self.terms.keys() {
            if !self.is_small(poly) {
                continue;
            }
            let ex = self.extraction(poly)?;
            remainder.add_monomial(poly, Monomial::new(-ex.alpha0, 0, 0, 0))?;
            remainder.add_monomial(poly, Monomial::new(-ex.alpha2, 2, 0, 0))?;
            for mu in 0..lat.d {
                if ex.alpha2_dir[mu] != 0.0 {
                    for &c in &poly.cubes {
                        remainder.add_monomial_on(poly, Monomial::new(-ex.alpha2_dir[mu], 1, 1, mu), vec![c])?;
                    }
                }
            }
            extractions.push(ex);
        }
        remainder.even = self.even;
        let n_cubes = self.cube_lattice().n_sites();
        let mut eps_per_cube = vec![0.0; n_cubes];
        let mut mu_per_cube = vec![0.0; n_cubes];
        let mut reflection = vec![0.0; lat.d];
        for ex in &extractions {
            for &c in &ex.polymer {
                eps_per_cube[c] -= ex.alpha0;
                mu_per_cube[c] -= 2.0 * ex.alpha2;
            }
            if ex.polymer.contains(&0) {
                for (r, a) in reflection.iter_mut().zip(&ex.alpha2_dir) {
                    *r += a;
                }
            }
        }
        let spread = |v: &[f64]| {
            let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
            hi - lo
        };
        Ok(Normalization {
            epsilon: eps_per_cube[0],
            mu: mu_per_cube[0],
            epsilon_spread: spread(&eps_per_cube),
            mu_spread: spread(&mu_per_cube),
            reflection_sum: reflection,
            extractions,
            remainder,
        })
    }

    /// Largest change of `E(X)` when `φ` is perturbed off the sites of `X`.
    pub fn locality_defect(&self, poly: &Polymer, phi: &Field, seed: u64) -> Result<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let sites = self.polymer_sites(poly);
        let base = self.evaluate(poly, phi)?;
        let mut moved = phi.clone();
        for (x, v) in moved.values.iter_mut().enumerate() {
            if sites.binary_search(&x).is_err() {
                *v += rng.random_range(-1.0..1.0);
            }
        }
        Ok((self.evaluate(poly, &moved)? - base).abs())
    }

    /// `max_X |E(X, -φ) - E(X, φ)|`.
    pub fn evenness_defect(&self, phi: &Field) -> Result<f64> {
        let neg = phi.scaled(-1.0);
        let mut worst: f64 = 0.0;
        for poly in self.terms.keys() {
            worst = worst.max((self.evaluate(poly, phi)? - self.evaluate(poly, &neg)?).abs());
        }
        Ok(worst)
    }

    /// `max_X |E(σX, φ∘σ⁻¹) - E(X, φ)|` for the reflection `x ↦ -x` of every
    /// axis; polymers whose image carries no term count as zero.
    pub fn reflection_defect(&self, phi: &Field) -> Result<f64> {
        let lat = self.field_lattice();
        let cl = self.cube_lattice();
        let reflect_site = |x: usize| {
            let c = lat.coords(x);
            let n = lat.sites_per_side();
            let mut y = [0usize; 3];
            for mu in 0..lat.d {
                y[mu] = (n - c[mu]) % n;
            }
            lat.index(&y)
        };
        let image = Field::from_fn(lat, |x| phi.values[reflect_site(x)]);
        let mut worst: f64 = 0.0;
        for poly in self.terms.keys() {
            let mut cubes: Vec<usize> = poly
                .cubes
                .iter()
                .map(|&c| {
                    let v = cl.coords(c);
                    let n = cl.sites_per_side();
                    let mut y = [0usize; 3];
                    for mu in 0..cl.d {
                        y[mu] = (n - v[mu]) % n;
                    }
                    cl.index(&y)
                })
                .collect();
            cubes.sort_unstable();
            let img = Polymer::from_sorted_unchecked(cubes);
            worst = worst.max((self.evaluate(&img, &image)? - self.evaluate(poly, phi)?).abs());
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> Result<Vec<FunctionalTermJson>> {
        let mut out = Vec::new();
        for (poly, pieces) in &self.terms {
            let mut monomials = Vec::new();
            for p in pieces {
                match p {
                    Piece::Poly(t) if self.poly_term(t.mono, t.support.clone())?.points != t.points => {
                        return Err(Error::Precondition("monomial sums over part of a cube".into()));
                    }
                    Piece::Poly(t) => monomials.push(MonomialJson {
                        coeff: t.mono.coeff,
                        field_power: t.mono.field_power,
                        grad_power: t.mono.grad_power,
                        direction: t.mono.direction,
                        support: (t.support != poly.cubes).then(|| t.support.clone()),
                    }),
                    Piece::Opaque(o) => {
                        return Err(Error::Precondition(format!("opaque piece {} cannot be serialized", o.label)));
                    }
                }
            }
            out.push(FunctionalTermJson {
                polymer: poly.cubes.clone(),
                monomials,
                flags: FlagsJson { even: self.even, symmetric: self.symmetric },
            })
        }
        Ok(out)
    }

    pub fn from_json(field: TorusLattice, cube_exp: u32, terms: &[FunctionalTermJson]) -> Result<Self> {
        let mut f = LocalFunctional::new(field, cube_exp)?;
        for t in terms {
            let poly = Polymer::new(&f.cube_lattice(), t.polymer.clone())?;
            for m in &t.monomials {
                let mono = Monomial::new(m.coeff, m.field_power, m.grad_power, m.direction);
                match &m.support {
                    Some(s) => f.add_monomial_on(&poly, mono, s.clone())?,
                    None => f.add_monomial(&poly, mono)?,
                }
            }
            f.symmetric &= t.flags.symmetric;
        }
        Ok(f)
    }
}

fn scale_piece(p: &Piece, c: f64) -> Piece {
    match p {
        Piece::Poly(t) => Piece::Poly(PolyTerm { mono: Monomial { coeff: t.mono.coeff * c, ..t.mono }, ..t.clone() }),
        Piece::Opaque(o) => {
            let inner = o.eval.clone();
            Piece::Opaque(OpaqueTerm { eval: Arc::new(move |phi: &Field| c * inner(phi)), label: o.label.clone() })
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Extraction {
    pub polymer: Vec<usize>,
    pub alpha0: f64,
    pub alpha2: f64,
    pub alpha2_dir: Vec<f64>,
    /// Directions where the `φ∂φ` basis has no response on `X` (the polymer
    /// wraps the torus); their coefficient is set to zero.
    pub undetermined: Vec<usize>,
}

impl Extraction {
    pub fn max_abs(&self) -> f64 {
        self.alpha2_dir.iter().fold(self.alpha0.abs().max(self.alpha2.abs()), |m, a| m.max(a.abs()))
    }
}

#[derive(Clone, Debug)]
pub struct Normalization {
    /// `ε(E) = -Σ_{X⊃□, small} α₀(X)` at cube 0.
    pub epsilon: f64,
    /// `μ(E) = -2 Σ_{X⊃□, small} α₂(X)` at cube 0.
    pub mu: f64,
    /// Spread of the per-cube sums over all cubes.
    pub epsilon_spread: f64,
    pub mu_spread: f64,
    /// `Σ_{X⊃□} α_{2,μ}(X)` per direction.
    pub reflection_sum: Vec<f64>,
    pub extractions: Vec<Extraction>,
    pub remainder: LocalFunctional,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonomialJson {
    pub coeff: f64,
    pub field_power: u32,
    pub grad_power: u32,
    #[serde(default)]
    pub direction: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagsJson {
    pub even: bool,
    pub symmetric: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FunctionalTermJson {
    pub polymer: Vec<usize>,
    pub monomials: Vec<MonomialJson>,
    pub flags: FlagsJson,
}

/// `V_k(□, φ) = ε Vol(□) + ½ μ ∫_□ φ² + ¼ λ ∫_□ φ⁴` on a set of sites.
pub fn potential(lat: &TorusLattice, sites: &[usize], phi: &Field, epsilon: f64, mu: f64, lambda: f64) -> f64 {
    let w = lat.site_weight();
    sites
        .iter()
        .map(|&x| {
            let v = phi.values[x];
            w * (epsilon + 0.5 * mu * v * v + 0.25 * lambda * v.powi(4))
        })
        .sum()
}

/// The potential as a functional with one polymer per cube.
pub fn potential_functional(field: TorusLattice, cube_exp: u32, epsilon: f64, mu: f64, lambda: f64) -> Result<LocalFunctional> {
    let mut f = LocalFunctional::new(field, cube_exp)?;
    for c in 0..f.cube_lattice().n_sites() {
        let p = Polymer::from_sorted_unchecked(vec![c]);
        f.add_monomial(&p, Monomial::new(epsilon, 0, 0, 0))?;
        f.add_monomial(&p, Monomial::new(0.5 * mu, 2, 0, 0))?;
        f.add_monomial(&p, Monomial::new(0.25 * lambda, 4, 0, 0))?;
    }
    Ok(f)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SmallFieldReport {
    pub member: bool,
    pub failing: Option<String>,
    /// `|Φ_k| ≤ 2 p_k λ^{-1/4}`.
    pub field_fact: Option<bool>,
    /// `|∂Φ_k| ≤ 3 p_k`.
    pub gradient_fact: Option<bool>,
    /// `φ_k ∈ R_k`.
    pub domain_fact: Option<bool>,
}

/// `p_k = (-log λ_k)^p`.
pub fn log_power(lambda: f64, p: f64) -> f64 {
    (-lambda.ln()).powf(p)
}

/// Tests the small-field conditions on `Φ_k` through the minimizer
/// `φ_k(Φ_k)`, and when they hold checks the bounds they imply.
pub fn small_field_membership(flow: &FreeFlow, big: &Field, domain: &FieldDomain, p_k: f64) -> Result<SmallFieldReport> {
    let phi = flow.minimizer(big)?;
    let lambda = domain.lambda;
    let resid = big.axpy(-1.0, &flow.qk.apply_q(&phi)?)?.sup_norm();
    let grad = (0..phi.lattice.d).map(|mu| forward_derivative(&phi, mu).sup_norm()).fold(0.0, f64::max);
    let amp = phi.sup_norm();
    let failing = if resid > p_k {
        Some(format!("|Φ - Qφ| = {resid} > p_k = {p_k}"))
    } else if grad > p_k {
        Some(format!("|∂φ| = {grad} > p_k = {p_k}"))
    } else if amp > lambda.powf(-0.25) * p_k {
        Some(format!("|φ| = {amp} > λ^(-1/4) p_k = {}", lambda.powf(-0.25) * p_k))
    } else {
        None
    };
    if failing.is_some() {
        return Ok(SmallFieldReport { member: false, failing, field_fact: None, gradient_fact: None, domain_fact: None });
    }
    let big_grad = (0..big.lattice.d).map(|mu| forward_derivative(big, mu).sup_norm()).fold(0.0, f64::max);
    Ok(SmallFieldReport {
        member: true,
        failing: None,
        field_fact: Some(big.sup_norm() <= 2.0 * p_k * lambda.powf(-0.25)),
        gradient_fact: Some(big_grad <= 3.0 * p_k),
        domain_fact: Some(domain.contains(&phi)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn lat1() -> TorusLattice {
        TorusLattice::new(1, 3, 2, 0).unwrap()
    }

    fn poly(c: &[usize]) -> Polymer {
        Polymer::from_sorted_unchecked(c.to_vec())
    }

    fn random_field(lat: TorusLattice, seed: u64) -> Field {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(lat, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn square_integral_on_constants() {
        let mut f = LocalFunctional::new(lat1(), 1).unwrap();
        let x = poly(&[0]);
        f.add_monomial(&x, Monomial::new(1.0, 2, 0, 0)).unwrap();
        let phi = Field::constant(lat1(), 2.0);
        assert!((f.evaluate(&x, &phi).unwrap() - 12.0).abs() < 1e-12);
        assert!(f.locality_defect(&x, &random_field(lat1(), 1), 2).unwrap() == 0.0);
        let one = Field::constant(lat1(), 1.0);
        let zero = Field::zeros(lat1());
        assert!((f.derivative(&x, &zero, &[&one, &one]).unwrap() - 6.0).abs() < 1e-12);
        assert_eq!(f.derivative(&x, &zero, &[&one]).unwrap(), 0.0);
    }

    #[test]
    fn quartic_derivatives_symbolic_and_numeric() {
        let lat = lat1();
        let x = poly(&[0, 1]);
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        f.add_monomial(&x, Monomial::new(1.0, 4, 0, 0)).unwrap();
        let g = random_field(lat, 3);
        let zero = Field::zeros(lat);
        assert_eq!(f.derivative(&x, &zero, &[&g, &g]).unwrap(), 0.0);
        let sites = f.polymer_sites(&x);
        let want: f64 = 24.0 * sites.iter().map(|&s| g.values[s].powi(4)).sum::<f64>();
        assert!((f.derivative(&x, &zero, &[&g, &g, &g, &g]).unwrap() - want).abs() < 1e-10);

        let mut opaque = LocalFunctional::new(lat, 1).unwrap();
        let sites_c = sites.clone();
        opaque
            .add_opaque(&x, "quartic", Arc::new(move |p: &Field| sites_c.iter().map(|&s| p.values[s].powi(4)).sum()))
            .unwrap();
        opaque.fd_step = 0.05;
        let phi0 = random_field(lat, 4);
        let h = random_field(lat, 5);
        let sym = f.derivative(&x, &phi0, &[&h, &h]).unwrap();
        let num = opaque.derivative(&x, &phi0, &[&h, &h]).unwrap();
        assert!((sym - num).abs() < 1e-6 * (1.0 + sym.abs()), "{sym} {num}");
    }

    #[test]
    fn gradient_monomial_derivatives_match_finite_differences() {
        let lat = TorusLattice::new(2, 3, 2, 1).unwrap();
        let x = poly(&[0, 1]);
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        f.add_monomial(&x, Monomial::new(0.7, 2, 2, 1)).unwrap();
        f.add_monomial(&x, Monomial::new(-0.3, 1, 1, 0)).unwrap();
        let mut g = f.empty_like();
        let fc = f.clone();
        let xc = x.clone();
        g.add_opaque(&x, "copy", Arc::new(move |p: &Field| fc.evaluate(&xc, p).unwrap())).unwrap();
        g.fd_step = 0.02;
        let phi0 = random_field(lat, 1);
        let dirs = [random_field(lat, 2), random_field(lat, 3), random_field(lat, 4)];
        for n in 1..=3 {
            let refs: Vec<&Field> = dirs.iter().take(n).collect();
            let a = f.derivative(&x, &phi0, &refs).unwrap();
            let b = g.derivative(&x, &phi0, &refs).unwrap();
            assert!((a - b).abs() < 1e-5 * (1.0 + a.abs()), "n={n}: {a} vs {b}");
        }
    }

    #[test]
    fn potential_matches_direct_sum() {
        let lat = lat1();
        let phi = random_field(lat, 9);
        let f = potential_functional(lat, 1, 0.1, -0.2, 0.3).unwrap();
        let x = poly(&[1]);
        let sites = f.polymer_sites(&x);
        let direct: f64 = sites
            .iter()
            .map(|&s| 0.1 + 0.5 * -0.2 * phi.values[s].powi(2) + 0.25 * 0.3 * phi.values[s].powi(4))
            .sum();
        assert!((f.evaluate(&x, &phi).unwrap() - direct).abs() < 1e-12);
        assert!((potential(&lat, &sites, &Field::constant(lat, 1.0), 1.0, 1.0, 1.0) - 3.0 * 1.75).abs() < 1e-12);
    }

    #[test]
    fn norms() {
        let lat = lat1();
        let dom = FieldDomain::new(1e-3, 0.01, 0.75).unwrap();
        let x = poly(&[0]);
        let mut c = LocalFunctional::new(lat, 1).unwrap();
        c.add_monomial(&x, Monomial::new(-2.0, 0, 0, 0)).unwrap();
        assert!((c.norm_analytic(&x, &dom).unwrap() - 6.0).abs() < 1e-12);
        assert!((c.norm_sampled(&x, &dom, 2, 0).unwrap() - 6.0).abs() < 1e-12);
        let mut q = LocalFunctional::new(lat, 1).unwrap();
        q.add_monomial(&x, Monomial::new(1.0, 2, 0, 0)).unwrap();
        let bound = dom.lambda.powf(-0.5 - 6.0 * dom.epsilon) * 3.0;
        let an = q.norm_analytic(&x, &dom).unwrap();
        assert!((an - bound).abs() < 1e-9 * bound);
        let sm = q.norm_sampled(&x, &dom, 4, 1).unwrap();
        assert!(sm <= an && sm > 0.999 * an);
        let y = poly(&[0, 1]);
        q.add_monomial(&y, Monomial::new(0.5, 2, 0, 0)).unwrap();
        let g = q.global_norm(&dom, 1.0, NormStrategy::Analytic).unwrap();
        let want = an.max(0.5 * dom.field_bound().powi(2) * 6.0 * 1f64.exp());
        assert!((g.value - want).abs() < 1e-9 * want);
        assert_eq!(g.kind, CertificateKind::Upper);
    }

    #[test]
    fn domain_checks() {
        let lat = lat1();
        let dom = FieldDomain::new(1e-2, 0.01, 0.75).unwrap();
        assert!(dom.contains(&Field::zeros(lat)));
        let mut spike = Field::zeros(lat);
        spike.values[0] = 10.0 * dom.field_bound();
        assert!(matches!(dom.check(&spike), Err(Error::Domain(_))));
        for f in dom.sample_family(lat, 5, 1) {
            assert!(dom.contains(&f));
        }
        assert!(FieldDomain::new(1e-2, 0.5, 0.75).is_err());
    }

    #[test]
    fn normalization_examples() {
        let lat = lat1();
        let x = poly(&[0]);
        let mut q = LocalFunctional::new(lat, 1).unwrap();
        q.add_monomial(&x, Monomial::new(1.0, 2, 0, 0)).unwrap();
        let n = q.normalize().unwrap();
        let ex = &n.extractions[0];
        assert!((ex.alpha2 - 1.0).abs() < 1e-12 && ex.alpha0.abs() < 1e-15 && ex.alpha2_dir[0].abs() < 1e-12);
        let phi = random_field(lat, 1);
        assert!(n.remainder.evaluate(&x, &phi).unwrap().abs() < 1e-12);

        let mut c = LocalFunctional::new(lat, 1).unwrap();
        c.add_monomial(&x, Monomial::new(0.4, 0, 0, 0)).unwrap();
        let n = c.normalize().unwrap();
        assert!((n.extractions[0].alpha0 - 0.4).abs() < 1e-15);
        assert!(n.remainder.evaluate(&x, &phi).unwrap().abs() < 1e-12);

        let mut quartic = LocalFunctional::new(lat, 1).unwrap();
        quartic.add_monomial(&x, Monomial::new(1.0, 4, 0, 0)).unwrap();
        let n = quartic.normalize().unwrap();
        assert!(n.extractions[0].max_abs() < 1e-15);
        assert!((n.remainder.evaluate(&x, &phi).unwrap() - quartic.evaluate(&x, &phi).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn normalization_of_mixed_functional_and_idempotence() {
        let lat = TorusLattice::new(2, 3, 2, 1).unwrap();
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        let cl = f.cube_lattice();
        for c in 0..cl.n_sites() {
            let x = poly(&[c]);
            f.add_monomial(&x, Monomial::new(0.3, 0, 0, 0)).unwrap();
            f.add_monomial(&x, Monomial::new(-0.2, 2, 0, 0)).unwrap();
            f.add_monomial(&x, Monomial::new(0.1, 4, 0, 0)).unwrap();
            f.add_monomial(&x, Monomial::new(0.05, 1, 1, 0)).unwrap();
            f.add_monomial(&x, Monomial::new(0.5, 0, 2, 1)).unwrap();
            let mut pair = vec![c, cl.shift(c, 0, 1)];
            pair.sort_unstable();
            let y = Polymer::new(&cl, pair).unwrap();
            f.add_monomial(&y, Monomial::new(0.02, 2, 0, 0)).unwrap();
            f.add_monomial(&y, Monomial::new(0.01, 1, 1, 1)).unwrap();
        }
        let n = f.normalize().unwrap();
        assert!(n.epsilon_spread < 1e-12 && n.mu_spread < 1e-12);
        let again = n.remainder.normalize().unwrap();
        for ex in &again.extractions {
            assert!(ex.max_abs() < 1e-10, "{ex:?}");
        }
    }

    #[test]
    fn scale_down_agrees_with_definition() {
        let lat = TorusLattice::new(3, 3, 1, 0).unwrap();
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        let x = poly(&[0]);
        f.add_monomial(&x, Monomial::new(1.3, 2, 0, 0)).unwrap();
        f.add_monomial(&x, Monomial::new(0.4, 4, 0, 0)).unwrap();
        f.add_monomial(&x, Monomial::new(0.7, 0, 2, 2)).unwrap();
        let s = f.scale_down().unwrap();
        let phi = random_field(s.field_lattice(), 3);
        let direct = f.evaluate(&x, &scale_field(&phi, ScaleDirection::Up)).unwrap();
        assert!((s.evaluate(&x, &phi).unwrap() - direct).abs() < 1e-12 * (1.0 + direct.abs()));
    }

    #[test]
    fn reblock_preserves_global_sum() {
        let lat = TorusLattice::new(1, 3, 3, 0).unwrap();
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        let cl = f.cube_lattice();
        for c in 0..cl.n_sites() {
            f.add_monomial(&poly(&[c]), Monomial::new(0.1 * c as f64, 2, 0, 0)).unwrap();
            let mut pair = vec![c, cl.shift(c, 0, 1)];
            pair.sort_unstable();
            f.add_monomial(&poly(&pair), Monomial::new(0.3, 4, 0, 0)).unwrap();
        }
        let b = f.reblock().unwrap();
        let phi = random_field(lat, 1);
        assert!((b.evaluate_total(&phi).unwrap() - f.evaluate_total(&phi).unwrap()).abs() < 1e-12);
        let sub = poly(&[0]);
        assert!((b.evaluate(&sub, &phi).unwrap()
            - [0usize, 1, 8].iter().map(|&c| f.evaluate(&poly(&[c]), &phi).unwrap()).sum::<f64>()
            - f.evaluate(&poly(&[0, 1]), &phi).unwrap()
            - f.evaluate(&poly(&[0, 8]), &phi).unwrap())
        .abs()
            < 1e-12);
    }

    #[test]
    fn json_round_trip() {
        let lat = lat1();
        let mut f = LocalFunctional::new(lat, 1).unwrap();
        let x = poly(&[0, 1]);
        f.add_monomial(&x, Monomial::new(1.0, 2, 0, 0)).unwrap();
        f.add_monomial_on(&x, Monomial::new(-0.5, 1, 1, 0), vec![1]).unwrap();
        let js = serde_json::to_string(&f.to_json().unwrap()).unwrap();
        let terms: Vec<FunctionalTermJson> = serde_json::from_str(&js).unwrap();
        let g = LocalFunctional::from_json(lat, 1, &terms).unwrap();
        let phi = random_field(lat, 2);
        assert_eq!(f.evaluate(&x, &phi).unwrap(), g.evaluate(&x, &phi).unwrap());
    }

    #[test]
    fn small_field_membership_examples() {
        use crate::gaussian_flow::GaussParams;
        let flow = FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 2, k: 1, a: 1.0, mu_bar: 0.0 }).unwrap();
        let dom = FieldDomain::new(1e-3, 0.01, 0.75).unwrap();
        let pk = log_power(1e-3, 2.0);
        let rep = small_field_membership(&flow, &Field::zeros(flow.coarse), &dom, pk).unwrap();
        assert!(rep.member && rep.field_fact == Some(true));
        let mut spike = Field::zeros(flow.coarse);
        spike.values[0] = 1e3;
        let rep = small_field_membership(&flow, &spike, &dom, pk).unwrap();
        assert!(!rep.member && rep.failing.is_some());
        let small = random_field(flow.coarse, 3);
        let rep = small_field_membership(&flow, &small, &dom, pk).unwrap();
        assert!(rep.member);
        assert_eq!(rep.field_fact, Some(true));
        assert_eq!(rep.gradient_fact, Some(true));
        assert_eq!(rep.domain_fact, Some(true));
    }

    proptest! {
        #[test]
        fn extraction_is_linear(a in -2.0f64..2.0, b in -2.0f64..2.0, c0 in -1.0f64..1.0, c2 in -1.0f64..1.0) {
            let lat = lat1();
            let x = poly(&[0, 1]);
            let mut e1 = LocalFunctional::new(lat, 1).unwrap();
            e1.add_monomial(&x, Monomial::new(c0, 0, 0, 0)).unwrap();
            e1.add_monomial(&x, Monomial::new(c2, 2, 0, 0)).unwrap();
            let mut e2 = LocalFunctional::new(lat, 1).unwrap();
            e2.add_monomial(&x, Monomial::new(0.3, 1, 1, 0)).unwrap();
            e2.add_monomial(&x, Monomial::new(0.2, 4, 0, 0)).unwrap();
            let combo = e1.linear_combination(a, &e2, b).unwrap();
            let (x1, x2, xc) = (e1.extraction(&x).unwrap(), e2.extraction(&x).unwrap(), combo.extraction(&x).unwrap());
            prop_assert!((xc.alpha0 - (a * x1.alpha0 + b * x2.alpha0)).abs() < 1e-12);
            prop_assert!((xc.alpha2 - (a * x1.alpha2 + b * x2.alpha2)).abs() < 1e-12);
            prop_assert!((xc.alpha2_dir[0] - (a * x1.alpha2_dir[0] + b * x2.alpha2_dir[0])).abs() < 1e-12);
        }

        #[test]
        fn local_even_symmetric(seed in 0u64..500) {
            let lat = TorusLattice::new(2, 3, 2, 1).unwrap();
            let mut f = LocalFunctional::new(lat, 1).unwrap();
            let x = poly(&[0]);
            f.add_monomial(&x, Monomial::new(0.3, 2, 0, 0)).unwrap();
            f.add_monomial(&x, Monomial::new(0.1, 0, 2, 1)).unwrap();
            f.add_monomial(&x, Monomial::new(0.1, 4, 0, 0)).unwrap();
            let phi = random_field(lat, seed);
            prop_assert!(f.locality_defect(&x, &phi, seed + 1).unwrap() == 0.0);
            prop_assert!(f.evenness_defect(&phi).unwrap() < 1e-14);
            prop_assert!(f.reflection_defect(&phi).unwrap() < 1e-12);
        }
    }
}
