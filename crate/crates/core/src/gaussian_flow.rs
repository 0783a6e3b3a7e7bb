//! The Gaussian part of the flow, solved exactly with dense matrices.
//!
//! Three lattices appear at step `k`: the fine lattice with spacing `L^{-k}`
//! carrying `φ`, the unit lattice carrying the block spin `Φ_k`, and the
//! spacing-`L` lattice carrying `Φ_{k+1}` before rescaling. Every `Qᵀ` is the
//! plain piecewise-constant extension, so all operators below are symmetric
//! as plain matrices.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::averaging::BlockMap;
use crate::lattice::{laplacian_matrix, Field, TorusLattice};
use crate::linalg::{max_abs, max_abs_diff, quad_form, spd_inverse, spd_logdet, sym_sqrt, symmetrize};
use crate::quadrature;
use crate::{Error, Result};

/// `a_k = a(1 - L^{-2})/(1 - L^{-2k})`, defined for `k ≥ 1`.
pub fn a_k(a: f64, l: usize, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidParameter("a_k is defined for k >= 1".into()));
    }
    let l2 = (l as f64).powi(-2);
    Ok(a * (1.0 - l2) / (1.0 - l2.powi(k as i32)))
}

/// Largest relative gap in `a_{k+1} = a_k a / (a_k + a L^{-2})` for `1 ≤ k < k_max`.
pub fn a_k_recursion_residual(a: f64, l: usize, k_max: u32) -> Result<f64> {
    let l2 = (l as f64).powi(-2);
    let mut worst: f64 = 0.0;
    for k in 1..k_max {
        let ak = a_k(a, l, k)?;
        let next = a_k(a, l, k + 1)?;
        let rec = ak * a / (ak + a * l2);
        worst = worst.max((next - rec).abs() / next.abs());
    }
    Ok(worst)
}

/// `μ̄_k = L^{-2(N-k)} μ̄`.
pub fn mass_at_level(mu_bar: f64, l: usize, n_levels: u32, k: u32) -> f64 {
    mu_bar * (l as f64).powi(-2 * (n_levels as i32 - k as i32))
}

/// Power of `L` by which the quartic coupling grows per step: `4 - d`.
pub fn coupling_growth_exponent(d: usize) -> i32 {
    4 - d as i32
}

/// `λ_k = L^{-(4-d)(N-k)} λ`.
pub fn coupling_at_level(lambda: f64, l: usize, d: usize, n_levels: u32, k: u32) -> f64 {
    lambda * (l as f64).powi(-coupling_growth_exponent(d) * (n_levels as i32 - k as i32))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaussParams {
    pub d: usize,
    pub l: usize,
    /// `log_L` of the number of fine sites per side.
    pub side_exp: u32,
    /// Step index `k ≥ 1`; the fine spacing is `L^{-k}`.
    pub k: u32,
    pub a: f64,
    /// The mass `μ̄_k` already scaled to level `k`.
    pub mu_bar: f64,
}

impl GaussParams {
    pub fn fine_lattice(&self) -> Result<TorusLattice> {
        TorusLattice::new(self.d, self.l, self.side_exp, self.k as i32)
    }
}

/// Operators of one free step.
#[derive(Clone, Debug)]
pub struct FreeFlow {
    pub params: GaussParams,
    pub a_k: f64,
    pub a_next: f64,
    pub fine: TorusLattice,
    pub coarse: TorusLattice,
    pub next: TorusLattice,
    /// `Q_k`: fine to unit lattice.
    pub qk: BlockMap,
    /// `Q`: unit lattice to spacing-`L` lattice.
    pub q: BlockMap,
    /// `Q_{k+1}`: fine to spacing-`L` lattice.
    pub qk1: BlockMap,
    neg_laplacian: DMatrix<f64>,
    green: DMatrix<f64>,
}

impl FreeFlow {
    pub fn new(params: GaussParams) -> Result<Self> {
        if params.a <= 0.0 || !params.a.is_finite() {
            return Err(Error::InvalidParameter(format!("a = {} must be positive", params.a)));
        }
        if params.mu_bar < 0.0 {
            return Err(Error::InvalidParameter(format!("mass {} must be nonnegative", params.mu_bar)));
        }
        if params.side_exp < params.k + 1 {
            return Err(Error::InvalidParameter(format!(
                "need at least k + 1 = {} levels of blocks, have {}",
                params.k + 1,
                params.side_exp
            )));
        }
        let fine = params.fine_lattice()?;
        let qk = BlockMap::new(fine, params.k)?;
        let coarse = qk.coarse;
        let q = BlockMap::new(coarse, 1)?;
        let qk1 = BlockMap::new(fine, params.k + 1)?;
        let next = q.coarse;
        let ak = a_k(params.a, params.l, params.k)?;
        let a_next = a_k(params.a, params.l, params.k + 1)?;
        let neg_laplacian = -laplacian_matrix(&fine);
        let mut op = neg_laplacian.clone();
        for i in 0..fine.n_sites() {
            op[(i, i)] += params.mu_bar;
        }
        op += qk.projection_matrix() * ak;
        let green = spd_inverse(&op, "-Δ + μ̄_k + a_k Q_kᵀQ_k")?;
        Ok(FreeFlow { params, a_k: ak, a_next, fine, coarse, next, qk, q, qk1, neg_laplacian, green })
    }

    pub fn neg_laplacian(&self) -> &DMatrix<f64> {
        &self.neg_laplacian
    }

    /// `-Δ + μ̄_k + a_k Q_kᵀQ_k` on fine fields.
    pub fn operator(&self) -> DMatrix<f64> {
        let mut op = self.neg_laplacian.clone();
        for i in 0..self.fine.n_sites() {
            op[(i, i)] += self.params.mu_bar;
        }
        op + self.qk.projection_matrix() * self.a_k
    }

    /// `G_k`, the inverse of [`Self::operator`].
    pub fn green(&self) -> &DMatrix<f64> {
        &self.green
    }

    fn coefficient_next(&self) -> f64 {
        self.params.a * (self.params.l as f64).powi(-2)
    }

    /// `φ_k(Φ) = a_k G_k Q_kᵀ Φ`.
    pub fn minimizer(&self, big: &Field) -> Result<Field> {
        let ext = self.qk.apply_qt(big)?;
        let v = &self.green * DVector::from_vec(ext.values) * self.a_k;
        Field::new(self.fine, v.as_slice().to_vec())
    }

    /// `S_k(Φ, φ) = (a_k/2)‖Φ - Q_kφ‖² + ½‖∂φ‖² + ½μ̄_k‖φ‖²`.
    pub fn action(&self, big: &Field, phi: &Field) -> Result<f64> {
        let diff = big.axpy(-1.0, &self.qk.apply_q(phi)?)?;
        Ok(0.5 * self.a_k * diff.norm_sq() + self.fine_quadratic(phi))
    }

    /// `½‖∂φ‖² + ½μ̄_k‖φ‖²`.
    fn fine_quadratic(&self, phi: &Field) -> f64 {
        let v = DVector::from_column_slice(&phi.values);
        let w = self.fine.site_weight();
        0.5 * w * (quad_form(&self.neg_laplacian, &v) + self.params.mu_bar * v.norm_squared())
    }

    /// `Δ_k = a_k - a_k² Q_k G_k Q_kᵀ` on the unit lattice.
    pub fn effective_quadratic_form(&self) -> DMatrix<f64> {
        let q = self.qk.q_matrix();
        let qt = self.qk.qt_matrix();
        let n = self.coarse.n_sites();
        let m = DMatrix::identity(n, n) * self.a_k - q * &self.green * qt * (self.a_k * self.a_k);
        symmetrize(&m)
    }

    /// `G⁰_{k+1} = (-Δ + μ̄_k + a_{k+1}L^{-2} Q_{k+1}ᵀQ_{k+1})^{-1}`.
    pub fn green_next(&self) -> Result<DMatrix<f64>> {
        let mut op = self.neg_laplacian.clone();
        for i in 0..self.fine.n_sites() {
            op[(i, i)] += self.params.mu_bar;
        }
        op += self.qk1.projection_matrix() * (self.a_next * (self.params.l as f64).powi(-2));
        spd_inverse(&op, "G⁰_{k+1} operator")
    }

    /// `φ⁰_{k+1}(Φ_{k+1}) = a_{k+1}L^{-2} G⁰_{k+1} Q_{k+1}ᵀ Φ_{k+1}`.
    pub fn minimizer_next(&self, big_next: &Field) -> Result<Field> {
        let ext = self.qk1.apply_qt(big_next)?;
        let c = self.a_next * (self.params.l as f64).powi(-2);
        let v = self.green_next()? * DVector::from_vec(ext.values) * c;
        Field::new(self.fine, v.as_slice().to_vec())
    }

    /// `S⁰_{k+1}(Φ_{k+1}, φ) = (a_{k+1}/2L²)‖Φ_{k+1} - Q_{k+1}φ‖² + ½‖∂φ‖² + ½μ̄_k‖φ‖²`.
    pub fn action_next(&self, big_next: &Field, phi: &Field) -> Result<f64> {
        let diff = big_next.axpy(-1.0, &self.qk1.apply_q(phi)?)?;
        let c = self.a_next * (self.params.l as f64).powi(-2);
        Ok(0.5 * c * diff.norm_sq() + self.fine_quadratic(phi))
    }

    /// Plain matrix `D` with `min_φ S⁰_{k+1}(Φ, φ) = ½ Φᵀ D Φ`.
    pub fn effective_quadratic_form_next(&self) -> Result<DMatrix<f64>> {
        let c = self.a_next * (self.params.l as f64).powi(-2);
        let w = self.next.site_weight();
        let q = self.qk1.q_matrix();
        let qt = self.qk1.qt_matrix();
        let n = self.next.n_sites();
        let m = (DMatrix::identity(n, n) - q * self.green_next()? * qt * c) * (c * w);
        Ok(symmetrize(&m))
    }

    /// `Ψ_k = Q_kφ⁰ - c QᵀQ_{k+1}φ⁰ + c QᵀΦ_{k+1}` with `c = aL^{-2}/(a_k + aL^{-2})`.
    pub fn psi(&self, big_next: &Field, phi0: &Field) -> Result<Field> {
        let c = self.coefficient_next() / (self.a_k + self.coefficient_next());
        let base = self.qk.apply_q(phi0)?;
        let proj = self.q.apply_qt(&self.qk1.apply_q(phi0)?)?;
        let ext = self.q.apply_qt(big_next)?;
        base.axpy(-c, &proj)?.axpy(c, &ext)
    }

    /// `J(Φ_{k+1}, Ψ, φ) = (aL^{-2}/2)‖Φ_{k+1} - QΨ‖² + S_k(Ψ, φ)`.
    pub fn joint_action(&self, big_next: &Field, psi: &Field, phi: &Field) -> Result<f64> {
        let diff = big_next.axpy(-1.0, &self.q.apply_q(psi)?)?;
        Ok(0.5 * self.coefficient_next() * diff.norm_sq() + self.action(psi, phi)?)
    }

    /// The block-spin coupling `aL^{-2}QᵀQ` on the unit lattice.
    fn block_coupling(&self) -> DMatrix<f64> {
        self.q.projection_matrix() * self.coefficient_next()
    }

    /// `C_k = (Δ_k + aL^{-2}QᵀQ)^{-1}`.
    pub fn covariance(&self) -> Result<DMatrix<f64>> {
        spd_inverse(&(self.effective_quadratic_form() + self.block_coupling()), "Δ_k + aL^{-2}QᵀQ")
    }

    /// `C_{k,r} = (Δ_k + aL^{-2}QᵀQ + r)^{-1}`.
    pub fn covariance_r(&self, r: f64) -> Result<DMatrix<f64>> {
        let n = self.coarse.n_sites();
        spd_inverse(
            &(self.effective_quadratic_form() + self.block_coupling() + DMatrix::identity(n, n) * r),
            "Δ_k + aL^{-2}QᵀQ + r",
        )
    }

    /// `A_{k,r} = (a_k + r)^{-1}(I - QᵀQ) + (a_k + aL^{-2} + r)^{-1}QᵀQ`.
    pub fn a_kr(&self, r: f64) -> DMatrix<f64> {
        let n = self.coarse.n_sites();
        let p = self.q.projection_matrix();
        (DMatrix::identity(n, n) - &p) / (self.a_k + r) + p / (self.a_k + self.coefficient_next() + r)
    }

    /// `G_{k,r}` from `-Δ + μ̄_k + a_k Q_kᵀQ_k - a_k² Q_kᵀ A_{k,r} Q_k`.
    pub fn g_kr_from_a(&self, r: f64) -> Result<DMatrix<f64>> {
        let inner = self.qk.qt_matrix() * self.a_kr(r) * self.qk.q_matrix() * (self.a_k * self.a_k);
        spd_inverse(&symmetrize(&(self.operator() - inner)), "G_{k,r} operator")
    }

    /// `G_{k,r}` from the manifestly positive form
    /// `-Δ + μ̄_k + a_k r/(a_k + r) Q_kᵀQ_k + a_k² aL^{-2}/((a_k + r)(a_k + aL^{-2} + r)) Q_{k+1}ᵀQ_{k+1}`.
    pub fn g_kr(&self, r: f64) -> Result<DMatrix<f64>> {
        spd_inverse(&self.g_kr_operator(r), "G_{k,r} operator")
    }

    pub fn g_kr_operator(&self, r: f64) -> DMatrix<f64> {
        let b = self.coefficient_next();
        let c1 = self.a_k * r / (self.a_k + r);
        let c2 = self.a_k * self.a_k * b / ((self.a_k + r) * (self.a_k + b + r));
        let mut op = self.neg_laplacian.clone();
        for i in 0..self.fine.n_sites() {
            op[(i, i)] += self.params.mu_bar;
        }
        op + self.qk.projection_matrix() * c1 + self.qk1.projection_matrix() * c2
    }

    /// `A_{k,r} + a_k² A_{k,r} Q_k G_{k,r} Q_kᵀ A_{k,r}`.
    pub fn resolvent_composite(&self, r: f64) -> Result<DMatrix<f64>> {
        let a = self.a_kr(r);
        let g = self.g_kr(r)?;
        let mid = self.qk.q_matrix() * g * self.qk.qt_matrix();
        Ok(symmetrize(&(&a + &a * mid * &a * (self.a_k * self.a_k))))
    }

    /// `C_k^{1/2}` by eigendecomposition.
    pub fn sqrt_covariance(&self) -> Result<DMatrix<f64>> {
        sym_sqrt(&self.covariance()?, 1e-12)
    }

    /// `C_k^{1/2} = (1/π)∫₀^∞ dr r^{-1/2} C_{k,r}` evaluated with `r = e^{2t}` on
    /// `t ∈ [-t_max, t_max]`; used only as a cross-check.
    pub fn sqrt_covariance_by_integral(&self, t_max: f64, panels: usize) -> Result<DMatrix<f64>> {
        let n = self.coarse.n_sites();
        let rule = quadrature::legendre(8, 0.0, 2.0 * t_max / panels as f64)?;
        let mut acc = DMatrix::zeros(n, n);
        for p in 0..panels {
            let base = -t_max + p as f64 * 2.0 * t_max / panels as f64;
            for &(x, w) in &rule {
                let t = base + x;
                let u = t.exp();
                acc += self.covariance_r(u * u)? * (2.0 * u * w / std::f64::consts::PI);
            }
        }
        Ok(acc)
    }

    /// `log N` for the block-spin kernel `exp(-(aL^{-2}/2)‖Φ_{k+1} - QΦ‖²)`.
    pub fn log_kernel_normalization(&self) -> f64 {
        let precision = self.coefficient_next() * self.next.site_weight();
        0.5 * self.next.n_sites() as f64 * (2.0 * std::f64::consts::PI / precision).ln()
    }

    /// `log Z` gained in one step: `-log N + (|T⁰|/2) log 2π + ½ log det C_k`.
    pub fn log_z_increment(&self) -> Result<f64> {
        let c = self.covariance()?;
        let n0 = self.coarse.n_sites() as f64;
        Ok(-self.log_kernel_normalization()
            + 0.5 * n0 * (2.0 * std::f64::consts::PI).ln()
            + 0.5 * spd_logdet(&c, "C_k")?)
    }

    /// Gap between the Gaussian integral over `Φ_k` of the block-spin kernel
    /// times `exp(-½⟨Φ, Δ_kΦ⟩)` and `Z exp(-min S⁰_{k+1})`, in logs.
    pub fn block_spin_integral_defect(&self, big_next: &Field) -> Result<f64> {
        let b = self.coefficient_next();
        let w1 = self.next.site_weight();
        let a_mat = self.effective_quadratic_form() + self.block_coupling();
        let rhs_vec = DVector::from_vec(self.q.apply_qt(big_next)?.values) * b;
        let c0 = 0.5 * b * w1 * big_next.values.iter().map(|v| v * v).sum::<f64>();
        let inv = spd_inverse(&a_mat, "Δ_k + aL^{-2}QᵀQ")?;
        let n0 = self.coarse.n_sites() as f64;
        let lhs = 0.5 * n0 * (2.0 * std::f64::consts::PI).ln() - 0.5 * spd_logdet(&a_mat, "C_k^{-1}")?
            + 0.5 * quad_form(&inv, &rhs_vec)
            - c0
            - self.log_kernel_normalization();
        let phi0 = self.minimizer_next(big_next)?;
        let rhs = self.log_z_increment()? - self.action_next(big_next, &phi0)?;
        Ok((lhs - rhs).abs())
    }

    /// `log ∫ρ_{k+1} - log ∫ρ_k` for the φ-integrated free densities; zero when
    /// the step preserves normalization. Needs `μ̄_k > 0`.
    pub fn normalization_defect(&self) -> Result<f64> {
        let two_pi = (2.0 * std::f64::consts::PI).ln();
        let before = 0.5 * self.coarse.n_sites() as f64 * two_pi
            - 0.5 * spd_logdet(&self.effective_quadratic_form(), "Δ_k")?;
        let after = self.log_z_increment()? + 0.5 * self.next.n_sites() as f64 * two_pi
            - 0.5 * spd_logdet(&self.effective_quadratic_form_next()?, "next-level form")?;
        Ok((after - before).abs())
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct IdentityReport {
    /// `S_k(Φ, φ_k(Φ)) = ½⟨Φ, Δ_kΦ⟩`.
    pub quadratic_form: f64,
    /// Minimum identity for `Ψ_k`.
    pub minimum_identity: f64,
    /// First variational equation for `Ψ_k`.
    pub psi_variational: f64,
    /// `Φ_{k+1} - QΨ_k = a_k/(a_k + aL^{-2}) (Φ_{k+1} - Q_{k+1}φ⁰)`.
    pub psi_residual_split: f64,
    /// `φ_k(Ψ_k) = φ⁰_{k+1}`.
    pub psi_consistency: f64,
    /// Expansion of the joint action around `(Ψ_k, φ⁰_{k+1})`.
    pub joint_expansion: f64,
    /// Variational equation of the minimizer.
    pub minimizer_equation: f64,
    pub samples: usize,
}

impl IdentityReport {
    pub fn worst(&self) -> f64 {
        [
            self.quadratic_form,
            self.minimum_identity,
            self.psi_variational,
            self.psi_residual_split,
            self.psi_consistency,
            self.joint_expansion,
            self.minimizer_equation,
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

/// Evaluates the single-step identities on `samples` random fields.
pub fn free_step_identity_check(flow: &FreeFlow, samples: usize, seed: u64) -> Result<IdentityReport> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rep = IdentityReport { samples, ..Default::default() };
    let delta = flow.effective_quadratic_form();
    let op = flow.operator();
    let b = flow.coefficient_next();
    for _ in 0..samples {
        let big = Field::from_fn(flow.coarse, |_| rng.random_range(-1.0..1.0));
        let big_next = Field::from_fn(flow.next, |_| rng.random_range(-1.0..1.0));
        let phi = Field::from_fn(flow.fine, |_| rng.random_range(-1.0..1.0));
        let z = Field::from_fn(flow.coarse, |_| rng.random_range(-1.0..1.0));

        let phik = flow.minimizer(&big)?;
        let lhs = flow.action(&big, &phik)?;
        let bv = DVector::from_column_slice(&big.values);
        rep.quadratic_form = rep.quadratic_form.max(rel(lhs, 0.5 * quad_form(&delta, &bv)));

        let ext = DVector::from_vec(flow.qk.apply_qt(&big)?.values) * flow.a_k;
        let res = &op * DVector::from_column_slice(&phik.values) - ext;
        rep.minimizer_equation = rep.minimizer_equation.max(res.amax());

        let psi = flow.psi(&big_next, &phi)?;
        let t1 = big_next.axpy(-1.0, &flow.q.apply_q(&psi)?)?;
        let t2 = psi.axpy(-1.0, &flow.qk.apply_q(&phi)?)?;
        let t3 = big_next.axpy(-1.0, &flow.qk1.apply_q(&phi)?)?;
        let l2 = (flow.params.l as f64).powi(-2);
        let fifty_lhs = 0.5 * b * t1.norm_sq() + 0.5 * flow.a_k * t2.norm_sq();
        let fifty_rhs = 0.5 * flow.a_next * l2 * t3.norm_sq();
        rep.minimum_identity = rep.minimum_identity.max(rel(fifty_lhs, fifty_rhs));
        let var = flow.q.apply_qt(&t1)?.scaled(b).axpy(-flow.a_k, &t2)?;
        rep.psi_variational = rep.psi_variational.max(var.sup_norm());
        let split = t1.axpy(-flow.a_k / (flow.a_k + b), &t3)?;
        rep.psi_residual_split = rep.psi_residual_split.max(split.sup_norm());

        let phi0 = flow.minimizer_next(&big_next)?;
        let psi0 = flow.psi(&big_next, &phi0)?;
        let back = flow.minimizer(&psi0)?.axpy(-1.0, &phi0)?;
        rep.psi_consistency = rep.psi_consistency.max(back.sup_norm());

        let zcal = flow.minimizer(&z)?;
        let j = flow.joint_action(&big_next, &psi0.axpy(1.0, &z)?, &phi0.axpy(1.0, &zcal)?)?;
        let qz = flow.q.apply_q(&z)?;
        let expanded = flow.action_next(&big_next, &phi0)? + 0.5 * b * qz.norm_sq() + flow.action(&z, &zcal)?;
        rep.joint_expansion = rep.joint_expansion.max(rel(j, expanded));
    }
    Ok(rep)
}

/// Largest gap between `φ⁰_{k+1}(Φ_L)` and `[φ_{k+1}(Φ)]_L`, and between
/// `S⁰_{k+1}(Φ_L, φ_L)` and `S_{k+1}(Φ, φ)`, on one random pair.
pub fn scaling_identity_defect(flow: &FreeFlow, seed: u64) -> Result<f64> {
    use crate::lattice::{scale_field, ScaleDirection};
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let p = flow.params;
    if p.side_exp < p.k + 2 {
        return Err(Error::Precondition("scaling check needs side_exp >= k + 2".into()));
    }
    let up = FreeFlow::new(GaussParams { k: p.k + 1, mu_bar: p.mu_bar * (p.l as f64).powi(2), ..p })?;
    let probe = flow;
    let big = Field::from_fn(up.coarse, |_| rng.random_range(-1.0..1.0));
    let phi = Field::from_fn(up.fine, |_| rng.random_range(-1.0..1.0));
    let big_l = scale_field(&big, ScaleDirection::Up);
    let phi_l = scale_field(&phi, ScaleDirection::Up);
    let direct = scale_field(&up.minimizer(&big)?, ScaleDirection::Up);
    let via_next = probe.minimizer_next(&big_l)?;
    let d1 = direct.axpy(-1.0, &via_next)?.sup_norm();
    let d2 = rel(probe.action_next(&big_l, &phi_l)?, up.action(&big, &phi)?);
    Ok(d1.max(d2))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResolventRow {
    pub r: f64,
    pub relative_error: f64,
    pub g_forms_gap: f64,
}

/// Compares `(Δ_k + aL^{-2}QᵀQ + r)^{-1}` with the composite formula at each `r`.
pub fn resolvent_identity_check(flow: &FreeFlow, rs: &[f64]) -> Result<Vec<ResolventRow>> {
    rs.iter()
        .map(|&r| {
            if r < 0.0 {
                return Err(Error::InvalidParameter(format!("r = {r} must be nonnegative")));
            }
            let direct = flow.covariance_r(r)?;
            let composite = flow.resolvent_composite(r)?;
            let g1 = flow.g_kr(r)?;
            let g2 = flow.g_kr_from_a(r)?;
            Ok(ResolventRow {
                r,
                relative_error: max_abs_diff(&direct, &composite) / max_abs(&direct),
                g_forms_gap: max_abs_diff(&g1, &g2) / max_abs(&g1),
            })
        })
        .collect()
}

/// `n` log-spaced values from `lo` to `hi`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flow(d: usize, side_exp: u32, k: u32, mu: f64) -> FreeFlow {
        FreeFlow::new(GaussParams { d, l: 3, side_exp, k, a: 1.0, mu_bar: mu }).unwrap()
    }

    #[test]
    fn a_k_values() {
        assert!((a_k(2.0, 3, 1).unwrap() - 2.0).abs() < 1e-15);
        assert!(a_k(1.0, 3, 0).is_err());
        assert!(a_k_recursion_residual(1.0, 3, 64).unwrap() < 1e-13);
        let mut prev = f64::INFINITY;
        for k in 1..40 {
            let v = a_k(1.0, 5, k).unwrap();
            assert!(v < prev || (k > 8 && v <= prev));
            prev = v;
        }
        assert!((a_k(1.0, 3, 60).unwrap() - (1.0 - 1.0 / 9.0)).abs() < 1e-14);
    }

    #[test]
    fn level_scalings() {
        assert!((mass_at_level(2.0, 3, 4, 4) - 2.0).abs() < 1e-15);
        assert!((mass_at_level(2.0, 3, 4, 3) - 2.0 / 9.0).abs() < 1e-15);
        assert!((coupling_at_level(1.0, 3, 3, 5, 4) - 1.0 / 3.0).abs() < 1e-15);
        assert!((coupling_at_level(1.0, 3, 1, 5, 4) - 1.0 / 27.0).abs() < 1e-15);
    }

    #[test]
    fn single_block_green_and_delta_are_scalar() {
        // With side_exp = k + 1 the unit lattice has 3^d sites; take d = 1, k = 1
        // and compare Δ_k on constants with its scalar value.
        let f = flow(1, 2, 1, 0.3);
        let one = DVector::from_element(f.coarse.n_sites(), 1.0);
        let dv = f.effective_quadratic_form() * &one;
        let want = f.a_k * 0.3 / (0.3 + f.a_k);
        for v in dv.iter() {
            assert!((v - want).abs() < 1e-12);
        }
        let g_one = f.green() * DVector::from_element(f.fine.n_sites(), 1.0);
        for v in g_one.iter() {
            assert!((v - 1.0 / (0.3 + f.a_k)).abs() < 1e-12);
        }
    }

    #[test]
    fn green_residual_and_spd() {
        let f = flow(2, 2, 1, 0.0);
        let id = DMatrix::identity(f.fine.n_sites(), f.fine.n_sites());
        assert!(max_abs_diff(&(f.operator() * f.green()), &id) < 1e-10);
        assert!(f.green().clone().cholesky().is_some());
        assert!(crate::linalg::min_eigenvalue(&f.effective_quadratic_form()) > -1e-12);
    }

    #[test]
    fn identities_hold_on_random_fields() {
        for d in 1..=2 {
            let f = flow(d, 2, 1, 0.1);
            let rep = free_step_identity_check(&f, 20, 7).unwrap();
            assert!(rep.worst() < 1e-9, "{rep:?}");
        }
        let f = flow(1, 3, 2, 0.0);
        let rep = free_step_identity_check(&f, 20, 8).unwrap();
        assert!(rep.worst() < 1e-9, "{rep:?}");
    }

    #[test]
    fn minimizer_is_a_minimum_and_shrinks_with_mass() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let f = flow(1, 2, 1, 0.1);
        let big = Field::from_fn(f.coarse, |_| rng.random_range(-1.0..1.0));
        let phi = f.minimizer(&big).unwrap();
        let s0 = f.action(&big, &phi).unwrap();
        for _ in 0..10 {
            let zeta = Field::from_fn(f.fine, |_| rng.random_range(-1.0..1.0));
            for t in [1e-3, -1e-3] {
                assert!(f.action(&big, &phi.axpy(t, &zeta).unwrap()).unwrap() >= s0);
            }
        }
        let heavy = flow(1, 2, 1, 10.0);
        assert!(heavy.minimizer(&big).unwrap().norm_sq() < phi.norm_sq());
        assert!(f.minimizer(&Field::zeros(f.coarse)).unwrap().sup_norm() == 0.0);
    }

    #[test]
    fn covariance_and_sqrt() {
        let f = flow(1, 2, 1, 0.0);
        let c = f.covariance().unwrap();
        let inv = f.effective_quadratic_form() + f.block_coupling();
        let n = f.coarse.n_sites();
        assert!(max_abs_diff(&(&c * &inv), &DMatrix::identity(n, n)) < 1e-10);
        let logdet = spd_logdet(&c, "c").unwrap();
        let by_eig: f64 = c.clone().symmetric_eigen().eigenvalues.iter().map(|v| v.ln()).sum();
        assert!((logdet - by_eig).abs() < 1e-9);
        let s = f.sqrt_covariance().unwrap();
        assert!(max_abs_diff(&(&s * &s), &c) < 1e-8);
        let by_int = f.sqrt_covariance_by_integral(25.0, 100).unwrap();
        assert!(max_abs_diff(&by_int, &s) < 1e-4);
    }

    #[test]
    fn resolvent_identity_and_limits() {
        let f = flow(1, 2, 1, 0.0);
        for row in resolvent_identity_check(&f, &log_spaced(1e-4, 1e6, 20)).unwrap() {
            assert!(row.relative_error < 1e-8, "{row:?}");
            assert!(row.g_forms_gap < 1e-8, "{row:?}");
        }
        let rows = resolvent_identity_check(&f, &[0.0]).unwrap();
        assert!(rows[0].relative_error < 1e-9);
        assert!(max_abs_diff(&f.g_kr(0.0).unwrap(), &f.green_next().unwrap()) < 1e-10);
        assert!(max_abs_diff(&f.g_kr(1e8).unwrap(), f.green()) < 1e-6);
        assert!(resolvent_identity_check(&f, &[-1.0]).is_err());
    }

    #[test]
    fn block_spin_integral_and_normalization() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let f = flow(1, 2, 1, 0.2);
        for _ in 0..5 {
            let big = Field::from_fn(f.next, |_| rng.random_range(-1.0..1.0));
            assert!(f.block_spin_integral_defect(&big).unwrap() < 1e-9);
        }
        assert!(f.normalization_defect().unwrap() < 1e-8);
    }

    #[test]
    fn scaling_identity() {
        let f = flow(1, 3, 1, 0.1);
        assert!(scaling_identity_defect(&f, 5).unwrap() < 1e-10);
        let f2 = flow(2, 3, 1, 0.1);
        assert!(scaling_identity_defect(&f2, 6).unwrap() < 1e-10);
        assert!(scaling_identity_defect(&flow(1, 2, 1, 0.1), 5).is_err());
    }

    #[test]
    fn rejects_bad_params() {
        assert!(FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 1, k: 1, a: 1.0, mu_bar: 0.0 }).is_err());
        assert!(FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 2, k: 1, a: -1.0, mu_bar: 0.0 }).is_err());
    }
}
