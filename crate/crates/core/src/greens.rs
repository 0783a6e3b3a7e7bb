//! Localized Green's functions and their random-walk expansions.
//!
//! The torus is tiled by `M`-cubes, `M = L^m`, centred on the sites of the
//! `m`-fold coarsened unit lattice. A smooth partition of unity `Σ_z h_z² = 1`
//! glues Neumann inverses on enlarged cubes into a parametrix `G*`, and the
//! defect `K` of the parametrix generates the walk `G = G* Σ_n Kⁿ`.

use std::collections::{BTreeMap, HashMap};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::averaging::BlockMap;
use crate::gaussian_flow::FreeFlow;
use crate::lattice::{neumann_laplacian, Field, Region, TorusLattice};
use crate::linalg::{max_abs, max_abs_diff, operator_norm, spd_inverse};
use crate::{Error, Result};

/// Quintic ramp `t³(10 - 15t + 6t²)`, twice continuously differentiable.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

/// One-dimensional bump in units of `M`: 1 on `|u| ≤ 1/3`, 0 on `|u| ≥ 2/3`,
/// with `h(u)² + h(1 - u)² = 1` on the overlap.
pub fn bump_profile(u: f64) -> f64 {
    let a = u.abs();
    if a <= 1.0 / 3.0 {
        1.0
    } else if a >= 2.0 / 3.0 {
        0.0
    } else {
        (0.5 * std::f64::consts::PI * smoothstep(3.0 * a - 1.0)).cos()
    }
}

/// The `M`-cube tiling of a fine lattice with nonnegative spacing exponent.
pub fn cube_map(fine: TorusLattice, m: u32) -> Result<BlockMap> {
    if fine.spacing_exp < 0 {
        return Err(Error::InvalidParameter("cube tiling needs spacing <= 1".into()));
    }
    BlockMap::new(fine, m + fine.spacing_exp as u32)
}

/// Cube indices `w` with `|w - z| ≤ 1` in the cube lattice (including `z`).
pub fn cube_neighbors(cubes: &TorusLattice, z: usize) -> Vec<usize> {
    let mut out = vec![z];
    for mu in 0..cubes.d {
        let mut grown = Vec::with_capacity(out.len() * 3);
        for &w in &out {
            grown.push(w);
            grown.push(cubes.shift(w, mu, 1));
            grown.push(cubes.shift(w, mu, -1));
        }
        out = grown;
    }
    out.sort_unstable();
    out.dedup();
    out
}

#[derive(Clone, Debug)]
pub struct PartitionOfUnity {
    pub cubes: BlockMap,
    pub bumps: Vec<Field>,
    /// Cube side in fine sites.
    pub side_sites: usize,
}

impl PartitionOfUnity {
    pub fn new(fine: TorusLattice, m: u32) -> Result<Self> {
        let cubes = cube_map(fine, m)?;
        let side_sites = fine.l.pow(cubes.j);
        let n_cubes = cubes.coarse.n_sites();
        let bumps = (0..n_cubes)
            .map(|z| {
                if n_cubes == 1 {
                    return Field::constant(fine, 1.0);
                }
                let center = cube_center(&cubes, z);
                Field::from_fn(fine, |x| {
                    (0..fine.d)
                        .map(|mu| {
                            if cubes.coarse.sites_per_side() == 1 {
                                1.0
                            } else {
                                bump_profile(fine.displacement(x, center, mu) as f64 / side_sites as f64)
                            }
                        })
                        .product()
                })
            })
            .collect();
        Ok(PartitionOfUnity { cubes, bumps, side_sites })
    }

    pub fn n_cubes(&self) -> usize {
        self.bumps.len()
    }

    pub fn fine(&self) -> TorusLattice {
        self.cubes.fine
    }

    /// `max_x |Σ_z h_z(x)² - 1|`.
    pub fn partition_defect(&self) -> f64 {
        (0..self.fine().n_sites())
            .map(|x| (self.bumps.iter().map(|h| h.values[x].powi(2)).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Measured `(max |∂h|·M, max |∂∂h|·M²)` with `M` in continuum units.
    pub fn derivative_constants(&self) -> (f64, f64) {
        let fine = self.fine();
        let a = fine.spacing();
        let m_len = self.side_sites as f64 * a;
        let (mut c1, mut c2): (f64, f64) = (0.0, 0.0);
        for h in &self.bumps {
            for x in 0..fine.n_sites() {
                for mu in 0..fine.d {
                    let xp = fine.shift(x, mu, 1);
                    c1 = c1.max((h.values[xp] - h.values[x]).abs() / a * m_len);
                    for nu in 0..fine.d {
                        let xn = fine.shift(x, nu, 1);
                        let xpn = fine.shift(xp, nu, 1);
                        let dd = (h.values[xpn] - h.values[xp] - h.values[xn] + h.values[x]) / (a * a);
                        c2 = c2.max(dd.abs() * m_len * m_len);
                    }
                }
            }
        }
        (c1, c2)
    }

    /// `□̃_z`: the cube `z` and its neighbours.
    pub fn enlarged_cube(&self, z: usize) -> Region {
        let sites = cube_neighbors(&self.cubes.coarse, z)
            .into_iter()
            .flat_map(|w| self.cubes.members(w).iter().copied())
            .collect();
        Region::new(self.fine(), sites).expect("cubes are nonempty")
    }

    pub fn neighbors(&self, z: usize) -> Vec<usize> {
        cube_neighbors(&self.cubes.coarse, z)
    }
}

fn cube_center(cubes: &BlockMap, z: usize) -> usize {
    let side = cubes.fine.l.pow(cubes.j);
    let c = cubes.coarse.coords(z);
    cubes.fine.index(&[c[0] * side, c[1] * side, c[2] * side])
}

/// An operator `-Δ + V` where `V` is local on unit cubes; `V` is kept apart so
/// it can be restricted to a region alongside a Neumann Laplacian.
#[derive(Clone, Debug)]
pub struct LocalOperator {
    pub lattice: TorusLattice,
    pub full: DMatrix<f64>,
    pub local_part: DMatrix<f64>,
}

impl LocalOperator {
    pub fn new(lattice: TorusLattice, neg_laplacian: &DMatrix<f64>, local_part: DMatrix<f64>) -> Self {
        LocalOperator { lattice, full: neg_laplacian + &local_part, local_part }
    }

    /// `-Δ + μ̄_k + a_k Q_kᵀQ_k`.
    pub fn free(flow: &FreeFlow) -> Self {
        let full = flow.operator();
        let local_part = &full - flow.neg_laplacian();
        LocalOperator { lattice: flow.fine, full, local_part }
    }

    /// The operator whose inverse is `G_{k,r}`.
    pub fn free_r(flow: &FreeFlow, r: f64) -> Self {
        let full = flow.g_kr_operator(r);
        let local_part = &full - flow.neg_laplacian();
        LocalOperator { lattice: flow.fine, full, local_part }
    }

    /// Neumann restriction to `region`, in the region's local indexing.
    pub fn restricted(&self, region: &Region) -> Result<DMatrix<f64>> {
        self.lattice.check_same(&region.lattice)?;
        let mut m = -neumann_laplacian(region)?;
        for (i, &x) in region.sites.iter().enumerate() {
            for (j, &y) in region.sites.iter().enumerate() {
                m[(i, j)] += self.local_part[(x, y)];
            }
        }
        Ok(m)
    }
}

/// `G(Ω)`: inverse of the Neumann-restricted operator, local indexing.
pub fn neumann_green(op: &LocalOperator, region: &Region) -> Result<DMatrix<f64>> {
    spd_inverse(&op.restricted(region)?, "Neumann-restricted operator")
}

/// Largest `c₀` with `⟨f, A_Ω f⟩ ≥ c₀ ⟨f, (-Δ_N + 1) f⟩` on the region.
pub fn effective_mass_constant(op: &LocalOperator, region: &Region) -> Result<f64> {
    let a = op.restricted(region)?;
    let mut b = -neumann_laplacian(region)?;
    for i in 0..b.nrows() {
        b[(i, i)] += 1.0;
    }
    let chol = b.cholesky().ok_or_else(|| Error::Singular("-Δ_N + 1".into()))?;
    let linv = chol.l().try_inverse().ok_or_else(|| Error::Singular("Cholesky factor".into()))?;
    let sym = &linv * a * linv.transpose();
    Ok(crate::linalg::min_eigenvalue(&crate::linalg::symmetrize(&sym)))
}

fn embed(local: &DMatrix<f64>, rows: &[usize], cols: &[usize], n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    for (i, &x) in rows.iter().enumerate() {
        for (j, &y) in cols.iter().enumerate() {
            m[(x, y)] = local[(i, j)];
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct Parametrix {
    pub pou: PartitionOfUnity,
    pub operator: LocalOperator,
    /// `G* = Σ_z h_z G(□̃_z) h_z`.
    pub g_star: DMatrix<f64>,
    /// `K = Σ_z K_z G(□̃_z) h_z` with `K_z = -[A, h_z]`.
    pub defect: DMatrix<f64>,
    /// `h_z G(□̃_z) h_z` per cube.
    pub heads: Vec<DMatrix<f64>>,
    /// `K_z G(□̃_z) h_z` per cube.
    pub links: Vec<DMatrix<f64>>,
}

pub fn parametrix(op: &LocalOperator, pou: &PartitionOfUnity) -> Result<Parametrix> {
    op.lattice.check_same(&pou.fine())?;
    let n = op.lattice.n_sites();
    let mut g_star = DMatrix::zeros(n, n);
    let mut defect = DMatrix::zeros(n, n);
    let mut heads = Vec::with_capacity(pou.n_cubes());
    let mut links = Vec::with_capacity(pou.n_cubes());
    let mut memo: HashMap<Vec<usize>, DMatrix<f64>> = HashMap::new();
    for z in 0..pou.n_cubes() {
        let region = pou.enlarged_cube(z);
        let local = match memo.get(&region.sites) {
            Some(g) => g.clone(),
            None => {
                let g = neumann_green(op, &region)?;
                memo.insert(region.sites.clone(), g.clone());
                g
            }
        };
        let gz = embed(&local, &region.sites, &region.sites, n);
        let h = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&pou.bumps[z].values));
        let g_h = &gz * &h;
        let head = &h * &g_h;
        let commutator = -(&op.full * &h - &h * &op.full);
        let link = commutator * &g_h;
        g_star += &head;
        defect += &link;
        heads.push(head);
        links.push(link);
    }
    Ok(Parametrix { pou: pou.clone(), operator: op.clone(), g_star, defect, heads, links })
}

impl Parametrix {
    /// `max |A G* - (I - K)|`.
    pub fn identity_residual(&self) -> f64 {
        let n = self.g_star.nrows();
        max_abs_diff(&(&self.operator.full * &self.g_star), &(DMatrix::identity(n, n) - &self.defect))
    }

    pub fn defect_norm(&self) -> f64 {
        operator_norm(&self.defect)
    }

    pub fn defect_spectral_radius(&self) -> f64 {
        crate::linalg::spectral_radius(&self.defect)
    }
}

/// Bitmask of cubes covered by a path; at most 64 cubes.
pub type CubeMask = u64;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WalkDiagnostics {
    /// `max |Σ_{|ω|=n} s_ω G_ω|` per order `n`.
    pub order_norms: Vec<f64>,
    /// Successive ratios of `order_norms`.
    pub ratios: Vec<f64>,
    /// Largest ratio over orders `≥ 1`.
    pub max_ratio: f64,
    /// Per-order norms decreased at every order.
    pub converging: bool,
}

#[derive(Clone, Debug)]
pub struct WalkExpansion {
    pub total: DMatrix<f64>,
    /// Unweighted partial sums split by the covered-cube mask `X_ω`.
    pub by_mask: BTreeMap<CubeMask, DMatrix<f64>>,
    pub diagnostics: WalkDiagnostics,
}

impl WalkExpansion {
    /// `Σ_mask Π_{□∈mask} s_□ G_mask`.
    pub fn weighted(&self, s: &[f64]) -> DMatrix<f64> {
        let n = self.total.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (&mask, g) in &self.by_mask {
            let w = mask_weight(mask, s);
            if w != 0.0 {
                out += g * w;
            }
        }
        out
    }

    /// `Σ_{mask ⊆ allowed} G_mask`, the expansion at `s = 1_allowed`.
    pub fn restricted(&self, allowed: CubeMask) -> DMatrix<f64> {
        let n = self.total.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (&mask, g) in &self.by_mask {
            if mask & !allowed == 0 {
                out += g;
            }
        }
        out
    }
}

pub fn mask_weight(mask: CubeMask, s: &[f64]) -> f64 {
    let mut w = 1.0;
    let mut m = mask;
    while m != 0 {
        let i = m.trailing_zeros() as usize;
        w *= s[i];
        m &= m - 1;
    }
    w
}

/// Partial sums `Σ_{|ω| ≤ n_max} s_ω G_ω` of the walk expansion, computed by
/// dynamic programming over `(last cube, covered mask)`.
pub fn random_walk_expansion(par: &Parametrix, n_max: usize, s: Option<&[f64]>) -> Result<WalkExpansion> {
    let n_cubes = par.pou.n_cubes();
    if n_cubes > 64 {
        return Err(Error::CapExceeded(format!("{n_cubes} cubes exceed the 64-cube mask")));
    }
    if let Some(s) = s {
        if s.len() != n_cubes {
            return Err(Error::InvalidParameter(format!("{} cube weights for {n_cubes} cubes", s.len())));
        }
    }
    let ones = vec![1.0; n_cubes];
    let weights = s.unwrap_or(&ones);
    let n = par.g_star.nrows();
    let cubes = &par.pou.cubes.coarse;
    let neighborhood: Vec<CubeMask> = (0..n_cubes)
        .map(|z| cube_neighbors(cubes, z).iter().fold(0, |m, &w| m | (1 << w)))
        .collect();

    let mut by_mask: BTreeMap<CubeMask, DMatrix<f64>> = BTreeMap::new();
    let mut total = DMatrix::zeros(n, n);
    let mut order_norms = Vec::with_capacity(n_max + 1);

    let mut states: BTreeMap<(usize, CubeMask), DMatrix<f64>> = BTreeMap::new();
    for z in 0..n_cubes {
        states.insert((z, 0), par.heads[z].clone());
    }
    for order in 0..=n_max {
        let mut order_sum = DMatrix::zeros(n, n);
        for (&(_, mask), m) in &states {
            *by_mask.entry(mask).or_insert_with(|| DMatrix::zeros(n, n)) += m;
            order_sum += m * mask_weight(mask, weights);
        }
        order_norms.push(max_abs(&order_sum));
        total += &order_sum;
        if order == n_max {
            break;
        }
        let mut next: BTreeMap<(usize, CubeMask), DMatrix<f64>> = BTreeMap::new();
        for (&(last, mask), m) in &states {
            for w in cube_neighbors(cubes, last) {
                let new_mask = mask | neighborhood[w];
                if mask_weight(new_mask, weights) == 0.0 {
                    continue;
                }
                let prod = m * &par.links[w];
                match next.get_mut(&(w, new_mask)) {
                    Some(acc) => *acc += prod,
                    None => {
                        next.insert((w, new_mask), prod);
                    }
                }
            }
        }
        states = next;
    }
    let ratios: Vec<f64> = order_norms.windows(2).map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 }).collect();
    let max_ratio = ratios.iter().copied().fold(0.0, f64::max);
    let converging = ratios.iter().all(|&r| r < 1.0);
    Ok(WalkExpansion { total, by_mask, diagnostics: WalkDiagnostics { order_norms, ratios, max_ratio, converging } })
}

/// Walk expansion of `G_{k,r}`.
pub fn gkr_random_walk(flow: &FreeFlow, pou: &PartitionOfUnity, r: f64, n_max: usize) -> Result<WalkExpansion> {
    if r < 0.0 {
        return Err(Error::InvalidParameter(format!("r = {r} must be nonnegative")));
    }
    let par = parametrix(&LocalOperator::free_r(flow, r), pou)?;
    random_walk_expansion(&par, n_max, None)
}

/// Largest entry coupling sites in different components of the cubes with
/// `s ≠ 0`, skipping sites inside the bump support of any zero-weight cube.
pub fn off_block_max(mat: &DMatrix<f64>, pou: &PartitionOfUnity, s: &[f64]) -> f64 {
    let cubes = &pou.cubes.coarse;
    let n_cubes = pou.n_cubes();
    let mut comp = vec![usize::MAX; n_cubes];
    let mut next_id = 0;
    for start in 0..n_cubes {
        if s[start] == 0.0 || comp[start] != usize::MAX {
            continue;
        }
        let mut stack = vec![start];
        comp[start] = next_id;
        while let Some(c) = stack.pop() {
            for mu in 0..cubes.d {
                for step in [-1isize, 1] {
                    let w = cubes.shift(c, mu, step);
                    if s[w] != 0.0 && comp[w] == usize::MAX {
                        comp[w] = next_id;
                        stack.push(w);
                    }
                }
            }
        }
        next_id += 1;
    }
    let fine = pou.fine();
    let site_comp: Vec<Option<usize>> = (0..fine.n_sites())
        .map(|x| {
            let halo = (0..n_cubes).any(|z| s[z] == 0.0 && pou.bumps[z].values[x] != 0.0);
            let c = comp[pou.cubes.block_of(x)];
            (!halo && c != usize::MAX).then_some(c)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for x in 0..fine.n_sites() {
        for y in 0..fine.n_sites() {
            if let (Some(a), Some(b)) = (site_comp[x], site_comp[y]) {
                if a != b {
                    worst = worst.max(mat[(x, y)].abs());
                }
            }
        }
    }
    worst
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma: f64,
    pub prefactor: f64,
    /// `(separation, block norm)` pairs used in the fit.
    pub samples: Vec<(f64, f64)>,
}

/// Least-squares fit of `log v = log C - γ d`.
pub fn fit_exponential(samples: &[(f64, f64)]) -> Result<DecayFit> {
    let pts: Vec<(f64, f64)> = samples.iter().filter(|(_, v)| *v > 0.0).map(|&(d, v)| (d, v.ln())).collect();
    if pts.len() < 2 {
        return Err(Error::Precondition("need two positive samples to fit a decay".into()));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("all samples at one separation".into()));
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    Ok(DecayFit { gamma: -slope, prefactor: (my - slope * mx).exp(), samples: samples.to_vec() })
}

/// `‖1_{Δ_y} G 1_{Δ_{y₀}}‖₂` against `|y - y₀|` over unit cubes `Δ_y`, for an
/// operator given on `sites` (local indexing) of `units.fine`.
pub fn block_norm_profile(mat: &DMatrix<f64>, sites: &[usize], units: &BlockMap, y0: usize) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &x) in sites.iter().enumerate() {
        groups.entry(units.block_of(x)).or_default().push(i);
    }
    let Some(src) = groups.get(&y0).cloned() else {
        return Vec::new();
    };
    let mut by_dist: BTreeMap<usize, f64> = BTreeMap::new();
    for (&y, rows) in &groups {
        let sub = DMatrix::from_fn(rows.len(), src.len(), |i, j| mat[(rows[i], src[j])]);
        let d = units.coarse.sup_dist_sites(y, y0);
        let e = by_dist.entry(d).or_insert(0.0);
        *e = e.max(operator_norm(&sub));
    }
    by_dist.into_iter().map(|(d, v)| (d as f64, v)).collect()
}

/// Max over pairs `0 < d(x, x') ≤ 1` of `|∂_μ u(x) - ∂_μ u(x')| / d(x, x')^α`.
pub fn holder_seminorm(u: &Field, alpha: f64) -> Result<f64> {
    holder_local(u, alpha, None)
}

fn holder_local(u: &Field, alpha: f64, only: Option<&dyn Fn(usize) -> bool>) -> Result<f64> {
    if !(alpha > 0.5 && alpha < 1.0) {
        return Err(Error::InvalidParameter(format!("Hölder exponent {alpha} not in (1/2, 1)")));
    }
    let lat = u.lattice;
    let reach = (1.0 / lat.spacing()).floor() as isize;
    let mut worst: f64 = 0.0;
    let grads: Vec<Field> = (0..lat.d).map(|mu| crate::lattice::forward_derivative(u, mu)).collect();
    let n_side = lat.sites_per_side() as isize;
    let reach = reach.min((n_side - 1) / 2);
    for x in 0..lat.n_sites() {
        if let Some(f) = only {
            if !f(x) {
                continue;
            }
        }
        let mut offsets = vec![x];
        for mu in 0..lat.d {
            let mut grown = Vec::new();
            for &y in &offsets {
                for s in -reach..=reach {
                    grown.push(lat.shift(y, mu, s));
                }
            }
            offsets = grown;
        }
        for &y in &offsets {
            if y == x {
                continue;
            }
            let dist = lat.distance(x, y);
            if dist == 0.0 || dist > 1.0 + 1e-12 {
                continue;
            }
            for g in &grads {
                worst = worst.max((g.values[x] - g.values[y]).abs() / dist.powf(alpha));
            }
        }
    }
    Ok(worst)
}

/// Hölder seminorm of `∂ G 1_{Δ_{y₀}}` on each unit cube, against distance.
pub fn holder_decay_profile(green: &DMatrix<f64>, units: &BlockMap, y0: usize, alpha: f64) -> Result<Vec<(f64, f64)>> {
    let fine = units.fine;
    let src = Field::from_fn(fine, |x| if units.block_of(x) == y0 { 1.0 } else { 0.0 });
    let v = green * nalgebra::DVector::from_column_slice(&src.values);
    let u = Field::new(fine, v.as_slice().to_vec())?;
    let mut by_dist: BTreeMap<usize, f64> = BTreeMap::new();
    for y in 0..units.coarse.n_sites() {
        let inside = |x: usize| units.block_of(x) == y;
        let val = holder_local(&u, alpha, Some(&inside))?;
        let d = units.coarse.sup_dist_sites(y, y0);
        let e = by_dist.entry(d).or_insert(0.0);
        *e = e.max(val);
    }
    Ok(by_dist.into_iter().map(|(d, v)| (d as f64, v)).collect())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayProbe {
    pub label: String,
    pub fit: DecayFit,
}

/// Block-norm decay of `G_k(□̃)`, `G_k`, and `G_{k,r}` on a one-dimensional
/// probe lattice with `L^side_exp` fine sites.
pub fn decay_probes(flow: &FreeFlow, r_values: &[f64], region_units: usize) -> Result<Vec<DecayProbe>> {
    let units = flow.qk.clone();
    let n_units = units.coarse.n_sites();
    let mut out = Vec::new();
    let all: Vec<usize> = (0..flow.fine.n_sites()).collect();
    let y0 = 0;
    out.push(DecayProbe {
        label: "G_k".into(),
        fit: fit_exponential(&block_norm_profile(flow.green(), &all, &units, y0))?,
    });
    let take = region_units.min(n_units);
    let region_cubes: Vec<usize> = if units.coarse.d == 1 {
        (0..take).collect()
    } else {
        let per_side = units.coarse.sites_per_side();
        let w = (take as f64).powf(1.0 / units.coarse.d as f64).floor().max(1.0) as usize;
        (0..n_units)
            .filter(|&y| units.coarse.coords(y).iter().take(units.coarse.d).all(|&c| c < w.min(per_side)))
            .collect()
    };
    let sites: Vec<usize> = region_cubes.iter().flat_map(|&y| units.members(y).iter().copied()).collect();
    let region = Region::new(flow.fine, sites)?;
    let g_region = neumann_green(&LocalOperator::free(flow), &region)?;
    out.push(DecayProbe {
        label: "G_k(region)".into(),
        fit: fit_exponential(&block_norm_profile(&g_region, &region.sites, &units, region_cubes[0]))?,
    });
    for &r in r_values {
        let g = flow.g_kr(r)?;
        out.push(DecayProbe {
            label: format!("G_k,r(r={r})"),
            fit: fit_exponential(&block_norm_profile(&g, &all, &units, y0))?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian_flow::GaussParams;

    fn flow(side_exp: u32, k: u32, a: f64) -> FreeFlow {
        FreeFlow::new(GaussParams { d: 1, l: 3, side_exp, k, a, mu_bar: 0.0 }).unwrap()
    }

    #[test]
    fn bump_pairs_square_to_one() {
        for i in 0..=100 {
            let u = i as f64 / 100.0;
            assert!((bump_profile(u).powi(2) + bump_profile(1.0 - u).powi(2) - 1.0).abs() < 1e-14);
        }
        assert_eq!(bump_profile(0.3), 1.0);
        assert_eq!(bump_profile(0.7), 0.0);
    }

    #[test]
    fn partition_of_unity_in_every_dimension() {
        for d in 1..=3 {
            let fine = TorusLattice::new(d, 3, 2, 0).unwrap();
            let pou = PartitionOfUnity::new(fine, 1).unwrap();
            assert!(pou.partition_defect() < 1e-12);
            let (c1, c2) = pou.derivative_constants();
            assert!(c1.is_finite() && c2.is_finite() && c1 > 0.0);
        }
        let fine = TorusLattice::new(1, 3, 3, 1).unwrap();
        let pou = PartitionOfUnity::new(fine, 1).unwrap();
        for (z, h) in pou.bumps.iter().enumerate() {
            let c = cube_center(&pou.cubes, z);
            for x in 0..fine.n_sites() {
                let u = fine.displacement(x, c, 0).abs() as f64 / 9.0;
                if u <= 1.0 / 3.0 {
                    assert_eq!(h.values[x], 1.0);
                }
                if u >= 2.0 / 3.0 {
                    assert_eq!(h.values[x], 0.0);
                }
            }
        }
    }

    #[test]
    fn neumann_green_on_whole_torus_is_green() {
        let f = flow(2, 1, 1.0);
        let op = LocalOperator::free(&f);
        let g = neumann_green(&op, &Region::whole(f.fine)).unwrap();
        assert!(max_abs_diff(&g, f.green()) < 1e-10);
        let region = Region::new(f.fine, (0..4).collect()).unwrap();
        assert!(effective_mass_constant(&op, &region).unwrap() > 0.0);
    }

    #[test]
    fn single_cube_parametrix_is_exact() {
        let f = flow(2, 1, 1.0);
        let pou = PartitionOfUnity::new(f.fine, 1).unwrap();
        assert_eq!(pou.n_cubes(), 1);
        let par = parametrix(&LocalOperator::free(&f), &pou).unwrap();
        assert!(max_abs(&par.defect) < 1e-14);
        assert!(max_abs_diff(&par.g_star, f.green()) < 1e-10);
    }

    #[test]
    fn parametrix_identity_and_walk_convergence() {
        let f = flow(3, 1, 20.0);
        let pou = PartitionOfUnity::new(f.fine, 1).unwrap();
        let par = parametrix(&LocalOperator::free(&f), &pou).unwrap();
        assert!(par.identity_residual() < 1e-10);
        let walk0 = random_walk_expansion(&par, 0, None).unwrap();
        assert!(max_abs_diff(&walk0.total, &par.g_star) < 1e-14);
        let walk = random_walk_expansion(&par, 12, None).unwrap();
        assert!(walk.diagnostics.converging, "{:?}", walk.diagnostics);
        let err = max_abs_diff(&walk.total, f.green());
        assert!(err < 1e-3 * max_abs(f.green()), "{err}");
        let all_on: CubeMask = (1 << pou.n_cubes()) - 1;
        assert!(max_abs_diff(&walk.restricted(all_on), &walk.total) < 1e-12);
        assert!(max_abs_diff(&walk.weighted(&[1.0, 1.0, 1.0]), &walk.total) < 1e-12);
    }

    #[test]
    fn nine_site_cubes_converge_fast() {
        let f = flow(4, 1, 1.0);
        let pou = PartitionOfUnity::new(f.fine, 2).unwrap();
        assert_eq!(pou.n_cubes(), 3);
        let par = parametrix(&LocalOperator::free(&f), &pou).unwrap();
        let walk = random_walk_expansion(&par, 8, None).unwrap();
        let err = max_abs_diff(&walk.total, f.green());
        assert!(walk.diagnostics.max_ratio <= 0.5, "{:?}", walk.diagnostics);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zero_cube_weight_decouples() {
        let f = flow(4, 1, 20.0);
        let pou = PartitionOfUnity::new(f.fine, 1).unwrap();
        assert_eq!(pou.n_cubes(), 9);
        let par = parametrix(&LocalOperator::free(&f), &pou).unwrap();
        let mut s = vec![1.0; 9];
        s[0] = 0.0;
        s[4] = 0.0;
        let walk = random_walk_expansion(&par, 6, Some(&s)).unwrap();
        assert!(off_block_max(&walk.total, &pou, &s) < 1e-12);
        let free = random_walk_expansion(&par, 6, None).unwrap();
        assert!(off_block_max(&free.total, &pou, &s) > 1e-8);
        assert!(max_abs_diff(&free.weighted(&s), &walk.total) < 1e-12);
    }

    #[test]
    fn decay_rates_are_positive() {
        let f = FreeFlow::new(GaussParams { d: 1, l: 3, side_exp: 4, k: 1, a: 1.0, mu_bar: 0.0 }).unwrap();
        for p in decay_probes(&f, &[0.0, 1.0], 9).unwrap() {
            assert!(p.fit.gamma > 0.0, "{p:?}");
        }
        let prof = holder_decay_profile(f.green(), &f.qk, 0, 0.75).unwrap();
        let fit = fit_exponential(&prof).unwrap();
        assert!(fit.gamma > 0.0);
        assert!(holder_seminorm(&Field::constant(f.fine, 3.0), 0.75).unwrap() == 0.0);
        assert!(holder_seminorm(&Field::constant(f.fine, 3.0), 1.5).is_err());
    }
}
