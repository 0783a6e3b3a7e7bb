//! Periodic lattices at every RG level, fields on them, and lattice calculus.
//!
//! Sites are integer multi-indices in `[0, n)^d` with `n = L^side_exp`; the
//! spacing is `L^{-spacing_exp}` so that negative exponents describe the
//! coarse lattices with spacing `L`. Site `i` has coordinate `μ` equal to
//! `(i / n^μ) % n`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Hard cap on the number of sites of any lattice we are willing to build.
pub const MAX_SITES: usize = 1 << 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusLattice {
    pub d: usize,
    pub l: usize,
    pub side_exp: u32,
    pub spacing_exp: i32,
}

impl TorusLattice {
    pub fn new(d: usize, l: usize, side_exp: u32, spacing_exp: i32) -> Result<Self> {
        if !(1..=3).contains(&d) {
            return Err(Error::InvalidParameter(format!("dimension {d} not in 1..=3")));
        }
        if l < 3 || l.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("L = {l} must be odd and >= 3")));
        }
        let per_side = l
            .checked_pow(side_exp)
            .ok_or_else(|| Error::CapExceeded("sites per side overflows".into()))?;
        let total = per_side
            .checked_pow(d as u32)
            .filter(|&t| t <= MAX_SITES)
            .ok_or_else(|| Error::CapExceeded(format!("{per_side}^{d} sites")))?;
        debug_assert!(total > 0);
        Ok(TorusLattice { d, l, side_exp, spacing_exp })
    }

    pub fn sites_per_side(&self) -> usize {
        self.l.pow(self.side_exp)
    }

    pub fn n_sites(&self) -> usize {
        self.sites_per_side().pow(self.d as u32)
    }

    pub fn spacing(&self) -> f64 {
        (self.l as f64).powi(-self.spacing_exp)
    }

    /// Weight of one site in sums written as integrals.
    pub fn site_weight(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    pub fn volume(&self) -> f64 {
        self.n_sites() as f64 * self.site_weight()
    }

    /// Side of the torus in continuum units.
    pub fn side_length(&self) -> f64 {
        self.sites_per_side() as f64 * self.spacing()
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let n = self.sites_per_side();
        let mut c = [0usize; 3];
        let mut r = i;
        for slot in c.iter_mut().take(self.d) {
            *slot = r % n;
            r /= n;
        }
        c
    }

    pub fn index(&self, c: &[usize; 3]) -> usize {
        let n = self.sites_per_side();
        let mut i = 0;
        for mu in (0..self.d).rev() {
            i = i * n + c[mu] % n;
        }
        i
    }

    /// The site reached from `i` by `step` lattice steps in direction `mu`.
    pub fn shift(&self, i: usize, mu: usize, step: isize) -> usize {
        let n = self.sites_per_side() as isize;
        let mut c = self.coords(i);
        c[mu] = (c[mu] as isize + step).rem_euclid(n) as usize;
        self.index(&c)
    }

    /// Signed minimal-image displacement `x - y` along `mu`, in site units.
    pub fn displacement(&self, x: usize, y: usize, mu: usize) -> isize {
        let n = self.sites_per_side() as isize;
        let dx = self.coords(x)[mu] as isize - self.coords(y)[mu] as isize;
        let r = dx.rem_euclid(n);
        if r > n / 2 {
            r - n
        } else {
            r
        }
    }

    /// Periodic sup-metric distance in site units.
    pub fn sup_dist_sites(&self, x: usize, y: usize) -> usize {
        (0..self.d)
            .map(|mu| self.displacement(x, y, mu).unsigned_abs())
            .max()
            .unwrap_or(0)
    }

    /// Periodic sup-metric distance in continuum units.
    pub fn distance(&self, x: usize, y: usize) -> f64 {
        self.sup_dist_sites(x, y) as f64 * self.spacing()
    }

    /// Same sites, spacing multiplied by `L`.
    pub fn scaled_up(&self) -> TorusLattice {
        TorusLattice { spacing_exp: self.spacing_exp - 1, ..*self }
    }

    /// Same sites, spacing divided by `L`.
    pub fn scaled_down(&self) -> TorusLattice {
        TorusLattice { spacing_exp: self.spacing_exp + 1, ..*self }
    }

    /// The lattice of block centers after `j` averagings.
    pub fn coarsened(&self, j: u32) -> Result<TorusLattice> {
        if j > self.side_exp {
            return Err(Error::InvalidParameter(format!(
                "cannot coarsen {} times a lattice with L^{} sites per side",
                j, self.side_exp
            )));
        }
        TorusLattice::new(self.d, self.l, self.side_exp - j, self.spacing_exp - j as i32)
    }

    pub fn check_same(&self, other: &TorusLattice) -> Result<()> {
        if self != other {
            return Err(Error::LatticeMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    pub lattice: TorusLattice,
    pub values: Vec<f64>,
}

impl Field {
    pub fn new(lattice: TorusLattice, values: Vec<f64>) -> Result<Self> {
        if values.len() != lattice.n_sites() {
            return Err(Error::LatticeMismatch(format!(
                "{} values for {} sites",
                values.len(),
                lattice.n_sites()
            )));
        }
        Ok(Field { lattice, values })
    }

    pub fn zeros(lattice: TorusLattice) -> Self {
        Field { lattice, values: vec![0.0; lattice.n_sites()] }
    }

    pub fn constant(lattice: TorusLattice, c: f64) -> Self {
        Field { lattice, values: vec![c; lattice.n_sites()] }
    }

    pub fn from_fn(lattice: TorusLattice, f: impl FnMut(usize) -> f64) -> Self {
        Field { lattice, values: (0..lattice.n_sites()).map(f).collect() }
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.lattice.site_weight() * self.values.iter().map(|v| v * v).sum::<f64>()
    }

    pub fn scaled(&self, c: f64) -> Field {
        Field { lattice: self.lattice, values: self.values.iter().map(|v| c * v).collect() }
    }

    pub fn axpy(&self, c: f64, other: &Field) -> Result<Field> {
        self.lattice.check_same(&other.lattice)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        Ok(Field { lattice: self.lattice, values })
    }
}

/// `⟨u, v⟩ = L^{-dk} Σ_x u(x) v(x)`.
pub fn inner_product(u: &Field, v: &Field) -> Result<f64> {
    u.lattice.check_same(&v.lattice)?;
    let s: f64 = u.values.iter().zip(&v.values).map(|(a, b)| a * b).sum();
    Ok(u.lattice.site_weight() * s)
}

pub fn forward_derivative(f: &Field, mu: usize) -> Field {
    let lat = f.lattice;
    let a = lat.spacing();
    Field::from_fn(lat, |x| (f.values[lat.shift(x, mu, 1)] - f.values[x]) / a)
}

/// Matrix of the forward difference in direction `mu`. Because every site has
/// the same weight, the adjoint `∂*` is the plain transpose.
pub fn derivative_matrix(lat: &TorusLattice, mu: usize) -> DMatrix<f64> {
    let n = lat.n_sites();
    let a = lat.spacing();
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        let y = lat.shift(x, mu, 1);
        m[(x, y)] += 1.0 / a;
        m[(x, x)] -= 1.0 / a;
    }
    m
}

/// `Δ = -Σ_μ ∂_μ* ∂_μ`.
pub fn laplacian_matrix(lat: &TorusLattice) -> DMatrix<f64> {
    let n = lat.n_sites();
    let mut m = DMatrix::zeros(n, n);
    for mu in 0..lat.d {
        let dm = derivative_matrix(lat, mu);
        m -= dm.transpose() * &dm;
    }
    m
}

pub fn laplacian(f: &Field) -> Field {
    let lat = f.lattice;
    let a2 = lat.spacing().powi(2);
    Field::from_fn(lat, |x| {
        let mut s = 0.0;
        for mu in 0..lat.d {
            s += f.values[lat.shift(x, mu, 1)] + f.values[lat.shift(x, mu, -1)] - 2.0 * f.values[x];
        }
        s / a2
    })
}

/// A set of sites, sorted and duplicate free.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub lattice: TorusLattice,
    pub sites: Vec<usize>,
}

impl Region {
    pub fn new(lattice: TorusLattice, mut sites: Vec<usize>) -> Result<Self> {
        sites.sort_unstable();
        sites.dedup();
        if sites.is_empty() {
            return Err(Error::Precondition("empty region".into()));
        }
        if *sites.last().unwrap() >= lattice.n_sites() {
            return Err(Error::InvalidParameter("site index out of range".into()));
        }
        Ok(Region { lattice, sites })
    }

    pub fn whole(lattice: TorusLattice) -> Self {
        Region { lattice, sites: (0..lattice.n_sites()).collect() }
    }

    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }

    pub fn contains(&self, x: usize) -> bool {
        self.sites.binary_search(&x).is_ok()
    }

    /// Position of a site inside `sites`.
    pub fn local_index(&self, x: usize) -> Option<usize> {
        self.sites.binary_search(&x).ok()
    }

    pub fn volume(&self) -> f64 {
        self.sites.len() as f64 * self.lattice.site_weight()
    }
}

/// Oriented bonds `(x, x + e_mu)` with both ends in `sites` (sorted).
pub fn interior_bonds(lat: &TorusLattice, sites: &[usize], mu: usize) -> Vec<(usize, usize)> {
    sites
        .iter()
        .filter_map(|&x| {
            let y = lat.shift(x, mu, 1);
            (y != x && sites.binary_search(&y).is_ok()).then_some((x, y))
        })
        .collect()
}

/// Laplacian on a region with Neumann boundary conditions, in the region's
/// local indexing: only bonds with both endpoints inside contribute.
pub fn neumann_laplacian(region: &Region) -> Result<DMatrix<f64>> {
    if region.is_empty() {
        return Err(Error::Precondition("empty region".into()));
    }
    let lat = region.lattice;
    let a2 = lat.spacing().powi(2);
    let n = region.len();
    let mut m = DMatrix::zeros(n, n);
    for mu in 0..lat.d {
        for (x, y) in interior_bonds(&lat, &region.sites, mu) {
            let i = region.local_index(x).unwrap();
            let j = region.local_index(y).unwrap();
            m[(i, i)] -= 1.0 / a2;
            m[(j, j)] -= 1.0 / a2;
            m[(i, j)] += 1.0 / a2;
            m[(j, i)] += 1.0 / a2;
        }
    }
    Ok(m)
}

/// Power of `L` by which a field is divided when its argument is stretched by
/// `L`: the canonical dimension `(d-2)/2`, which is `1/2` in three dimensions.
pub fn field_scaling_exponent(d: usize) -> f64 {
    (d as f64 - 2.0) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleDirection {
    /// `f ↦ f_L`, `f_L(x) = L^{-(d-2)/2} f(x/L)`, spacing multiplied by `L`.
    Up,
    /// The inverse of `Up`.
    Down,
}

pub fn scale_field(f: &Field, dir: ScaleDirection) -> Field {
    let lat = f.lattice;
    let s = (lat.l as f64).powf(-field_scaling_exponent(lat.d));
    match dir {
        ScaleDirection::Up => Field { lattice: lat.scaled_up(), values: f.values.iter().map(|v| s * v).collect() },
        ScaleDirection::Down => {
            Field { lattice: lat.scaled_down(), values: f.values.iter().map(|v| v / s).collect() }
        }
    }
}

/// Scale `f` up onto an explicitly requested target lattice.
pub fn scale_field_to(f: &Field, target: &TorusLattice) -> Result<Field> {
    let up = f.lattice.scaled_up();
    let down = f.lattice.scaled_down();
    if *target == up {
        Ok(scale_field(f, ScaleDirection::Up))
    } else if *target == down {
        Ok(scale_field(f, ScaleDirection::Down))
    } else {
        Err(Error::LatticeMismatch(format!("cannot scale {:?} onto {:?}", f.lattice, target)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(d: usize, n: u32, k: i32) -> TorusLattice {
        TorusLattice::new(d, 3, n, k).unwrap()
    }

    #[test]
    fn site_weight_and_volume() {
        let t = lat(2, 2, 1);
        assert_eq!(t.n_sites(), 81);
        assert!((t.volume() - 9.0).abs() < 1e-12);
        let mut delta = Field::zeros(t);
        delta.values[5] = 1.0;
        let one = Field::constant(t, 1.0);
        assert!((inner_product(&delta, &one).unwrap() - 1.0 / 9.0).abs() < 1e-15);
        assert!((inner_product(&one, &one).unwrap() - t.volume()).abs() < 1e-12);
    }

    #[test]
    fn rejects_even_l() {
        assert!(TorusLattice::new(1, 4, 2, 0).is_err());
        assert!(TorusLattice::new(4, 3, 1, 0).is_err());
    }

    #[test]
    fn every_site_has_2d_neighbours() {
        let t = lat(3, 1, 0);
        for x in 0..t.n_sites() {
            let mut nb: Vec<usize> = (0..3).flat_map(|mu| [t.shift(x, mu, 1), t.shift(x, mu, -1)]).collect();
            nb.sort();
            nb.dedup();
            assert_eq!(nb.len(), 6);
        }
    }

    #[test]
    fn linear_field_has_unit_derivative_away_from_seam() {
        let t = lat(1, 2, 1);
        let a = t.spacing();
        let f = Field::from_fn(t, |x| x as f64 * a);
        let df = forward_derivative(&f, 0);
        for x in 0..t.n_sites() - 1 {
            assert!((df.values[x] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn laplacian_spectrum_matches_fourier() {
        let t = lat(1, 1, 1);
        let a = t.spacing();
        let m = laplacian_matrix(&t);
        let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want: Vec<f64> = (0..3)
            .map(|j| -(2.0 / (a * a)) * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / 3.0).cos()))
            .collect();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (e, w) in ev.iter().zip(&want) {
            assert!((e - w).abs() < 1e-10, "{e} vs {w}");
        }
    }

    #[test]
    fn matrix_and_stencil_laplacian_agree() {
        let t = lat(2, 1, 1);
        let f = Field::from_fn(t, |x| ((x * 7) % 5) as f64 - 2.0);
        let m = laplacian_matrix(&t);
        let mf = &m * nalgebra::DVector::from_vec(f.values.clone());
        let lf = laplacian(&f);
        for x in 0..t.n_sites() {
            assert!((mf[x] - lf.values[x]).abs() < 1e-10);
        }
    }

    #[test]
    fn neumann_on_whole_torus_and_small_regions() {
        let t = lat(2, 1, 0);
        let whole = neumann_laplacian(&Region::whole(t)).unwrap();
        assert!((whole - laplacian_matrix(&t)).abs().max() < 1e-12);
        let single = neumann_laplacian(&Region::new(t, vec![4]).unwrap()).unwrap();
        assert_eq!(single[(0, 0)], 0.0);
        let line = lat(1, 2, 0);
        let pair = neumann_laplacian(&Region::new(line, vec![3, 4]).unwrap()).unwrap();
        let f = nalgebra::DVector::from_vec(vec![1.5, -0.5]);
        let form = -(f.transpose() * &pair * &f)[(0, 0)];
        assert!((form - 4.0).abs() < 1e-12);
        assert!(Region::new(t, vec![]).is_err());
    }

    #[test]
    fn scaling_round_trip_and_constants() {
        let t = lat(3, 1, 1);
        let f = Field::from_fn(t, |x| (x as f64).sin());
        let back = scale_field(&scale_field(&f, ScaleDirection::Up), ScaleDirection::Down);
        assert_eq!(back.lattice, t);
        for (a, b) in back.values.iter().zip(&f.values) {
            assert!((a - b).abs() < 1e-14);
        }
        let c = scale_field(&Field::constant(t, 2.0), ScaleDirection::Up);
        assert!((c.values[0] - 2.0 / 3f64.sqrt()).abs() < 1e-14);
        assert!(scale_field_to(&f, &lat(3, 1, 3)).is_err());
    }
}
