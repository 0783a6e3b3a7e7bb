//! Cluster expansion for ultralocal measures: Mayer amplitudes, exact
//! integration, connected resummation, and a brute-force oracle.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use libm::erf;

use crate::functional::LocalFunctional;
use crate::greens::fit_exponential;
use crate::lattice::{Field, TorusLattice};
use crate::polymer::{spanning_tree_length, Polymer};
use crate::quadrature::{hermite_unit_gaussian, legendre};
use crate::{Error, Result};

/// Largest number of polymers whose families are enumerated.
pub const MAX_POLYMERS: usize = 22;
/// Largest tensor-product grid integrated exactly.
pub const MAX_TENSOR_POINTS: usize = 20_000_000;
/// Largest family handed to the graph sum.
pub const MAX_GRAPH_VERTICES: usize = 9;

/// A one-site probability measure given by points and weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UltralocalMeasure {
    pub points: Vec<(f64, f64)>,
}

impl UltralocalMeasure {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() || points.iter().any(|&(x, w)| !(w > 0.0) || !x.is_finite()) {
            return Err(Error::InvalidParameter("measure weights must be positive".into()));
        }
        let total: f64 = points.iter().map(|p| p.1).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("measure has total weight {total}")));
        }
        Ok(UltralocalMeasure { points })
    }

    /// Unit Gaussian conditioned on `|Φ| ≤ p0`, as Gauss-Legendre nodes on
    /// `[-p0, p0]` with the density folded into the weights.
    pub fn truncated_gaussian(p0: f64, nodes: usize) -> Result<Self> {
        if !(p0 > 0.0) {
            return Err(Error::InvalidParameter("truncation must be positive".into()));
        }
        let rule = legendre(nodes, -p0, p0)?;
        let raw: Vec<(f64, f64)> = rule.into_iter().map(|(x, w)| (x, w * (-0.5 * x * x).exp())).collect();
        let z: f64 = raw.iter().map(|p| p.1).sum();
        Self::new(raw.into_iter().map(|(x, w)| (x, w / z)).collect())
    }

    /// Gauss-Hermite nodes of the unit Gaussian kept inside `|Φ| ≤ p0`,
    /// renormalized. Exact on low moments when every node survives.
    pub fn truncated_hermite(p0: f64, nodes: usize) -> Result<Self> {
        let kept: Vec<(f64, f64)> = hermite_unit_gaussian(nodes)?.into_iter().filter(|p| p.0.abs() <= p0).collect();
        let z: f64 = kept.iter().map(|p| p.1).sum();
        if kept.is_empty() {
            return Err(Error::InvalidParameter("truncation removes every node".into()));
        }
        Self::new(kept.into_iter().map(|(x, w)| (x, w / z)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn moment(&self, n: i32) -> f64 {
        self.points.iter().map(|&(x, w)| w * x.powi(n)).sum()
    }
}

/// `-log ∫ χ(|Φ| ≤ p0) dμ_Gauss = -log erf(p0/√2)`, the per-site energy of
/// the truncation.
pub fn truncation_energy(p0: f64) -> f64 {
    -erf(p0 / std::f64::consts::SQRT_2).ln()
}

/// The same energy from quadrature of the Gaussian density on `[-p0, p0]`.
pub fn truncation_energy_quadrature(p0: f64, nodes: usize) -> Result<f64> {
    let s = crate::quadrature::integrate(
        |x| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt(),
        -p0,
        p0,
        8,
        nodes,
    )?;
    Ok(-s.ln())
}

pub type SiteFunction = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Polymer activities `H(X, Φ)` over sites grouped into cubes.
#[derive(Clone)]
pub struct PolymerGas {
    pub cube_lattice: TorusLattice,
    pub n_sites: usize,
    pub cube_sites: Vec<Vec<usize>>,
    pub polymers: Vec<Polymer>,
    pub activities: Vec<SiteFunction>,
}

impl PolymerGas {
    pub fn new(
        cube_lattice: TorusLattice,
        cube_sites: Vec<Vec<usize>>,
        polymers: Vec<Polymer>,
        activities: Vec<SiteFunction>,
    ) -> Result<Self> {
        if polymers.len() != activities.len() || cube_sites.len() != cube_lattice.n_sites() {
            return Err(Error::InvalidParameter("polymer gas shapes disagree".into()));
        }
        let n_sites = cube_sites.iter().flatten().map(|&s| s + 1).max().unwrap_or(0);
        Ok(PolymerGas { cube_lattice, n_sites, cube_sites, polymers, activities })
    }

    /// One site per cube, activities given by a closure per polymer.
    pub fn one_site_per_cube(cube_lattice: TorusLattice, terms: Vec<(Polymer, SiteFunction)>) -> Result<Self> {
        let cube_sites = (0..cube_lattice.n_sites()).map(|c| vec![c]).collect();
        let (polymers, activities) = terms.into_iter().unzip();
        Self::new(cube_lattice, cube_sites, polymers, activities)
    }

    /// Reads each polymer's total `E(X, ·)` as its activity.
    pub fn from_functional(e: &LocalFunctional) -> Result<Self> {
        let lat = e.field_lattice();
        let cube_sites = (0..e.cube_lattice().n_sites()).map(|c| e.cube_map().members(c).to_vec()).collect();
        let mut polymers = Vec::new();
        let mut activities: Vec<SiteFunction> = Vec::new();
        for poly in e.terms.keys() {
            let f = e.clone();
            let p = poly.clone();
            polymers.push(poly.clone());
            activities.push(Arc::new(move |v: &[f64]| {
                let phi = Field { lattice: lat, values: v.to_vec() };
                f.evaluate(&p, &phi).unwrap_or(f64::NAN)
            }));
        }
        Self::new(e.cube_lattice(), cube_sites, polymers, activities)
    }

    pub fn sites_of(&self, poly: &Polymer) -> Vec<usize> {
        let mut s: Vec<usize> = poly.cubes.iter().flat_map(|&c| self.cube_sites[c].iter().copied()).collect();
        s.sort_unstable();
        s
    }

    /// Keeps only the polymers whose index bit is set in `on`.
    pub fn restricted(&self, on: &[bool]) -> PolymerGas {
        let mut g = self.clone();
        g.polymers = self.polymers.iter().zip(on).filter(|(_, &b)| b).map(|(p, _)| p.clone()).collect();
        g.activities = self.activities.iter().zip(on).filter(|(_, &b)| b).map(|(a, _)| a.clone()).collect();
        g
    }
}

/// `∫ f(Φ) Π_{x∈sites} dμ(Φ(x))` with the other sites held at zero.
pub fn tensor_integral(
    mu: &UltralocalMeasure,
    sites: &[usize],
    n_sites: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> Result<f64> {
    let m = mu.len();
    let total = (m as f64).powi(sites.len() as i32);
    if total > MAX_TENSOR_POINTS as f64 {
        return Err(Error::CapExceeded(format!("{m}^{} quadrature points", sites.len())));
    }
    let mut idx = vec![0usize; sites.len()];
    let mut phi = vec![0.0; n_sites];
    let mut acc = 0.0;
    loop {
        let mut w = 1.0;
        for (k, &s) in sites.iter().enumerate() {
            let (x, wx) = mu.points[idx[k]];
            phi[s] = x;
            w *= wx;
        }
        acc += w * f(&phi);
        let mut k = 0;
        loop {
            if k == sites.len() {
                return Ok(acc);
            }
            idx[k] += 1;
            if idx[k] < m {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Overlap-connected families `{X_i}` grouped by their union `Y`.
#[derive(Clone, Debug)]
pub struct MayerAmplitudes {
    /// For each union `Y`, the families as polymer-index lists.
    pub families: BTreeMap<Polymer, Vec<Vec<usize>>>,
}

fn family_connected(polys: &[Polymer], fam: &[usize]) -> bool {
    if fam.len() <= 1 {
        return true;
    }
    let mut seen = vec![false; fam.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(i) = stack.pop() {
        for j in 0..fam.len() {
            if !seen[j] && polys[fam[i]].intersects(&polys[fam[j]]) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|b| b)
}

fn union_of(polys: &[Polymer], fam: &[usize]) -> Polymer {
    let mut c: Vec<usize> = fam.iter().flat_map(|&i| polys[i].cubes.iter().copied()).collect();
    c.sort_unstable();
    c.dedup();
    Polymer::from_sorted_unchecked(c)
}

/// `K(Y, Φ) = Σ_{indivisible {X_i}, ∪X_i = Y} Π (e^{H(X_i,Φ)} - 1)`, stored as
/// the list of families.
pub fn mayer_amplitudes(gas: &PolymerGas) -> Result<MayerAmplitudes> {
    let p = gas.polymers.len();
    if p > MAX_POLYMERS {
        return Err(Error::CapExceeded(format!("{p} polymers exceed the family cap {MAX_POLYMERS}")));
    }
    let mut families: BTreeMap<Polymer, Vec<Vec<usize>>> = BTreeMap::new();
    for mask in 1u64..(1u64 << p) {
        let fam: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
        if family_connected(&gas.polymers, &fam) {
            families.entry(union_of(&gas.polymers, &fam)).or_default().push(fam);
        }
    }
    Ok(MayerAmplitudes { families })
}

impl MayerAmplitudes {
    /// `K(Y, Φ)` at one field.
    pub fn evaluate(&self, gas: &PolymerGas, y: &Polymer, phi: &[f64]) -> f64 {
        let Some(fams) = self.families.get(y) else { return 0.0 };
        let mut h: Vec<Option<f64>> = vec![None; gas.polymers.len()];
        let mut total = 0.0;
        for fam in fams {
            let mut prod = 1.0;
            for &i in fam {
                prod *= *h[i].get_or_insert_with(|| (gas.activities[i])(phi).exp_m1());
            }
            total += prod;
        }
        total
    }
}

/// `K#(Y) = ∫ K(Y, Φ) dμ(Φ)` over the sites of `Y`.
pub fn integrate_amplitudes(
    gas: &PolymerGas,
    k: &MayerAmplitudes,
    mu: &UltralocalMeasure,
) -> Result<BTreeMap<Polymer, f64>> {
    let mut out = BTreeMap::new();
    for y in k.families.keys() {
        let sites = gas.sites_of(y);
        let v = tensor_integral(mu, &sites, gas.n_sites, |phi| k.evaluate(gas, y, phi))?;
        out.insert(y.clone(), v);
    }
    Ok(out)
}

/// Overlap graph of a family: `adj[i]` has bit `j` when `Y_i ∩ Y_j ≠ ∅`.
fn overlap_adjacency(fam: &[&Polymer]) -> Vec<u32> {
    let n = fam.len();
    let mut adj = vec![0u32; n];
    for i in 0..n {
        for j in 0..n {
            if i != j && fam[i].intersects(fam[j]) {
                adj[i] |= 1 << j;
            }
        }
    }
    adj
}

/// `ρᵀ(Y_1, …, Y_n) = Σ_{G connected} Π_{ij∈G} (ζ(Y_i, Y_j) - 1)`, by the
/// recursion `[S independent] = Σ_{T∋min S} ρᵀ(T) [S∖T independent]`.
pub fn connected_rho_t(fam: &[&Polymer]) -> Result<f64> {
    let n = fam.len();
    if n == 0 {
        return Err(Error::InvalidParameter("ρᵀ needs at least one polymer".into()));
    }
    if n > MAX_GRAPH_VERTICES {
        return Err(Error::CapExceeded(format!("{n} polymers exceed the graph cap {MAX_GRAPH_VERTICES}")));
    }
    let adj = overlap_adjacency(fam);
    let full = (1u32 << n) - 1;
    let independent = |s: u32| (0..n).all(|i| s & (1 << i) == 0 || adj[i] & s == 0);
    let mut c = vec![0.0f64; 1 << n];
    for s in 1..=full {
        let low = s & s.wrapping_neg();
        let rest = s & !low;
        let mut v = if independent(s) { 1.0 } else { 0.0 };
        // proper subsets T ⊂ S containing the lowest element
        let mut sub = rest;
        loop {
            let t = sub | low;
            if t != s && independent(s & !t) {
                v -= c[t as usize];
            }
            if sub == 0 {
                break;
            }
            sub = (sub - 1) & rest;
        }
        c[s as usize] = v;
    }
    Ok(c[full as usize])
}

/// `ρᵀ` by listing every graph on `n ≤ 5` vertices.
pub fn connected_rho_t_by_graphs(fam: &[&Polymer]) -> Result<f64> {
    let n = fam.len();
    if n == 0 || n > 5 {
        return Err(Error::CapExceeded(format!("graph listing supports 1..=5 vertices, got {n}")));
    }
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let mut total = 0.0;
    for mask in 0u32..(1 << edges.len()) {
        let chosen: Vec<(usize, usize)> = edges.iter().enumerate().filter(|(e, _)| mask & (1 << e) != 0).map(|(_, &p)| p).collect();
        if !graph_connected(n, &chosen) {
            continue;
        }
        total += chosen.iter().map(|&(i, j)| if fam[i].intersects(fam[j]) { -1.0 } else { 0.0 }).product::<f64>();
    }
    Ok(total)
}

fn graph_connected(n: usize, edges: &[(usize, usize)]) -> bool {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut r = x;
        while p[r] != r {
            r = p[r];
        }
        p[x] = r;
        r
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        parent[ra] = rb;
    }
    let root = find(&mut parent, 0);
    (0..n).all(|i| find(&mut parent, i) == root)
}

/// Spanning trees of the overlap graph, by the matrix-tree theorem.
pub fn overlap_spanning_trees(fam: &[&Polymer]) -> f64 {
    let n = fam.len();
    if n <= 1 {
        return 1.0;
    }
    let adj = overlap_adjacency(fam);
    let lap = nalgebra::DMatrix::from_fn(n - 1, n - 1, |i, j| {
        if i == j {
            adj[i].count_ones() as f64
        } else if adj[i] & (1 << j) != 0 {
            -1.0
        } else {
            0.0
        }
    });
    lap.determinant().round()
}

/// Trees on `n` labelled vertices tallied by degree sequence, by listing
/// every `(n-1)`-edge subset of the complete graph.
pub fn tree_degree_counts(n: usize) -> Result<BTreeMap<Vec<usize>, u64>> {
    if !(2..=7).contains(&n) {
        return Err(Error::CapExceeded(format!("tree listing supports 2..=7 vertices, got {n}")));
    }
    let edges: Vec<(usize, usize)> = (0..n).flat_map(|i| ((i + 1)..n).map(move |j| (i, j))).collect();
    let mut out = BTreeMap::new();
    for mask in 0u32..(1 << edges.len()) {
        if mask.count_ones() as usize != n - 1 {
            continue;
        }
        let chosen: Vec<(usize, usize)> = edges.iter().enumerate().filter(|(e, _)| mask & (1 << e) != 0).map(|(_, &p)| p).collect();
        if graph_connected(n, &chosen) {
            let mut deg = vec![0usize; n];
            for &(a, b) in &chosen {
                deg[a] += 1;
                deg[b] += 1;
            }
            *out.entry(deg).or_insert(0) += 1;
        }
    }
    Ok(out)
}

/// `(n-2)! / Π (d_j - 1)!`.
pub fn cayley_count(degrees: &[usize]) -> f64 {
    let fact = |k: usize| (1..=k).map(|v| v as f64).product::<f64>();
    fact(degrees.len() - 2) / degrees.iter().map(|&d| fact(d - 1)).product::<f64>()
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// `ρᵀ` on multisets of polymers, memoized, with copies of one polymer
/// counted as overlapping.
struct MultisetRho<'a> {
    overlap: &'a [Vec<bool>],
    memo: HashMap<Vec<u8>, f64>,
}

impl MultisetRho<'_> {
    fn independent(&self, alpha: &[u8]) -> bool {
        let sup: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0).collect();
        sup.iter().all(|&i| alpha[i] == 1) && sup.iter().all(|&i| sup.iter().all(|&j| i == j || !self.overlap[i][j]))
    }

    fn value(&mut self, alpha: &[u8]) -> f64 {
        if let Some(&v) = self.memo.get(alpha) {
            return v;
        }
        let sup: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0).collect();
        let v = if sup.is_empty() || !self.support_connected(&sup) {
            0.0
        } else {
            let i0 = sup[0];
            let mut v = if self.independent(alpha) { 1.0 } else { 0.0 };
            // independent γ ⊆ supp α, γ ≠ 0, keeping one copy of i0
            let candidates: Vec<usize> = sup.iter().copied().filter(|&i| i != i0 || alpha[i0] >= 2).collect();
            let m = candidates.len();
            for mask in 1u32..(1 << m) {
                let chosen: Vec<usize> = (0..m).filter(|&b| mask & (1 << b) != 0).map(|b| candidates[b]).collect();
                if chosen.iter().any(|&i| chosen.iter().any(|&j| i != j && self.overlap[i][j])) {
                    continue;
                }
                let mut rest = alpha.to_vec();
                let mut ways = 1.0;
                for &i in &chosen {
                    ways *= if i == i0 { binomial(alpha[i] as usize - 1, 1) } else { binomial(alpha[i] as usize, 1) };
                    rest[i] -= 1;
                }
                v -= ways * self.value(&rest);
            }
            v
        };
        self.memo.insert(alpha.to_vec(), v);
        v
    }

    fn support_connected(&self, sup: &[usize]) -> bool {
        let mut seen = vec![false; sup.len()];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for b in 0..sup.len() {
                if !seen[b] && self.overlap[sup[a]][sup[b]] {
                    seen[b] = true;
                    stack.push(b);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConnectedAmplitudes {
    pub h_sharp: BTreeMap<Polymer, f64>,
    /// `Σ_Y` of the order-`n` contributions, `n = 1..=n_max`.
    pub order_sums: Vec<f64>,
    pub n_max: usize,
    /// Geometric extrapolation of the last order sums.
    pub ratio_tail: f64,
    /// `Σ_{n>n_max} (e z)^n` with `z = max_i Σ_{j∼i} |K#_j|`.
    pub tree_tail: f64,
    /// The smaller of the two estimates.
    pub tail_estimate: f64,
    pub summable: bool,
}

/// `H#(Y) = Σ_n 1/n! Σ_{(Y_1..Y_n), ∪Y_i = Y} ρᵀ(Y_1..Y_n) Π K#(Y_i)`, with
/// sequences grouped into multisets.
pub fn connected_amplitudes(k_sharp: &BTreeMap<Polymer, f64>, n_max: usize) -> Result<ConnectedAmplitudes> {
    if n_max == 0 {
        return Err(Error::InvalidParameter("n_max must be at least 1".into()));
    }
    if n_max > 40 {
        return Err(Error::CapExceeded("n_max above 40".into()));
    }
    let polys: Vec<&Polymer> = k_sharp.keys().collect();
    let kv: Vec<f64> = k_sharp.values().copied().collect();
    let p = polys.len();
    let overlap: Vec<Vec<bool>> = (0..p).map(|i| (0..p).map(|j| polys[i].intersects(polys[j])).collect()).collect();
    let mut rho = MultisetRho { overlap: &overlap, memo: HashMap::new() };
    let mut h_sharp: BTreeMap<Polymer, f64> = BTreeMap::new();
    let mut order_sums = vec![0.0; n_max];

    // connected multisets by depth-first growth over supports in index order
    let mut alpha = vec![0u8; p];
    let mut visited: std::collections::HashSet<Vec<u8>> = std::collections::HashSet::new();
    let mut stack: Vec<Vec<u8>> = Vec::new();
    for i in 0..p {
        let mut a = vec![0u8; p];
        a[i] = 1;
        stack.push(a);
    }
    let mut generated = 0usize;
    while let Some(a) = stack.pop() {
        if !visited.insert(a.clone()) {
            continue;
        }
        generated += 1;
        if generated > 5_000_000 {
            return Err(Error::CapExceeded("too many connected multisets".into()));
        }
        let n: usize = a.iter().map(|&v| v as usize).sum();
        let r = rho.value(&a);
        if r != 0.0 {
            let mut coeff = r;
            let mut cubes = Vec::new();
            for i in 0..p {
                if a[i] > 0 {
                    let fact: f64 = (1..=a[i] as usize).map(|v| v as f64).product();
                    coeff *= kv[i].powi(a[i] as i32) / fact;
                    cubes.extend(polys[i].cubes.iter().copied());
                }
            }
            cubes.sort_unstable();
            cubes.dedup();
            *h_sharp.entry(Polymer::from_sorted_unchecked(cubes)).or_insert(0.0) += coeff;
            order_sums[n - 1] += coeff;
        }
        if n < n_max {
            for j in 0..p {
                if a[j] > 0 || (0..p).any(|i| a[i] > 0 && overlap[i][j]) {
                    alpha.clone_from(&a);
                    alpha[j] += 1;
                    if !visited.contains(&alpha) {
                        stack.push(alpha.clone());
                    }
                }
            }
        }
    }

    let ratio_tail = {
        let last = order_sums[n_max - 1].abs();
        let prev = if n_max >= 2 { order_sums[n_max - 2].abs() } else { f64::INFINITY };
        if last == 0.0 {
            0.0
        } else if prev > 0.0 && last < prev {
            let q = last / prev;
            last * q / (1.0 - q)
        } else {
            f64::INFINITY
        }
    };
    let z = (0..p)
        .map(|i| (0..p).filter(|&j| overlap[i][j]).map(|j| kv[j].abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let ez = std::f64::consts::E * z;
    let tree_tail = if ez < 1.0 { ez.powi(n_max as i32 + 1) / (1.0 - ez) * p as f64 } else { f64::INFINITY };
    let tail_estimate = ratio_tail.min(tree_tail);
    Ok(ConnectedAmplitudes {
        h_sharp,
        order_sums,
        n_max,
        ratio_tail,
        tree_tail,
        tail_estimate,
        summable: tail_estimate.is_finite(),
    })
}

#[derive(Clone, Debug)]
pub struct ClusterResult {
    pub mayer: MayerAmplitudes,
    pub k_sharp: BTreeMap<Polymer, f64>,
    pub connected: ConnectedAmplitudes,
}

impl ClusterResult {
    pub fn log_partition(&self) -> f64 {
        self.connected.h_sharp.values().sum()
    }
}

pub fn cluster_expand(gas: &PolymerGas, mu: &UltralocalMeasure, n_max: usize) -> Result<ClusterResult> {
    let mayer = mayer_amplitudes(gas)?;
    let k_sharp = integrate_amplitudes(gas, &mayer, mu)?;
    let connected = connected_amplitudes(&k_sharp, n_max)?;
    Ok(ClusterResult { mayer, k_sharp, connected })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BruteForce {
    pub log_partition: f64,
    /// `H#(Y)` recovered by inclusion-exclusion over polymers switched on.
    pub h_sharp: BTreeMap<Polymer, f64>,
}

/// `log Ξ = log ∫ exp(Σ_X H(X, Φ)) dμ(Φ)` over every site.
pub fn log_partition(gas: &PolymerGas, mu: &UltralocalMeasure) -> Result<f64> {
    let sites: Vec<usize> = (0..gas.n_sites).collect();
    let z = tensor_integral(mu, &sites, gas.n_sites, |phi| {
        gas.activities.iter().map(|h| h(phi)).sum::<f64>().exp()
    })?;
    Ok(z.ln())
}

/// `log Ξ` and the exact `H#(Y)`: `g(T) = Σ_{U⊆T} (-1)^{|T∖U|} log Ξ(U)` is
/// the part needing exactly the polymers `T`, and `H#(Y) = Σ_{∪T = Y} g(T)`.
pub fn brute_force_log_partition(gas: &PolymerGas, mu: &UltralocalMeasure) -> Result<BruteForce> {
    let p = gas.polymers.len();
    if p > 16 {
        return Err(Error::CapExceeded(format!("{p} polymers exceed the oracle cap 16")));
    }
    let exact_cap = if mu.len() <= 2 { 12 } else { 6 };
    if gas.n_sites > exact_cap && (mu.len() as f64).powi(gas.n_sites as i32) > MAX_TENSOR_POINTS as f64 {
        return Err(Error::CapExceeded(format!("{} sites exceed the oracle cap", gas.n_sites)));
    }
    let n = 1usize << p;
    let mut f = vec![0.0; n];
    for (mask, slot) in f.iter_mut().enumerate() {
        let on: Vec<bool> = (0..p).map(|i| mask & (1 << i) != 0).collect();
        *slot = log_partition(&gas.restricted(&on), mu)?;
    }
    // Möbius transform over the subset lattice
    let mut g = f.clone();
    for i in 0..p {
        for mask in 0..n {
            if mask & (1 << i) != 0 {
                g[mask] -= g[mask ^ (1 << i)];
            }
        }
    }
    let mut h_sharp: BTreeMap<Polymer, f64> = BTreeMap::new();
    for (mask, &v) in g.iter().enumerate().skip(1) {
        if v.abs() < 1e-300 {
            continue;
        }
        let fam: Vec<usize> = (0..p).filter(|&i| mask & (1 << i) != 0).collect();
        *h_sharp.entry(union_of(&gas.polymers, &fam)).or_insert(0.0) += v;
    }
    Ok(BruteForce { log_partition: f[n - 1], h_sharp })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecayBoundReport {
    /// `(d_M(Y), max |H#(Y)|)` per distance.
    pub profile: Vec<(f64, f64)>,
    pub fitted_rate: Option<f64>,
    /// `κ - 3κ₀ - 3`.
    pub required_rate: f64,
    pub h0: f64,
    pub c0: f64,
    pub hypothesis_ok: bool,
    pub decay_ok: bool,
}

/// Fits `|H#(Y)|` against `d_M(Y)` and compares with `κ - 3κ₀ - 3`.
pub fn decay_bound_report(
    cube_lattice: &TorusLattice,
    h_sharp: &BTreeMap<Polymer, f64>,
    kappa: f64,
    kappa0: f64,
    h0: f64,
    c0: f64,
) -> Result<DecayBoundReport> {
    let mut by_dist: BTreeMap<u64, f64> = BTreeMap::new();
    for (y, v) in h_sharp {
        let d = spanning_tree_length(cube_lattice, &y.cubes);
        let e = by_dist.entry((d * 1e6).round() as u64).or_insert(0.0);
        *e = e.max(v.abs());
    }
    let profile: Vec<(f64, f64)> = by_dist.into_iter().map(|(d, v)| (d as f64 / 1e6, v)).collect();
    let fitted_rate = fit_exponential(&profile).ok().map(|f| f.gamma);
    let required_rate = kappa - 3.0 * kappa0 - 3.0;
    let decay_ok = match fitted_rate {
        Some(g) => g >= required_rate - 1e-9 || required_rate <= 0.0 && g > 0.0,
        None => true,
    };
    Ok(DecayBoundReport { profile, fitted_rate, required_rate, h0, c0, hypothesis_ok: h0 <= c0, decay_ok })
}
