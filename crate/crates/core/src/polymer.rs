//! Polymers: connected unions of `M`-cubes on the torus of cube centres.
//!
//! Cubes are the sites of a [`TorusLattice`] whose unit is one cube side.
//! The tree distance `d_M` is the minimum spanning tree length over cube
//! centres in the periodic sup metric, measured in cube units.

use std::collections::{BTreeSet, HashSet, VecDeque};

use petgraph::algo::min_spanning_tree;
use petgraph::data::Element;
use petgraph::graph::UnGraph;
use serde::{Deserialize, Serialize};

use crate::averaging::BlockMap;
use crate::lattice::TorusLattice;
use crate::{Error, Result};

/// Hard cap on the number of polymers an enumeration may produce.
pub const MAX_ENUMERATED: usize = 2_000_000;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Polymer {
    pub cubes: Vec<usize>,
}

/// Face neighbours of a cube (without duplicates on tiny tori).
pub fn face_neighbors(lat: &TorusLattice, c: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..lat.d)
        .flat_map(|mu| [lat.shift(c, mu, 1), lat.shift(c, mu, -1)])
        .filter(|&w| w != c)
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

pub fn is_connected(lat: &TorusLattice, cubes: &[usize]) -> Result<bool> {
    if cubes.is_empty() {
        return Err(Error::Precondition("empty cube set".into()));
    }
    let set: HashSet<usize> = cubes.iter().copied().collect();
    let mut seen = HashSet::from([cubes[0]]);
    let mut queue = VecDeque::from([cubes[0]]);
    while let Some(c) = queue.pop_front() {
        for w in face_neighbors(lat, c) {
            if set.contains(&w) && seen.insert(w) {
                queue.push_back(w);
            }
        }
    }
    Ok(seen.len() == set.len())
}

/// Minimum spanning tree length over the centres of `cubes` (cube units).
pub fn spanning_tree_length(lat: &TorusLattice, cubes: &[usize]) -> f64 {
    let mut g: UnGraph<(), usize> = UnGraph::with_capacity(cubes.len(), cubes.len() * cubes.len() / 2);
    let nodes: Vec<_> = cubes.iter().map(|_| g.add_node(())).collect();
    for i in 0..cubes.len() {
        for j in (i + 1)..cubes.len() {
            g.add_edge(nodes[i], nodes[j], lat.sup_dist_sites(cubes[i], cubes[j]));
        }
    }
    min_spanning_tree(&g)
        .map(|e| match e {
            Element::Edge { weight, .. } => weight as f64,
            Element::Node { .. } => 0.0,
        })
        .sum()
}

impl Polymer {
    pub fn new(lat: &TorusLattice, mut cubes: Vec<usize>) -> Result<Self> {
        cubes.sort_unstable();
        cubes.dedup();
        if cubes.iter().any(|&c| c >= lat.n_sites()) {
            return Err(Error::InvalidParameter("cube index out of range".into()));
        }
        if !is_connected(lat, &cubes)? {
            return Err(Error::Precondition(format!("cubes {cubes:?} are not connected")));
        }
        Ok(Polymer { cubes })
    }

    /// Builds a polymer without checking connectivity.
    pub fn from_sorted_unchecked(cubes: Vec<usize>) -> Self {
        Polymer { cubes }
    }

    pub fn size(&self) -> usize {
        self.cubes.len()
    }

    pub fn contains(&self, c: usize) -> bool {
        self.cubes.binary_search(&c).is_ok()
    }

    pub fn intersects(&self, other: &Polymer) -> bool {
        let (a, b) = if self.size() <= other.size() { (self, other) } else { (other, self) };
        a.cubes.iter().any(|&c| b.contains(c))
    }

    pub fn is_subset_of(&self, other: &Polymer) -> bool {
        self.cubes.iter().all(|&c| other.contains(c))
    }

    pub fn bitmask(&self) -> u64 {
        self.cubes.iter().fold(0, |m, &c| m | (1u64 << c))
    }
}

/// `d_M(X)`; errors on disconnected input.
pub fn tree_distance(lat: &TorusLattice, poly: &Polymer) -> Result<f64> {
    if !is_connected(lat, &poly.cubes)? {
        return Err(Error::Precondition("tree distance of a disconnected set".into()));
    }
    Ok(spanning_tree_length(lat, &poly.cubes))
}

/// Small polymers have `d_M(X) < L`.
pub fn is_small(lat: &TorusLattice, poly: &Polymer) -> Result<bool> {
    Ok(tree_distance(lat, poly)? < lat.l as f64)
}

/// All connected polymers containing `containing` with at most `max_size` cubes,
/// sorted by size then lexicographically.
pub fn enumerate_polymers(lat: &TorusLattice, containing: usize, max_size: usize) -> Result<Vec<Polymer>> {
    if containing >= lat.n_sites() {
        return Err(Error::InvalidParameter("cube index out of range".into()));
    }
    if max_size == 0 {
        return Err(Error::InvalidParameter("max_size must be positive".into()));
    }
    if max_size > lat.n_sites() {
        return Err(Error::CapExceeded(format!("{} cubes requested on a torus of {}", max_size, lat.n_sites())));
    }
    let mut out = vec![Polymer { cubes: vec![containing] }];
    let mut frontier: Vec<Vec<usize>> = vec![vec![containing]];
    for _ in 1..max_size {
        let mut next: BTreeSet<Vec<usize>> = BTreeSet::new();
        for cubes in &frontier {
            for &c in cubes {
                for w in face_neighbors(lat, c) {
                    if cubes.binary_search(&w).is_err() {
                        let mut grown = cubes.clone();
                        let pos = grown.binary_search(&w).unwrap_err();
                        grown.insert(pos, w);
                        next.insert(grown);
                    }
                }
            }
        }
        if out.len() + next.len() > MAX_ENUMERATED {
            return Err(Error::CapExceeded(format!("more than {MAX_ENUMERATED} polymers")));
        }
        frontier = next.into_iter().collect();
        out.extend(frontier.iter().map(|c| Polymer { cubes: c.clone() }));
    }
    Ok(out)
}

/// All polymers of at most `max_size` cubes meeting the set `touching`.
pub fn enumerate_polymers_meeting(lat: &TorusLattice, touching: &[usize], max_size: usize) -> Result<Vec<Polymer>> {
    let mut all: BTreeSet<Polymer> = BTreeSet::new();
    for &c in touching {
        all.extend(enumerate_polymers(lat, c, max_size)?);
    }
    Ok(all.into_iter().collect())
}

/// Every connected polymer on the whole torus with at most `max_size` cubes.
pub fn enumerate_all_polymers(lat: &TorusLattice, max_size: usize) -> Result<Vec<Polymer>> {
    let all: Vec<usize> = (0..lat.n_sites()).collect();
    let mut v = enumerate_polymers_meeting(lat, &all, max_size)?;
    v.sort_by(|a, b| a.size().cmp(&b.size()).then_with(|| a.cubes.cmp(&b.cubes)));
    Ok(v)
}

/// `(2^d)^{2(n-1)}`, the path-count bound on polymers of size `n` containing a cube.
pub fn path_count_bound(d: usize, n: usize) -> f64 {
    (2f64.powi(d as i32)).powi(2 * (n as i32 - 1))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountRow {
    pub size: usize,
    pub count: usize,
    pub path_bound: f64,
    pub sum_size_weight: f64,
    pub sum_tree_weight: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CountingReport {
    pub rows: Vec<CountRow>,
    /// `Σ_{X∋□, |X| ≤ cap} e^{-a|X|}`.
    pub size_sum: f64,
    /// `Σ_{X∋□, |X| ≤ cap} e^{-κ₀ d_M(X)}`, an empirical `K₀`.
    pub tree_sum: f64,
    /// Geometric majorant `Σ_{n ≤ cap} (2^d)^{2(n-1)} e^{-an}`.
    pub majorant: f64,
    /// Path-bound estimate of the omitted tail `Σ_{n > cap}`; infinite when the
    /// geometric ratio `4^d e^{-a}` is at least one.
    pub tail_estimate: f64,
    pub violations: usize,
}

pub fn counting_bounds_report(lat: &TorusLattice, max_size: usize, a: f64, kappa0: f64) -> Result<CountingReport> {
    let polys = enumerate_polymers(lat, 0, max_size)?;
    let d = lat.d;
    let mut rows: Vec<CountRow> = (1..=max_size)
        .map(|n| CountRow { size: n, count: 0, path_bound: path_count_bound(d, n), sum_size_weight: 0.0, sum_tree_weight: 0.0 })
        .collect();
    for p in &polys {
        let row = &mut rows[p.size() - 1];
        row.count += 1;
        row.sum_size_weight += (-a * p.size() as f64).exp();
        row.sum_tree_weight += (-kappa0 * spanning_tree_length(lat, &p.cubes)).exp();
    }
    let violations = rows.iter().filter(|r| r.count as f64 > r.path_bound).count();
    let majorant = rows.iter().map(|r| r.path_bound * (-a * r.size as f64).exp()).sum();
    let ratio = 4f64.powi(d as i32) * (-a).exp();
    let tail_estimate = if ratio < 1.0 {
        path_count_bound(d, max_size + 1) * (-a * (max_size + 1) as f64).exp() / (1.0 - ratio)
    } else {
        f64::INFINITY
    };
    Ok(CountingReport {
        size_sum: rows.iter().map(|r| r.sum_size_weight).sum(),
        tree_sum: rows.iter().map(|r| r.sum_tree_weight).sum(),
        rows,
        majorant,
        tail_estimate,
        violations,
    })
}

/// `Σ_{X ∩ Y ≠ ∅, |X| ≤ cap} e^{-κ₀ d_M(X)}` and the ratio to `|Y|`.
pub fn meeting_sum(lat: &TorusLattice, y: &Polymer, max_size: usize, kappa0: f64) -> Result<(f64, f64)> {
    let polys = enumerate_polymers_meeting(lat, &y.cubes, max_size)?;
    let s: f64 = polys.iter().map(|p| (-kappa0 * spanning_tree_length(lat, &p.cubes)).exp()).sum();
    Ok((s, s / y.size() as f64))
}

/// Grouping of `M`-cubes into `LM`-cubes.
#[derive(Clone, Debug)]
pub struct Reblocking {
    pub map: BlockMap,
}

impl Reblocking {
    pub fn new(cubes: TorusLattice) -> Result<Self> {
        Ok(Reblocking { map: BlockMap::new(cubes, 1)? })
    }

    pub fn coarse(&self) -> TorusLattice {
        self.map.coarse
    }

    /// `X̄`: the `LM`-cubes meeting `X`.
    pub fn reblock(&self, poly: &Polymer) -> Polymer {
        let mut cubes: Vec<usize> = poly.cubes.iter().map(|&c| self.map.block_of(c)).collect();
        cubes.sort_unstable();
        cubes.dedup();
        Polymer { cubes }
    }

    /// `LX`: the `M`-cubes of an `LM`-polymer.
    pub fn refine(&self, poly: &Polymer) -> Polymer {
        let mut cubes: Vec<usize> = poly.cubes.iter().flat_map(|&c| self.map.members(c).iter().copied()).collect();
        cubes.sort_unstable();
        Polymer { cubes }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct GeometryAudit {
    pub polymers: usize,
    /// `d_M ≤ |X| ≤ 3^d (1 + d_M)` failures.
    pub size_tree_violations: usize,
    /// `d_M(Y) ≤ |Y - X| + d_M(X)` failures over nested pairs.
    pub nested_pair_violations: usize,
    pub nested_pairs: usize,
    /// `d_M(Y) ≤ Σ d_M(X_i) + (n - 1)` failures over connected covers.
    pub cover_violations: usize,
    pub covers: usize,
    /// Counts exceeding the path bound.
    pub path_violations: usize,
    /// `d_M(X) ≥ L d_{LM}(X̄)` failures; reported, not required.
    pub reblock_tree_violations: usize,
    /// `|X̄| ≤ |X|` failures.
    pub reblock_size_violations: usize,
}

/// Exhaustive audit of the tree-distance inequalities for polymers containing
/// cube 0 up to `max_size`; nested pairs and covers are checked up to
/// `pair_size`.
pub fn geometry_audit(lat: &TorusLattice, max_size: usize, pair_size: usize) -> Result<GeometryAudit> {
    let polys = enumerate_polymers(lat, 0, max_size)?;
    let mut audit = GeometryAudit { polymers: polys.len(), ..Default::default() };
    let cap = 3f64.powi(lat.d as i32);
    let reb = if lat.sites_per_side() >= lat.l { Some(Reblocking::new(*lat)?) } else { None };
    let mut counts = vec![0usize; max_size + 1];
    for p in &polys {
        counts[p.size()] += 1;
        let dm = spanning_tree_length(lat, &p.cubes);
        let n = p.size() as f64;
        if !(dm <= n && n <= cap * (1.0 + dm)) {
            audit.size_tree_violations += 1;
        }
        if let Some(r) = &reb {
            let bar = r.reblock(p);
            let dbar = spanning_tree_length(&r.coarse(), &bar.cubes);
            if dm < lat.l as f64 * dbar {
                audit.reblock_tree_violations += 1;
            }
            if bar.size() > p.size() {
                audit.reblock_size_violations += 1;
            }
        }
    }
    for (n, &c) in counts.iter().enumerate().skip(1) {
        if c as f64 > path_count_bound(lat.d, n) {
            audit.path_violations += 1;
        }
    }
    let small: Vec<&Polymer> = polys.iter().filter(|p| p.size() <= pair_size).collect();
    for y in &small {
        let subs = connected_subpolymers(lat, y)?;
        let dy = spanning_tree_length(lat, &y.cubes);
        for x in &subs {
            audit.nested_pairs += 1;
            let dx = spanning_tree_length(lat, &x.cubes);
            if dy > (y.size() - x.size()) as f64 + dx + 1e-12 {
                audit.nested_pair_violations += 1;
            }
        }
        for cover in connected_covers(y, &subs, 3) {
            audit.covers += 1;
            let s: f64 = cover.iter().map(|x| spanning_tree_length(lat, &x.cubes)).sum();
            if dy > s + (cover.len() - 1) as f64 + 1e-12 {
                audit.cover_violations += 1;
            }
        }
    }
    Ok(audit)
}

/// All connected polymers contained in `y` (including `y`).
pub fn connected_subpolymers(lat: &TorusLattice, y: &Polymer) -> Result<Vec<Polymer>> {
    let n = y.size();
    if n > 20 {
        return Err(Error::CapExceeded("subset enumeration above 20 cubes".into()));
    }
    let mut out = Vec::new();
    for mask in 1u32..(1 << n) {
        let cubes: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).map(|i| y.cubes[i]).collect();
        if is_connected(lat, &cubes)? {
            out.push(Polymer { cubes });
        }
    }
    Ok(out)
}

/// Families of up to `max_parts` distinct subpolymers whose union is `y` and
/// whose overlap graph is connected.
pub fn connected_covers<'a>(y: &Polymer, subs: &'a [Polymer], max_parts: usize) -> Vec<Vec<&'a Polymer>> {
    let mut out = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    fn rec<'a>(
        y: &Polymer,
        subs: &'a [Polymer],
        start: usize,
        max_parts: usize,
        stack: &mut Vec<usize>,
        out: &mut Vec<Vec<&'a Polymer>>,
    ) {
        if !stack.is_empty() {
            let fam: Vec<&Polymer> = stack.iter().map(|&i| &subs[i]).collect();
            let covered: BTreeSet<usize> = fam.iter().flat_map(|p| p.cubes.iter().copied()).collect();
            if covered.len() == y.size() && overlap_connected(&fam) {
                out.push(fam);
            }
        }
        if stack.len() == max_parts {
            return;
        }
        for i in start..subs.len() {
            stack.push(i);
            rec(y, subs, i + 1, max_parts, stack, out);
            stack.pop();
        }
    }
    rec(y, subs, 0, max_parts, &mut stack, &mut out);
    out
}

/// Whether the graph "shares a cube" on the family is connected.
pub fn overlap_connected(fam: &[&Polymer]) -> bool {
    if fam.is_empty() {
        return false;
    }
    let mut seen = vec![false; fam.len()];
    seen[0] = true;
    let mut stack = vec![0];
    while let Some(i) = stack.pop() {
        for j in 0..fam.len() {
            if !seen[j] && fam[i].intersects(fam[j]) {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

/// Image of a cube set under a lattice symmetry: translation by `shift`,
/// then a permutation of axes and reflections.
pub fn transform_cubes(lat: &TorusLattice, cubes: &[usize], shift: [isize; 3], perm: [usize; 3], flip: [bool; 3]) -> Vec<usize> {
    let n = lat.sites_per_side() as isize;
    let mut out: Vec<usize> = cubes
        .iter()
        .map(|&c| {
            let x = lat.coords(c);
            let mut y = [0usize; 3];
            for mu in 0..lat.d {
                let mut v = x[perm[mu]] as isize;
                if flip[mu] {
                    v = -v;
                }
                y[mu] = (v + shift[mu]).rem_euclid(n) as usize;
            }
            lat.index(&y)
        })
        .collect();
    out.sort_unstable();
    out
}
