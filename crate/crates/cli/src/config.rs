//! Run configuration: one JSON document, unknown keys rejected, every block
//! optional with defaults describing the micro-torus runs.

use serde::{Deserialize, Serialize};

use blockrg::flow::SurrogateMaps;
use blockrg::rg_step::{StepControls, StepGeometry};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Global {
    pub d: usize,
    pub l: usize,
    /// `log_L` of the fine sites per side.
    pub side_exp: u32,
    /// Level of the fine lattice.
    pub k: u32,
    /// `log_L M`.
    pub m: u32,
    pub a: f64,
    pub mu_bar: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub p: u32,
    pub p0: u32,
    pub beta: f64,
    pub kappa: f64,
}

impl Default for Global {
    fn default() -> Self {
        Global {
            d: 1,
            l: 3,
            side_exp: 3,
            k: 1,
            m: 1,
            a: 20.0,
            mu_bar: 0.0,
            lambda: 1e-3,
            epsilon: 0.01,
            alpha: 0.75,
            p: 2,
            p0: 1,
            beta: 0.1,
            kappa: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Identities {
    pub samples: usize,
    pub algebra_tolerance: f64,
    pub tolerance: f64,
    pub resolvent_tolerance: f64,
    pub log_xi_tolerance: f64,
}

impl Default for Identities {
    fn default() -> Self {
        Identities { samples: 100, algebra_tolerance: 1e-13, tolerance: 1e-9, resolvent_tolerance: 1e-8, log_xi_tolerance: 1e-7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianFlow {
    pub k_max: u32,
    pub r_min: f64,
    pub r_max: f64,
    pub r_count: usize,
}

impl Default for GaussianFlow {
    fn default() -> Self {
        GaussianFlow { k_max: 64, r_min: 1e-4, r_max: 1e6, r_count: 20 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Greens {
    pub side_exp: u32,
    pub m: u32,
    pub a: f64,
    pub walk_order: usize,
    pub r_values: Vec<f64>,
    pub region_units: usize,
    /// Cubes switched off in the decoupling probe.
    pub gated_cubes: Vec<usize>,
    pub truncations: Vec<f64>,
    pub walk_tolerance: f64,
}

impl Default for Greens {
    fn default() -> Self {
        Greens {
            side_exp: 4,
            m: 2,
            a: 1.0,
            walk_order: 8,
            r_values: vec![0.0, 1.0, 10.0],
            region_units: 9,
            gated_cubes: vec![1],
            truncations: vec![1.0, 2.0, 3.0],
            walk_tolerance: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Polymers {
    pub d: usize,
    pub side_exp: u32,
    pub max_size: usize,
    pub pair_size: usize,
    pub size_weight: f64,
    pub kappa0: f64,
}

impl Default for Polymers {
    fn default() -> Self {
        Polymers { d: 2, side_exp: 2, max_size: 6, pair_size: 4, size_weight: 3.0, kappa0: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Cluster {
    pub instances: usize,
    pub max_polymers: usize,
    pub max_polymer_size: usize,
    pub atoms: usize,
    pub n_max: usize,
    /// Largest activity coefficient.
    pub activity: f64,
    pub tolerance: f64,
}

impl Default for Cluster {
    fn default() -> Self {
        Cluster { instances: 12, max_polymers: 5, max_polymer_size: 3, atoms: 3, n_max: 12, activity: 0.03, tolerance: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Step {
    pub nodes_per_site: usize,
    pub n_max: usize,
    pub walk_order: usize,
    pub fd_step: f64,
    pub sample_fields: usize,
    pub audit_samples: usize,
}

impl Default for Step {
    fn default() -> Self {
        let c = StepControls::default();
        Step {
            nodes_per_site: c.nodes_per_site,
            n_max: c.n_max,
            walk_order: c.walk_order,
            fd_step: c.fd_step,
            sample_fields: c.sample_fields,
            audit_samples: c.audit_samples,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flow {
    pub d: usize,
    pub levels: u32,
    pub lambda: f64,
    pub delta: u32,
    pub tolerance: f64,
    pub max_iter: usize,
    pub residual_tolerance: f64,
    pub surrogate: SurrogateMaps,
}

impl Default for Flow {
    fn default() -> Self {
        Flow {
            d: 3,
            levels: 20,
            lambda: 1.0,
            delta: 8,
            tolerance: 1e-15,
            max_iter: 200,
            residual_tolerance: 1e-12,
            surrogate: SurrogateMaps::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub global: Global,
    pub identities: Identities,
    pub gaussian_flow: GaussianFlow,
    pub greens: Greens,
    pub polymers: Polymers,
    pub cluster: Cluster,
    pub step: Step,
    pub flow: Flow,
}

fn ensure(ok: bool, msg: &str) -> Result<(), String> {
    if ok { Ok(()) } else { Err(msg.to_string()) }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), String> {
        let g = &self.global;
        ensure((1..=3).contains(&g.d), "global.d must be 1, 2 or 3")?;
        ensure(g.l >= 3 && g.l % 2 == 1, "global.l must be odd and at least 3")?;
        ensure(g.k >= 1 && g.k <= g.side_exp, "global.k must lie in 1..=side_exp")?;
        ensure(g.m + g.k <= g.side_exp, "global.m + global.k must not exceed side_exp")?;
        ensure(g.a > 0.0, "global.a must be positive")?;
        ensure(g.mu_bar >= 0.0, "global.mu_bar must be nonnegative")?;
        ensure(g.lambda > 0.0 && g.lambda < 1.0, "global.lambda must lie in (0, 1)")?;
        ensure(g.epsilon >= 0.0 && g.epsilon < 0.025, "global.epsilon must lie in [0, 1/40)")?;
        ensure(g.alpha > 0.0 && g.alpha < 1.0, "global.alpha must lie in (0, 1)")?;
        ensure(g.p0 < g.p, "global.p0 must be below global.p")?;
        ensure(g.beta > 0.0 && g.beta + 10.0 * g.epsilon < 0.25, "global.beta must lie in (0, 1/4 - 10 epsilon)")?;
        ensure(g.kappa > 0.0, "global.kappa must be positive")?;
        ensure(self.identities.samples > 0, "identities.samples must be positive")?;
        ensure(self.gaussian_flow.k_max >= 1, "gaussian_flow.k_max must be positive")?;
        ensure(
            self.gaussian_flow.r_min > 0.0 && self.gaussian_flow.r_max >= self.gaussian_flow.r_min && self.gaussian_flow.r_count > 0,
            "gaussian_flow r range is empty",
        )?;
        ensure(self.greens.m >= 1 && self.greens.m < self.greens.side_exp, "greens.m must lie in 1..side_exp")?;
        ensure(self.greens.r_values.iter().all(|r| *r >= 0.0), "greens.r_values must be nonnegative")?;
        ensure(self.greens.truncations.iter().all(|p| *p > 0.0), "greens.truncations must be positive")?;
        ensure((1..=3).contains(&self.polymers.d), "polymers.d must be 1, 2 or 3")?;
        ensure(self.polymers.max_size >= 1 && self.polymers.pair_size <= self.polymers.max_size, "polymers sizes out of range")?;
        ensure(self.cluster.atoms >= 2, "cluster.atoms must be at least 2")?;
        ensure(self.cluster.max_polymers >= 1 && self.cluster.max_polymer_size >= 1, "cluster sizes must be positive")?;
        ensure(self.cluster.activity > 0.0, "cluster.activity must be positive")?;
        ensure(self.step.nodes_per_site >= 1 && self.step.n_max >= 1, "step node count and order must be positive")?;
        ensure(self.step.fd_step > 0.0, "step.fd_step must be positive")?;
        ensure((1..=3).contains(&self.flow.d), "flow.d must be 1, 2 or 3")?;
        ensure(self.flow.lambda > 0.0, "flow.lambda must be positive")?;
        ensure(self.flow.max_iter > 0, "flow.max_iter must be positive")?;
        Ok(())
    }

    pub fn step_geometry(&self) -> StepGeometry {
        let g = &self.global;
        StepGeometry { d: g.d, l: g.l, side_exp: g.side_exp, m: g.m, a: g.a, mu_bar: g.mu_bar }
    }

    pub fn step_controls(&self) -> StepControls {
        let (g, s) = (&self.global, &self.step);
        StepControls {
            nodes_per_site: s.nodes_per_site,
            n_max: s.n_max,
            walk_order: s.walk_order,
            kappa: g.kappa,
            epsilon: g.epsilon,
            alpha: g.alpha,
            p: g.p,
            p0: g.p0,
            fd_step: s.fd_step,
            sample_fields: s.sample_fields,
            audit_samples: s.audit_samples,
            seed: self.seed,
        }
    }
}
