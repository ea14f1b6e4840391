//! Explicit upwind simulators on directed graphs.
//!
//! Two steppers share the difference operators from [`crate::diffops`]:
//! the simplified momentum equation for river velocity,
//! `u' = u - dt * (u (D1 u) + g (D1 z))`, and the mass-conservation update
//! for traffic density, `rho' = rho - dt * (u (D1 rho) + rho (D1 u))`.
//! Both preserve spatially constant states exactly and reduce to an exact
//! one-node shift at unit CFL on a ring.
//!
//! [`simulate`] drives a stepper over many steps, applies boundary forcing,
//! and emits the node series / target files the training harness consumes.
//! [`reverse_reconstruction_demo`] runs linear advection forward on a ring,
//! perturbs the final state with white noise, and reconstructs the initial
//! state by inverting the upwind update step by step; the inversion is exact
//! at unit CFL and anti-diffusive below it, so the report shows how the
//! backward problem amplifies high-frequency noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffops::{build_base_difference, build_d1, DifferenceOperator, OperatorKind};
use crate::error::{Error, Result};
use crate::graph::{DirectedGraph, NodeSeries, Targets};

/// Per-node river state: velocity and static bed elevation.
#[derive(Debug, Clone, PartialEq)]
pub struct RiverState {
    pub u: Vec<f64>,
    pub z: Vec<f64>,
    pub g_const: f64,
}

impl RiverState {
    pub fn new(u: Vec<f64>, z: Vec<f64>, g_const: f64) -> Result<Self> {
        if u.len() != z.len() {
            return Err(Error::Shape(format!(
                "velocity over {} nodes but elevation over {}",
                u.len(),
                z.len()
            )));
        }
        if !(g_const.is_finite() && g_const > 0.0) {
            return Err(Error::Value(format!("gravitational constant {g_const}")));
        }
        if u.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Value("non-finite river state".into()));
        }
        Ok(Self { u, z, g_const })
    }
}

/// Per-node traffic state: density and velocity.
#[derive(Debug, Clone, PartialEq)]
pub struct TrafficState {
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
}

impl TrafficState {
    pub fn new(rho: Vec<f64>, u: Vec<f64>) -> Result<Self> {
        if rho.len() != u.len() {
            return Err(Error::Shape(format!(
                "density over {} nodes but velocity over {}",
                rho.len(),
                u.len()
            )));
        }
        if rho.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Value("negative or non-finite density".into()));
        }
        if u.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Value("negative or non-finite velocity".into()));
        }
        Ok(Self { rho, u })
    }
}

/// Relaxation of traffic velocity toward the free-flow profile
/// `u_free * (1 - rho / rho_max)` with time constant `tau`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficClosure {
    pub u_free: f64,
    pub rho_max: f64,
    pub tau: f64,
}

/// Time and space discretization shared by all steppers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    /// Uniform spatial step applied to every edge.
    pub dx: f64,
    pub steps: usize,
    /// Viscosity coefficient; 0 disables the smoothing term.
    #[serde(default)]
    pub nu: f64,
    /// Observation-noise standard deviation added to emitted series only.
    #[serde(default)]
    pub noise_sigma: f64,
    /// Velocity closure for the traffic stepper; `None` keeps u frozen.
    #[serde(default)]
    pub closure: Option<TrafficClosure>,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::Value(format!("dt {}", self.dt)));
        }
        if !(self.dx.is_finite() && self.dx > 0.0) {
            return Err(Error::Value(format!("dx {}", self.dx)));
        }
        if self.steps == 0 {
            return Err(Error::Value("steps must be at least 1".into()));
        }
        if !(self.nu.is_finite() && self.nu >= 0.0) {
            return Err(Error::Value(format!("nu {}", self.nu)));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Value(format!("noise_sigma {}", self.noise_sigma)));
        }
        if let Some(c) = &self.closure {
            if c.tau <= 0.0 || c.rho_max <= 0.0 || c.u_free < 0.0 {
                return Err(Error::Value("invalid traffic closure".into()));
            }
        }
        Ok(())
    }

    fn d1(&self, g: &DirectedGraph) -> DifferenceOperator {
        build_d1(g, &vec![self.dx; g.num_edges()]).expect("uniform positive dx")
    }
}

fn check_finite(values: &[f64], step: usize, what: &str) -> Result<()> {
    if values.iter().any(|v| !v.is_finite()) {
        Err(Error::Instability {
            step,
            detail: format!("non-finite {what}"),
        })
    } else {
        Ok(())
    }
}

/// CFL number `dt/dx * max|speed|` of a state under a config.
pub fn cfl_number(max_speed: f64, cfg: &SimConfig) -> f64 {
    cfg.dt / cfg.dx * max_speed
}

fn max_abs(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
}

/// One explicit step of the simplified momentum equation.
pub fn step_sv(state: &RiverState, g: &DirectedGraph, cfg: &SimConfig) -> Result<RiverState> {
    step_sv_at(state, &cfg.d1(g), cfg, 0)
}

fn step_sv_at(
    state: &RiverState,
    d1: &DifferenceOperator,
    cfg: &SimConfig,
    step: usize,
) -> Result<RiverState> {
    let du = d1.apply(&state.u)?;
    let dz = d1.apply(&state.z)?;
    let u: Vec<f64> = state
        .u
        .iter()
        .zip(du.iter().zip(&dz))
        .map(|(u, (du, dz))| u - cfg.dt * (u * du + state.g_const * dz))
        .collect();
    check_finite(&u, step, "velocity")?;
    Ok(RiverState {
        u,
        z: state.z.clone(),
        g_const: state.g_const,
    })
}

/// One explicit step of the mass-conservation equation, with optional
/// velocity relaxation and density clamped at zero.
pub fn step_ar(state: &TrafficState, g: &DirectedGraph, cfg: &SimConfig) -> Result<TrafficState> {
    step_ar_at(state, &cfg.d1(g), cfg, 0)
}

fn step_ar_at(
    state: &TrafficState,
    d1: &DifferenceOperator,
    cfg: &SimConfig,
    step: usize,
) -> Result<TrafficState> {
    let drho = d1.apply(&state.rho)?;
    let du = d1.apply(&state.u)?;
    let rho: Vec<f64> = state
        .rho
        .iter()
        .zip(state.u.iter())
        .zip(drho.iter().zip(&du))
        .map(|((rho, u), (drho, du))| (rho - cfg.dt * (u * drho + rho * du)).max(0.0))
        .collect();
    check_finite(&rho, step, "density")?;
    let u = match &cfg.closure {
        None => state.u.clone(),
        Some(c) => {
            let u: Vec<f64> = state
                .u
                .iter()
                .zip(&rho)
                .map(|(u, rho)| {
                    let target = c.u_free * (1.0 - rho / c.rho_max);
                    (u + cfg.dt / c.tau * (target - u)).max(0.0)
                })
                .collect();
            check_finite(&u, step, "velocity")?;
            u
        }
    };
    Ok(TrafficState { rho, u })
}

/// Second-difference smoothing stencil: -s on the diagonal where s is the
/// number of neighbor sides present, +1 averaged over each side. Constant
/// fields are annihilated.
pub fn build_second_difference(g: &DirectedGraph) -> DifferenceOperator {
    let n = g.num_nodes();
    let mut entries = Vec::new();
    for i in 0..n {
        let ups = g.upstream_neighbors(i).expect("valid node");
        let downs = g.downstream_neighbors(i).expect("valid node");
        let mut diag = 0.0;
        for side in [ups, downs] {
            if side.is_empty() {
                continue;
            }
            let w = 1.0 / side.len() as f64;
            for &(j, _) in side {
                entries.push((i, j, w));
                diag -= w;
            }
        }
        if diag != 0.0 {
            entries.push((i, i, diag));
        }
    }
    entries.sort_unstable_by_key(|&(r, c, _)| (r, c));
    DifferenceOperator::from_raw(n, entries, OperatorKind::Second)
}

/// Momentum step plus the smoothing term `(dt/dx) * nu * (L u)`.
/// With `nu = 0` this is exactly [`step_sv`].
pub fn step_sv_viscous(
    state: &RiverState,
    g: &DirectedGraph,
    cfg: &SimConfig,
) -> Result<RiverState> {
    if cfg.nu == 0.0 {
        return step_sv(state, g, cfg);
    }
    let lap = build_second_difference(g);
    let lu = lap.apply(&state.u)?;
    let mut next = step_sv_at(state, &cfg.d1(g), cfg, 0)?;
    let alpha = cfg.dt / cfg.dx;
    for (u, l) in next.u.iter_mut().zip(&lu) {
        *u += alpha * cfg.nu * l;
    }
    check_finite(&next.u, 0, "velocity")?;
    Ok(next)
}

/// River state for the extended momentum mode: discharge, static depth and
/// elevation, and a friction coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedRiverState {
    pub q: Vec<f64>,
    pub h: Vec<f64>,
    pub z: Vec<f64>,
    pub manning_n: f64,
    pub g_const: f64,
}

/// One step of the full momentum balance with inertial flux, elevation and
/// friction terms. Depth is held static; this mode exists for exploration
/// and is not part of the standard data generator.
pub fn step_sv_extended(
    state: &ExtendedRiverState,
    g: &DirectedGraph,
    cfg: &SimConfig,
) -> Result<ExtendedRiverState> {
    if state.h.iter().any(|h| *h <= 0.0) {
        return Err(Error::Value("water depth must be positive".into()));
    }
    let d1 = cfg.d1(g);
    let flux: Vec<f64> = state
        .q
        .iter()
        .zip(&state.h)
        .map(|(q, h)| q * q / h + 0.5 * state.g_const * h * h)
        .collect();
    let dflux = d1.apply(&flux)?;
    let dz = d1.apply(&state.z)?;
    let q: Vec<f64> = state
        .q
        .iter()
        .zip(&state.h)
        .zip(dflux.iter().zip(&dz))
        .map(|((q, h), (dflux, dz))| {
            let friction = state.g_const * state.manning_n * state.manning_n * q * q.abs()
                / h.powf(4.0 / 3.0);
            q - cfg.dt * (dflux + state.g_const * h * dz + friction)
        })
        .collect();
    check_finite(&q, 0, "discharge")?;
    Ok(ExtendedRiverState {
        q,
        h: state.h.clone(),
        z: state.z.clone(),
        manning_n: state.manning_n,
        g_const: state.g_const,
    })
}

/// Dirichlet boundary forcing: before every step, the flux variable at
/// `node` is set to `base + amplitude * sin(2*pi*step/period + phase)`,
/// plus an optional piecewise-constant random gust resampled every
/// `gust_period` steps. Gusts inject the rapid local changes that make
/// upstream observations informative downstream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryForcing {
    pub node: String,
    pub base: f64,
    #[serde(default)]
    pub amplitude: f64,
    #[serde(default = "default_period")]
    pub period: f64,
    #[serde(default)]
    pub phase: f64,
    /// Uniform half-width of the gust levels; 0 disables gusts.
    #[serde(default)]
    pub gust_amplitude: f64,
    /// Steps between gust-level changes.
    #[serde(default = "default_gust_period")]
    pub gust_period: usize,
}

fn default_period() -> f64 {
    50.0
}

fn default_gust_period() -> usize {
    8
}

impl BoundaryForcing {
    fn value(&self, step: usize, gusts: &[f64]) -> f64 {
        let gust = if gusts.is_empty() {
            0.0
        } else {
            gusts[(step / self.gust_period.max(1)) % gusts.len()]
        };
        self.base
            + self.amplitude
                * (2.0 * std::f64::consts::PI * step as f64 / self.period + self.phase).sin()
            + gust
    }

    fn sample_gusts(&self, steps: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
        if self.gust_amplitude == 0.0 {
            return Vec::new();
        }
        let count = steps / self.gust_period.max(1) + 1;
        (0..count)
            .map(|_| rng.random_range(-self.gust_amplitude..self.gust_amplitude))
            .collect()
    }
}

/// Initial condition for [`simulate`].
#[derive(Debug, Clone)]
pub enum InitialState {
    River(RiverState),
    Traffic(TrafficState),
}

/// Trajectory emitted as a dataset plus bookkeeping for the manifest.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// Observed variables per step: `(u, z)` for rivers, `(rho, u)` for
    /// traffic. Observation noise applies here.
    pub series: NodeSeries,
    /// Clean flux variable per step: velocity for rivers, density for
    /// traffic.
    pub targets: Targets,
    pub cfl_max: f64,
    pub cfl_violations: usize,
}

/// Run a stepper for `cfg.steps` steps, applying boundary forcing before
/// each step. CFL violations are recorded, not fatal; instability aborts
/// with the offending step index.
pub fn simulate(
    initial: &InitialState,
    g: &DirectedGraph,
    cfg: &SimConfig,
    forcing: &[BoundaryForcing],
    seed: u64,
) -> Result<SimOutput> {
    cfg.validate()?;
    let n = g.num_nodes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let forced: Vec<(usize, &BoundaryForcing, Vec<f64>)> = forcing
        .iter()
        .map(|f| {
            g.node_index(&f.node)
                .map(|i| (i, f, f.sample_gusts(cfg.steps, &mut rng)))
                .ok_or_else(|| Error::Value(format!("forcing on unknown node '{}'", f.node)))
        })
        .collect::<Result<_>>()?;
    let d1 = cfg.d1(g);

    let mut series = vec![0.0; cfg.steps * n * 2];
    let mut targets = vec![0.0; cfg.steps * n];
    let mut cfl_max: f64 = 0.0;
    let mut cfl_violations = 0usize;

    let mut record = |step: usize, primary: &[f64], secondary: &[f64]| {
        for i in 0..n {
            series[(step * n + i) * 2] = primary[i];
            series[(step * n + i) * 2 + 1] = secondary[i];
            targets[step * n + i] = primary[i];
        }
    };

    match initial {
        InitialState::River(state0) => {
            let mut state = state0.clone();
            for step in 0..cfg.steps {
                for (i, f, gusts) in &forced {
                    state.u[*i] = f.value(step, gusts);
                }
                let cfl = cfl_number(max_abs(&state.u), cfg);
                cfl_max = cfl_max.max(cfl);
                if cfl > 1.0 {
                    cfl_violations += 1;
                }
                state = if cfg.nu == 0.0 {
                    step_sv_at(&state, &d1, cfg, step)?
                } else {
                    relabel_step(step_sv_viscous(&state, g, cfg), step)?
                };
                record(step, &state.u, &state.z);
            }
        }
        InitialState::Traffic(state0) => {
            let mut state = state0.clone();
            for step in 0..cfg.steps {
                for (i, f, gusts) in &forced {
                    state.rho[*i] = f.value(step, gusts).max(0.0);
                }
                let cfl = cfl_number(max_abs(&state.u), cfg);
                cfl_max = cfl_max.max(cfl);
                if cfl > 1.0 {
                    cfl_violations += 1;
                }
                state = step_ar_at(&state, &d1, cfg, step)?;
                record(step, &state.rho, &state.u);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma)
            .map_err(|e| Error::Value(format!("noise distribution: {e}")))?;
        for v in series.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    Ok(SimOutput {
        series: NodeSeries::new(cfg.steps, n, 2, series)?,
        targets: Targets::new(cfg.steps, n, targets)?,
        cfl_max,
        cfl_violations,
    })
}

fn relabel_step(result: Result<RiverState>, step: usize) -> Result<RiverState> {
    result.map_err(|e| match e {
        Error::Instability { detail, .. } => Error::Instability { step, detail },
        other => other,
    })
}

/// Outcome of the backward-reconstruction experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReconstructionReport {
    /// `||reconstruction - truth|| / (sigma * sqrt(n))`, or the raw error
    /// norm when `sigma = 0`.
    pub growth_factor: f64,
    pub error_norm: f64,
    pub sigma: f64,
    pub steps: usize,
    pub cfl: f64,
    /// Residual DFT magnitude per frequency bin `omega = 2*pi*k/n`,
    /// `k = 0..n/2`.
    pub spectrum: Vec<FrequencyBin>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FrequencyBin {
    pub omega: f64,
    pub magnitude: f64,
}

impl ReconstructionReport {
    /// Total squared magnitude in bins with `omega > pi/2` versus the rest.
    pub fn energy_split(&self) -> (f64, f64) {
        let half = std::f64::consts::FRAC_PI_2;
        let mut high = 0.0;
        let mut low = 0.0;
        for bin in &self.spectrum {
            if bin.omega > half {
                high += bin.magnitude * bin.magnitude;
            } else {
                low += bin.magnitude * bin.magnitude;
            }
        }
        (high, low)
    }
}

/// Forward linear advection on a directed ring, white noise at the final
/// time, then step-by-step inversion of the upwind update back to t = 0.
///
/// Each backward step solves `(I - beta * D) x = u_next`, the exact inverse
/// of the forward update with `beta = dt/dx` (advection speed 1). At unit
/// CFL the forward map is a pure shift and the inversion is exact; below it
/// the inverse amplifies high frequencies by `1/|1 - beta(1 - e^{-jw})|`
/// per step, which is the instability the report quantifies.
pub fn reverse_reconstruction_demo(
    g: &DirectedGraph,
    cfg: &SimConfig,
    noise_sigma: f64,
    seed: u64,
) -> Result<ReconstructionReport> {
    cfg.validate()?;
    let n = g.num_nodes();
    require_ring(g)?;
    let beta = cfg.dt / cfg.dx;
    if !(0.0 < beta && beta <= 1.0) {
        return Err(Error::Precondition(format!(
            "advection CFL {beta} outside (0, 1]"
        )));
    }
    if !(noise_sigma.is_finite() && noise_sigma >= 0.0) {
        return Err(Error::Value(format!("noise sigma {noise_sigma}")));
    }

    let d = build_base_difference(g);
    let truth: Vec<f64> = (0..n)
        .map(|i| {
            let x = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
            1.0 + 0.6 * x.sin() + 0.3 * (2.0 * x + 0.5).sin()
        })
        .collect();

    // forward: u <- u - beta * D u
    let mut u = truth.clone();
    for step in 0..cfg.steps {
        let du = d.apply(&u)?;
        for (v, dv) in u.iter_mut().zip(&du) {
            *v -= beta * dv;
        }
        check_finite(&u, step, "advected state")?;
    }

    if noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, noise_sigma)
            .map_err(|e| Error::Value(format!("noise distribution: {e}")))?;
        for v in u.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }

    // backward: solve (I - beta D) x = u, repeatedly
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        a[i * n + i] = 1.0;
    }
    for &(r, c, v) in d.entries() {
        a[r * n + c] -= beta * v;
    }
    let lu = LuFactors::new(a, n)?;
    for _ in 0..cfg.steps {
        u = lu.solve(&u);
    }

    let residual: Vec<f64> = u.iter().zip(&truth).map(|(r, t)| r - t).collect();
    let error_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    let growth_factor = if noise_sigma > 0.0 {
        error_norm / (noise_sigma * (n as f64).sqrt())
    } else {
        error_norm
    };

    Ok(ReconstructionReport {
        growth_factor,
        error_norm,
        sigma: noise_sigma,
        steps: cfg.steps,
        cfl: beta,
        spectrum: residual_spectrum(&residual),
    })
}

fn require_ring(g: &DirectedGraph) -> Result<()> {
    if g.num_edges() != g.num_nodes() {
        return Err(Error::Precondition(
            "reconstruction demo requires a directed ring".into(),
        ));
    }
    for i in 0..g.num_nodes() {
        if g.upstream_neighbors(i)?.len() != 1 || g.downstream_neighbors(i)?.len() != 1 {
            return Err(Error::Precondition(
                "reconstruction demo requires a directed ring".into(),
            ));
        }
    }
    Ok(())
}

/// DFT magnitudes of a real signal for bins `k = 0..n/2`.
pub fn residual_spectrum(signal: &[f64]) -> Vec<FrequencyBin> {
    let n = signal.len();
    (0..=n / 2)
        .map(|k| {
            let omega = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            let (mut re, mut im) = (0.0, 0.0);
            for (m, v) in signal.iter().enumerate() {
                let angle = omega * m as f64;
                re += v * angle.cos();
                im -= v * angle.sin();
            }
            FrequencyBin {
                omega,
                magnitude: (re * re + im * im).sqrt(),
            }
        })
        .collect()
}

/// Dense LU with partial pivoting; factored once, solved many times.
struct LuFactors {
    lu: Vec<f64>,
    piv: Vec<usize>,
    n: usize,
}

impl LuFactors {
    fn new(mut a: Vec<f64>, n: usize) -> Result<Self> {
        let mut piv: Vec<usize> = (0..n).collect();
        for col in 0..n {
            let mut best = col;
            let mut best_abs = a[col * n + col].abs();
            for row in col + 1..n {
                let v = a[row * n + col].abs();
                if v > best_abs {
                    best = row;
                    best_abs = v;
                }
            }
            if best_abs < 1e-300 {
                return Err(Error::Value(
                    "singular backward-step matrix (CFL too close to 0.5?)".into(),
                ));
            }
            if best != col {
                for k in 0..n {
                    a.swap(col * n + k, best * n + k);
                }
                piv.swap(col, best);
            }
            let pivot = a[col * n + col];
            for row in col + 1..n {
                let factor = a[row * n + col] / pivot;
                a[row * n + col] = factor;
                for k in col + 1..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
            }
        }
        Ok(Self { lu: a, piv, n })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.piv.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for k in 0..i {
                x[i] -= self.lu[i * n + k] * x[k];
            }
        }
        for i in (0..n).rev() {
            for k in i + 1..n {
                x[i] -= self.lu[i * n + k] * x[k];
            }
            x[i] /= self.lu[i * n + i];
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::directed_ring;

    fn path(n: usize) -> DirectedGraph {
        let labels: Vec<String> = (0..n).map(|i| format!("n{i:02}")).collect();
        let edges: Vec<(String, String)> = (0..n - 1)
            .map(|i| (labels[i].clone(), labels[i + 1].clone()))
            .collect();
        DirectedGraph::from_parts(&labels, &edges, &vec![vec![1.0]; n - 1]).unwrap()
    }

    fn cfg(dt: f64, dx: f64, steps: usize) -> SimConfig {
        SimConfig {
            dt,
            dx,
            steps,
            nu: 0.0,
            noise_sigma: 0.0,
            closure: None,
        }
    }

    #[test]
    fn river_constant_state_is_fixed_point() {
        let g = path(6);
        let state = RiverState::new(vec![1.3; 6], vec![4.0; 6], 9.81).unwrap();
        let next = step_sv(&state, &g, &cfg(0.1, 1.0, 1)).unwrap();
        for (a, b) in next.u.iter().zip(&state.u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn river_rest_state_is_fixed_point() {
        let g = path(5);
        let state = RiverState::new(vec![0.0; 5], vec![0.0; 5], 9.81).unwrap();
        let next = step_sv(&state, &g, &cfg(0.05, 1.0, 1)).unwrap();
        assert!(next.u.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn river_slope_acceleration_hand_computed() {
        // interior nodes: u' = 1 - 0.1 * (1*0 + 9.81 * (-0.1)) = 1.0981
        let g = path(8);
        let z: Vec<f64> = (0..8).map(|i| -0.1 * i as f64).collect();
        let state = RiverState::new(vec![1.0; 8], z.clone(), 9.81).unwrap();
        let next = step_sv(&state, &g, &cfg(0.1, 1.0, 1)).unwrap();
        for i in 1..8 {
            assert!((next.u[i] - 1.0981).abs() < 1e-12, "node {i}: {}", next.u[i]);
        }
        // dense oracle over the full update
        let d1 = build_d1(&g, &vec![1.0; 7]).unwrap();
        let dense = d1.to_dense();
        for i in 0..8 {
            let du: f64 = (0..8).map(|j| dense[i][j] * state.u[j]).sum();
            let dz: f64 = (0..8).map(|j| dense[i][j] * z[j]).sum();
            let expect = state.u[i] - 0.1 * (state.u[i] * du + 9.81 * dz);
            assert!((next.u[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn traffic_constant_and_zero_velocity_fixed_points() {
        let g = path(6);
        let state = TrafficState::new(vec![0.7; 6], vec![1.1; 6]).unwrap();
        let next = step_ar(&state, &g, &cfg(0.1, 1.0, 1)).unwrap();
        for (a, b) in next.rho.iter().zip(&state.rho) {
            assert!((a - b).abs() < 1e-12);
        }

        let state = TrafficState::new(vec![0.3, 0.9, 0.1, 0.5, 0.2, 0.4], vec![0.0; 6]).unwrap();
        let next = step_ar(&state, &g, &cfg(0.1, 1.0, 1)).unwrap();
        assert_eq!(next.rho, state.rho);
    }

    #[test]
    fn traffic_unit_cfl_is_exact_shift() {
        let g = directed_ring(6);
        let rho = vec![1.0, 2.0, 1.0, 1.0, 1.0, 1.0];
        let state = TrafficState::new(rho.clone(), vec![1.0; 6]).unwrap();
        let next = step_ar(&state, &g, &cfg(1.0, 1.0, 1)).unwrap();
        for i in 0..6 {
            assert_eq!(next.rho[i], rho[(i + 5) % 6], "node {i}");
        }
    }

    #[test]
    fn viscous_zero_nu_bitwise_equals_inviscid() {
        let g = path(7);
        let z: Vec<f64> = (0..7).map(|i| 1.0 - 0.2 * i as f64).collect();
        let u: Vec<f64> = (0..7).map(|i| 0.5 + 0.1 * (i as f64).sin()).collect();
        let state = RiverState::new(u, z, 9.81).unwrap();
        let c = cfg(0.05, 1.0, 1);
        let inviscid = step_sv(&state, &g, &c).unwrap();
        let viscous = step_sv_viscous(&state, &g, &c).unwrap();
        for (a, b) in inviscid.u.iter().zip(&viscous.u) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn viscous_constant_state_unchanged() {
        let g = path(6);
        let state = RiverState::new(vec![0.8; 6], vec![2.0; 6], 9.81).unwrap();
        let mut c = cfg(0.05, 1.0, 1);
        c.nu = 0.4;
        let next = step_sv_viscous(&state, &g, &c).unwrap();
        for (a, b) in next.u.iter().zip(&state.u) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn viscous_spike_decays_monotonically() {
        let g = path(24);
        let mut u = vec![0.2; 24];
        u[12] = 1.0;
        let state = RiverState::new(u, vec![0.0; 24], 9.81).unwrap();
        let mut c = cfg(0.2, 1.0, 1);
        c.nu = 0.3;
        let mut state = state;
        let mut prev_max = 1.0;
        for _ in 0..20 {
            state = step_sv_viscous(&state, &g, &c).unwrap();
            let max = state.u.iter().cloned().fold(f64::MIN, f64::max);
            assert!(max < prev_max + 1e-12);
            prev_max = max;
        }
    }

    #[test]
    fn second_difference_annihilates_constants() {
        let g = DirectedGraph::from_parts(
            &["a".into(), "b".into(), "c".into(), "d".into()],
            &[
                ("a".into(), "c".into()),
                ("b".into(), "c".into()),
                ("c".into(), "d".into()),
            ],
            &vec![vec![1.0]; 3],
        )
        .unwrap();
        let lap = build_second_difference(&g);
        let out = lap.apply(&vec![2.5; 4]).unwrap();
        assert!(out.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn extended_friction_decays_discharge() {
        let g = path(6);
        let state = ExtendedRiverState {
            q: vec![1.0; 6],
            h: vec![2.0; 6],
            z: vec![0.0; 6],
            manning_n: 0.05,
            g_const: 9.81,
        };
        let next = step_sv_extended(&state, &g, &cfg(0.05, 1.0, 1)).unwrap();
        for (a, b) in next.q.iter().zip(&state.q) {
            assert!(a < b);
        }
        // rest state stays at rest
        let rest = ExtendedRiverState {
            q: vec![0.0; 6],
            ..state
        };
        let next = step_sv_extended(&rest, &g, &cfg(0.05, 1.0, 1)).unwrap();
        assert!(next.q.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulate_single_step_and_rest_state() {
        let g = path(4);
        let state = RiverState::new(vec![0.0; 4], vec![0.0; 4], 9.81).unwrap();
        let out = simulate(
            &InitialState::River(state),
            &g,
            &cfg(0.1, 1.0, 1),
            &[],
            7,
        )
        .unwrap();
        assert_eq!(out.series.steps(), 1);
        assert!(out.targets.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulate_forced_tree_stays_bounded() {
        // all headwaters held by inflow conditions, as in the preset;
        // unforced headwaters would decelerate until the upwind direction
        // no longer matches the flow and the scheme blows up
        let preset = crate::presets::river_small(2000);
        let out = simulate(&preset.initial, &preset.graph, &preset.sim, &preset.forcing, 11)
            .unwrap();
        let max = out
            .targets
            .values()
            .iter()
            .fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(max.is_finite());
        assert!(max < 15.0, "max |u| = {max}"); // 10x the forcing peak
        assert!(out.cfl_max <= 1.0, "cfl {}", out.cfl_max);
    }

    #[test]
    fn simulate_is_deterministic_per_seed() {
        let g = path(5);
        let state = TrafficState::new(vec![0.5; 5], vec![1.0; 5]).unwrap();
        let mut c = cfg(0.2, 1.0, 50);
        c.noise_sigma = 0.05;
        c.closure = Some(TrafficClosure {
            u_free: 1.0,
            rho_max: 2.0,
            tau: 5.0,
        });
        let a = simulate(&InitialState::Traffic(state.clone()), &g, &c, &[], 3).unwrap();
        let b = simulate(&InitialState::Traffic(state.clone()), &g, &c, &[], 3).unwrap();
        assert_eq!(a.series, b.series);
        let c2 = simulate(&InitialState::Traffic(state), &g, &c, &[], 4).unwrap();
        assert_ne!(a.series, c2.series);
    }

    #[test]
    fn stability_envelope_over_seeded_runs() {
        use rand::Rng;
        let g = path(10);
        for seed in 0..50u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u0: Vec<f64> = (0..10).map(|_| rng.random_range(0.0..2.0)).collect();
            let envelope = u0.iter().cloned().fold(0.0f64, f64::max);
            let mut state = RiverState::new(u0, vec![0.0; 10], 9.81).unwrap();
            let c = cfg(0.4, 1.0, 1); // cfl <= 0.8
            for _ in 0..40 {
                state = step_sv(&state, &g, &c).unwrap();
                let max = state.u.iter().cloned().fold(0.0f64, f64::max);
                assert!(max <= envelope + 1e-12, "seed {seed}: {max} > {envelope}");
            }
        }
    }

    #[test]
    fn reconstruction_exact_at_unit_cfl_without_noise() {
        let g = directed_ring(64);
        let report =
            reverse_reconstruction_demo(&g, &cfg(1.0, 1.0, 200), 0.0, 5).unwrap();
        assert!(report.growth_factor < 1e-10, "{}", report.growth_factor);
    }

    #[test]
    fn reconstruction_amplifies_noise_below_unit_cfl() {
        let g = directed_ring(64);
        let report =
            reverse_reconstruction_demo(&g, &cfg(0.95, 1.0, 200), 0.01, 5).unwrap();
        assert!(report.growth_factor > 1.0, "{}", report.growth_factor);
        let (high, low) = report.energy_split();
        assert!(high > low, "high {high} vs low {low}");
        let near_zero = report.spectrum[1].magnitude;
        let near_pi = report.spectrum.last().unwrap().magnitude;
        assert!(near_pi > near_zero);
    }

    #[test]
    fn reconstruction_requires_a_ring() {
        let g = path(8);
        assert!(matches!(
            reverse_reconstruction_demo(&g, &cfg(0.9, 1.0, 10), 0.0, 1),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn instability_reports_step_index() {
        let g = path(4);
        // huge dt blows up the advection term within a few steps
        let state = RiverState::new(vec![0.0, 5.0, 0.0, 0.0], vec![0.0; 4], 9.81).unwrap();
        let out = simulate(
            &InitialState::River(state),
            &g,
            &cfg(40.0, 1.0, 400),
            &[],
            1,
        );
        match out {
            Err(Error::Instability { step, .. }) => assert!(step > 0),
            other => panic!("expected instability, got {other:?}"),
        }
    }
}
