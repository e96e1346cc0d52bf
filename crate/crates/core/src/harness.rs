//! Experiments on top of the simulators: full-versus-averaged comparisons,
//! boundary-layer decay fits, convergence sweeps over ω and practical
//! stability probes.
//!
//! Every run is sequential and deterministic. Independent runs of a sweep or
//! probe go through rayon and are collected back in input order, so reports
//! do not depend on scheduling.

use std::sync::Arc;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::averaging::AveragedField;
use crate::error::{Error, Result};
use crate::numkit::{integrate_rk4_with, linear_fit, TimeGrid, Vector};
use crate::seeker::{AveragedSeeker, AveragedSeekerState, ScalarField, SeekerSystem};
use crate::so3::Rotation;
use crate::system::{eigenvalue_real_parts, OscillatorySystemSpec, SlowFastSystem};

/// Fraction of the initial boundary-layer norm that ends the fit window.
pub const TRANSIENT_CUTOFF: f64 = 0.05;
/// Minimum number of samples in a decay fit.
pub const MIN_FIT_SAMPLES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    /// Full-system steps per fast period `T/ω`.
    #[serde(default = "default_steps")]
    pub steps_per_fast_period: usize,
    /// Step of the averaged system.
    #[serde(default = "default_averaged_dt")]
    pub averaged_dt: f64,
    /// Keep every `stride`-th full step (the last node is always kept).
    #[serde(default = "default_stride")]
    pub stride: usize,
}

fn default_steps() -> usize {
    200
}

fn default_averaged_dt() -> f64 {
    1e-3
}

fn default_stride() -> usize {
    1
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { steps_per_fast_period: default_steps(), averaged_dt: default_averaged_dt(), stride: default_stride() }
    }
}

impl RunOptions {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_fast_period < 1 {
            return Err(Error::Config("steps_per_fast_period must be positive".into()));
        }
        if !(self.averaged_dt.is_finite() && self.averaged_dt > 0.0) {
            return Err(Error::Config(format!("averaged_dt must be positive, got {}", self.averaged_dt)));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be positive".into()));
        }
        Ok(())
    }
}

/// Shared initial data of a comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareInit {
    pub x0: Vec<f64>,
    pub y0: Vec<f64>,
    pub t0: f64,
}

impl CompareInit {
    pub fn new(x0: &Vector, y0: &Vector, t0: f64) -> Self {
        Self { x0: x0.as_slice().to_vec(), y0: y0.as_slice().to_vec(), t0 }
    }

    /// `y₀ = φ₀(x₀)`.
    pub fn quasi_steady(system: &dyn SlowFastSystem, x0: &Vector, t0: f64) -> Self {
        Self::new(x0, &system.quasi_steady(x0), t0)
    }

    fn stacked(&self) -> Vector {
        Vector::from_iterator(self.x0.len() + self.y0.len(), self.x0.iter().chain(&self.y0).copied())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    Diverged { time: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySample {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
}

/// A full-system run, optionally compared against an averaged trajectory.
///
/// All series are aligned with `samples`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub omega: f64,
    pub horizon: f64,
    pub dt: f64,
    pub init: CompareInit,
    pub options: RunOptions,
    pub status: RunStatus,
    pub samples: Vec<TrajectorySample>,
    /// `‖x(t) − x̄(t)‖`
    pub x_deviation: Option<Vec<f64>>,
    /// `‖y(t) − φ₀(x(t))‖`
    pub z_norm: Vec<f64>,
    pub lyapunov: Option<Vec<f64>>,
    pub manifold_residual: Option<Vec<f64>>,
    /// Sup of `‖x − x̄‖` over every full step, not just the kept samples.
    pub sup_x_deviation: Option<f64>,
    pub max_manifold_residual: Option<f64>,
}

impl RunRecord {
    pub fn completed(&self) -> bool {
        self.status == RunStatus::Completed
    }

    pub fn times(&self) -> Vec<f64> {
        self.samples.iter().map(|s| s.t).collect()
    }
}

/// Linear interpolation in a uniformly spaced trajectory.
struct Uniform {
    t0: f64,
    dt: f64,
    nodes: Vec<Vector>,
}

impl Uniform {
    fn at(&self, t: f64) -> Option<Vector> {
        let s = (t - self.t0) / self.dt;
        let last = self.nodes.len().checked_sub(1)?;
        if s < -1e-9 || s > last as f64 + 1e-9 {
            return None;
        }
        let k = (s.floor().max(0.0) as usize).min(last.saturating_sub(1));
        if last == 0 {
            return Some(self.nodes[0].clone());
        }
        let w = (s - k as f64).clamp(0.0, 1.0);
        Some(&self.nodes[k] * (1.0 - w) + &self.nodes[k + 1] * w)
    }
}

fn is_breakdown(e: &Error) -> bool {
    matches!(e, Error::Divergence { .. } | Error::Projection(_) | Error::NonFinite(_) | Error::Manifold { .. })
}

fn integrate_averaged(averaged: &dyn AveragedField, x0: &Vector, t0: f64, horizon: f64, dt: f64) -> Result<(Uniform, Option<f64>)> {
    let grid = TimeGrid::covering(t0, horizon, dt)?;
    let mut nodes = Vec::with_capacity(grid.n_steps() + 1);
    let field = |_: f64, x: &Vector| averaged.eval(x);
    let outcome = integrate_rk4_with(&field, x0, &grid, |x| averaged.post_step(x), |_, _, x| {
        nodes.push(x.clone());
        true
    });
    let diverged = match outcome {
        Ok(_) => None,
        Err(e) if is_breakdown(&e) => Some(grid.time(nodes.len())),
        Err(e) => return Err(e),
    };
    Ok((Uniform { t0, dt: grid.dt(), nodes }, diverged))
}

/// Integrates the full system at a fast-resolved step and, if given, the
/// averaged system at `options.averaged_dt`, from the same `x₀`.
///
/// A blow-up of either is recorded in the status, not returned as an error.
pub fn run_compare(
    system: &dyn SlowFastSystem,
    averaged: Option<&dyn AveragedField>,
    init: &CompareInit,
    omega: f64,
    horizon: f64,
    options: &RunOptions,
) -> Result<RunRecord> {
    options.validate()?;
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::Config(format!("omega must be positive, got {omega}")));
    }
    if !(horizon.is_finite() && horizon >= 0.0) {
        return Err(Error::Config(format!("horizon must be non-negative, got {horizon}")));
    }
    let (n, m) = (system.slow_dim(), system.fast_dim());
    if init.x0.len() != n || init.y0.len() != m {
        return Err(Error::Dimension(format!(
            "initial data has sizes ({}, {}), system needs ({n}, {m})",
            init.x0.len(),
            init.y0.len()
        )));
    }
    if let Some(avg) = averaged {
        if avg.dim() != n {
            return Err(Error::Dimension(format!("averaged field has dimension {}, system {n}", avg.dim())));
        }
    }
    let x0 = Vector::from_column_slice(&init.x0);
    let dt_full = system.period() / (omega * options.steps_per_fast_period as f64);

    let mut record = RunRecord {
        omega,
        horizon,
        dt: dt_full,
        init: init.clone(),
        options: options.clone(),
        status: RunStatus::Completed,
        samples: Vec::new(),
        x_deviation: averaged.map(|_| Vec::new()),
        z_norm: Vec::new(),
        lyapunov: system.lyapunov(&x0).map(|_| Vec::new()),
        manifold_residual: system.manifold_residual(&x0).map(|_| Vec::new()),
        sup_x_deviation: averaged.map(|_| 0.0),
        max_manifold_residual: system.manifold_residual(&x0).map(|_| 0.0),
    };

    // Returns false once the comparison trajectory has run out.
    let mut observe = |t: f64, state: &Vector, keep: bool, bar: Option<&Uniform>| -> bool {
        let x = state.rows(0, n).into_owned();
        let y = state.rows(n, m).into_owned();
        let dev = match bar {
            Some(b) => match b.at(t) {
                Some(xb) => Some((&x - xb).norm()),
                None => return false,
            },
            None => None,
        };
        if let (Some(d), Some(sup)) = (dev, record.sup_x_deviation.as_mut()) {
            *sup = sup.max(d);
        }
        let residual = system.manifold_residual(&x);
        if let (Some(r), Some(worst)) = (residual, record.max_manifold_residual.as_mut()) {
            *worst = worst.max(r);
        }
        if !keep {
            return true;
        }
        record.z_norm.push((&y - system.quasi_steady(&x)).norm());
        if let (Some(series), Some(d)) = (record.x_deviation.as_mut(), dev) {
            series.push(d);
        }
        if let (Some(series), Some(v)) = (record.lyapunov.as_mut(), system.lyapunov(&x)) {
            series.push(v);
        }
        if let (Some(series), Some(r)) = (record.manifold_residual.as_mut(), residual) {
            series.push(r);
        }
        record.samples.push(TrajectorySample { t, x: x.as_slice().to_vec(), y: y.as_slice().to_vec() });
        true
    };

    let state0 = init.stacked();
    if horizon == 0.0 {
        let bar = Uniform { t0: init.t0, dt: 1.0, nodes: vec![x0.clone()] };
        observe(init.t0, &state0, true, averaged.map(|_| &bar));
        return Ok(record);
    }

    let (bar, bar_diverged) = match averaged {
        Some(avg) => {
            let (u, d) = integrate_averaged(avg, &x0, init.t0, horizon, options.averaged_dt)?;
            (Some(u), d)
        }
        None => (None, None),
    };

    let grid = TimeGrid::covering(init.t0, horizon, dt_full)?;
    record.dt = grid.dt();
    let last = grid.n_steps();
    let field = |t: f64, s: &Vector| system.derivative(omega, t, s);
    let outcome = integrate_rk4_with(&field, &state0, &grid, |s| system.post_step(s), |k, t, s| {
        let keep = k % options.stride == 0 || k == last;
        observe(t, s, keep, bar.as_ref())
    });
    let full_diverged = match outcome {
        Ok(_) => None,
        Err(Error::Divergence { t, .. }) => Some(t),
        Err(e) if is_breakdown(&e) => Some(record.samples.last().map_or(init.t0, |s| s.t)),
        Err(e) => return Err(e),
    };
    let first = [full_diverged, bar_diverged].into_iter().flatten().reduce(f64::min);
    if let Some(time) = first {
        record.status = RunStatus::Diverged { time };
    }
    Ok(record)
}

/// Full-system run without a comparison trajectory.
pub fn simulate(
    system: &dyn SlowFastSystem,
    init: &CompareInit,
    omega: f64,
    horizon: f64,
    options: &RunOptions,
) -> Result<RunRecord> {
    run_compare(system, None, init, omega, horizon, options)
}

/// Fitted boundary-layer envelope `‖z(t)‖ ≈ γ̂‖z₀‖e^{−ωλ̂(t−t₀)}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub gamma: f64,
    pub lambda: f64,
    pub samples: usize,
    pub window_end: f64,
}

fn fit_log_decay(times: &[f64], values: &[f64], t0: f64, omega: f64) -> Result<DecayFit> {
    if times.len() < MIN_FIT_SAMPLES {
        return Err(Error::Fit(format!(
            "transient has {} samples, need at least {MIN_FIT_SAMPLES}",
            times.len()
        )));
    }
    if values.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("boundary-layer norm vanished inside the window".into()));
    }
    let xs: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let (slope, intercept) = linear_fit(&xs, &ys)?;
    Ok(DecayFit {
        gamma: intercept.exp() / values[0],
        lambda: -slope / omega,
        samples: times.len(),
        window_end: *times.last().unwrap_or(&t0),
    })
}

/// Log-linear fit of `‖y − φ₀(x)‖` over the initial transient, which ends
/// where the series first drops below 5% of its initial value.
pub fn fit_boundary_layer(record: &RunRecord, omega: f64) -> Result<DecayFit> {
    let z = &record.z_norm;
    let z0 = *z.first().ok_or_else(|| Error::Fit("empty run".into()))?;
    if !(z0 > 0.0) {
        return Err(Error::Fit("initial state is on the quasi-steady manifold; there is no transient".into()));
    }
    let end = z.iter().position(|v| *v < TRANSIENT_CUTOFF * z0).unwrap_or(z.len());
    let times = record.times();
    fit_log_decay(&times[..end], &z[..end], record.init.t0, omega)
}

/// Fit over the window `ω(t − t₀) ∈ [0, 5/|Re λ_slowest(A)|]`.
fn fit_window(record: &RunRecord, omega: f64, slowest: f64) -> Option<DecayFit> {
    let z0 = *record.z_norm.first()?;
    if !(z0 > 0.0) {
        return None;
    }
    let t_end = record.init.t0 + 5.0 / (slowest * omega);
    let times = record.times();
    let end = times.iter().position(|t| *t > t_end).unwrap_or(times.len());
    fit_log_decay(&times[..end], &record.z_norm[..end], record.init.t0, omega).ok()
}

/// Everything a sweep needs at one ω.
#[derive(Clone)]
pub struct SweepCase {
    pub system: Arc<dyn SlowFastSystem>,
    pub averaged: Arc<dyn AveragedField>,
    pub init: CompareInit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub omega: f64,
    pub sup_error: f64,
    pub status: RunStatus,
    pub decay: Option<DecayFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub omegas: Vec<f64>,
    pub horizon: f64,
    pub runs: Vec<SweepRun>,
    /// Least-squares slope of `log E` against `log ω`.
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    /// Median over runs of the per-ω window fits.
    pub decay_rate: Option<f64>,
    pub decay_prefactor: Option<f64>,
    pub strictly_decreasing: bool,
    /// Strictly decreasing apart from possibly the first (coarsest) pair.
    pub decreasing_past_coarsest: bool,
    pub max_slope: f64,
    pub slope_pass: bool,
}

impl SweepReport {
    pub fn errors(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.sup_error).collect()
    }
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let k = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[k] } else { 0.5 * (v[k - 1] + v[k]) })
}

fn check_ladder(omegas: &[f64]) -> Result<()> {
    if omegas.len() < 4 {
        return Err(Error::Config(format!("a sweep needs at least 4 frequencies, got {}", omegas.len())));
    }
    if omegas.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(Error::Config("sweep frequencies must be positive and finite".into()));
    }
    let ratio = omegas[1] / omegas[0];
    if !(ratio > 1.0) {
        return Err(Error::Config("sweep frequencies must increase".into()));
    }
    for pair in omegas.windows(2) {
        let r = pair[1] / pair[0];
        if (r / ratio - 1.0).abs() > 1e-3 {
            return Err(Error::Config(format!("sweep frequencies must be geometric (ratio {r} vs {ratio})")));
        }
    }
    Ok(())
}

/// Runs `builder(ω)` for every ω of a geometric ladder and fits the decay
/// order of the sup-norm deviation `E(ω) = sup ‖x − x̄‖`.
pub fn sweep_convergence<B>(builder: B, omegas: &[f64], horizon: f64, options: &RunOptions, max_slope: f64) -> Result<SweepReport>
where
    B: Fn(f64) -> Result<SweepCase> + Sync,
{
    check_ladder(omegas)?;
    let runs: Vec<(RunRecord, Option<DecayFit>)> = omegas
        .par_iter()
        .map(|&omega| {
            let case = builder(omega)?;
            let record = run_compare(case.system.as_ref(), Some(case.averaged.as_ref()), &case.init, omega, horizon, options)?;
            let slowest = eigenvalue_real_parts(case.system.fast_matrix())
                .into_iter()
                .map(f64::abs)
                .reduce(f64::min)
                .unwrap_or(1.0);
            let fit = fit_window(&record, omega, slowest);
            Ok((record, fit))
        })
        .collect::<Result<_>>()?;

    let runs: Vec<SweepRun> = runs
        .into_iter()
        .map(|(r, decay)| SweepRun {
            omega: r.omega,
            sup_error: r.sup_x_deviation.unwrap_or(f64::MAX),
            status: r.status,
            decay,
        })
        .collect();
    let all_done = runs.iter().all(|r| r.status == RunStatus::Completed && r.sup_error > 0.0);
    let (slope, intercept) = if all_done {
        let xs: Vec<f64> = runs.iter().map(|r| r.omega.ln()).collect();
        let ys: Vec<f64> = runs.iter().map(|r| r.sup_error.ln()).collect();
        let (s, i) = linear_fit(&xs, &ys)?;
        (Some(s), Some(i))
    } else {
        (None, None)
    };
    let errors: Vec<f64> = runs.iter().map(|r| r.sup_error).collect();
    let drops: Vec<bool> = errors.windows(2).map(|p| p[1] < p[0]).collect();
    let strictly_decreasing = all_done && drops.iter().all(|d| *d);
    let decreasing_past_coarsest = all_done && drops.iter().skip(1).all(|d| *d);
    let fits: Vec<&DecayFit> = runs.iter().filter_map(|r| r.decay.as_ref()).collect();
    Ok(SweepReport {
        omegas: omegas.to_vec(),
        horizon,
        slope,
        intercept,
        decay_rate: median(fits.iter().map(|f| f.lambda).collect()),
        decay_prefactor: median(fits.iter().map(|f| f.gamma).collect()),
        strictly_decreasing,
        decreasing_past_coarsest,
        max_slope,
        slope_pass: slope.is_some_and(|s| s <= max_slope),
        runs,
    })
}

/// Something the stability probe can start on a δ-shell and run.
pub trait ProbeTarget: Send + Sync {
    /// `true` for autonomous averaged systems, where ω plays no role.
    fn omega_free(&self) -> bool {
        false
    }

    /// Fast-time period, for the phase offsets `t₀ ∈ {0, T/4ω, T/2ω}`.
    fn period(&self) -> f64;

    /// Stacked initial state at distance `delta_x` from the target set along
    /// `direction`, with boundary-layer offset of norm `delta_z`.
    fn initial(&self, direction: &Vector3<f64>, delta_x: f64, delta_z: f64) -> Result<Vector>;

    /// Runs from `state` over `[t0, t0 + horizon]`, reporting
    /// `(t, dist(x, 𝒮), ‖y − φ₀(x)‖)` at every step.
    fn run(&self, omega: f64, t0: f64, state: &Vector, horizon: f64, observe: &mut dyn FnMut(f64, f64, f64)) -> Result<()>;
}

fn fast_offset(m: usize, delta_z: f64) -> Vector {
    Vector::from_element(m, delta_z / (m as f64).sqrt())
}

#[allow(clippy::too_many_arguments)]
fn run_slow_fast(
    system: &dyn SlowFastSystem,
    distance: &dyn Fn(&Vector) -> f64,
    steps: usize,
    omega: f64,
    t0: f64,
    state: &Vector,
    horizon: f64,
    observe: &mut dyn FnMut(f64, f64, f64),
) -> Result<()> {
    let n = system.slow_dim();
    let m = system.fast_dim();
    let grid = TimeGrid::covering(t0, horizon, system.period() / (omega * steps as f64))?;
    let field = |t: f64, s: &Vector| system.derivative(omega, t, s);
    integrate_rk4_with(&field, state, &grid, |s| system.post_step(s), |_, t, s| {
        let x = s.rows(0, n).into_owned();
        let z = (s.rows(n, m) - system.quasi_steady(&x)).norm();
        observe(t, distance(&x), z);
        true
    })?;
    Ok(())
}

/// The full seeker, with `𝒮 = {p*} × SO(3)`.
pub struct SeekerProbe {
    system: SeekerSystem,
    steps_per_fast_period: usize,
}

impl SeekerProbe {
    pub fn new(field: ScalarField, projection: bool, steps_per_fast_period: usize) -> Self {
        Self { system: SeekerSystem::new(field, projection), steps_per_fast_period }
    }
}

impl ProbeTarget for SeekerProbe {
    fn period(&self) -> f64 {
        self.system.period()
    }

    fn initial(&self, direction: &Vector3<f64>, delta_x: f64, delta_z: f64) -> Result<Vector> {
        let p = self.system.field().p_star() + direction * delta_x;
        let x = AveragedSeekerState { p, q: Rotation::identity() }.to_vector();
        let y = self.system.quasi_steady(&x) + fast_offset(2, delta_z);
        Ok(Vector::from_iterator(14, x.iter().chain(y.iter()).copied()))
    }

    fn run(&self, omega: f64, t0: f64, state: &Vector, horizon: f64, observe: &mut dyn FnMut(f64, f64, f64)) -> Result<()> {
        let p_star = self.system.field().p_star();
        let distance = |x: &Vector| (Vector3::new(x[0], x[1], x[2]) - p_star).norm();
        run_slow_fast(&self.system, &distance, self.steps_per_fast_period, omega, t0, state, horizon, observe)
    }
}

/// The closed-form averaged seeker; autonomous, so ω is ignored.
pub struct AveragedSeekerProbe {
    averaged: AveragedSeeker,
    dt: f64,
}

impl AveragedSeekerProbe {
    pub fn new(field: ScalarField, dt: f64) -> Self {
        Self { averaged: AveragedSeeker::new(field, true), dt }
    }
}

impl ProbeTarget for AveragedSeekerProbe {
    fn omega_free(&self) -> bool {
        true
    }

    fn period(&self) -> f64 {
        2.0 * std::f64::consts::PI
    }

    fn initial(&self, direction: &Vector3<f64>, delta_x: f64, _delta_z: f64) -> Result<Vector> {
        let p = self.averaged.field().p_star() + direction * delta_x;
        Ok(AveragedSeekerState { p, q: Rotation::identity() }.to_vector())
    }

    fn run(&self, _omega: f64, t0: f64, state: &Vector, horizon: f64, observe: &mut dyn FnMut(f64, f64, f64)) -> Result<()> {
        let p_star = self.averaged.field().p_star();
        let grid = TimeGrid::covering(t0, horizon, self.dt)?;
        let field = |_: f64, x: &Vector| self.averaged.eval(x);
        integrate_rk4_with(&field, state, &grid, |x| self.averaged.post_step(x), |_, t, x| {
            observe(t, (Vector3::new(x[0], x[1], x[2]) - p_star).norm(), 0.0);
            true
        })?;
        Ok(())
    }
}

/// A generic slow/fast system with `𝒮 = {center}`. Panel directions are
/// mapped onto the first (up to three) slow coordinates.
pub struct SystemProbe {
    spec: Arc<OscillatorySystemSpec>,
    center: Vector,
    steps_per_fast_period: usize,
}

impl SystemProbe {
    pub fn new(spec: Arc<OscillatorySystemSpec>, center: Vector, steps_per_fast_period: usize) -> Result<Self> {
        if center.len() != spec.slow_dim() {
            return Err(Error::Dimension("probe centre does not match the slow dimension".into()));
        }
        Ok(Self { spec, center, steps_per_fast_period })
    }
}

impl ProbeTarget for SystemProbe {
    fn period(&self) -> f64 {
        self.spec.period()
    }

    fn initial(&self, direction: &Vector3<f64>, delta_x: f64, delta_z: f64) -> Result<Vector> {
        let n = self.spec.slow_dim();
        let mut d = Vector::zeros(n);
        for i in 0..n.min(3) {
            d[i] = direction[i];
        }
        let norm = d.norm();
        // Directions that vanish in low dimensions fall back to the first axis.
        if norm > 0.0 {
            d /= norm;
        } else {
            d[0] = 1.0;
        }
        let x = &self.center + d * delta_x;
        let y = self.spec.phi0(&x) + fast_offset(self.spec.fast_dim(), delta_z);
        Ok(Vector::from_iterator(n + y.len(), x.iter().chain(y.iter()).copied()))
    }

    fn run(&self, omega: f64, t0: f64, state: &Vector, horizon: f64, observe: &mut dyn FnMut(f64, f64, f64)) -> Result<()> {
        let distance = |x: &Vector| (x - &self.center).norm();
        run_slow_fast(self.spec.as_ref(), &distance, self.steps_per_fast_period, omega, t0, state, horizon, observe)
    }
}

/// The fixed panel of eight directions on each δ-shell.
pub fn panel_directions() -> Vec<Vector3<f64>> {
    let d = Vector3::new(1.0, 1.0, 1.0).normalize();
    vec![Vector3::x(), -Vector3::x(), Vector3::y(), -Vector3::y(), Vector3::z(), -Vector3::z(), d, -d]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSettings {
    pub epsilon_x: f64,
    pub epsilon_z: f64,
    /// `(δ_x, δ_z)` shells.
    pub deltas: Vec<(f64, f64)>,
    pub omegas: Vec<f64>,
    pub horizon: f64,
    /// Item 2 requires the settle time `T_f` to be at most this fraction of the horizon.
    #[serde(default = "default_settle_fraction")]
    pub settle_fraction: f64,
}

fn default_settle_fraction() -> f64 {
    0.75
}

impl ProbeSettings {
    pub fn validate(&self, omega_free: bool) -> Result<()> {
        let pos = |v: f64| v.is_finite() && v > 0.0;
        if !pos(self.epsilon_x) || !pos(self.epsilon_z) {
            return Err(Error::Config("epsilon_x and epsilon_z must be positive".into()));
        }
        if self.deltas.is_empty() {
            return Err(Error::Config("the δ grid is empty".into()));
        }
        if self.deltas.iter().any(|(a, b)| !(a.is_finite() && *a >= 0.0 && b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config("δ values must be non-negative".into()));
        }
        if !omega_free && self.omegas.is_empty() {
            return Err(Error::Config("the ω grid is empty".into()));
        }
        if self.omegas.iter().any(|w| !pos(*w)) || self.omegas.windows(2).any(|p| p[1] <= p[0]) {
            return Err(Error::Config("ω grid must be positive and increasing".into()));
        }
        if !pos(self.horizon) {
            return Err(Error::Config("probe horizon must be positive".into()));
        }
        if !(self.settle_fraction > 0.0 && self.settle_fraction <= 1.0) {
            return Err(Error::Config("settle_fraction must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Verdicts for one `(δ, ω)` cell of the probe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeCell {
    pub delta_x: f64,
    pub delta_z: f64,
    pub omega: Option<f64>,
    pub runs: usize,
    pub diverged: usize,
    pub max_distance: f64,
    pub max_z: f64,
    pub final_max_distance: f64,
    /// Smallest `T_f` after which every run stays inside both ε-neighbourhoods.
    pub settle_time: Option<f64>,
    /// Containment: never leaves the ε-neighbourhoods.
    pub item1: bool,
    /// Ultimate entry by `T_f`.
    pub item2: bool,
    /// Boundedness: no run blew up; the bounds found are `max_distance`, `max_z`.
    pub item3: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShellVerdict {
    pub delta_x: f64,
    pub delta_z: f64,
    /// Smallest grid ω from which the item holds on the rest of the grid.
    /// `None` means not found on the grid (or the target is ω-free).
    pub omega_star_item1: Option<f64>,
    pub omega_star_item2: Option<f64>,
    pub omega_star_item3: Option<f64>,
    pub item1: bool,
    pub item2: bool,
    pub item3: bool,
    pub settle_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityProbeReport {
    pub settings: ProbeSettings,
    pub omega_free: bool,
    pub phases: usize,
    pub directions: usize,
    pub cells: Vec<ProbeCell>,
    pub shells: Vec<ShellVerdict>,
    pub item1: bool,
    pub item2: bool,
    pub item3: bool,
}

struct RunTrace {
    diverged: bool,
    max_distance: f64,
    max_z: f64,
    final_distance: f64,
    /// Last time (relative to `t₀`) with `dist ≥ ε_x`, if any.
    last_x_exit: Option<f64>,
    last_z_exit: Option<f64>,
}

fn trace_run(target: &dyn ProbeTarget, s: &ProbeSettings, omega: f64, t0: f64, state: &Vector) -> Result<RunTrace> {
    let mut tr = RunTrace {
        diverged: false,
        max_distance: 0.0,
        max_z: 0.0,
        final_distance: f64::NAN,
        last_x_exit: None,
        last_z_exit: None,
    };
    let outcome = target.run(omega, t0, state, s.horizon, &mut |t, d, z| {
        tr.max_distance = tr.max_distance.max(d);
        tr.max_z = tr.max_z.max(z);
        tr.final_distance = d;
        if d >= s.epsilon_x {
            tr.last_x_exit = Some(t - t0);
        }
        if z >= s.epsilon_z {
            tr.last_z_exit = Some(t - t0);
        }
    });
    match outcome {
        Ok(()) => {}
        Err(e) if is_breakdown(&e) => tr.diverged = true,
        Err(e) => return Err(e),
    }
    Ok(tr)
}

/// Smallest grid ω such that `holds` is true at it and at every larger grid ω.
fn omega_star(cells: &[&ProbeCell], holds: impl Fn(&ProbeCell) -> bool) -> Option<f64> {
    let mut star = None;
    for c in cells.iter().rev() {
        if holds(c) {
            star = c.omega;
        } else {
            break;
        }
    }
    star
}

/// Empirical check of the three practical-stability items on a panel of
/// initial conditions, for every `(δ, ω)` on the grid and three phases `t₀`.
///
/// This is a probe, not a proof: the definition quantifies over all `t₀` and
/// all initial conditions, and only a fixed sample of both is tried here.
pub fn probe_practical_stability(target: &dyn ProbeTarget, settings: &ProbeSettings) -> Result<StabilityProbeReport> {
    let omega_free = target.omega_free();
    settings.validate(omega_free)?;
    let omegas: Vec<Option<f64>> = if omega_free { vec![None] } else { settings.omegas.iter().copied().map(Some).collect() };
    let directions = panel_directions();
    let phase_fracs: &[f64] = if omega_free { &[0.0] } else { &[0.0, 0.25, 0.5] };

    let mut jobs = Vec::new();
    for (di, &(dx, dz)) in settings.deltas.iter().enumerate() {
        for (wi, w) in omegas.iter().enumerate() {
            for dir in &directions {
                for &frac in phase_fracs {
                    jobs.push((di, wi, dx, dz, *w, *dir, frac));
                }
            }
        }
    }
    let traces: Vec<RunTrace> = jobs
        .par_iter()
        .map(|&(_, _, dx, dz, w, dir, frac)| {
            let omega = w.unwrap_or(1.0);
            let t0 = frac * target.period() / omega;
            let state = target.initial(&dir, dx, dz)?;
            trace_run(target, settings, omega, t0, &state)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for (di, &(dx, dz)) in settings.deltas.iter().enumerate() {
        for (wi, w) in omegas.iter().enumerate() {
            let group: Vec<&RunTrace> =
                jobs.iter().zip(&traces).filter(|((d, o, ..), _)| *d == di && *o == wi).map(|(_, t)| t).collect();
            let diverged = group.iter().filter(|t| t.diverged).count();
            let max_distance = group.iter().map(|t| t.max_distance).fold(0.0, f64::max);
            let max_z = group.iter().map(|t| t.max_z).fold(0.0, f64::max);
            let final_max_distance = group.iter().map(|t| t.final_distance).fold(0.0, f64::max);
            let item1 = diverged == 0 && max_distance < settings.epsilon_x && max_z < settings.epsilon_z;
            // T_f covers x directly and z on the fast time scale, t₂ ≥ T_f/ω.
            let omega = w.unwrap_or(1.0);
            let settle = group.iter().map(|t| {
                let tx = t.last_x_exit.unwrap_or(0.0);
                let tz = if omega_free { 0.0 } else { t.last_z_exit.unwrap_or(0.0) * omega };
                tx.max(tz)
            });
            let settle_time = if diverged == 0 { Some(settle.fold(0.0, f64::max)) } else { None };
            let item2 = settle_time.is_some_and(|ts| {
                ts <= settings.settle_fraction * settings.horizon
                    && group.iter().all(|t| t.final_distance < settings.epsilon_x)
            });
            cells.push(ProbeCell {
                delta_x: dx,
                delta_z: dz,
                omega: *w,
                runs: group.len(),
                diverged,
                max_distance,
                max_z,
                final_max_distance,
                settle_time,
                item1,
                item2,
                item3: diverged == 0,
            });
        }
    }

    let shells: Vec<ShellVerdict> = settings
        .deltas
        .iter()
        .map(|&(dx, dz)| {
            let row: Vec<&ProbeCell> = cells.iter().filter(|c| c.delta_x == dx && c.delta_z == dz).collect();
            let item = |f: fn(&ProbeCell) -> bool| {
                if omega_free {
                    (None, row.iter().all(|c| f(c)))
                } else {
                    let star = omega_star(&row, f);
                    (star, star.is_some())
                }
            };
            let (w1, i1) = item(|c| c.item1);
            let (w2, i2) = item(|c| c.item2);
            let (w3, i3) = item(|c| c.item3);
            let settle_time = row.iter().filter(|c| c.item2).filter_map(|c| c.settle_time).reduce(f64::max);
            ShellVerdict {
                delta_x: dx,
                delta_z: dz,
                omega_star_item1: w1,
                omega_star_item2: w2,
                omega_star_item3: w3,
                item1: i1,
                item2: i2,
                item3: i3,
                settle_time,
            }
        })
        .collect();

    Ok(StabilityProbeReport {
        settings: settings.clone(),
        omega_free,
        phases: phase_fracs.len(),
        directions: directions.len(),
        item1: shells.iter().all(|s| s.item1),
        item2: shells.iter().all(|s| s.item2),
        item3: shells.iter().all(|s| s.item3),
        cells,
        shells,
    })
}

/// Descent diagnostics of `V_c` along averaged-seeker trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovTrace {
    pub initial_value: f64,
    pub final_value: f64,
    /// Largest single-step increase of `V_c` (≤ 0 when it never increased).
    pub max_step_increase: f64,
    pub final_gradient_norm: f64,
    /// First time with `‖∇c(p̄)‖` below the requested threshold.
    pub time_to_threshold: Option<f64>,
}

/// Integrates the averaged seeker from `x0` and watches `V_c` step by step.
pub fn lyapunov_descent(field: &ScalarField, x0: &AveragedSeekerState, dt: f64, horizon: f64, grad_threshold: f64) -> Result<LyapunovTrace> {
    let avg = AveragedSeeker::new(field.clone(), true);
    let grid = TimeGrid::covering(0.0, horizon, dt)?;
    let v0 = field.lyapunov(&x0.p);
    let mut tr = LyapunovTrace {
        initial_value: v0,
        final_value: v0,
        max_step_increase: f64::NEG_INFINITY,
        final_gradient_norm: field.gradient(&x0.p).norm(),
        time_to_threshold: None,
    };
    let rhs = |_: f64, x: &Vector| avg.eval(x);
    let mut prev = v0;
    integrate_rk4_with(&rhs, &x0.to_vector(), &grid, |x| avg.post_step(x), |k, t, x| {
        let p = Vector3::new(x[0], x[1], x[2]);
        let v = field.lyapunov(&p);
        let g = field.gradient(&p).norm();
        if k > 0 {
            tr.max_step_increase = tr.max_step_increase.max(v - prev);
        }
        if tr.time_to_threshold.is_none() && g < grad_threshold {
            tr.time_to_threshold = Some(t);
        }
        prev = v;
        tr.final_value = v;
        tr.final_gradient_norm = g;
        true
    })?;
    Ok(tr)
}
