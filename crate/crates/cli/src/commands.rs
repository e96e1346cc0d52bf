//! One function per command. Each writes its files and returns an [`Outcome`].

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use nalgebra::Vector3;
use oscavg_core::averaging::{average, build_b, build_reduced, solve_correctors, solve_periodic_bvp, FnForcing, Forcing};
use oscavg_core::harness::{
    fit_boundary_layer, lyapunov_descent, probe_practical_stability, simulate as run_simulation, sweep_convergence,
    AveragedSeekerProbe, DecayFit, LyapunovTrace, ProbeSettings, ProbeTarget, RunOptions, RunRecord, RunStatus,
    SeekerProbe, SweepReport, SystemProbe,
};
use oscavg_core::numkit::{integrate_rk4, Matrix, TimeGrid, Vector};
use oscavg_core::seeker::{
    as_system_spec, closed_form_average, cross_check, AveragedSeekerState, FilterInit, SeekerConfig, SeekerSystem,
};
use oscavg_core::so3::exp_so3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    AverageCheckConfig, BvpCase, BvpCheckConfig, LyapunovCheckConfig, ProbeConfig, ProbeModel, SimulateConfig,
    SweepConfig, SystemName,
};
use crate::output::{out_path, write_csv, write_report, SEEKER_HEADER};
use crate::systems::{self, field, seeker_start, split, test_start, test_system};
use crate::{CliError, Outcome, Verdict};

/// Deterministic on-manifold states of the averaged seeker: `‖p‖ ∈ [0.5, 5]`
/// in a uniform direction, attitude `exp(ŵ)` with `w ∈ [−3, 3]³`.
pub fn averaged_states(seed: u64, count: usize) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let p = dir.normalize() * rng.gen_range(0.5..5.0);
            let w = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            AveragedSeekerState { p, q: exp_so3(&w) }.to_vector()
        })
        .collect()
}

// ---------------------------------------------------------------- simulate

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateSummary {
    pub system: SystemName,
    pub omega: f64,
    pub horizon: f64,
    pub dt: f64,
    pub status: RunStatus,
    pub rows: usize,
    pub trajectory: String,
    /// `‖p − p*‖` (seeker) or `|x|` (test systems) at the last sample.
    pub final_distance: f64,
    pub c_initial: Option<f64>,
    pub c_final: Option<f64>,
    pub max_position_norm: Option<f64>,
    /// Largest `‖p‖` over the last quarter of the run.
    pub tail_max_position_norm: Option<f64>,
    pub max_manifold_residual: Option<f64>,
    pub cross_check_deviation: Option<f64>,
    pub boundary_layer: Option<DecayFit>,
}

fn verdict_for(status: &RunStatus) -> Verdict {
    match status {
        RunStatus::Completed => Verdict::Ok,
        RunStatus::Diverged { .. } => Verdict::Diverged,
    }
}

pub fn simulate(c: &SimulateConfig, out: &Path) -> Result<Outcome, CliError> {
    let options = RunOptions { steps_per_fast_period: c.steps_per_fast_period, stride: c.stride, ..RunOptions::default() };
    let csv_path = out_path(out, &c.output);
    let (rec, mut summary, rows, header) = if c.system.is_seeker() {
        let f = field(c.system)?;
        let config = SeekerConfig {
            omega: c.omega,
            steps_per_fast_period: c.steps_per_fast_period,
            projection: c.projection,
            filter_init: c.initial.filter_init,
        };
        config.validate()?;
        let start = seeker_start(&config, &f, &c.initial)?;
        let system = SeekerSystem::new(f.clone(), c.projection);
        let rec = run_simulation(&system, &split(&start.to_vector(), 12), c.omega, c.horizon, &options)?;
        let residuals = rec.manifold_residual.clone().unwrap_or_default();
        let mut rows = Vec::with_capacity(rec.samples.len());
        let mut norms = Vec::with_capacity(rec.samples.len());
        for (i, s) in rec.samples.iter().enumerate() {
            let p = Vector3::new(s.x[0], s.x[1], s.x[2]);
            norms.push(p.norm());
            let mut row = Vec::with_capacity(SEEKER_HEADER.len());
            row.push(s.t);
            row.extend_from_slice(&s.x);
            row.extend_from_slice(&s.y);
            row.push(f.value(&p));
            row.push(f.lyapunov(&p));
            row.push(residuals.get(i).copied().unwrap_or(f64::NAN));
            rows.push(row);
        }
        let c_at = |i: usize| rows[i][15];
        let tail_from = c.horizon * 0.75;
        let tail = rec.samples.iter().zip(&norms).filter(|(s, _)| s.t >= tail_from).map(|(_, n)| *n);
        let last = rec.samples.last().expect("initial sample is always kept");
        let p_last = Vector3::new(last.x[0], last.x[1], last.x[2]);
        let cross = if c.cross_check { Some(cross_check(&config, &f, &start, config.fast_period())?) } else { None };
        let summary = SimulateSummary {
            system: c.system,
            omega: c.omega,
            horizon: c.horizon,
            dt: rec.dt,
            status: rec.status.clone(),
            rows: rows.len(),
            trajectory: c.output.clone(),
            final_distance: (p_last - f.p_star()).norm(),
            c_initial: Some(c_at(0)),
            c_final: Some(c_at(rows.len() - 1)),
            max_position_norm: Some(norms.iter().copied().fold(0.0, f64::max)),
            tail_max_position_norm: Some(tail.fold(0.0, f64::max)),
            max_manifold_residual: rec.max_manifold_residual,
            cross_check_deviation: cross,
            boundary_layer: None,
        };
        let header: Vec<String> = SEEKER_HEADER.iter().map(|s| s.to_string()).collect();
        (rec, summary, rows, header)
    } else {
        let spec = test_system(c.system)?;
        let init = test_start(c.system, &spec, &c.initial);
        let rec = run_simulation(&spec, &init, c.omega, c.horizon, &options)?;
        let mut header = vec!["t".to_string()];
        header.extend((1..=spec.slow_dim()).map(|i| format!("x{i}")));
        header.extend((1..=spec.fast_dim()).map(|i| format!("y{i}")));
        header.push("z_norm".into());
        let rows: Vec<Vec<f64>> = rec
            .samples
            .iter()
            .zip(&rec.z_norm)
            .map(|(s, z)| std::iter::once(s.t).chain(s.x.iter().copied()).chain(s.y.iter().copied()).chain([*z]).collect())
            .collect();
        let last = rec.samples.last().expect("initial sample is always kept");
        let summary = SimulateSummary {
            system: c.system,
            omega: c.omega,
            horizon: c.horizon,
            dt: rec.dt,
            status: rec.status.clone(),
            rows: rows.len(),
            trajectory: c.output.clone(),
            final_distance: Vector::from_column_slice(&last.x).norm(),
            c_initial: None,
            c_final: None,
            max_position_norm: None,
            tail_max_position_norm: None,
            max_manifold_residual: None,
            cross_check_deviation: None,
            boundary_layer: None,
        };
        (rec, summary, rows, header)
    };
    summary.boundary_layer = boundary_fit(&rec, c.omega, c.initial.filter_init);
    write_csv(&csv_path, &header, &rows)?;
    let summary_path = out_path(out, &c.summary);
    write_report(&summary_path, "simulate", &summary)?;
    let mut line = format!(
        "simulate {:?}: {} rows to t = {}, final distance to target {:.6e}",
        c.system,
        summary.rows,
        rec.samples.last().map_or(0.0, |s| s.t),
        summary.final_distance
    );
    if let Some(r) = summary.max_manifold_residual {
        line.push_str(&format!(", max manifold residual {r:.3e}"));
    }
    if let RunStatus::Diverged { time } = rec.status {
        line.push_str(&format!(", DIVERGED at t = {time}"));
    }
    Ok(Outcome { files: vec![csv_path, summary_path], summary: line, verdict: verdict_for(&rec.status) })
}

/// Fit only makes sense for a start off the quasi-steady manifold.
fn boundary_fit(rec: &RunRecord, omega: f64, init: FilterInit) -> Option<DecayFit> {
    match init {
        FilterInit::Zero => fit_boundary_layer(rec, omega).ok(),
        FilterInit::QuasiSteady => None,
    }
}

// ---------------------------------------------------------- average-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSample {
    pub state: Vec<f64>,
    pub numeric: Vec<f64>,
    pub closed_form: Vec<f64>,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldAverageCheck {
    pub field: SystemName,
    pub samples: Vec<AverageSample>,
    pub max_relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageCheckReport {
    pub seed: u64,
    pub panels: usize,
    pub tolerance: f64,
    pub fields: Vec<FieldAverageCheck>,
    pub max_relative_error: f64,
    pub pass: bool,
}

pub fn average_check(c: &AverageCheckConfig, out: &Path) -> Result<Outcome, CliError> {
    let states = averaged_states(c.seed, c.samples);
    let mut fields = Vec::new();
    for &name in &c.fields {
        let f = field(name)?;
        let spec = Arc::new(as_system_spec(&f)?);
        let phi1 = solve_periodic_bvp(spec.a(), build_b(&spec, None, 1)?, spec.period(), c.panels)?;
        let avg = average(&build_reduced(&spec, &phi1), c.panels)?;
        let mut samples = Vec::with_capacity(states.len());
        for x in &states {
            let numeric = avg.try_eval(x)?;
            let closed = closed_form_average(&f, x);
            let relative_error = (&numeric - &closed).norm() / closed.norm();
            samples.push(AverageSample {
                state: x.as_slice().to_vec(),
                numeric: numeric.as_slice().to_vec(),
                closed_form: closed.as_slice().to_vec(),
                relative_error,
            });
        }
        let max_relative_error = samples.iter().map(|s| s.relative_error).fold(0.0, f64::max);
        fields.push(FieldAverageCheck { field: name, samples, max_relative_error });
    }
    let max = fields.iter().map(|f| f.max_relative_error).fold(0.0, f64::max);
    let pass = max <= c.tolerance && max.is_finite();
    let report = AverageCheckReport { seed: c.seed, panels: c.panels, tolerance: c.tolerance, fields, max_relative_error: max, pass };
    let path = out_path(out, &c.output);
    write_report(&path, "average-check", &report)?;
    Ok(Outcome {
        files: vec![path],
        summary: format!(
            "average-check: {} states, max relative error {max:.3e} (tolerance {:.1e}) {}",
            c.samples,
            c.tolerance,
            if pass { "PASS" } else { "FAIL" }
        ),
        verdict: if pass { Verdict::Ok } else { Verdict::CriterionFailed },
    })
}

// ------------------------------------------------------------------ sweep

pub fn sweep(c: &SweepConfig, out: &Path) -> Result<Outcome, CliError> {
    let options = RunOptions { steps_per_fast_period: c.steps_per_fast_period, averaged_dt: c.averaged_dt, stride: c.stride };
    let builder = |omega: f64| systems::sweep_case(c.system, &c.initial, c.projection, omega);
    let report: SweepReport = sweep_convergence(builder, &c.omegas, c.horizon, &options, c.max_slope)?;
    let path = out_path(out, &c.output);
    write_report(&path, "sweep", &report)?;
    let diverged = report.runs.iter().any(|r| matches!(r.status, RunStatus::Diverged { .. }));
    let verdict = if diverged {
        Verdict::Diverged
    } else if report.slope_pass {
        Verdict::Ok
    } else {
        Verdict::CriterionFailed
    };
    let errors: Vec<String> = report.errors().iter().map(|e| format!("{e:.3e}")).collect();
    let slope = report.slope.map_or("n/a".to_string(), |s| format!("{s:.3}"));
    Ok(Outcome {
        files: vec![path],
        summary: format!(
            "sweep {:?}: E(ω) = [{}], slope {slope} (needs ≤ {}), strictly decreasing: {}",
            c.system,
            errors.join(", "),
            c.max_slope,
            report.strictly_decreasing
        ),
        verdict,
    })
}

// -------------------------------------------------------- stability-probe

pub fn stability_probe(c: &ProbeConfig, out: &Path) -> Result<Outcome, CliError> {
    let target: Box<dyn ProbeTarget> = match (c.model, c.system.is_seeker()) {
        (ProbeModel::Averaged, true) => Box::new(AveragedSeekerProbe::new(field(c.system)?, c.dt)),
        (ProbeModel::Full, true) => Box::new(SeekerProbe::new(field(c.system)?, c.projection, c.steps_per_fast_period)),
        (ProbeModel::Full, false) => {
            let spec = Arc::new(test_system(c.system)?);
            let center = Vector::zeros(spec.slow_dim());
            Box::new(SystemProbe::new(spec, center, c.steps_per_fast_period)?)
        }
        (ProbeModel::Averaged, false) => unreachable!("rejected by validation"),
    };
    let settings = ProbeSettings {
        epsilon_x: c.epsilon_x,
        epsilon_z: c.epsilon_z,
        deltas: c.deltas.clone(),
        omegas: c.omegas.clone(),
        horizon: c.horizon,
        settle_fraction: c.settle_fraction,
    };
    let report = probe_practical_stability(target.as_ref(), &settings)?;
    let path = out_path(out, &c.output);
    write_report(&path, "stability-probe", &report)?;
    // ω-free targets have a plain verdict; otherwise report ω* or its absence.
    let fmt_item = |star: &Option<f64>, ok: bool| match (report.omega_free, star) {
        (true, _) => (if ok { "pass" } else { "fail" }).to_string(),
        (false, Some(w)) => format!("ω* = {w:.4}"),
        (false, None) => "not found on grid".to_string(),
    };
    let shells: Vec<String> = report
        .shells
        .iter()
        .map(|s| {
            format!(
                "δ = ({}, {}): item1 {}, item2 {}, item3 {}",
                s.delta_x,
                s.delta_z,
                fmt_item(&s.omega_star_item1, s.item1),
                fmt_item(&s.omega_star_item2, s.item2),
                fmt_item(&s.omega_star_item3, s.item3)
            )
        })
        .collect();
    Ok(Outcome { files: vec![path], summary: format!("stability-probe: {}", shells.join("; ")), verdict: Verdict::Ok })
}

// -------------------------------------------------------------- bvp-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpCaseReport {
    pub case: BvpCase,
    /// Residual at each sampled slow state (one entry for `x`-free cases).
    pub residuals: Vec<f64>,
    pub max_residual: f64,
    /// Distance to an independent answer, where the case has one.
    pub reference_error: Option<f64>,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpCheckReport {
    pub panels: usize,
    pub threshold: f64,
    pub cases: Vec<BvpCaseReport>,
    pub pass: bool,
}

fn jordan() -> Matrix {
    Matrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0])
}

fn cosine_case(panels: usize) -> Result<(f64, f64), CliError> {
    let a = Matrix::from_element(1, 1, -1.0);
    let b: Arc<dyn Forcing> = Arc::new(FnForcing::new(1, |_: &Vector, t: f64| Vector::from_element(1, t.cos())));
    let sol = solve_periodic_bvp(&a, b, 2.0 * PI, panels)?;
    let x = Vector::zeros(1);
    let h = 2.0 * PI / panels as f64;
    let err = sol
        .grid(&x, 0.0)?
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let t = k as f64 * h;
            (g[0] - 0.5 * (t.cos() + t.sin())).abs()
        })
        .fold(0.0, f64::max);
    Ok((sol.residual(&x)?, err))
}

fn jordan_case(panels: usize) -> Result<(f64, f64), CliError> {
    let forcing = |t: f64| Vector::from_vec(vec![t.sin(), t.cos()]);
    let b: Arc<dyn Forcing> = Arc::new(FnForcing::new(2, move |_: &Vector, t: f64| forcing(t)));
    let sol = solve_periodic_bvp(&jordan(), b, 2.0 * PI, panels)?;
    let x = Vector::zeros(1);
    // From rest, eight periods bury the τe^{−τ} transient below 1e-19.
    let (periods, per) = (8, 400);
    let grid = TimeGrid::new(0.0, 2.0 * PI / per as f64, per * periods)?;
    let a = jordan();
    let traj = integrate_rk4(&|t: f64, p: &Vector| &a * p + forcing(t), &Vector::zeros(2), &grid)?;
    let mut err: f64 = 0.0;
    for (t, p) in &traj[per * (periods - 1)..] {
        err = err.max((sol.eval(&x, *t)? - p).amax());
    }
    Ok((sol.residual(&x)?, err))
}

pub fn bvp_check(c: &BvpCheckConfig, out: &Path) -> Result<Outcome, CliError> {
    let wants_seeker = c.cases.iter().any(|k| matches!(k, BvpCase::SeekerPhi1 | BvpCase::SeekerPhi2));
    let correctors = if wants_seeker {
        let spec = Arc::new(as_system_spec(&field(c.field)?)?);
        Some(solve_correctors(&spec, c.panels)?)
    } else {
        None
    };
    let states = averaged_states(c.seed, c.samples);
    let mut cases = Vec::new();
    for &case in &c.cases {
        let (residuals, reference_error) = match case {
            BvpCase::Cosine => {
                let (r, e) = cosine_case(c.panels)?;
                (vec![r], Some(e))
            }
            BvpCase::Jordan => {
                let (r, e) = jordan_case(c.panels)?;
                (vec![r], Some(e))
            }
            BvpCase::SeekerPhi1 | BvpCase::SeekerPhi2 => {
                let (phi1, phi2) = correctors.as_ref().expect("solved above");
                let sol = if case == BvpCase::SeekerPhi1 { phi1 } else { phi2 };
                (states.iter().map(|x| sol.residual(x)).collect::<Result<Vec<_>, _>>()?, None)
            }
        };
        let max_residual = residuals.iter().copied().fold(0.0, f64::max);
        let pass = residuals.iter().all(|r| r.is_finite()) && max_residual <= c.threshold;
        cases.push(BvpCaseReport { case, residuals, max_residual, reference_error, pass });
    }
    let pass = cases.iter().all(|k| k.pass);
    let report = BvpCheckReport { panels: c.panels, threshold: c.threshold, cases, pass };
    let path = out_path(out, &c.output);
    write_report(&path, "bvp-check", &report)?;
    let parts: Vec<String> = report.cases.iter().map(|k| format!("{:?} {:.3e}", k.case, k.max_residual)).collect();
    Ok(Outcome {
        files: vec![path],
        summary: format!("bvp-check ({} panels): {} {}", c.panels, parts.join(", "), if pass { "PASS" } else { "FAIL" }),
        verdict: if pass { Verdict::Ok } else { Verdict::CriterionFailed },
    })
}

// --------------------------------------------------------- lyapunov-check

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovRun {
    pub p0: [f64; 3],
    pub trace: LyapunovTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldLyapunovCheck {
    pub field: SystemName,
    pub runs: Vec<LyapunovRun>,
    pub max_step_increase: f64,
    pub nonincreasing: bool,
    /// Only checked for fields with a global gradient inequality (the quadratic one).
    pub gradient_reached: Option<bool>,
    pub max_final_gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovCheckReport {
    pub seed: u64,
    pub dt: f64,
    pub horizon: f64,
    pub increase_tolerance: f64,
    pub gradient_threshold: f64,
    pub fields: Vec<FieldLyapunovCheck>,
    pub pass: bool,
}

/// Starts for the descent runs: `‖p‖ ∈ [1, 6]`, random attitude.
fn descent_starts(seed: u64, count: usize) -> Vec<AveragedSeekerState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let dir = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            let p = dir.normalize() * rng.gen_range(1.0..6.0);
            let w = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            AveragedSeekerState { p, q: exp_so3(&w) }
        })
        .collect()
}

pub fn lyapunov_check(c: &LyapunovCheckConfig, out: &Path) -> Result<Outcome, CliError> {
    let starts = descent_starts(c.seed, c.starts);
    let mut fields = Vec::new();
    for &name in &c.fields {
        let f = field(name)?;
        let mut runs = Vec::with_capacity(starts.len());
        for s in &starts {
            let trace = lyapunov_descent(&f, s, c.dt, c.horizon, c.gradient_threshold)?;
            runs.push(LyapunovRun { p0: [s.p.x, s.p.y, s.p.z], trace });
        }
        let max_step_increase = runs.iter().map(|r| r.trace.max_step_increase).fold(f64::NEG_INFINITY, f64::max);
        let gradient_reached = f.kappa().map(|_| runs.iter().all(|r| r.trace.time_to_threshold.is_some()));
        let max_final_gradient_norm = runs.iter().map(|r| r.trace.final_gradient_norm).fold(0.0, f64::max);
        fields.push(FieldLyapunovCheck {
            field: name,
            runs,
            max_step_increase,
            nonincreasing: max_step_increase < c.increase_tolerance,
            gradient_reached,
            max_final_gradient_norm,
        });
    }
    let pass = fields.iter().all(|f| f.nonincreasing && f.gradient_reached != Some(false));
    let report = LyapunovCheckReport {
        seed: c.seed,
        dt: c.dt,
        horizon: c.horizon,
        increase_tolerance: c.increase_tolerance,
        gradient_threshold: c.gradient_threshold,
        fields,
        pass,
    };
    let path = out_path(out, &c.output);
    write_report(&path, "lyapunov-check", &report)?;
    let parts: Vec<String> = report
        .fields
        .iter()
        .map(|f| {
            let grad = match f.gradient_reached {
                Some(true) => format!(", ‖∇c‖ < {:.0e} reached", c.gradient_threshold),
                Some(false) => format!(", ‖∇c‖ < {:.0e} NOT reached (worst {:.3e})", c.gradient_threshold, f.max_final_gradient_norm),
                None => String::new(),
            };
            format!("{:?}: max step increase {:.3e}{grad}", f.field, f.max_step_increase)
        })
        .collect();
    Ok(Outcome {
        files: vec![path],
        summary: format!("lyapunov-check: {} {}", parts.join("; "), if pass { "PASS" } else { "FAIL" }),
        verdict: if pass { Verdict::Ok } else { Verdict::CriterionFailed },
    })
}
