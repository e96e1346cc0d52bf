//! Long seeker runs: convergence in ω and the reference log-field run.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::Vector3;
use oscavg_core::harness::{fit_boundary_layer, simulate, sweep_convergence, CompareInit, RunOptions, SweepCase};
use oscavg_core::seeker::{AveragedSeeker, FilterInit, ScalarField, SeekerConfig, SeekerState, SeekerSystem};

fn init_for(config: &SeekerConfig, field: &ScalarField) -> CompareInit {
    let s = SeekerState::reference(config, field).to_vector();
    CompareInit::new(&s.rows(0, 12).into_owned(), &s.rows(12, 2).into_owned(), 0.0)
}

#[test]
fn deviation_shrinks_like_inverse_root_omega() {
    let field = ScalarField::quadratic(Vector3::zeros());
    let builder = |omega: f64| {
        let config = SeekerConfig::new(omega);
        Ok(SweepCase {
            system: Arc::new(SeekerSystem::new(field.clone(), true)),
            averaged: Arc::new(AveragedSeeker::new(field.clone(), true)),
            init: init_for(&config, &field),
        })
    };
    let omegas: Vec<f64> = (0..5).map(|k| 4.0 * PI * 2f64.powi(k)).collect();
    let opts = RunOptions { stride: 50, ..RunOptions::default() };
    let report = sweep_convergence(builder, &omegas, 5.0, &opts, -0.4).unwrap();
    eprintln!("errors {:?} slope {:?}", report.errors(), report.slope);
    assert!(report.strictly_decreasing, "{:?}", report.errors());
    assert!(report.slope_pass);
}

#[test]
fn reference_run_approaches_the_source() {
    let field = ScalarField::log_source();
    let config = SeekerConfig::new(4.0 * PI);
    let system = SeekerSystem::new(field.clone(), true);
    let rec = simulate(&system, &init_for(&config, &field), config.omega, 100.0, &RunOptions { stride: 20, ..RunOptions::default() }).unwrap();
    assert!(rec.completed());
    let norms: Vec<f64> = rec.samples.iter().map(|s| Vector3::new(s.x[0], s.x[1], s.x[2]).norm()).collect();
    let last = rec.samples.last().unwrap();
    let c_end = field.value(&Vector3::new(last.x[0], last.x[1], last.x[2]));
    let tail = &norms[norms.len() * 3 / 4..];
    eprintln!(
        "c(100) = {c_end}, max |p| = {}, tail max |p| = {}, residual {:?}",
        norms.iter().cloned().fold(0.0, f64::max),
        tail.iter().cloned().fold(0.0, f64::max),
        rec.max_manifold_residual
    );
    assert!(c_end > -0.5);
    assert!(norms.iter().all(|n| *n <= 10.0));
    assert!(tail.iter().all(|n| *n <= 1.5));
    assert!(rec.max_manifold_residual.unwrap() < 1e-6);
}

#[test]
fn boundary_layer_from_zero_filter_state() {
    let field = ScalarField::log_source();
    let config = SeekerConfig { filter_init: FilterInit::Zero, ..SeekerConfig::new(4.0 * PI) };
    let system = SeekerSystem::new(field.clone(), true);
    let rec = simulate(&system, &init_for(&config, &field), config.omega, 1.0, &RunOptions::default()).unwrap();
    let fit = fit_boundary_layer(&rec, config.omega).unwrap();
    eprintln!("{fit:?}");
    assert!((0.5..=1.5).contains(&fit.lambda));
}
