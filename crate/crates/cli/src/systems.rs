//! The built-in systems behind [`SystemName`].

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use oscavg_core::averaging::average_system;
use oscavg_core::harness::{CompareInit, SweepCase};
use oscavg_core::numkit::{Matrix, Vector};
use oscavg_core::seeker::{builtin_field, AveragedSeeker, ScalarField, SeekerConfig, SeekerState, SeekerSystem};
use oscavg_core::so3::Rotation;
use oscavg_core::system::OscillatorySystemSpec;

use crate::config::{InitialState, SystemName};
use crate::CliError;

pub fn field(name: SystemName) -> Result<ScalarField, CliError> {
    let f = name
        .field_name()
        .ok_or_else(|| CliError::Validation(format!("{name:?} is not a seeker system")))?;
    Ok(builtin_field(f)?)
}

fn scalar(v: f64) -> Vector {
    Vector::from_element(1, v)
}

/// `ẋ = −x + sin τ + y cos τ` with `A = −1`, `φ₀(x) = x`. Its average is `ẋ = −x/2`.
pub fn linear_test() -> OscillatorySystemSpec {
    OscillatorySystemSpec::new(1, 1, Matrix::from_element(1, 1, -1.0), 2.0 * PI, |x: &Vector| x.clone())
        .expect("valid builtin")
        .with_f2(|x, y, t| scalar(-x[0] + t.sin() + y[0] * t.cos()))
}

/// Only the fast layer moves: `A = diag(−1, −2)`, `φ₀ = 0`.
pub fn boundary_layer() -> OscillatorySystemSpec {
    let a = Matrix::from_row_slice(2, 2, &[-1.0, 0.0, 0.0, -2.0]);
    OscillatorySystemSpec::new(1, 2, a, 2.0 * PI, |_: &Vector| Vector::zeros(2)).expect("valid builtin")
}

pub fn test_system(name: SystemName) -> Result<OscillatorySystemSpec, CliError> {
    match name {
        SystemName::LinearTest => Ok(linear_test()),
        SystemName::BoundaryLayer => Ok(boundary_layer()),
        other => Err(CliError::Validation(format!("{other:?} is not a test system"))),
    }
}

pub fn attitude(init: &InitialState) -> Result<Rotation, CliError> {
    match init.attitude {
        None => Ok(Rotation::identity()),
        Some(rows) => {
            let m = Matrix3::from_fn(|i, j| rows[i][j]);
            Rotation::new(m).map_err(|e| CliError::Validation(format!("initial.attitude: {e}")))
        }
    }
}

pub fn seeker_start(config: &SeekerConfig, field: &ScalarField, init: &InitialState) -> Result<SeekerState, CliError> {
    let p = match &init.x0 {
        Some(v) => Vector3::new(v[0], v[1], v[2]),
        None => Vector3::new(6.0, 2.0, -2.0),
    };
    Ok(SeekerState::initial(config, field, p, &attitude(init)?))
}

/// Slow/fast start for a test system. `filter_init = zero` starts `y` at the
/// origin; for the boundary layer, whose `φ₀` is zero, that falls back to `y = (1, 0.2)`.
pub fn test_start(name: SystemName, spec: &OscillatorySystemSpec, init: &InitialState) -> CompareInit {
    let x0 = scalar(init.x0.as_ref().map_or(1.0, |v| v[0]));
    match (init.filter_init, name) {
        (oscavg_core::seeker::FilterInit::QuasiSteady, _) => CompareInit::quasi_steady(spec, &x0, 0.0),
        (_, SystemName::BoundaryLayer) => CompareInit::new(&x0, &Vector::from_vec(vec![1.0, 0.2]), 0.0),
        _ => CompareInit::new(&x0, &Vector::zeros(spec.fast_dim()), 0.0),
    }
}

pub fn split(state: &Vector, n: usize) -> CompareInit {
    CompareInit::new(&state.rows(0, n).into_owned(), &state.rows(n, state.len() - n).into_owned(), 0.0)
}

/// Builds one rung of a convergence sweep.
pub fn sweep_case(name: SystemName, init: &InitialState, projection: bool, omega: f64) -> oscavg_core::Result<SweepCase> {
    let wrap = |e: CliError| oscavg_core::Error::Config(e.to_string());
    if name.is_seeker() {
        let f = field(name).map_err(wrap)?;
        let config = SeekerConfig { filter_init: init.filter_init, ..SeekerConfig::new(omega) };
        let start = seeker_start(&config, &f, init).map_err(wrap)?;
        Ok(SweepCase {
            system: Arc::new(SeekerSystem::new(f.clone(), projection)),
            averaged: Arc::new(AveragedSeeker::new(f, projection)),
            init: split(&start.to_vector(), 12),
        })
    } else {
        let spec = test_system(name).map_err(wrap)?;
        let averaged = Arc::new(average_system(spec.clone())?);
        let init = test_start(name, &spec, init);
        Ok(SweepCase { system: Arc::new(spec), averaged, init })
    }
}
