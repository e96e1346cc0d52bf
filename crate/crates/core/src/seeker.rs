//! Dither-driven 3D source seeking on SO(3).
//!
//! A rigid body at `p` with attitude `R` measures a scalar field `c` through a
//! sensor mounted at `p_s = p + rRe₂`, `r = 1/√ω`. It rolls at rate `ω` about
//! its body axis `e₁`, surges with `v = 2√ω cos(2ωt − c(p_s))` along `e₁`, and
//! pitches with `√ω·Cy`, where `y` is the state of the band-pass filter
//! `ẏ = ω(Ay + Bc(p_s))`.
//!
//! Removing the roll, `Q = R R₀(ωt)ᵀ` with `R₀(τ) = exp(τ ê₁)`, gives the
//! simulated state `(p, q, y) ∈ ℝ³ × ℝ⁹ × ℝ²` (q = columns of Q stacked):
//!
//! ```text
//! ṗ = 2√ω cos(2ωt − c(p_s)) q₁
//! Q̇ = √ω Q hat(Λ),   Λ = (Cy) R₀(ωt) e₃
//! ẏ = ω(Ay + Bc(p_s)),   p_s = p + r(cos ωt q₂ + sin ωt q₃)
//! ```
//!
//! Its second-order average is
//!
//! ```text
//! ṗ̄ = Q̄e₁e₁ᵀQ̄ᵀ∇c(p̄),   Q̄̇ = Q̄ hat(Λ̄),   Λ̄ = ¼ e₁ × Q̄ᵀ∇c(p̄)
//! ```
//!
//! The sign of `Λ̄` is the one that steers `q₁` toward `∇c`; it is what both
//! the change of variables above and the numeric average produce.

use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::averaging::AveragedField;
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Vector};
use crate::so3::{embed, hat, manifold_residual, project_frame_in_place, EmbeddedFrame, Rotation};
use crate::system::{OscillatorySystemSpec, SlowFastSystem};

/// Length of the stacked seeker state `[p, q, y]`.
pub const STATE_DIM: usize = 14;
/// Length of the stacked averaged state `[p̄, q̄]`.
pub const AVERAGED_DIM: usize = 12;

type Scalar3 = Arc<dyn Fn(&Vector3<f64>) -> f64 + Send + Sync>;
type Grad3 = Arc<dyn Fn(&Vector3<f64>) -> Vector3<f64> + Send + Sync>;
type Hess3 = Arc<dyn Fn(&Vector3<f64>) -> Matrix3<f64> + Send + Sync>;

/// A scalar signal field with its analytic gradient.
#[derive(Clone)]
pub struct ScalarField {
    name: String,
    c: Scalar3,
    grad: Grad3,
    hess: Option<Hess3>,
    p_star: Vector3<f64>,
    kappa: Option<f64>,
}

impl std::fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScalarField")
            .field("name", &self.name)
            .field("p_star", &self.p_star)
            .field("kappa", &self.kappa)
            .finish_non_exhaustive()
    }
}

impl ScalarField {
    pub fn new(
        name: impl Into<String>,
        c: impl Fn(&Vector3<f64>) -> f64 + Send + Sync + 'static,
        grad: impl Fn(&Vector3<f64>) -> Vector3<f64> + Send + Sync + 'static,
        p_star: Vector3<f64>,
    ) -> Self {
        Self { name: name.into(), c: Arc::new(c), grad: Arc::new(grad), hess: None, p_star, kappa: None }
    }

    pub fn with_hessian(mut self, h: impl Fn(&Vector3<f64>) -> Matrix3<f64> + Send + Sync + 'static) -> Self {
        self.hess = Some(Arc::new(h));
        self
    }

    pub fn with_kappa(mut self, kappa: f64) -> Self {
        self.kappa = Some(kappa);
        self
    }

    /// `c(p) = −log(1 + pᵀp/2)`: a stationary source at the origin.
    ///
    /// No global `κ` exists for this field: `(c* − c)/‖∇c‖²` grows without
    /// bound as `‖p‖ → ∞`.
    pub fn log_source() -> Self {
        let s = |p: &Vector3<f64>| 1.0 + 0.5 * p.norm_squared();
        Self::new("log", move |p| -s(p).ln(), move |p| -p / s(p), Vector3::zeros()).with_hessian(move |p| {
            let s = s(p);
            -Matrix3::identity() / s + p * p.transpose() / (s * s)
        })
    }

    /// `c(p) = −½‖p − p*‖²`, which satisfies the gradient inequality with `κ = ½`.
    pub fn quadratic(p_star: Vector3<f64>) -> Self {
        Self::new("quadratic", move |p| -0.5 * (p - p_star).norm_squared(), move |p| -(p - p_star), p_star)
            .with_hessian(|_| -Matrix3::identity())
            .with_kappa(0.5)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self, p: &Vector3<f64>) -> f64 {
        (self.c)(p)
    }

    pub fn gradient(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (self.grad)(p)
    }

    /// Analytic Hessian, or central differences of the gradient.
    pub fn hessian(&self, p: &Vector3<f64>) -> Matrix3<f64> {
        if let Some(h) = &self.hess {
            return h(p);
        }
        let mut out = Matrix3::zeros();
        for i in 0..3 {
            let h = f64::EPSILON.cbrt() * (1.0 + p[i].abs());
            let mut plus = *p;
            let mut minus = *p;
            plus[i] += h;
            minus[i] -= h;
            out.set_column(i, &((self.gradient(&plus) - self.gradient(&minus)) / (2.0 * h)));
        }
        out
    }

    pub fn p_star(&self) -> Vector3<f64> {
        self.p_star
    }

    pub fn kappa(&self) -> Option<f64> {
        self.kappa
    }

    /// `c(p*) − c(p)`.
    pub fn lyapunov(&self, p: &Vector3<f64>) -> f64 {
        self.value(&self.p_star) - self.value(p)
    }
}

/// The built-in fields: the log source and the quadratic field, both centred
/// at the origin.
pub fn builtin_fields() -> Vec<ScalarField> {
    vec![ScalarField::log_source(), ScalarField::quadratic(Vector3::zeros())]
}

/// Looks a built-in field up by name.
pub fn builtin_field(name: &str) -> Result<ScalarField> {
    builtin_fields()
        .into_iter()
        .find(|f| f.name() == name)
        .ok_or_else(|| Error::Config(format!("unknown field '{name}' (expected 'log' or 'quadratic')")))
}

/// How the filter state starts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FilterInit {
    /// `y(0) = [c(p_s(0)), c(p_s(0))]`
    #[default]
    QuasiSteady,
    /// `y(0) = 0`
    Zero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeekerConfig {
    pub omega: f64,
    #[serde(default = "default_steps")]
    pub steps_per_fast_period: usize,
    #[serde(default = "default_true")]
    pub projection: bool,
    #[serde(default)]
    pub filter_init: FilterInit,
}

fn default_steps() -> usize {
    200
}

fn default_true() -> bool {
    true
}

impl SeekerConfig {
    pub fn new(omega: f64) -> Self {
        Self { omega, steps_per_fast_period: default_steps(), projection: true, filter_init: FilterInit::QuasiSteady }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega > 0.0) {
            return Err(Error::Config(format!("omega must be positive and finite, got {}", self.omega)));
        }
        if self.steps_per_fast_period < 50 {
            return Err(Error::Config(format!(
                "steps_per_fast_period must be at least 50, got {}",
                self.steps_per_fast_period
            )));
        }
        Ok(())
    }

    /// Sensor offset `r = 1/√ω`.
    pub fn r(&self) -> f64 {
        1.0 / self.omega.sqrt()
    }

    /// Fast period `2π/ω`.
    pub fn fast_period(&self) -> f64 {
        2.0 * PI / self.omega
    }

    pub fn dt(&self) -> f64 {
        self.fast_period() / self.steps_per_fast_period as f64
    }
}

/// `(p, q, y)` of the transformed seeker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeekerState {
    pub p: Vector3<f64>,
    pub frame: EmbeddedFrame,
    pub y: Vector2<f64>,
}

impl SeekerState {
    /// Initial state at `t = 0` from position and attitude (`Q = R` there).
    pub fn initial(config: &SeekerConfig, field: &ScalarField, p: Vector3<f64>, attitude: &Rotation) -> Self {
        let frame = embed(attitude);
        let y = match config.filter_init {
            FilterInit::Zero => Vector2::zeros(),
            FilterInit::QuasiSteady => {
                let probe = Self { p, frame, y: Vector2::zeros() };
                let c = field.value(&sensor_position(&probe, 0.0, config.r()));
                Vector2::new(c, c)
            }
        };
        Self { p, frame, y }
    }

    /// The reference start: `p = [6, 2, −2]`, `R = Id`.
    pub fn reference(config: &SeekerConfig, field: &ScalarField) -> Self {
        Self::initial(config, field, Vector3::new(6.0, 2.0, -2.0), &Rotation::identity())
    }

    pub fn to_vector(&self) -> Vector {
        let mut v = Vector::zeros(STATE_DIM);
        v.rows_mut(0, 3).copy_from(&self.p);
        v.rows_mut(3, 9).copy_from(self.frame.vector());
        v.rows_mut(12, 2).copy_from(&self.y);
        v
    }

    /// Unchecked read of a stacked state; the frame may be off the manifold.
    pub fn from_vector(v: &Vector) -> Result<Self> {
        if v.len() != STATE_DIM {
            return Err(Error::Dimension(format!("seeker state has length {STATE_DIM}, got {}", v.len())));
        }
        Ok(Self {
            p: Vector3::new(v[0], v[1], v[2]),
            frame: EmbeddedFrame::from_slice_unchecked(&v.as_slice()[3..12]),
            y: Vector2::new(v[12], v[13]),
        })
    }
}

/// `(p̄, Q̄)` of the averaged seeker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AveragedSeekerState {
    pub p: Vector3<f64>,
    pub q: Rotation,
}

impl AveragedSeekerState {
    pub fn to_vector(&self) -> Vector {
        let mut v = Vector::zeros(AVERAGED_DIM);
        v.rows_mut(0, 3).copy_from(&self.p);
        v.rows_mut(3, 9).copy_from(embed(&self.q).vector());
        v
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        if v.len() != AVERAGED_DIM {
            return Err(Error::Dimension(format!("averaged state has length {AVERAGED_DIM}, got {}", v.len())));
        }
        let q = crate::so3::extract(&EmbeddedFrame::from_slice(&v.as_slice()[3..12])?)?;
        Ok(Self { p: Vector3::new(v[0], v[1], v[2]), q })
    }
}

fn column(v: &[f64], start: usize) -> Vector3<f64> {
    Vector3::new(v[start], v[start + 1], v[start + 2])
}

fn frame_matrix(q: &[f64]) -> Matrix3<f64> {
    Matrix3::from_column_slice(&q[..9])
}

/// `R₀(τ)e₃`, the pitch axis of the rolling body in the de-rolled frame.
pub fn pitch_axis(tau: f64) -> Vector3<f64> {
    Vector3::new(0.0, -tau.sin(), tau.cos())
}

/// `cos τ q₂ + sin τ q₃`, the sensor direction `Re₂`.
fn sensor_direction(q: &[f64], tau: f64) -> Vector3<f64> {
    column(q, 3) * tau.cos() + column(q, 6) * tau.sin()
}

/// `p + r(cos τ q₂ + sin τ q₃)`.
pub fn sensor_position(state: &SeekerState, tau: f64, r: f64) -> Vector3<f64> {
    state.p + sensor_direction(state.frame.as_slice(), tau) * r
}

/// Filter matrices: a band-pass centred on the roll frequency.
pub fn filter_a() -> Matrix {
    Matrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0])
}

pub fn filter_b() -> Vector2<f64> {
    Vector2::new(0.0, 1.0)
}

pub fn filter_c() -> [f64; 2] {
    [-1.0, 1.0]
}

fn filter_output(y0: f64, y1: f64) -> f64 {
    -y0 + y1
}

/// Exact right-hand side of the transformed seeker at frequency `omega`.
fn seeker_rhs(field: &ScalarField, omega: f64, t: f64, s: &[f64], out: &mut [f64]) {
    let tau = omega * t;
    let root = omega.sqrt();
    let q = &s[3..12];
    let p = column(s, 0);
    let cs = field.value(&(p + sensor_direction(q, tau) / root));

    let surge = 2.0 * root * (2.0 * tau - cs).cos();
    for i in 0..3 {
        out[i] = surge * q[i];
    }
    // Q̇ e_j = √ω Q (Λ × e_j)
    let lambda = pitch_axis(tau) * (root * filter_output(s[12], s[13]));
    let qm = frame_matrix(q);
    let qdot = qm * hat(&lambda);
    out[3..12].copy_from_slice(qdot.as_slice());
    out[12] = omega * (-s[12] + s[13]);
    out[13] = omega * (-s[13] + cs);
}

/// The seeker as a slow/fast system with `x = (p, q)`, `y` the filter state.
#[derive(Clone, Debug)]
pub struct SeekerSystem {
    field: ScalarField,
    projection: bool,
    a: Matrix,
}

impl SeekerSystem {
    pub fn new(field: ScalarField, projection: bool) -> Self {
        Self { field, projection, a: filter_a() }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }
}

impl SlowFastSystem for SeekerSystem {
    fn slow_dim(&self) -> usize {
        12
    }

    fn fast_dim(&self) -> usize {
        2
    }

    fn period(&self) -> f64 {
        2.0 * PI
    }

    fn fast_matrix(&self) -> &Matrix {
        &self.a
    }

    fn quasi_steady(&self, x: &Vector) -> Vector {
        let c = self.field.value(&column(x.as_slice(), 0));
        Vector::from_vec(vec![c, c])
    }

    fn derivative(&self, omega: f64, t: f64, state: &Vector) -> Vector {
        let mut out = Vector::zeros(STATE_DIM);
        seeker_rhs(&self.field, omega, t, state.as_slice(), out.as_mut_slice());
        out
    }

    fn post_step(&self, state: &mut Vector) -> Result<()> {
        if self.projection {
            project_frame_in_place(&mut state.as_mut_slice()[3..12])?;
        }
        Ok(())
    }

    fn lyapunov(&self, x: &Vector) -> Option<f64> {
        Some(self.field.lyapunov(&column(x.as_slice(), 0)))
    }

    fn manifold_residual(&self, x: &Vector) -> Option<f64> {
        Some(manifold_residual(&x.as_slice()[3..12]))
    }
}

/// `(t, [p, q, y]) ↦ derivative` at the configured frequency.
pub fn seeker_field(config: &SeekerConfig, field: &ScalarField) -> Result<impl Fn(f64, &Vector) -> Vector + Send + Sync> {
    config.validate()?;
    let omega = config.omega;
    let field = field.clone();
    Ok(move |t: f64, s: &Vector| {
        let mut out = Vector::zeros(STATE_DIM);
        seeker_rhs(&field, omega, t, s.as_slice(), out.as_mut_slice());
        out
    })
}

/// Which inputs drive the raw rigid body.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawControls {
    /// Surge velocity `v`.
    pub dither: bool,
    /// Pitch rate `√ω Cy`.
    pub steering: bool,
}

impl Default for RawControls {
    fn default() -> Self {
        Self { dither: true, steering: true }
    }
}

/// Untransformed kinematics on `[p, vec R, y] ∈ ℝ¹⁴`:
/// `ṗ = Rv`, `Ṙ = R hat(ωe₁ + √ω Cy e₃)`, `ẏ = ω(Ay + Bc(p + rRe₂))`.
pub fn raw_kinematics_field(
    config: &SeekerConfig,
    field: &ScalarField,
    controls: RawControls,
) -> Result<impl Fn(f64, &Vector) -> Vector + Send + Sync> {
    config.validate()?;
    let omega = config.omega;
    let root = omega.sqrt();
    let r = config.r();
    let field = field.clone();
    Ok(move |t: f64, s: &Vector| {
        let s = s.as_slice();
        let rm = frame_matrix(&s[3..12]);
        let p = column(s, 0);
        let cs = field.value(&(p + rm.column(1) * r));
        let mut out = Vector::zeros(STATE_DIM);
        if controls.dither {
            let v = 2.0 * root * (2.0 * omega * t - cs).cos();
            out.rows_mut(0, 3).copy_from(&(rm.column(0) * v));
        }
        let pitch = if controls.steering { root * filter_output(s[12], s[13]) } else { 0.0 };
        let rdot = rm * hat(&Vector3::new(omega, 0.0, pitch));
        out.as_mut_slice()[3..12].copy_from_slice(rdot.as_slice());
        out[12] = omega * (-s[12] + s[13]);
        out[13] = omega * (-s[13] + cs);
        out
    })
}

/// Integrates the raw and the transformed seeker side by side from the same
/// initial data and returns `max ‖p_raw − p‖ + ‖R_raw − Q R₀(ωt)‖_F`.
///
/// Neither run is projected, so the two differ only by integration error.
pub fn cross_check(config: &SeekerConfig, field: &ScalarField, init: &SeekerState, horizon: f64) -> Result<f64> {
    if !(horizon >= 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon must be non-negative, got {horizon}")));
    }
    if horizon == 0.0 {
        return Ok(0.0);
    }
    let transformed = seeker_field(config, field)?;
    let raw = raw_kinematics_field(config, field, RawControls::default())?;
    let grid = crate::numkit::TimeGrid::covering(0.0, horizon, config.dt())?;
    let mut x = init.to_vector();
    let mut z = x.clone();
    let mut worst: f64 = 0.0;
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        x = crate::numkit::rk4_step(&transformed, t, &x, grid.dt());
        z = crate::numkit::rk4_step(&raw, t, &z, grid.dt());
        let t1 = grid.time(k + 1);
        let roll = crate::so3::exp_so3(&Vector3::new(config.omega * t1, 0.0, 0.0));
        let rebuilt = frame_matrix(&x.as_slice()[3..12]) * roll.matrix();
        let dp = (column(x.as_slice(), 0) - column(z.as_slice(), 0)).norm();
        let dr = (rebuilt - frame_matrix(&z.as_slice()[3..12])).norm();
        let dev = dp + dr;
        if !dev.is_finite() {
            return Err(Error::Divergence { step: k + 1, t: t1 });
        }
        worst = worst.max(dev);
    }
    Ok(worst)
}

/// Closed-form averaged field on `[p̄, q̄] ∈ ℝ¹²`.
pub fn closed_form_average(field: &ScalarField, x: &Vector) -> Vector {
    let s = x.as_slice();
    let p = column(s, 0);
    let qm = frame_matrix(&s[3..12]);
    let g = field.gradient(&p);
    let q1 = qm.column(0);
    let mut out = Vector::zeros(AVERAGED_DIM);
    out.rows_mut(0, 3).copy_from(&(q1 * q1.dot(&g)));
    let lambda = averaged_angular_velocity(&qm, &g);
    out.as_mut_slice()[3..12].copy_from_slice((qm * hat(&lambda)).as_slice());
    out
}

/// `Λ̄ = ¼ e₁ × Qᵀ∇c`.
pub fn averaged_angular_velocity(q: &Matrix3<f64>, grad: &Vector3<f64>) -> Vector3<f64> {
    Vector3::x().cross(&(q.transpose() * grad)) * 0.25
}

/// `[p̄, q̄] ↦ derivative` of the averaged seeker.
pub fn averaged_seeker_field(field: &ScalarField) -> impl Fn(&Vector) -> Vector + Send + Sync {
    let field = field.clone();
    move |x: &Vector| closed_form_average(&field, x)
}

/// The averaged seeker as an [`AveragedField`], optionally re-projected onto
/// SO(3) after each step.
#[derive(Clone, Debug)]
pub struct AveragedSeeker {
    field: ScalarField,
    projection: bool,
}

impl AveragedSeeker {
    pub fn new(field: ScalarField, projection: bool) -> Self {
        Self { field, projection }
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }
}

impl AveragedField for AveragedSeeker {
    fn dim(&self) -> usize {
        AVERAGED_DIM
    }

    fn eval(&self, x: &Vector) -> Vector {
        closed_form_average(&self.field, x)
    }

    fn post_step(&self, x: &mut Vector) -> Result<()> {
        if self.projection {
            project_frame_in_place(&mut x.as_mut_slice()[3..12])?;
        }
        Ok(())
    }
}

/// `(V_c, V̇_c)` with `V_c = c(p*) − c(p̄)` and `V̇_c = −(∇c(p̄)ᵀQ̄e₁)²`.
pub fn lyapunov_value_and_rate(field: &ScalarField, state: &AveragedSeekerState) -> (f64, f64) {
    let g = field.gradient(&state.p);
    let q1 = state.q.matrix().column(0);
    (field.lyapunov(&state.p), -q1.dot(&g).powi(2))
}

/// The seeker written in the general slow/fast form with `x = (p, q) ∈ ℝ¹²`,
/// `y ∈ ℝ²`, `T = 2π`.
///
/// Expanding `c(p_s)` about `p` with `w = cos τ q₂ + sin τ q₃`, `a = ∇c·w`:
///
/// ```text
/// f₁ = [2cos(2τ − c)q₁ ; vec(Q hat((Cy)R₀e₃))]     g₁ = B a
/// f₂ = [2a sin(2τ − c)q₁ ; 0]                      g₂ = B ½wᵀ∇²c w
/// ```
///
/// and `φ₀(x) = [c(p), c(p)]`. Higher-order terms of the expansion are dropped.
pub fn as_system_spec(field: &ScalarField) -> Result<OscillatorySystemSpec> {
    let f = field.clone();
    let phi0 = move |x: &Vector| {
        let c = f.value(&column(x.as_slice(), 0));
        Vector::from_vec(vec![c, c])
    };
    let f = field.clone();
    let f1 = move |x: &Vector, y: &Vector, tau: f64| {
        let s = x.as_slice();
        let c = f.value(&column(s, 0));
        let mut out = Vector::zeros(12);
        let surge = 2.0 * (2.0 * tau - c).cos();
        for i in 0..3 {
            out[i] = surge * s[3 + i];
        }
        let lambda = pitch_axis(tau) * filter_output(y[0], y[1]);
        out.as_mut_slice()[3..12].copy_from_slice((frame_matrix(&s[3..12]) * hat(&lambda)).as_slice());
        out
    };
    let f = field.clone();
    let f2 = move |x: &Vector, _: &Vector, tau: f64| {
        let s = x.as_slice();
        let p = column(s, 0);
        let a = f.gradient(&p).dot(&sensor_direction(&s[3..12], tau));
        let k = 2.0 * a * (2.0 * tau - f.value(&p)).sin();
        let mut out = Vector::zeros(12);
        for i in 0..3 {
            out[i] = k * s[3 + i];
        }
        out
    };
    let f = field.clone();
    let g1 = move |x: &Vector, _: &Vector, tau: f64| {
        let s = x.as_slice();
        let a = f.gradient(&column(s, 0)).dot(&sensor_direction(&s[3..12], tau));
        Vector::from_vec(vec![0.0, a])
    };
    let f = field.clone();
    let g2 = move |x: &Vector, _: &Vector, tau: f64| {
        let s = x.as_slice();
        let w = sensor_direction(&s[3..12], tau);
        Vector::from_vec(vec![0.0, 0.5 * w.dot(&(f.hessian(&column(s, 0)) * w))])
    };
    let f = field.clone();
    let phi0_jacobian = move |x: &Vector| {
        let g = f.gradient(&column(x.as_slice(), 0));
        let mut j = Matrix::zeros(2, 12);
        for row in 0..2 {
            for i in 0..3 {
                j[(row, i)] = g[i];
            }
        }
        j
    };
    let f1_dy = |x: &Vector, _: &Vector, tau: f64| {
        let dq = frame_matrix(&x.as_slice()[3..12]) * hat(&pitch_axis(tau));
        let [c0, c1] = filter_c();
        let mut j = Matrix::zeros(12, 2);
        for (i, v) in dq.as_slice().iter().enumerate() {
            j[(3 + i, 0)] = v * c0;
            j[(3 + i, 1)] = v * c1;
        }
        j
    };
    Ok(OscillatorySystemSpec::new(12, 2, filter_a(), 2.0 * PI, phi0)?
        .with_f1(f1)
        .with_f2(f2)
        .with_g1(g1)
        .with_g2(g2)
        .with_phi0_jacobian(phi0_jacobian)
        .with_f1_dy(f1_dy)
        .with_g1_dy(|_, _, _| Matrix::zeros(2, 2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{integrate_rk4_with, jacobian_fd, TimeGrid};
    use crate::so3::exp_so3;
    use crate::system::check_assumption_a;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id_state(p: Vector3<f64>, y: Vector2<f64>) -> SeekerState {
        SeekerState { p, frame: embed(&Rotation::identity()), y }
    }

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
        let w = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        exp_so3(&w)
    }

    #[test]
    fn log_field_values() {
        let f = ScalarField::log_source();
        assert_eq!(f.value(&Vector3::zeros()), 0.0);
        let p = Vector3::new(6.0, 2.0, -2.0);
        assert!((f.value(&p) - (-(23f64).ln())).abs() < 1e-12);
        assert!((f.value(&p) + 3.135494).abs() < 1e-6);
        let g = f.gradient(&p);
        let expect = Vector3::new(-0.260870, -0.086957, 0.086957);
        assert!((g - expect).amax() < 1e-6);
        assert!((g + p / 23.0).amax() < 1e-15);
    }

    #[test]
    fn builtin_gradients_and_hessians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for field in builtin_fields() {
            assert!(field.gradient(&field.p_star()).norm() < 1e-10);
            for _ in 0..50 {
                let p = Vector3::new(rng.gen_range(-5.7..5.7), rng.gen_range(-5.7..5.7), rng.gen_range(-5.7..5.7));
                let pv = Vector::from_column_slice(p.as_slice());
                let j = jacobian_fd(|v| Vector::from_element(1, field.value(&column(v.as_slice(), 0))), &pv, None).unwrap();
                let g = field.gradient(&p);
                for i in 0..3 {
                    assert!((j[(0, i)] - g[i]).abs() < 1e-6, "{} at {p}", field.name());
                }
                let numeric = ScalarField::new("fd", |_| 0.0, {
                    let f = field.clone();
                    move |p| f.gradient(p)
                }, Vector3::zeros());
                assert!((numeric.hessian(&p) - field.hessian(&p)).amax() < 1e-6);
            }
        }
        assert_eq!(ScalarField::quadratic(Vector3::zeros()).kappa(), Some(0.5));
        assert_eq!(ScalarField::log_source().kappa(), None);
        assert!(builtin_field("nope").is_err());
    }

    #[test]
    fn sensor_position_examples() {
        let p = Vector3::new(1.0, -2.0, 0.5);
        let s = id_state(p, Vector2::zeros());
        assert_eq!(sensor_position(&s, 0.7, 0.0), p);
        assert_eq!(sensor_position(&s, 0.0, 1.0), p + Vector3::<f64>::y());
        assert!((sensor_position(&s, PI / 2.0, 2.0) - (p + Vector3::z() * 2.0)).norm() < 1e-15);
    }

    #[test]
    fn pitch_axis_is_rolled_e3() {
        for k in 0..12 {
            let tau = 0.55 * k as f64;
            let rolled = exp_so3(&Vector3::new(tau, 0.0, 0.0)).apply(&Vector3::z());
            assert!((rolled - pitch_axis(tau)).norm() < 1e-14);
        }
    }

    #[test]
    fn seeker_field_examples() {
        let config = SeekerConfig::new(4.0 * PI);
        let field = ScalarField::quadratic(Vector3::new(0.0, 1.0, 0.0));
        let rhs = seeker_field(&config, &field).unwrap();
        // At t=0 the sensor sits at p + r e₂; put it on the source so c(p_s) = 0.
        let p = Vector3::new(0.0, 1.0 - config.r(), 0.0);
        let d = rhs(0.0, &id_state(p, Vector2::zeros()).to_vector());
        let root = config.omega.sqrt();
        assert!((d[0] - 2.0 * root).abs() < 1e-12);
        assert_eq!((d[1], d[2]), (0.0, 0.0));
        assert!(d.rows(3, 9).iter().all(|v| *v == 0.0));
        assert_eq!((d[12], d[13]), (0.0, 0.0));

        let s = id_state(Vector3::new(1.0, 2.0, 3.0), Vector2::zeros());
        let t = 0.123;
        let d = rhs(t, &s.to_vector());
        let cs = field.value(&sensor_position(&s, config.omega * t, config.r()));
        assert!(d.rows(3, 9).iter().all(|v| *v == 0.0));
        assert_eq!(d[12], 0.0);
        assert!((d[13] - config.omega * cs).abs() < 1e-12);
        assert!(seeker_field(&SeekerConfig::new(-1.0), &field).is_err());
    }

    #[test]
    fn frame_rate_matches_hand_assembly() {
        let config = SeekerConfig::new(3.0);
        let field = ScalarField::log_source();
        let rhs = seeker_field(&config, &field).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_rotation(&mut rng);
        let s = SeekerState { p: Vector3::new(1.0, 0.0, 2.0), frame: embed(&q), y: Vector2::new(0.3, -0.4) };
        let t = 0.9;
        let d = rhs(t, &s.to_vector());
        let cy = -0.3 - 0.4;
        let lambda = pitch_axis(3.0 * t) * (3f64.sqrt() * cy);
        let expect = q.matrix() * hat(&lambda);
        for j in 0..3 {
            let col = Vector3::new(d[3 + 3 * j], d[4 + 3 * j], d[5 + 3 * j]);
            assert!((col - expect.column(j)).norm() < 1e-14);
            // Columnwise: Q (Λ × e_j)
            let e = Vector3::ith(j, 1.0);
            assert!((col - q.matrix() * lambda.cross(&e)).norm() < 1e-14);
        }
    }

    #[test]
    fn cross_check_over_one_fast_period() {
        let mut config = SeekerConfig::new(4.0 * PI);
        config.steps_per_fast_period = 400;
        for field in builtin_fields() {
            let init = SeekerState::reference(&config, &field);
            assert_eq!(cross_check(&config, &field, &init, 0.0).unwrap(), 0.0);
            let dev = cross_check(&config, &field, &init, config.fast_period()).unwrap();
            assert!(dev < 1e-6, "{}: {dev}", field.name());
        }
    }

    #[test]
    fn pure_roll_keeps_position_and_spins_about_e1() {
        let config = SeekerConfig::new(5.0);
        let field = ScalarField::log_source();
        let rhs = raw_kinematics_field(&config, &field, RawControls { dither: false, steering: false }).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r0 = random_rotation(&mut rng);
        let mut s = Vector::zeros(STATE_DIM);
        s.rows_mut(0, 3).copy_from(&Vector3::new(1.0, 2.0, 3.0));
        s.as_mut_slice()[3..12].copy_from_slice(r0.matrix().as_slice());
        let grid = TimeGrid::new(0.0, 1e-3, 1000).unwrap();
        let end = integrate_rk4_with(&rhs, &s, &grid, |_| Ok(()), |_, _, _| true).unwrap();
        assert_eq!(column(end.as_slice(), 0), Vector3::new(1.0, 2.0, 3.0));
        let expect = r0.matrix() * exp_so3(&Vector3::new(5.0, 0.0, 0.0)).matrix();
        assert!((frame_matrix(&end.as_slice()[3..12]) - expect).amax() < 1e-10);
    }

    #[test]
    fn averaged_field_examples() {
        let avg = |g: Vector3<f64>| {
            let field = ScalarField::new("lin", move |p: &Vector3<f64>| g.dot(p), move |_| g, Vector3::zeros());
            closed_form_average(&field, &AveragedSeekerState { p: Vector3::zeros(), q: Rotation::identity() }.to_vector())
        };
        assert!(avg(Vector3::zeros()).iter().all(|v| *v == 0.0));

        let d = avg(Vector3::y());
        assert!(d.rows(0, 3).iter().all(|v| *v == 0.0));
        let lambda = averaged_angular_velocity(&Matrix3::identity(), &Vector3::y());
        assert_eq!(lambda, Vector3::new(0.0, 0.0, 0.25));
        // q̇₁ = Q(Λ̄ × e₁) = ¼e₂: the heading turns toward the gradient.
        assert!((Vector3::new(d[3], d[4], d[5]) - Vector3::new(0.0, 0.25, 0.0)).norm() < 1e-15);

        let d = avg(Vector3::x());
        assert_eq!(Vector3::new(d[0], d[1], d[2]), Vector3::x());
        assert!(d.rows(3, 9).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn averaged_rotation_rate_is_orthogonal_to_roll_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let q = random_rotation(&mut rng);
            let g = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
            assert_eq!(averaged_angular_velocity(q.matrix(), &g)[0], 0.0);
        }
    }

    #[test]
    fn lyapunov_examples() {
        let field = ScalarField::quadratic(Vector3::zeros());
        let at = |p: Vector3<f64>, q: Rotation| lyapunov_value_and_rate(&field, &AveragedSeekerState { p, q });
        assert_eq!(at(Vector3::zeros(), Rotation::identity()), (0.0, 0.0));
        assert_eq!(at(Vector3::x(), Rotation::identity()), (0.5, -1.0));
        let (_, rate) = at(Vector3::y(), Rotation::identity());
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn system_spec_satisfies_structural_checks() {
        for field in builtin_fields() {
            let spec = as_system_spec(&field).unwrap();
            let report = check_assumption_a(&spec, 8).unwrap();
            assert!(report.all_pass(), "{}: {report:?}", field.name());
            let x = AveragedSeekerState { p: Vector3::zeros(), q: Rotation::identity() }.to_vector();
            if field.name() == "log" {
                assert_eq!(spec.phi0(&x), Vector::zeros(2));
            }
        }
    }

    #[test]
    fn system_spec_analytic_jacobians_match_finite_differences() {
        let field = ScalarField::log_source();
        let spec = as_system_spec(&field).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = random_rotation(&mut rng);
        let x = AveragedSeekerState { p: Vector3::new(1.0, -0.5, 2.0), q }.to_vector();
        let y = Vector::from_vec(vec![0.2, -0.7]);
        let tau = 1.1;
        let jd = jacobian_fd(|v| spec.phi0(v), &x, None).unwrap();
        assert!((jd - spec.phi0_jacobian(&x).unwrap()).amax() < 1e-8);
        let cd = jacobian_fd(|v| spec.f1(&x, v, tau), &y, None).unwrap();
        assert!((cd - spec.coupling(&x, &y, tau).unwrap()).amax() < 1e-8);
    }

    #[test]
    fn expanded_system_tracks_exact_seeker() {
        // The expansion drops O(r³) terms of c(p_s); at large ω the expanded
        // right-hand side and the exact one agree to that order.
        let field = ScalarField::log_source();
        let spec = as_system_spec(&field).unwrap();
        for &omega in &[4.0 * PI, 64.0 * PI] {
            let config = SeekerConfig::new(omega);
            let s = SeekerState::reference(&config, &field).to_vector();
            let exact = seeker_field(&config, &field).unwrap()(0.37, &s);
            let expanded = spec.rhs(omega, 0.37, &s);
            assert!(expanded.iter().all(|v| v.is_finite()));
            let dy = (exact.rows(12, 2) - expanded.rows(12, 2)).norm();
            assert!(dy < 2.0 * omega.powf(-0.5), "ω={omega}: {dy}");
        }
    }

    #[test]
    fn averaged_flow_stays_on_so3_without_projection() {
        let field = ScalarField::log_source();
        let avg = AveragedSeeker::new(field, false);
        let x0 = AveragedSeekerState { p: Vector3::new(6.0, 2.0, -2.0), q: Rotation::identity() }.to_vector();
        let grid = TimeGrid::new(0.0, 1e-3, 200_000).unwrap();
        let mut worst: f64 = 0.0;
        integrate_rk4_with(&|_: f64, x: &Vector| avg.eval(x), &x0, &grid, |_| Ok(()), |_, _, x| {
            worst = worst.max(manifold_residual(&x.as_slice()[3..12]));
            true
        })
        .unwrap();
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn state_vectors_round_trip() {
        let config = SeekerConfig::new(4.0 * PI);
        let field = ScalarField::log_source();
        let s = SeekerState::reference(&config, &field);
        assert_eq!(SeekerState::from_vector(&s.to_vector()).unwrap(), s);
        let c = field.value(&(Vector3::new(6.0, 2.0, -2.0) + config.r() * Vector3::y()));
        assert_eq!(s.y, Vector2::new(c, c));
        let zero = SeekerState::initial(
            &SeekerConfig { filter_init: FilterInit::Zero, ..config.clone() },
            &field,
            s.p,
            &Rotation::identity(),
        );
        assert_eq!(zero.y, Vector2::zeros());
        assert!(SeekerState::from_vector(&Vector::zeros(3)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SeekerConfig::new(4.0 * PI).validate().is_ok());
        assert!(SeekerConfig::new(0.0).validate().is_err());
        assert!(SeekerConfig::new(f64::NAN).validate().is_err());
        let mut c = SeekerConfig::new(1.0);
        c.steps_per_fast_period = 49;
        assert!(c.validate().is_err());
    }
}
