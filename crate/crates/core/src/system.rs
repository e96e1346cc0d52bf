//! The slow/fast oscillatory system class
//!
//! ```text
//! ẋ = √ω f₁(x,y,ωt) + f₂(x,y,ωt) + ω^{-1/2} f₃(x,y,ωt,ω)
//! ẏ = ωA(y − φ₀(x)) + √ω g₁(x,y,ωt) + g₂(x,y,ωt) + ω^{-1/2} g₃(x,y,ωt,ω)
//! ```
//!
//! together with its structural checks (Hurwitz `A`, zero-mean `f₁`,
//! periodicity) and the fast-time shifted coordinates
//! `z = y − φ₀(x) − εφ₁(x,τ) − ε²φ₂(x,τ)`, `τ = ω(t − t₀)`, `ε = ω^{-1/2}`.

use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{jacobian_fd, quad_periodic, Matrix, Vector, DEFAULT_PANELS};

/// A periodic field `(x, y, τ) ↦ ℝᵏ`.
pub type PeriodicField = Arc<dyn Fn(&Vector, &Vector, f64) -> Vector + Send + Sync>;
/// A remainder field `(x, y, τ, ω) ↦ ℝᵏ`.
pub type RemainderField = Arc<dyn Fn(&Vector, &Vector, f64, f64) -> Vector + Send + Sync>;
/// A map `x ↦ ℝᵏ`.
pub type SlowMap = Arc<dyn Fn(&Vector) -> Vector + Send + Sync>;
/// A Jacobian `x ↦ ℝ^{k×n}`.
pub type SlowJacobian = Arc<dyn Fn(&Vector) -> Matrix + Send + Sync>;
/// A Jacobian `(x, y, τ) ↦ ℝ^{k×m}` with respect to `y`.
pub type FastJacobian = Arc<dyn Fn(&Vector, &Vector, f64) -> Matrix + Send + Sync>;

const ASSUMPTION_SEED: u64 = 0x0A55_0A55;
const ZERO_MEAN_TOL: f64 = 1e-8;
const PERIODICITY_TOL: f64 = 1e-10;

/// Full data of a slow/fast oscillatory system.
///
/// Field closures must be pure; they are shared across threads.
#[derive(Clone)]
pub struct OscillatorySystemSpec {
    n: usize,
    m: usize,
    period: f64,
    a: Matrix,
    f1: PeriodicField,
    f2: PeriodicField,
    f3: Option<RemainderField>,
    g1: PeriodicField,
    g2: PeriodicField,
    g3: Option<RemainderField>,
    phi0: SlowMap,
    phi0_jacobian: Option<SlowJacobian>,
    f1_dy: Option<FastJacobian>,
    g1_dy: Option<FastJacobian>,
}

impl fmt::Debug for OscillatorySystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OscillatorySystemSpec")
            .field("n", &self.n)
            .field("m", &self.m)
            .field("period", &self.period)
            .field("a", &self.a)
            .finish_non_exhaustive()
    }
}

fn zero_field(k: usize) -> PeriodicField {
    Arc::new(move |_, _, _| Vector::zeros(k))
}

impl OscillatorySystemSpec {
    /// A system with all oscillatory fields set to zero; fill them with the
    /// `with_*` builders.
    pub fn new<P>(n: usize, m: usize, a: Matrix, period: f64, phi0: P) -> Result<Self>
    where
        P: Fn(&Vector) -> Vector + Send + Sync + 'static,
    {
        if n == 0 || m == 0 {
            return Err(Error::Dimension("slow and fast dimensions must be positive".into()));
        }
        if a.nrows() != m || a.ncols() != m {
            return Err(Error::Dimension(format!(
                "A must be {m}x{m}, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        Ok(Self {
            n,
            m,
            period,
            a,
            f1: zero_field(n),
            f2: zero_field(n),
            f3: None,
            g1: zero_field(m),
            g2: zero_field(m),
            g3: None,
            phi0: Arc::new(phi0),
            phi0_jacobian: None,
            f1_dy: None,
            g1_dy: None,
        })
    }

    pub fn with_f1(mut self, f: impl Fn(&Vector, &Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.f1 = Arc::new(f);
        self
    }

    pub fn with_f2(mut self, f: impl Fn(&Vector, &Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.f2 = Arc::new(f);
        self
    }

    pub fn with_f3(mut self, f: impl Fn(&Vector, &Vector, f64, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.f3 = Some(Arc::new(f));
        self
    }

    pub fn with_g1(mut self, g: impl Fn(&Vector, &Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.g1 = Arc::new(g);
        self
    }

    pub fn with_g2(mut self, g: impl Fn(&Vector, &Vector, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.g2 = Arc::new(g);
        self
    }

    pub fn with_g3(mut self, g: impl Fn(&Vector, &Vector, f64, f64) -> Vector + Send + Sync + 'static) -> Self {
        self.g3 = Some(Arc::new(g));
        self
    }

    /// Analytic `∂ₓφ₀`; finite differences are used otherwise.
    pub fn with_phi0_jacobian(mut self, j: impl Fn(&Vector) -> Matrix + Send + Sync + 'static) -> Self {
        self.phi0_jacobian = Some(Arc::new(j));
        self
    }

    /// Analytic `C(x,y,τ) = ∂_y f₁`.
    pub fn with_f1_dy(mut self, j: impl Fn(&Vector, &Vector, f64) -> Matrix + Send + Sync + 'static) -> Self {
        self.f1_dy = Some(Arc::new(j));
        self
    }

    /// Analytic `∂_y g₁`.
    pub fn with_g1_dy(mut self, j: impl Fn(&Vector, &Vector, f64) -> Matrix + Send + Sync + 'static) -> Self {
        self.g1_dy = Some(Arc::new(j));
        self
    }

    pub fn slow_dim(&self) -> usize {
        self.n
    }

    pub fn fast_dim(&self) -> usize {
        self.m
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn f1(&self, x: &Vector, y: &Vector, tau: f64) -> Vector {
        (self.f1)(x, y, tau)
    }

    pub fn f2(&self, x: &Vector, y: &Vector, tau: f64) -> Vector {
        (self.f2)(x, y, tau)
    }

    pub fn g1(&self, x: &Vector, y: &Vector, tau: f64) -> Vector {
        (self.g1)(x, y, tau)
    }

    pub fn g2(&self, x: &Vector, y: &Vector, tau: f64) -> Vector {
        (self.g2)(x, y, tau)
    }

    pub fn phi0(&self, x: &Vector) -> Vector {
        (self.phi0)(x)
    }

    pub fn phi0_jacobian(&self, x: &Vector) -> Result<Matrix> {
        match &self.phi0_jacobian {
            Some(j) => Ok(j(x)),
            None => jacobian_fd(|v| (self.phi0)(v), x, None),
        }
    }

    /// `C(x,y,τ) = ∂_w f₁(x,w,τ)|_{w=y}`.
    pub fn coupling(&self, x: &Vector, y: &Vector, tau: f64) -> Result<Matrix> {
        match &self.f1_dy {
            Some(j) => Ok(j(x, y, tau)),
            None => jacobian_fd(|w| (self.f1)(x, w, tau), y, None),
        }
    }

    pub fn g1_dy(&self, x: &Vector, y: &Vector, tau: f64) -> Result<Matrix> {
        match &self.g1_dy {
            Some(j) => Ok(j(x, y, tau)),
            None => jacobian_fd(|w| (self.g1)(x, w, tau), y, None),
        }
    }

    /// Right-hand side at `(t, [x; y])` for frequency `omega`.
    pub fn rhs(&self, omega: f64, t: f64, state: &Vector) -> Vector {
        let x = state.rows(0, self.n).into_owned();
        let y = state.rows(self.n, self.m).into_owned();
        let tau = omega * t;
        let sq = omega.sqrt();

        let mut dx = (self.f1)(&x, &y, tau) * sq + (self.f2)(&x, &y, tau);
        if let Some(f3) = &self.f3 {
            dx += f3(&x, &y, tau, omega) / sq;
        }
        let mut dy = &self.a * (&y - (self.phi0)(&x)) * omega
            + (self.g1)(&x, &y, tau) * sq
            + (self.g2)(&x, &y, tau);
        if let Some(g3) = &self.g3 {
            dy += g3(&x, &y, tau, omega) / sq;
        }

        let mut out = Vector::zeros(self.n + self.m);
        out.rows_mut(0, self.n).copy_from(&dx);
        out.rows_mut(self.n, self.m).copy_from(&dy);
        out
    }
}

/// State `(x, y)` at time `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FullState {
    pub x: Vector,
    pub y: Vector,
    pub t: f64,
}

impl FullState {
    pub fn stacked(&self) -> Vector {
        let mut v = Vector::zeros(self.x.len() + self.y.len());
        v.rows_mut(0, self.x.len()).copy_from(&self.x);
        v.rows_mut(self.x.len(), self.y.len()).copy_from(&self.y);
        v
    }

    pub fn from_stacked(v: &Vector, n: usize, t: f64) -> Result<Self> {
        if v.len() < n {
            return Err(Error::Dimension(format!("state of length {} has no {n} slow entries", v.len())));
        }
        Ok(Self {
            x: v.rows(0, n).into_owned(),
            y: v.rows(n, v.len() - n).into_owned(),
            t,
        })
    }
}

/// Shifted fast-time coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftedState {
    pub x: Vector,
    pub z: Vector,
    pub tau: f64,
    pub eps: f64,
}

/// Returns the right-hand side of the full system as a closure over
/// `(t, [x; y])`.
pub fn assemble_full_field(
    spec: &OscillatorySystemSpec,
    omega: f64,
) -> Result<impl Fn(f64, &Vector) -> Vector + Send + Sync + '_> {
    if !(omega.is_finite() && omega > 0.0) {
        return Err(Error::Config(format!("frequency must be positive, got {omega}")));
    }
    Ok(move |t: f64, s: &Vector| spec.rhs(omega, t, s))
}

/// Pass/fail entry of an [`AssumptionReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckItem {
    pub pass: bool,
    /// Worst observed value of the checked quantity.
    pub value: f64,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub hurwitz: CheckItem,
    pub zero_mean_f1: CheckItem,
    pub periodicity: CheckItem,
}

impl AssumptionReport {
    pub fn all_pass(&self) -> bool {
        self.hurwitz.pass && self.zero_mean_f1.pass && self.periodicity.pass
    }
}

/// How stability of `A` was decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HurwitzMethod {
    CharacteristicRoots,
    Lyapunov,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HurwitzVerdict {
    pub hurwitz: bool,
    pub method: HurwitzMethod,
    /// Largest real part of the spectrum (root method only).
    pub spectral_abscissa: Option<f64>,
}

/// Decides whether every eigenvalue of `a` has negative real part.
///
/// `m ≤ 2` uses the closed-form characteristic roots; larger matrices solve
/// `AᵀP + PA = −Id` and test `P` for positive definiteness.
pub fn hurwitz_check(a: &Matrix) -> Result<HurwitzVerdict> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::Dimension("Hurwitz test needs a non-empty square matrix".into()));
    }
    match a.nrows() {
        1 => {
            let s = a[(0, 0)];
            Ok(HurwitzVerdict { hurwitz: s < 0.0, method: HurwitzMethod::CharacteristicRoots, spectral_abscissa: Some(s) })
        }
        2 => {
            let tr = a.trace();
            let det = a.determinant();
            let disc = tr * tr - 4.0 * det;
            let abscissa = if disc >= 0.0 { 0.5 * (tr + disc.sqrt()) } else { 0.5 * tr };
            Ok(HurwitzVerdict {
                hurwitz: abscissa < 0.0,
                method: HurwitzMethod::CharacteristicRoots,
                spectral_abscissa: Some(abscissa),
            })
        }
        m => {
            // vec(AᵀP + PA) = (Id ⊗ Aᵀ + Aᵀ ⊗ Id) vec(P)
            let at = a.transpose();
            let id = Matrix::identity(m, m);
            let op = id.kronecker(&at) + at.kronecker(&id);
            let rhs = -Vector::from_column_slice(id.as_slice());
            let hurwitz = match op.lu().solve(&rhs) {
                Some(p) if p.iter().all(|v| v.is_finite()) => {
                    let p = Matrix::from_column_slice(m, m, p.as_slice());
                    let sym = (&p + p.transpose()) * 0.5;
                    sym.cholesky().is_some()
                }
                _ => false,
            };
            Ok(HurwitzVerdict { hurwitz, method: HurwitzMethod::Lyapunov, spectral_abscissa: None })
        }
    }
}

/// Real parts of the eigenvalues of `a`.
pub fn eigenvalue_real_parts(a: &Matrix) -> Vec<f64> {
    a.complex_eigenvalues().iter().map(|z| z.re).collect()
}

/// Sampled check of the structural assumptions: Hurwitz `A`, zero-mean `f₁`
/// over one period, and `T`-periodicity of `f₁, f₂, g₁, g₂`.
pub fn check_assumption_a(spec: &OscillatorySystemSpec, sample_count: usize) -> Result<AssumptionReport> {
    if sample_count == 0 {
        return Err(Error::Config("assumption check needs at least one sample".into()));
    }
    let verdict = hurwitz_check(&spec.a)?;
    let hurwitz = CheckItem {
        pass: verdict.hurwitz,
        value: verdict.spectral_abscissa.unwrap_or(f64::NAN),
        detail: format!("{:?}", verdict.method),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(ASSUMPTION_SEED);
    let mut worst_mean: f64 = 0.0;
    let mut worst_period: f64 = 0.0;
    let t = spec.period;
    for _ in 0..sample_count {
        let x = Vector::from_fn(spec.n, |_, _| rng.gen_range(-3.0..3.0));
        let y = Vector::from_fn(spec.m, |_, _| rng.gen_range(-3.0..3.0));
        let mean = quad_periodic(|tau| spec.f1(&x, &y, tau), t, DEFAULT_PANELS)?;
        worst_mean = worst_mean.max(mean.amax());

        let tau = rng.gen_range(0.0..t);
        for field in [&spec.f1, &spec.f2, &spec.g1, &spec.g2] {
            let gap = (field(&x, &y, tau + t) - field(&x, &y, tau)).amax();
            worst_period = worst_period.max(if gap.is_nan() { f64::INFINITY } else { gap });
        }
    }
    Ok(AssumptionReport {
        hurwitz,
        zero_mean_f1: CheckItem {
            pass: worst_mean < ZERO_MEAN_TOL,
            value: worst_mean,
            detail: format!("max |∫f₁| over {sample_count} samples"),
        },
        periodicity: CheckItem {
            pass: worst_period < PERIODICITY_TOL,
            value: worst_period,
            detail: format!("max periodicity gap over {sample_count} samples"),
        },
    })
}

/// Maps `(x, y, t)` to the shifted coordinates `(x, z, τ, ε)`.
///
/// `phi1`, `phi2` are the periodic correctors as functions of `(x, τ)`.
pub fn to_shifted(
    spec: &OscillatorySystemSpec,
    phi1: &dyn Fn(&Vector, f64) -> Vector,
    phi2: &dyn Fn(&Vector, f64) -> Vector,
    state: &FullState,
    omega: f64,
    t0: f64,
) -> Result<ShiftedState> {
    if !(omega.is_finite() && omega >= 1.0) {
        return Err(Error::Config(format!("shifted coordinates need ω ≥ 1 so that ε ≤ 1, got {omega}")));
    }
    let eps = 1.0 / omega.sqrt();
    let tau = omega * (state.t - t0);
    let z = &state.y - spec.phi0(&state.x) - phi1(&state.x, tau) * eps - phi2(&state.x, tau) * (eps * eps);
    Ok(ShiftedState { x: state.x.clone(), z, tau, eps })
}

/// Inverse of [`to_shifted`].
pub fn from_shifted(
    spec: &OscillatorySystemSpec,
    phi1: &dyn Fn(&Vector, f64) -> Vector,
    phi2: &dyn Fn(&Vector, f64) -> Vector,
    shifted: &ShiftedState,
    t0: f64,
) -> Result<FullState> {
    let eps = shifted.eps;
    if !(eps > 0.0 && eps <= 1.0) {
        return Err(Error::Config(format!("ε must lie in (0, 1], got {eps}")));
    }
    let omega = 1.0 / (eps * eps);
    let x = &shifted.x;
    let y = &shifted.z + spec.phi0(x) + phi1(x, shifted.tau) * eps + phi2(x, shifted.tau) * (eps * eps);
    Ok(FullState { x: x.clone(), y, t: t0 + shifted.tau / omega })
}

/// Anything the harness can simulate as a slow/fast system.
pub trait SlowFastSystem: Send + Sync {
    fn slow_dim(&self) -> usize;
    fn fast_dim(&self) -> usize;
    /// Fast-time period `T`.
    fn period(&self) -> f64;
    fn fast_matrix(&self) -> &Matrix;
    fn quasi_steady(&self, x: &Vector) -> Vector;
    /// Derivative of the stacked state `[x; y]`.
    fn derivative(&self, omega: f64, t: f64, state: &Vector) -> Vector;
    /// Applied after every integration step.
    fn post_step(&self, _state: &mut Vector) -> Result<()> {
        Ok(())
    }
    /// Lyapunov-type value of the slow state, when the system has one.
    fn lyapunov(&self, _x: &Vector) -> Option<f64> {
        None
    }
    /// Distance of an embedded frame in `x` from SO(3), when there is one.
    fn manifold_residual(&self, _x: &Vector) -> Option<f64> {
        None
    }
}

impl SlowFastSystem for OscillatorySystemSpec {
    fn slow_dim(&self) -> usize {
        self.n
    }

    fn fast_dim(&self) -> usize {
        self.m
    }

    fn period(&self) -> f64 {
        self.period
    }

    fn fast_matrix(&self) -> &Matrix {
        &self.a
    }

    fn quasi_steady(&self, x: &Vector) -> Vector {
        self.phi0(x)
    }

    fn derivative(&self, omega: f64, t: f64, state: &Vector) -> Vector {
        self.rhs(omega, t, state)
    }
}
