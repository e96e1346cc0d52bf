//! Reduced-order construction and second-order averaging.
//!
//! Given a slow/fast system, the quasi-steady manifold `y = φ₀(x)` is
//! refined by periodic correctors `φ₁, φ₂`, each the unique `T`-periodic
//! solution of `∂_τφᵢ = Aφᵢ + bᵢ(x,τ)`:
//!
//! ```text
//! φᵢ(x,τ) = (Id − e^{TA})⁻¹ ∫₀ᵀ e^{(T−s)A} bᵢ(x, s+τ) ds
//! ```
//!
//! The reduced system `f̃₁(x,τ) = f₁(x,φ₀,τ)`, `f̃₂ = f₂(x,φ₀,τ) + C φ₁` is
//! then averaged to second order:
//!
//! ```text
//! f̄(x) = (1/T) ∫₀ᵀ f̃₂(x,τ₁) + ½ [∫₀^{τ₁} f̃₁(x,τ₂) dτ₂, f̃₁(x,τ₁)] dτ₁
//! ```
//!
//! with the bracket `[u, v] = (∂v)u − (∂u)v`.
//!
//! All τ-integrals share one uniform Simpson grid. Corrector values on that
//! grid are a discrete periodic convolution of forcing samples, so a whole
//! period of `φᵢ(x, ·)` costs one sweep of forcing evaluations.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numkit::{
    cumulative_simpson, jacobian_fd, mat_exp, one_norm, simpson_weights, Matrix, Vector, DEFAULT_PANELS,
};
use crate::system::OscillatorySystemSpec;

/// Condition-number bound on `Id − e^{TA}` above which it counts as singular.
const SINGULAR_CONDITION: f64 = 1e12;

/// Periodic forcing `b(x, τ)` of a corrector problem.
pub trait Forcing: Send + Sync {
    fn dim(&self) -> usize;

    fn at(&self, x: &Vector, tau: f64) -> Vector;

    /// `b(x, offset + k·h)` for `k = 0..count`.
    fn samples(&self, x: &Vector, offset: f64, count: usize, h: f64) -> Result<Vec<Vector>> {
        Ok((0..count).map(|k| self.at(x, offset + k as f64 * h)).collect())
    }
}

/// Adapts a closure into a [`Forcing`].
pub struct FnForcing<F> {
    dim: usize,
    f: F,
}

impl<F> FnForcing<F>
where
    F: Fn(&Vector, f64) -> Vector + Send + Sync,
{
    pub fn new(dim: usize, f: F) -> Self {
        Self { dim, f }
    }
}

impl<F> Forcing for FnForcing<F>
where
    F: Fn(&Vector, f64) -> Vector + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn at(&self, x: &Vector, tau: f64) -> Vector {
        (self.f)(x, tau)
    }
}

/// The linear periodic problem `∂_τφ = Aφ + b`, `φ(τ) = φ(τ+T)`, discretised
/// on `panels` Simpson panels.
#[derive(Debug, Clone)]
pub struct PeriodicBvp {
    a: Matrix,
    period: f64,
    panels: usize,
    /// `(Id − e^{TA})⁻¹ · w_j · e^{(T − s_j)A}` for nodes `j = 0..=panels`.
    kernel: Vec<Matrix>,
}

impl PeriodicBvp {
    pub fn new(a: &Matrix, period: f64, panels: usize) -> Result<Self> {
        if !(period.is_finite() && period > 0.0) {
            return Err(Error::Config(format!("period must be positive, got {period}")));
        }
        let m = a.nrows();
        let h = period / panels as f64;
        let weights = simpson_weights(panels, h)?;
        let monodromy = mat_exp(a, period)?;
        let gap = Matrix::identity(m, m) - &monodromy;
        let inv = gap
            .clone()
            .try_inverse()
            .filter(|inv| inv.iter().all(|v| v.is_finite()))
            .ok_or_else(|| Error::Singular("Id − e^{TA} is not invertible".into()))?;
        // Scale against ‖Id‖ rather than ‖gap‖: a neutral A gives a tiny gap
        // whose relative condition still looks harmless.
        let cond = (1.0 + one_norm(&monodromy)) * one_norm(&inv);
        if !(cond < SINGULAR_CONDITION) {
            return Err(Error::Singular(format!(
                "Id − e^{{TA}} is numerically singular (condition ≈ {cond:.2e}); is A Hurwitz?"
            )));
        }
        // e^{(T−s_j)A} = e^{(N−j)hA}: build by repeated products of the step
        // propagator, anchored at e^{0}=Id.
        let step = mat_exp(a, h)?;
        let mut props = vec![Matrix::identity(m, m); panels + 1];
        for j in (0..panels).rev() {
            props[j] = &step * &props[j + 1];
        }
        let kernel = props
            .into_iter()
            .zip(&weights)
            .map(|(p, w)| &inv * p * *w)
            .collect();
        Ok(Self { a: a.clone(), period, panels, kernel })
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn step(&self) -> f64 {
        self.period / self.panels as f64
    }

    fn check_samples(&self, samples: &[Vector]) -> Result<()> {
        if samples.len() != self.panels {
            return Err(Error::Dimension(format!(
                "expected {} forcing samples, got {}",
                self.panels,
                samples.len()
            )));
        }
        if samples.iter().any(|s| s.len() != self.a.nrows()) {
            return Err(Error::Dimension("forcing dimension differs from A".into()));
        }
        Ok(())
    }

    /// `φ(offset + s_k)` from one period of forcing samples `b(offset + s_j)`.
    pub fn solve_at(&self, samples: &[Vector], k: usize) -> Result<Vector> {
        self.check_samples(samples)?;
        let n = self.panels;
        let mut acc = Vector::zeros(self.a.nrows());
        for (j, kern) in self.kernel.iter().enumerate() {
            acc.gemv(1.0, kern, &samples[(j + k) % n], 1.0);
        }
        Ok(acc)
    }

    /// `φ(offset + s_k)` for every `k = 0..panels`.
    pub fn solve_grid(&self, samples: &[Vector]) -> Result<Vec<Vector>> {
        self.check_samples(samples)?;
        (0..self.panels).map(|k| self.solve_at(samples, k)).collect()
    }
}

/// A solved periodic corrector `φᵢ(x, τ)`.
#[derive(Clone)]
pub struct CorrectorSolution {
    index: u8,
    bvp: Arc<PeriodicBvp>,
    forcing: Arc<dyn Forcing>,
}

impl std::fmt::Debug for CorrectorSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CorrectorSolution")
            .field("index", &self.index)
            .field("bvp", &self.bvp)
            .finish_non_exhaustive()
    }
}

impl CorrectorSolution {
    pub fn index(&self) -> u8 {
        self.index
    }

    pub fn bvp(&self) -> &PeriodicBvp {
        &self.bvp
    }

    pub fn forcing(&self) -> &Arc<dyn Forcing> {
        &self.forcing
    }

    /// `φ(x, τ)`.
    pub fn eval(&self, x: &Vector, tau: f64) -> Result<Vector> {
        let samples = self.forcing.samples(x, tau, self.bvp.panels, self.bvp.step())?;
        self.bvp.solve_at(&samples, 0)
    }

    /// `φ(x, offset + s_k)` on the corrector's own grid, `k = 0..panels`.
    pub fn grid(&self, x: &Vector, offset: f64) -> Result<Vec<Vector>> {
        let samples = self.forcing.samples(x, offset, self.bvp.panels, self.bvp.step())?;
        self.bvp.solve_grid(&samples)
    }

    /// BVP residual at `x` on the corrector's own grid (see [`residual_from_samples`]).
    pub fn residual(&self, x: &Vector) -> Result<f64> {
        let n = self.bvp.panels;
        let h = self.bvp.step();
        let mut phi = self.grid(x, 0.0)?;
        phi.push(self.eval(x, self.bvp.period)?);
        let b = self.forcing.samples(x, 0.0, n, h)?;
        residual_from_samples(&phi, &self.bvp.a, &b, self.bvp.period)
    }
}

/// Solves `∂_τφ = Aφ + b`, `φ` periodic, for every `x`.
pub fn solve_periodic_bvp(
    a: &Matrix,
    b: Arc<dyn Forcing>,
    period: f64,
    panels: usize,
) -> Result<CorrectorSolution> {
    if b.dim() != a.nrows() {
        return Err(Error::Dimension(format!("forcing has dimension {}, A is {}x{}", b.dim(), a.nrows(), a.ncols())));
    }
    let bvp = PeriodicBvp::new(a, period, panels)?;
    Ok(CorrectorSolution { index: 0, bvp: Arc::new(bvp), forcing: b })
}

/// Sixth-order periodic central difference of `values` at node `k`.
fn periodic_derivative(values: &[Vector], k: usize, h: f64) -> Vector {
    let n = values.len();
    let at = |off: isize| &values[((k as isize + off).rem_euclid(n as isize)) as usize];
    (at(3) - at(-3) + (at(-2) - at(2)) * 9.0 + (at(1) - at(-1)) * 45.0) / (60.0 * h)
}

/// Residual of `∂_τφ = Aφ + b` from samples on a uniform grid over `[0, T]`.
///
/// `phi` holds `panels + 1` values (the last at `τ = T`); `b` holds at least
/// `panels` values. Returns the sup-norm of `∂_τφ − Aφ − b` over the grid,
/// with `∂_τ` a sixth-order periodic central difference, plus the
/// periodicity gap `‖φ(0) − φ(T)‖∞`.
pub fn residual_from_samples(phi: &[Vector], a: &Matrix, b: &[Vector], period: f64) -> Result<f64> {
    if phi.len() < 8 {
        return Err(Error::Config("residual needs at least 7 panels".into()));
    }
    let n = phi.len() - 1;
    if b.len() < n {
        return Err(Error::Dimension(format!("need {n} forcing samples, got {}", b.len())));
    }
    let h = period / n as f64;
    let body = &phi[..n];
    let mut worst: f64 = 0.0;
    for k in 0..n {
        let r = periodic_derivative(body, k, h) - a * &body[k] - &b[k];
        worst = worst.max(r.amax());
    }
    let gap = (&phi[0] - &phi[n]).amax();
    let total = worst + gap;
    Ok(if total.is_nan() { f64::INFINITY } else { total })
}

/// Residual of a candidate periodic solution given pointwise closures.
pub fn residual_bvp<P, B>(phi: P, a: &Matrix, b: B, period: f64, panels: usize) -> Result<f64>
where
    P: Fn(f64) -> Vector,
    B: Fn(f64) -> Vector,
{
    let h = period / panels as f64;
    let phis: Vec<Vector> = (0..=panels).map(|k| phi(k as f64 * h)).collect();
    let bs: Vec<Vector> = (0..panels).map(|k| b(k as f64 * h)).collect();
    residual_from_samples(&phis, a, &bs, period)
}

/// `b₁(x,τ) = g₁(x,φ₀,τ) − ∂ₓφ₀ f₁(x,φ₀,τ)`.
struct FirstForcing {
    spec: Arc<OscillatorySystemSpec>,
}

impl FirstForcing {
    fn with_jacobian(&self, x: &Vector, y0: &Vector, d_phi0: &Matrix, tau: f64) -> Vector {
        self.spec.g1(x, y0, tau) - d_phi0 * self.spec.f1(x, y0, tau)
    }
}

impl Forcing for FirstForcing {
    fn dim(&self) -> usize {
        self.spec.fast_dim()
    }

    fn at(&self, x: &Vector, tau: f64) -> Vector {
        let y0 = self.spec.phi0(x);
        match self.spec.phi0_jacobian(x) {
            Ok(j) => self.with_jacobian(x, &y0, &j, tau),
            Err(_) => Vector::from_element(self.dim(), f64::NAN),
        }
    }

    fn samples(&self, x: &Vector, offset: f64, count: usize, h: f64) -> Result<Vec<Vector>> {
        let y0 = self.spec.phi0(x);
        let j = self.spec.phi0_jacobian(x)?;
        Ok((0..count).map(|k| self.with_jacobian(x, &y0, &j, offset + k as f64 * h)).collect())
    }
}

/// `b₂(x,τ) = g₂ − ∂ₓφ₀ f₂ − ∂ₓφ₁ f₁ + ∂_w g₁ φ₁`, all at `y = φ₀(x)`.
struct SecondForcing {
    spec: Arc<OscillatorySystemSpec>,
    phi1: CorrectorSolution,
}

impl SecondForcing {
    fn assemble(&self, x: &Vector, y0: &Vector, d_phi0: &Matrix, phi1: &Vector, d_phi1: &Matrix, tau: f64) -> Result<Vector> {
        let s = &self.spec;
        Ok(s.g2(x, y0, tau) - d_phi0 * s.f2(x, y0, tau) - d_phi1 * s.f1(x, y0, tau)
            + s.g1_dy(x, y0, tau)? * phi1)
    }

    fn eval(&self, x: &Vector, tau: f64) -> Result<Vector> {
        let y0 = self.spec.phi0(x);
        let d_phi0 = self.spec.phi0_jacobian(x)?;
        let phi1 = self.phi1.eval(x, tau)?;
        let mut failure = None;
        let d_phi1 = jacobian_fd(
            |v| match self.phi1.eval(v, tau) {
                Ok(p) => p,
                Err(e) => {
                    failure = Some(e);
                    Vector::from_element(self.spec.fast_dim(), f64::NAN)
                }
            },
            x,
            None,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        self.assemble(x, &y0, &d_phi0, &phi1, &d_phi1?, tau)
    }
}

impl Forcing for SecondForcing {
    fn dim(&self) -> usize {
        self.spec.fast_dim()
    }

    fn at(&self, x: &Vector, tau: f64) -> Vector {
        self.eval(x, tau).unwrap_or_else(|_| Vector::from_element(self.dim(), f64::NAN))
    }

    fn samples(&self, x: &Vector, offset: f64, count: usize, h: f64) -> Result<Vec<Vector>> {
        let bvp = self.phi1.bvp();
        let on_grid = count == bvp.panels() && (h - bvp.step()).abs() <= 1e-15 * bvp.period();
        if !on_grid {
            return (0..count).map(|k| self.eval(x, offset + k as f64 * h)).collect();
        }
        // ∂ₓφ₁ on the whole shifted grid by central differences of grid sweeps.
        let n = self.spec.slow_dim();
        let m = self.spec.fast_dim();
        let phi1 = self.phi1.grid(x, offset)?;
        let mut d_phi1 = vec![Matrix::zeros(m, n); count];
        let mut probe = x.clone();
        for i in 0..n {
            let step = f64::EPSILON.cbrt() * (1.0 + x[i].abs());
            probe[i] = x[i] + step;
            let plus = self.phi1.grid(&probe, offset)?;
            probe[i] = x[i] - step;
            let minus = self.phi1.grid(&probe, offset)?;
            probe[i] = x[i];
            for k in 0..count {
                d_phi1[k].set_column(i, &((&plus[k] - &minus[k]) / (2.0 * step)));
            }
        }
        let y0 = self.spec.phi0(x);
        let d_phi0 = self.spec.phi0_jacobian(x)?;
        (0..count)
            .map(|k| self.assemble(x, &y0, &d_phi0, &phi1[k], &d_phi1[k], offset + k as f64 * h))
            .collect()
    }
}

/// Forcing `bᵢ` of the `i`-th corrector problem. `phi1` is required for `i = 2`.
pub fn build_b(
    spec: &Arc<OscillatorySystemSpec>,
    phi1: Option<&CorrectorSolution>,
    i: u8,
) -> Result<Arc<dyn Forcing>> {
    match i {
        1 => Ok(Arc::new(FirstForcing { spec: spec.clone() })),
        2 => {
            let phi1 = phi1.ok_or_else(|| Error::MissingDependency("b₂ needs the solved corrector φ₁".into()))?;
            Ok(Arc::new(SecondForcing { spec: spec.clone(), phi1: phi1.clone() }))
        }
        other => Err(Error::Config(format!("corrector index must be 1 or 2, got {other}"))),
    }
}

/// Solves both correctors `(φ₁, φ₂)` of a system.
pub fn solve_correctors(
    spec: &Arc<OscillatorySystemSpec>,
    panels: usize,
) -> Result<(CorrectorSolution, CorrectorSolution)> {
    let mut phi1 = solve_periodic_bvp(spec.a(), build_b(spec, None, 1)?, spec.period(), panels)?;
    phi1.index = 1;
    let b2 = build_b(spec, Some(&phi1), 2)?;
    let phi2 = CorrectorSolution { index: 2, bvp: phi1.bvp.clone(), forcing: b2 };
    Ok((phi1, phi2))
}

/// The reduced system `ẋ = √ω f̃₁(x,ωt) + f̃₂(x,ωt)`.
#[derive(Clone, Debug)]
pub struct ReducedSystem {
    spec: Arc<OscillatorySystemSpec>,
    phi1: CorrectorSolution,
}

impl ReducedSystem {
    pub fn spec(&self) -> &OscillatorySystemSpec {
        &self.spec
    }

    pub fn phi1(&self) -> &CorrectorSolution {
        &self.phi1
    }

    pub fn period(&self) -> f64 {
        self.spec.period()
    }

    pub fn f1_tilde(&self, x: &Vector, tau: f64) -> Vector {
        self.spec.f1(x, &self.spec.phi0(x), tau)
    }

    pub fn f2_tilde(&self, x: &Vector, tau: f64) -> Result<Vector> {
        let y0 = self.spec.phi0(x);
        let phi1 = self.phi1.eval(x, tau)?;
        Ok(self.spec.f2(x, &y0, tau) + self.spec.coupling(x, &y0, tau)? * phi1)
    }

    /// `f̃₂(x, kT/N)` for `k = 0..=N`.
    pub fn f2_tilde_grid(&self, x: &Vector, panels: usize) -> Result<Vec<Vector>> {
        let h = self.period() / panels as f64;
        if panels != self.phi1.bvp().panels() {
            return (0..=panels).map(|k| self.f2_tilde(x, k as f64 * h)).collect();
        }
        let y0 = self.spec.phi0(x);
        let phi1 = self.phi1.grid(x, 0.0)?;
        (0..=panels)
            .map(|k| {
                let tau = k as f64 * h;
                let p = &phi1[k % panels];
                Ok(self.spec.f2(x, &y0, tau) + self.spec.coupling(x, &y0, tau)? * p)
            })
            .collect()
    }
}

/// Builds `f̃₁, f̃₂` from a system and its first corrector.
pub fn build_reduced(spec: &Arc<OscillatorySystemSpec>, phi1: &CorrectorSolution) -> ReducedSystem {
    ReducedSystem { spec: spec.clone(), phi1: phi1.clone() }
}

/// `[u, v](x) = ∂v(x)·u(x) − ∂u(x)·v(x)`.
pub fn lie_bracket<U, V>(u: U, v: V, x: &Vector) -> Result<Vector>
where
    U: Fn(&Vector) -> Vector,
    V: Fn(&Vector) -> Vector,
{
    let ju = jacobian_fd(&u, x, None)?;
    let jv = jacobian_fd(&v, x, None)?;
    Ok(jv * u(x) - ju * v(x))
}

/// An autonomous averaged vector field.
pub trait AveragedField: Send + Sync {
    fn dim(&self) -> usize;
    fn eval(&self, x: &Vector) -> Vector;
    fn post_step(&self, _x: &mut Vector) -> Result<()> {
        Ok(())
    }
}

/// The second-order averaged field `f̄` of a reduced system.
#[derive(Clone, Debug)]
pub struct AveragedSystem {
    reduced: ReducedSystem,
    panels: usize,
    fd_step: Option<f64>,
}

/// Parts of `f̄(x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AverageParts {
    /// `(1/T) ∫ f̃₂`
    pub drift: Vector,
    /// `(1/T) ∫ ½[∫f̃₁, f̃₁]`
    pub bracket: Vector,
}

impl AverageParts {
    pub fn total(&self) -> Vector {
        &self.drift + &self.bracket
    }
}

impl AveragedSystem {
    pub fn panels(&self) -> usize {
        self.panels
    }

    pub fn fd_step(&self) -> Option<f64> {
        self.fd_step
    }

    pub fn reduced(&self) -> &ReducedSystem {
        &self.reduced
    }

    pub fn try_eval(&self, x: &Vector) -> Result<Vector> {
        Ok(self.parts(x)?.total())
    }

    pub fn parts(&self, x: &Vector) -> Result<AverageParts> {
        let n_panels = self.panels;
        let period = self.reduced.period();
        let h = period / n_panels as f64;
        let nodes: Vec<f64> = (0..=n_panels).map(|k| k as f64 * h).collect();

        let v: Vec<Vector> = nodes.iter().map(|&t| self.reduced.f1_tilde(x, t)).collect();
        let jv: Vec<Matrix> = nodes
            .iter()
            .map(|&t| jacobian_fd(|p| self.reduced.f1_tilde(p, t), x, self.fd_step))
            .collect::<Result<_>>()?;
        let u = cumulative_simpson(&v, h)?;
        let ju = cumulative_simpson(&jv, h)?;

        let brackets: Vec<Vector> = (0..=n_panels).map(|k| &jv[k] * &u[k] - &ju[k] * &v[k]).collect();
        let f2 = self.reduced.f2_tilde_grid(x, n_panels)?;

        let w = simpson_weights(n_panels, h)?;
        let mut drift = Vector::zeros(x.len());
        let mut bracket = Vector::zeros(x.len());
        for k in 0..=n_panels {
            drift.axpy(w[k] / period, &f2[k], 1.0);
            bracket.axpy(0.5 * w[k] / period, &brackets[k], 1.0);
        }
        Ok(AverageParts { drift, bracket })
    }
}

impl AveragedField for AveragedSystem {
    fn dim(&self) -> usize {
        self.reduced.spec.slow_dim()
    }

    fn eval(&self, x: &Vector) -> Vector {
        self.try_eval(x).unwrap_or_else(|_| Vector::from_element(x.len(), f64::NAN))
    }
}

/// Second-order average of `reduced` with `panels` quadrature panels.
pub fn average(reduced: &ReducedSystem, panels: usize) -> Result<AveragedSystem> {
    simpson_weights(panels, 1.0)?;
    Ok(AveragedSystem { reduced: reduced.clone(), panels, fd_step: None })
}

/// Convenience: correctors, reduced system and average with default panels.
pub fn average_system(spec: OscillatorySystemSpec) -> Result<AveragedSystem> {
    let spec = Arc::new(spec);
    let phi1 = {
        let mut p = solve_periodic_bvp(spec.a(), build_b(&spec, None, 1)?, spec.period(), DEFAULT_PANELS)?;
        p.index = 1;
        p
    };
    average(&build_reduced(&spec, &phi1), DEFAULT_PANELS)
}
