//! Dense numerical substrate: matrix exponential, periodic quadrature,
//! finite-difference Jacobians and fixed-step RK4 integration.
//!
//! Storage is `nalgebra`'s dynamically sized matrices; everything else here is
//! hand-rolled so that step sizes, panel counts and truncation orders stay
//! fully deterministic.

use std::ops::{Add, Mul};

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Default number of Simpson panels per period.
pub const DEFAULT_PANELS: usize = 256;

/// Truncation order of the Taylor series inside [`mat_exp`].
const EXPM_TAYLOR_ORDER: usize = 16;

/// Scaled norm below which the truncated series is used directly.
const EXPM_SCALED_NORM: f64 = 0.5;

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// A uniform time grid. Node times are computed by index, never by
/// repeated addition, so `time(n_steps)` is exactly `t0 + n_steps * dt`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    t0: f64,
    dt: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        if !t0.is_finite() {
            return Err(Error::Config(format!("initial time must be finite, got {t0}")));
        }
        if n_steps == 0 {
            return Err(Error::Config("time grid needs at least one step".into()));
        }
        Ok(Self { t0, dt, n_steps })
    }

    /// Smallest uniform grid over `[t0, t0 + duration]` whose step does not
    /// exceed `max_dt`.
    pub fn covering(t0: f64, duration: f64, max_dt: f64) -> Result<Self> {
        if !(duration.is_finite() && duration > 0.0) {
            return Err(Error::Config(format!("duration must be positive, got {duration}")));
        }
        if !(max_dt.is_finite() && max_dt > 0.0) {
            return Err(Error::Config(format!("time step must be positive, got {max_dt}")));
        }
        // Tolerate duration/max_dt landing a hair above an integer.
        let n = ((duration / max_dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Self::new(t0, duration / n as f64, n)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn time(&self, k: usize) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    pub fn final_time(&self) -> f64 {
        self.time(self.n_steps)
    }
}

/// Matrix exponential `e^{tA}` by scaling and squaring with a truncated
/// Taylor series.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential needs a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if !t.is_finite() {
        return Err(Error::NonFinite(format!("exponential time argument {t}")));
    }
    let n = a.nrows();
    let ta = a * t;
    let norm1 = one_norm(&ta);
    if !norm1.is_finite() {
        return Err(Error::NonFinite("matrix exponential argument".into()));
    }

    let squarings = if norm1 > EXPM_SCALED_NORM {
        (norm1 / EXPM_SCALED_NORM).log2().ceil() as i32
    } else {
        0
    };
    let scaled = ta / 2f64.powi(squarings);

    // Horner evaluation of sum_{k=0}^{N} B^k / k!.
    let id = Matrix::identity(n, n);
    let mut acc = id.clone();
    for k in (1..=EXPM_TAYLOR_ORDER).rev() {
        acc = &id + (&scaled * acc) / k as f64;
    }
    for _ in 0..squarings {
        acc = &acc * &acc;
    }
    Ok(acc)
}

/// Induced 1-norm (maximum absolute column sum).
pub fn one_norm(a: &Matrix) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn check_panels(n_panels: usize) -> Result<()> {
    if n_panels < 2 || !n_panels.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "Simpson quadrature needs an even panel count >= 2, got {n_panels}"
        )));
    }
    Ok(())
}

/// Composite Simpson weights for `n_panels` panels of width `h`
/// (`n_panels + 1` nodes).
pub fn simpson_weights(n_panels: usize, h: f64) -> Result<Vec<f64>> {
    check_panels(n_panels)?;
    let mut w = vec![0.0; n_panels + 1];
    for (k, wk) in w.iter_mut().enumerate() {
        *wk = if k == 0 || k == n_panels {
            h / 3.0
        } else if k % 2 == 1 {
            4.0 * h / 3.0
        } else {
            2.0 * h / 3.0
        };
    }
    Ok(w)
}

/// Composite Simpson approximation of `∫₀ᵀ f(τ) dτ`.
pub fn quad_periodic<F>(mut f: F, period: f64, n_panels: usize) -> Result<Vector>
where
    F: FnMut(f64) -> Vector,
{
    if !(period.is_finite() && period > 0.0) {
        return Err(Error::Config(format!("period must be positive, got {period}")));
    }
    let h = period / n_panels as f64;
    let w = simpson_weights(n_panels, h)?;
    let mut acc: Option<Vector> = None;
    for (k, wk) in w.iter().enumerate() {
        let v = f(k as f64 * h) * *wk;
        acc = Some(match acc {
            None => v,
            Some(a) => a + v,
        });
    }
    let out = acc.expect("at least three nodes");
    if !all_finite(&out) {
        return Err(Error::NonFinite("quadrature result".into()));
    }
    Ok(out)
}

/// Running integrals `∫₀^{τ_k} f` on a uniform grid of `values.len()` nodes
/// (an even number of panels). Even nodes use composite Simpson; odd nodes
/// add one panel of the cubic through four neighbouring nodes, which keeps
/// them a full order ahead of the quadratic alternative.
pub fn cumulative_simpson<T>(values: &[T], h: f64) -> Result<Vec<T>>
where
    T: Clone + Add<Output = T> + Mul<f64, Output = T>,
{
    if values.is_empty() {
        return Err(Error::Config("cumulative quadrature of an empty grid".into()));
    }
    check_panels(values.len() - 1)?;
    let last = values.len() - 1;
    let f = |i: usize| values[i].clone();
    let zero = f(0) * 0.0;
    let mut out: Vec<T> = Vec::with_capacity(values.len());
    out.push(zero);
    for k in 1..values.len() {
        let next = if k % 2 == 0 {
            out[k - 2].clone() + (f(k - 2) + f(k - 1) * 4.0 + f(k)) * (h / 3.0)
        } else if last < 3 {
            out[k - 1].clone() + (f(k - 1) * 5.0 + f(k) * 8.0 + f(k + 1) * -1.0) * (h / 12.0)
        } else if k + 2 <= last {
            out[k - 1].clone()
                + (f(k - 1) * 9.0 + f(k) * 19.0 + f(k + 1) * -5.0 + f(k + 2)) * (h / 24.0)
        } else {
            out[k - 1].clone()
                + (f(k - 3) + f(k - 2) * -5.0 + f(k - 1) * 19.0 + f(k) * 9.0) * (h / 24.0)
        };
        out.push(next);
    }
    Ok(out)
}

/// Central-difference Jacobian of `f` at `x`.
///
/// With `h = None` each coordinate uses `cbrt(eps) * (1 + |x_i|)`, otherwise
/// the given absolute step.
pub fn jacobian_fd<F>(mut f: F, x: &Vector, h: Option<f64>) -> Result<Matrix>
where
    F: FnMut(&Vector) -> Vector,
{
    if let Some(h) = h {
        if !(h.is_finite() && h > 0.0) {
            return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
        }
    }
    let n = x.len();
    let mut jac: Option<Matrix> = None;
    let mut probe = x.clone();
    for i in 0..n {
        let step = h.unwrap_or_else(|| f64::EPSILON.cbrt() * (1.0 + x[i].abs()));
        probe[i] = x[i] + step;
        let fp = f(&probe);
        probe[i] = x[i] - step;
        let fm = f(&probe);
        probe[i] = x[i];
        if !all_finite(&fp) || !all_finite(&fm) {
            return Err(Error::NonFinite(format!("function value near coordinate {i}")));
        }
        let j = jac.get_or_insert_with(|| Matrix::zeros(fp.len(), n));
        if fp.len() != j.nrows() || fm.len() != j.nrows() {
            return Err(Error::Dimension("function output length changed".into()));
        }
        j.set_column(i, &((fp - fm) / (2.0 * step)));
    }
    match jac {
        Some(j) => Ok(j),
        None => {
            let f0 = f(x);
            Ok(Matrix::zeros(f0.len(), 0))
        }
    }
}

/// One classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(field: &F, t: f64, x: &Vector, dt: f64) -> Vector
where
    F: Fn(f64, &Vector) -> Vector + ?Sized,
{
    let half = 0.5 * dt;
    let k1 = field(t, x);
    let k2 = field(t + half, &(x + &k1 * half));
    let k3 = field(t + half, &(x + &k2 * half));
    let k4 = field(t + dt, &(x + &k3 * dt));
    x + (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0)
}

/// Fixed-step RK4 driver with a post-step hook (used for manifold
/// projection) and an observer called at every node including the first.
/// The observer returns `false` to stop early.
pub fn integrate_rk4_with<F, P, O>(
    field: &F,
    x0: &Vector,
    grid: &TimeGrid,
    mut post_step: P,
    mut observer: O,
) -> Result<Vector>
where
    F: Fn(f64, &Vector) -> Vector + ?Sized,
    P: FnMut(&mut Vector) -> Result<()>,
    O: FnMut(usize, f64, &Vector) -> bool,
{
    if !all_finite(x0) {
        return Err(Error::Divergence { step: 0, t: grid.t0() });
    }
    let mut x = x0.clone();
    if !observer(0, grid.t0(), &x) {
        return Ok(x);
    }
    for k in 0..grid.n_steps() {
        let t = grid.time(k);
        x = rk4_step(field, t, &x, grid.dt());
        if !all_finite(&x) {
            return Err(Error::Divergence { step: k + 1, t: grid.time(k + 1) });
        }
        post_step(&mut x)?;
        if !observer(k + 1, grid.time(k + 1), &x) {
            break;
        }
    }
    Ok(x)
}

/// Fixed-step RK4 integration recording every node.
pub fn integrate_rk4<F>(field: &F, x0: &Vector, grid: &TimeGrid) -> Result<Vec<(f64, Vector)>>
where
    F: Fn(f64, &Vector) -> Vector + ?Sized,
{
    let mut out = Vec::with_capacity(grid.n_steps() + 1);
    integrate_rk4_with(field, x0, grid, |_| Ok(()), |_, t, x| {
        out.push((t, x.clone()));
        true
    })?;
    Ok(out)
}

/// Ordinary least-squares line `y = slope * x + intercept`.
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> Result<(f64, f64)> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("fit abscissae and ordinates differ in length".into()));
    }
    if xs.len() < 2 {
        return Err(Error::Fit("a line needs at least two points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    Ok((slope, my - slope * mx))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn max_abs(m: &Matrix) -> f64 {
        m.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    #[test]
    fn mat_exp_at_zero_is_identity() {
        let a = Matrix::from_row_slice(3, 3, &[1.0, -2.0, 0.5, 3.0, 0.0, 1.0, -4.0, 2.0, 1.0]);
        let e = mat_exp(&a, 0.0).unwrap();
        assert_eq!(e, Matrix::identity(3, 3));
    }

    #[test]
    fn mat_exp_jordan_block() {
        // e^{tA} = e^{-t} [[1, t], [0, 1]] for the filter matrix.
        let a = Matrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.0, -1.0]);
        let e = mat_exp(&a, 1.0).unwrap();
        let em1 = (-1.0f64).exp();
        let expected = Matrix::from_row_slice(2, 2, &[em1, em1, 0.0, em1]);
        assert!(max_abs(&(e - &expected)) < 1e-14);
        assert_relative_eq!(expected[(0, 0)], 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn mat_exp_diagonal() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![-1.0, -2.0]));
        let e = mat_exp(&a, 2f64.ln()).unwrap();
        assert_relative_eq!(e[(0, 0)], 0.5, max_relative = 1e-13);
        assert_relative_eq!(e[(1, 1)], 0.25, max_relative = 1e-13);
        assert_eq!(e[(0, 1)], 0.0);
    }

    #[test]
    fn mat_exp_large_norm_stays_accurate() {
        let a = Matrix::from_diagonal(&Vector::from_vec(vec![-50.0, 30.0]));
        let e = mat_exp(&a, 1.0).unwrap();
        assert_relative_eq!(e[(0, 0)], (-50.0f64).exp(), max_relative = 1e-12);
        assert_relative_eq!(e[(1, 1)], 30.0f64.exp(), max_relative = 1e-12);
    }

    #[test]
    fn mat_exp_rejects_non_square() {
        let a = Matrix::zeros(2, 3);
        assert!(matches!(mat_exp(&a, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn quadrature_examples() {
        let sin = quad_periodic(|t| Vector::from_element(1, t.sin()), 2.0 * PI, 256).unwrap();
        assert!(sin[0].abs() < 1e-12);
        let sin2 = quad_periodic(|t| Vector::from_element(1, t.sin().powi(2)), 2.0 * PI, 256).unwrap();
        assert!((sin2[0] - PI).abs() < 1e-10);
        let one = quad_periodic(|_| Vector::from_element(1, 1.0), 2.0 * PI, 256).unwrap();
        assert!((one[0] - 2.0 * PI).abs() < 1e-14);
    }

    #[test]
    fn quadrature_rejects_odd_panels() {
        assert!(matches!(
            quad_periodic(|_| Vector::from_element(1, 1.0), 1.0, 7),
            Err(Error::Config(_))
        ));
        assert!(quad_periodic(|_| Vector::from_element(1, 1.0), 1.0, 0).is_err());
    }

    #[test]
    fn cumulative_simpson_matches_antiderivative() {
        let n = 64;
        let h = 2.0 * PI / n as f64;
        let vals: Vec<Vector> = (0..=n).map(|k| Vector::from_element(1, (k as f64 * h).cos())).collect();
        let cum = cumulative_simpson(&vals, h).unwrap();
        for (k, c) in cum.iter().enumerate() {
            assert!((c[0] - (k as f64 * h).sin()).abs() < 1e-6, "node {k}");
        }
    }

    #[test]
    fn jacobian_examples() {
        let m = Matrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]);
        let x = Vector::from_vec(vec![0.3, -1.2, 2.0]);
        let j = jacobian_fd(|v| &m * v, &x, None).unwrap();
        assert!(max_abs(&(j - &m)) < 1e-8);

        let j = jacobian_fd(|v| v.map(|t| t * t), &Vector::from_element(1, 3.0), None).unwrap();
        assert!((j[(0, 0)] - 6.0).abs() < 1e-8);

        let c = |p: &Vector| Vector::from_element(1, -(1.0 + p.dot(p) / 2.0).ln());
        let g = jacobian_fd(c, &Vector::zeros(3), None).unwrap();
        assert!(max_abs(&g) < 1e-12);
    }

    #[test]
    fn jacobian_propagates_non_finite() {
        let r =jacobian_fd(|v| v.map(|t| t.ln()), &Vector::from_element(1, 0.0), Some(1e-3));
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn rk4_zero_field_is_constant() {
        let x0 = Vector::from_vec(vec![1.0, -2.0]);
        let grid = TimeGrid::new(0.0, 0.1, 10).unwrap();
        let traj = integrate_rk4(&|_, x: &Vector| x * 0.0, &x0, &grid).unwrap();
        assert_eq!(traj.len(), 11);
        assert!(traj.iter().all(|(_, x)| *x == x0));
    }

    #[test]
    fn rk4_exponential_decay() {
        let grid = TimeGrid::new(0.0, 1e-3, 1000).unwrap();
        let traj = integrate_rk4(&|_, x: &Vector| -x, &Vector::from_element(1, 1.0), &grid).unwrap();
        let (t, x) = traj.last().unwrap();
        assert_eq!(*t, 1.0);
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_harmonic_energy_drift() {
        let period = 2.0 * PI;
        let grid = TimeGrid::new(0.0, period / 200.0, 200 * 100).unwrap();
        let field = |_, x: &Vector| Vector::from_vec(vec![x[1], -x[0]]);
        let x0 = Vector::from_vec(vec![1.0, 0.0]);
        let xf = integrate_rk4_with(&field, &x0, &grid, |_| Ok(()), |_, _, _| true).unwrap();
        let energy = |x: &Vector| 0.5 * x.dot(x);
        assert!((energy(&xf) - energy(&x0)).abs() < 1e-6);
    }

    #[test]
    fn rk4_reports_divergence_step() {
        let grid = TimeGrid::new(0.0, 0.5, 100).unwrap();
        let err = integrate_rk4(&|_, x: &Vector| x.map(|v| v * v * v), &Vector::from_element(1, 10.0), &grid)
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { step, .. } if step >= 1));
    }

    #[test]
    fn time_grid_final_time_is_exact() {
        let g = TimeGrid::new(0.25, 0.1, 7).unwrap();
        assert_eq!(g.final_time(), 0.25 + 7.0 * 0.1);
        assert!(TimeGrid::new(0.0, 0.0, 3).is_err());
        assert!(TimeGrid::new(0.0, 0.1, 0).is_err());
        let c = TimeGrid::covering(0.0, 1.0, 0.3).unwrap();
        assert_eq!(c.n_steps(), 4);
        assert_eq!(TimeGrid::covering(0.0, 1.0, 0.1).unwrap().n_steps(), 10);
    }

    #[test]
    fn linear_fit_recovers_line() {
        let xs = [0.0, 1.0, 2.0, 3.0];
        let ys: Vec<f64> = xs.iter().map(|x| -0.5 * x + 2.0).collect();
        let (s, b) = linear_fit(&xs, &ys).unwrap();
        assert_relative_eq!(s, -0.5, epsilon = 1e-14);
        assert_relative_eq!(b, 2.0, epsilon = 1e-14);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn stable_matrix() -> impl Strategy<Value = Matrix> {
            (2usize..=4).prop_flat_map(|n| {
                proptest::collection::vec(-1.0f64..1.0, n * n).prop_map(move |v| {
                    // Shift the spectrum left so the matrix is stable; ||A|| <= 5.
                    let m = Matrix::from_row_slice(n, n, &v);
                    m - Matrix::identity(n, n) * (n as f64 + 0.5)
                })
            })
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn exp_semigroup(a in stable_matrix(), s in 0.0f64..2.0, t in 0.0f64..2.0) {
                let lhs = mat_exp(&a, s).unwrap() * mat_exp(&a, t).unwrap();
                let rhs = mat_exp(&a, s + t).unwrap();
                prop_assert!(max_abs(&(lhs - rhs)) < 1e-10);
            }

            #[test]
            fn simpson_exact_on_trig_polynomials(
                coeffs in proptest::collection::vec(-1.0f64..1.0, 15),
                half in 2usize..8,
            ) {
                let n_panels = 2 * half;
                let max_deg = n_panels / 2 - 1;
                let period = 2.0 * PI;
                let f = |t: f64| {
                    let mut s = coeffs[0];
                    for k in 1..=max_deg.min(7) {
                        s += coeffs[2 * k - 1] * (k as f64 * t).cos() + coeffs[2 * k] * (k as f64 * t).sin();
                    }
                    Vector::from_element(1, s)
                };
                let q = quad_periodic(f, period, n_panels).unwrap();
                prop_assert!((q[0] - coeffs[0] * period).abs() < 1e-12);
            }

            #[test]
            fn rk4_is_fourth_order(lambda in 0.5f64..2.0) {
                let err = |n: usize| {
                    let grid = TimeGrid::new(0.0, 1.0 / n as f64, n).unwrap();
                    let traj = integrate_rk4(&|_, x: &Vector| x * -lambda, &Vector::from_element(1, 1.0), &grid).unwrap();
                    (traj.last().unwrap().1[0] - (-lambda).exp()).abs()
                };
                let ratio = err(10) / err(20);
                prop_assert!((ratio - 16.0).abs() <= 0.2 * 16.0, "ratio {}", ratio);
            }
        }
    }
}
