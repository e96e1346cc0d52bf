//! Rotation-group kinematics: the hat map, Rodrigues' exponential, the ℝ⁹
//! embedding of SO(3) as stacked columns, and projection back onto the group.

use nalgebra::{Matrix3, SVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthogonality/determinant tolerance for a [`Rotation`].
pub const ROTATION_TOL: f64 = 1e-9;

/// Constraint violation beyond which an embedded frame is rejected.
pub const MANIFOLD_TOL: f64 = 1e-6;

/// Below this angle the Rodrigues coefficients use their series.
const SMALL_ANGLE: f64 = 1e-6;

const PROJECTION_TOL: f64 = 1e-14;
const PROJECTION_MAX_ITERS: usize = 60;

/// A 3×3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rotation(Matrix3<f64>);

impl Rotation {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    /// Validates `QᵀQ = Id` and `det Q = 1` to [`ROTATION_TOL`].
    pub fn new(m: Matrix3<f64>) -> Result<Self> {
        let residual = orthogonality_residual(&m).max((m.determinant() - 1.0).abs());
        if !(residual <= ROTATION_TOL) {
            return Err(Error::Manifold { residual });
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn compose(&self, other: &Rotation) -> Self {
        Self(self.0 * other.0)
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.0 * v
    }
}

/// The ℝ⁹ embedding of a frame: `q = [q₁; q₂; q₃]` with `qᵢ` the columns of `Q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddedFrame(SVector<f64, 9>);

impl EmbeddedFrame {
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn vector(&self) -> &SVector<f64, 9> {
        &self.0
    }

    /// Column `i` (0-based) of the frame.
    pub fn column(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.0[3 * i], self.0[3 * i + 1], self.0[3 * i + 2])
    }

    /// Wraps nine numbers after checking the manifold constraints.
    pub fn from_slice(q: &[f64]) -> Result<Self> {
        if q.len() != 9 {
            return Err(Error::Dimension(format!("frame needs 9 entries, got {}", q.len())));
        }
        let residual = manifold_residual(q);
        if !(residual <= MANIFOLD_TOL) {
            return Err(Error::Manifold { residual });
        }
        Ok(Self(SVector::from_column_slice(q)))
    }

    /// Wraps nine numbers as they are. Used for integrator states, which
    /// drift off the manifold between projections.
    pub(crate) fn from_slice_unchecked(q: &[f64]) -> Self {
        Self(SVector::from_column_slice(&q[..9]))
    }
}

/// `hat(Ω)` with `hat(Ω) w = Ω × w`.
pub fn hat(omega: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -omega.z, omega.y,
        omega.z, 0.0, -omega.x,
        -omega.y, omega.x, 0.0,
    )
}

/// Rodrigues' formula for the rotation by `|Ω|` about `Ω/|Ω|`.
pub fn exp_so3(omega: &Vector3<f64>) -> Rotation {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta2)
    };
    let k = hat(omega);
    Rotation(Matrix3::identity() + k * a + k * k * b)
}

pub fn embed(q: &Rotation) -> EmbeddedFrame {
    // nalgebra stores column-major, which is exactly [q₁; q₂; q₃].
    EmbeddedFrame(SVector::from_column_slice(q.0.as_slice()))
}

pub fn extract(q: &EmbeddedFrame) -> Result<Rotation> {
    let residual = manifold_residual(q.as_slice());
    if !(residual <= MANIFOLD_TOL) {
        return Err(Error::Manifold { residual });
    }
    Ok(Rotation(Matrix3::from_column_slice(q.as_slice())))
}

/// Largest violation of `qᵢᵀqⱼ = δᵢⱼ` and `qᵢ × qⱼ = εᵢⱼₖ qₖ` (sup-norm).
///
/// # Panics
/// If `q` does not hold exactly nine entries.
pub fn manifold_residual(q: &[f64]) -> f64 {
    assert_eq!(q.len(), 9, "embedded frame has nine entries");
    let col = |i: usize| Vector3::new(q[3 * i], q[3 * i + 1], q[3 * i + 2]);
    let cols = [col(0), col(1), col(2)];
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let delta = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((cols[i].dot(&cols[j]) - delta).abs());
            if i != j {
                let k = 3 - i - j;
                let sign = levi_civita(i, j, k);
                let r = cols[i].cross(&cols[j]) - cols[k] * sign;
                worst = worst.max(r.amax());
            }
        }
    }
    if worst.is_nan() {
        f64::INFINITY
    } else {
        worst
    }
}

fn levi_civita(i: usize, j: usize, k: usize) -> f64 {
    match (i, j, k) {
        (0, 1, 2) | (1, 2, 0) | (2, 0, 1) => 1.0,
        (0, 2, 1) | (2, 1, 0) | (1, 0, 2) => -1.0,
        _ => 0.0,
    }
}

fn orthogonality_residual(m: &Matrix3<f64>) -> f64 {
    (m.transpose() * m - Matrix3::identity()).amax()
}

/// Nearest rotation (orthogonal polar factor) to a near-rotation `m`, by
/// the iteration `Q ← Q(3·Id − QᵀQ)/2`.
pub fn project_so3(m: &Matrix3<f64>) -> Result<Rotation> {
    let gap = (m.transpose() * m - Matrix3::identity()).norm();
    if !(gap < 0.5) {
        return Err(Error::Projection(format!("‖MᵀM − Id‖_F = {gap:.3e} is not below 0.5")));
    }
    if m.determinant() <= 0.0 {
        return Err(Error::Projection("matrix has non-positive determinant".into()));
    }
    let three = Matrix3::identity() * 3.0;
    let mut q = *m;
    let mut best = orthogonality_residual(&q);
    for _ in 0..PROJECTION_MAX_ITERS {
        if best < PROJECTION_TOL {
            return Ok(Rotation(q));
        }
        let next = q * (three - q.transpose() * q) * 0.5;
        let r = orthogonality_residual(&next);
        if r >= best && best < 1e-13 {
            // Roundoff floor reached.
            return Ok(Rotation(q));
        }
        q = next;
        best = r;
    }
    if best < 1e-12 {
        Ok(Rotation(q))
    } else {
        Err(Error::Projection(format!("iteration stalled at residual {best:.3e}")))
    }
}

/// Projects the nine frame entries in place.
pub fn project_frame_in_place(q: &mut [f64]) -> Result<()> {
    let m = Matrix3::from_column_slice(q);
    let r = project_so3(&m)?;
    q.copy_from_slice(r.0.as_slice());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_rotation(rng: &mut ChaCha8Rng) -> Rotation {
        let v = Vector3::new(rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0));
        exp_so3(&v)
    }

    #[test]
    fn hat_examples() {
        assert_eq!(hat(&Vector3::zeros()), Matrix3::zeros());
        let h = hat(&Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(h, Matrix3::new(0.0, -3.0, 2.0, 3.0, 0.0, -1.0, -2.0, 1.0, 0.0));
        assert_eq!(h * Vector3::x(), Vector3::new(1.0, 2.0, 3.0).cross(&Vector3::x()));
        assert_eq!(hat(&Vector3::x()) * Vector3::y(), Vector3::z());
    }

    #[test]
    fn exp_examples() {
        assert_eq!(*exp_so3(&Vector3::zeros()).matrix(), Matrix3::identity());
        let quarter = exp_so3(&(Vector3::z() * (PI / 2.0)));
        assert!((quarter.apply(&Vector3::x()) - Vector3::y()).amax() < 1e-12);
        let full = exp_so3(&(Vector3::x() * (2.0 * PI)));
        assert!((full.matrix() - Matrix3::identity()).amax() < 1e-10);
    }

    #[test]
    fn small_angle_branch_is_continuous() {
        let v = Vector3::new(3e-7, -2e-7, 1e-7);
        let series = exp_so3(&v);
        let expected = Matrix3::identity() + hat(&v) + hat(&v) * hat(&v) * 0.5;
        assert!((series.matrix() - expected).amax() < 1e-18);
    }

    #[test]
    fn embedding_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(
            embed(&Rotation::identity()).as_slice(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            assert_eq!(extract(&embed(&r)).unwrap(), r);
        }
    }

    #[test]
    fn extract_rejects_off_manifold() {
        let mut q = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        q[3] = 0.1; // q₂ picks up an e₁ component: q₁ᵀq₂ = 0.1
        assert!(matches!(EmbeddedFrame::from_slice(&q), Err(Error::Manifold { .. })));
        let bad = EmbeddedFrame(SVector::from_column_slice(&q));
        assert!(matches!(extract(&bad), Err(Error::Manifold { .. })));
    }

    #[test]
    fn residual_examples() {
        let id = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(manifold_residual(&id), 0.0);
        let mut scaled = id;
        scaled[0] = 1.01;
        assert!((manifold_residual(&scaled) - 0.0201).abs() < 1e-12);
        assert_eq!(manifold_residual(&[0.0; 9]), 1.0);
    }

    #[test]
    fn projection_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let r = random_rotation(&mut rng);
        let p = project_so3(r.matrix()).unwrap();
        assert!((p.matrix() - r.matrix()).amax() < 1e-14);

        let p = project_so3(&(Matrix3::identity() * 1.001)).unwrap();
        assert!((p.matrix() - Matrix3::identity()).amax() < 1e-12);

        let m = Matrix3::identity() + hat(&Vector3::z()) * 1e-3;
        let p = project_so3(&m).unwrap();
        assert!(orthogonality_residual(p.matrix()) < 1e-12);
        let angle = p.matrix()[(1, 0)].atan2(p.matrix()[(0, 0)]);
        assert!((angle - 1e-3).abs() < 1e-9);
        assert!(p.matrix()[(2, 2)] == 1.0 || (p.matrix()[(2, 2)] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn projection_rejects_far_matrices() {
        assert!(matches!(project_so3(&(Matrix3::identity() * 2.0)), Err(Error::Projection(_))));
        let reflection = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0));
        assert!(matches!(project_so3(&reflection), Err(Error::Projection(_))));
    }

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-10.0f64..10.0, -10.0f64..10.0, -10.0f64..10.0).prop_map(|(a, b, c)| Vector3::new(a, b, c))
    }

    proptest! {
        #[test]
        fn exp_inverse_pairs(v in vec3()) {
            let prod = exp_so3(&v).compose(&exp_so3(&-v));
            prop_assert!((prod.matrix() - Matrix3::identity()).amax() < 1e-12);
        }

        #[test]
        fn exp_has_unit_determinant(v in vec3()) {
            prop_assume!(v.norm() <= 10.0);
            prop_assert!((exp_so3(&v).matrix().determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn hat_is_linear(v in vec3(), w in vec3(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
            // Exact for the representable combination a·v + b·w.
            let combo = v * a + w * b;
            let lhs = hat(&combo);
            let rhs = hat(&(v * a)) + hat(&(w * b));
            prop_assert_eq!(lhs, rhs);
        }
    }
}
