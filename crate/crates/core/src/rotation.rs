//! Rotation representation conversions.
//!
//! The engine's canonical internal form is the unit quaternion; rotation
//! matrices, axis-angle (rotation vector) and the 6D continuous form are
//! I/O representations. The 6D form is the first two columns of the
//! rotation matrix; converting back re-orthonormalizes via Gram-Schmidt.

use crate::error::{Error, Result};
use crate::math::{
    mat_orthonormality_error, vec_cross, vec_dot, vec_norm, vec_normalize, vec_scale, vec_sub,
    Mat3, Quat, Vec3,
};

/// Tolerance for accepting an input matrix as orthonormal.
pub const MATRIX_ORTHONORMAL_TOL: f64 = 1e-5;
/// Tolerance for accepting an input quaternion as unit-norm.
pub const QUAT_UNIT_TOL: f64 = 1e-5;
/// Below this residual the two 6D columns count as parallel.
pub const SIX_D_DEGENERATE_TOL: f64 = 1e-8;

/// A rotation in one of the supported representations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    Matrix(Mat3),
    /// Rotation vector: axis scaled by angle (radians).
    AxisAngle(Vec3),
    Quaternion(Quat),
    /// First two matrix columns, stored `[c0; c1]`.
    SixD([f64; 6]),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RotationForm {
    Matrix,
    AxisAngle,
    Quaternion,
    SixD,
}

impl Rotation {
    pub fn form(&self) -> RotationForm {
        match self {
            Rotation::Matrix(_) => RotationForm::Matrix,
            Rotation::AxisAngle(_) => RotationForm::AxisAngle,
            Rotation::Quaternion(_) => RotationForm::Quaternion,
            Rotation::SixD(_) => RotationForm::SixD,
        }
    }

    /// Canonical form, validating the input representation.
    pub fn to_quat(&self) -> Result<Quat> {
        match self {
            Rotation::Quaternion(q) => {
                if !q.is_finite() {
                    return Err(Error::invalid("quaternion has non-finite entries"));
                }
                if (q.norm() - 1.0).abs() > QUAT_UNIT_TOL {
                    return Err(Error::invalid(format!(
                        "quaternion norm {} is not within {} of 1",
                        q.norm(),
                        QUAT_UNIT_TOL
                    )));
                }
                Ok(q.normalized())
            }
            Rotation::Matrix(m) => {
                let err = mat_orthonormality_error(m);
                if !err.is_finite() || err > MATRIX_ORTHONORMAL_TOL {
                    return Err(Error::invalid(format!(
                        "matrix is not orthonormal (error {err:.3e})"
                    )));
                }
                Ok(Quat::from_matrix(m))
            }
            Rotation::AxisAngle(v) => {
                if !v.iter().all(|x| x.is_finite()) {
                    return Err(Error::invalid("axis-angle has non-finite entries"));
                }
                Ok(Quat::from_axis_angle(*v))
            }
            Rotation::SixD(cols) => Ok(Quat::from_matrix(&matrix_from_six_d(cols)?)),
        }
    }
}

/// Gram-Schmidt reconstruction of a rotation matrix from its first two
/// columns. Degenerate inputs (zero or parallel columns) are rejected.
pub fn matrix_from_six_d(cols: &[f64; 6]) -> Result<Mat3> {
    if !cols.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("6D rotation has non-finite entries"));
    }
    let a1 = [cols[0], cols[1], cols[2]];
    let a2 = [cols[3], cols[4], cols[5]];
    let b1 = vec_normalize(a1)
        .ok_or_else(|| Error::invalid("6D rotation: first column is near zero"))?;
    let proj = vec_scale(b1, vec_dot(b1, a2));
    let residual = vec_sub(a2, proj);
    if vec_norm(residual) < SIX_D_DEGENERATE_TOL {
        return Err(Error::invalid(
            "6D rotation: columns are parallel (degenerate)",
        ));
    }
    let b2 = vec_normalize(residual).expect("residual norm checked above");
    let b3 = vec_cross(b1, b2);
    Ok([
        [b1[0], b2[0], b3[0]],
        [b1[1], b2[1], b3[1]],
        [b1[2], b2[2], b3[2]],
    ])
}

/// First two columns of the rotation matrix of `q`.
pub fn six_d_from_quat(q: &Quat) -> [f64; 6] {
    let m = q.to_matrix();
    [m[0][0], m[1][0], m[2][0], m[0][1], m[1][1], m[2][1]]
}

/// Converts `value` to `to_form`. The source form is carried by the value.
pub fn convert_rotation(value: &Rotation, to_form: RotationForm) -> Result<Rotation> {
    let q = value.to_quat()?;
    Ok(match to_form {
        RotationForm::Quaternion => Rotation::Quaternion(q),
        RotationForm::Matrix => Rotation::Matrix(q.to_matrix()),
        RotationForm::AxisAngle => Rotation::AxisAngle(q.to_axis_angle()),
        RotationForm::SixD => Rotation::SixD(six_d_from_quat(&q)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::IDENTITY_MAT3;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
        // Uniformly random unit quaternion (Shoemake).
        let u1: f64 = rng.random();
        let u2: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let u3: f64 = rng.random::<f64>() * std::f64::consts::TAU;
        let a = (1.0 - u1).sqrt();
        let b = u1.sqrt();
        Quat::new(a * u2.sin(), a * u2.cos(), b * u3.sin(), b * u3.cos()).normalized()
    }

    #[test]
    fn identity_matrix_to_axis_angle_is_zero() {
        let out = convert_rotation(&Rotation::Matrix(IDENTITY_MAT3), RotationForm::AxisAngle)
            .unwrap();
        assert_eq!(out, Rotation::AxisAngle([0.0, 0.0, 0.0]));
    }

    #[test]
    fn axis_angle_matrix_round_trip() {
        let src = Rotation::AxisAngle([0.0, 0.0, std::f64::consts::FRAC_PI_2]);
        let m = convert_rotation(&src, RotationForm::Matrix).unwrap();
        let back = convert_rotation(&m, RotationForm::AxisAngle).unwrap();
        let Rotation::AxisAngle(v) = back else {
            panic!("wrong form")
        };
        assert!((v[0]).abs() < 1e-6 && (v[1]).abs() < 1e-6);
        assert!((v[2] - std::f64::consts::FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn six_d_round_trip_over_seeded_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x6d5eed);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            let six = six_d_from_quat(&q);
            let m = matrix_from_six_d(&six).unwrap();
            assert!(mat_orthonormality_error(&m) < 1e-6);
            let back = Quat::from_matrix(&m);
            assert!(q.angle_to(&back) < 1e-6);
        }
    }

    #[test]
    fn all_form_pairs_round_trip() {
        let forms = [
            RotationForm::Matrix,
            RotationForm::AxisAngle,
            RotationForm::Quaternion,
            RotationForm::SixD,
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..1000 {
            let q = random_quat(&mut rng);
            for &form in &forms {
                let there = convert_rotation(&Rotation::Quaternion(q), form).unwrap();
                let back = convert_rotation(&there, RotationForm::Quaternion).unwrap();
                let qb = back.to_quat().unwrap();
                assert!(
                    q.angle_to(&qb) < 1e-6,
                    "round trip through {form:?} drifted by {}",
                    q.angle_to(&qb)
                );
            }
        }
    }

    #[test]
    fn degenerate_six_d_rejected() {
        let parallel = [1.0, 0.0, 0.0, 2.0, 0.0, 0.0];
        assert!(matrix_from_six_d(&parallel).is_err());
        let zero = [0.0; 6];
        assert!(matrix_from_six_d(&zero).is_err());
    }

    #[test]
    fn non_orthonormal_matrix_rejected() {
        let mut m = IDENTITY_MAT3;
        m[0][0] = 1.1;
        assert!(convert_rotation(&Rotation::Matrix(m), RotationForm::Quaternion).is_err());
    }
}
