//! Rotation representations: unit quaternions, 6D (first two matrix columns)
//! and 3x3 matrices, plus rigid SE(3) transforms.

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Columns whose norm falls below this are treated as degenerate input.
const DEGENERATE_EPS: f64 = 1e-8;
/// Pairs already orthonormal to this tolerance are taken verbatim, so that
/// rot6d(from_rot6d(x)) reproduces x bit-for-bit.
const ORTHONORMAL_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RotationRepr {
    Quat,
    Rot6d,
    Matrix,
}

/// A rotation in one of the supported representations.
///
/// Quaternions are `[w, x, y, z]`; 6D is `[c0x, c0y, c0z, c1x, c1y, c1z]`, the
/// first two columns of the rotation matrix; matrices are row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Rotation {
    Quat([f64; 4]),
    Rot6d([f64; 6]),
    Matrix([[f64; 3]; 3]),
}

impl Rotation {
    pub fn repr(&self) -> RotationRepr {
        match self {
            Rotation::Quat(_) => RotationRepr::Quat,
            Rotation::Rot6d(_) => RotationRepr::Rot6d,
            Rotation::Matrix(_) => RotationRepr::Matrix,
        }
    }

    fn to_matrix(self) -> Result<Rotation3<f64>> {
        match self {
            Rotation::Quat(q) => Ok(quat_from_wxyz(q)?.to_rotation_matrix()),
            Rotation::Rot6d(r) => rotation_from_rot6d(&r),
            Rotation::Matrix(m) => {
                let m = Matrix3::from_fn(|r, c| m[r][c]);
                let should_be_identity = m.transpose() * m;
                if !m.iter().all(|v| v.is_finite())
                    || (should_be_identity - Matrix3::identity()).abs().max() > 1e-6
                    || (m.determinant() - 1.0).abs() > 1e-6
                {
                    return Err(Error::InvalidValue(
                        "matrix is not a proper rotation".into(),
                    ));
                }
                Ok(Rotation3::from_matrix_unchecked(m))
            }
        }
    }
}

/// Converts between rotation representations. Quaternion outputs are
/// canonicalized to a non-negative scalar part.
pub fn convert_rotation(value: Rotation, target: RotationRepr) -> Result<Rotation> {
    if value.repr() == target {
        if let Rotation::Quat(q) = value {
            return Ok(Rotation::Quat(quat_to_wxyz(&quat_from_wxyz(q)?)));
        }
    }
    let m = value.to_matrix()?;
    Ok(match target {
        RotationRepr::Quat => {
            Rotation::Quat(quat_to_wxyz(&canonical_quat(UnitQuaternion::from_rotation_matrix(&m))))
        }
        RotationRepr::Rot6d => Rotation::Rot6d(rot6d_from_rotation(&m)),
        RotationRepr::Matrix => {
            let mut out = [[0.0; 3]; 3];
            for (r, row) in out.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = m[(r, c)];
                }
            }
            Rotation::Matrix(out)
        }
    })
}

/// Flips the quaternion so that its scalar part is non-negative.
pub fn canonical_quat(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

pub fn quat_from_wxyz(q: [f64; 4]) -> Result<UnitQuaternion<f64>> {
    let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
    let n = raw.norm();
    if !n.is_finite() || (n - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidValue(format!("quaternion norm {n} is not 1")));
    }
    Ok(canonical_quat(UnitQuaternion::new_normalize(raw)))
}

pub fn quat_to_wxyz(q: &UnitQuaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

pub fn rot6d_from_rotation(m: &Rotation3<f64>) -> [f64; 6] {
    let m = m.matrix();
    [
        m[(0, 0)],
        m[(1, 0)],
        m[(2, 0)],
        m[(0, 1)],
        m[(1, 1)],
        m[(2, 1)],
    ]
}

/// Builds a rotation whose first two columns come from a 6D vector by
/// Gram-Schmidt and whose third column is their cross product.
pub fn rotation_from_rot6d(r: &[f64; 6]) -> Result<Rotation3<f64>> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::DegenerateRotation("non-finite 6D input".into()));
    }
    let a = Vec3::new(r[0], r[1], r[2]);
    let b = Vec3::new(r[3], r[4], r[5]);
    let (c0, c1) = if (a.norm_squared() - 1.0).abs() < ORTHONORMAL_EPS
        && (b.norm_squared() - 1.0).abs() < ORTHONORMAL_EPS
        && a.dot(&b).abs() < ORTHONORMAL_EPS
    {
        (a, b)
    } else {
        let an = a.norm();
        if an < DEGENERATE_EPS {
            return Err(Error::DegenerateRotation("first column is near zero".into()));
        }
        let c0 = a / an;
        let ortho = b - c0 * c0.dot(&b);
        let on = ortho.norm();
        if on < DEGENERATE_EPS * b.norm().max(1.0) {
            return Err(Error::DegenerateRotation("columns are near parallel".into()));
        }
        (c0, ortho / on)
    };
    Ok(rotation_from_columns(c0, c1))
}

/// Rotation with the given orthonormal first two columns; the third is
/// `c0 × c1`. Every object rotation is stored in this form.
pub(crate) fn rotation_from_columns(c0: Vec3, c1: Vec3) -> Rotation3<f64> {
    let c2 = c0.cross(&c1);
    Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[c0, c1, c2]))
}

/// Re-expresses any rotation in the canonical column form.
pub(crate) fn canonical_rotation(m: &Rotation3<f64>) -> Rotation3<f64> {
    let mm = m.matrix();
    rotation_from_columns(mm.column(0).into_owned(), mm.column(1).into_owned())
}

/// Rigid transform `p ↦ R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Transform {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vec3,
}

impl Se3Transform {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: canonical_quat(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::zeros())
    }

    pub fn translate(x: f64, y: f64, z: f64) -> Self {
        Self::new(UnitQuaternion::identity(), Vec3::new(x, y, z))
    }

    pub fn rotate(axis: Vec3, angle: f64) -> Self {
        let q = UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
        Self::new(q, Vec3::zeros())
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Se3Transform) -> Se3Transform {
        Se3Transform::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Se3Transform {
        let inv = self.rotation.inverse();
        Se3Transform::new(inv, -(inv * self.translation))
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> UnitQuaternion<f64> {
        loop {
            let q = Quaternion::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            if q.norm() > 0.1 {
                return UnitQuaternion::new_normalize(q);
            }
        }
    }

    fn same_up_to_sign(a: [f64; 4], b: [f64; 4], tol: f64) -> bool {
        let plus = a.iter().zip(&b).all(|(x, y)| (x - y).abs() < tol);
        let minus = a.iter().zip(&b).all(|(x, y)| (x + y).abs() < tol);
        plus || minus
    }

    #[test]
    fn identity_quat_to_rot6d_and_matrix() {
        let r = convert_rotation(Rotation::Quat([1.0, 0.0, 0.0, 0.0]), RotationRepr::Rot6d).unwrap();
        assert_eq!(r, Rotation::Rot6d([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let m = convert_rotation(r, RotationRepr::Matrix).unwrap();
        assert_eq!(
            m,
            Rotation::Matrix([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
        );
    }

    #[test]
    fn quarter_turn_about_z_matrix_to_quat() {
        let m = Rotation::Matrix([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let Rotation::Quat(q) = convert_rotation(m, RotationRepr::Quat).unwrap() else {
            unreachable!()
        };
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(same_up_to_sign(q, [h, 0.0, 0.0, h], 1e-12), "{q:?}");
    }

    #[test]
    fn rot6d_round_trip_over_random_quaternions() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let q = quat_to_wxyz(&random_quat(&mut rng));
            let r6 = convert_rotation(Rotation::Quat(q), RotationRepr::Rot6d).unwrap();
            let Rotation::Quat(back) = convert_rotation(r6, RotationRepr::Quat).unwrap() else {
                unreachable!()
            };
            assert!(same_up_to_sign(q, back, 1e-7));
            let m = convert_rotation(Rotation::Quat(q), RotationRepr::Matrix).unwrap();
            let Rotation::Quat(back) = convert_rotation(m, RotationRepr::Quat).unwrap() else {
                unreachable!()
            };
            assert!(same_up_to_sign(q, back, 1e-7));
        }
    }

    #[test]
    fn antipodal_quaternions_agree_in_other_representations() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let q = quat_to_wxyz(&random_quat(&mut rng));
            let neg = q.map(|v| -v);
            for target in [RotationRepr::Rot6d, RotationRepr::Matrix] {
                let a = convert_rotation(Rotation::Quat(q), target).unwrap();
                let b = convert_rotation(Rotation::Quat(neg), target).unwrap();
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn degenerate_rot6d_is_rejected() {
        let zero_first = Rotation::Rot6d([0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(
            convert_rotation(zero_first, RotationRepr::Quat),
            Err(Error::DegenerateRotation(_))
        ));
        let parallel = Rotation::Rot6d([1.0, 0.0, 0.0, 2.0, 0.0, 0.0]);
        assert!(matches!(
            convert_rotation(parallel, RotationRepr::Matrix),
            Err(Error::DegenerateRotation(_))
        ));
    }

    #[test]
    fn unnormalized_rot6d_is_orthonormalized() {
        let m = rotation_from_rot6d(&[2.0, 0.0, 0.0, 1.0, 3.0, 0.0]).unwrap();
        assert_abs_diff_eq!(m.matrix(), &Matrix3::identity(), epsilon = 1e-12);
    }

    #[test]
    fn invert_identity_is_identity() {
        let id = Se3Transform::identity();
        assert_eq!(id.inverse(), id);
    }

    #[test]
    fn translate_after_rotate_maps_x_to_one_one() {
        let a = Se3Transform::translate(1.0, 0.0, 0.0);
        let b = Se3Transform::rotate(Vec3::z(), std::f64::consts::FRAC_PI_2);
        let p = a.compose(&b).apply(&Vec3::x());
        assert_abs_diff_eq!(p, Vec3::new(1.0, 1.0, 0.0), epsilon = 1e-12);
    }

    fn random_transform(rng: &mut impl Rng) -> Se3Transform {
        Se3Transform::new(
            random_quat(rng),
            Vec3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    #[test]
    fn transform_group_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let (a, b, c) = (
                random_transform(&mut rng),
                random_transform(&mut rng),
                random_transform(&mut rng),
            );
            let p = Vec3::new(0.3, -0.7, 1.1);
            let left = a.compose(&b).compose(&c);
            let right = a.compose(&b.compose(&c));
            assert_abs_diff_eq!(left.apply(&p), right.apply(&p), epsilon = 1e-9);
            assert!(left.rotation.angle_to(&right.rotation) < 1e-9);

            let id = a.compose(&a.inverse());
            assert!(id.rotation.angle() < 1e-9);
            assert!(id.translation.norm() < 1e-9);

            assert_abs_diff_eq!(
                a.compose(&b).apply(&p),
                a.apply(&b.apply(&p)),
                epsilon = 1e-9
            );
        }
    }
}
