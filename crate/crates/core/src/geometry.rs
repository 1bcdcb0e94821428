//! Rigid transforms.
//!
//! A [`Pose`] is an element of SE(3). Camera poses read from a trajectory are
//! camera-to-world; every transform produced inside the pipeline is
//! target-from-source, i.e. it maps points expressed in the source camera
//! into the target camera.

use nalgebra::{Matrix3, Matrix4, Point3, Quaternion, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// From a TUM-style `(tx ty tz qx qy qz qw)` row. The quaternion is
    /// renormalized.
    pub fn from_tum(t: [f64; 3], q: [f64; 4]) -> Self {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        Self {
            rotation: UnitQuaternion::from_quaternion(quat),
            translation: Vector3::new(t[0], t[1], t[2]),
        }
    }

    pub fn from_axis_angle(axis_angle: Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: UnitQuaternion::from_scaled_axis(axis_angle),
            translation,
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        Point3::from(self.rotation * p.coords + self.translation)
    }

    /// Rotates a direction; translation does not apply.
    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(self.rotation.to_rotation_matrix().matrix());
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_rotation_matrix(r: &Matrix3<f64>, t: Vector3<f64>) -> Self {
        let rot = nalgebra::Rotation3::from_matrix(r);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation: t,
        }
    }

    /// SE(3) exponential of a twist `[ρ; ω]`.
    pub fn exp(xi: &Vector6<f64>) -> Pose {
        let rho = Vector3::new(xi[0], xi[1], xi[2]);
        let omega = Vector3::new(xi[3], xi[4], xi[5]);
        let theta = omega.norm();
        let wx = skew(&omega);
        let v = if theta < 1e-8 {
            Matrix3::identity() + 0.5 * wx + wx * wx / 6.0
        } else {
            let t2 = theta * theta;
            Matrix3::identity()
                + (1.0 - theta.cos()) / t2 * wx
                + (theta - theta.sin()) / (t2 * theta) * wx * wx
        };
        Pose {
            rotation: UnitQuaternion::from_scaled_axis(omega),
            translation: v * rho,
        }
    }

    /// SE(3) logarithm as a twist `[ρ; ω]`.
    pub fn log(&self) -> Vector6<f64> {
        let omega = self.rotation.scaled_axis();
        let theta = omega.norm();
        let wx = skew(&omega);
        let v_inv = if theta < 1e-8 {
            Matrix3::identity() - 0.5 * wx + wx * wx / 12.0
        } else {
            let half = 0.5 * theta;
            let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
            Matrix3::identity() - 0.5 * wx + coef * wx * wx
        };
        let rho = v_inv * self.translation;
        Vector6::new(rho[0], rho[1], rho[2], omega[0], omega[1], omega[2])
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v[2], v[1], v[2], 0.0, -v[0], -v[1], v[0], 0.0)
}

/// Plain serializable form `(t, q_xyzw)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRecord {
            t: [p.translation.x, p.translation.y, p.translation.z],
            q: [q.i, q.j, q.k, q.w],
        }
    }
}

impl From<&PoseRecord> for Pose {
    fn from(r: &PoseRecord) -> Self {
        // Records are written from unit quaternions; rebuild without
        // renormalizing so round trips are bit-exact.
        Pose {
            rotation: UnitQuaternion::new_unchecked(Quaternion::new(r.q[3], r.q[0], r.q[1], r.q[2])),
            translation: Vector3::new(r.t[0], r.t[1], r.t[2]),
        }
    }
}

impl Serialize for Pose {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        PoseRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        PoseRecord::deserialize(d).map(|r| Pose::from(&r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pose_strategy() -> impl Strategy<Value = Pose> {
        (
            prop::array::uniform3(-2.0f64..2.0),
            prop::array::uniform3(-3.0f64..3.0),
        )
            .prop_map(|(w, t)| Pose::from_axis_angle(Vector3::from(w), Vector3::from(t)))
    }

    proptest! {
        #[test]
        fn compose_then_inverse_is_identity(a in pose_strategy(), b in pose_strategy()) {
            let r = a.compose(&b).compose(&b.inverse());
            prop_assert!((r.translation - a.translation).norm() < 1e-9);
            prop_assert!(r.rotation.angle_to(&a.rotation) < 1e-9);
        }

        #[test]
        fn exp_log_roundtrip(p in pose_strategy()) {
            let q = Pose::exp(&p.log());
            prop_assert!((q.translation - p.translation).norm() < 1e-9);
            prop_assert!(q.rotation.angle_to(&p.rotation) < 1e-9);
        }
    }

    #[test]
    fn unit_quaternion_from_tum_row() {
        let p = Pose::from_tum([1.0, 2.0, 3.0], [0.0, 0.0, 2.0f64.sqrt() / 2.0, 2.0f64.sqrt() / 2.0]);
        assert!((p.rotation.quaternion().norm() - 1.0).abs() < 1e-12);
        assert!((p.rotation_angle() - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn matrix_form_matches_point_transform() {
        let p = Pose::from_axis_angle(Vector3::new(0.1, -0.2, 0.3), Vector3::new(1.0, 0.0, -1.0));
        let x = Point3::new(0.3, 0.4, 2.0);
        let m = p.to_matrix() * x.to_homogeneous();
        let y = p.transform_point(&x);
        assert!((Vector3::new(m[0], m[1], m[2]) - y.coords).norm() < 1e-12);
    }
}
