use nalgebra::{Matrix3, Rotation3, Unit, Vector3, SVD};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{PointCloud, Vec3};
use crate::error::{Error, Result};

const ORTHO_TOL: f64 = 1e-6;

/// Rigid motion `p -> R p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: `R^T R = I` and `det R = +1` within 1e-6.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !rotation.iter().chain(translation.iter()).all(|v| v.is_finite()) {
            return Err(Error::InvalidTransform("non-finite entries".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(Error::InvalidTransform(format!(
                "rotation is not orthonormal (|R^T R - I| = {ortho:.3e}, det = {det:.9})"
            )));
        }
        Ok(RigidTransform {
            rotation,
            translation,
        })
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_rotation(r: Rotation3<f64>, t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: *r.matrix(),
            translation: t,
        }
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::from_rotation(r, t)
    }

    /// Nearest rotation to an arbitrary matrix (polar decomposition), paired with `t`.
    pub fn from_nearly_orthonormal(m: Matrix3<f64>, t: Vector3<f64>) -> Self {
        RigidTransform {
            rotation: nearest_rotation(&m),
            translation: t,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        let mut rotation = self.rotation * other.rotation;
        let drift = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        if drift > ORTHO_TOL {
            rotation = nearest_rotation(&rotation);
        }
        RigidTransform {
            rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud.points.iter().map(|p| self.apply_point(p)).collect(),
            colors: cloud.colors.clone(),
        }
    }

    /// Rotation angle of `self^-1 ∘ other`, radians.
    pub fn angle_to(&self, other: &RigidTransform) -> f64 {
        let rel = self.rotation.transpose() * other.rotation;
        let c = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos()
    }

    pub fn translation_distance(&self, other: &RigidTransform) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn orthonormality_error(&self) -> f64 {
        (self.rotation.transpose() * self.rotation - Matrix3::identity()).amax()
    }

    pub fn to_row_major(&self) -> ([[f64; 3]; 3], [f64; 3]) {
        let r = &self.rotation;
        (
            [
                [r[(0, 0)], r[(0, 1)], r[(0, 2)]],
                [r[(1, 0)], r[(1, 1)], r[(1, 2)]],
                [r[(2, 0)], r[(2, 1)], r[(2, 2)]],
            ],
            [self.translation.x, self.translation.y, self.translation.z],
        )
    }

    pub fn from_row_major(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self> {
        let r = Matrix3::from_fn(|i, j| rotation[i][j]);
        Self::new(r, Vector3::from(translation))
    }
}

pub(crate) fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = SVD::new(*m, true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let d = (u * v_t).determinant().signum();
    u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * v_t
}

#[derive(Serialize, Deserialize)]
struct PoseDoc {
    rotation: [[f64; 3]; 3],
    translation: [f64; 3],
}

impl Serialize for RigidTransform {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let (rotation, translation) = self.to_row_major();
        PoseDoc {
            rotation,
            translation,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RigidTransform {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let doc = PoseDoc::deserialize(d)?;
        RigidTransform::from_row_major(doc.rotation, doc.translation).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_transform(rng: &mut impl Rng) -> RigidTransform {
        let axis = Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        let axis = if axis.norm() < 1e-3 { Vector3::z() } else { axis };
        RigidTransform::from_axis_angle(
            &axis,
            rng.random_range(-3.0..3.0),
            Vector3::new(
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
                rng.random_range(-2.0..2.0),
            ),
        )
    }

    #[test]
    fn identity_composes_to_identity() {
        let id = RigidTransform::identity();
        assert_eq!(id.compose(&id), id);
    }

    #[test]
    fn inverse_cancels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let t = random_transform(&mut rng);
            let e = t.compose(&t.inverse());
            assert!((e.rotation() - Matrix3::identity()).amax() < 1e-9);
            assert!(e.translation().amax() < 1e-9);
        }
    }

    #[test]
    fn apply_matches_hand_matrix_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = random_transform(&mut rng);
        let (r, tr) = t.to_row_major();
        for _ in 0..100 {
            let p = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
            );
            let q = t.apply_point(&p);
            for i in 0..3 {
                let hand = r[i][0] * p.x + r[i][1] * p.y + r[i][2] * p.z + tr[i];
                assert!((hand - q[i]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_reflection_and_shear() {
        let mut m = Matrix3::identity();
        m[(2, 2)] = -1.0;
        assert!(RigidTransform::new(m, Vector3::zeros()).is_err());
        let mut s = Matrix3::identity();
        s[(0, 1)] = 0.1;
        assert!(RigidTransform::new(s, Vector3::zeros()).is_err());
    }

    #[test]
    fn long_composition_stays_orthonormal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut acc = RigidTransform::identity();
        for _ in 0..1000 {
            acc = acc.compose(&random_transform(&mut rng));
            assert!(acc.orthonormality_error() <= 1e-6);
        }
        assert!((acc.rotation().determinant() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = random_transform(&mut rng);
        let s = serde_json::to_string(&t).unwrap();
        let back: RigidTransform = serde_json::from_str(&s).unwrap();
        assert_eq!(t, back);
    }

    proptest! {
        #[test]
        fn compose_is_sequential_application(seed in any::<u64>(), x in -5.0..5.0f64, y in -5.0..5.0f64, z in -5.0..5.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_transform(&mut rng);
            let b = random_transform(&mut rng);
            let p = Vec3::new(x, y, z);
            let lhs = a.compose(&b).apply_point(&p);
            let rhs = a.apply_point(&b.apply_point(&p));
            prop_assert!((lhs - rhs).amax() < 1e-9);
        }
    }
}
