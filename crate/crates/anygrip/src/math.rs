//! Small numeric helpers shared across modules: axis-angle conventions,
//! orthonormal frames, and deterministic tie-breaking reductions.

use nalgebra::{Rotation3, Unit, UnitQuaternion, Vector3};

/// Builds a rotation from a scaled axis-angle vector (angle = norm, radians).
pub fn rotation_from_axis_angle(r: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*r)
}

/// Extracts the scaled axis-angle vector of a rotation with angle in [0, pi].
pub fn axis_angle_from_rotation(rot: &UnitQuaternion<f64>) -> Vector3<f64> {
    rot.scaled_axis()
}

/// Canonicalizes a scaled axis-angle vector so the encoded angle lies in
/// [0, pi]. Angles above pi flip to the antipodal axis; the zero rotation
/// stays exactly zero.
pub fn canonicalize_axis_angle(r: &Vector3<f64>) -> Vector3<f64> {
    let angle = r.norm();
    if angle < 1e-300 {
        return Vector3::zeros();
    }
    let axis = r / angle;
    let wrapped = angle.rem_euclid(2.0 * std::f64::consts::PI);
    if wrapped <= std::f64::consts::PI {
        axis * wrapped
    } else {
        -axis * (2.0 * std::f64::consts::PI - wrapped)
    }
}

/// Applies an incremental rotation `delta` (axis-angle, world axes) on top of
/// an orientation `r` (axis-angle) and returns the canonical axis-angle of
/// the composition.
pub fn compose_axis_angle(delta: &Vector3<f64>, r: &Vector3<f64>) -> Vector3<f64> {
    let q = rotation_from_axis_angle(delta) * rotation_from_axis_angle(r);
    canonicalize_axis_angle(&q.scaled_axis())
}

/// Deterministic orthonormal basis completion: returns two unit vectors
/// `(t1, t2)` such that `(t1, t2, n)` is right-handed. The helper axis is
/// chosen from the component of `n` with the smallest magnitude, so the
/// result is stable under small perturbations away from component ties.
pub fn tangent_basis(n: &Unit<Vector3<f64>>) -> (Vector3<f64>, Vector3<f64>) {
    let a = n.into_inner();
    let abs = a.abs();
    let helper = if abs.x <= abs.y && abs.x <= abs.z {
        Vector3::x()
    } else if abs.y <= abs.z {
        Vector3::y()
    } else {
        Vector3::z()
    };
    let t1 = a.cross(&helper).normalize();
    let t2 = a.cross(&t1);
    (t1, t2)
}

/// Index of the minimum value; ties resolve to the lowest index.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v >= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Rotation part of an isometry as a `Rotation3` matrix.
pub fn rotation_matrix(iso: &nalgebra::Isometry3<f64>) -> Rotation3<f64> {
    iso.rotation.to_rotation_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    #[test]
    fn axis_angle_round_trip() {
        let r = Vector3::new(0.3, -0.7, 0.2);
        let q = rotation_from_axis_angle(&r);
        assert_relative_eq!(axis_angle_from_rotation(&q), r, epsilon = 1e-12);
    }

    #[test]
    fn canonicalization_wraps_long_angles() {
        let axis = Vector3::new(0.0, 0.0, 1.0);
        let r = axis * (PI + 0.5);
        let c = canonicalize_axis_angle(&r);
        assert_relative_eq!(c, -axis * (PI - 0.5), epsilon = 1e-12);
        let q1 = rotation_from_axis_angle(&r);
        let q2 = rotation_from_axis_angle(&c);
        assert_relative_eq!(q1.angle_to(&q2), 0.0, epsilon = 1e-12);
        assert_eq!(canonicalize_axis_angle(&Vector3::zeros()), Vector3::zeros());
    }

    #[test]
    fn compose_matches_quaternion_product() {
        let a = Vector3::new(0.1, 0.2, -0.3);
        let b = Vector3::new(-0.4, 0.05, 0.6);
        let composed = compose_axis_angle(&a, &b);
        let expected = rotation_from_axis_angle(&a) * rotation_from_axis_angle(&b);
        assert_relative_eq!(
            rotation_from_axis_angle(&composed).angle_to(&expected),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn tangent_basis_is_orthonormal() {
        for n in [
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, -1.0, 0.0),
            Vector3::new(0.3, 0.4, -0.5),
        ] {
            let n = Unit::new_normalize(n);
            let (t1, t2) = tangent_basis(&n);
            assert_relative_eq!(t1.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(t2.norm(), 1.0, epsilon = 1e-12);
            assert_relative_eq!(t1.dot(&t2), 0.0, epsilon = 1e-12);
            assert_relative_eq!(t1.dot(&n), 0.0, epsilon = 1e-12);
            assert_relative_eq!(t1.cross(&t2).dot(&n), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn argmin_breaks_ties_low() {
        assert_eq!(argmin(&[2.0, 1.0, 1.0, 3.0]), Some(1));
        assert_eq!(argmin(&[]), None);
    }
}
