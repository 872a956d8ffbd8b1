//! Randomized invariants of the mechanical building blocks: rigid poses
//! must round-trip and preserve geometry, and element matrices must carry
//! the symmetries linear elasticity promises.

use nalgebra::{Point3, UnitQuaternion, Vector3};
use proptest::prelude::*;

use softgrasp::fem::{element_stiffness, von_mises, Material};
use softgrasp::grasp::GraspPose;

/// A rotation from a bounded axis-angle vector and a bounded translation.
fn arb_pose() -> impl Strategy<Value = GraspPose> {
    (
        [-3.0..3.0f64, -3.0..3.0, -3.0..3.0],
        [-0.2..0.2f64, -0.2..0.2, -0.2..0.2],
    )
        .prop_map(|(axis, t)| GraspPose {
            rotation: UnitQuaternion::from_scaled_axis(Vector3::from(axis)),
            translation: Vector3::from(t),
        })
}

fn arb_point() -> impl Strategy<Value = Point3<f64>> {
    [-0.1..0.1f64, -0.1..0.1, -0.1..0.1].prop_map(|c| Point3::from(Vector3::from(c)))
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]

    /// Packing a pose to its 7-array and unpacking it again is exact once
    /// the quaternion has been normalized, even when the stored array is
    /// perturbed within the accepted norm band.
    #[test]
    fn pose_array_round_trip_is_idempotent(pose in arb_pose(), scale in 0.995..1.005f64) {
        let mut packed = pose.to_array();
        for q in &mut packed[..4] {
            *q *= scale;
        }
        let restored = GraspPose::from_array(&packed).expect("norm within band");
        let canonical = restored.to_array();
        let again = GraspPose::from_array(&canonical).expect("already unit").to_array();
        for (a, b) in canonical.iter().zip(&again) {
            // Renormalizing an already-unit quaternion may wobble the last
            // couple of bits; anything larger is a logic error.
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    /// A pose transform is undone by its inverse transform, and undone by
    /// right-composing the inverse local increment.
    #[test]
    fn pose_transforms_invert(pose in arb_pose(), p in arb_point(),
                              t in [-0.05..0.05f64, -0.05..0.05, -0.05..0.05],
                              omega in [-1.0..1.0f64, -1.0..1.0, -1.0..1.0]) {
        let there = pose.transform_point(&p);
        let back = pose.inverse_transform_point(&there);
        prop_assert!((back - p).norm() <= 1e-12);

        let (t, omega) = (Vector3::from(t), Vector3::from(omega));
        let stepped = pose.compose_local(&t, &omega);
        let undo_t = -(UnitQuaternion::from_scaled_axis(omega).inverse() * t);
        let returned = stepped.compose_local(&undo_t, &-omega);
        prop_assert!((returned.translation - pose.translation).norm() <= 1e-12);
        prop_assert!(returned.rotation.angle_to(&pose.rotation) <= 1e-12);
    }

    /// Rigid transforms preserve pairwise distances.
    #[test]
    fn pose_preserves_distances(pose in arb_pose(), a in arb_point(), b in arb_point()) {
        let da = pose.transform_point(&a);
        let db = pose.transform_point(&b);
        prop_assert!(((da - db).norm() - (a - b).norm()).abs() <= 1e-12);
    }

    /// The element stiffness matrix is symmetric and produces zero force
    /// under any rigid motion: translations and linearized rotations are
    /// strain-free, so they must lie in its null space.
    #[test]
    fn element_stiffness_is_symmetric_and_ignores_rigid_motion(
        jitter in proptest::array::uniform4([-0.2..0.2f64, -0.2..0.2, -0.2..0.2]),
        scale in 0.01..0.05f64,
        shift in arb_point(),
        omega in [-1.0..1.0f64, -1.0..1.0, -1.0..1.0],
        modulus in 1e4..1e7f64,
        nu in 0.0..0.45f64,
    ) {
        let canonical = [
            Vector3::new(0.0, 0.0, 0.0),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
        ];
        let verts: [Point3<f64>; 4] = std::array::from_fn(|i| {
            shift + scale * (canonical[i] + 0.2 * Vector3::from(jitter[i]))
        });
        let material = Material::new(modulus, nu).expect("valid material");
        let k = match element_stiffness(&verts, &material) {
            Ok(k) => k,
            // The jitter flattened the tet; no matrix to check.
            Err(_) => return Ok(()),
        };

        let k_scale = k.amax();
        prop_assert!(k_scale.is_finite() && k_scale > 0.0);
        for i in 0..12 {
            for j in 0..i {
                prop_assert!((k[(i, j)] - k[(j, i)]).abs() <= 1e-9 * k_scale);
            }
        }

        let omega = Vector3::from(omega);
        let mut translation = [0.0f64; 12];
        let mut rotation = [0.0f64; 12];
        for (i, v) in verts.iter().enumerate() {
            translation[3 * i] = 1.0;
            let w = omega.cross(&v.coords);
            rotation[3 * i..3 * i + 3].copy_from_slice(w.as_slice());
        }
        for u in [translation, rotation] {
            let u_norm = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(1.0);
            for i in 0..12 {
                let force: f64 = (0..12).map(|j| k[(i, j)] * u[j]).sum();
                prop_assert!(force.abs() <= 1e-7 * k_scale * u_norm);
            }
        }
    }

    /// Von Mises stress ignores the hydrostatic part: adding the same
    /// pressure to all three normal components changes nothing.
    #[test]
    fn von_mises_is_invariant_under_pressure(
        s in proptest::array::uniform6(-1e5..1e5f64),
        pressure in -1e6..1e6f64,
    ) {
        let vm = von_mises(&s);
        prop_assert!(vm >= 0.0);
        let shifted = [s[0] + pressure, s[1] + pressure, s[2] + pressure, s[3], s[4], s[5]];
        let scale = vm.abs().max(pressure.abs()).max(1.0);
        prop_assert!((von_mises(&shifted) - vm).abs() <= 1e-9 * scale);
    }
}
