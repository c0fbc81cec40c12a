//! Geometry backbone: triangle meshes with BVH acceleration, convex hulls,
//! labelled point clouds, scenes, depth-camera culling, and the surface /
//! pose samplers the rest of the toolkit builds on.

pub mod bvh;
pub mod camera;
pub mod cloud;
pub mod hull;
pub mod mesh;
pub mod scene;

pub use bvh::{mesh_mesh_distance, Bvh, MeshPair};
pub use camera::{partial_view_cull, Camera, CameraIntrinsics};
pub use cloud::{load_cloud_ply, save_cloud_ply, PointCloud};
pub use hull::{
    convex_hull, incremental_hull, origin_ball_radius, signed_distance_hull,
    signed_distance_hull_face, ConvexHull, Facet, HullFace,
};
pub use mesh::{box_mesh, icosphere, load_obj, quad_mesh, save_obj, TriMesh};
pub use scene::{
    closest_in_primitive_posed, closest_point_gripper, closest_point_gripper_posed, load_scene,
    ClosestHit, HitSource, Scene, SceneDoc, SceneGeometry, ScenePrimitive, ScenePrimitiveDoc,
};

use nalgebra::{Matrix3, Point3, Rotation3, UnitQuaternion, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::model::{BasePose, GripperModel};
use crate::{Error, Result};

/// Draws `points_per_link` area-weighted surface samples on every link, in
/// link-local coordinates. Deterministic for a fixed seed.
pub fn sample_link_surface(
    model: &GripperModel,
    points_per_link: usize,
    seed: u64,
) -> Vec<Vec<Point3<f64>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    model
        .links
        .iter()
        .map(|link| {
            link.mesh
                .sample_surface(points_per_link, &mut rng)
                .into_iter()
                .map(|(p, _)| p)
                .collect()
        })
        .collect()
}

/// Default hemisphere radius for initial grasp poses, meters.
pub const INITIAL_POSE_RADIUS: f64 = 0.20;

/// Builds the orientation that points the palm normal along `toward` while
/// rolling the thumb direction to the world-up (+z) side, i.e. toward the
/// projection of +z into the palm plane.
fn palm_orientation(model: &GripperModel, toward: &Vector3<f64>) -> UnitQuaternion<f64> {
    let up = model.d_up.into_inner();
    let thumb = model.rest_thumb_direction();
    // Base-frame triad: palm normal, in-plane thumb direction, their cross.
    let t_base = orthogonal_part(&thumb, &up)
        .unwrap_or_else(|| orthogonal_part(&Vector3::x(), &up).unwrap_or_else(|| up.cross(&Vector3::y())));
    let s_base = up.cross(&t_base);
    // World triad: view direction, projected world-up, their cross.
    let n = toward.normalize();
    let t_world = orthogonal_part(&Vector3::z(), &n)
        .or_else(|| orthogonal_part(&Vector3::x(), &n))
        .unwrap_or_else(|| n.cross(&Vector3::y()));
    let s_world = n.cross(&t_world);
    let base = Matrix3::from_columns(&[up, t_base, s_base]);
    let world = Matrix3::from_columns(&[n, t_world, s_world]);
    let rot = Rotation3::from_matrix_unchecked(world * base.transpose());
    UnitQuaternion::from_rotation_matrix(&rot)
}

fn orthogonal_part(v: &Vector3<f64>, n: &Vector3<f64>) -> Option<Vector3<f64>> {
    (v - n * v.dot(n)).try_normalize(1e-9)
}

/// Samples `count` initial base poses on the upper hemisphere of the given
/// radius around `object_center`: gripper root at the sampled point, palm
/// normal aimed at the object center (resolved through the palm offset by
/// fixed-point iteration), thumb rolled toward world +z.
pub fn sample_initial_poses(
    model: &GripperModel,
    object_center: &Point3<f64>,
    count: usize,
    radius: f64,
    seed: u64,
) -> Result<Vec<BasePose>> {
    use rand::Rng;
    if radius <= 0.0 || radius.is_nan() {
        return Err(Error::Geometry("initial pose radius must be positive".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let palm_offset = model.palm_frame.translation.vector;
    let mut poses = Vec::with_capacity(count);
    for _ in 0..count {
        let z: f64 = rng.gen_range(0.0..=1.0);
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let dir = Vector3::new(rho * phi.cos(), rho * phi.sin(), z);
        let position = object_center + dir * radius;
        // The palm center sits at position + R * palm_offset; aim the palm
        // normal from there. The alignment target depends on R, so iterate.
        let mut rot = palm_orientation(model, &(object_center - position));
        for _ in 0..64 {
            let palm_center = position + rot * palm_offset;
            let toward = object_center - palm_center;
            if toward.norm() < 1e-12 {
                break;
            }
            let next = palm_orientation(model, &toward);
            let delta = rot.angle_to(&next);
            rot = next;
            if delta < 1e-13 {
                break;
            }
        }
        poses.push(BasePose {
            translation: position.coords,
            rotation: rot.scaled_axis(),
        });
    }
    Ok(poses)
}
