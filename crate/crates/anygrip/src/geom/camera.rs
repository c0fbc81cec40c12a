//! Pinhole depth camera: z-buffer rasterization of a mesh scene into a
//! back-projected point cloud, used to emulate partial observation.

use nalgebra::{Isometry3, Point3};
use serde::{Deserialize, Serialize};

use super::cloud::PointCloud;
use super::scene::{Scene, SceneGeometry};
use crate::{Error, Result};

/// OpenCV-style intrinsics: +z forward, +x right, +y down; pixel (u, v)
/// maps a camera point by `u = fx * x / z + cx`, `v = fy * y / z + cy`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Default for CameraIntrinsics {
    fn default() -> Self {
        CameraIntrinsics {
            width: 320,
            height: 240,
            fx: 280.0,
            fy: 280.0,
            cx: 160.0,
            cy: 120.0,
        }
    }
}

/// A posed depth camera; `pose` maps camera coordinates to world.
#[derive(Debug, Clone)]
pub struct Camera {
    pub intrinsics: CameraIntrinsics,
    pub pose: Isometry3<f64>,
}

impl Camera {
    pub fn new(intrinsics: CameraIntrinsics, pose: Isometry3<f64>) -> Self {
        Camera { intrinsics, pose }
    }

    /// Camera at `eye` looking at `target` with `up` resolving the roll.
    pub fn look_at(intrinsics: CameraIntrinsics, eye: Point3<f64>, target: Point3<f64>, up: nalgebra::Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Geometry("camera eye coincides with target".into()))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Geometry("camera up is parallel to the view direction".into()))?;
        let down = forward.cross(&right);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(nalgebra::Matrix3::from_columns(&[
            right, down, forward,
        ]));
        let pose = Isometry3::from_parts(
            nalgebra::Translation3::from(eye.coords),
            nalgebra::UnitQuaternion::from_rotation_matrix(&rot),
        );
        Ok(Camera { intrinsics, pose })
    }
}

const NEAR_CLIP: f64 = 1e-6;

/// Renders the scene's meshes into a depth buffer and back-projects every
/// covered pixel to a world-space point, preserving foreground flags.
/// Point-cloud primitives cannot occlude and are rejected with
/// [`Error::Geometry`]. An empty view yields an empty cloud.
pub fn partial_view_cull(scene: &Scene, camera: &Camera) -> Result<PointCloud> {
    for prim in &scene.primitives {
        if matches!(prim.geometry, SceneGeometry::Cloud(_)) {
            return Err(Error::Geometry(
                "partial-view culling requires a mesh scene".into(),
            ));
        }
    }
    let intr = &camera.intrinsics;
    if intr.width == 0 || intr.height == 0 {
        return Err(Error::Geometry("camera has a zero-sized image".into()));
    }
    let world_to_cam = camera.pose.inverse();
    let mut depth = vec![f64::INFINITY; intr.width * intr.height];
    let mut fg = vec![false; intr.width * intr.height];

    for prim in &scene.primitives {
        let SceneGeometry::Mesh { mesh, .. } = &prim.geometry else {
            unreachable!()
        };
        let to_cam = world_to_cam * prim.pose;
        for t in 0..mesh.triangles.len() {
            let tri = mesh.triangle(t).map(|v| to_cam * v);
            if tri.iter().any(|v| v.z <= NEAR_CLIP) {
                continue;
            }
            let proj: Vec<(f64, f64, f64)> = tri
                .iter()
                .map(|v| (intr.fx * v.x / v.z + intr.cx, intr.fy * v.y / v.z + intr.cy, 1.0 / v.z))
                .collect();
            let min_u = proj.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max_u = proj.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let min_v = proj.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
            let max_v = proj.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
            let u0 = (min_u - 0.5).floor().max(0.0) as usize;
            let u1 = ((max_u - 0.5).ceil() as i64).min(intr.width as i64 - 1);
            let v0 = (min_v - 0.5).floor().max(0.0) as usize;
            let v1 = ((max_v - 0.5).ceil() as i64).min(intr.height as i64 - 1);
            if u1 < u0 as i64 || v1 < v0 as i64 {
                continue;
            }
            let (ax, ay, az) = proj[0];
            let (bx, by, bz) = proj[1];
            let (cx_, cy_, cz) = proj[2];
            let denom = (bx - ax) * (cy_ - ay) - (cx_ - ax) * (by - ay);
            if denom.abs() < 1e-18 {
                continue;
            }
            for py in v0..=(v1 as usize) {
                for px in u0..=(u1 as usize) {
                    let u = px as f64 + 0.5;
                    let v = py as f64 + 0.5;
                    let w1 = ((u - ax) * (cy_ - ay) - (cx_ - ax) * (v - ay)) / denom;
                    let w2 = ((bx - ax) * (v - ay) - (u - ax) * (by - ay)) / denom;
                    let w0 = 1.0 - w1 - w2;
                    if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                        continue;
                    }
                    // 1/z is affine in screen space, so barycentric
                    // interpolation reproduces the plane depth exactly.
                    let inv_z = w0 * az + w1 * bz + w2 * cz;
                    if inv_z <= 0.0 {
                        continue;
                    }
                    let z = 1.0 / inv_z;
                    let slot = py * intr.width + px;
                    if z < depth[slot] {
                        depth[slot] = z;
                        fg[slot] = prim.foreground;
                    }
                }
            }
        }
    }

    let mut points = Vec::new();
    let mut flags = Vec::new();
    for py in 0..intr.height {
        for px in 0..intr.width {
            let slot = py * intr.width + px;
            let z = depth[slot];
            if !z.is_finite() {
                continue;
            }
            let u = px as f64 + 0.5;
            let v = py as f64 + 0.5;
            let p_cam = Point3::new((u - intr.cx) / intr.fx * z, (v - intr.cy) / intr.fy * z, z);
            points.push(camera.pose * p_cam);
            flags.push(fg[slot]);
        }
    }
    PointCloud::new(points, flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::mesh::icosphere;
    use nalgebra::Vector3;

    fn sphere_scene(center: Point3<f64>, radius: f64) -> Scene {
        Scene::from_object_mesh(icosphere(center, radius, 3), Isometry3::identity())
    }

    fn front_camera(center: Point3<f64>, distance: f64) -> Camera {
        Camera::look_at(
            CameraIntrinsics::default(),
            center + Vector3::new(0.0, 0.0, -distance),
            center,
            Vector3::y(),
        )
        .unwrap()
    }

    #[test]
    fn culled_sphere_keeps_only_the_near_hemisphere() {
        let center = Point3::new(0.0, 0.0, 0.5);
        let scene = sphere_scene(center, 0.1);
        let camera = front_camera(center, 0.6);
        let cloud = partial_view_cull(&scene, &camera).unwrap();
        assert!(cloud.len() > 500, "sphere should cover many pixels, got {}", cloud.len());
        let eye = camera.pose.translation.vector;
        for p in &cloud.points {
            // Visible points sit on the camera-facing side: closer to the
            // eye than the centre is.
            assert!((p.coords - eye).norm() < (center.coords - eye).norm() + 1e-9);
            // And on the sphere surface.
            approx::assert_relative_eq!((p - center).norm(), 0.1, epsilon = 2e-3);
        }
        assert!(cloud.foreground.iter().all(|&f| f));
    }

    #[test]
    fn back_projected_points_lie_on_triangle_planes() {
        // Ray-casting oracle: each culled point must coincide with the first
        // mesh intersection along its pixel ray.
        let center = Point3::new(0.05, -0.02, 0.4);
        let scene = sphere_scene(center, 0.08);
        let camera = front_camera(center, 0.5);
        let cloud = partial_view_cull(&scene, &camera).unwrap();
        let SceneGeometry::Mesh { mesh, .. } = &scene.primitives[0].geometry else {
            panic!()
        };
        let eye = Point3::from(camera.pose.translation.vector);
        let mut checked = 0;
        for p in cloud.points.iter().step_by(97) {
            let dir = (p - eye).normalize();
            let mut first = f64::INFINITY;
            for t in 0..mesh.triangles.len() {
                let [a, b, c] = mesh.triangle(t);
                let n = (b - a).cross(&(c - a));
                let denom = n.dot(&dir);
                if denom.abs() < 1e-12 {
                    continue;
                }
                let s = n.dot(&(a - eye)) / denom;
                if s <= 0.0 {
                    continue;
                }
                let q = eye + dir * s;
                let inside = (b - a).cross(&(q - a)).dot(&n) >= -1e-12
                    && (c - b).cross(&(q - b)).dot(&n) >= -1e-12
                    && (a - c).cross(&(q - c)).dot(&n) >= -1e-12;
                if inside {
                    first = first.min(s);
                }
            }
            assert!(first.is_finite(), "pixel ray misses the mesh");
            let hit = eye + dir * first;
            approx::assert_relative_eq!((hit - p).norm(), 0.0, epsilon = 1e-9);
            checked += 1;
        }
        assert!(checked > 5);
    }

    #[test]
    fn empty_view_yields_empty_cloud() {
        let center = Point3::new(0.0, 0.0, 0.5);
        let scene = sphere_scene(center, 0.1);
        // Look away from the object.
        let camera = Camera::look_at(
            CameraIntrinsics::default(),
            center + Vector3::new(0.0, 0.0, -0.6),
            center + Vector3::new(0.0, 0.0, -1.6),
            Vector3::y(),
        )
        .unwrap();
        let cloud = partial_view_cull(&scene, &camera).unwrap();
        assert!(cloud.is_empty());
    }

    #[test]
    fn occlusion_prefers_the_near_surface() {
        let near = icosphere(Point3::new(0.0, 0.0, 0.3), 0.05, 2);
        let far = icosphere(Point3::new(0.0, 0.0, 0.8), 0.05, 2);
        let scene = Scene::from_object_mesh(near, Isometry3::identity())
            .with_background_mesh(far, Isometry3::identity());
        let camera = Camera::look_at(
            CameraIntrinsics::default(),
            Point3::new(0.0, 0.0, -0.3),
            Point3::new(0.0, 0.0, 0.5),
            Vector3::y(),
        )
        .unwrap();
        let cloud = partial_view_cull(&scene, &camera).unwrap();
        // The far sphere sits exactly behind the near one and is smaller in
        // image space, so every background pixel it would cover is occluded.
        assert!(cloud.foreground.iter().all(|&f| f));
    }

    #[test]
    fn cloud_scene_is_rejected() {
        let cloud = PointCloud::new(vec![Point3::origin()], vec![true]).unwrap();
        let scene = Scene::from_cloud(cloud);
        let camera = front_camera(Point3::origin(), 0.5);
        assert!(matches!(partial_view_cull(&scene, &camera), Err(Error::Geometry(_))));
    }
}
