//! Scenes: posed collections of meshes and point clouds with foreground
//! (object) / background (clutter, table) labelling, plus closest-point
//! queries against scenes and posed grippers.

use std::path::Path;

use nalgebra::{Isometry3, Point3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use super::bvh::{tie_replaces, Bvh};
use super::cloud::{load_cloud_ply, PointCloud};
use super::mesh::{load_obj, TriMesh};
use crate::model::{BasePose, GripperModel, JointState};
use crate::{Error, Result};

#[derive(Debug, Clone)]
pub enum SceneGeometry {
    Mesh { mesh: TriMesh, bvh: Bvh },
    Cloud(PointCloud),
}

#[derive(Debug, Clone)]
pub struct ScenePrimitive {
    pub geometry: SceneGeometry,
    pub pose: Isometry3<f64>,
    pub foreground: bool,
}

/// The world the gripper interacts with. Foreground primitives are the
/// grasp target; background primitives (table, clutter) still shape the
/// interaction surface but are flagged separately.
#[derive(Debug, Clone, Default)]
pub struct Scene {
    pub primitives: Vec<ScenePrimitive>,
    /// Short identifier carried into result provenance.
    pub label: String,
}

/// Where a closest-point query landed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HitSource {
    /// Scene primitive: which one, and whether it is foreground.
    Scene { primitive: usize, foreground: bool },
    /// Gripper link: link index plus its semantic component
    /// (0 = palm side, k = finger k).
    Gripper { link: usize, component: usize },
}

/// Result of a closest-point query, in world coordinates. `element` is the
/// triangle index for mesh geometry and the point index for clouds.
#[derive(Debug, Clone)]
pub struct ClosestHit {
    pub distance: f64,
    pub point: Point3<f64>,
    pub normal: Unit<Vector3<f64>>,
    pub source: HitSource,
    pub element: usize,
}

impl Scene {
    pub fn from_object_mesh(mesh: TriMesh, pose: Isometry3<f64>) -> Self {
        let bvh = Bvh::build(&mesh);
        Scene {
            primitives: vec![ScenePrimitive {
                geometry: SceneGeometry::Mesh { mesh, bvh },
                pose,
                foreground: true,
            }],
            label: "object".into(),
        }
    }

    pub fn from_cloud(cloud: PointCloud) -> Self {
        Scene {
            primitives: vec![ScenePrimitive {
                geometry: SceneGeometry::Cloud(cloud),
                pose: Isometry3::identity(),
                foreground: false,
            }],
            label: "cloud".into(),
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    pub fn with_background_mesh(mut self, mesh: TriMesh, pose: Isometry3<f64>) -> Self {
        let bvh = Bvh::build(&mesh);
        self.primitives.push(ScenePrimitive {
            geometry: SceneGeometry::Mesh { mesh, bvh },
            pose,
            foreground: false,
        });
        self
    }

    /// Adds a horizontal table quad at height `z` as background.
    pub fn with_table(self, z: f64, half_extent: f64) -> Self {
        self.with_background_mesh(super::mesh::quad_mesh(z, half_extent), Isometry3::identity())
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.iter().all(|p| match &p.geometry {
            SceneGeometry::Mesh { mesh, .. } => mesh.triangles.is_empty(),
            SceneGeometry::Cloud(c) => c.is_empty(),
        })
    }

    /// Axis-aligned bounds of the whole scene in world coordinates.
    pub fn aabb(&self) -> Option<(Point3<f64>, Point3<f64>)> {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        let mut any = false;
        let mut grow = |p: Point3<f64>| {
            any = true;
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        };
        for prim in &self.primitives {
            match &prim.geometry {
                SceneGeometry::Mesh { mesh, .. } => {
                    for v in &mesh.vertices {
                        grow(prim.pose * v);
                    }
                }
                SceneGeometry::Cloud(c) => {
                    for p in &c.points {
                        grow(prim.pose * p);
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Center of the foreground geometry's bounding box (whole scene when
    /// nothing is flagged foreground).
    pub fn object_center(&self) -> Option<Point3<f64>> {
        let fg: Vec<&ScenePrimitive> = self.primitives.iter().filter(|p| p.foreground).collect();
        let scoped = if fg.is_empty() {
            self.clone()
        } else {
            Scene {
                primitives: self
                    .primitives
                    .iter()
                    .filter(|p| p.foreground)
                    .cloned()
                    .collect(),
                label: self.label.clone(),
            }
        };
        let cloud_fg_only = fg.is_empty()
            && scoped.primitives.iter().any(|p| {
                matches!(&p.geometry, SceneGeometry::Cloud(c) if c.foreground.iter().any(|&f| f))
            });
        if cloud_fg_only {
            // Cloud scenes carry per-point flags; use only flagged points.
            let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
            let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
            let mut any = false;
            for prim in &scoped.primitives {
                if let SceneGeometry::Cloud(c) = &prim.geometry {
                    for (p, &f) in c.points.iter().zip(&c.foreground) {
                        if f {
                            any = true;
                            let w = prim.pose * p;
                            for k in 0..3 {
                                lo[k] = lo[k].min(w[k]);
                                hi[k] = hi[k].max(w[k]);
                            }
                        }
                    }
                }
            }
            return any.then(|| Point3::from((lo.coords + hi.coords) * 0.5));
        }
        scoped.aabb().map(|(lo, hi)| Point3::from((lo.coords + hi.coords) * 0.5))
    }

    fn closest_in_primitive(&self, idx: usize, p: &Point3<f64>) -> Option<ClosestHit> {
        closest_in_primitive_posed(&self.primitives[idx], &self.primitives[idx].pose, idx, p)
    }

    /// Exact nearest scene point to `p` with every primitive's pose
    /// replaced by the corresponding entry of `poses` (queries expressed
    /// in an alternative frame). `poses` must match the primitive count.
    pub fn closest_point_posed(
        &self,
        poses: &[Isometry3<f64>],
        p: &Point3<f64>,
    ) -> Result<ClosestHit> {
        let mut best: Option<(ClosestHit, usize)> = None;
        for (idx, (prim, pose)) in self.primitives.iter().zip(poses).enumerate() {
            if let Some(hit) = closest_in_primitive_posed(prim, pose, idx, p) {
                let cur = best.as_ref().map(|(b, tag)| (b.distance, &b.point, *tag));
                if tie_replaces(hit.distance, &hit.point, idx, cur) {
                    best = Some((hit, idx));
                }
            }
        }
        best.map(|(hit, _)| hit)
            .ok_or_else(|| Error::Geometry("closest-point query on an empty scene".into()))
    }

    /// Exact nearest scene point to `p` over all primitives.
    pub fn closest_point(&self, p: &Point3<f64>) -> Result<ClosestHit> {
        let mut best: Option<(ClosestHit, usize)> = None;
        for idx in 0..self.primitives.len() {
            if let Some(hit) = self.closest_in_primitive(idx, p) {
                let cur = best.as_ref().map(|(b, tag)| (b.distance, &b.point, *tag));
                if tie_replaces(hit.distance, &hit.point, idx, cur) {
                    best = Some((hit, idx));
                }
            }
        }
        best.map(|(hit, _)| hit)
            .ok_or_else(|| Error::Geometry("closest-point query on an empty scene".into()))
    }

    /// Nearest point restricted to foreground geometry (flagged primitives,
    /// or flagged points of a cloud). `None` when the scene has none.
    pub fn closest_foreground(&self, p: &Point3<f64>) -> Option<ClosestHit> {
        let mut best: Option<(ClosestHit, usize)> = None;
        for (idx, prim) in self.primitives.iter().enumerate() {
            let hit = match &prim.geometry {
                SceneGeometry::Cloud(cloud) if !prim.foreground => {
                    // Per-point foreground flags: brute-force over flagged points.
                    let local = prim.pose.inverse_transform_point(p);
                    let mut sub: Option<(usize, f64)> = None;
                    for (pi, (q, &f)) in cloud.points.iter().zip(&cloud.foreground).enumerate() {
                        if !f {
                            continue;
                        }
                        let d = (q - local).norm();
                        if sub.map(|(_, bd)| d < bd).unwrap_or(true) {
                            sub = Some((pi, d));
                        }
                    }
                    sub.map(|(pi, dist)| {
                        let mut n = cloud.normals[pi].into_inner();
                        if n.dot(&(local - cloud.points[pi])) < 0.0 {
                            n = -n;
                        }
                        ClosestHit {
                            distance: dist,
                            point: prim.pose * cloud.points[pi],
                            normal: Unit::new_unchecked(prim.pose.rotation * n),
                            source: HitSource::Scene {
                                primitive: idx,
                                foreground: true,
                            },
                            element: pi,
                        }
                    })
                }
                _ if prim.foreground => self.closest_in_primitive(idx, p),
                _ => None,
            };
            if let Some(hit) = hit {
                let cur = best.as_ref().map(|(b, tag)| (b.distance, &b.point, *tag));
                if tie_replaces(hit.distance, &hit.point, idx, cur) {
                    best = Some((hit, idx));
                }
            }
        }
        best.map(|(hit, _)| hit)
    }
}

/// Closest point of `p` on one scene primitive placed at an explicit
/// `pose` (which may differ from the primitive's own when querying in an
/// alternative frame). Results are expressed in the `pose` frame.
pub fn closest_in_primitive_posed(
    prim: &ScenePrimitive,
    pose: &Isometry3<f64>,
    idx: usize,
    p: &Point3<f64>,
) -> Option<ClosestHit> {
    match &prim.geometry {
        SceneGeometry::Mesh { mesh, bvh } => {
            let local = pose.inverse_transform_point(p);
            let (dist, q, tri) = bvh.closest_point(mesh, &local)?;
            let normal = pose.rotation * mesh.triangle_normal(tri);
            Some(ClosestHit {
                distance: dist,
                point: pose * q,
                normal: Unit::new_unchecked(normal.into_inner()),
                source: HitSource::Scene {
                    primitive: idx,
                    foreground: prim.foreground,
                },
                element: tri,
            })
        }
        SceneGeometry::Cloud(cloud) => {
            let local = pose.inverse_transform_point(p);
            let (pi, dist) = cloud.nearest(&local)?;
            // PCA normals are unoriented; point them toward the query.
            let mut n = cloud.normals[pi].into_inner();
            if n.dot(&(local - cloud.points[pi])) < 0.0 {
                n = -n;
            }
            Some(ClosestHit {
                distance: dist,
                point: pose * cloud.points[pi],
                normal: Unit::new_unchecked(pose.rotation * n),
                source: HitSource::Scene {
                    primitive: idx,
                    foreground: prim.foreground || cloud.foreground[pi],
                },
                element: pi,
            })
        }
    }
}

/// Closest point on the posed gripper surface, given precomputed link
/// world transforms (see [`crate::model::GripperModel::forward_kinematics`]).
pub fn closest_point_gripper_posed(
    model: &GripperModel,
    world: &[Isometry3<f64>],
    p: &Point3<f64>,
) -> Result<ClosestHit> {
    let mut best: Option<(ClosestHit, usize)> = None;
    for (li, link) in model.links.iter().enumerate() {
        let local = world[li].inverse_transform_point(p);
        let Some((dist, q, tri)) = link.bvh.closest_point(&link.mesh, &local) else {
            continue;
        };
        let point = world[li] * q;
        let cur = best.as_ref().map(|(b, tag)| (b.distance, &b.point, *tag));
        if tie_replaces(dist, &point, li, cur) {
            let normal = world[li].rotation * link.mesh.triangle_normal(tri).into_inner();
            best = Some((
                ClosestHit {
                    distance: dist,
                    point,
                    normal: Unit::new_unchecked(normal),
                    source: HitSource::Gripper {
                        link: li,
                        component: link.component,
                    },
                    element: tri,
                },
                li,
            ));
        }
    }
    best.map(|(hit, _)| hit)
        .ok_or_else(|| Error::Geometry("closest-point query on a gripper with no mesh".into()))
}

/// Closest point on the gripper surface at configuration `q` / pose `base`.
pub fn closest_point_gripper(
    model: &GripperModel,
    q: &JointState,
    base: &BasePose,
    p: &Point3<f64>,
) -> Result<ClosestHit> {
    let world = model.forward_kinematics(q, base);
    closest_point_gripper_posed(model, &world, p)
}

/// On-disk scene description: a list of posed OBJ meshes with foreground
/// flags. Mesh paths are resolved relative to the document's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneDoc {
    pub primitives: Vec<ScenePrimitiveDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenePrimitiveDoc {
    pub mesh: String,
    #[serde(default)]
    pub translation: [f64; 3],
    /// Axis-angle rotation (radians).
    #[serde(default)]
    pub rotation: [f64; 3],
    #[serde(default = "default_true")]
    pub foreground: bool,
}

fn default_true() -> bool {
    true
}

/// Loads a scene from disk: `.json` documents describe posed meshes,
/// `.ply` files are read as labelled point clouds.
pub fn load_scene(path: &Path) -> Result<Scene> {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scene");
    let label = if stem == "scene" {
        // Bundles are conventionally named `<scene-name>/scene.json`.
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or(stem)
            .to_string()
    } else {
        stem.to_string()
    };
    match path.extension().and_then(|e| e.to_str()) {
        Some("ply") => Ok(Scene::from_cloud(load_cloud_ply(path)?).with_label(label)),
        Some("json") => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
            let doc: SceneDoc = serde_json::from_str(&text)
                .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
            let dir = path.parent().unwrap_or_else(|| Path::new("."));
            let mut scene = Scene::default().with_label(label);
            for prim in &doc.primitives {
                let mesh = load_obj(&dir.join(&prim.mesh))?;
                let bvh = Bvh::build(&mesh);
                let pose = Isometry3::from_parts(
                    nalgebra::Translation3::new(prim.translation[0], prim.translation[1], prim.translation[2]),
                    crate::math::rotation_from_axis_angle(&Vector3::new(
                        prim.rotation[0],
                        prim.rotation[1],
                        prim.rotation[2],
                    )),
                );
                scene.primitives.push(ScenePrimitive {
                    geometry: SceneGeometry::Mesh { mesh, bvh },
                    pose,
                    foreground: prim.foreground,
                });
            }
            if scene.is_empty() {
                return Err(Error::Spec(format!("{}: scene has no geometry", path.display())));
            }
            Ok(scene)
        }
        _ => Err(Error::Spec(format!(
            "{}: unsupported scene format (expected .json or .ply)",
            path.display()
        ))),
    }
}
