//! Synthetic grippers and scenes used by tests, examples, and the shipped
//! asset bundle: a planar 2-finger pincer, a spatial 3-finger hand with a
//! prismatic wrist, single-chain debug fingers, an overlapping-box rig for
//! collision losses, and sphere grippers/scenes for interaction-surface
//! geometry.

use std::path::Path;

use nalgebra::{Isometry3, Point3, Translation3, Vector3};

use crate::geom::{box_mesh, icosphere, quad_mesh, save_obj, Scene, TriMesh};
use crate::model::{
    Attachment, FingerKeypoints, GripperDoc, GripperModel, JointKind, JointParts, Keypoints,
    ModelParts, UnitsDoc,
};
use crate::Result;

fn translation(x: f64, y: f64, z: f64) -> Isometry3<f64> {
    Isometry3::from_parts(Translation3::new(x, y, z), nalgebra::UnitQuaternion::identity())
}

fn finger_link_mesh(length: f64, half_width: f64) -> TriMesh {
    box_mesh(Point3::new(0.0, 0.0, length / 2.0), Vector3::new(half_width, half_width, length / 2.0))
}

fn revolute(name: &str, parent_link: usize, origin: Isometry3<f64>, axis: Vector3<f64>, lower: f64, upper: f64) -> JointParts {
    JointParts {
        name: name.into(),
        kind: JointKind::Revolute,
        parent_link,
        origin,
        axis,
        lower,
        upper,
        actuated: true,
    }
}

fn planar_two_finger_parts() -> ModelParts {
    let palm = box_mesh(Point3::origin(), Vector3::new(0.06, 0.015, 0.01));
    let seg = || finger_link_mesh(0.04, 0.006);
    let links = vec![
        ("palm".to_string(), None, palm),
        ("finger0_proximal".to_string(), Some(0), seg()),
        ("finger0_distal".to_string(), Some(1), seg()),
        ("finger1_proximal".to_string(), Some(2), seg()),
        ("finger1_distal".to_string(), Some(3), seg()),
    ];
    let joints = vec![
        revolute("finger0_proximal", 0, translation(-0.05, 0.0, 0.01), Vector3::y(), -0.3, 1.6),
        revolute("finger0_distal", 1, translation(0.0, 0.0, 0.04), Vector3::y(), -0.3, 1.6),
        revolute("finger1_proximal", 0, translation(0.05, 0.0, 0.01), -Vector3::y(), -0.3, 1.6),
        revolute("finger1_distal", 3, translation(0.0, 0.0, 0.04), -Vector3::y(), -0.3, 1.6),
    ];
    ModelParts {
        name: "planar-two".into(),
        links,
        joints,
        fingers: vec![vec![1, 2], vec![3, 4]],
        keypoints: Keypoints {
            palm: Attachment { link: 0, offset: Vector3::new(0.0, 0.0, 0.01) },
            fingers: vec![
                FingerKeypoints {
                    middle: Attachment { link: 2, offset: Vector3::zeros() },
                    tip: Attachment { link: 2, offset: Vector3::new(0.0, 0.0, 0.04) },
                },
                FingerKeypoints {
                    middle: Attachment { link: 4, offset: Vector3::zeros() },
                    tip: Attachment { link: 4, offset: Vector3::new(0.0, 0.0, 0.04) },
                },
            ],
        },
        palm_frame: translation(0.0, 0.0, 0.01),
        d_up: Vector3::z(),
    }
}

/// Planar pincer: two opposed 2-segment fingers on a slab palm, all four
/// joints revolute about the palm's y axis. K = 2, C = 4, meters.
pub fn planar_two_finger() -> GripperModel {
    GripperModel::assemble(planar_two_finger_parts()).expect("planar fixture is valid")
}

fn radial_hand_parts(num_fingers: usize) -> ModelParts {
    let mount = box_mesh(Point3::new(0.0, 0.0, -0.005), Vector3::new(0.02, 0.02, 0.005));
    let palm = box_mesh(Point3::new(0.0, 0.0, 0.006), Vector3::new(0.05, 0.05, 0.006));
    let mut links = vec![
        ("mount".to_string(), None, mount),
        ("palm".to_string(), Some(0), palm),
    ];
    let mut joints = vec![JointParts {
        name: "wrist_lift".into(),
        kind: JointKind::Prismatic,
        parent_link: 0,
        origin: Isometry3::identity(),
        axis: Vector3::z(),
        lower: 0.0,
        upper: 0.02,
        actuated: true,
    }];
    let mut fingers = Vec::new();
    let mut finger_keypoints = Vec::new();
    let radial = 0.04;
    for fi in 0..num_fingers {
        let phi = (90.0 + 360.0 * fi as f64 / num_fingers as f64).to_radians();
        let axis = Vector3::new(phi.sin(), -phi.cos(), 0.0);
        let base = translation(radial * phi.cos(), radial * phi.sin(), 0.012);
        let proximal_link = links.len();
        links.push((
            format!("finger{fi}_proximal"),
            Some(joints.len()),
            finger_link_mesh(0.035, 0.005),
        ));
        joints.push(revolute(&format!("finger{fi}_proximal"), 1, base, axis, -0.3, 1.6));
        let distal_link = links.len();
        links.push((
            format!("finger{fi}_distal"),
            Some(joints.len()),
            finger_link_mesh(0.03, 0.005),
        ));
        joints.push(revolute(
            &format!("finger{fi}_distal"),
            proximal_link,
            translation(0.0, 0.0, 0.035),
            axis,
            -0.3,
            1.6,
        ));
        fingers.push(vec![proximal_link, distal_link]);
        finger_keypoints.push(FingerKeypoints {
            middle: Attachment { link: distal_link, offset: Vector3::zeros() },
            tip: Attachment { link: distal_link, offset: Vector3::new(0.0, 0.0, 0.03) },
        });
    }
    ModelParts {
        name: format!("radial-{num_fingers}"),
        links,
        joints,
        fingers,
        keypoints: Keypoints {
            // Anchored on the mount so the root point stays put under the
            // prismatic wrist.
            palm: Attachment { link: 0, offset: Vector3::new(0.0, 0.0, 0.012) },
            fingers: finger_keypoints,
        },
        palm_frame: translation(0.0, 0.0, 0.012),
        d_up: Vector3::z(),
    }
}

fn spatial_three_finger_parts() -> ModelParts {
    let mut parts = radial_hand_parts(3);
    parts.name = "spatial-three".into();
    parts
}

/// Spatial hand: prismatic wrist lift plus three 2-segment fingers spaced
/// 120 degrees around the palm. K = 3, C = 7. The shipped spec for this
/// hand is authored in millimeters.
pub fn spatial_three_finger() -> GripperModel {
    GripperModel::assemble(spatial_three_finger_parts()).expect("spatial fixture is valid")
}

/// Same layout as the spatial hand but with `num_fingers` evenly spaced
/// fingers: K = num_fingers, C = 2K + 1. Exercises finger-count transfer.
pub fn radial_hand(num_fingers: usize) -> GripperModel {
    GripperModel::assemble(radial_hand_parts(num_fingers)).expect("radial fixture is valid")
}

/// One revolute joint swinging a single link of the given length in the
/// xy plane (axis +z, tip at `(r, 0, 0)` at rest). K = 1, C = 1.
pub fn single_revolute_finger(tip_radius: f64) -> GripperModel {
    let parts = ModelParts {
        name: "single-revolute".into(),
        links: vec![
            ("base".to_string(), None, box_mesh(Point3::new(0.0, 0.0, -0.03), Vector3::new(0.02, 0.02, 0.01))),
            (
                "finger".to_string(),
                Some(0),
                box_mesh(
                    Point3::new(tip_radius / 2.0, 0.0, 0.0),
                    Vector3::new(tip_radius / 2.0, 0.01, 0.01),
                ),
            ),
        ],
        joints: vec![revolute("swing", 0, Isometry3::identity(), Vector3::z(), -2.9, 2.9)],
        fingers: vec![vec![1]],
        keypoints: Keypoints {
            palm: Attachment { link: 0, offset: Vector3::zeros() },
            fingers: vec![FingerKeypoints {
                middle: Attachment { link: 1, offset: Vector3::new(tip_radius / 2.0, 0.0, 0.0) },
                tip: Attachment { link: 1, offset: Vector3::new(tip_radius, 0.0, 0.0) },
            }],
        },
        palm_frame: Isometry3::identity(),
        d_up: Vector3::z(),
    };
    GripperModel::assemble(parts).expect("single revolute fixture is valid")
}

/// Two revolute z joints chaining links of the given lengths along +x.
/// K = 1, C = 2; `q = (pi/2, 0)` brings the tip to `(0, l1 + l2, 0)`.
pub fn two_link_chain(l1: f64, l2: f64) -> GripperModel {
    let link = |len: f64| {
        box_mesh(Point3::new(len / 2.0, 0.0, 0.0), Vector3::new(len / 2.0, 0.01, 0.01))
    };
    let parts = ModelParts {
        name: "two-link".into(),
        links: vec![
            ("base".to_string(), None, box_mesh(Point3::new(0.0, 0.0, -0.03), Vector3::new(0.02, 0.02, 0.01))),
            ("upper".to_string(), Some(0), link(l1)),
            ("lower".to_string(), Some(1), link(l2)),
        ],
        joints: vec![
            revolute("shoulder", 0, Isometry3::identity(), Vector3::z(), -3.0, 3.0),
            revolute("elbow", 1, translation(l1, 0.0, 0.0), Vector3::z(), -3.0, 3.0),
        ],
        fingers: vec![vec![1, 2]],
        keypoints: Keypoints {
            palm: Attachment { link: 0, offset: Vector3::zeros() },
            fingers: vec![FingerKeypoints {
                middle: Attachment { link: 2, offset: Vector3::zeros() },
                tip: Attachment { link: 2, offset: Vector3::new(l2, 0.0, 0.0) },
            }],
        },
        palm_frame: Isometry3::identity(),
        d_up: Vector3::z(),
    };
    GripperModel::assemble(parts).expect("two-link fixture is valid")
}

/// Two unit cubes riding independent prismatic x joints above a distant
/// palm. With `q = (0, 0.5)` the cubes overlap by half an extent; the
/// cube-cube pair is the only non-adjacent link pair. K = 0, C = 2.
pub fn overlapping_box_gripper() -> GripperModel {
    let cube = || box_mesh(Point3::origin(), Vector3::new(0.5, 0.5, 0.5));
    let slide = |name: &str| JointParts {
        name: name.into(),
        kind: JointKind::Prismatic,
        parent_link: 0,
        origin: translation(0.0, 0.0, 2.0),
        axis: Vector3::x(),
        lower: -4.0,
        upper: 4.0,
        actuated: true,
    };
    let parts = ModelParts {
        name: "overlapping-boxes".into(),
        links: vec![
            ("palm".to_string(), None, box_mesh(Point3::origin(), Vector3::new(0.05, 0.05, 0.05))),
            ("box_a".to_string(), Some(0), cube()),
            ("box_b".to_string(), Some(1), cube()),
        ],
        joints: vec![slide("slide_a"), slide("slide_b")],
        fingers: vec![],
        keypoints: Keypoints {
            palm: Attachment { link: 0, offset: Vector3::zeros() },
            fingers: vec![],
        },
        palm_frame: Isometry3::identity(),
        d_up: Vector3::z(),
    };
    GripperModel::assemble(parts).expect("overlapping-box fixture is valid")
}

/// A bare sphere "gripper" whose palm center sits on its surface at
/// `(+radius, 0, 0)` with the palm normal +x. No joints, K = 0. Used for
/// interaction-surface geometry tests.
pub fn sphere_gripper(radius: f64, subdivisions: usize) -> GripperModel {
    let parts = ModelParts {
        name: "sphere".into(),
        links: vec![("body".to_string(), None, icosphere(Point3::origin(), radius, subdivisions))],
        joints: vec![],
        fingers: vec![],
        keypoints: Keypoints {
            palm: Attachment { link: 0, offset: Vector3::zeros() },
            fingers: vec![],
        },
        palm_frame: translation(radius, 0.0, 0.0),
        d_up: Vector3::x(),
    };
    GripperModel::assemble(parts).expect("sphere fixture is valid")
}

/// Foreground sphere mesh scene.
pub fn sphere_scene(center: Point3<f64>, radius: f64, subdivisions: usize) -> Scene {
    Scene::from_object_mesh(icosphere(center, radius, subdivisions), Isometry3::identity())
}

/// A graspable sphere resting near a table plane: the standard rollout and
/// benchmark scene for the fixture hands.
pub fn tabletop_sphere_scene() -> Scene {
    sphere_scene(Point3::new(0.0, 0.0, 0.035), 0.03, 3).with_table(0.0, 0.25)
}

fn doc_from_parts(parts: &ModelParts, units: UnitsDoc) -> (GripperDoc, Vec<(String, TriMesh)>) {
    use crate::model::{AttachmentDoc, FingerKeypointsDoc, JointDoc, KeypointsDoc, LinkDoc, TransformDoc};
    let inv = match units {
        UnitsDoc::Meters => 1.0,
        UnitsDoc::Millimeters => 1000.0,
    };
    let vec3 = |v: &Vector3<f64>, s: f64| [v.x * s, v.y * s, v.z * s];
    let transform = |iso: &Isometry3<f64>| TransformDoc {
        translation: vec3(&iso.translation.vector, inv),
        rotation: vec3(&iso.rotation.scaled_axis(), 1.0),
    };
    let mut meshes = Vec::new();
    let links = parts
        .links
        .iter()
        .map(|(name, parent, mesh)| {
            let file = format!("{name}.obj");
            let mut scaled = mesh.clone();
            scaled.scale(inv);
            meshes.push((file.clone(), scaled));
            LinkDoc {
                name: name.clone(),
                parent_joint: *parent,
                mesh: file,
            }
        })
        .collect();
    let joints = parts
        .joints
        .iter()
        .map(|j| {
            let limit_scale = if j.kind == JointKind::Prismatic { inv } else { 1.0 };
            JointDoc {
                name: j.name.clone(),
                kind: j.kind,
                parent_link: j.parent_link,
                origin: transform(&j.origin),
                axis: vec3(&j.axis, 1.0),
                lower: j.lower * limit_scale,
                upper: j.upper * limit_scale,
                actuated: j.actuated,
            }
        })
        .collect();
    let attachment = |a: &Attachment| AttachmentDoc {
        link: a.link,
        offset: vec3(&a.offset, inv),
    };
    let doc = GripperDoc {
        name: parts.name.clone(),
        units,
        links,
        joints,
        fingers: parts.fingers.clone(),
        keypoints: KeypointsDoc {
            palm: attachment(&parts.keypoints.palm),
            fingers: parts
                .keypoints
                .fingers
                .iter()
                .map(|f| FingerKeypointsDoc {
                    middle: attachment(&f.middle),
                    tip: attachment(&f.tip),
                })
                .collect(),
        },
        palm_frame: transform(&parts.palm_frame),
        d_up: vec3(&parts.d_up, 1.0),
    };
    (doc, meshes)
}

/// Writes the two shipped test hands under `dir` as loadable spec bundles:
/// `planar_two/` (meters) and `spatial_three/` (millimeters).
pub fn export_gripper_assets(dir: &Path) -> Result<()> {
    let bundles = [
        ("planar_two", planar_two_finger_parts(), UnitsDoc::Meters),
        ("spatial_three", spatial_three_finger_parts(), UnitsDoc::Millimeters),
    ];
    for (name, parts, units) in bundles {
        let sub = dir.join(name);
        std::fs::create_dir_all(&sub)?;
        let (doc, meshes) = doc_from_parts(&parts, units);
        for (file, mesh) in &meshes {
            save_obj(&sub.join(file), mesh)?;
        }
        crate::model::save_gripper_doc(&sub.join("gripper.json"), &doc)?;
    }
    Ok(())
}

/// Writes the shipped scene bundles under `dir`: a lone sphere and a
/// sphere-on-table scene, each as OBJ meshes plus a scene document.
pub fn export_scene_assets(dir: &Path) -> Result<()> {
    use crate::geom::{SceneDoc, ScenePrimitiveDoc};
    let sphere_dir = dir.join("sphere");
    std::fs::create_dir_all(&sphere_dir)?;
    save_obj(&sphere_dir.join("sphere.obj"), &icosphere(Point3::origin(), 0.03, 3))?;
    let doc = SceneDoc {
        primitives: vec![ScenePrimitiveDoc {
            mesh: "sphere.obj".into(),
            translation: [0.0, 0.0, 0.06],
            rotation: [0.0; 3],
            foreground: true,
        }],
    };
    std::fs::write(
        sphere_dir.join("scene.json"),
        serde_json::to_string_pretty(&doc).map_err(|e| crate::Error::Parse(e.to_string()))?,
    )?;

    let table_dir = dir.join("tabletop_sphere");
    std::fs::create_dir_all(&table_dir)?;
    save_obj(&table_dir.join("sphere.obj"), &icosphere(Point3::origin(), 0.03, 3))?;
    save_obj(&table_dir.join("table.obj"), &quad_mesh(0.0, 0.25))?;
    let doc = SceneDoc {
        primitives: vec![
            ScenePrimitiveDoc {
                mesh: "sphere.obj".into(),
                translation: [0.0, 0.0, 0.035],
                rotation: [0.0; 3],
                foreground: true,
            },
            ScenePrimitiveDoc {
                mesh: "table.obj".into(),
                translation: [0.0; 3],
                rotation: [0.0; 3],
                foreground: false,
            },
        ],
    };
    std::fs::write(
        table_dir.join("scene.json"),
        serde_json::to_string_pretty(&doc).map_err(|e| crate::Error::Parse(e.to_string()))?,
    )?;
    Ok(())
}
