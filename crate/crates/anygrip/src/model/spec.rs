//! On-disk gripper description: a JSON document referencing OBJ meshes,
//! with units declared as meters or millimeters.

use std::path::Path;

use nalgebra::{Isometry3, Translation3, Vector3};
use serde::{Deserialize, Serialize};

use super::{Attachment, FingerKeypoints, GripperModel, JointKind, JointParts, Keypoints, ModelParts};
use crate::geom::load_obj;
use crate::math::rotation_from_axis_angle;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnitsDoc {
    Meters,
    Millimeters,
}

impl UnitsDoc {
    fn scale(self) -> f64 {
        match self {
            UnitsDoc::Meters => 1.0,
            UnitsDoc::Millimeters => 1e-3,
        }
    }
}

/// Translation plus axis-angle rotation, in the document's units.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct TransformDoc {
    #[serde(default)]
    pub translation: [f64; 3],
    /// Axis-angle (radians); unaffected by the units field.
    #[serde(default)]
    pub rotation: [f64; 3],
}

impl TransformDoc {
    fn isometry(&self, scale: f64) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::new(
                self.translation[0] * scale,
                self.translation[1] * scale,
                self.translation[2] * scale,
            ),
            rotation_from_axis_angle(&Vector3::new(
                self.rotation[0],
                self.rotation[1],
                self.rotation[2],
            )),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkDoc {
    pub name: String,
    /// Index into `joints`; null for the root link.
    pub parent_joint: Option<usize>,
    /// OBJ path relative to the spec document.
    pub mesh: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointDoc {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: JointKind,
    pub parent_link: usize,
    #[serde(default)]
    pub origin: TransformDoc,
    /// Unit axis in the parent link frame.
    pub axis: [f64; 3],
    /// Radians for revolute joints; document units for prismatic ones.
    #[serde(default)]
    pub lower: f64,
    #[serde(default)]
    pub upper: f64,
    #[serde(default = "default_true")]
    pub actuated: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttachmentDoc {
    pub link: usize,
    /// Offset in the link frame, document units.
    #[serde(default)]
    pub offset: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FingerKeypointsDoc {
    pub middle: AttachmentDoc,
    pub tip: AttachmentDoc,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeypointsDoc {
    pub palm: AttachmentDoc,
    pub fingers: Vec<FingerKeypointsDoc>,
}

/// The gripper spec document. One file per gripper; meshes are referenced
/// as OBJ files relative to the document's directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GripperDoc {
    pub name: String,
    pub units: UnitsDoc,
    pub links: Vec<LinkDoc>,
    pub joints: Vec<JointDoc>,
    /// Ordered link-index chains, palm outward; index 0 is the thumb.
    pub fingers: Vec<Vec<usize>>,
    pub keypoints: KeypointsDoc,
    #[serde(default)]
    pub palm_frame: TransformDoc,
    pub d_up: [f64; 3],
}

fn attachment(doc: &AttachmentDoc, scale: f64) -> Attachment {
    Attachment {
        link: doc.link,
        offset: Vector3::new(doc.offset[0], doc.offset[1], doc.offset[2]) * scale,
    }
}

/// Loads and validates a gripper spec, resolving meshes and converting
/// everything to meters.
pub fn load_gripper(path: &Path) -> Result<GripperModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let doc: GripperDoc = serde_json::from_str(&text)
        .map_err(|e| Error::Spec(format!("schema violation in {}: {e}", path.display())))?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let scale = doc.units.scale();

    let mut links = Vec::with_capacity(doc.links.len());
    for link in &doc.links {
        let mut mesh = load_obj(&dir.join(&link.mesh))?;
        if scale != 1.0 {
            mesh.scale(scale);
        }
        links.push((link.name.clone(), link.parent_joint, mesh));
    }

    let joints = doc
        .joints
        .iter()
        .map(|j| {
            let limit_scale = if j.kind == JointKind::Prismatic { scale } else { 1.0 };
            JointParts {
                name: j.name.clone(),
                kind: j.kind,
                parent_link: j.parent_link,
                origin: j.origin.isometry(scale),
                axis: Vector3::new(j.axis[0], j.axis[1], j.axis[2]),
                lower: j.lower * limit_scale,
                upper: j.upper * limit_scale,
                actuated: j.actuated,
            }
        })
        .collect();

    let keypoints = Keypoints {
        palm: attachment(&doc.keypoints.palm, scale),
        fingers: doc
            .keypoints
            .fingers
            .iter()
            .map(|f| FingerKeypoints {
                middle: attachment(&f.middle, scale),
                tip: attachment(&f.tip, scale),
            })
            .collect(),
    };

    GripperModel::assemble(ModelParts {
        name: doc.name.clone(),
        links,
        joints,
        fingers: doc.fingers.clone(),
        keypoints,
        palm_frame: doc.palm_frame.isometry(scale),
        d_up: Vector3::new(doc.d_up[0], doc.d_up[1], doc.d_up[2]),
    })
}

/// Writes a gripper document as pretty-printed JSON (meshes are not copied).
pub fn save_gripper_doc(path: &Path, doc: &GripperDoc) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)
        .map_err(|e| Error::Parse(format!("serializing gripper doc: {e}")))?;
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use approx::assert_relative_eq;

    #[test]
    fn exported_fixture_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::export_gripper_assets(dir.path()).unwrap();
        let model = load_gripper(&dir.path().join("planar_two/gripper.json")).unwrap();
        assert_eq!(model.num_fingers(), 2);
        assert_eq!(model.dof, 4);
        let reference = fixtures::planar_two_finger();
        let rest = model.rest_keypoints().to_vector();
        let expect = reference.rest_keypoints().to_vector();
        assert_relative_eq!(rest, expect, epsilon = 1e-12);
    }

    #[test]
    fn millimeter_spec_converts_to_meters() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::export_gripper_assets(dir.path()).unwrap();
        let model = load_gripper(&dir.path().join("spatial_three/gripper.json")).unwrap();
        let reference = fixtures::spatial_three_finger();
        assert_eq!(model.dof, reference.dof);
        let rest = model.rest_keypoints().to_vector();
        let expect = reference.rest_keypoints().to_vector();
        assert_relative_eq!(rest, expect, epsilon = 1e-12);
        // Prismatic limits were declared in millimeters.
        for (got, want) in model.limits().iter().zip(reference.limits()) {
            assert_relative_eq!(got.0, want.0, epsilon = 1e-12);
            assert_relative_eq!(got.1, want.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn bad_limits_are_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::export_gripper_assets(dir.path()).unwrap();
        let path = dir.path().join("planar_two/gripper.json");
        let mut doc: GripperDoc =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc.joints[0].lower = 1.0;
        doc.joints[0].upper = -1.0;
        save_gripper_doc(&path, &doc).unwrap();
        let err = load_gripper(&path).unwrap_err();
        assert!(err.to_string().contains("invalid limits"), "{err}");
    }

    #[test]
    fn schema_violation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, "{\"name\": \"x\"}").unwrap();
        let err = load_gripper(&path).unwrap_err();
        assert!(err.to_string().contains("schema violation"), "{err}");
    }

    #[test]
    fn unknown_keypoint_link_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::export_gripper_assets(dir.path()).unwrap();
        let path = dir.path().join("planar_two/gripper.json");
        let mut doc: GripperDoc =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        doc.keypoints.fingers[0].tip.link = 99;
        save_gripper_doc(&path, &doc).unwrap();
        let err = load_gripper(&path).unwrap_err();
        assert!(err.to_string().contains("keypoint referencing unknown link"), "{err}");
    }

    #[test]
    fn disconnected_tree_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fixtures::export_gripper_assets(dir.path()).unwrap();
        let path = dir.path().join("planar_two/gripper.json");
        let mut doc: GripperDoc =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        // Two roots: detach a finger's proximal link.
        doc.links[1].parent_joint = None;
        save_gripper_doc(&path, &doc).unwrap();
        let err = load_gripper(&path).unwrap_err();
        assert!(err.to_string().contains("disconnected kinematic tree"), "{err}");
    }
}
