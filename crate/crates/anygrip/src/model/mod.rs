//! Gripper description, forward kinematics, analytic keypoint Jacobians,
//! and semantic keypoint extraction.
//!
//! A gripper is a kinematic tree of links connected by revolute, prismatic,
//! or fixed joints. Its semantic interface is a set of 2K+1 keypoints — a
//! fingertip and middle-phalanx point per finger plus one palm root point —
//! and a palm frame that anchors interaction-surface sampling.

mod spec;

pub use spec::{load_gripper, save_gripper_doc, AttachmentDoc, FingerKeypointsDoc, GripperDoc,
    JointDoc, KeypointsDoc, LinkDoc, TransformDoc, UnitsDoc};

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Translation3, Unit, Vector3};
use serde::{Deserialize, Serialize};

use crate::geom::{convex_hull, Bvh, ConvexHull, TriMesh};
use crate::math::{canonicalize_axis_angle, compose_axis_angle, rotation_from_axis_angle};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JointKind {
    Revolute,
    Prismatic,
    Fixed,
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: usize,
    pub child_link: usize,
    /// Transform from the parent link frame to the joint frame.
    pub origin: Isometry3<f64>,
    /// Motion axis expressed in the parent link frame.
    pub axis: Unit<Vector3<f64>>,
    /// The same axis expressed in the joint frame (post-origin), where the
    /// motion transform actually applies.
    axis_joint: Unit<Vector3<f64>>,
    pub lower: f64,
    pub upper: f64,
    pub actuated: bool,
    /// Column of this joint in `q`, for actuated moving joints.
    pub dof_index: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Link {
    pub name: String,
    pub parent_joint: Option<usize>,
    pub mesh: TriMesh,
    pub bvh: Bvh,
    pub hull: ConvexHull,
    /// Semantic component: 0 for the palm side, k for finger k (1-based;
    /// the thumb is component 1).
    pub component: usize,
    /// Per-triangle alignment of the rest-pose surface normal with d_up,
    /// i.e. the a_g feature of points whose nearest triangle this is.
    pub rest_up_alignment: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Attachment {
    pub link: usize,
    pub offset: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct FingerKeypoints {
    pub middle: Attachment,
    pub tip: Attachment,
}

#[derive(Debug, Clone)]
pub struct Keypoints {
    pub palm: Attachment,
    pub fingers: Vec<FingerKeypoints>,
}

/// Fully resolved gripper model. Construct via [`load_gripper`] or
/// [`GripperModel::assemble`]; all queries are pure.
#[derive(Debug, Clone)]
pub struct GripperModel {
    pub name: String,
    pub links: Vec<Link>,
    pub joints: Vec<Joint>,
    /// Ordered finger chains (link indices, palm outward); index 0 is the thumb.
    pub fingers: Vec<Vec<usize>>,
    pub keypoints: Keypoints,
    /// Transform from the base link frame to the palm center.
    pub palm_frame: Isometry3<f64>,
    /// Upright direction perpendicular to the palm, base link frame.
    pub d_up: Unit<Vector3<f64>>,
    /// Count of actuated degrees of freedom (C).
    pub dof: usize,
    root: usize,
    eval_order: Vec<usize>,
    /// affects[link][joint]: does the joint sit on the path from the root
    /// to the link?
    affects: Vec<Vec<bool>>,
}

/// Raw ingredients for [`GripperModel::assemble`]; produced by the spec
/// loader and by the programmatic fixtures.
#[derive(Debug, Clone)]
pub struct ModelParts {
    pub name: String,
    /// (name, parent joint index, surface mesh).
    pub links: Vec<(String, Option<usize>, TriMesh)>,
    pub joints: Vec<JointParts>,
    pub fingers: Vec<Vec<usize>>,
    pub keypoints: Keypoints,
    pub palm_frame: Isometry3<f64>,
    pub d_up: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct JointParts {
    pub name: String,
    pub kind: JointKind,
    pub parent_link: usize,
    pub origin: Isometry3<f64>,
    pub axis: Vector3<f64>,
    pub lower: f64,
    pub upper: f64,
    pub actuated: bool,
}

/// Configuration of the actuated joints: radians for revolute components,
/// meters for prismatic ones, ordered by `dof_index`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointState {
    pub q: DVector<f64>,
}

impl JointState {
    pub fn zeros(model: &GripperModel) -> Self {
        JointState {
            q: DVector::zeros(model.dof),
        }
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        JointState {
            q: DVector::from_vec(values),
        }
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }
}

/// World pose of the gripper root: translation plus axis-angle rotation
/// (canonical magnitude < pi).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasePose {
    pub translation: Vector3<f64>,
    pub rotation: Vector3<f64>,
}

impl BasePose {
    pub fn identity() -> Self {
        BasePose {
            translation: Vector3::zeros(),
            rotation: Vector3::zeros(),
        }
    }

    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        BasePose {
            translation,
            rotation: canonicalize_axis_angle(&rotation),
        }
    }

    pub fn isometry(&self) -> Isometry3<f64> {
        Isometry3::from_parts(
            Translation3::from(self.translation),
            rotation_from_axis_angle(&self.rotation),
        )
    }

    pub fn from_isometry(iso: &Isometry3<f64>) -> Self {
        BasePose {
            translation: iso.translation.vector,
            rotation: canonicalize_axis_angle(&iso.rotation.scaled_axis()),
        }
    }

    /// Applies a world-frame increment: `dt` adds to the translation and
    /// `dr` left-multiplies the rotation.
    pub fn compose_delta(&self, dt: &Vector3<f64>, dr: &Vector3<f64>) -> BasePose {
        BasePose {
            translation: self.translation + dt,
            rotation: compose_axis_angle(dr, &self.rotation),
        }
    }
}

/// Per-finger keypoint positions in the gripper-local frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerPoints {
    pub middle: Vector3<f64>,
    pub tip: Vector3<f64>,
}

/// The keypoint state s_key: the base rotation r plus 2K+1 keypoint
/// positions expressed in the gripper-local frame (root at the origin,
/// base rotation removed). Total dimensionality 6(K+1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointState {
    pub rotation: Vector3<f64>,
    pub palm: Vector3<f64>,
    pub fingers: Vec<FingerPoints>,
}

impl KeypointState {
    pub fn num_fingers(&self) -> usize {
        self.fingers.len()
    }

    pub fn dim(&self) -> usize {
        6 * (self.fingers.len() + 1)
    }

    /// Flattens to `[r, p_0, p_1^0, p_1^1, ..., p_K^0, p_K^1]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        v.fixed_rows_mut::<3>(0).copy_from(&self.rotation);
        v.fixed_rows_mut::<3>(3).copy_from(&self.palm);
        for (k, f) in self.fingers.iter().enumerate() {
            v.fixed_rows_mut::<3>(6 + 6 * k).copy_from(&f.middle);
            v.fixed_rows_mut::<3>(9 + 6 * k).copy_from(&f.tip);
        }
        v
    }

    /// Flattens only the finger keypoints to `[p_1^0, p_1^1, ...]` (6K).
    pub fn finger_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(6 * self.fingers.len());
        for (k, f) in self.fingers.iter().enumerate() {
            v.fixed_rows_mut::<3>(6 * k).copy_from(&f.middle);
            v.fixed_rows_mut::<3>(3 + 6 * k).copy_from(&f.tip);
        }
        v
    }
}

impl GripperModel {
    /// Validates the raw parts and builds the model: tree structure, limits,
    /// keypoint references, per-link hulls, BVHs, and rest-pose normal
    /// alignments.
    pub fn assemble(parts: ModelParts) -> Result<Self> {
        let n_links = parts.links.len();
        if n_links == 0 {
            return Err(Error::Spec("gripper has no links".into()));
        }
        let mut joints = Vec::with_capacity(parts.joints.len());
        let mut dof = 0usize;
        for jp in &parts.joints {
            if jp.parent_link >= n_links {
                return Err(Error::Spec(format!(
                    "joint '{}' references unknown parent link {}",
                    jp.name, jp.parent_link
                )));
            }
            if jp.lower > jp.upper {
                return Err(Error::Spec(format!(
                    "invalid limits on joint '{}': lower {} > upper {}",
                    jp.name, jp.lower, jp.upper
                )));
            }
            let norm = jp.axis.norm();
            if (norm - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!(
                    "joint '{}' axis has norm {norm}, expected unit",
                    jp.name
                )));
            }
            if jp.kind == JointKind::Fixed && jp.actuated {
                return Err(Error::Spec(format!(
                    "fixed joint '{}' cannot be actuated",
                    jp.name
                )));
            }
            let axis = Unit::new_normalize(jp.axis);
            let axis_joint = Unit::new_normalize(jp.origin.rotation.inverse() * jp.axis);
            let dof_index = (jp.actuated && jp.kind != JointKind::Fixed).then(|| {
                let i = dof;
                dof += 1;
                i
            });
            joints.push(Joint {
                name: jp.name.clone(),
                kind: jp.kind,
                parent_link: jp.parent_link,
                child_link: usize::MAX,
                origin: jp.origin,
                axis,
                axis_joint,
                lower: jp.lower,
                upper: jp.upper,
                actuated: jp.actuated,
                dof_index,
            });
        }

        // Tie joints to the unique link that names them as parent.
        let mut roots = Vec::new();
        for (li, (name, parent_joint, _)) in parts.links.iter().enumerate() {
            match parent_joint {
                None => roots.push(li),
                Some(j) => {
                    let joint = joints.get_mut(*j).ok_or_else(|| {
                        Error::Spec(format!("link '{}' references unknown joint {}", name, j))
                    })?;
                    if joint.child_link != usize::MAX {
                        return Err(Error::Spec(format!(
                            "joint '{}' is the parent of more than one link",
                            joint.name
                        )));
                    }
                    joint.child_link = li;
                }
            }
        }
        if roots.len() != 1 {
            return Err(Error::Spec(format!(
                "disconnected kinematic tree: expected exactly one root link, found {}",
                roots.len()
            )));
        }
        let root = roots[0];
        for joint in &joints {
            if joint.child_link == usize::MAX {
                return Err(Error::Spec(format!(
                    "disconnected kinematic tree: joint '{}' has no child link",
                    joint.name
                )));
            }
        }

        // Topological order by walking up parent chains; doubles as the
        // cycle / reachability check.
        let mut eval_order = vec![root];
        let mut placed = vec![false; n_links];
        placed[root] = true;
        let mut progress = true;
        while progress {
            progress = false;
            for (li, (_, parent_joint, _)) in parts.links.iter().enumerate() {
                if placed[li] {
                    continue;
                }
                let j = parent_joint.expect("non-root links have parent joints");
                if placed[joints[j].parent_link] {
                    placed[li] = true;
                    eval_order.push(li);
                    progress = true;
                }
            }
        }
        if eval_order.len() != n_links {
            return Err(Error::Spec(
                "disconnected kinematic tree: some links are unreachable from the root".into(),
            ));
        }

        let mut affects = vec![vec![false; joints.len()]; n_links];
        for li in &eval_order {
            let mut cursor = *li;
            while let Some(j) = parts.links[cursor].1 {
                affects[*li][j] = true;
                cursor = joints[j].parent_link;
            }
        }

        // Finger chains: consecutive entries must be parent -> child.
        let k = parts.fingers.len();
        for (fi, chain) in parts.fingers.iter().enumerate() {
            if chain.is_empty() {
                return Err(Error::Spec(format!("finger {fi} has an empty chain")));
            }
            for &li in chain {
                if li >= n_links {
                    return Err(Error::Spec(format!(
                        "finger {fi} references unknown link {li}"
                    )));
                }
            }
            for pair in chain.windows(2) {
                let child_parent = parts.links[pair[1]]
                    .1
                    .map(|j| joints[j].parent_link);
                if child_parent != Some(pair[0]) {
                    return Err(Error::Spec(format!(
                        "finger {fi} chain is not a connected path: link {} is not the parent of link {}",
                        pair[0], pair[1]
                    )));
                }
            }
        }
        if parts.keypoints.fingers.len() != k {
            return Err(Error::Spec(format!(
                "keypoints describe {} fingers but the model has {}",
                parts.keypoints.fingers.len(),
                k
            )));
        }
        let check_attachment = |a: &Attachment, what: &str| -> Result<()> {
            if a.link >= n_links {
                return Err(Error::Spec(format!(
                    "keypoint referencing unknown link: {what} attachment points at link {}",
                    a.link
                )));
            }
            Ok(())
        };
        check_attachment(&parts.keypoints.palm, "palm")?;
        for (fi, fk) in parts.keypoints.fingers.iter().enumerate() {
            check_attachment(&fk.middle, &format!("finger {fi} middle"))?;
            check_attachment(&fk.tip, &format!("finger {fi} tip"))?;
        }

        let d_up = Unit::try_new(parts.d_up, 1e-9)
            .ok_or_else(|| Error::Spec("d_up must be a unit vector".into()))?;
        if (parts.d_up.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::Spec(format!(
                "d_up has norm {}, expected unit",
                parts.d_up.norm()
            )));
        }

        let mut component = vec![0usize; n_links];
        for (fi, chain) in parts.fingers.iter().enumerate() {
            for &li in chain {
                component[li] = fi + 1;
            }
        }

        let mut links = Vec::with_capacity(n_links);
        for (li, (name, parent_joint, mesh)) in parts.links.into_iter().enumerate() {
            let bvh = Bvh::build(&mesh);
            let hull = convex_hull(&mesh.vertices).map_err(|e| {
                Error::Spec(format!("link '{}' has no usable collision hull: {e}", name))
            })?;
            links.push(Link {
                name,
                parent_joint,
                mesh,
                bvh,
                hull,
                component: component[li],
                rest_up_alignment: Vec::new(),
            });
        }

        let mut model = GripperModel {
            name: parts.name,
            links,
            joints,
            fingers: parts.fingers,
            keypoints: parts.keypoints,
            palm_frame: parts.palm_frame,
            d_up,
            dof,
            root,
            eval_order,
            affects,
        };

        // Rest-pose normal alignment per triangle, used for the a_g feature.
        let rest = model.fk_local(&JointState::zeros(&model));
        let up = model.d_up.into_inner();
        for (li, pose) in rest.iter().enumerate() {
            let rot = pose.rotation;
            let mesh = &model.links[li].mesh;
            let alignment: Vec<f64> = (0..mesh.triangles.len())
                .map(|t| (rot * mesh.triangle_normal(t).into_inner()).dot(&up))
                .collect();
            model.links[li].rest_up_alignment = alignment;
        }
        Ok(model)
    }

    pub fn num_fingers(&self) -> usize {
        self.fingers.len()
    }

    /// Number of actuated degrees of freedom.
    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn root_link(&self) -> usize {
        self.root
    }

    /// Link evaluation order (parents before children).
    pub fn eval_order(&self) -> &[usize] {
        &self.eval_order
    }

    /// Does actuated joint `j` move link `li`?
    pub fn joint_affects_link(&self, li: usize, j: usize) -> bool {
        self.affects[li][j]
    }

    fn joint_motion(&self, joint: &Joint, value: f64) -> Isometry3<f64> {
        match joint.kind {
            JointKind::Revolute => Isometry3::from_parts(
                Translation3::identity(),
                nalgebra::UnitQuaternion::from_axis_angle(&joint.axis_joint, value),
            ),
            JointKind::Prismatic => {
                Isometry3::translation(
                    joint.axis_joint.x * value,
                    joint.axis_joint.y * value,
                    joint.axis_joint.z * value,
                )
            }
            JointKind::Fixed => Isometry3::identity(),
        }
    }

    fn joint_value(&self, joint: &Joint, q: &JointState) -> f64 {
        joint.dof_index.map(|i| q.q[i]).unwrap_or(0.0)
    }

    /// World transform of every link at configuration `q` and pose `base`.
    pub fn forward_kinematics(&self, q: &JointState, base: &BasePose) -> Vec<Isometry3<f64>> {
        self.fk_from(q, &base.isometry())
    }

    /// Link transforms with the base pose removed (the gripper-local frame).
    pub fn fk_local(&self, q: &JointState) -> Vec<Isometry3<f64>> {
        self.fk_from(q, &Isometry3::identity())
    }

    fn fk_from(&self, q: &JointState, base: &Isometry3<f64>) -> Vec<Isometry3<f64>> {
        assert_eq!(
            q.dim(),
            self.dof,
            "joint state has {} components, model '{}' expects {}",
            q.dim(),
            self.name,
            self.dof
        );
        let mut world = vec![Isometry3::identity(); self.links.len()];
        world[self.root] = *base;
        for &li in &self.eval_order[1..] {
            let j = &self.joints[self.links[li].parent_joint.expect("non-root link")];
            let value = self.joint_value(j, q);
            world[li] = world[j.parent_link] * j.origin * self.joint_motion(j, value);
        }
        world
    }

    /// The 2K+1 keypoints plus base rotation, gripper-local (see
    /// [`KeypointState`]).
    pub fn keypoint_state(&self, q: &JointState, base: &BasePose) -> KeypointState {
        let local = self.fk_local(q);
        let at = |a: &Attachment| (local[a.link] * Point3::from(a.offset)).coords;
        KeypointState {
            rotation: canonicalize_axis_angle(&base.rotation),
            palm: at(&self.keypoints.palm),
            fingers: self
                .keypoints
                .fingers
                .iter()
                .map(|fk| FingerPoints {
                    middle: at(&fk.middle),
                    tip: at(&fk.tip),
                })
                .collect(),
        }
    }

    /// Keypoints at the rest configuration (q = 0, identity base).
    pub fn rest_keypoints(&self) -> KeypointState {
        self.keypoint_state(&JointState::zeros(self), &BasePose::identity())
    }

    /// Rest-pose direction from the palm center toward the thumb tip, base
    /// link frame. Degenerates to +x for thumbless models.
    pub fn rest_thumb_direction(&self) -> Vector3<f64> {
        let rest = self.rest_keypoints();
        let palm_center = self.palm_frame.translation.vector;
        rest.fingers
            .first()
            .map(|f| f.tip - palm_center)
            .and_then(|v| v.try_normalize(1e-12))
            .unwrap_or_else(Vector3::x)
    }

    /// Jacobian of the stacked finger keypoint positions (gripper-local)
    /// with respect to `q`: 3·2K rows by C columns, keypoints ordered
    /// `[p_1^0, p_1^1, ..., p_K^0, p_K^1]`.
    pub fn keypoint_jacobian(&self, q: &JointState) -> DMatrix<f64> {
        let local = self.fk_local(q);
        let k = self.num_fingers();
        let mut jac = DMatrix::zeros(6 * k, self.dof);
        for (ki, fk) in self.keypoints.fingers.iter().enumerate() {
            for (pi, a) in [&fk.middle, &fk.tip].into_iter().enumerate() {
                let p = local[a.link] * Point3::from(a.offset);
                let block = self.point_jacobian(&local, a.link, &p);
                jac.view_mut((6 * ki + 3 * pi, 0), (3, self.dof)).copy_from(&block);
            }
        }
        jac
    }

    /// Jacobian of a world point rigidly attached to `link`, with respect to
    /// `q`, both expressed in the frame the `local` transforms are in.
    /// Columns are `axis × (p − joint origin)` for revolute ancestors,
    /// `axis` for prismatic ones, zero otherwise.
    pub fn point_jacobian(
        &self,
        local: &[Isometry3<f64>],
        link: usize,
        p: &Point3<f64>,
    ) -> DMatrix<f64> {
        let mut jac = DMatrix::zeros(3, self.dof);
        for (ji, joint) in self.joints.iter().enumerate() {
            let Some(col) = joint.dof_index else { continue };
            if !self.affects[link][ji] {
                continue;
            }
            let parent = &local[joint.parent_link];
            let axis_world = parent.rotation * joint.axis.into_inner();
            let column = match joint.kind {
                JointKind::Revolute => {
                    let anchor = (parent * joint.origin).translation.vector;
                    axis_world.cross(&(p.coords - anchor))
                }
                JointKind::Prismatic => axis_world,
                JointKind::Fixed => unreachable!("fixed joints have no dof"),
            };
            jac.view_mut((0, col), (3, 1)).copy_from(&column);
        }
        jac
    }

    /// Clamps `q` to the joint limits; also reports which components moved.
    pub fn clamp_joints(&self, q: &JointState) -> (JointState, Vec<usize>) {
        let mut out = q.clone();
        let mut clamped = Vec::new();
        for joint in &self.joints {
            if let Some(i) = joint.dof_index {
                let v = q.q[i].clamp(joint.lower, joint.upper);
                if v != q.q[i] {
                    clamped.push(i);
                }
                out.q[i] = v;
            }
        }
        (out, clamped)
    }

    /// Joint limits as (lower, upper) pairs ordered by dof index.
    pub fn limits(&self) -> Vec<(f64, f64)> {
        let mut lims = vec![(0.0, 0.0); self.dof];
        for joint in &self.joints {
            if let Some(i) = joint.dof_index {
                lims[i] = (joint.lower, joint.upper);
            }
        }
        lims
    }

    /// Names of the actuated joints ordered by dof index.
    pub fn dof_names(&self) -> Vec<&str> {
        let mut names = vec![""; self.dof];
        for joint in &self.joints {
            if let Some(i) = joint.dof_index {
                names[i] = joint.name.as_str();
            }
        }
        names
    }
}
