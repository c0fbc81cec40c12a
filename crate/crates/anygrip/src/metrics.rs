//! Contact detection, the generalized grasp-quality measure over
//! discretized friction cones, and trajectory collision statistics.

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Unit, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{self, CollisionContext};
use crate::geom::{HitSource, Scene, SceneGeometry};
use crate::math::tangent_basis;
use crate::model::{BasePose, GripperModel, JointState};
use crate::{Error, Result};

/// Default contact admission distance, meters (2 mm).
pub const DEFAULT_CONTACT_DELTA: f64 = 0.002;

/// Default friction-cone discretization edge count.
pub const DEFAULT_CONE_EDGES: usize = 8;

/// Surface samples drawn per link on top of its mesh vertices.
const CONTACT_SAMPLES_PER_LINK: usize = 64;

/// Fixed seed for the link surface samples, so contact queries are
/// deterministic for a given gripper.
const CONTACT_SEED: u64 = 0xc0__7ac7;

/// Relative singular-value threshold for the wrench-span rank.
const RANK_TOL: f64 = 1e-10;

/// Relative tolerance for sidedness tests against candidate facet planes.
const SIDE_TOL: f64 = 1e-9;

/// One gripper-object contact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contact {
    /// Witness point on the object surface, world frame.
    pub point: Point3<f64>,
    /// Unit normal pointing out of the object.
    pub normal: Unit<Vector3<f64>>,
    /// Gripper component of the touching link (0 = palm, k = finger k).
    pub component: usize,
    /// Signed link-to-object distance: positive separation, negative
    /// penetration, meters.
    pub distance: f64,
}

/// The deterministic per-link query points contact detection evaluates:
/// every mesh vertex plus [`CONTACT_SAMPLES_PER_LINK`] fixed-seed surface
/// samples, link-local coordinates.
pub fn contact_samples(model: &GripperModel) -> Vec<Vec<Point3<f64>>> {
    let mut rng = ChaCha20Rng::seed_from_u64(CONTACT_SEED);
    model
        .links
        .iter()
        .map(|link| {
            let mut pts = link.mesh.vertices.clone();
            pts.extend(
                link.mesh
                    .sample_surface(CONTACT_SAMPLES_PER_LINK, &mut rng)
                    .into_iter()
                    .map(|(p, _)| p),
            );
            pts
        })
        .collect()
}

/// Detects gripper-object contacts: a link is in contact when its minimum
/// sampled distance to the foreground geometry is at most `delta`, and it
/// contributes exactly one [`Contact`] at its closest pair. Link distance
/// is evaluated over [`contact_samples`]; a scene without foreground
/// geometry yields no contacts.
pub fn detect_contacts(
    model: &GripperModel,
    q: &JointState,
    base: &BasePose,
    scene: &Scene,
    delta: f64,
) -> Vec<Contact> {
    let world = model.forward_kinematics(q, base);
    let samples = contact_samples(model);
    let mut contacts = Vec::new();
    for (li, link) in model.links.iter().enumerate() {
        let mut best: Option<(f64, Point3<f64>, Unit<Vector3<f64>>)> = None;
        for local in &samples[li] {
            let p = world[li] * local;
            let Some(hit) = scene.closest_foreground(&p) else {
                continue;
            };
            // Mesh hits carry the outward triangle normal; a sample on the
            // inner side of it is penetrating.
            let inside = matches!(hit.source, HitSource::Scene { .. })
                && hit.normal.dot(&(p - hit.point)) < 0.0;
            let signed = if inside { -hit.distance } else { hit.distance };
            if best.as_ref().map(|(d, _, _)| signed < *d).unwrap_or(true) {
                best = Some((signed, hit.point, hit.normal));
            }
        }
        if let Some((distance, point, normal)) = best {
            if distance <= delta {
                contacts.push(Contact {
                    point,
                    normal,
                    component: link.component,
                    distance,
                });
            }
        }
    }
    contacts
}

/// Number of contacts made by finger links (component index ≥ 1), the
/// count the stop condition consumes.
pub fn finger_contact_count(contacts: &[Contact]) -> usize {
    contacts.iter().filter(|c| c.component > 0).count()
}

/// Object reference frame for wrench-space quality: torques are taken
/// about the frame origin and normalized by `radius`. Computing in this
/// frame makes the measure exactly invariant under rigid motions applied
/// to contacts and frame together.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectFrame {
    /// World pose of the object (origin at the bounding-sphere center).
    pub pose: Isometry3<f64>,
    /// Bounding-sphere radius, meters.
    pub radius: f64,
}

impl ObjectFrame {
    /// Bounding frame of the scene's foreground geometry: identity-rotation
    /// pose at the bounding-box center, radius enclosing every foreground
    /// vertex.
    pub fn from_scene(scene: &Scene) -> Result<Self> {
        let mut verts: Vec<Point3<f64>> = Vec::new();
        for prim in &scene.primitives {
            match &prim.geometry {
                SceneGeometry::Mesh { mesh, .. } if prim.foreground => {
                    verts.extend(mesh.vertices.iter().map(|v| prim.pose * v));
                }
                SceneGeometry::Cloud(cloud) => {
                    for (p, &fg) in cloud.points.iter().zip(&cloud.foreground) {
                        if prim.foreground || fg {
                            verts.push(prim.pose * p);
                        }
                    }
                }
                _ => {}
            }
        }
        if verts.is_empty() {
            return Err(Error::Geometry(
                "object frame requires foreground geometry".into(),
            ));
        }
        let (mut lo, mut hi) = (verts[0], verts[0]);
        for v in &verts {
            lo = Point3::from(lo.coords.inf(&v.coords));
            hi = Point3::from(hi.coords.sup(&v.coords));
        }
        let center = Point3::from((lo.coords + hi.coords) * 0.5);
        let radius = verts
            .iter()
            .map(|v| (v - center).norm())
            .fold(0.0f64, f64::max)
            .max(1e-9);
        Ok(Self {
            pose: Isometry3::translation(center.x, center.y, center.z),
            radius,
        })
    }
}

/// Grasp quality: the radius of the largest origin-centered ball contained
/// in the convex hull of the contact wrenches, computed within the linear
/// span of the wrench set so that grasps whose wrenches cannot cover all
/// six dimensions (two antipodal point contacts, planar grasps) still
/// score their stability in the directions they do resist.
///
/// Each contact's friction cone is discretized into `cone_edges` force
/// edges with unit normal component and tangential magnitude `mu` — the
/// unnormalized convention keeps the measure monotone in `mu` — and each
/// edge contributes the wrench `[f, (p × f) / radius]` about the object
/// frame origin. Fewer than two contacts score 0; so does any wrench set
/// that fails to strictly surround the origin within its span.
pub fn q1(
    contacts: &[Contact],
    mu: f64,
    object: &ObjectFrame,
    cone_edges: usize,
) -> Result<f64> {
    if !(mu >= 0.0) {
        return Err(Error::Config(format!(
            "friction coefficient must be non-negative, got {mu}"
        )));
    }
    if cone_edges < 3 {
        return Err(Error::Config(format!(
            "cone discretization needs at least 3 edges, got {cone_edges}"
        )));
    }
    if !(object.radius > 0.0) {
        return Err(Error::Config(format!(
            "object radius must be positive, got {}",
            object.radius
        )));
    }
    if contacts.len() < 2 {
        return Ok(0.0);
    }
    let wrenches = contact_wrenches(contacts, mu, object, cone_edges);
    Ok(ball_radius_in_hull(&wrenches))
}

/// Discretized contact wrenches in object-local coordinates, one row per
/// cone edge: `[f_x, f_y, f_z, tau_x, tau_y, tau_z]` with torque about the
/// object origin scaled by `1 / radius`.
pub fn contact_wrenches(
    contacts: &[Contact],
    mu: f64,
    object: &ObjectFrame,
    cone_edges: usize,
) -> Vec<DVector<f64>> {
    let inv = object.pose.inverse();
    let mut rows = Vec::with_capacity(contacts.len() * cone_edges);
    for contact in contacts {
        let p = inv * contact.point;
        let n = Unit::new_normalize(inv.rotation * contact.normal.into_inner());
        let (t1, t2) = tangent_basis(&n);
        for j in 0..cone_edges {
            let theta = std::f64::consts::TAU * j as f64 / cone_edges as f64;
            let f = -n.into_inner() + mu * (theta.cos() * t1 + theta.sin() * t2);
            let tau = p.coords.cross(&f) / object.radius;
            rows.push(DVector::from_vec(vec![
                f.x, f.y, f.z, tau.x, tau.y, tau.z,
            ]));
        }
    }
    rows
}

/// Distance from the origin to the boundary of the convex hull of
/// `points`, restricted to their linear span; 0 unless the origin is
/// strictly interior there. Exact facet enumeration: every candidate
/// hyperplane through `rank` points is tested for support.
fn ball_radius_in_hull(points: &[DVector<f64>]) -> f64 {
    let points = dedup_points(points);
    if points.len() < 2 {
        return 0.0;
    }
    let scale = points.iter().map(|p| p.norm()).fold(0.0f64, f64::max);
    if scale == 0.0 {
        return 0.0;
    }
    let reduced = project_to_span(&points, scale);
    let Some(rank) = reduced.first().map(|p| p.len()) else {
        return 0.0;
    };
    let side_tol = SIDE_TOL * scale;
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..rank).collect();
    loop {
        if let Some(normal) = subset_hyperplane(&reduced, &subset) {
            let c = normal.dot(&reduced[subset[0]]);
            let mut hi = f64::NEG_INFINITY;
            let mut lo = f64::INFINITY;
            for p in &reduced {
                let v = normal.dot(p);
                hi = hi.max(v);
                lo = lo.min(v);
            }
            // Supporting orientations: `normal` with offset `c` when no
            // point lies beyond it, `-normal` with offset `-c` likewise.
            // The offset is the origin's distance on the interior side; a
            // non-positive one means the origin is outside or on the
            // boundary.
            if hi <= c + side_tol {
                best = best.min(c);
            }
            if lo >= c - side_tol {
                best = best.min(-c);
            }
            if best <= side_tol {
                return 0.0;
            }
        }
        if !next_combination(&mut subset, points.len()) {
            break;
        }
    }
    if best.is_finite() {
        best
    } else {
        0.0
    }
}

/// Drops near-duplicate rows (within `1e-12` of an earlier one).
fn dedup_points(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let mut kept: Vec<DVector<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if kept.iter().all(|k| (k - p).norm() > 1e-12) {
            kept.push(p.clone());
        }
    }
    kept
}

/// Descending ordering of a singular-value vector (nalgebra does not
/// guarantee sorted output).
fn singular_order(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    order
}

/// Projects the points onto an orthonormal basis of their linear span
/// (rank from singular values above `RANK_TOL` relative).
fn project_to_span(points: &[DVector<f64>], scale: f64) -> Vec<DVector<f64>> {
    let dim = points[0].len();
    let mut m = DMatrix::zeros(points.len(), dim);
    for (i, p) in points.iter().enumerate() {
        m.row_mut(i).copy_from(&p.transpose());
    }
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("svd requested v_t");
    let order = singular_order(&svd.singular_values);
    let rank = order
        .iter()
        .filter(|&&i| svd.singular_values[i] > RANK_TOL * scale)
        .count()
        .max(1);
    points
        .iter()
        .map(|p| {
            DVector::from_iterator(
                rank,
                order[..rank].iter().map(|&i| vt.row(i).transpose().dot(p)),
            )
        })
        .collect()
}

/// Unit normal of the hyperplane through the chosen points, or `None`
/// when they are affinely degenerate. One point in 1-D is the hyperplane
/// itself. The offset matrix is padded square so the thin SVD still
/// carries the nullspace direction.
fn subset_hyperplane(points: &[DVector<f64>], subset: &[usize]) -> Option<DVector<f64>> {
    let rank = points[0].len();
    if rank == 1 {
        return Some(DVector::from_element(1, 1.0));
    }
    let base = &points[subset[0]];
    let mut rows = DMatrix::zeros(rank, rank);
    for (i, &idx) in subset[1..].iter().enumerate() {
        rows.row_mut(i).copy_from(&(&points[idx] - base).transpose());
    }
    let svd = rows.svd(false, true);
    let vt = svd.v_t.expect("svd requested v_t");
    let order = singular_order(&svd.singular_values);
    let largest = svd.singular_values[order[0]];
    // The zero padding row contributes one exact-zero singular value; a
    // second near-zero one means the offsets themselves are dependent.
    if largest == 0.0 || svd.singular_values[order[rank - 2]] < 1e-10 * largest {
        return None;
    }
    Some(vt.row(order[rank - 1]).transpose())
}

/// Advances `subset` to the next k-combination of `0..n` in lexicographic
/// order; `false` when exhausted.
fn next_combination(subset: &mut [usize], n: usize) -> bool {
    let k = subset.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if subset[i] < n - k + i {
            subset[i] += 1;
            for j in i + 1..k {
                subset[j] = subset[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

/// Per-trajectory self-collision summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionStats {
    pub frames: usize,
    /// Frames with positive self-collision loss.
    pub colliding: usize,
    /// Percentage of colliding frames, 0–100.
    pub collision_percent: f64,
    /// Mean self-collision loss over the colliding frames (0 when none).
    pub mean_colliding_loss: f64,
}

/// Evaluates the self-collision penalty on every frame of a joint-space
/// trajectory.
pub fn collision_stats(
    frames: &[JointState],
    model: &GripperModel,
    ctx: &CollisionContext,
) -> CollisionStats {
    let mut colliding = 0usize;
    let mut loss_sum = 0.0;
    for q in frames {
        let (loss, _) = adapt::self_collision_loss(model, ctx, q);
        if loss > 0.0 {
            colliding += 1;
            loss_sum += loss;
        }
    }
    CollisionStats {
        frames: frames.len(),
        colliding,
        collision_percent: if frames.is_empty() {
            0.0
        } else {
            100.0 * colliding as f64 / frames.len() as f64
        },
        mean_colliding_loss: if colliding == 0 {
            0.0
        } else {
            loss_sum / colliding as f64
        },
    }
}
