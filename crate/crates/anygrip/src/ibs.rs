//! Sampled interaction bisector surface: the set of points equidistant to
//! the scene and the gripper, voxel-seeded inside a palm-centered sphere,
//! refined by midpoint stepping, resampled to a fixed cardinality, and
//! annotated with dual-distance features. Also the object/gripper surface
//! contact maps used as alternative representations.

use std::io::{BufWriter, Read as _, Write as _};
use std::path::Path;

use nalgebra::{DMatrix, DVector, Isometry3, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{closest_point_gripper_posed, ClosestHit, HitSource, Scene, SceneGeometry};
use crate::model::{BasePose, GripperModel, JointState};
use crate::{Error, Result};

/// Early-exit threshold for midpoint refinement, in meters.
pub const REFINE_TOL: f64 = 1e-4;

/// Sampling controls for [`sample_ibs`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbsParams {
    /// Radius of the palm-centered sampling sphere, meters.
    pub sphere_radius: f64,
    /// Cells per axis when voxelizing the sphere's bounding box.
    pub voxel_resolution: usize,
    /// Equidistance threshold, meters. Defaults to half the voxel diagonal
    /// so no bisector sheet crossing a cell is missed.
    pub tau: f64,
    /// Midpoint refinement iterations per point.
    pub refine_iters: usize,
    /// Output cardinality.
    pub count: usize,
    /// Seed for the padding resampler.
    pub seed: u64,
}

impl IbsParams {
    /// Params with `tau` set to half the voxel diagonal of the given grid.
    pub fn with_grid(sphere_radius: f64, voxel_resolution: usize, count: usize) -> Self {
        let cell = 2.0 * sphere_radius / voxel_resolution as f64;
        IbsParams {
            sphere_radius,
            voxel_resolution,
            tau: 3.0_f64.sqrt() * cell / 2.0,
            refine_iters: 10,
            count,
            seed: 0,
        }
    }

    /// Voxel edge length, meters.
    pub fn cell(&self) -> f64 {
        2.0 * self.sphere_radius / self.voxel_resolution as f64
    }

    /// Residual bound a refined point must meet to stay in the cloud.
    pub fn keep_residual(&self) -> f64 {
        (self.tau / 10.0).max(1e-3)
    }

    pub fn validate(&self) -> Result<()> {
        if self.voxel_resolution < 2 {
            return Err(Error::Config(format!(
                "voxel resolution must be at least 2, got {}",
                self.voxel_resolution
            )));
        }
        if self.count < 1 {
            return Err(Error::Config("output size must be at least 1".into()));
        }
        if self.tau <= 0.0 || self.tau.is_nan() {
            return Err(Error::Config(format!(
                "equidistance threshold must be positive, got {}",
                self.tau
            )));
        }
        if self.sphere_radius <= 0.0 || self.sphere_radius.is_nan() {
            return Err(Error::Config(format!(
                "sphere radius must be positive, got {}",
                self.sphere_radius
            )));
        }
        Ok(())
    }
}

impl Default for IbsParams {
    fn default() -> Self {
        IbsParams::with_grid(0.18, 20, 4096)
    }
}

/// A posed gripper ready for repeated closest-point queries: the link
/// world transforms and the world palm frame for one `(q, base)`.
#[derive(Debug, Clone)]
pub struct GripperContext<'a> {
    pub model: &'a GripperModel,
    pub world: Vec<Isometry3<f64>>,
    pub palm: Isometry3<f64>,
}

impl<'a> GripperContext<'a> {
    pub fn new(model: &'a GripperModel, q: &JointState, base: &BasePose) -> Self {
        let world = model.forward_kinematics(q, base);
        let palm = base.isometry() * model.palm_frame;
        GripperContext { model, world, palm }
    }

    pub fn closest(&self, p: &Point3<f64>) -> Result<ClosestHit> {
        closest_point_gripper_posed(self.model, &self.world, p)
    }
}

/// Palm-frame view of one scene/gripper pairing. All queries go through
/// transforms composed once against the palm frame, so results are
/// functions of the relative geometry only: a rigid motion applied to
/// both sides cancels instead of trickling fp noise into every step of
/// the refinement (which is discontinuous at mesh Voronoi boundaries and
/// would amplify it).
struct PalmQuery<'a> {
    model: &'a GripperModel,
    scene: &'a Scene,
    /// Link frames expressed in palm coordinates; the base pose cancels
    /// out of this product entirely.
    links: Vec<Isometry3<f64>>,
    /// Scene primitive poses expressed in palm coordinates.
    prims: Vec<Isometry3<f64>>,
}

impl<'a> PalmQuery<'a> {
    fn new(
        scene: &'a Scene,
        model: &'a GripperModel,
        q: &JointState,
        palm_world: &Isometry3<f64>,
    ) -> Self {
        let palm_inv = model.palm_frame.inverse();
        let links = model
            .fk_local(q)
            .into_iter()
            .map(|l| palm_inv * l)
            .collect();
        let prims = scene
            .primitives
            .iter()
            .map(|prim| palm_world.inv_mul(&prim.pose))
            .collect();
        PalmQuery {
            model,
            scene,
            links,
            prims,
        }
    }

    /// Palm-frame view derived from an already-posed context. Unlike
    /// [`PalmQuery::new`] the base pose participates in the products, so
    /// use this only for one-shot queries.
    fn from_context(scene: &'a Scene, ctx: &GripperContext<'a>) -> Self {
        PalmQuery {
            model: ctx.model,
            scene,
            links: ctx.world.iter().map(|w| ctx.palm.inv_mul(w)).collect(),
            prims: scene
                .primitives
                .iter()
                .map(|prim| ctx.palm.inv_mul(&prim.pose))
                .collect(),
        }
    }

    fn scene_closest(&self, p: &Point3<f64>) -> Result<ClosestHit> {
        self.scene.closest_point_posed(&self.prims, p)
    }

    fn gripper_closest(&self, p: &Point3<f64>) -> Result<ClosestHit> {
        closest_point_gripper_posed(self.model, &self.links, p)
    }
}

/// One interaction-surface sample. `c` is expressed in the palm frame;
/// the world position is `palm * c`.
#[derive(Debug, Clone, PartialEq)]
pub struct IbsPoint {
    /// Palm-frame coordinates.
    pub c: Vector3<f64>,
    /// Distance to the scene, meters.
    pub d_s: f64,
    /// Distance to the gripper, meters.
    pub d_g: f64,
    /// 1.0 when the scene-closest primitive is foreground.
    pub b_s: f64,
    /// One-hot over gripper components (palm + K fingers).
    pub c_g: Vec<f64>,
    /// Rest-pose up-alignment of the gripper-closest surface element.
    pub a_g: f64,
}

impl IbsPoint {
    /// Index of the owning gripper component (argmax of the one-hot).
    pub fn component(&self) -> usize {
        let negated: Vec<f64> = self.c_g.iter().map(|&v| -v).collect();
        crate::math::argmin(&negated).unwrap_or(0)
    }

    /// Dense feature vector `[c, d_s, d_g, b_s, c_g, a_g]` of length
    /// `8 + K` for a hand with `K` fingers.
    pub fn features(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(7 + self.c_g.len());
        v.extend_from_slice(self.c.as_slice());
        v.push(self.d_s);
        v.push(self.d_g);
        v.push(self.b_s);
        v.extend_from_slice(&self.c_g);
        v.push(self.a_g);
        DVector::from_vec(v)
    }
}

/// Where a feature cloud came from, echoed into result files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IbsProvenance {
    pub scene: String,
    pub gripper: String,
    pub q: Vec<f64>,
    pub base: BasePose,
}

/// Fixed-cardinality interaction-surface cloud.
#[derive(Debug, Clone)]
pub struct IbsFeatureCloud {
    pub points: Vec<IbsPoint>,
    /// World pose of the palm frame the coordinates are relative to.
    pub palm: Isometry3<f64>,
    /// Component count K + 1 (palm plus fingers).
    pub num_components: usize,
    pub provenance: IbsProvenance,
}

impl IbsFeatureCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Per-point feature length: `8 + K`.
    pub fn feature_dim(&self) -> usize {
        7 + self.num_components
    }

    /// Row-per-point feature matrix, `n x (8 + K)`.
    pub fn feature_matrix(&self) -> DMatrix<f64> {
        let dim = self.feature_dim();
        let mut m = DMatrix::zeros(self.points.len(), dim);
        for (i, p) in self.points.iter().enumerate() {
            m.row_mut(i).copy_from_slice(p.features().as_slice());
        }
        m
    }

    /// World position of point `i`.
    pub fn position(&self, i: usize) -> Point3<f64> {
        self.palm * Point3::from(self.points[i].c)
    }
}

fn one_hot(component: usize, num_components: usize) -> Vec<f64> {
    let mut v = vec![0.0; num_components];
    v[component.min(num_components - 1)] = 1.0;
    v
}

fn featurize_palm(pq: &PalmQuery, p: &Point3<f64>) -> Result<IbsPoint> {
    let scene_hit = pq.scene_closest(p)?;
    let gripper_hit = pq.gripper_closest(p)?;
    let component = match gripper_hit.source {
        HitSource::Gripper { component, .. } => component,
        HitSource::Scene { .. } => 0,
    };
    let num_components = pq.model.num_fingers() + 1;
    let a_g = match gripper_hit.source {
        HitSource::Gripper { link, .. } => pq.model.links[link].rest_up_alignment[gripper_hit.element],
        HitSource::Scene { .. } => 0.0,
    };
    Ok(IbsPoint {
        c: p.coords,
        d_s: scene_hit.distance,
        d_g: gripper_hit.distance,
        b_s: match scene_hit.source {
            HitSource::Scene { foreground, .. } => {
                if foreground {
                    1.0
                } else {
                    0.0
                }
            }
            HitSource::Gripper { .. } => 0.0,
        },
        c_g: one_hot(component, num_components),
        a_g: a_g.clamp(-1.0, 1.0),
    })
}

/// Computes the full feature set of a single world point `p` against the
/// scene and a posed gripper.
pub fn featurize_point(scene: &Scene, ctx: &GripperContext, p: &Point3<f64>) -> Result<IbsPoint> {
    let pq = PalmQuery::from_context(scene, ctx);
    featurize_palm(&pq, &ctx.palm.inverse_transform_point(p))
}

/// Outcome of refining one candidate, in palm coordinates.
struct Refined {
    p: Point3<f64>,
    residual: f64,
    /// Whether the point sees the scene and the gripper in genuinely
    /// opposing directions (angle at the point >= 60 degrees). Near a
    /// contact, unsigned distances make a whole neighborhood of the
    /// touching point spuriously equidistant; those candidates view both
    /// surfaces in nearly the same direction and are discarded.
    opposed: bool,
}

/// Midpoint refinement: steps `p` toward the bisector until the distance
/// residual drops below [`REFINE_TOL`] or the iteration budget runs out.
fn refine_point(pq: &PalmQuery, start: Point3<f64>, iters: usize) -> Result<Refined> {
    let mut p = start;
    for _ in 0..iters {
        let s = pq.scene_closest(&p)?;
        let g = pq.gripper_closest(&p)?;
        if (s.distance - g.distance).abs() < REFINE_TOL {
            break;
        }
        let dir = g.point - s.point;
        let norm = dir.norm();
        if norm < 1e-12 {
            break;
        }
        p += (g.distance - s.distance) / 2.0 * (dir / norm);
    }
    let s = pq.scene_closest(&p)?;
    let g = pq.gripper_closest(&p)?;
    let residual = (s.distance - g.distance).abs();
    let total = s.distance + g.distance;
    let span = (g.point - s.point).norm();
    let opposed = total <= 1e-9 || span >= 0.5 * total;
    Ok(Refined { p, residual, opposed })
}

/// Greedy farthest-point downsample to `count` indices: starts at index 0
/// and repeatedly takes the point maximizing the distance to the chosen
/// set, lowest index on ties.
pub fn farthest_point_indices(points: &[Point3<f64>], count: usize) -> Vec<usize> {
    if points.is_empty() || count == 0 {
        return Vec::new();
    }
    let count = count.min(points.len());
    let mut chosen = Vec::with_capacity(count);
    let mut min_dist = vec![f64::INFINITY; points.len()];
    let mut current = 0usize;
    chosen.push(current);
    while chosen.len() < count {
        let anchor = points[current];
        for (i, p) in points.iter().enumerate() {
            let d = (p - anchor).norm_squared();
            if d < min_dist[i] {
                min_dist[i] = d;
            }
        }
        min_dist[current] = -1.0;
        let mut best = (0usize, f64::NEG_INFINITY);
        for (i, &d) in min_dist.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        current = best.0;
        chosen.push(current);
    }
    chosen
}

/// Samples the interaction bisector surface between the scene and the
/// posed gripper: voxel seeding inside the palm sphere, sign-change
/// pruning, midpoint refinement, and farthest-point resampling (padding
/// with jittered re-refined copies when too few candidates survive) to
/// exactly `params.count` featurized points.
pub fn sample_ibs(
    scene: &Scene,
    model: &GripperModel,
    q: &JointState,
    base: &BasePose,
    params: &IbsParams,
) -> Result<IbsFeatureCloud> {
    params.validate()?;
    if scene.is_empty() {
        return Err(Error::Geometry("no IBS in range: scene is empty".into()));
    }
    let palm_world = base.isometry() * model.palm_frame;
    let pq = PalmQuery::new(scene, model, q, &palm_world);
    let v = params.voxel_resolution;
    let cell = params.cell();
    let r = params.sphere_radius;

    // Scene-minus-gripper distance gap over the full voxel grid, in palm
    // coordinates.
    let mut f = vec![0.0f64; v * v * v];
    let mut centers = vec![Point3::origin(); v * v * v];
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let p = Point3::new(
                    -r + (ix as f64 + 0.5) * cell,
                    -r + (iy as f64 + 0.5) * cell,
                    -r + (iz as f64 + 0.5) * cell,
                );
                let idx = (ix * v + iy) * v + iz;
                centers[idx] = p;
                let ds = pq.scene_closest(&p)?.distance;
                let dg = pq.gripper_closest(&p)?.distance;
                f[idx] = ds - dg;
            }
        }
    }

    // Keep near-equidistant cells that also see a sign change among their
    // 26 neighbors; cells distant from the potential surface drop out.
    let mut seeds = Vec::new();
    for ix in 0..v {
        for iy in 0..v {
            for iz in 0..v {
                let idx = (ix * v + iy) * v + iz;
                if f[idx].abs() >= params.tau {
                    continue;
                }
                let mut crossing = false;
                'scan: for dx in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dz in -1i64..=1 {
                            if dx == 0 && dy == 0 && dz == 0 {
                                continue;
                            }
                            let (nx, ny, nz) =
                                (ix as i64 + dx, iy as i64 + dy, iz as i64 + dz);
                            if nx < 0 || ny < 0 || nz < 0 {
                                continue;
                            }
                            let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
                            if nx >= v || ny >= v || nz >= v {
                                continue;
                            }
                            if f[idx] * f[(nx * v + ny) * v + nz] <= 0.0 {
                                crossing = true;
                                break 'scan;
                            }
                        }
                    }
                }
                if crossing {
                    seeds.push(centers[idx]);
                }
            }
        }
    }

    let keep = params.keep_residual();
    let mut survivors = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let refined = refine_point(&pq, seed, params.refine_iters)?;
        if refined.residual <= keep && refined.opposed {
            survivors.push(refined.p);
        }
    }
    if survivors.is_empty() {
        return Err(Error::Geometry("no IBS in range".into()));
    }

    let mut selected: Vec<Point3<f64>> = if survivors.len() > params.count {
        farthest_point_indices(&survivors, params.count)
            .into_iter()
            .map(|i| survivors[i])
            .collect()
    } else {
        survivors.clone()
    };

    // Pad with jittered re-refined resamples of the survivor set.
    if selected.len() < params.count {
        let mut rng = ChaCha20Rng::seed_from_u64(params.seed);
        let jitter = Normal::new(0.0, cell / 10.0)
            .map_err(|e| Error::Numeric(format!("jitter distribution: {e}")))?;
        let mut attempts = 0usize;
        let budget = 50 * params.count;
        while selected.len() < params.count && attempts < budget {
            attempts += 1;
            let pick = survivors[rng.gen_range(0..survivors.len())];
            let moved = pick
                + Vector3::new(
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                    jitter.sample(&mut rng),
                );
            let refined = refine_point(&pq, moved, params.refine_iters)?;
            if refined.residual <= keep && refined.opposed {
                selected.push(refined.p);
            }
        }
        // Degenerate padding fallback: cycle the survivors verbatim.
        let mut cycle = 0usize;
        while selected.len() < params.count {
            selected.push(survivors[cycle % survivors.len()]);
            cycle += 1;
        }
    }

    let points = selected
        .iter()
        .map(|p| featurize_palm(&pq, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(IbsFeatureCloud {
        points,
        palm: palm_world,
        num_components: model.num_fingers() + 1,
        provenance: IbsProvenance {
            scene: scene.label.clone(),
            gripper: model.name.clone(),
            q: q.q.as_slice().to_vec(),
            base: base.clone(),
        },
    })
}

/// Feature clouds sampled directly from a surface instead of the bisector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    Ibs,
    Ocm,
    Gcm,
}

impl std::str::FromStr for RepresentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ibs" => Ok(RepresentationKind::Ibs),
            "ocm" => Ok(RepresentationKind::Ocm),
            "gcm" => Ok(RepresentationKind::Gcm),
            other => Err(Error::Config(format!(
                "unknown representation '{other}' (expected ibs, ocm, or gcm)"
            ))),
        }
    }
}

/// One surface sample of a contact map.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfacePoint {
    /// Coordinates relative to the cloud's origin (world axes).
    pub c: Vector3<f64>,
    /// Distance to the opposite side (gripper for OCM, scene for GCM).
    pub distance: f64,
    /// Foreground flag: sample origin for OCM, closest-scene flag for GCM.
    pub foreground: f64,
    /// One-hot over gripper components.
    pub component: Vec<f64>,
}

/// Object or gripper contact map: `n` surface samples with cross-distance
/// features.
#[derive(Debug, Clone)]
pub struct SurfaceFeatureCloud {
    pub kind: RepresentationKind,
    pub points: Vec<SurfacePoint>,
    /// World origin the coordinates are relative to.
    pub origin: Point3<f64>,
}

impl SurfaceFeatureCloud {
    /// Per-point feature length: `6 + K`.
    pub fn feature_dim(&self) -> usize {
        self.points.first().map(|p| 5 + p.component.len()).unwrap_or(5)
    }
}

/// Samples `n` points from the foreground scene surface and features them
/// against the posed gripper; coordinates are relative to the object
/// center.
pub fn extract_ocm(
    scene: &Scene,
    model: &GripperModel,
    q: &JointState,
    base: &BasePose,
    n: usize,
) -> Result<SurfaceFeatureCloud> {
    let origin = scene
        .object_center()
        .ok_or_else(|| Error::Geometry("no IBS in range: scene is empty".into()))?;
    let ctx = GripperContext::new(model, q, base);
    let num_components = model.num_fingers() + 1;
    let mut rng = ChaCha20Rng::seed_from_u64(0x0c_0c);
    let samples = sample_scene_foreground(scene, n, &mut rng)?;
    let points = samples
        .into_iter()
        .map(|p| {
            let hit = ctx.closest(&p)?;
            let component = match hit.source {
                HitSource::Gripper { component, .. } => component,
                HitSource::Scene { .. } => 0,
            };
            Ok(SurfacePoint {
                c: p - origin,
                distance: hit.distance,
                foreground: 1.0,
                component: one_hot(component, num_components),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SurfaceFeatureCloud {
        kind: RepresentationKind::Ocm,
        points,
        origin,
    })
}

/// Samples `n` points from the posed gripper surface and features them
/// against the scene; coordinates are relative to the gripper root.
pub fn extract_gcm(
    scene: &Scene,
    model: &GripperModel,
    q: &JointState,
    base: &BasePose,
    n: usize,
) -> Result<SurfaceFeatureCloud> {
    let ctx = GripperContext::new(model, q, base);
    let num_components = model.num_fingers() + 1;
    let origin = Point3::from(base.translation);
    let areas: Vec<f64> = model.links.iter().map(|l| l.mesh.surface_area()).collect();
    let total: f64 = areas.iter().sum();
    if total <= 0.0 {
        return Err(Error::Geometry("gripper has no surface to sample".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(0x6_0c);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut pick = rng.gen_range(0.0..total);
        let mut li = 0;
        for (i, a) in areas.iter().enumerate() {
            if pick < *a || i + 1 == areas.len() {
                li = i;
                break;
            }
            pick -= a;
        }
        let local = model.links[li]
            .mesh
            .sample_surface(1, &mut rng)
            .pop()
            .map(|(p, _)| p)
            .ok_or_else(|| Error::Geometry("gripper link has no surface to sample".into()))?;
        let p = ctx.world[li] * local;
        let hit = scene.closest_point(&p)?;
        let fg = matches!(hit.source, HitSource::Scene { foreground: true, .. });
        points.push(SurfacePoint {
            c: p - origin,
            distance: hit.distance,
            foreground: if fg { 1.0 } else { 0.0 },
            component: one_hot(model.links[li].component, num_components),
        });
    }
    Ok(SurfaceFeatureCloud {
        kind: RepresentationKind::Gcm,
        points,
        origin,
    })
}

fn sample_scene_foreground(
    scene: &Scene,
    n: usize,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<Point3<f64>>> {
    let mut mesh_prims = Vec::new();
    let mut cloud_points = Vec::new();
    for prim in &scene.primitives {
        match &prim.geometry {
            SceneGeometry::Mesh { mesh, .. } if prim.foreground => {
                mesh_prims.push((mesh, prim.pose, mesh.surface_area()));
            }
            SceneGeometry::Cloud(c) => {
                for (i, p) in c.points.iter().enumerate() {
                    if c.foreground[i] {
                        cloud_points.push(prim.pose * p);
                    }
                }
            }
            _ => {}
        }
    }
    if !mesh_prims.is_empty() {
        let total: f64 = mesh_prims.iter().map(|(_, _, a)| a).sum();
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = 0;
            for (i, (_, _, a)) in mesh_prims.iter().enumerate() {
                if pick < *a || i + 1 == mesh_prims.len() {
                    chosen = i;
                    break;
                }
                pick -= a;
            }
            let (mesh, pose, _) = &mesh_prims[chosen];
            let local = mesh
                .sample_surface(1, rng)
                .pop()
                .map(|(p, _)| p)
                .ok_or_else(|| Error::Geometry("foreground mesh has no surface".into()))?;
            out.push(pose * local);
        }
        return Ok(out);
    }
    if cloud_points.is_empty() {
        return Err(Error::Geometry("scene has no foreground surface to sample".into()));
    }
    Ok((0..n)
        .map(|_| cloud_points[rng.gen_range(0..cloud_points.len())])
        .collect())
}

/// Writes the cloud as binary little-endian PLY (palm-frame coordinates
/// plus per-point features) with a JSON sidecar `<file>.json` recording
/// params and provenance.
pub fn save_ibs_ply(path: &Path, cloud: &IbsFeatureCloud, params: &IbsParams) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut w = BufWriter::new(file);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\ncomment interaction bisector surface\n\
         element vertex {}\nproperty float x\nproperty float y\nproperty float z\n\
         property float d_s\nproperty float d_g\nproperty float a_g\n\
         property uchar b_s\nproperty uchar component\nend_header\n",
        cloud.points.len()
    )?;
    for p in &cloud.points {
        for value in [p.c.x, p.c.y, p.c.z, p.d_s, p.d_g, p.a_g] {
            w.write_all(&(value as f32).to_le_bytes())?;
        }
        w.write_all(&[p.b_s as u8, p.component() as u8])?;
    }
    w.flush()?;
    let sidecar = Sidecar {
        params: params.clone(),
        num_components: cloud.num_components,
        palm_translation: cloud.palm.translation.vector.into(),
        palm_rotation: cloud.palm.rotation.scaled_axis().into(),
        provenance: cloud.provenance.clone(),
        version: crate::VERSION.to_string(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| Error::Parse(format!("sidecar: {e}")))?;
    std::fs::write(sidecar_path(path), json)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    version: String,
    params: IbsParams,
    num_components: usize,
    palm_translation: [f64; 3],
    palm_rotation: [f64; 3],
    provenance: IbsProvenance,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_os_string();
    os.push(".json");
    os.into()
}

/// Reads a cloud written by [`save_ibs_ply`], including its sidecar.
pub fn load_ibs_ply(path: &Path) -> Result<(IbsFeatureCloud, IbsParams)> {
    let sidecar_text = std::fs::read_to_string(sidecar_path(path)).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", sidecar_path(path).display()),
        ))
    })?;
    let sidecar: Sidecar = serde_json::from_str(&sidecar_text)
        .map_err(|e| Error::Parse(format!("{}: {e}", sidecar_path(path).display())))?;
    let mut file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::Parse(format!("{}: missing PLY header terminator", path.display())))?
        + 11;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let count: usize = header
        .lines()
        .find_map(|l| l.strip_prefix("element vertex "))
        .ok_or_else(|| Error::Parse(format!("{}: missing vertex element", path.display())))?
        .trim()
        .parse()
        .map_err(|e| Error::Parse(format!("{}: vertex count: {e}", path.display())))?;
    let record = 6 * 4 + 2;
    if bytes.len() < header_end + count * record {
        return Err(Error::Parse(format!("{}: truncated payload", path.display())));
    }
    let mut points = Vec::with_capacity(count);
    for i in 0..count {
        let at = header_end + i * record;
        let mut floats = [0.0f32; 6];
        for (j, f) in floats.iter_mut().enumerate() {
            *f = f32::from_le_bytes(bytes[at + 4 * j..at + 4 * j + 4].try_into().unwrap());
        }
        let b_s = bytes[at + 24] as f64;
        let component = bytes[at + 25] as usize;
        points.push(IbsPoint {
            c: Vector3::new(floats[0] as f64, floats[1] as f64, floats[2] as f64),
            d_s: floats[3] as f64,
            d_g: floats[4] as f64,
            b_s,
            c_g: one_hot(component, sidecar.num_components),
            a_g: floats[5] as f64,
        });
    }
    let palm = Isometry3::from_parts(
        nalgebra::Translation3::new(
            sidecar.palm_translation[0],
            sidecar.palm_translation[1],
            sidecar.palm_translation[2],
        ),
        crate::math::rotation_from_axis_angle(&Vector3::new(
            sidecar.palm_rotation[0],
            sidecar.palm_rotation[1],
            sidecar.palm_rotation[2],
        )),
    );
    Ok((
        IbsFeatureCloud {
            points,
            palm,
            num_components: sidecar.num_components,
            provenance: sidecar.provenance,
        },
        sidecar.params,
    ))
}
