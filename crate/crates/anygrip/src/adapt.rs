//! Keypoint-displacement to joint-change adaptation: a per-gripper MLP
//! trained self-supervised against the gripper's own forward kinematics,
//! the convex-hull self-collision penalty that regularizes it, and the
//! first-order optimization baselines it is benchmarked against.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, Point3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geom::{convex_hull, signed_distance_hull_face, ConvexHull};
use crate::model::{BasePose, GripperModel, JointState};
use crate::nn::{Graph, Mlp, ParamStore, DEFAULT_LR};
use crate::{Error, Result};

/// Weight of the self-collision term in the combined objective.
pub const SELF_COLLISION_WEIGHT: f64 = 1.0;

/// Standard deviation, in radians, of the joint perturbations that
/// training targets are drawn from; matches the per-step displacement
/// scale the net sees at run time.
pub const TARGET_SIGMA: f64 = 0.05;

/// Hidden width of the adaptation MLP.
pub const HIDDEN_WIDTH: usize = 256;

/// Surface samples drawn per link when building a [`CollisionContext`].
pub const SAMPLES_PER_LINK: usize = 64;

/// Default iteration cap for the optimization baselines.
pub const OB_IK_ITERS: usize = 100;

/// Default initial step size for the optimization baselines.
pub const OB_IK_STEP: f64 = 0.5;

/// Fixed seed for collision-context surface sampling, so two contexts
/// built for the same gripper are identical.
const CONTEXT_SEED: u64 = 0x5e1f_c011;

/// Input scaling for the meter-valued feature blocks. Joint angles are
/// O(1) in radians while keypoint coordinates are centimeters and commanded
/// displacements millimeters; without rescaling, the displacement block
/// carries so little variance that training stalls at the zero predictor.
const KEYPOINT_SCALE: f64 = 10.0;
const DISPLACEMENT_SCALE: f64 = 100.0;

/// The per-gripper adaptation network: a plain MLP from
/// `[q, finger keypoints, desired displacements]` (C + 12K values, all
/// gripper-local) to a joint change in `R^C`. Three ReLU hidden layers of
/// width [`HIDDEN_WIDTH`]; the final layer initializes to zero so an
/// untrained net predicts exactly no change.
///
/// The predicted change is the network's response to the commanded
/// displacements minus its response to zero displacements at the same
/// configuration, so a zero command maps to exactly zero joint change for
/// any parameters and training capacity goes entirely to the displacement
/// response.
#[derive(Debug, Clone)]
pub struct AdaptationNet {
    mlp: Mlp,
    dof: usize,
    fingers: usize,
}

impl AdaptationNet {
    /// A net shaped for `model`: input `C + 12K`, output `C`.
    pub fn new(model: &GripperModel) -> Self {
        let c = model.dof();
        let k = model.num_fingers();
        let widths = [c + 12 * k, HIDDEN_WIDTH, HIDDEN_WIDTH, HIDDEN_WIDTH, c];
        AdaptationNet { mlp: Mlp::new("adapt", &widths), dof: c, fingers: k }
    }

    pub fn input_dim(&self) -> usize {
        self.dof + 12 * self.fingers
    }

    pub fn output_dim(&self) -> usize {
        self.dof
    }

    /// Parameter names owned by this net.
    pub fn param_names(&self) -> Vec<String> {
        self.mlp.param_names()
    }

    /// Fresh parameters: randomly initialized hidden layers, zero final
    /// layer.
    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        self.mlp.init(store, rng, true)
    }

    /// Checks that `store` holds parameters of the expected shapes.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        self.mlp.validate(store)
    }

    fn feature_row(
        &self,
        q: &JointState,
        keypoints: &DVector<f64>,
        displacements: &DVector<f64>,
    ) -> Vec<f64> {
        assert_eq!(q.dim(), self.dof, "joint state dimension mismatch");
        assert_eq!(keypoints.len(), 6 * self.fingers, "keypoint dimension mismatch");
        assert_eq!(displacements.len(), 6 * self.fingers, "displacement dimension mismatch");
        let mut row = Vec::with_capacity(self.input_dim());
        row.extend(q.q.iter());
        row.extend(keypoints.iter().map(|v| v * KEYPOINT_SCALE));
        row.extend(displacements.iter().map(|v| v * DISPLACEMENT_SCALE));
        row
    }
}

/// Predicted joint change for one query: the net's output at the commanded
/// displacements minus its output at zero displacements. The caller clamps
/// `q + Δj` to the joint limits before using the result.
pub fn adapt_forward(
    net: &AdaptationNet,
    store: &ParamStore,
    q: &JointState,
    keypoints: &DVector<f64>,
    displacements: &DVector<f64>,
) -> DVector<f64> {
    let row = net.feature_row(q, keypoints, displacements);
    let anchor = net.feature_row(q, keypoints, &DVector::zeros(displacements.len()));
    let mut g = Graph::new();
    let mut x = DMatrix::zeros(2, row.len());
    for (j, (a, b)) in row.iter().zip(&anchor).enumerate() {
        x[(0, j)] = *a;
        x[(1, j)] = *b;
    }
    let x = g.constant(x);
    let out = net.mlp.forward(&mut g, store, x);
    let pred = g.value(out);
    DVector::from_iterator(net.dof, (0..net.dof).map(|j| pred[(0, j)] - pred[(1, j)]))
}

fn finger_points(model: &GripperModel, q: &JointState) -> DVector<f64> {
    model.keypoint_state(q, &BasePose::identity()).finger_vector()
}

fn offset_state(q: &JointState, dj: &DVector<f64>) -> JointState {
    JointState { q: &q.q + dj }
}

/// Halved squared tracking error of a candidate joint change against the
/// commanded keypoint displacements, with its gradient with respect to the
/// change. The candidate configuration is projected onto the joint limits
/// before forward kinematics; projected components get zero gradient.
pub fn cycle_point_loss(
    model: &GripperModel,
    q: &JointState,
    dj: &DVector<f64>,
    displacements: &DVector<f64>,
) -> (f64, DVector<f64>) {
    assert_eq!(dj.len(), model.dof(), "joint change dimension mismatch");
    assert_eq!(
        displacements.len(),
        6 * model.num_fingers(),
        "displacement dimension mismatch"
    );
    let start = finger_points(model, q);
    let (clamped, moved) = model.clamp_joints(&offset_state(q, dj));
    let end = finger_points(model, &clamped);
    let residual = end - start - displacements;
    let loss = 0.5 * residual.norm_squared();
    let mut jac = model.keypoint_jacobian(&clamped);
    for &c in &moved {
        jac.column_mut(c).fill(0.0);
    }
    let grad = jac.transpose() * residual;
    (loss, grad)
}

/// Precomputed geometry for the self-collision penalty: per-link convex
/// hulls and area-weighted surface samples, both link-local, plus the
/// symmetric set of excluded link pairs. Parent/child pairs are excluded
/// because they touch at their shared joint by construction.
#[derive(Debug, Clone)]
pub struct CollisionContext {
    /// Link-local convex hulls, one per link.
    pub hulls: Vec<ConvexHull>,
    /// Link-local surface samples, [`SAMPLES_PER_LINK`] per link.
    pub samples: Vec<Vec<Point3<f64>>>,
    excluded: BTreeSet<(usize, usize)>,
}

impl CollisionContext {
    /// Hulls, samples, and exclusions for every link of `model`. Sampling
    /// uses a fixed seed, so the context is a pure function of the gripper.
    pub fn build(model: &GripperModel) -> Result<Self> {
        let mut rng = ChaCha20Rng::seed_from_u64(CONTEXT_SEED);
        let mut hulls = Vec::with_capacity(model.links.len());
        let mut samples = Vec::with_capacity(model.links.len());
        for link in &model.links {
            hulls.push(convex_hull(&link.mesh.vertices)?);
            samples.push(
                link.mesh
                    .sample_surface(SAMPLES_PER_LINK, &mut rng)
                    .into_iter()
                    .map(|(p, _)| p)
                    .collect(),
            );
        }
        let mut excluded = BTreeSet::new();
        for (li, link) in model.links.iter().enumerate() {
            if let Some(j) = link.parent_joint {
                let parent = model.joints[j].parent_link;
                excluded.insert((li, parent));
                excluded.insert((parent, li));
            }
        }
        Ok(CollisionContext { hulls, samples, excluded })
    }

    /// Is the link pair excluded from the penalty? Symmetric.
    pub fn is_excluded(&self, a: usize, b: usize) -> bool {
        self.excluded.contains(&(a, b))
    }

    /// Excluded pairs, both orientations.
    pub fn excluded_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.excluded.iter().copied()
    }
}

/// Total penetration depth of link surface samples inside other links'
/// hulls at configuration `q`, with its gradient. Depth gradients flow
/// through the kinematics of both the sampled link and the penetrated one.
pub fn self_collision_loss(
    model: &GripperModel,
    ctx: &CollisionContext,
    q: &JointState,
) -> (f64, DVector<f64>) {
    let local = model.fk_local(q);
    let mut loss = 0.0;
    let mut grad = DVector::zeros(model.dof());
    for m in 0..model.links.len() {
        for l in 0..model.links.len() {
            if l == m || ctx.is_excluded(m, l) {
                continue;
            }
            let into_l = local[l].inverse() * local[m];
            for s in &ctx.samples[m] {
                let (depth, face) = signed_distance_hull_face(&ctx.hulls[l], &(into_l * s));
                if depth <= 0.0 {
                    continue;
                }
                loss += depth;
                let normal = local[l].rotation * ctx.hulls[l].faces[face].normal.into_inner();
                let p = local[m] * s;
                let jm = model.point_jacobian(&local, m, &p);
                let jl = model.point_jacobian(&local, l, &p);
                for c in 0..grad.len() {
                    let rel = Vector3::new(
                        jm[(0, c)] - jl[(0, c)],
                        jm[(1, c)] - jl[(1, c)],
                        jm[(2, c)] - jl[(2, c)],
                    );
                    grad[c] -= normal.dot(&rel);
                }
            }
        }
    }
    (loss, grad)
}

/// Combined objective: tracking loss plus [`SELF_COLLISION_WEIGHT`] times
/// the self-collision penalty, both evaluated at the limit-projected
/// configuration, with the gradient with respect to the joint change.
pub fn total_adaptation_loss(
    model: &GripperModel,
    ctx: &CollisionContext,
    q: &JointState,
    dj: &DVector<f64>,
    displacements: &DVector<f64>,
) -> (f64, DVector<f64>) {
    let (point_loss, point_grad) = cycle_point_loss(model, q, dj, displacements);
    let (clamped, moved) = model.clamp_joints(&offset_state(q, dj));
    let (self_loss, mut self_grad) = self_collision_loss(model, ctx, &clamped);
    for &c in &moved {
        self_grad[c] = 0.0;
    }
    (
        point_loss + SELF_COLLISION_WEIGHT * self_loss,
        point_grad + SELF_COLLISION_WEIGHT * self_grad,
    )
}

/// Knobs for [`train_adaptation`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Parameter updates to run.
    pub updates: usize,
    /// Samples per update.
    pub batch: usize,
    /// Optimizer learning rate.
    pub lr: f64,
    /// Standard deviation of the target joint perturbations, radians.
    pub sigma: f64,
    /// Seed for data generation.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            updates: 20_000,
            batch: 256,
            lr: DEFAULT_LR,
            sigma: TARGET_SIGMA,
            seed: 0,
        }
    }
}

fn random_config(limits: &[(f64, f64)], rng: &mut impl Rng) -> JointState {
    JointState::from_vec(limits.iter().map(|&(lo, hi)| rng.gen_range(lo..=hi)).collect())
}

/// Uniform configuration with zero self-collision loss. Run-time states are
/// collision-free, so training and evaluation start from such states; the
/// perturbed targets may still stray toward contact, which keeps the
/// penalty active.
fn random_free_config(
    model: &GripperModel,
    ctx: &CollisionContext,
    limits: &[(f64, f64)],
    rng: &mut impl Rng,
) -> Result<JointState> {
    for _ in 0..10_000 {
        let q = random_config(limits, rng);
        if self_collision_loss(model, ctx, &q).0 == 0.0 {
            return Ok(q);
        }
    }
    Err(Error::Numeric(format!(
        "no collision-free configuration of '{}' found in 10000 draws",
        model.name
    )))
}

/// `q` plus a zero-mean perturbation, projected back onto the limits.
fn perturbed_config(
    model: &GripperModel,
    q: &JointState,
    dist: &Normal<f64>,
    rng: &mut impl Rng,
) -> JointState {
    let step = DVector::from_iterator(q.dim(), (0..q.dim()).map(|_| dist.sample(rng)));
    model.clamp_joints(&offset_state(q, &step)).0
}

/// Self-supervised training: joint targets are drawn around random valid
/// configurations and the displacement labels come from the gripper's own
/// forward kinematics, so no external data is involved. Each sample's
/// prediction is anchored like [`adapt_forward`]: the batch carries a
/// zero-displacement row per sample and the loss sees the difference. The
/// configured learning rate is the peak of a cosine decay that reaches zero
/// at the end of the budget, which lowers the stochastic-gradient noise
/// floor late in training. Returns the per-update batch-mean loss curve;
/// `updates == 0` leaves `store` untouched.
pub fn train_adaptation(
    net: &AdaptationNet,
    store: &mut ParamStore,
    model: &GripperModel,
    ctx: &CollisionContext,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    net.validate(store)?;
    if cfg.batch == 0 {
        return Err(Error::Config("training batch size must be at least 1".into()));
    }
    let dist = Normal::new(0.0, cfg.sigma)
        .map_err(|e| Error::Config(format!("target sigma {}: {e}", cfg.sigma)))?;
    let limits = model.limits();
    let c = net.output_dim();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.updates);
    for update in 0..cfg.updates {
        let mut configs = Vec::with_capacity(cfg.batch);
        let mut commands = Vec::with_capacity(cfg.batch);
        let mut x = DMatrix::zeros(2 * cfg.batch, net.input_dim());
        for b in 0..cfg.batch {
            let q = random_free_config(model, ctx, &limits, &mut rng)?;
            let target = perturbed_config(model, &q, &dist, &mut rng);
            let keypoints = finger_points(model, &q);
            let displacements = finger_points(model, &target) - &keypoints;
            let row = net.feature_row(&q, &keypoints, &displacements);
            let anchor = net.feature_row(&q, &keypoints, &DVector::zeros(displacements.len()));
            for (j, (v, a)) in row.into_iter().zip(anchor).enumerate() {
                x[(b, j)] = v;
                x[(cfg.batch + b, j)] = a;
            }
            configs.push(q);
            commands.push(displacements);
        }
        let mut g = Graph::new();
        let input = g.constant(x);
        let out = net.mlp.forward(&mut g, store, input);
        let pred = g.value(out).clone();
        let mut seed = DMatrix::zeros(2 * cfg.batch, c);
        let mut batch_loss = 0.0;
        for b in 0..cfg.batch {
            let dj =
                DVector::from_iterator(c, (0..c).map(|j| pred[(b, j)] - pred[(cfg.batch + b, j)]));
            let (loss, grad) = total_adaptation_loss(model, ctx, &configs[b], &dj, &commands[b]);
            batch_loss += loss;
            for j in 0..c {
                seed[(b, j)] = grad[j] / cfg.batch as f64;
                seed[(cfg.batch + b, j)] = -grad[j] / cfg.batch as f64;
            }
        }
        let mean = batch_loss / cfg.batch as f64;
        if !mean.is_finite() {
            return Err(Error::Numeric(format!(
                "adaptation training diverged at update {update}: batch loss {mean}"
            )));
        }
        curve.push(mean);
        let grads = g.backward_seeded(out, &seed);
        let phase = std::f64::consts::PI * update as f64 / cfg.updates as f64;
        store.adam_step(&grads, cfg.lr * 0.5 * (1.0 + phase.cos()))?;
    }
    Ok(curve)
}

/// One held-out evaluation sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSample {
    /// Keypoint error after applying the predicted change, meters.
    pub tracking_error: f64,
    /// Norm of the commanded displacement vector, meters.
    pub commanded_norm: f64,
    /// Self-collision loss at the predicted pose.
    pub self_collision: f64,
    /// Norm of the predicted joint change, radians.
    pub joint_change_norm: f64,
}

/// Held-out adaptation quality: tracking against commanded displacements,
/// drift on zero commands, and the self-collision regression guard against
/// the unadapted baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: Vec<EvalSample>,
    pub mean_tracking_error: f64,
    pub mean_commanded_norm: f64,
    /// `mean_tracking_error / mean_commanded_norm`.
    pub tracking_ratio: f64,
    /// Largest `‖Δj‖` produced from a zero displacement, radians.
    pub max_zero_drift: f64,
    /// Largest self-collision loss among predicted poses.
    pub max_self_collision: f64,
    /// 95th percentile of the self-collision loss at the unadapted
    /// configurations, i.e. the poses an untrained net would produce.
    pub baseline_collision_p95: f64,
}

/// Evaluates `net` on `count` freshly drawn configuration/displacement
/// pairs; use a seed disjoint from training for a held-out measurement.
pub fn evaluate_adaptation(
    net: &AdaptationNet,
    store: &ParamStore,
    model: &GripperModel,
    ctx: &CollisionContext,
    count: usize,
    seed: u64,
) -> Result<EvalReport> {
    net.validate(store)?;
    let dist = Normal::new(0.0, TARGET_SIGMA)
        .map_err(|e| Error::Config(format!("target sigma: {e}")))?;
    let limits = model.limits();
    let zero = DVector::zeros(6 * model.num_fingers());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(count);
    let mut baseline = Vec::with_capacity(count);
    let mut err_sum = 0.0;
    let mut cmd_sum = 0.0;
    let mut max_zero_drift = 0.0_f64;
    let mut max_self_collision = 0.0_f64;
    for _ in 0..count {
        let q = random_free_config(model, ctx, &limits, &mut rng)?;
        let target = perturbed_config(model, &q, &dist, &mut rng);
        let keypoints = finger_points(model, &q);
        let displacements = finger_points(model, &target) - &keypoints;
        let dj = adapt_forward(net, store, &q, &keypoints, &displacements);
        if dj.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("adaptation net produced a non-finite change".into()));
        }
        let adapted = model.clamp_joints(&offset_state(&q, &dj)).0;
        let tracking_error =
            (finger_points(model, &adapted) - &keypoints - &displacements).norm();
        let commanded_norm = displacements.norm();
        let self_collision = self_collision_loss(model, ctx, &adapted).0;
        baseline.push(self_collision_loss(model, ctx, &q).0);
        let drift = adapt_forward(net, store, &q, &keypoints, &zero).norm();
        err_sum += tracking_error;
        cmd_sum += commanded_norm;
        max_zero_drift = max_zero_drift.max(drift);
        max_self_collision = max_self_collision.max(self_collision);
        samples.push(EvalSample {
            tracking_error,
            commanded_norm,
            self_collision,
            joint_change_norm: dj.norm(),
        });
    }
    let n = count.max(1) as f64;
    let mean_tracking_error = err_sum / n;
    let mean_commanded_norm = cmd_sum / n;
    baseline.sort_by(f64::total_cmp);
    let baseline_collision_p95 = if baseline.is_empty() {
        0.0
    } else {
        baseline[((baseline.len() - 1) as f64 * 0.95).ceil() as usize]
    };
    Ok(EvalReport {
        samples,
        mean_tracking_error,
        mean_commanded_norm,
        tracking_ratio: if mean_commanded_norm > 0.0 {
            mean_tracking_error / mean_commanded_norm
        } else {
            0.0
        },
        max_zero_drift,
        max_self_collision,
        baseline_collision_p95,
    })
}

/// Result of an optimization-baseline solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    /// The joint change found.
    pub dj: DVector<f64>,
    /// Final objective value; nonzero residuals indicate an unreachable
    /// target.
    pub loss: f64,
    /// Descent iterations actually taken.
    pub iters: usize,
}

fn descend(
    mut objective: impl FnMut(&DVector<f64>) -> (f64, DVector<f64>),
    dof: usize,
    iters: usize,
    step: f64,
) -> SolveOutcome {
    let mut dj = DVector::zeros(dof);
    let (mut loss, mut grad) = objective(&dj);
    let mut taken = 0;
    for _ in 0..iters {
        if grad.iter().all(|g| *g == 0.0) {
            break;
        }
        let mut scale = step;
        let mut accepted = None;
        while scale > 1e-12 {
            let candidate = &dj - &grad * scale;
            let (cand_loss, cand_grad) = objective(&candidate);
            if cand_loss <= loss {
                accepted = Some((candidate, cand_loss, cand_grad));
                break;
            }
            scale *= 0.5;
        }
        let Some((next, next_loss, next_grad)) = accepted else { break };
        dj = next;
        loss = next_loss;
        grad = next_grad;
        taken += 1;
    }
    SolveOutcome { dj, loss, iters: taken }
}

/// First-order descent on the tracking objective alone, starting from
/// `Δj = 0`. The step halves whenever it would increase the objective; a
/// zero commanded displacement is a stationary start and returns `Δj = 0`
/// exactly.
pub fn ob_ik_solve(
    model: &GripperModel,
    q: &JointState,
    displacements: &DVector<f64>,
    iters: usize,
    step: f64,
) -> SolveOutcome {
    descend(
        |dj| cycle_point_loss(model, q, dj, displacements),
        model.dof(),
        iters,
        step,
    )
}

/// As [`ob_ik_solve`], but descending the combined objective that adds the
/// self-collision penalty.
pub fn ob_ik_sc_solve(
    model: &GripperModel,
    ctx: &CollisionContext,
    q: &JointState,
    displacements: &DVector<f64>,
    iters: usize,
    step: f64,
) -> SolveOutcome {
    descend(
        |dj| total_adaptation_loss(model, ctx, q, dj, displacements),
        model.dof(),
        iters,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{
        overlapping_box_gripper, planar_two_finger, single_revolute_finger, spatial_three_finger,
        two_link_chain,
    };

    fn fd_gradient(mut f: impl FnMut(&DVector<f64>) -> f64, x: &DVector<f64>) -> DVector<f64> {
        let h = 1e-6;
        let mut g = DVector::zeros(x.len());
        for i in 0..x.len() {
            let mut plus = x.clone();
            plus[i] += h;
            let mut minus = x.clone();
            minus[i] -= h;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    /// The additive floor covers central-difference roundoff, which scales
    /// with the objective magnitude: at h = 1e-6 the cancellation noise is
    /// about 2e-10 per unit of `value`.
    fn assert_gradients_close(analytic: &DVector<f64>, fd: &DVector<f64>, value: f64, context: &str) {
        let denom = analytic.norm().max(fd.norm());
        let err = (analytic - fd).norm();
        let tol = 1e-6 * denom + 2e-9 * value.abs() + 1e-12;
        assert!(
            err <= tol,
            "{context}: gradient mismatch, |analytic - fd| = {err:.3e}, denom = {denom:.3e}\nanalytic: {analytic:?}\nfd: {fd:?}"
        );
    }

    /// Interior config: margin away from every joint limit so the clamp
    /// never activates during finite differencing.
    fn interior_config(model: &GripperModel, rng: &mut impl Rng) -> JointState {
        JointState::from_vec(
            model
                .limits()
                .iter()
                .map(|&(lo, hi)| {
                    let span = hi - lo;
                    rng.gen_range(lo + 0.2 * span..hi - 0.2 * span)
                })
                .collect(),
        )
    }

    /// The collision loss must be smooth across a finite-difference stencil
    /// around `q`: no sample may be able to cross a hull boundary, and no
    /// penetrating sample may switch its nearest face plane, within the
    /// parameter motion the stencil applies. Plane distances that do not
    /// respond to any joint can never cross and are ignored.
    fn fd_safe(model: &GripperModel, ctx: &CollisionContext, q: &JointState) -> bool {
        let cushion = 8e-6;
        let local = model.fk_local(q);
        for m in 0..model.links.len() {
            for l in 0..model.links.len() {
                if l == m || ctx.is_excluded(m, l) {
                    continue;
                }
                let into_l = local[l].inverse() * local[m];
                let rot_l = local[l].rotation.inverse();
                for s in &ctx.samples[m] {
                    let p_local = into_l * s;
                    let p = local[m] * s;
                    let jm = model.point_jacobian(&local, m, &p);
                    let jl = model.point_jacobian(&local, l, &p);
                    let motion: Vec<Vector3<f64>> = (0..model.dof())
                        .map(|c| {
                            rot_l
                                * Vector3::new(
                                    jm[(0, c)] - jl[(0, c)],
                                    jm[(1, c)] - jl[(1, c)],
                                    jm[(2, c)] - jl[(2, c)],
                                )
                        })
                        .collect();
                    let faces = &ctx.hulls[l].faces;
                    let dist_rate = |fi: usize| {
                        let f = &faces[fi];
                        let d = f.offset - f.normal.dot(&p_local.coords);
                        let rate = motion
                            .iter()
                            .map(|v| f.normal.dot(v).abs())
                            .fold(0.0, f64::max);
                        (d, rate)
                    };
                    let i1 = (0..faces.len())
                        .min_by(|&a, &b| dist_rate(a).0.total_cmp(&dist_rate(b).0))
                        .unwrap();
                    let (d1, rate1) = dist_rate(i1);
                    if d1.abs() < rate1 * cushion {
                        return false;
                    }
                    if d1 > 0.0 {
                        let f1 = &faces[i1];
                        for (i, f) in faces.iter().enumerate() {
                            let same_plane = (f.normal.into_inner() - f1.normal.into_inner())
                                .norm()
                                < 1e-9
                                && (f.offset - f1.offset).abs() < 1e-9;
                            if i == i1 || same_plane {
                                continue;
                            }
                            let (d, rate) = dist_rate(i);
                            if d - d1 < (rate + rate1) * cushion {
                                return false;
                            }
                        }
                    }
                }
            }
        }
        true
    }

    #[test]
    fn untrained_net_predicts_zero() {
        let model = planar_two_finger();
        let net = AdaptationNet::new(&model);
        assert_eq!(net.input_dim(), 4 + 24);
        assert_eq!(net.output_dim(), 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        net.init(&mut store, &mut rng).unwrap();
        let q = JointState::from_vec(vec![0.3, -0.1, 0.8, 0.2]);
        let keypoints = finger_points(&model, &q);
        let displacements = DVector::from_fn(12, |i, _| 0.01 * (i as f64 + 1.0));
        let dj = adapt_forward(&net, &store, &q, &keypoints, &displacements);
        assert_eq!(dj.len(), 4);
        assert!(dj.iter().all(|v| *v == 0.0), "zero-initialized head must predict no change");
    }

    #[test]
    fn cycle_loss_vanishes_at_identity() {
        let model = planar_two_finger();
        let q = JointState::from_vec(vec![0.4, 0.2, -0.1, 0.9]);
        let (loss, grad) =
            cycle_point_loss(&model, &q, &DVector::zeros(4), &DVector::zeros(12));
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cycle_loss_matches_chord_oracle() {
        let model = single_revolute_finger(1.0);
        let q = JointState::from_vec(vec![0.0]);
        let dj = DVector::from_vec(vec![0.1]);
        let chord = |radius: f64| {
            let (s, c) = 0.1_f64.sin_cos();
            Vector3::new(radius * (c - 1.0), radius * s, 0.0)
        };
        let mut displacements = DVector::zeros(6);
        displacements.fixed_rows_mut::<3>(0).copy_from(&chord(0.5));
        displacements.fixed_rows_mut::<3>(3).copy_from(&chord(1.0));
        let (loss, _) = cycle_point_loss(&model, &q, &dj, &displacements);
        assert!(loss <= 1e-12, "chord displacement should be tracked exactly, loss = {loss:.3e}");
    }

    #[test]
    fn cycle_gradient_matches_finite_differences() {
        for (model, count) in [(planar_two_finger(), 100), (spatial_three_finger(), 20)] {
            let c = model.dof();
            let k6 = 6 * model.num_fingers();
            let mut rng = ChaCha20Rng::seed_from_u64(42);
            for trial in 0..count {
                let q = interior_config(&model, &mut rng);
                let dj = DVector::from_fn(c, |_, _| rng.gen_range(-0.03..0.03));
                let displacements = DVector::from_fn(k6, |_, _| rng.gen_range(-0.02..0.02));
                let (value, analytic) = cycle_point_loss(&model, &q, &dj, &displacements);
                let fd = fd_gradient(
                    |d| cycle_point_loss(&model, &q, d, &displacements).0,
                    &dj,
                );
                assert_gradients_close(
                    &analytic,
                    &fd,
                    value,
                    &format!("{} trial {trial}", model.name),
                );
            }
        }
    }

    #[test]
    fn clamped_components_have_zero_gradient() {
        let model = planar_two_finger();
        let q = JointState::from_vec(vec![1.55, 0.3, 0.2, 0.1]);
        let dj = DVector::from_vec(vec![0.2, 0.0, 0.0, 0.0]);
        let displacements = DVector::from_fn(12, |i, _| 0.005 * (i % 3) as f64);
        let (loss, grad) = cycle_point_loss(&model, &q, &dj, &displacements);
        assert_eq!(grad[0], 0.0, "projected component must not leak gradient");
        let clamped = JointState::from_vec(vec![1.6, 0.3, 0.2, 0.1]);
        let start = finger_points(&model, &q);
        let manual = 0.5
            * (finger_points(&model, &clamped) - &start - &displacements).norm_squared();
        assert_eq!(loss, manual, "loss must be evaluated at the projected configuration");
    }

    #[test]
    fn collision_context_shape_and_exclusions() {
        let model = spatial_three_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        assert_eq!(ctx.hulls.len(), model.links.len());
        assert!(ctx.samples.iter().all(|s| s.len() == SAMPLES_PER_LINK));
        for (li, link) in model.links.iter().enumerate() {
            if let Some(j) = link.parent_joint {
                let parent = model.joints[j].parent_link;
                assert!(ctx.is_excluded(li, parent) && ctx.is_excluded(parent, li));
            }
        }
        for (a, b) in ctx.excluded_pairs() {
            assert!(ctx.is_excluded(b, a), "exclusion list must be symmetric");
        }
        // Fingers attach to the palm independently: cross-finger pairs stay.
        assert!(!ctx.is_excluded(2, 4));
        let again = CollisionContext::build(&model).unwrap();
        assert_eq!(ctx.samples, again.samples, "context sampling must be deterministic");
    }

    #[test]
    fn self_collision_zero_at_rest() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let (loss, grad) = self_collision_loss(&model, &ctx, &JointState::zeros(&model));
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn self_collision_matches_box_oracle() {
        let model = overlapping_box_gripper();
        let ctx = CollisionContext::build(&model).unwrap();
        let q = JointState::from_vec(vec![0.0, 0.8]);
        let (loss, _) = self_collision_loss(&model, &ctx, &q);

        // Unit cubes at x = 0.0 and x = 0.8: depth inside either cube is
        // the smallest distance to one of its six axis-aligned faces.
        let cube_depth = |p: &Point3<f64>| {
            let d = [0.5 - p.x.abs(), 0.5 - p.y.abs(), 0.5 - p.z.abs()];
            if d.iter().all(|v| *v > 0.0) {
                d.iter().cloned().fold(f64::INFINITY, f64::min)
            } else {
                0.0
            }
        };
        let mut expected = 0.0;
        for s in &ctx.samples[1] {
            expected += cube_depth(&Point3::new(s.x - 0.8, s.y, s.z));
        }
        for s in &ctx.samples[2] {
            expected += cube_depth(&Point3::new(s.x + 0.8, s.y, s.z));
        }
        assert!(expected > 0.0, "the oracle must see the 0.2 overlap");
        assert!(
            (loss - expected).abs() <= 1e-6,
            "loss {loss:.9} vs analytic {expected:.9}"
        );
    }

    #[test]
    fn self_collision_gradient_matches_finite_differences_prismatic() {
        let model = overlapping_box_gripper();
        let ctx = CollisionContext::build(&model).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let mut checked = 0;
        let mut draws = 0;
        while checked < 40 && draws < 4000 {
            draws += 1;
            let a = rng.gen_range(-0.4..0.4);
            let q = JointState::from_vec(vec![a, a + rng.gen_range(0.25..0.75)]);
            if !fd_safe(&model, &ctx, &q) {
                continue;
            }
            let (loss, analytic) = self_collision_loss(&model, &ctx, &q);
            assert!(loss > 0.0, "overlap range should collide");
            let fd = fd_gradient(
                |d| self_collision_loss(&model, &ctx, &JointState { q: d.clone() }).0,
                &q.q,
            );
            assert_gradients_close(&analytic, &fd, loss, &format!("boxes at {:?}", q.q.as_slice()));
            checked += 1;
        }
        assert!(checked >= 40, "only {checked} safe configurations in {draws} draws");
    }

    #[test]
    fn self_collision_gradient_matches_finite_differences_revolute() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut checked = 0;
        let mut colliding = 0;
        let mut draws = 0;
        while checked < 100 && draws < 10_000 {
            draws += 1;
            let q = JointState::from_vec(
                (0..4).map(|_| 1.5 + rng.gen_range(-0.06..0.06)).collect(),
            );
            if !fd_safe(&model, &ctx, &q) {
                continue;
            }
            let (loss, analytic) = self_collision_loss(&model, &ctx, &q);
            if loss > 0.0 {
                colliding += 1;
            }
            let fd = fd_gradient(
                |d| self_collision_loss(&model, &ctx, &JointState { q: d.clone() }).0,
                &q.q,
            );
            assert_gradients_close(&analytic, &fd, loss, &format!("fingers at {:?}", q.q.as_slice()));
            checked += 1;
        }
        assert!(checked >= 100, "only {checked} safe configurations in {draws} draws");
        assert!(colliding >= 50, "closed-hand range should mostly collide, got {colliding}/100");
    }

    #[test]
    fn separated_links_scoreless() {
        let model = overlapping_box_gripper();
        let ctx = CollisionContext::build(&model).unwrap();
        let q = JointState::from_vec(vec![-1.5, 1.5]);
        let (loss, grad) = self_collision_loss(&model, &ctx, &q);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn adjacent_pair_excluded() {
        let model = two_link_chain(0.3, 0.3);
        let ctx = CollisionContext::build(&model).unwrap();
        let q = JointState::from_vec(vec![0.0, 3.0]);
        // Folded flat, the lower link geometrically penetrates the upper
        // one; as a parent/child pair it must not be scored.
        let local = model.fk_local(&q);
        let into_upper = local[1].inverse() * local[2];
        let max_depth = ctx.samples[2]
            .iter()
            .map(|s| signed_distance_hull_face(&ctx.hulls[1], &(into_upper * s)).0)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(max_depth > 1e-4, "fold should overlap the parent link, depth {max_depth:.3e}");
        let (loss, _) = self_collision_loss(&model, &ctx, &q);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn total_loss_is_exact_sum() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let q = JointState::from_vec(vec![1.5, 1.5, 1.45, 1.5]);
        let dj = DVector::from_vec(vec![0.03, -0.02, 0.01, 0.2]);
        let displacements = DVector::from_fn(12, |i, _| 0.002 * ((i % 5) as f64 - 2.0));
        let (total, total_grad) = total_adaptation_loss(&model, &ctx, &q, &dj, &displacements);
        let (point, point_grad) = cycle_point_loss(&model, &q, &dj, &displacements);
        let (clamped, moved) = model.clamp_joints(&offset_state(&q, &dj));
        let (selfc, mut self_grad) = self_collision_loss(&model, &ctx, &clamped);
        for &c in &moved {
            self_grad[c] = 0.0;
        }
        assert!(selfc > 0.0, "closed fingers should collide");
        assert!(!moved.is_empty(), "dj should push a joint past its limit");
        assert_eq!(total, point + selfc);
        assert_eq!(total_grad, point_grad + self_grad);
    }

    #[test]
    fn ob_ik_recovers_rotation() {
        let model = single_revolute_finger(1.0);
        let q = JointState::from_vec(vec![0.0]);
        let (s, c) = 0.1_f64.sin_cos();
        let mut displacements = DVector::zeros(6);
        displacements
            .fixed_rows_mut::<3>(0)
            .copy_from(&Vector3::new(0.5 * (c - 1.0), 0.5 * s, 0.0));
        displacements
            .fixed_rows_mut::<3>(3)
            .copy_from(&Vector3::new(c - 1.0, s, 0.0));
        let outcome = ob_ik_solve(&model, &q, &displacements, OB_IK_ITERS, OB_IK_STEP);
        assert!(
            (outcome.dj[0] - 0.1).abs() <= 1e-4,
            "recovered {} instead of 0.1",
            outcome.dj[0]
        );
    }

    #[test]
    fn ob_ik_zero_displacement_is_exact() {
        let model = planar_two_finger();
        let q = JointState::from_vec(vec![0.3, 0.2, 0.5, -0.1]);
        let outcome = ob_ik_solve(&model, &q, &DVector::zeros(12), OB_IK_ITERS, OB_IK_STEP);
        assert!(outcome.dj.iter().all(|v| *v == 0.0));
        assert_eq!(outcome.loss, 0.0);
        assert_eq!(outcome.iters, 0);
    }

    #[test]
    fn ob_ik_feasible_target_converges() {
        let model = two_link_chain(0.3, 0.2);
        let q = JointState::from_vec(vec![0.3, 0.4]);
        let target = JointState::from_vec(vec![0.5, 0.25]);
        let displacements = finger_points(&model, &target) - finger_points(&model, &q);
        let outcome = ob_ik_solve(&model, &q, &displacements, 10_000, OB_IK_STEP);
        assert!(
            outcome.loss < 1e-10,
            "feasible target should be reached, residual {:.3e}",
            outcome.loss
        );
    }

    #[test]
    fn ob_ik_boundary_matches_grid_search() {
        let model = single_revolute_finger(1.0);
        let q = JointState::from_vec(vec![0.3]);
        // Tip target pushed off the unit circle: radius 1.4 at angle 0.9.
        let (s, c) = 0.9_f64.sin_cos();
        let tip = finger_points(&model, &q);
        let mut displacements = DVector::zeros(6);
        displacements[3] = 1.4 * c - tip[3];
        displacements[4] = 1.4 * s - tip[4];
        displacements[5] = -tip[5];
        let outcome = ob_ik_solve(&model, &q, &displacements, 2_000, OB_IK_STEP);
        let mut best = (f64::INFINITY, 0.0);
        let step = 2e-4;
        let mut dj = -3.3;
        while dj <= 2.7 {
            let loss =
                cycle_point_loss(&model, &q, &DVector::from_vec(vec![dj]), &displacements).0;
            if loss < best.0 {
                best = (loss, dj);
            }
            dj += step;
        }
        assert!(
            outcome.loss <= best.0 + 1e-9,
            "solver residual {:.6e} worse than grid {:.6e}",
            outcome.loss,
            best.0
        );
        assert!(
            (outcome.dj[0] - best.1).abs() <= step,
            "solver at {} but grid minimum at {}",
            outcome.dj[0],
            best.1
        );
        assert!(outcome.loss > 1e-4, "an off-workspace target must leave a residual");
    }

    #[test]
    fn training_budget_zero_is_identity() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let net = AdaptationNet::new(&model);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        net.init(&mut store, &mut rng).unwrap();
        let before: Vec<(String, DMatrix<f64>)> = net
            .param_names()
            .iter()
            .map(|n| (n.clone(), store.get(n).unwrap().clone()))
            .collect();
        let cfg = TrainConfig { updates: 0, ..TrainConfig::default() };
        let curve = train_adaptation(&net, &mut store, &model, &ctx, &cfg).unwrap();
        assert!(curve.is_empty());
        for (name, value) in &before {
            assert_eq!(store.get(name).unwrap(), value);
        }
    }

    #[test]
    fn short_training_improves_tracking() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let net = AdaptationNet::new(&model);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        net.init(&mut store, &mut rng).unwrap();
        let untrained = evaluate_adaptation(&net, &store, &model, &ctx, 64, 99).unwrap();
        assert!(
            (untrained.tracking_ratio - 1.0).abs() < 1e-12,
            "an identity net tracks nothing: ratio {}",
            untrained.tracking_ratio
        );
        assert_eq!(untrained.max_zero_drift, 0.0);
        let cfg = TrainConfig { updates: 500, batch: 32, seed: 7, ..TrainConfig::default() };
        let curve = train_adaptation(&net, &mut store, &model, &ctx, &cfg).unwrap();
        assert_eq!(curve.len(), 500);
        let head: f64 = curve[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = curve[480..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "loss should at least halve: {head:.3e} -> {tail:.3e}");
        let trained = evaluate_adaptation(&net, &store, &model, &ctx, 64, 99).unwrap();
        assert!(
            trained.tracking_ratio < 0.9 * untrained.tracking_ratio,
            "tracking should improve: {} -> {}",
            untrained.tracking_ratio,
            trained.tracking_ratio
        );
    }

    #[test]
    fn diverged_training_reports_numeric_error() {
        let model = planar_two_finger();
        let ctx = CollisionContext::build(&model).unwrap();
        let net = AdaptationNet::new(&model);
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        net.init(&mut store, &mut rng).unwrap();
        store.get_mut("adapt.w3").unwrap()[(0, 0)] = f64::NAN;
        let cfg = TrainConfig { updates: 1, batch: 4, ..TrainConfig::default() };
        let err = train_adaptation(&net, &mut store, &model, &ctx, &cfg).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)), "got {err:?}");
    }
}
