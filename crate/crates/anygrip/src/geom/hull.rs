//! Convex hulls in arbitrary dimension via randomized incremental
//! (beneath-beyond) construction, plus a 3-D wrapper used for link
//! collision volumes and signed point-hull distances.
//!
//! Inputs are perturbed by a deterministic per-index jitter (~1e-10 of the
//! data scale) so that constructed degeneracies — box corners, symmetric
//! wrench sets — land in general position. Facet planes are reported from
//! the jittered coordinates; original points satisfy them to ~1e-9 of the
//! data scale.

use nalgebra::{DVector, Point3, Unit, Vector3};

use crate::{Error, Result};

/// One facet of a d-dimensional hull: `d` vertex indices into the input
/// point set and an outward plane `normal . x <= offset`.
#[derive(Debug, Clone)]
pub struct Facet {
    pub vertices: Vec<usize>,
    pub normal: DVector<f64>,
    pub offset: f64,
}

const JITTER_REL: f64 = 1e-10;
const VISIBLE_REL: f64 = 1e-12;
const DEGENERATE_REL: f64 = 1e-9;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Deterministic jitter in [-0.5, 0.5) for coordinate `k` of point `i`.
fn jitter_unit(i: usize, k: usize) -> f64 {
    let h = splitmix64((i as u64) << 32 | k as u64);
    (h >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

/// Orthonormal basis of the affine span of `pts[f[0..]] - pts[f[0]]` via
/// modified Gram-Schmidt. Returns vectors with norm >= tol only.
fn edge_basis(pts: &[DVector<f64>], verts: &[usize], tol: f64) -> Vec<DVector<f64>> {
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(verts.len() - 1);
    for &v in &verts[1..] {
        let mut e = &pts[v] - &pts[verts[0]];
        for b in &basis {
            let d = e.dot(b);
            e -= b * d;
        }
        let n = e.norm();
        if n > tol {
            basis.push(e / n);
        }
    }
    basis
}

/// Unit normal of the hyperplane through the facet's (jittered) vertices:
/// the largest-residual coordinate axis re-orthogonalized against the
/// facet's edge span. Returns `None` when the vertices are affinely
/// degenerate at the given tolerance.
fn facet_plane(pts: &[DVector<f64>], verts: &[usize], dim: usize, tol: f64) -> Option<(DVector<f64>, f64)> {
    let basis = edge_basis(pts, verts, tol);
    if basis.len() + 1 != dim {
        return None;
    }
    let mut best: Option<DVector<f64>> = None;
    let mut best_norm = tol;
    for axis in 0..dim {
        let mut e = DVector::zeros(dim);
        e[axis] = 1.0;
        for b in &basis {
            let d = e.dot(b);
            e -= b * d;
        }
        let n = e.norm();
        if n > best_norm {
            best_norm = n;
            best = Some(e / n);
        }
    }
    let normal = best?;
    let offset = normal.dot(&pts[verts[0]]);
    Some((normal, offset))
}

/// Convex hull of `points` in `R^dim` by incremental insertion. Facet
/// normals point outward. Errors with [`Error::Geometry`] when the input
/// does not span `dim` dimensions.
pub fn incremental_hull(points: &[DVector<f64>], dim: usize) -> Result<Vec<Facet>> {
    if dim < 2 {
        return Err(Error::Geometry("hull dimension must be at least 2".into()));
    }
    if points.len() < dim + 1 {
        return Err(Error::Geometry(format!(
            "degenerate hull: {} points cannot span {} dimensions",
            points.len(),
            dim
        )));
    }
    let scale = points
        .iter()
        .flat_map(|p| p.iter().map(|v| v.abs()))
        .fold(0.0_f64, f64::max)
        .max(1e-12);
    let jittered: Vec<DVector<f64>> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            DVector::from_iterator(dim, (0..dim).map(|k| p[k] + scale * JITTER_REL * jitter_unit(i, k)))
        })
        .collect();
    let degen_tol = scale * DEGENERATE_REL;
    let visible_tol = scale * VISIBLE_REL;

    // Greedy affinely independent seed simplex: start from point 0, then
    // repeatedly take the point with the largest residual w.r.t. the span
    // built so far.
    let mut simplex = vec![0usize];
    let mut basis: Vec<DVector<f64>> = Vec::new();
    while simplex.len() < dim + 1 {
        let mut best = (degen_tol, usize::MAX, DVector::zeros(dim));
        for (i, p) in jittered.iter().enumerate() {
            if simplex.contains(&i) {
                continue;
            }
            let mut e = p - &jittered[simplex[0]];
            for b in &basis {
                let d = e.dot(b);
                e -= b * d;
            }
            let n = e.norm();
            if n > best.0 {
                best = (n, i, e);
            }
        }
        if best.1 == usize::MAX {
            return Err(Error::Geometry(format!(
                "degenerate hull: affine rank {} < {}",
                simplex.len() - 1,
                dim
            )));
        }
        basis.push(best.2 / best.0);
        simplex.push(best.1);
    }

    let mut interior = DVector::zeros(dim);
    for &v in &simplex {
        interior += &jittered[v];
    }
    interior /= (dim + 1) as f64;

    let orient = |verts: &[usize]| -> Result<Facet> {
        let (mut normal, mut offset) = facet_plane(&jittered, verts, dim, degen_tol)
            .ok_or_else(|| Error::Geometry("degenerate hull facet".into()))?;
        let side = normal.dot(&interior) - offset;
        if side > 0.0 {
            normal = -normal;
            offset = -offset;
        }
        Ok(Facet {
            vertices: verts.to_vec(),
            normal,
            offset,
        })
    };

    let mut facets: Vec<Option<Facet>> = Vec::new();
    for drop in 0..simplex.len() {
        let verts: Vec<usize> = simplex
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != drop)
            .map(|(_, &v)| v)
            .collect();
        facets.push(Some(orient(&verts)?));
    }

    let mut insert_order: Vec<usize> = (0..points.len()).filter(|i| !simplex.contains(i)).collect();
    insert_order.sort_unstable();

    for p_idx in insert_order {
        let p = &jittered[p_idx];
        let visible: Vec<usize> = facets
            .iter()
            .enumerate()
            .filter_map(|(fi, f)| {
                f.as_ref()
                    .filter(|f| f.normal.dot(p) - f.offset > visible_tol)
                    .map(|_| fi)
            })
            .collect();
        if visible.is_empty() {
            continue;
        }
        // Horizon ridges: sub-tuples of visible facets seen exactly once.
        let mut ridges: Vec<Vec<usize>> = Vec::new();
        for &fi in &visible {
            let verts = &facets[fi].as_ref().unwrap().vertices;
            for drop in 0..verts.len() {
                let mut ridge: Vec<usize> = verts
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != drop)
                    .map(|(_, &v)| v)
                    .collect();
                ridge.sort_unstable();
                ridges.push(ridge);
            }
        }
        ridges.sort();
        let mut horizon: Vec<Vec<usize>> = Vec::new();
        let mut i = 0;
        while i < ridges.len() {
            let mut j = i + 1;
            while j < ridges.len() && ridges[j] == ridges[i] {
                j += 1;
            }
            if j - i == 1 {
                horizon.push(ridges[i].clone());
            }
            i = j;
        }
        for &fi in &visible {
            facets[fi] = None;
        }
        for ridge in horizon {
            let mut verts = ridge;
            verts.push(p_idx);
            facets.push(Some(orient(&verts)?));
        }
    }

    Ok(facets.into_iter().flatten().collect())
}

/// Triangular face of a 3-D hull; `indices` reference [`ConvexHull::vertices`].
#[derive(Debug, Clone)]
pub struct HullFace {
    pub indices: [usize; 3],
    pub normal: Unit<Vector3<f64>>,
    pub offset: f64,
}

/// Watertight 3-D convex hull with outward face planes `n . x <= offset`.
#[derive(Debug, Clone)]
pub struct ConvexHull {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<HullFace>,
    pub centroid: Point3<f64>,
}

/// Convex hull of a 3-D point set. Errors on inputs with affine rank < 3.
pub fn convex_hull(points: &[Point3<f64>]) -> Result<ConvexHull> {
    let dpoints: Vec<DVector<f64>> = points
        .iter()
        .map(|p| DVector::from_column_slice(p.coords.as_slice()))
        .collect();
    let facets = incremental_hull(&dpoints, 3)?;
    let mut used: Vec<usize> = facets.iter().flat_map(|f| f.vertices.iter().copied()).collect();
    used.sort_unstable();
    used.dedup();
    let remap: std::collections::BTreeMap<usize, usize> =
        used.iter().enumerate().map(|(new, &old)| (old, new)).collect();
    let vertices: Vec<Point3<f64>> = used.iter().map(|&i| points[i]).collect();
    let faces = facets
        .iter()
        .map(|f| HullFace {
            indices: [remap[&f.vertices[0]], remap[&f.vertices[1]], remap[&f.vertices[2]]],
            normal: Unit::new_normalize(Vector3::new(f.normal[0], f.normal[1], f.normal[2])),
            offset: f.offset,
        })
        .collect();
    let mut centroid = Vector3::zeros();
    for v in &vertices {
        centroid += v.coords;
    }
    centroid /= vertices.len() as f64;
    Ok(ConvexHull {
        vertices,
        faces,
        centroid: Point3::from(centroid),
    })
}

/// Signed distance from a point to a hull: positive inside (distance to the
/// boundary), negative outside (largest face-plane violation).
pub fn signed_distance_hull(hull: &ConvexHull, p: &Point3<f64>) -> f64 {
    signed_distance_hull_face(hull, p).0
}

/// As [`signed_distance_hull`], also returning the index of the active face.
pub fn signed_distance_hull_face(hull: &ConvexHull, p: &Point3<f64>) -> (f64, usize) {
    let mut best = f64::INFINITY;
    let mut face = 0;
    for (i, f) in hull.faces.iter().enumerate() {
        let d = f.offset - f.normal.dot(&p.coords);
        if d < best {
            best = d;
            face = i;
        }
    }
    (best, face)
}

/// Minimum facet offset of the convex hull of a point set in `R^dim`,
/// i.e. the radius of the largest origin-centered ball contained in the
/// hull, or a negative value when the origin lies outside.
pub fn origin_ball_radius(points: &[DVector<f64>], dim: usize) -> Result<f64> {
    let facets = incremental_hull(points, dim)?;
    Ok(facets
        .iter()
        .map(|f| f.offset)
        .fold(f64::INFINITY, f64::min))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn cube_points() -> Vec<Point3<f64>> {
        let mut pts = Vec::new();
        for &x in &[-1.0, 1.0] {
            for &y in &[-1.0, 1.0] {
                for &z in &[-1.0, 1.0] {
                    pts.push(Point3::new(x, y, z));
                }
            }
        }
        pts
    }

    #[test]
    fn cube_hull_has_all_corners() {
        let hull = convex_hull(&cube_points()).unwrap();
        assert_eq!(hull.vertices.len(), 8);
        assert_eq!(hull.faces.len(), 12);
        // Every input corner satisfies every face within the jitter budget.
        for p in cube_points() {
            for f in &hull.faces {
                assert!(f.normal.dot(&p.coords) - f.offset <= 1e-9);
            }
        }
    }

    #[test]
    fn interior_points_are_dropped() {
        let mut pts = cube_points();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..50 {
            pts.push(Point3::new(
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
                rng.gen_range(-0.9..0.9),
            ));
        }
        let hull = convex_hull(&pts).unwrap();
        assert_eq!(hull.vertices.len(), 8);
    }

    #[test]
    fn signed_distance_cube() {
        let hull = convex_hull(&cube_points()).unwrap();
        assert_relative_eq!(signed_distance_hull(&hull, &Point3::origin()), 1.0, epsilon = 1e-9);
        assert_relative_eq!(
            signed_distance_hull(&hull, &Point3::new(0.5, 0.0, 0.0)),
            0.5,
            epsilon = 1e-9
        );
        assert_relative_eq!(
            signed_distance_hull(&hull, &Point3::new(2.5, 0.0, 0.0)),
            -1.5,
            epsilon = 1e-9
        );
    }

    #[test]
    fn signed_distance_matches_halfspace_oracle_on_random_queries() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let pts: Vec<Point3<f64>> = (0..40)
            .map(|_| {
                Point3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let hull = convex_hull(&pts).unwrap();
        for _ in 0..100 {
            let q = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let d = signed_distance_hull(&hull, &q);
            let oracle = hull
                .faces
                .iter()
                .map(|f| f.offset - f.normal.dot(&q.coords))
                .fold(f64::INFINITY, f64::min);
            assert_relative_eq!(d, oracle, epsilon = 1e-12);
            // Inside iff all hull vertices "surround" it: cross-check via
            // membership in the half-space intersection.
            let inside = d >= 0.0;
            let member = hull
                .faces
                .iter()
                .all(|f| f.normal.dot(&q.coords) - f.offset <= 1e-12);
            assert_eq!(inside, member);
        }
    }

    #[test]
    fn signed_distance_is_lipschitz() {
        let hull = convex_hull(&cube_points()).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(23);
        for _ in 0..200 {
            let a = Point3::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
            );
            let step = Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
            );
            let b = a + step;
            let da = signed_distance_hull(&hull, &a);
            let db = signed_distance_hull(&hull, &b);
            assert!((da - db).abs() <= step.norm() + 1e-12);
        }
    }

    #[test]
    fn degenerate_input_is_an_error() {
        let flat: Vec<Point3<f64>> = (0..10)
            .map(|i| Point3::new(i as f64, (i * i) as f64, 0.0))
            .collect();
        assert!(matches!(convex_hull(&flat), Err(Error::Geometry(_))));
        let few = vec![Point3::origin(), Point3::new(1.0, 0.0, 0.0)];
        assert!(matches!(convex_hull(&few), Err(Error::Geometry(_))));
    }

    #[test]
    fn origin_ball_radius_of_cross_polytope() {
        // Unit cross-polytope in 4-D: facets are at distance 1/sqrt(4).
        let dim = 4;
        let mut pts = Vec::new();
        for k in 0..dim {
            for s in [-1.0, 1.0] {
                let mut v = DVector::zeros(dim);
                v[k] = s;
                pts.push(v);
            }
        }
        let r = origin_ball_radius(&pts, dim).unwrap();
        assert_relative_eq!(r, 0.5, epsilon = 1e-8);
    }

    #[test]
    fn origin_outside_gives_negative_radius() {
        let dim = 3;
        let pts: Vec<DVector<f64>> = cube_points()
            .iter()
            .map(|p| DVector::from_column_slice((p.coords + Vector3::new(5.0, 0.0, 0.0)).as_slice()))
            .collect();
        let r = origin_ball_radius(&pts, dim).unwrap();
        assert!(r < 0.0);
    }

    #[test]
    fn hull_is_watertight() {
        // Every edge of a 3-D hull must appear in exactly two faces.
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let pts: Vec<Point3<f64>> = (0..60)
            .map(|_| {
                let v = Vector3::new(
                    rng.gen_range(-1.0..1.0_f64),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                Point3::from(v.normalize() * rng.gen_range(0.5..1.0))
            })
            .collect();
        let hull = convex_hull(&pts).unwrap();
        let mut edge_count = std::collections::BTreeMap::new();
        for f in &hull.faces {
            for e in [(0, 1), (1, 2), (2, 0)] {
                let a = f.indices[e.0].min(f.indices[e.1]);
                let b = f.indices[e.0].max(f.indices[e.1]);
                *edge_count.entry((a, b)).or_insert(0) += 1;
            }
        }
        assert!(!edge_count.is_empty());
        for (&edge, &count) in &edge_count {
            assert_eq!(count, 2, "edge {edge:?} appears {count} times");
        }
        // Euler characteristic of a convex polytope surface: V - E + F = 2.
        let v = hull.vertices.len() as i64;
        let e = edge_count.len() as i64;
        let f = hull.faces.len() as i64;
        assert_eq!(v - e + f, 2);
    }
}
