//! Triangle meshes: storage, OBJ I/O, primitive constructors, closest-point
//! kernels, and area-weighted surface sampling.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Point3, Unit, Vector3};
use rand::Rng;

use crate::{Error, Result};

/// Indexed triangle mesh. Vertices are in the mesh's own local frame;
/// triangle winding is counter-clockwise seen from outside.
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    pub fn new(vertices: Vec<Point3<f64>>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        for tri in &triangles {
            for &i in tri {
                if i >= vertices.len() {
                    return Err(Error::Geometry(format!(
                        "triangle references vertex {} but mesh has {}",
                        i,
                        vertices.len()
                    )));
                }
            }
        }
        Ok(Self { vertices, triangles })
    }

    pub fn triangle(&self, idx: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.triangles[idx];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Unnormalized triangle normal (twice the area vector), CCW winding.
    pub fn triangle_normal_raw(&self, idx: usize) -> Vector3<f64> {
        let [a, b, c] = self.triangle(idx);
        (b - a).cross(&(c - a))
    }

    /// Unit outward normal of a triangle; degenerate triangles yield +z.
    pub fn triangle_normal(&self, idx: usize) -> Unit<Vector3<f64>> {
        let n = self.triangle_normal_raw(idx);
        Unit::try_new(n, 1e-18).unwrap_or_else(|| Unit::new_unchecked(Vector3::z()))
    }

    pub fn triangle_area(&self, idx: usize) -> f64 {
        0.5 * self.triangle_normal_raw(idx).norm()
    }

    pub fn surface_area(&self) -> f64 {
        (0..self.triangles.len()).map(|i| self.triangle_area(i)).sum()
    }

    pub fn aabb(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    /// Uniformly scales all vertex coordinates (used for unit conversion).
    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.vertices {
            v.coords *= factor;
        }
    }

    /// Draws `count` points uniformly by surface area. Returns the points
    /// together with the index of the triangle each was drawn from.
    pub fn sample_surface<R: Rng>(&self, count: usize, rng: &mut R) -> Vec<(Point3<f64>, usize)> {
        let areas: Vec<f64> = (0..self.triangles.len()).map(|i| self.triangle_area(i)).collect();
        let total: f64 = areas.iter().sum();
        let mut out = Vec::with_capacity(count);
        if total <= 0.0 || self.triangles.is_empty() {
            return out;
        }
        let mut cumulative = Vec::with_capacity(areas.len());
        let mut acc = 0.0;
        for a in &areas {
            acc += a;
            cumulative.push(acc);
        }
        for _ in 0..count {
            let t = rng.gen_range(0.0..total);
            let tri = cumulative.partition_point(|&c| c <= t).min(self.triangles.len() - 1);
            let [a, b, c] = self.triangle(tri);
            let (mut u, mut v) = (rng.gen::<f64>(), rng.gen::<f64>());
            if u + v > 1.0 {
                u = 1.0 - u;
                v = 1.0 - v;
            }
            out.push((a + (b - a) * u + (c - a) * v, tri));
        }
        out
    }
}

/// Closest point on a triangle to a query point (Voronoi-region walk).
pub fn closest_point_on_triangle(p: &Point3<f64>, tri: &[Point3<f64>; 3]) -> Point3<f64> {
    let [a, b, c] = *tri;
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let denom = d1 - d3;
        let v = if denom.abs() < 1e-300 { 0.0 } else { d1 / denom };
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let denom = d2 - d6;
        let w = if denom.abs() < 1e-300 { 0.0 } else { d2 / denom };
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let denom = (d4 - d3) + (d5 - d6);
        let w = if denom.abs() < 1e-300 { 0.0 } else { (d4 - d3) / denom };
        return b + (c - b) * w;
    }
    let denom = va + vb + vc;
    if denom.abs() < 1e-300 {
        return a;
    }
    let v = vb / denom;
    let w = vc / denom;
    a + ab * v + ac * w
}

/// Closest pair of points between two segments `[p1, q1]` and `[p2, q2]`.
pub fn closest_points_segments(
    p1: &Point3<f64>,
    q1: &Point3<f64>,
    p2: &Point3<f64>,
    q2: &Point3<f64>,
) -> (Point3<f64>, Point3<f64>) {
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.dot(&d1);
    let e = d2.dot(&d2);
    let f = d2.dot(&r);
    let eps = 1e-300;
    let (s, t);
    if a <= eps && e <= eps {
        s = 0.0;
        t = 0.0;
    } else if a <= eps {
        s = 0.0;
        t = (f / e).clamp(0.0, 1.0);
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = 0.0;
            s = (-c / a).clamp(0.0, 1.0);
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s_tmp = if denom.abs() > eps {
                ((b * f - c * e) / denom).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let mut t_tmp = (b * s_tmp + f) / e;
            if t_tmp < 0.0 {
                t_tmp = 0.0;
                s_tmp = (-c / a).clamp(0.0, 1.0);
            } else if t_tmp > 1.0 {
                t_tmp = 1.0;
                s_tmp = ((b - c) / a).clamp(0.0, 1.0);
            }
            s = s_tmp;
            t = t_tmp;
        }
    }
    (p1 + d1 * s, p2 + d2 * t)
}

/// Closest pair of points between two triangles.
pub fn closest_points_triangles(
    t1: &[Point3<f64>; 3],
    t2: &[Point3<f64>; 3],
) -> (Point3<f64>, Point3<f64>) {
    let mut best = (f64::INFINITY, t1[0], t2[0]);
    let mut consider = |a: Point3<f64>, b: Point3<f64>| {
        let d2 = (a - b).norm_squared();
        if d2 < best.0 {
            best = (d2, a, b);
        }
    };
    for v in t1 {
        let q = closest_point_on_triangle(v, t2);
        consider(*v, q);
    }
    for v in t2 {
        let q = closest_point_on_triangle(v, t1);
        consider(q, *v);
    }
    let edges1 = [(t1[0], t1[1]), (t1[1], t1[2]), (t1[2], t1[0])];
    let edges2 = [(t2[0], t2[1]), (t2[1], t2[2]), (t2[2], t2[0])];
    for (p1, q1) in &edges1 {
        for (p2, q2) in &edges2 {
            let (a, b) = closest_points_segments(p1, q1, p2, q2);
            consider(a, b);
        }
    }
    (best.1, best.2)
}

/// Axis-aligned box mesh with the given half extents, centered at `center`.
pub fn box_mesh(center: Point3<f64>, half: Vector3<f64>) -> TriMesh {
    let mut vertices = Vec::with_capacity(8);
    for &z in &[-1.0, 1.0] {
        for &y in &[-1.0, 1.0] {
            for &x in &[-1.0, 1.0] {
                vertices.push(center + Vector3::new(x * half.x, y * half.y, z * half.z));
            }
        }
    }
    // Faces wound CCW when viewed from outside the box.
    let triangles = vec![
        [0, 2, 1], [1, 2, 3], // bottom (-z)
        [4, 5, 6], [5, 7, 6], // top (+z)
        [0, 1, 4], [1, 5, 4], // front (-y)
        [2, 6, 3], [3, 6, 7], // back (+y)
        [0, 4, 2], [2, 4, 6], // left (-x)
        [1, 3, 5], [3, 7, 5], // right (+x)
    ];
    TriMesh { vertices, triangles }
}

/// Icosphere with `subdivisions` refinement steps (0 = icosahedron).
pub fn icosphere(center: Point3<f64>, radius: f64, subdivisions: usize) -> TriMesh {
    let phi = (1.0 + 5.0_f64.sqrt()) / 2.0;
    let mut vertices: Vec<Vector3<f64>> = vec![
        Vector3::new(-1.0, phi, 0.0),
        Vector3::new(1.0, phi, 0.0),
        Vector3::new(-1.0, -phi, 0.0),
        Vector3::new(1.0, -phi, 0.0),
        Vector3::new(0.0, -1.0, phi),
        Vector3::new(0.0, 1.0, phi),
        Vector3::new(0.0, -1.0, -phi),
        Vector3::new(0.0, 1.0, -phi),
        Vector3::new(phi, 0.0, -1.0),
        Vector3::new(phi, 0.0, 1.0),
        Vector3::new(-phi, 0.0, -1.0),
        Vector3::new(-phi, 0.0, 1.0),
    ]
    .into_iter()
    .map(|v| v.normalize())
    .collect();
    let mut triangles: Vec<[usize; 3]> = vec![
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints = std::collections::BTreeMap::new();
        let mut next = Vec::with_capacity(triangles.len() * 4);
        let mut midpoint = |a: usize, b: usize, vertices: &mut Vec<Vector3<f64>>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let m = ((vertices[a] + vertices[b]) * 0.5).normalize();
                vertices.push(m);
                vertices.len() - 1
            })
        };
        for [a, b, c] in triangles {
            let ab = midpoint(a, b, &mut vertices);
            let bc = midpoint(b, c, &mut vertices);
            let ca = midpoint(c, a, &mut vertices);
            next.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        triangles = next;
    }
    let vertices = vertices.into_iter().map(|v| center + v * radius).collect();
    TriMesh { vertices, triangles }
}

/// Horizontal quad at height `z` spanning `[-half, half]^2`, normal +z.
pub fn quad_mesh(z: f64, half: f64) -> TriMesh {
    let vertices = vec![
        Point3::new(-half, -half, z),
        Point3::new(half, -half, z),
        Point3::new(half, half, z),
        Point3::new(-half, half, z),
    ];
    let triangles = vec![[0, 1, 2], [0, 2, 3]];
    TriMesh { vertices, triangles }
}

/// Loads a Wavefront OBJ mesh. Only `v` and `f` records are used; faces
/// with more than three vertices are fan-triangulated. Texture/normal
/// indices in face records are ignored.
pub fn load_obj(path: &Path) -> Result<TriMesh> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let reader = BufReader::new(file);
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut coord = [0.0; 3];
                for slot in &mut coord {
                    *slot = parts
                        .next()
                        .and_then(|t| t.parse::<f64>().ok())
                        .ok_or_else(|| {
                            Error::Parse(format!("{}:{}: malformed vertex", path.display(), lineno + 1))
                        })?;
                }
                vertices.push(Point3::new(coord[0], coord[1], coord[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|t| {
                        let head = t.split('/').next().unwrap_or(t);
                        head.parse::<i64>().ok().and_then(|i| {
                            if i > 0 {
                                Some(i as usize - 1)
                            } else if i < 0 {
                                vertices.len().checked_sub(i.unsigned_abs() as usize)
                            } else {
                                None
                            }
                        })
                    })
                    .collect::<Option<Vec<_>>>()
                    .ok_or_else(|| {
                        Error::Parse(format!("{}:{}: malformed face", path.display(), lineno + 1))
                    })?;
                if idx.len() < 3 {
                    return Err(Error::Parse(format!(
                        "{}:{}: face with fewer than 3 vertices",
                        path.display(),
                        lineno + 1
                    )));
                }
                for i in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    TriMesh::new(vertices, triangles)
}

/// Writes a mesh as Wavefront OBJ.
pub fn save_obj(path: &Path, mesh: &TriMesh) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z)?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}
