//! Point clouds with a uniform hash grid for nearest-neighbour queries,
//! PCA surface normals, and binary little-endian PLY I/O.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Unit, Vector3};

use super::bvh::{tie_replaces, TIE_EPS};
use crate::{Error, Result};

const NORMAL_NEIGHBORS: usize = 16;

/// Unordered point set with per-point foreground flags and PCA normals.
/// Normals are unoriented; callers disambiguate the sign per query.
#[derive(Debug, Clone)]
pub struct PointCloud {
    pub points: Vec<Point3<f64>>,
    pub foreground: Vec<bool>,
    pub normals: Vec<Unit<Vector3<f64>>>,
    grid: Grid,
}

#[derive(Debug, Clone)]
struct Grid {
    cell: f64,
    origin: Point3<f64>,
    dims: [usize; 3],
    // cells[flat] lists point indices; flat = (ix * dims[1] + iy) * dims[2] + iz
    starts: Vec<u32>,
    entries: Vec<u32>,
}

impl Grid {
    fn build(points: &[Point3<f64>]) -> Grid {
        if points.is_empty() {
            return Grid {
                cell: 1.0,
                origin: Point3::origin(),
                dims: [1, 1, 1],
                starts: vec![0, 0],
                entries: Vec::new(),
            };
        }
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let extent = (hi - lo).amax().max(1e-9);
        // Aim for a few points per cell on average.
        let target = (points.len() as f64).cbrt().ceil().max(1.0) as usize;
        let cell = (extent / target as f64).max(1e-9);
        let dims = [
            (((hi.x - lo.x) / cell).floor() as usize + 1).max(1),
            (((hi.y - lo.y) / cell).floor() as usize + 1).max(1),
            (((hi.z - lo.z) / cell).floor() as usize + 1).max(1),
        ];
        let flat_len = dims[0] * dims[1] * dims[2];
        let index_of = |p: &Point3<f64>| -> usize {
            let ix = (((p.x - lo.x) / cell).floor() as usize).min(dims[0] - 1);
            let iy = (((p.y - lo.y) / cell).floor() as usize).min(dims[1] - 1);
            let iz = (((p.z - lo.z) / cell).floor() as usize).min(dims[2] - 1);
            (ix * dims[1] + iy) * dims[2] + iz
        };
        let mut counts = vec![0u32; flat_len + 1];
        for p in points {
            counts[index_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut cursor = starts.clone();
        let mut entries = vec![0u32; points.len()];
        for (i, p) in points.iter().enumerate() {
            let c = index_of(p);
            entries[cursor[c] as usize] = i as u32;
            cursor[c] += 1;
        }
        Grid {
            cell,
            origin: lo,
            dims,
            starts,
            entries,
        }
    }

    fn cell_of(&self, p: &Point3<f64>) -> [i64; 3] {
        [
            ((p.x - self.origin.x) / self.cell).floor() as i64,
            ((p.y - self.origin.y) / self.cell).floor() as i64,
            ((p.z - self.origin.z) / self.cell).floor() as i64,
        ]
    }

    fn cell_points(&self, ix: i64, iy: i64, iz: i64) -> &[u32] {
        if ix < 0
            || iy < 0
            || iz < 0
            || ix >= self.dims[0] as i64
            || iy >= self.dims[1] as i64
            || iz >= self.dims[2] as i64
        {
            return &[];
        }
        let flat = (ix as usize * self.dims[1] + iy as usize) * self.dims[2] + iz as usize;
        let s = self.starts[flat] as usize;
        let e = self.starts[flat + 1] as usize;
        &self.entries[s..e]
    }

    /// Visits cells in expanding Chebyshev rings around `p`. Each ring's
    /// point indices are handed to `visit` together with the ring number;
    /// returning `true` (the best candidate can no longer be beaten) stops
    /// the search.
    fn ring_search(&self, p: &Point3<f64>, mut visit: impl FnMut(&[u32], usize) -> bool) {
        let center = self.cell_of(p);
        let max_ring = self.dims.iter().max().copied().unwrap_or(1) + 1;
        let mut ring_points = Vec::new();
        for ring in 0..=max_ring {
            ring_points.clear();
            let r = ring as i64;
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        ring_points
                            .extend(self.cell_points(center[0] + dx, center[1] + dy, center[2] + dz));
                    }
                }
            }
            if visit(&ring_points, ring) {
                break;
            }
        }
    }
}

impl PointCloud {
    /// Builds the acceleration grid and PCA normals (k = 16 neighbours).
    pub fn new(points: Vec<Point3<f64>>, foreground: Vec<bool>) -> Result<Self> {
        if points.len() != foreground.len() {
            return Err(Error::Mismatch(format!(
                "cloud has {} points but {} flags",
                points.len(),
                foreground.len()
            )));
        }
        let grid = Grid::build(&points);
        let mut cloud = PointCloud {
            points,
            foreground,
            normals: Vec::new(),
            grid,
        };
        cloud.normals = cloud.estimate_normals();
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index and distance of the nearest point to `p`; near-ties resolve
    /// via [`tie_replaces`]. `None` on an empty cloud.
    pub fn nearest(&self, p: &Point3<f64>) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best: Option<(usize, f64)> = None;
        let cell = self.grid.cell;
        self.grid.ring_search(p, |indices, ring| {
            for &idx in indices {
                let i = idx as usize;
                let d = (self.points[i] - p).norm();
                let cur = best.map(|(bi, bd)| (bd, &self.points[bi], bi));
                if tie_replaces(d, &self.points[i], i, cur) {
                    best = Some((i, d));
                }
            }
            // Points outside ring `r` are at least `r * cell` away.
            best.is_some_and(|(_, bd)| bd + TIE_EPS <= ring as f64 * cell)
        });
        best
    }

    /// Indices of the `k` nearest points to `p` (excluding `exclude` when
    /// given), closest first; ties resolve to the lowest index.
    pub fn k_nearest(&self, p: &Point3<f64>, k: usize, exclude: Option<usize>) -> Vec<usize> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        let cell = self.grid.cell;
        self.grid.ring_search(p, |indices, ring| {
            for &idx in indices {
                let i = idx as usize;
                if Some(i) == exclude {
                    continue;
                }
                let d2 = (self.points[i] - p).norm_squared();
                let pos = heap.partition_point(|&(hd, hi)| hd < d2 || (hd == d2 && hi < i));
                heap.insert(pos, (d2, i));
                if heap.len() > k {
                    heap.pop();
                }
            }
            heap.len() >= k
                && heap
                    .last()
                    .map(|&(d2, _)| d2 <= (ring as f64 * cell).powi(2))
                    .unwrap_or(false)
        });
        heap.into_iter().map(|(_, i)| i).collect()
    }

    fn estimate_normals(&self) -> Vec<Unit<Vector3<f64>>> {
        let mut normals = Vec::with_capacity(self.points.len());
        for p in &self.points {
            let neighbors = self.k_nearest(p, NORMAL_NEIGHBORS.min(self.points.len()), None);
            if neighbors.len() < 3 {
                normals.push(Unit::new_unchecked(Vector3::z()));
                continue;
            }
            let mut mean = Vector3::zeros();
            for &n in &neighbors {
                mean += self.points[n].coords;
            }
            mean /= neighbors.len() as f64;
            let mut cov = Matrix3::zeros();
            for &n in &neighbors {
                let d = self.points[n].coords - mean;
                cov += d * d.transpose();
            }
            let eig = cov.symmetric_eigen();
            let mut min_k = 0;
            for k in 1..3 {
                if eig.eigenvalues[k] < eig.eigenvalues[min_k] {
                    min_k = k;
                }
            }
            let n = eig.eigenvectors.column(min_k).into_owned();
            normals.push(Unit::try_new(n, 1e-12).unwrap_or_else(|| Unit::new_unchecked(Vector3::z())));
        }
        normals
    }
}

/// Writes a cloud as binary little-endian PLY with `float x/y/z` and
/// `uchar flag` (1 = foreground) per vertex.
pub fn save_cloud_ply(path: &Path, cloud: &PointCloud) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nproperty uchar flag\nend_header\n",
        cloud.points.len()
    )?;
    for (p, &fg) in cloud.points.iter().zip(&cloud.foreground) {
        for k in 0..3 {
            out.write_all(&(p[k] as f32).to_le_bytes())?;
        }
        out.write_all(&[u8::from(fg)])?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    F32,
    F64,
    U8,
    I32,
    U32,
}

impl PlyType {
    fn parse(token: &str) -> Option<PlyType> {
        match token {
            "float" | "float32" => Some(PlyType::F32),
            "double" | "float64" => Some(PlyType::F64),
            "uchar" | "uint8" => Some(PlyType::U8),
            "int" | "int32" => Some(PlyType::I32),
            "uint" | "uint32" => Some(PlyType::U32),
            _ => None,
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::U8 => 1,
            PlyType::F32 | PlyType::I32 | PlyType::U32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_f64(self, bytes: &[u8]) -> f64 {
        match self {
            PlyType::F32 => f32::from_le_bytes(bytes.try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(bytes.try_into().unwrap()),
            PlyType::U8 => bytes[0] as f64,
            PlyType::I32 => i32::from_le_bytes(bytes.try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(bytes.try_into().unwrap()) as f64,
        }
    }
}

/// Reads a binary little-endian PLY cloud written by this crate (or any
/// vertex element with `x`, `y`, `z` properties; a `flag` property marks
/// foreground points, defaulting to foreground when absent). Extra
/// properties are skipped.
pub fn load_cloud_ply(path: &Path) -> Result<PointCloud> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    let read_line = |reader: &mut BufReader<std::fs::File>, line: &mut String| -> Result<()> {
        line.clear();
        if reader.read_line(line)? == 0 {
            return Err(Error::Parse(format!("{}: truncated PLY header", path.display())));
        }
        Ok(())
    };
    read_line(&mut reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Parse(format!("{}: not a PLY file", path.display())));
    }
    read_line(&mut reader, &mut line)?;
    if line.trim() != "format binary_little_endian 1.0" {
        return Err(Error::Parse(format!(
            "{}: unsupported PLY format (expected binary little-endian 1.0)",
            path.display()
        )));
    }
    let mut count = 0usize;
    let mut props: Vec<(PlyType, String)> = Vec::new();
    let mut in_vertex = false;
    loop {
        read_line(&mut reader, &mut line)?;
        let trimmed = line.trim();
        if trimmed == "end_header" {
            break;
        }
        let mut parts = trimmed.split_whitespace();
        match parts.next() {
            Some("comment") => {}
            Some("element") => {
                let name = parts.next().unwrap_or("");
                in_vertex = name == "vertex";
                if in_vertex {
                    count = parts
                        .next()
                        .and_then(|t| t.parse().ok())
                        .ok_or_else(|| Error::Parse(format!("{}: bad vertex count", path.display())))?;
                } else {
                    return Err(Error::Parse(format!(
                        "{}: unsupported PLY element '{name}'",
                        path.display()
                    )));
                }
            }
            Some("property") => {
                if !in_vertex {
                    continue;
                }
                let ty = parts
                    .next()
                    .and_then(PlyType::parse)
                    .ok_or_else(|| Error::Parse(format!("{}: unsupported property type", path.display())))?;
                let name = parts
                    .next()
                    .ok_or_else(|| Error::Parse(format!("{}: unnamed property", path.display())))?;
                props.push((ty, name.to_string()));
            }
            _ => {}
        }
    }
    let find = |name: &str| -> Option<(usize, PlyType)> {
        let mut offset = 0;
        for (ty, n) in &props {
            if n == name {
                return Some((offset, *ty));
            }
            offset += ty.size();
        }
        None
    };
    let stride: usize = props.iter().map(|(t, _)| t.size()).sum();
    let (ox, tx) = find("x").ok_or_else(|| Error::Parse(format!("{}: missing x property", path.display())))?;
    let (oy, ty) = find("y").ok_or_else(|| Error::Parse(format!("{}: missing y property", path.display())))?;
    let (oz, tz) = find("z").ok_or_else(|| Error::Parse(format!("{}: missing z property", path.display())))?;
    let flag = find("flag");
    let mut data = vec![0u8; stride * count];
    reader.read_exact(&mut data).map_err(|e| {
        Error::Parse(format!("{}: truncated PLY payload ({e})", path.display()))
    })?;
    let mut points = Vec::with_capacity(count);
    let mut fg = Vec::with_capacity(count);
    for i in 0..count {
        let rec = &data[i * stride..(i + 1) * stride];
        points.push(Point3::new(
            tx.read_f64(&rec[ox..ox + tx.size()]),
            ty.read_f64(&rec[oy..oy + ty.size()]),
            tz.read_f64(&rec[oz..oz + tz.size()]),
        ));
        fg.push(match flag {
            Some((of, tf)) => tf.read_f64(&rec[of..of + tf.size()]) != 0.0,
            None => true,
        });
    }
    PointCloud::new(points, fg)
}
