//! Tetrahedral meshes, primitive generators, and geometry queries.
//!
//! A [`TetMesh`] is the unit of geometry for the whole pipeline: the FEM
//! oracle solves on it, the graph builder converts it to a multigraph, and the
//! planner samples grasps against its boundary surface. Meshes are stored on
//! disk as plain JSON (optionally gzip-compressed, selected by a `.gz`
//! suffix).
//!
//! Primitive generators (cuboid, ellipsoid, cylinder, annulus) all build a
//! conforming Kuhn lattice — every hexahedral cell split into the same six
//! tetrahedra sharing the cell's main diagonal — and then map lattice vertices
//! onto the target shape with smooth maps whose boundary images satisfy the
//! shape's implicit equation to floating-point precision.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read as _, Write as _};
use std::path::Path;

use nalgebra::{Matrix3, Point3, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tets whose volume falls below this are rejected at load/generation time.
pub const DEGENERATE_VOLUME_M3: f64 = 1e-12;

/// Minimum ray parameter for [`raycast`]; hits closer than this (e.g. the
/// triangle the ray origin lies on) are ignored.
pub const RAY_T_MIN: f64 = 1e-9;

/// A tetrahedral volume mesh with a homogeneous elastic modulus.
///
/// Invariants maintained by [`TetMesh::validate`]:
/// * every tet index is in range,
/// * every tet has positive signed volume (canonical orientation),
/// * no tet volume is below [`DEGENERATE_VOLUME_M3`].
#[derive(Debug, Clone)]
pub struct TetMesh {
    pub id: String,
    pub elastic_modulus_pa: f64,
    pub vertices: Vec<Point3<f64>>,
    pub tets: Vec<[usize; 4]>,
}

/// A triangle surface mesh. Triangle indices refer to `vertices`, which for a
/// surface extracted from a [`TetMesh`] is a copy of the volume mesh's vertex
/// list (so triangle indices remain valid volume-vertex indices).
#[derive(Debug, Clone)]
pub struct TriMesh {
    pub vertices: Vec<Point3<f64>>,
    pub tris: Vec<[usize; 3]>,
}

/// Result of a [`raycast`]: parameter along the ray and the triangle hit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayHit {
    pub t: f64,
    pub tri: usize,
}

/// On-disk schema for a [`TetMesh`].
#[derive(Serialize, Deserialize)]
struct MeshFile {
    id: String,
    elastic_modulus_pa: f64,
    vertices: Vec<[f64; 3]>,
    tets: Vec<[usize; 4]>,
}

impl TetMesh {
    /// Builds a mesh from raw parts, canonicalizing tet orientation and
    /// validating indices and volumes.
    pub fn new(
        id: impl Into<String>,
        elastic_modulus_pa: f64,
        vertices: Vec<Point3<f64>>,
        tets: Vec<[usize; 4]>,
    ) -> Result<Self> {
        let mut mesh = TetMesh { id: id.into(), elastic_modulus_pa, vertices, tets };
        mesh.canonicalize_orientation()?;
        mesh.validate()?;
        Ok(mesh)
    }

    /// Replaces the mesh id (generators produce descriptive ids; datasets may
    /// want their own naming).
    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Replaces the elastic modulus.
    pub fn with_modulus(mut self, elastic_modulus_pa: f64) -> Self {
        self.elastic_modulus_pa = elastic_modulus_pa;
        self
    }

    /// Signed volume of tet `t` (positive for canonical orientation).
    pub fn tet_volume(&self, t: usize) -> f64 {
        let [a, b, c, d] = self.tets[t];
        signed_tet_volume(
            &self.vertices[a],
            &self.vertices[b],
            &self.vertices[c],
            &self.vertices[d],
        )
    }

    /// Sum of all tet volumes.
    pub fn total_volume(&self) -> f64 {
        (0..self.tets.len()).map(|t| self.tet_volume(t)).sum()
    }

    /// Unweighted mean of the vertex positions.
    pub fn centroid(&self) -> Point3<f64> {
        let mut acc = Vector3::zeros();
        for v in &self.vertices {
            acc += v.coords;
        }
        Point3::from(acc / self.vertices.len() as f64)
    }

    /// Flips negatively-oriented tets (swapping the last two indices) so all
    /// signed volumes are positive.
    fn canonicalize_orientation(&mut self) -> Result<()> {
        let n = self.vertices.len();
        for tet in &mut self.tets {
            for &i in tet.iter() {
                if i >= n {
                    return Err(Error::Mesh(format!(
                        "tet index {i} out of range (mesh has {n} vertices)"
                    )));
                }
            }
            let vol = signed_tet_volume(
                &self.vertices[tet[0]],
                &self.vertices[tet[1]],
                &self.vertices[tet[2]],
                &self.vertices[tet[3]],
            );
            if vol < 0.0 {
                tet.swap(2, 3);
            }
        }
        Ok(())
    }

    /// Checks all structural invariants; called by constructors and loaders.
    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() || self.tets.is_empty() {
            return Err(Error::Mesh("mesh has no vertices or no tets".into()));
        }
        if !(self.elastic_modulus_pa > 0.0) {
            return Err(Error::Mesh(format!(
                "elastic modulus must be positive, got {}",
                self.elastic_modulus_pa
            )));
        }
        let n = self.vertices.len();
        for (t, tet) in self.tets.iter().enumerate() {
            for &i in tet.iter() {
                if i >= n {
                    return Err(Error::Mesh(format!(
                        "tet {t} index {i} out of range (mesh has {n} vertices)"
                    )));
                }
            }
            let vol = self.tet_volume(t);
            if vol < DEGENERATE_VOLUME_M3 {
                return Err(Error::Mesh(format!(
                    "tet {t} is degenerate or inverted (volume {vol:.3e} m^3)"
                )));
            }
        }
        Ok(())
    }

    /// Extracts the boundary surface: faces that belong to exactly one tet,
    /// oriented outward (normal pointing away from the opposite vertex).
    pub fn surface(&self) -> TriMesh {
        // Map sorted face -> (oriented face, count).
        let mut faces: BTreeMap<[usize; 3], ([usize; 3], usize)> = BTreeMap::new();
        for tet in &self.tets {
            let [p, q, r, s] = *tet;
            for (face, opposite) in [
                ([q, r, s], p),
                ([p, r, s], q),
                ([p, q, s], r),
                ([p, q, r], s),
            ] {
                let mut key = face;
                key.sort_unstable();
                let oriented = orient_outward(&self.vertices, face, opposite);
                let entry = faces.entry(key).or_insert((oriented, 0));
                entry.1 += 1;
            }
        }
        let tris: Vec<[usize; 3]> = faces
            .into_values()
            .filter_map(|(oriented, count)| (count == 1).then_some(oriented))
            .collect();
        TriMesh { vertices: self.vertices.clone(), tris }
    }

    /// `true` for vertices incident to at least one boundary face.
    pub fn surface_vertex_mask(&self) -> Vec<bool> {
        let surface = self.surface();
        let mut mask = vec![false; self.vertices.len()];
        for tri in &surface.tris {
            for &i in tri {
                mask[i] = true;
            }
        }
        mask
    }

    /// Loads a mesh from JSON, or gzip-compressed JSON if the path ends in
    /// `.gz`. Validates and canonicalizes orientation.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path)?;
        let text = if path.extension().is_some_and(|e| e == "gz") {
            let mut decoder = flate2::read::GzDecoder::new(raw.as_slice());
            let mut out = String::new();
            decoder.read_to_string(&mut out)?;
            out
        } else {
            String::from_utf8(raw)
                .map_err(|e| Error::Mesh(format!("mesh file is not UTF-8: {e}")))?
        };
        let file: MeshFile = serde_json::from_str(&text)?;
        TetMesh::new(
            file.id,
            file.elastic_modulus_pa,
            file.vertices.iter().map(|v| Point3::new(v[0], v[1], v[2])).collect(),
            file.tets,
        )
    }

    /// Saves as JSON, gzip-compressed if the path ends in `.gz`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = MeshFile {
            id: self.id.clone(),
            elastic_modulus_pa: self.elastic_modulus_pa,
            vertices: self.vertices.iter().map(|v| [v.x, v.y, v.z]).collect(),
            tets: self.tets.clone(),
        };
        let text = serde_json::to_string(&file)?;
        if path.extension().is_some_and(|e| e == "gz") {
            let mut encoder =
                flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
            encoder.write_all(text.as_bytes())?;
            std::fs::write(path, encoder.finish()?)?;
        } else {
            std::fs::write(path, text)?;
        }
        Ok(())
    }
}

impl TriMesh {
    /// Area of triangle `t`.
    pub fn tri_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.tris[t];
        let ab = self.vertices[b] - self.vertices[a];
        let ac = self.vertices[c] - self.vertices[a];
        0.5 * ab.cross(&ac).norm()
    }

    /// Unit normal of triangle `t` (right-hand rule over the index order).
    pub fn tri_normal(&self, t: usize) -> Vector3<f64> {
        let [a, b, c] = self.tris[t];
        let ab = self.vertices[b] - self.vertices[a];
        let ac = self.vertices[c] - self.vertices[a];
        ab.cross(&ac).normalize()
    }

    /// Total surface area.
    pub fn total_area(&self) -> f64 {
        (0..self.tris.len()).map(|t| self.tri_area(t)).sum()
    }

    /// Draws `n` points uniformly by area: triangles are picked by cumulative
    /// area, barycentric coordinates by the square-root trick.
    pub fn sample_points(&self, n: usize, rng: &mut impl Rng) -> Vec<Point3<f64>> {
        let mut cumulative = Vec::with_capacity(self.tris.len());
        let mut total = 0.0;
        for t in 0..self.tris.len() {
            total += self.tri_area(t);
            cumulative.push(total);
        }
        (0..n)
            .map(|_| {
                let pick = rng.gen::<f64>() * total;
                let t = cumulative.partition_point(|&c| c < pick).min(self.tris.len() - 1);
                let [a, b, c] = self.tris[t];
                let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
                let sqrt_r1 = r1.sqrt();
                let (u, v) = (1.0 - sqrt_r1, sqrt_r1 * (1.0 - r2));
                let w = 1.0 - u - v;
                Point3::from(
                    self.vertices[a].coords * u
                        + self.vertices[b].coords * v
                        + self.vertices[c].coords * w,
                )
            })
            .collect()
    }
}

/// Signed volume of the tet `(a, b, c, d)`; positive when `d` sits on the
/// side of plane `(a, b, c)` that the right-hand normal points to.
pub fn signed_tet_volume(
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
    d: &Point3<f64>,
) -> f64 {
    let m = Matrix3::from_columns(&[b - a, c - a, d - a]);
    m.determinant() / 6.0
}

/// Orients face `(a, b, c)` so its normal points away from `opposite`.
fn orient_outward(vertices: &[Point3<f64>], face: [usize; 3], opposite: usize) -> [usize; 3] {
    let [a, b, c] = face;
    let n = (vertices[b] - vertices[a]).cross(&(vertices[c] - vertices[a]));
    if n.dot(&(vertices[opposite] - vertices[a])) > 0.0 {
        [a, c, b]
    } else {
        [a, b, c]
    }
}

// ---------------------------------------------------------------------------
// Primitive generators
// ---------------------------------------------------------------------------

/// The six tets of the Kuhn subdivision of a unit cell, as offset index
/// triples along each axis-permutation path from the min corner to the max
/// corner. Identical in every cell, which makes the lattice conforming.
const KUHN_PATHS: [[usize; 3]; 6] = [
    [0, 1, 2],
    [0, 2, 1],
    [1, 0, 2],
    [1, 2, 0],
    [2, 0, 1],
    [2, 1, 0],
];

/// Builds the tets of a structured hex lattice with `cells = [nx, ny, nz]`
/// cells, given a vertex-index function over lattice coordinates
/// `(i, j, k)` with `i in 0..=nx` etc. (the indirection lets callers wrap an
/// axis, as the annulus does for its angular coordinate).
fn kuhn_lattice_tets(
    cells: [usize; 3],
    mut vertex_index: impl FnMut(usize, usize, usize) -> usize,
) -> Vec<[usize; 4]> {
    let mut tets = Vec::with_capacity(6 * cells[0] * cells[1] * cells[2]);
    for i in 0..cells[0] {
        for j in 0..cells[1] {
            for k in 0..cells[2] {
                for path in KUHN_PATHS {
                    let mut corner = [i, j, k];
                    let mut tet = [0usize; 4];
                    tet[0] = vertex_index(corner[0], corner[1], corner[2]);
                    for (step, &axis) in path.iter().enumerate() {
                        corner[axis] += 1;
                        tet[step + 1] = vertex_index(corner[0], corner[1], corner[2]);
                    }
                    tets.push(tet);
                }
            }
        }
    }
    tets
}

/// Axis-aligned cuboid centered at the origin, `res` cells per axis.
pub fn cuboid(dims: [f64; 3], res: usize) -> Result<TetMesh> {
    check_res(res)?;
    let n = res + 1;
    let mut vertices = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                vertices.push(Point3::new(
                    dims[0] * (i as f64 / res as f64 - 0.5),
                    dims[1] * (j as f64 / res as f64 - 0.5),
                    dims[2] * (k as f64 / res as f64 - 0.5),
                ));
            }
        }
    }
    let tets = kuhn_lattice_tets([res, res, res], |i, j, k| (i * n + j) * n + k);
    TetMesh::new(
        format!("cuboid-{:.3}x{:.3}x{:.3}-r{res}", dims[0], dims[1], dims[2]),
        DEFAULT_MODULUS_PA,
        vertices,
        tets,
    )
}

/// Default elastic modulus for generated primitives; callers override with
/// [`TetMesh::with_modulus`].
pub const DEFAULT_MODULUS_PA: f64 = 1e5;

/// Ellipsoid with the given semi-axes, built by mapping a cube lattice
/// through the smooth cube-to-ball map. Lattice vertices on the cube boundary
/// land exactly on the unit sphere, so surface vertices satisfy
/// `(x/a)^2 + (y/b)^2 + (z/c)^2 = 1` to floating-point precision.
pub fn ellipsoid(semi_axes: [f64; 3], res: usize) -> Result<TetMesh> {
    check_res(res)?;
    let n = res + 1;
    let mut vertices = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let cube = [
                    2.0 * i as f64 / res as f64 - 1.0,
                    2.0 * j as f64 / res as f64 - 1.0,
                    2.0 * k as f64 / res as f64 - 1.0,
                ];
                let ball = cube_to_ball(cube);
                vertices.push(Point3::new(
                    semi_axes[0] * ball[0],
                    semi_axes[1] * ball[1],
                    semi_axes[2] * ball[2],
                ));
            }
        }
    }
    let tets = kuhn_lattice_tets([res, res, res], |i, j, k| (i * n + j) * n + k);
    TetMesh::new(
        format!(
            "ellipsoid-{:.3}x{:.3}x{:.3}-r{res}",
            semi_axes[0], semi_axes[1], semi_axes[2]
        ),
        DEFAULT_MODULUS_PA,
        vertices,
        tets,
    )
}

/// Cylinder of the given radius and height (axis = z, centered at the
/// origin), built by mapping the lattice cross-section through the smooth
/// square-to-disk map; lateral surface vertices satisfy `x^2 + y^2 = r^2` to
/// floating-point precision.
pub fn cylinder(radius: f64, height: f64, res: usize) -> Result<TetMesh> {
    check_res(res)?;
    let n = res + 1;
    let mut vertices = Vec::with_capacity(n * n * n);
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let sx = 2.0 * i as f64 / res as f64 - 1.0;
                let sy = 2.0 * j as f64 / res as f64 - 1.0;
                let disk = square_to_disk([sx, sy]);
                vertices.push(Point3::new(
                    radius * disk[0],
                    radius * disk[1],
                    height * (k as f64 / res as f64 - 0.5),
                ));
            }
        }
    }
    let tets = kuhn_lattice_tets([res, res, res], |i, j, k| (i * n + j) * n + k);
    TetMesh::new(format!("cylinder-{radius:.3}x{height:.3}-r{res}"), DEFAULT_MODULUS_PA, vertices, tets)
}

/// Annulus (tube) with inner/outer radii and height (axis = z, centered at
/// the origin), built on a `(theta, r, z)` lattice with `4 * res` angular
/// cells. The Kuhn subdivision is translation-invariant in lattice
/// coordinates, so the mesh conforms across the `theta` wrap.
pub fn annulus(r_inner: f64, r_outer: f64, height: f64, res: usize) -> Result<TetMesh> {
    check_res(res)?;
    if !(r_inner > 0.0 && r_outer > r_inner) {
        return Err(Error::Mesh(format!(
            "annulus radii must satisfy 0 < inner < outer, got {r_inner} and {r_outer}"
        )));
    }
    let n_theta = 4 * res;
    let (n_r, n_z) = (res + 1, res + 1);
    let mut vertices = Vec::with_capacity(n_theta * n_r * n_z);
    for it in 0..n_theta {
        for ir in 0..n_r {
            for iz in 0..n_z {
                let theta = std::f64::consts::TAU * it as f64 / n_theta as f64;
                let rad = r_inner + (r_outer - r_inner) * ir as f64 / res as f64;
                vertices.push(Point3::new(
                    rad * theta.cos(),
                    rad * theta.sin(),
                    height * (iz as f64 / res as f64 - 0.5),
                ));
            }
        }
    }
    let tets = kuhn_lattice_tets([n_theta, res, res], |it, ir, iz| {
        ((it % n_theta) * n_r + ir) * n_z + iz
    });
    TetMesh::new(
        format!("annulus-{r_inner:.3}x{r_outer:.3}x{height:.3}-r{res}"),
        DEFAULT_MODULUS_PA,
        vertices,
        tets,
    )
}

fn check_res(res: usize) -> Result<()> {
    if res == 0 {
        return Err(Error::Mesh("generator resolution must be at least 1".into()));
    }
    Ok(())
}

/// Smooth cube-to-ball map; the boundary of `[-1, 1]^3` maps exactly onto the
/// unit sphere.
fn cube_to_ball([x, y, z]: [f64; 3]) -> [f64; 3] {
    [
        x * (1.0 - y * y / 2.0 - z * z / 2.0 + y * y * z * z / 3.0).sqrt(),
        y * (1.0 - z * z / 2.0 - x * x / 2.0 + z * z * x * x / 3.0).sqrt(),
        z * (1.0 - x * x / 2.0 - y * y / 2.0 + x * x * y * y / 3.0).sqrt(),
    ]
}

/// Smooth square-to-disk map; the boundary of `[-1, 1]^2` maps exactly onto
/// the unit circle.
fn square_to_disk([x, y]: [f64; 2]) -> [f64; 2] {
    [x * (1.0 - y * y / 2.0).sqrt(), y * (1.0 - x * x / 2.0).sqrt()]
}

// ---------------------------------------------------------------------------
// Geometry queries
// ---------------------------------------------------------------------------

/// Casts a ray and returns the nearest hit with `t > RAY_T_MIN`, using the
/// Moller-Trumbore intersection test per triangle.
pub fn raycast(mesh: &TriMesh, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
    let mut best: Option<RayHit> = None;
    for (idx, tri) in mesh.tris.iter().enumerate() {
        let [a, b, c] = *tri;
        if let Some(t) = moller_trumbore(
            origin,
            dir,
            &mesh.vertices[a],
            &mesh.vertices[b],
            &mesh.vertices[c],
        ) {
            if best.map_or(true, |h| t < h.t) {
                best = Some(RayHit { t, tri: idx });
            }
        }
    }
    best
}

/// Moller-Trumbore ray/triangle test. Returns the ray parameter for hits with
/// `t > RAY_T_MIN` and barycentric coordinates inside the closed triangle.
fn moller_trumbore(
    origin: &Point3<f64>,
    dir: &Vector3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Option<f64> {
    let e1 = b - a;
    let e2 = c - a;
    let p = dir.cross(&e2);
    let det = e1.dot(&p);
    if det.abs() < 1e-14 {
        return None; // Ray parallel to the triangle plane.
    }
    let inv_det = 1.0 / det;
    let s = origin - a;
    let u = s.dot(&p) * inv_det;
    if !(-1e-12..=1.0 + 1e-12).contains(&u) {
        return None;
    }
    let q = s.cross(&e1);
    let v = dir.dot(&q) * inv_det;
    if v < -1e-12 || u + v > 1.0 + 1e-12 {
        return None;
    }
    let t = e2.dot(&q) * inv_det;
    (t > RAY_T_MIN).then_some(t)
}

/// Symmetric chamfer distance between two surfaces in millimeters: both
/// surfaces are sampled with `n_samples` area-uniform points (seeded), and the
/// mean nearest-neighbor distance is averaged over both directions.
///
/// Each surface is sampled with its own stream from the same seed, so
/// identical surfaces get identical sample sets and a distance of exactly
/// zero. Nearest neighbors are found with a uniform-grid index; an exhaustive
/// scan gives identical results and serves as the test oracle.
pub fn chamfer_mm(a: &TriMesh, b: &TriMesh, n_samples: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    if a.tris.is_empty() || b.tris.is_empty() {
        return Err(Error::Mesh("chamfer distance requires non-empty surfaces".into()));
    }
    let mut rng_a = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut rng_b = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let pa = a.sample_points(n_samples, &mut rng_a);
    let pb = b.sample_points(n_samples, &mut rng_b);
    let d_ab = mean_nn_distance(&pa, &pb);
    let d_ba = mean_nn_distance(&pb, &pa);
    Ok(1000.0 * 0.5 * (d_ab + d_ba))
}

/// Mean distance from each query point to its nearest neighbor in `targets`.
fn mean_nn_distance(queries: &[Point3<f64>], targets: &[Point3<f64>]) -> f64 {
    let grid = PointGrid::build(targets);
    let total: f64 = queries.iter().map(|q| grid.nearest_distance(q)).sum();
    total / queries.len() as f64
}

/// Uniform-grid nearest-neighbor index over a fixed point set.
struct PointGrid {
    points: Vec<Point3<f64>>,
    cells: BTreeMap<[i64; 3], Vec<usize>>,
    cell_size: f64,
    origin: Point3<f64>,
}

impl PointGrid {
    fn build(points: &[Point3<f64>]) -> Self {
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for k in 0..3 {
                lo[k] = lo[k].min(p[k]);
                hi[k] = hi[k].max(p[k]);
            }
        }
        let diag = (hi - lo).norm().max(1e-9);
        // Aim for a few points per cell at typical sampling densities.
        let cell_size = diag / (points.len() as f64).cbrt().max(1.0);
        let origin = lo;
        let mut cells: BTreeMap<[i64; 3], Vec<usize>> = BTreeMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(p, &origin, cell_size)).or_default().push(i);
        }
        PointGrid { points: points.to_vec(), cells, cell_size, origin }
    }

    fn key(p: &Point3<f64>, origin: &Point3<f64>, cell_size: f64) -> [i64; 3] {
        [
            ((p.x - origin.x) / cell_size).floor() as i64,
            ((p.y - origin.y) / cell_size).floor() as i64,
            ((p.z - origin.z) / cell_size).floor() as i64,
        ]
    }

    /// Exact nearest-neighbor distance: scans cells in expanding shells and
    /// stops once no unvisited shell can contain a closer point.
    fn nearest_distance(&self, q: &Point3<f64>) -> f64 {
        let center = Self::key(q, &self.origin, self.cell_size);
        let mut best = f64::INFINITY;
        let mut ring = 0i64;
        loop {
            // Any point in a cell of this ring is at least this far away.
            let ring_floor = (ring - 1).max(0) as f64 * self.cell_size;
            if best.is_finite() && ring_floor > best {
                return best;
            }
            let mut any_cell = false;
            for dx in -ring..=ring {
                for dy in -ring..=ring {
                    for dz in -ring..=ring {
                        // Shell only: skip interior cells already visited.
                        if dx.abs().max(dy.abs()).max(dz.abs()) != ring {
                            continue;
                        }
                        let key = [center[0] + dx, center[1] + dy, center[2] + dz];
                        if let Some(indices) = self.cells.get(&key) {
                            any_cell = true;
                            for &i in indices {
                                best = best.min((self.points[i] - q).norm());
                            }
                        }
                    }
                }
            }
            // Safety stop: if the shell has grown past the whole cloud and we
            // have a candidate, no farther shell can beat it.
            if !any_cell && best.is_finite() && ring_floor > best {
                return best;
            }
            ring += 1;
            if ring > 1_000_000 {
                return best; // Unreachable for finite inputs; avoids spinning.
            }
        }
    }
}

/// Collects the undirected edges of all tets, each pair once, in ascending
/// `(min, max)` order. Used by the graph builder and by mesh statistics.
pub fn tet_edges(mesh: &TetMesh) -> Vec<[usize; 2]> {
    let mut set = BTreeSet::new();
    for tet in &mesh.tets {
        for i in 0..4 {
            for j in (i + 1)..4 {
                let (a, b) = (tet[i].min(tet[j]), tet[i].max(tet[j]));
                set.insert([a, b]);
            }
        }
    }
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Exhaustive nearest-neighbor oracle for the grid index.
    fn brute_mean_nn(queries: &[Point3<f64>], targets: &[Point3<f64>]) -> f64 {
        let total: f64 = queries
            .iter()
            .map(|q| {
                targets
                    .iter()
                    .map(|t| (t - q).norm())
                    .fold(f64::INFINITY, f64::min)
            })
            .sum();
        total / queries.len() as f64
    }

    /// Ray/triangle oracle: solve the 3x3 linear system
    /// `origin + t*dir = a + u*(b-a) + v*(c-a)` and check ranges.
    fn raycast_oracle(mesh: &TriMesh, origin: &Point3<f64>, dir: &Vector3<f64>) -> Option<RayHit> {
        let mut best: Option<RayHit> = None;
        for (idx, tri) in mesh.tris.iter().enumerate() {
            let [a, b, c] = *tri;
            let m = Matrix3::from_columns(&[
                mesh.vertices[b] - mesh.vertices[a],
                mesh.vertices[c] - mesh.vertices[a],
                -dir,
            ]);
            let Some(inv) = m.try_inverse() else { continue };
            let sol = inv * (origin - mesh.vertices[a]);
            let (u, v, t) = (sol.x, sol.y, sol.z);
            if u >= -1e-12 && v >= -1e-12 && u + v <= 1.0 + 1e-12 && t > RAY_T_MIN {
                if best.map_or(true, |h| t < h.t) {
                    best = Some(RayHit { t, tri: idx });
                }
            }
        }
        best
    }

    #[test]
    fn cube_lattice_counts() {
        let mesh = cuboid([1.0, 1.0, 1.0], 2).unwrap();
        assert_eq!(mesh.vertices.len(), 27);
        assert_eq!(mesh.tets.len(), 48);
        let surface = mesh.surface();
        assert_eq!(surface.tris.len(), 48); // 12 * res^2 boundary triangles.
    }

    #[test]
    fn cuboid_volume_is_exact() {
        let mesh = cuboid([0.06, 0.04, 0.02], 3).unwrap();
        assert_relative_eq!(mesh.total_volume(), 0.06 * 0.04 * 0.02, max_relative = 1e-12);
        for t in 0..mesh.tets.len() {
            assert!(mesh.tet_volume(t) > 0.0);
        }
    }

    #[test]
    fn surface_is_closed_and_outward() {
        for mesh in [
            cuboid([0.05, 0.04, 0.03], 2).unwrap(),
            ellipsoid([0.03, 0.02, 0.02], 3).unwrap(),
            cylinder(0.02, 0.06, 3).unwrap(),
            annulus(0.01, 0.03, 0.04, 2).unwrap(),
        ] {
            let surface = mesh.surface();
            // Closed 2-manifold: every surface edge borders exactly two tris.
            let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
            for tri in &surface.tris {
                for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                    let key = (e.0.min(e.1), e.0.max(e.1));
                    *edge_count.entry(key).or_insert(0) += 1;
                }
            }
            assert!(edge_count.values().all(|&c| c == 2), "open surface on {}", mesh.id);

            // Outward orientation: the divergence theorem gives the volume as
            // a surface integral, positive only if normals point outward.
            let flux: f64 = surface
                .tris
                .iter()
                .map(|&[a, b, c]| {
                    let (va, vb, vc) =
                        (surface.vertices[a], surface.vertices[b], surface.vertices[c]);
                    signed_tet_volume(&Point3::origin(), &va, &vb, &vc)
                })
                .sum();
            assert_relative_eq!(flux, mesh.total_volume(), max_relative = 1e-9);
        }
    }

    #[test]
    fn euler_characteristic_distinguishes_ball_from_torus() {
        let chi = |mesh: &TetMesh| {
            let surface = mesh.surface();
            let mut verts = BTreeSet::new();
            let mut edges = BTreeSet::new();
            for tri in &surface.tris {
                for &v in tri {
                    verts.insert(v);
                }
                for e in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                    edges.insert((e.0.min(e.1), e.0.max(e.1)));
                }
            }
            verts.len() as i64 - edges.len() as i64 + surface.tris.len() as i64
        };
        assert_eq!(chi(&cuboid([1.0, 1.0, 1.0], 2).unwrap()), 2); // sphere
        assert_eq!(chi(&annulus(0.01, 0.02, 0.02, 2).unwrap()), 0); // torus
    }

    #[test]
    fn ellipsoid_surface_vertices_satisfy_implicit_equation() {
        let semi = [0.035, 0.025, 0.02];
        let mesh = ellipsoid(semi, 4).unwrap();
        let mask = mesh.surface_vertex_mask();
        let mut n_surface = 0;
        for (v, &on_surface) in mesh.vertices.iter().zip(&mask) {
            if on_surface {
                n_surface += 1;
                let lhs = (v.x / semi[0]).powi(2)
                    + (v.y / semi[1]).powi(2)
                    + (v.z / semi[2]).powi(2);
                assert!((lhs - 1.0).abs() < 1e-9, "surface vertex off ellipsoid: {lhs}");
            }
        }
        assert!(n_surface > 0);
    }

    #[test]
    fn cylinder_lateral_vertices_lie_on_radius() {
        let (radius, height) = (0.021, 0.07);
        let mesh = cylinder(radius, height, 4).unwrap();
        let mask = mesh.surface_vertex_mask();
        for (v, &on_surface) in mesh.vertices.iter().zip(&mask) {
            let on_cap = (v.z.abs() - height / 2.0).abs() < 1e-12;
            if on_surface && !on_cap {
                assert_relative_eq!((v.x * v.x + v.y * v.y).sqrt(), radius, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn annulus_radii_are_exact_and_volume_matches() {
        let (ri, ro, h) = (0.012, 0.03, 0.04);
        let mesh = annulus(ri, ro, h, 3).unwrap();
        for v in &mesh.vertices {
            let r = (v.x * v.x + v.y * v.y).sqrt();
            assert!(r > ri - 1e-9 && r < ro + 1e-9);
        }
        // The lattice inscribes the circles with chords, so the mesh volume
        // converges to pi*(ro^2 - ri^2)*h from below; at res 3 (12 angular
        // cells) the chordal deficit is about 2 * (1 - sinc(pi/12)) ~ 2.3%.
        let analytic = std::f64::consts::PI * (ro * ro - ri * ri) * h;
        let vol = mesh.total_volume();
        assert!(vol < analytic && vol > 0.95 * analytic, "volume {vol} vs {analytic}");
    }

    #[test]
    fn orientation_is_canonicalized_on_load() {
        // Hand-build a single tet with inverted index order.
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let mesh = TetMesh::new("tet", 1e5, vertices, vec![[0, 2, 1, 3]]).unwrap();
        assert!(mesh.tet_volume(0) > 0.0);
    }

    #[test]
    fn degenerate_tet_is_rejected() {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.5, 0.5, 0.0), // coplanar
        ];
        let err = TetMesh::new("flat", 1e5, vertices, vec![[0, 1, 2, 3]]).unwrap_err();
        assert!(matches!(err, Error::Mesh(_)));
    }

    #[test]
    fn out_of_range_index_is_rejected() {
        let vertices = vec![
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(0.0, 1.0, 0.0),
            Point3::new(0.0, 0.0, 1.0),
        ];
        let err = TetMesh::new("bad", 1e5, vertices, vec![[0, 1, 2, 9]]).unwrap_err();
        assert!(matches!(err, Error::Mesh(_)));
    }

    #[test]
    fn save_load_roundtrip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let mesh = ellipsoid([0.03, 0.025, 0.02], 2).unwrap().with_modulus(3.3e5);
        for name in ["mesh.json", "mesh.json.gz"] {
            let path = dir.path().join(name);
            mesh.save(&path).unwrap();
            let loaded = TetMesh::load(&path).unwrap();
            assert_eq!(loaded.id, mesh.id);
            assert_eq!(loaded.tets, mesh.tets);
            assert_eq!(loaded.elastic_modulus_pa, mesh.elastic_modulus_pa);
            for (a, b) in loaded.vertices.iter().zip(&mesh.vertices) {
                assert_eq!(a, b); // JSON float round-trip is exact.
            }
        }
    }

    #[test]
    fn malformed_json_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.json");
        std::fs::write(&path, b"{\"id\": \"x\", \"vertices\": [[0,0").unwrap();
        assert!(TetMesh::load(&path).is_err());
    }

    #[test]
    fn raycast_matches_linear_solve_oracle() {
        let mesh = ellipsoid([0.03, 0.02, 0.025], 3).unwrap().surface();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        for _ in 0..500 {
            let origin = Point3::new(
                0.1 * (rng.gen::<f64>() - 0.5),
                0.1 * (rng.gen::<f64>() - 0.5),
                0.1 * (rng.gen::<f64>() - 0.5),
            );
            let dir = Vector3::new(
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
                rng.gen::<f64>() - 0.5,
            )
            .normalize();
            let fast = raycast(&mesh, &origin, &dir);
            let slow = raycast_oracle(&mesh, &origin, &dir);
            match (fast, slow) {
                (None, None) => {}
                (Some(f), Some(s)) => {
                    assert_eq!(f.tri, s.tri);
                    assert!((f.t - s.t).abs() < 1e-9, "t mismatch: {} vs {}", f.t, s.t);
                    hits += 1;
                }
                other => panic!("hit/miss disagreement: {other:?}"),
            }
        }
        assert!(hits > 50, "too few hits ({hits}) for a meaningful comparison");
    }

    #[test]
    fn grid_nearest_neighbor_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let a: Vec<Point3<f64>> = (0..300)
                .map(|_| Point3::new(rng.gen(), rng.gen(), rng.gen()))
                .collect();
            let b: Vec<Point3<f64>> = (0..250)
                .map(|_| Point3::new(rng.gen::<f64>() + 0.3, rng.gen(), rng.gen()))
                .collect();
            let fast = mean_nn_distance(&a, &b);
            let slow = brute_mean_nn(&a, &b);
            assert!((fast - slow).abs() <= 1e-12, "grid NN {fast} vs brute {slow}");
        }
    }

    #[test]
    fn chamfer_is_zero_on_identical_surfaces_and_grows_with_offset() {
        let a = cuboid([0.04, 0.04, 0.04], 2).unwrap().surface();
        assert_eq!(chamfer_mm(&a, &a, 512, 3).unwrap(), 0.0);

        let mut shifted = a.clone();
        for v in &mut shifted.vertices {
            v.x += 0.002;
        }
        let d = chamfer_mm(&a, &shifted, 512, 3).unwrap();
        assert!(d > 0.2 && d < 2.0, "2 mm x-offset gave chamfer {d} mm");
    }

    #[test]
    fn surface_sampling_is_area_uniform_across_faces() {
        // On a cube, each of the six faces should receive ~1/6 of samples.
        let surface = cuboid([0.02, 0.02, 0.02], 2).unwrap().surface();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let points = surface.sample_points(6000, &mut rng);
        let mut per_face = [0usize; 6];
        for p in &points {
            let (ax, sign) = (0..3)
                .map(|k| (k, p[k]))
                .max_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap())
                .map(|(k, v)| (k, v > 0.0))
                .unwrap();
            per_face[2 * ax + sign as usize] += 1;
        }
        for &count in &per_face {
            assert!((800..1200).contains(&count), "face counts skewed: {per_face:?}");
        }
    }
}
