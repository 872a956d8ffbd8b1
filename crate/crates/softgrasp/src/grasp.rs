//! Parallel-jaw gripper model, antipodal grasp sampling, joint closure, and
//! contact extraction.
//!
//! The gripper is two square finger pads, mirror-symmetric about the origin
//! of its local frame, closing along the local x axis. A grasp is a rigid
//! pose of that frame plus per-finger closure travels `p_g` (how far each pad
//! slides inward before first touching the object) and a squeeze force.
//!
//! Candidate grasps come from antipodal sampling: pick a surface point, cast
//! a ray through the object along the inward normal, and center the gripper
//! on the chord, generating several rolls about the closing axis per point.

use std::collections::BTreeSet;
use std::path::Path;

use nalgebra::{Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fem::DEFAULT_PEAK_FORCE_N;
use crate::mesh::{raycast, TetMesh, TriMesh};
use crate::{Error, Result};

/// Gripper-to-object pairs closer than this (in meters) become contacts.
/// With the default pad grid (5 mm vertex spacing) every touching object
/// vertex pairs with its few nearest pad vertices.
pub const DEFAULT_CONTACT_EPS_M: f64 = 5e-3;

/// Fraction of the full span kept as clearance when accepting a chord.
const OPENING_CLEARANCE: f64 = 0.02;

/// A two-finger parallel-jaw gripper with square pads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperModel {
    /// Pad edge lengths (y and z extents in the local frame), m.
    pub pad_size: [f64; 2],
    /// Fully-open distance between the pad planes, m.
    pub w_open: f64,
    /// Vertices per pad edge (a `pad_res x pad_res` grid per pad).
    pub pad_res: usize,
}

impl Default for GripperModel {
    fn default() -> Self {
        GripperModel { pad_size: [0.02, 0.02], w_open: 0.08, pad_res: 5 }
    }
}

impl GripperModel {
    /// Vertices of both pads in the local frame at full opening: pad 0 on the
    /// plane `x = -w_open/2` (closing toward +x), pad 1 mirrored.
    pub fn vertices_local(&self) -> Vec<Point3<f64>> {
        let n = self.pad_res;
        let mut verts = Vec::with_capacity(2 * n * n);
        for pad in 0..2 {
            let x = if pad == 0 { -self.w_open / 2.0 } else { self.w_open / 2.0 };
            for i in 0..n {
                for j in 0..n {
                    verts.push(Point3::new(
                        x,
                        self.pad_size[0] * (i as f64 / (n - 1) as f64 - 0.5),
                        self.pad_size[1] * (j as f64 / (n - 1) as f64 - 0.5),
                    ));
                }
            }
        }
        verts
    }

    /// Pad index (0 or 1) of each local vertex.
    pub fn pad_of_vertex(&self) -> Vec<usize> {
        let per_pad = self.pad_res * self.pad_res;
        (0..2 * per_pad).map(|v| v / per_pad).collect()
    }

    /// Triangles of both pad grids (two per grid cell), indices into
    /// [`Self::vertices_local`].
    pub fn tris_local(&self) -> Vec<[usize; 3]> {
        let n = self.pad_res;
        let mut tris = Vec::new();
        for pad in 0..2 {
            let base = pad * n * n;
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let v00 = base + i * n + j;
                    let v01 = v00 + 1;
                    let v10 = v00 + n;
                    let v11 = v10 + 1;
                    tris.push([v00, v10, v11]);
                    tris.push([v00, v11, v01]);
                }
            }
        }
        tris
    }

    /// Unique undirected edges of the pad triangulations, ascending pairs.
    pub fn edges_local(&self) -> Vec<[usize; 2]> {
        let mut set = BTreeSet::new();
        for tri in self.tris_local() {
            for (a, b) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                set.insert([a.min(b), a.max(b)]);
            }
        }
        set.into_iter().collect()
    }

    /// Local inward closing direction of each finger.
    pub fn closing_dirs_local(&self) -> [Vector3<f64>; 2] {
        [Vector3::x(), -Vector3::x()]
    }
}

/// Rigid pose of the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspPose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl GraspPose {
    /// Packs as `[qw, qx, qy, qz, tx, ty, tz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let q = self.rotation.quaternion();
        let t = self.translation;
        [q.w, q.i, q.j, q.k, t.x, t.y, t.z]
    }

    /// Unpacks from `[qw, qx, qy, qz, tx, ty, tz]`, normalizing the
    /// quaternion; rejects quaternions far from unit length.
    pub fn from_array(a: &[f64; 7]) -> Result<Self> {
        let q = Quaternion::new(a[0], a[1], a[2], a[3]);
        let norm = q.norm();
        if !(0.99..=1.01).contains(&norm) {
            return Err(Error::Grasp(format!(
                "pose quaternion norm {norm:.6} is not close to 1"
            )));
        }
        Ok(GraspPose {
            rotation: UnitQuaternion::from_quaternion(q),
            translation: Vector3::new(a[4], a[5], a[6]),
        })
    }

    pub fn transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation * p + self.translation
    }

    pub fn transform_vector(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * v
    }

    /// Inverse-transforms a world point into the gripper frame.
    pub fn inverse_transform_point(&self, p: &Point3<f64>) -> Point3<f64> {
        self.rotation.inverse() * Point3::from(p.coords - self.translation)
    }

    /// Right-composes a local-frame increment: translation `t` and rotation
    /// `exp([omega])`, both expressed in the gripper's own frame.
    pub fn compose_local(&self, t: &Vector3<f64>, omega: &Vector3<f64>) -> GraspPose {
        let dr = UnitQuaternion::from_scaled_axis(*omega);
        GraspPose {
            rotation: self.rotation * dr,
            translation: self.rotation * t + self.translation,
        }
    }
}

/// One candidate grasp: pose, per-finger closure travel, squeeze force.
#[derive(Debug, Clone)]
pub struct Grasp {
    pub pose: GraspPose,
    pub p_g: [f64; 2],
    pub f_g: f64,
}

/// The gripper posed in world coordinates with fingers closed by `p_g`.
#[derive(Debug, Clone)]
pub struct PosedGripper {
    /// Closed vertex positions in the gripper's local frame.
    pub vertices_local: Vec<Point3<f64>>,
    /// Closed vertex positions in world coordinates.
    pub vertices_world: Vec<Point3<f64>>,
    pub pad_of_vertex: Vec<usize>,
    /// Pad-grid edges (valid for any closure since pads move rigidly).
    pub edges: Vec<[usize; 2]>,
    /// World-frame inward closing direction of each finger.
    pub closing_dirs_world: [Vector3<f64>; 2],
    pub pose: GraspPose,
    pub p_g: [f64; 2],
}

/// Poses the gripper and slides each pad inward by its closure travel.
pub fn pose_gripper(gripper: &GripperModel, pose: &GraspPose, p_g: [f64; 2]) -> PosedGripper {
    let pad_of_vertex = gripper.pad_of_vertex();
    let dirs_local = gripper.closing_dirs_local();
    let vertices_local: Vec<Point3<f64>> = gripper
        .vertices_local()
        .iter()
        .zip(&pad_of_vertex)
        .map(|(v, &pad)| v + dirs_local[pad] * p_g[pad])
        .collect();
    let vertices_world = vertices_local.iter().map(|v| pose.transform_point(v)).collect();
    PosedGripper {
        vertices_local,
        vertices_world,
        pad_of_vertex,
        edges: gripper.edges_local(),
        closing_dirs_world: [
            pose.transform_vector(&dirs_local[0]),
            pose.transform_vector(&dirs_local[1]),
        ],
        pose: *pose,
        p_g,
    }
}

/// Computes how far each pad travels before first touching an object vertex
/// inside its sweep window (the pad rectangle extruded along the closing
/// axis). Fails when a window is empty or the object already crosses a pad
/// plane at full opening.
pub fn compute_joint_closure(
    mesh: &TetMesh,
    gripper: &GripperModel,
    pose: &GraspPose,
) -> Result<[f64; 2]> {
    let half_w = gripper.w_open / 2.0;
    let (half_y, half_z) = (gripper.pad_size[0] / 2.0, gripper.pad_size[1] / 2.0);
    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut in_window = 0usize;
    for v in &mesh.vertices {
        let local = pose.inverse_transform_point(v);
        if local.y.abs() <= half_y && local.z.abs() <= half_z {
            in_window += 1;
            min_x = min_x.min(local.x);
            max_x = max_x.max(local.x);
        }
    }
    if in_window == 0 {
        return Err(Error::Grasp("no object vertices inside the finger sweep windows".into()));
    }
    let p_g = [min_x + half_w, half_w - max_x];
    for (finger, &p) in p_g.iter().enumerate() {
        if !(0.0..=gripper.w_open).contains(&p) {
            return Err(Error::Grasp(format!(
                "finger {finger} closure {p:.4} m outside [0, w_open]: object crosses the pad plane"
            )));
        }
    }
    Ok(p_g)
}

/// Gripper-to-object vertex pairs within tolerance, split per finger.
#[derive(Debug, Clone)]
pub struct ContactAssignment {
    /// `(gripper_vertex, object_vertex)` pairs, sorted.
    pub pairs: Vec<(usize, usize)>,
    /// Object vertices touched by each finger (sorted, deduplicated).
    pub object_nodes_per_finger: [Vec<usize>; 2],
}

impl ContactAssignment {
    /// Number of undirected contact pairs.
    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn both_fingers_touch(&self) -> bool {
        !self.object_nodes_per_finger[0].is_empty()
            && !self.object_nodes_per_finger[1].is_empty()
    }
}

/// Finds all gripper/object vertex pairs within `eps`, bucketing object
/// vertices on a uniform grid of cell size `eps` so only 27 neighboring
/// cells are scanned per gripper vertex. An exhaustive pair scan gives
/// identical output and serves as the test oracle.
pub fn find_contacts(
    mesh: &TetMesh,
    posed: &PosedGripper,
    eps: f64,
) -> Result<ContactAssignment> {
    if !(eps > 0.0) {
        return Err(Error::Grasp(format!("contact tolerance must be positive, got {eps}")));
    }
    let key = |p: &Point3<f64>| -> [i64; 3] {
        [
            (p.x / eps).floor() as i64,
            (p.y / eps).floor() as i64,
            (p.z / eps).floor() as i64,
        ]
    };
    let mut grid: std::collections::BTreeMap<[i64; 3], Vec<usize>> = Default::default();
    for (i, v) in mesh.vertices.iter().enumerate() {
        grid.entry(key(v)).or_default().push(i);
    }
    let mut pairs = Vec::new();
    for (g, gv) in posed.vertices_world.iter().enumerate() {
        let center = key(gv);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let cell = [center[0] + dx, center[1] + dy, center[2] + dz];
                    if let Some(indices) = grid.get(&cell) {
                        for &o in indices {
                            if (mesh.vertices[o] - gv).norm() <= eps {
                                pairs.push((g, o));
                            }
                        }
                    }
                }
            }
        }
    }
    pairs.sort_unstable();
    let mut per_finger: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for &(g, o) in &pairs {
        per_finger[posed.pad_of_vertex[g]].push(o);
    }
    for nodes in &mut per_finger {
        nodes.sort_unstable();
        nodes.dedup();
    }
    if pairs.is_empty() {
        return Err(Error::Grasp("no contact pairs within tolerance".into()));
    }
    Ok(ContactAssignment { pairs, object_nodes_per_finger: per_finger })
}

// ---------------------------------------------------------------------------
// Antipodal sampling
// ---------------------------------------------------------------------------

/// Samples `n_points` antipodal surface chords and emits `n_rotations`
/// grasps per chord (rolls about the closing axis at regular angles).
///
/// A chord is kept only if the inward ray hits the far side, the required
/// opening fits the gripper span with clearance, and every roll both closes
/// onto the object and touches it with both fingers. Rejected chords are
/// resampled; more than `100 * n_points` attempts is an error.
pub fn sample_antipodal(
    mesh: &TetMesh,
    gripper: &GripperModel,
    n_points: usize,
    n_rotations: usize,
    seed: u64,
) -> Result<Vec<Grasp>> {
    if n_points == 0 || n_rotations == 0 {
        return Err(Error::Grasp("need at least one point and one rotation".into()));
    }
    let surface = mesh.surface();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut grasps = Vec::with_capacity(n_points * n_rotations);
    let mut accepted_points = 0usize;
    let mut attempts = 0usize;
    while accepted_points < n_points {
        attempts += 1;
        if attempts > 100 * n_points {
            return Err(Error::Grasp(format!(
                "antipodal sampling exhausted {attempts} attempts for {n_points} points"
            )));
        }
        let Some(candidate) = try_chord(mesh, gripper, &surface, n_rotations, &mut rng)? else {
            continue;
        };
        grasps.extend(candidate);
        accepted_points += 1;
    }
    Ok(grasps)
}

/// Attempts one surface point; returns all rolls for its chord, or `None` if
/// any stage rejects it.
fn try_chord(
    mesh: &TetMesh,
    gripper: &GripperModel,
    surface: &TriMesh,
    n_rotations: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Vec<Grasp>>> {
    // One area-uniform surface point and its triangle normal.
    let tri = pick_triangle_by_area(surface, rng);
    let normal = surface.tri_normal(tri);
    let [a, b, c] = surface.tris[tri];
    let (r1, r2): (f64, f64) = (rng.gen(), rng.gen());
    let sqrt_r1 = r1.sqrt();
    let (u, v) = (1.0 - sqrt_r1, sqrt_r1 * (1.0 - r2));
    let w = 1.0 - u - v;
    let p = Point3::from(
        surface.vertices[a].coords * u
            + surface.vertices[b].coords * v
            + surface.vertices[c].coords * w,
    );

    // Opposing ray along the inward normal.
    let Some(hit) = raycast(surface, &p, &(-normal)) else {
        return Ok(None);
    };
    if hit.t > gripper.w_open * (1.0 - OPENING_CLEARANCE) {
        return Ok(None);
    }
    let q = p - normal * hit.t;
    let center = nalgebra::center(&p, &q);

    // Deterministic frame with the closing axis on the chord.
    let x_axis = normal;
    let reference = if x_axis.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
    let y_axis = (reference - x_axis * reference.dot(&x_axis)).normalize();
    let z_axis = x_axis.cross(&y_axis);
    let base_rot = UnitQuaternion::from_rotation_matrix(
        &Rotation3::from_basis_unchecked(&[x_axis, y_axis, z_axis]),
    );

    let mut out = Vec::with_capacity(n_rotations);
    for k in 0..n_rotations {
        let roll = UnitQuaternion::from_axis_angle(
            &nalgebra::Unit::new_normalize(Vector3::x()),
            std::f64::consts::TAU * k as f64 / n_rotations as f64,
        );
        let pose = GraspPose { rotation: base_rot * roll, translation: center.coords };
        let Ok(p_g) = compute_joint_closure(mesh, gripper, &pose) else {
            return Ok(None);
        };
        let posed = pose_gripper(gripper, &pose, p_g);
        match find_contacts(mesh, &posed, DEFAULT_CONTACT_EPS_M) {
            Ok(contacts) if contacts.both_fingers_touch() => {
                out.push(Grasp { pose, p_g, f_g: DEFAULT_PEAK_FORCE_N });
            }
            _ => return Ok(None),
        }
    }
    Ok(Some(out))
}

fn pick_triangle_by_area(surface: &TriMesh, rng: &mut impl Rng) -> usize {
    let mut cumulative = Vec::with_capacity(surface.tris.len());
    let mut total = 0.0;
    for t in 0..surface.tris.len() {
        total += surface.tri_area(t);
        cumulative.push(total);
    }
    let pick = rng.gen::<f64>() * total;
    cumulative.partition_point(|&cml| cml < pick).min(surface.tris.len() - 1)
}

// ---------------------------------------------------------------------------
// Grasp list files
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GraspFileEntry {
    #[serde(rename = "T")]
    t: [f64; 7],
    p_g: [f64; 2],
    #[serde(rename = "F_g")]
    f_g: f64,
}

#[derive(Serialize, Deserialize)]
struct GraspFile {
    object_id: String,
    grasps: Vec<GraspFileEntry>,
}

/// Saves a grasp list `{"object_id", "grasps": [{"T", "p_g", "F_g"}]}`.
pub fn save_grasp_list(path: impl AsRef<Path>, object_id: &str, grasps: &[Grasp]) -> Result<()> {
    let file = GraspFile {
        object_id: object_id.to_string(),
        grasps: grasps
            .iter()
            .map(|g| GraspFileEntry { t: g.pose.to_array(), p_g: g.p_g, f_g: g.f_g })
            .collect(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

/// Loads a grasp list, validating quaternions and forces.
pub fn load_grasp_list(path: impl AsRef<Path>) -> Result<(String, Vec<Grasp>)> {
    let file: GraspFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    let grasps = file
        .grasps
        .iter()
        .map(|e| {
            if !(e.f_g > 0.0) {
                return Err(Error::Grasp(format!("non-positive squeeze force {}", e.f_g)));
            }
            Ok(Grasp { pose: GraspPose::from_array(&e.t)?, p_g: e.p_g, f_g: e.f_g })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((file.object_id, grasps))
}
