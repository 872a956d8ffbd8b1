//! Linear-elastic tet4 finite-element oracle.
//!
//! Given a [`TetMesh`], an isotropic [`Material`], and a balanced
//! [`ContactLoad`], the oracle solves the free-floating equilibrium system
//! `K u = f` with a Jacobi-preconditioned conjugate-gradient solver that
//! projects the six rigid-body modes out of the right-hand side and every
//! iterate. Element stresses are recovered as `sigma = D B u`, averaged
//! per-vertex as full tensors, and only then reduced to von Mises scalars.
//!
//! Because the model is linear, a grasp force trajectory is a single solve at
//! the peak force followed by explicit per-substep scaling; the scale factor
//! is recorded on every output.

use nalgebra::{Matrix3, Point3, SMatrix, Vector3};

use crate::mesh::TetMesh;
use crate::{Error, Result};

/// Fixed Poisson ratio for the soft materials this pipeline targets.
pub const DEFAULT_POISSON_RATIO: f64 = 0.3;

/// Peak squeeze force of the default trajectory, in newtons.
pub const DEFAULT_PEAK_FORCE_N: f64 = 15.0;

/// Substep count of the default trajectory.
pub const DEFAULT_SUBSTEPS: usize = 50;

/// Relative residual tolerance for the CG solve (`||r|| / ||f||`).
pub const CG_TOLERANCE: f64 = 1e-8;

/// CG iteration budget as a multiple of the DOF count.
pub const CG_MAX_ITER_FACTOR: usize = 10;

type Mat6 = SMatrix<f64, 6, 6>;
type Mat6x12 = SMatrix<f64, 6, 12>;
type Mat12 = SMatrix<f64, 12, 12>;

/// Isotropic linear-elastic material.
#[derive(Debug, Clone, Copy)]
pub struct Material {
    pub elastic_modulus_pa: f64,
    pub poisson_ratio: f64,
}

impl Material {
    pub fn new(elastic_modulus_pa: f64, poisson_ratio: f64) -> Result<Self> {
        if !(elastic_modulus_pa > 0.0) {
            return Err(Error::Fem(format!(
                "elastic modulus must be positive, got {elastic_modulus_pa}"
            )));
        }
        if !(0.0..0.5).contains(&poisson_ratio) {
            return Err(Error::Fem(format!(
                "poisson ratio must be in [0, 0.5), got {poisson_ratio}"
            )));
        }
        Ok(Material { elastic_modulus_pa, poisson_ratio })
    }

    /// Material with the mesh's modulus and the default Poisson ratio.
    pub fn from_mesh(mesh: &TetMesh) -> Result<Self> {
        Material::new(mesh.elastic_modulus_pa, DEFAULT_POISSON_RATIO)
    }

    /// 6x6 constitutive matrix relating engineering strain
    /// `(exx, eyy, ezz, gxy, gyz, gzx)` to stress
    /// `(sxx, syy, szz, txy, tyz, tzx)`.
    pub fn d_matrix(&self) -> Mat6 {
        let e = self.elastic_modulus_pa;
        let nu = self.poisson_ratio;
        let lambda = e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu));
        let mu = e / (2.0 * (1.0 + nu));
        let mut d = Mat6::zeros();
        for i in 0..3 {
            for j in 0..3 {
                d[(i, j)] = lambda;
            }
            d[(i, i)] = lambda + 2.0 * mu;
            d[(i + 3, i + 3)] = mu;
        }
        d
    }
}

/// Per-vertex output fields of one force substep.
///
/// Oracle-produced fields satisfy `stress_pa[i] >= 0` (von Mises is a norm)
/// and all entries finite; surrogate predictions reuse this type but may dip
/// slightly negative on stress.
#[derive(Debug, Clone)]
pub struct FieldOutput {
    /// Per-vertex von Mises stress, Pa.
    pub stress_pa: Vec<f64>,
    /// Per-vertex displacement, m.
    pub displacement_m: Vec<Vector3<f64>>,
    /// Total squeeze force this output corresponds to, N.
    pub force_level_n: f64,
}

impl FieldOutput {
    /// Mean von Mises stress over all vertices.
    pub fn mean_stress_pa(&self) -> f64 {
        self.stress_pa.iter().sum::<f64>() / self.stress_pa.len() as f64
    }

    /// Mean displacement magnitude over all vertices.
    pub fn mean_deformation_m(&self) -> f64 {
        self.displacement_m.iter().map(|d| d.norm()).sum::<f64>()
            / self.displacement_m.len() as f64
    }

    /// Checks the oracle-side invariants (finiteness, non-negative stress).
    pub fn validate(&self) -> Result<()> {
        if self.stress_pa.len() != self.displacement_m.len() {
            return Err(Error::Fem("field length mismatch".into()));
        }
        for (&s, d) in self.stress_pa.iter().zip(&self.displacement_m) {
            if !s.is_finite() || s < 0.0 || !d.iter().all(|c| c.is_finite()) {
                return Err(Error::Fem("non-finite or negative field entry".into()));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Element matrices
// ---------------------------------------------------------------------------

/// Constant shape-function gradients of a tet4 element, one row per node.
fn shape_gradients(verts: &[Point3<f64>; 4]) -> Result<(SMatrix<f64, 4, 3>, f64)> {
    let j = Matrix3::from_columns(&[
        verts[1] - verts[0],
        verts[2] - verts[0],
        verts[3] - verts[0],
    ]);
    let det = j.determinant();
    let volume = det / 6.0;
    if volume <= 0.0 {
        return Err(Error::Fem(format!("element volume {volume:.3e} not positive")));
    }
    let j_inv_t = j
        .try_inverse()
        .ok_or_else(|| Error::Fem("element jacobian not invertible".into()))?
        .transpose();
    // Natural-coordinate shape functions: N_i = xi_i for i = 1..3, and
    // N_0 = 1 - xi_1 - xi_2 - xi_3, so grad N_i is column i of J^-T.
    let mut grads = SMatrix::<f64, 4, 3>::zeros();
    for i in 0..3 {
        let g = j_inv_t.column(i);
        for k in 0..3 {
            grads[(i + 1, k)] = g[k];
            grads[(0, k)] -= g[k];
        }
    }
    Ok((grads, volume))
}

/// 6x12 strain-displacement matrix in engineering-strain convention.
fn b_matrix(grads: &SMatrix<f64, 4, 3>) -> Mat6x12 {
    let mut b = Mat6x12::zeros();
    for node in 0..4 {
        let (gx, gy, gz) = (grads[(node, 0)], grads[(node, 1)], grads[(node, 2)]);
        let col = 3 * node;
        b[(0, col)] = gx;
        b[(1, col + 1)] = gy;
        b[(2, col + 2)] = gz;
        b[(3, col)] = gy; //  gxy = du/dy + dv/dx
        b[(3, col + 1)] = gx;
        b[(4, col + 1)] = gz; // gyz = dv/dz + dw/dy
        b[(4, col + 2)] = gy;
        b[(5, col)] = gz; //  gzx = du/dz + dw/dx
        b[(5, col + 2)] = gx;
    }
    b
}

/// Element stiffness `Ke = V * B^T D B` for one tet.
pub fn element_stiffness(verts: &[Point3<f64>; 4], material: &Material) -> Result<Mat12> {
    let (grads, volume) = shape_gradients(verts)?;
    let b = b_matrix(&grads);
    Ok(b.transpose() * material.d_matrix() * b * volume)
}

// ---------------------------------------------------------------------------
// Sparse assembly
// ---------------------------------------------------------------------------

/// Compressed sparse row matrix (square, symmetric by construction here).
#[derive(Debug, Clone)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub col_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl Csr {
    /// Builds from unsorted triplets, summing duplicates.
    fn from_triplets(n: usize, mut triplets: Vec<(u32, u32, f64)>) -> Csr {
        triplets.sort_unstable_by_key(|&(r, c, _)| (r, c));
        let mut row_counts = vec![0usize; n];
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        let mut prev: Option<(u32, u32)> = None;
        for (r, c, v) in triplets {
            if prev == Some((r, c)) {
                *values.last_mut().expect("merged entry exists") += v;
            } else {
                col_idx.push(c as usize);
                values.push(v);
                row_counts[r as usize] += 1;
                prev = Some((r, c));
            }
        }
        let mut row_ptr = vec![0usize; n + 1];
        for i in 0..n {
            row_ptr[i + 1] = row_ptr[i] + row_counts[i];
        }
        Csr { n, row_ptr, col_idx, values }
    }

    /// `y = A x`.
    pub fn spmv(&self, x: &[f64], y: &mut [f64]) {
        for row in 0..self.n {
            let mut acc = 0.0;
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                acc += self.values[k] * x[self.col_idx[k]];
            }
            y[row] = acc;
        }
    }

    /// Main diagonal (zeros where absent).
    pub fn diagonal(&self) -> Vec<f64> {
        let mut d = vec![0.0; self.n];
        for row in 0..self.n {
            for k in self.row_ptr[row]..self.row_ptr[row + 1] {
                if self.col_idx[k] == row {
                    d[row] += self.values[k];
                }
            }
        }
        d
    }

    /// Number of stored entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }
}

/// Assembles the global stiffness matrix (3 DOF per vertex).
pub fn assemble_stiffness(mesh: &TetMesh, material: &Material) -> Result<Csr> {
    let n_dof = 3 * mesh.vertices.len();
    let mut triplets = Vec::with_capacity(144 * mesh.tets.len());
    for tet in &mesh.tets {
        let verts = [
            mesh.vertices[tet[0]],
            mesh.vertices[tet[1]],
            mesh.vertices[tet[2]],
            mesh.vertices[tet[3]],
        ];
        let ke = element_stiffness(&verts, material)?;
        for a in 0..4 {
            for b in 0..4 {
                for i in 0..3 {
                    for j in 0..3 {
                        let val = ke[(3 * a + i, 3 * b + j)];
                        triplets.push((
                            (3 * tet[a] + i) as u32,
                            (3 * tet[b] + j) as u32,
                            val,
                        ));
                    }
                }
            }
        }
    }
    Ok(Csr::from_triplets(n_dof, triplets))
}

// ---------------------------------------------------------------------------
// Contact loads
// ---------------------------------------------------------------------------

/// A self-equilibrated nodal load for one grasp at one force level.
#[derive(Debug, Clone)]
pub struct ContactLoad {
    /// Per-vertex force, N; zero away from the contact patches.
    pub force_per_vertex: Vec<Vector3<f64>>,
    /// Total squeeze force, N.
    pub force_level_n: f64,
    /// Vertices carrying load (union of both finger patches).
    pub loaded: Vec<usize>,
}

/// Distributes a squeeze force `f_g` over the two finger contact patches and
/// balances it:
///
/// 1. each finger's object nodes share `f_g / 2` equally along that finger's
///    closing direction,
/// 2. the net force is removed uniformly from the loaded nodes,
/// 3. the net torque is removed by solving a 3x3 system for a correction
///    field `c_i = lambda x rho_i` about the loaded-patch mean, which leaves
///    the net force untouched.
pub fn build_contact_load(
    mesh: &TetMesh,
    finger_nodes: [&[usize]; 2],
    closing_dirs: [Vector3<f64>; 2],
    f_g: f64,
) -> Result<ContactLoad> {
    if !(f_g > 0.0) {
        return Err(Error::Fem(format!("squeeze force must be positive, got {f_g}")));
    }
    if finger_nodes[0].is_empty() || finger_nodes[1].is_empty() {
        return Err(Error::Fem(
            "both fingers must contact the object to build a load".into(),
        ));
    }
    let n = mesh.vertices.len();
    let mut force = vec![Vector3::zeros(); n];
    for f in 0..2 {
        let share = (f_g / 2.0) / finger_nodes[f].len() as f64;
        let dir = closing_dirs[f].normalize();
        for &v in finger_nodes[f] {
            if v >= n {
                return Err(Error::Fem(format!("contact node {v} out of range")));
            }
            force[v] += dir * share;
        }
    }
    let mut loaded: Vec<usize> = finger_nodes[0]
        .iter()
        .chain(finger_nodes[1])
        .copied()
        .collect();
    loaded.sort_unstable();
    loaded.dedup();

    balance_load(mesh, &mut force, &loaded, f_g)?;
    Ok(ContactLoad { force_per_vertex: force, force_level_n: f_g, loaded })
}

/// Removes net force and net torque from a nodal load, spreading corrections
/// over `loaded` only. Fails if the torque residual cannot be removed (e.g.
/// all loaded nodes colinear with the residual torque axis).
fn balance_load(
    mesh: &TetMesh,
    force: &mut [Vector3<f64>],
    loaded: &[usize],
    f_g: f64,
) -> Result<()> {
    let centroid = mesh.centroid();
    let diag = bbox_diagonal(mesh);

    // Net force: uniform subtraction.
    let net: Vector3<f64> = loaded.iter().map(|&v| force[v]).sum();
    let share = net / loaded.len() as f64;
    for &v in loaded {
        force[v] -= share;
    }

    // Net torque (reference point is irrelevant once net force is zero, but
    // report about the object centroid as the physical quantity of record).
    let torque: Vector3<f64> = loaded
        .iter()
        .map(|&v| (mesh.vertices[v] - centroid).cross(&force[v]))
        .sum();

    // Correction field c_i = lambda x rho'_i with rho' about the loaded-patch
    // mean: sums to zero (net force preserved) and adds torque A' lambda with
    // A' = sum(|rho'|^2 I - rho' rho'^T).
    let patch_mean: Vector3<f64> = loaded
        .iter()
        .map(|&v| mesh.vertices[v].coords)
        .sum::<Vector3<f64>>()
        / loaded.len() as f64;
    let mut a = Matrix3::zeros();
    for &v in loaded {
        let rho = mesh.vertices[v].coords - patch_mean;
        a += Matrix3::identity() * rho.norm_squared() - rho * rho.transpose();
    }
    let lambda = a
        .svd(true, true)
        .solve(&(-torque), 1e-12)
        .map_err(|e| Error::Fem(format!("torque balance failed: {e}")))?;
    for &v in loaded {
        let rho = mesh.vertices[v].coords - patch_mean;
        force[v] += lambda.cross(&rho);
    }

    // Verify both invariants actually hold for this patch geometry.
    let net: Vector3<f64> = loaded.iter().map(|&v| force[v]).sum();
    let torque: Vector3<f64> = loaded
        .iter()
        .map(|&v| (mesh.vertices[v] - centroid).cross(&force[v]))
        .sum();
    if net.norm() > 1e-9 * f_g || torque.norm() > 1e-9 * f_g * diag {
        return Err(Error::Fem(format!(
            "load could not be balanced: |F| = {:.3e} N, |tau| = {:.3e} N m",
            net.norm(),
            torque.norm()
        )));
    }
    Ok(())
}

fn bbox_diagonal(mesh: &TetMesh) -> f64 {
    let mut lo = mesh.vertices[0];
    let mut hi = mesh.vertices[0];
    for v in &mesh.vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (hi - lo).norm()
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

/// Orthonormal basis of the six rigid-body modes over the mesh DOFs.
struct RigidModes {
    modes: Vec<Vec<f64>>,
}

impl RigidModes {
    fn build(mesh: &TetMesh) -> RigidModes {
        let n = mesh.vertices.len();
        let centroid = mesh.centroid();
        let mut modes: Vec<Vec<f64>> = Vec::with_capacity(6);
        for axis in 0..3 {
            let mut m = vec![0.0; 3 * n];
            for v in 0..n {
                m[3 * v + axis] = 1.0;
            }
            modes.push(m);
        }
        for axis in 0..3 {
            let e = Vector3::ith(axis, 1.0);
            let mut m = vec![0.0; 3 * n];
            for v in 0..n {
                let w = e.cross(&(mesh.vertices[v] - centroid));
                m[3 * v] = w.x;
                m[3 * v + 1] = w.y;
                m[3 * v + 2] = w.z;
            }
            modes.push(m);
        }
        // Modified Gram-Schmidt; translations are already mutually orthogonal
        // and rotation modes sum componentwise to zero, but orthonormalize
        // everything for arbitrary vertex distributions.
        for i in 0..6 {
            for j in 0..i {
                let d = dot(&modes[i], &modes[j]);
                let (head, tail) = modes.split_at_mut(i);
                for (x, &q) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= d * q;
                }
            }
            let norm = dot(&modes[i], &modes[i]).sqrt();
            for x in &mut modes[i] {
                *x /= norm;
            }
        }
        RigidModes { modes }
    }

    fn project_out(&self, v: &mut [f64]) {
        for q in &self.modes {
            let d = dot(v, q);
            for (x, &qi) in v.iter_mut().zip(q) {
                *x -= d * qi;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Result of one equilibrium solve.
#[derive(Debug, Clone)]
pub struct FemSolution {
    pub displacement_m: Vec<Vector3<f64>>,
    pub cg_iterations: usize,
}

/// Solves `K u = f` for the free-floating mesh. The rigid-body modes are
/// projected out of `f` and of every preconditioned residual, so CG operates
/// entirely in the complement of the null space; the returned displacement
/// has zero net translation and zero net infinitesimal rotation.
pub fn solve_displacement(
    mesh: &TetMesh,
    material: &Material,
    load: &ContactLoad,
) -> Result<FemSolution> {
    let stiffness = assemble_stiffness(mesh, material)?;
    solve_with_stiffness(mesh, &stiffness, load)
}

/// Same as [`solve_displacement`] but reuses a pre-assembled stiffness
/// matrix (several loads on one mesh).
pub fn solve_with_stiffness(
    mesh: &TetMesh,
    stiffness: &Csr,
    load: &ContactLoad,
) -> Result<FemSolution> {
    let n_dof = stiffness.n;
    let mut f = vec![0.0; n_dof];
    for (v, force) in load.force_per_vertex.iter().enumerate() {
        f[3 * v] = force.x;
        f[3 * v + 1] = force.y;
        f[3 * v + 2] = force.z;
    }

    let modes = RigidModes::build(mesh);
    modes.project_out(&mut f);
    let f_norm = dot(&f, &f).sqrt();
    if f_norm == 0.0 {
        return Err(Error::Fem("load vector is zero after projection".into()));
    }

    let diag = stiffness.diagonal();
    let inv_diag: Vec<f64> = diag
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d } else { 0.0 })
        .collect();

    let max_iters = CG_MAX_ITER_FACTOR * n_dof;
    let mut x = vec![0.0; n_dof];
    let mut r = f.clone();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(&ri, &di)| ri * di).collect();
    modes.project_out(&mut z);
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut q = vec![0.0; n_dof];

    for iter in 0..max_iters {
        stiffness.spmv(&p, &mut q);
        let pq = dot(&p, &q);
        if pq <= 0.0 {
            return Err(Error::Fem(format!(
                "CG breakdown at iteration {iter}: p^T K p = {pq:.3e}"
            )));
        }
        let alpha = rz / pq;
        for i in 0..n_dof {
            x[i] += alpha * p[i];
            r[i] -= alpha * q[i];
        }
        let r_norm = dot(&r, &r).sqrt();
        if r_norm / f_norm <= CG_TOLERANCE {
            modes.project_out(&mut x);
            return Ok(FemSolution {
                displacement_m: dof_to_vectors(&x),
                cg_iterations: iter + 1,
            });
        }
        for i in 0..n_dof {
            z[i] = r[i] * inv_diag[i];
        }
        modes.project_out(&mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n_dof {
            p[i] = z[i] + beta * p[i];
        }
    }
    Err(Error::Fem(format!(
        "CG did not converge in {max_iters} iterations (relative residual tolerance {CG_TOLERANCE})"
    )))
}

fn dof_to_vectors(x: &[f64]) -> Vec<Vector3<f64>> {
    x.chunks_exact(3)
        .map(|c| Vector3::new(c[0], c[1], c[2]))
        .collect()
}

// ---------------------------------------------------------------------------
// Stress recovery
// ---------------------------------------------------------------------------

/// Von Mises scalar from an engineering stress vector
/// `(sxx, syy, szz, txy, tyz, tzx)`.
pub fn von_mises(s: &[f64; 6]) -> f64 {
    let (sxx, syy, szz, txy, tyz, tzx) = (s[0], s[1], s[2], s[3], s[4], s[5]);
    (0.5 * ((sxx - syy).powi(2) + (syy - szz).powi(2) + (szz - sxx).powi(2))
        + 3.0 * (txy * txy + tyz * tyz + tzx * tzx))
        .sqrt()
}

/// Constant engineering stress `D B u_e` of every element, Pa, in tet order.
pub fn element_stresses(
    mesh: &TetMesh,
    material: &Material,
    displacement: &[Vector3<f64>],
) -> Result<Vec<[f64; 6]>> {
    if displacement.len() != mesh.vertices.len() {
        return Err(Error::Fem("displacement length does not match mesh".into()));
    }
    let d_mat = material.d_matrix();
    let mut out = Vec::with_capacity(mesh.tets.len());
    for tet in &mesh.tets {
        let verts = [
            mesh.vertices[tet[0]],
            mesh.vertices[tet[1]],
            mesh.vertices[tet[2]],
            mesh.vertices[tet[3]],
        ];
        let (grads, _) = shape_gradients(&verts)?;
        let b = b_matrix(&grads);
        let mut u_e = SMatrix::<f64, 12, 1>::zeros();
        for (node, &v) in tet.iter().enumerate() {
            for k in 0..3 {
                u_e[3 * node + k] = displacement[v][k];
            }
        }
        let sigma = d_mat * (b * u_e);
        out.push([sigma[0], sigma[1], sigma[2], sigma[3], sigma[4], sigma[5]]);
    }
    Ok(out)
}

/// Recovers per-vertex fields from a displacement solution: constant element
/// stresses `D B u_e`, unweighted tensor averaging over each vertex's
/// incident elements, then von Mises reduction.
pub fn recover_fields(
    mesh: &TetMesh,
    material: &Material,
    displacement: &[Vector3<f64>],
    force_level_n: f64,
) -> Result<FieldOutput> {
    let n = mesh.vertices.len();
    let element = element_stresses(mesh, material, displacement)?;
    let mut stress_sum = vec![[0.0f64; 6]; n];
    let mut incidence = vec![0usize; n];
    for (tet, sigma) in mesh.tets.iter().zip(&element) {
        for &v in tet {
            for k in 0..6 {
                stress_sum[v][k] += sigma[k];
            }
            incidence[v] += 1;
        }
    }
    let stress_pa: Vec<f64> = stress_sum
        .iter()
        .zip(&incidence)
        .map(|(s, &count)| {
            let mean = [
                s[0] / count as f64,
                s[1] / count as f64,
                s[2] / count as f64,
                s[3] / count as f64,
                s[4] / count as f64,
                s[5] / count as f64,
            ];
            von_mises(&mean)
        })
        .collect();
    let out = FieldOutput {
        stress_pa,
        displacement_m: displacement.to_vec(),
        force_level_n,
    };
    out.validate()?;
    Ok(out)
}

/// Solves a grasp at its peak force and emits one output per substep by
/// explicit linear scaling: substep `k` of `K` carries `k/K` of the peak
/// force and exactly `k/K` of every field value. Returned in ascending force
/// order.
pub fn run_grasp_trajectory(
    mesh: &TetMesh,
    material: &Material,
    load: &ContactLoad,
    substeps: usize,
) -> Result<Vec<FieldOutput>> {
    if substeps == 0 {
        return Err(Error::Fem("trajectory needs at least one substep".into()));
    }
    let solution = solve_displacement(mesh, material, load)?;
    let peak = recover_fields(mesh, material, &solution.displacement_m, load.force_level_n)?;
    Ok((1..=substeps)
        .map(|k| {
            let scale = k as f64 / substeps as f64;
            FieldOutput {
                stress_pa: peak.stress_pa.iter().map(|&s| s * scale).collect(),
                displacement_m: peak.displacement_m.iter().map(|d| d * scale).collect(),
                force_level_n: peak.force_level_n * scale,
            }
        })
        .collect())
}
