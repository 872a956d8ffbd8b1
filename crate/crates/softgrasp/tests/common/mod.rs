//! Shared fixtures for the criterion suite: the analytic bar load, the
//! desk-scale dataset/model presets, and one-line pass/fail reporting.

use std::io::{self, Write as _};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softgrasp::fem::ContactLoad;
use softgrasp::mesh::TetMesh;
use softgrasp::net::{ModelConfig, ModelParams};
use softgrasp::train::{
    generate_dataset, load_dataset, train_model, DataGenConfig, Dataset, ObjectSpec, TrainConfig,
    TrainOutcome, TrainVariant,
};
use tempfile::TempDir;

/// Prints `A<n> PASS: ...` or `A<n> FAIL: ...` directly to the process
/// stdout (bypassing libtest capture so the line always appears), then
/// asserts. Every criterion emits exactly one such line.
pub fn report(criterion: &str, pass: bool, detail: &str) {
    let line = format!("{criterion} {}: {detail}", if pass { "PASS" } else { "FAIL" });
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
    assert!(pass, "{line}");
}

/// Seconds elapsed since `t0`, for budget checks and report lines.
pub fn elapsed_s(t0: Instant) -> f64 {
    t0.elapsed().as_secs_f64()
}

/// Serializes the criteria so their runtime budgets are measured without
/// contention if the harness ever runs tests on multiple threads.
pub fn serial_guard() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    let lock = LOCK.get_or_init(|| Mutex::new(()));
    lock.lock().unwrap_or_else(|poisoned| poisoned.into_inner())
}

// ---------------------------------------------------------------------------
// Analytic bar fixture
// ---------------------------------------------------------------------------

/// Balanced axial end loads on a bar meshed along x: `force_n` pulling +x on
/// the `x = +L/2` face and -x on the opposite face, distributed consistently
/// for a uniform traction (each end-face triangle contributes area/3 to each
/// of its vertices). Net force and net torque are zero by construction.
pub fn axial_bar_load(mesh: &TetMesh, half_length: f64, force_n: f64) -> ContactLoad {
    let surface = mesh.surface();
    let mut weight = vec![0.0f64; mesh.vertices.len()];
    let mut face_area = [0.0f64; 2]; // [-x, +x]
    let tol = 1e-9;
    for (t, tri) in surface.tris.iter().enumerate() {
        for (side, x_face) in [(0usize, -half_length), (1usize, half_length)] {
            if tri.iter().all(|&v| (surface.vertices[v].x - x_face).abs() < tol) {
                let a = surface.tri_area(t);
                face_area[side] += a;
                let sign = if side == 0 { -1.0 } else { 1.0 };
                for &v in tri {
                    weight[v] += sign * a / 3.0;
                }
            }
        }
    }
    assert!(face_area[0] > 0.0 && face_area[1] > 0.0, "bar end faces not found");
    assert!((face_area[0] - face_area[1]).abs() < 1e-12);
    let scale = force_n / face_area[1];
    let mut force_per_vertex = vec![Vector3::zeros(); mesh.vertices.len()];
    let mut loaded = Vec::new();
    for (v, &w) in weight.iter().enumerate() {
        if w != 0.0 {
            force_per_vertex[v] = Vector3::new(w * scale, 0.0, 0.0);
            loaded.push(v);
        }
    }
    ContactLoad { force_per_vertex, force_level_n: force_n, loaded }
}

// ---------------------------------------------------------------------------
// Generic-point parameters for gradient checks
// ---------------------------------------------------------------------------

/// Moves every parameter to a generic point: uniform in (-0.3, 0.3) for
/// weights and biases, near 1 for layer-norm gains. Freshly initialized
/// models have zero decoder rows and symmetric structure that make many
/// directional derivatives vanish; finite differences against those are
/// meaningless noise.
pub fn randomize_params(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    params.visit_params_mut(|name, t| {
        for v in t.data.iter_mut() {
            let u: f64 = rng.gen::<f64>() - 0.5;
            *v = if name.ends_with("ln_g") { 1.0 + 0.3 * u } else { 0.6 * u };
        }
    });
}

// ---------------------------------------------------------------------------
// Desk-scale presets
// ---------------------------------------------------------------------------

/// The single desk object: a palm-sized cuboid at a mesh resolution where
/// dataset generation and training stay inside the runtime budgets.
pub fn desk_object() -> ObjectSpec {
    ObjectSpec::Cuboid { dims: [0.05, 0.035, 0.035], res: 3 }
}

/// 60 grasps x 10 substeps on the desk object, split 80-20 by grasp.
pub fn desk_gen_config() -> DataGenConfig {
    DataGenConfig {
        n_surface_points: 30,
        n_rotations: 2,
        seed: 42,
        ..DataGenConfig::desk_default(desk_object())
    }
}

/// Capacity that trains on the desk dataset in roughly twenty minutes on
/// one core while clearing the held-out rank-correlation bars.
pub fn desk_model_config() -> ModelConfig {
    ModelConfig {
        latent_size: 24,
        message_passing_steps: 4,
        mlp_hidden_width: 48,
        ..ModelConfig::default()
    }
}

pub fn desk_train_config() -> TrainConfig {
    TrainConfig {
        model: desk_model_config(),
        variant: TrainVariant::Full,
        epochs: 100,
        lr_initial: 3e-3,
        lr_final: 1e-4,
        seed: 7,
    }
}

/// 30 grasps x 10 substeps on the desk object, all of them in the train
/// split, for the overfit criterion.
pub fn overfit_gen_config() -> DataGenConfig {
    DataGenConfig {
        n_surface_points: 15,
        n_rotations: 2,
        train_fraction: 1.0,
        seed: 11,
        ..DataGenConfig::desk_default(desk_object())
    }
}

pub fn overfit_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 200,
        lr_final: 1e-5,
        ..desk_train_config()
    }
}

/// The desk dataset and its trained model, built once and shared by the
/// criteria that exercise generalization, refinement, and the ablation.
pub struct DeskArtifacts {
    /// Owns the on-disk dataset for as long as the suite runs.
    pub dir: TempDir,
    pub dataset: Dataset,
    pub outcome: TrainOutcome,
    /// Wall-clock seconds spent generating data and training.
    pub build_s: f64,
}

pub fn desk_artifacts() -> &'static DeskArtifacts {
    static ARTIFACTS: OnceLock<DeskArtifacts> = OnceLock::new();
    ARTIFACTS.get_or_init(|| {
        let t0 = Instant::now();
        let dir = TempDir::new().expect("create desk dataset dir");
        generate_dataset(&desk_gen_config(), dir.path()).expect("generate desk dataset");
        let dataset = load_dataset(dir.path()).expect("load desk dataset");
        let outcome =
            train_model(&dataset.train_records(), &desk_train_config()).expect("train desk model");
        DeskArtifacts { dir, dataset, outcome, build_s: elapsed_s(t0) }
    })
}

/// The ablated model (squeeze force as a raw contact-edge scalar instead of
/// the balanced per-node force field), trained on the same desk dataset.
pub fn raw_force_outcome() -> &'static TrainOutcome {
    static OUTCOME: OnceLock<TrainOutcome> = OnceLock::new();
    OUTCOME.get_or_init(|| {
        let desk = desk_artifacts();
        let config = TrainConfig { variant: TrainVariant::RawForceEdges, ..desk_train_config() };
        train_model(&desk.dataset.train_records(), &config).expect("train ablated model")
    })
}
