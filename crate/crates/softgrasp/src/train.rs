//! Dataset generation and supervised training of the field surrogate.
//!
//! Generation samples antipodal grasps on a procedurally meshed object, runs
//! the solver once per grasp, and emits one record per force substep: the
//! scene multigraph at that force plus the per-vertex stress/displacement
//! targets. Records go to a JSONL file next to a grasp-level train/test split,
//! the grasp list, and a metadata file; reruns with the same configuration are
//! byte-identical.
//!
//! Training is single-sample Adam with a geometrically decaying learning rate.
//! The loss is the mean squared error of normalized stress plus normalized
//! displacement over object nodes. Variants cover single-quantity outputs,
//! per-substep increment targets, and two force-representation changes used
//! as ranking baselines.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fem::{
    build_contact_load, run_grasp_trajectory, Material, DEFAULT_PEAK_FORCE_N,
    DEFAULT_POISSON_RATIO,
};
use crate::graph::{
    ablate_node_force, ablate_raw_force, build_graph, target_tensor, MultiGraph, NormStats,
    NormStatsAccumulator, NODE_FEATURE_DIM, TARGET_DIM,
};
use crate::grasp::{
    find_contacts, pose_gripper, sample_antipodal, save_grasp_list, GripperModel,
    DEFAULT_CONTACT_EPS_M,
};
use crate::mesh::{annulus, cuboid, cylinder, ellipsoid, TetMesh, DEFAULT_MODULUS_PA};
use crate::net::{GraphTapeInputs, ModelConfig, ModelParams, Tape};
use crate::tensor::{row_norms, slice_cols, slice_rows, Tensor};
use crate::{Error, Result};

/// Default passes over the training set.
pub const DEFAULT_EPOCHS: usize = 25;
/// Learning-rate decay endpoints (exact at the first and last step).
pub const DEFAULT_LR_INITIAL: f64 = 5e-5;
pub const DEFAULT_LR_FINAL: f64 = 1e-6;
/// Adam moment decay rates and denominator offset.
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Object presets
// ---------------------------------------------------------------------------

/// A procedurally meshed test object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum ObjectSpec {
    Cuboid { dims: [f64; 3], res: usize },
    Ellipsoid { semi_axes: [f64; 3], res: usize },
    Cylinder { radius: f64, height: f64, res: usize },
    Annulus { r_inner: f64, r_outer: f64, height: f64, res: usize },
}

impl ObjectSpec {
    /// Builds the tet mesh with the given elastic modulus.
    pub fn build(&self, elastic_modulus_pa: f64) -> Result<TetMesh> {
        let mesh = match *self {
            ObjectSpec::Cuboid { dims, res } => cuboid(dims, res)?,
            ObjectSpec::Ellipsoid { semi_axes, res } => ellipsoid(semi_axes, res)?,
            ObjectSpec::Cylinder { radius, height, res } => cylinder(radius, height, res)?,
            ObjectSpec::Annulus { r_inner, r_outer, height, res } => {
                annulus(r_inner, r_outer, height, res)?
            }
        };
        Ok(mesh.with_id(self.id()).with_modulus(elastic_modulus_pa))
    }

    /// Stable identifier encoding shape and discretization.
    pub fn id(&self) -> String {
        match *self {
            ObjectSpec::Cuboid { dims, res } => {
                format!("cuboid_{}x{}x{}_r{res}", dims[0], dims[1], dims[2])
            }
            ObjectSpec::Ellipsoid { semi_axes, res } => {
                format!("ellipsoid_{}x{}x{}_r{res}", semi_axes[0], semi_axes[1], semi_axes[2])
            }
            ObjectSpec::Cylinder { radius, height, res } => {
                format!("cylinder_{radius}x{height}_r{res}")
            }
            ObjectSpec::Annulus { r_inner, r_outer, height, res } => {
                format!("annulus_{r_inner}-{r_outer}x{height}_r{res}")
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset generation
// ---------------------------------------------------------------------------

/// Everything needed to regenerate a dataset from scratch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataGenConfig {
    pub object: ObjectSpec,
    pub gripper: GripperModel,
    pub elastic_modulus_pa: f64,
    pub poisson_ratio: f64,
    /// Antipodal surface points to accept; each yields `n_rotations` grasps.
    pub n_surface_points: usize,
    pub n_rotations: usize,
    pub substeps: usize,
    pub peak_force_n: f64,
    pub contact_eps_m: f64,
    /// Fraction of grasps assigned to the train split (1.0 keeps all).
    pub train_fraction: f64,
    pub seed: u64,
}

impl DataGenConfig {
    /// A small single-object configuration; callers override fields.
    pub fn desk_default(object: ObjectSpec) -> DataGenConfig {
        DataGenConfig {
            object,
            gripper: GripperModel::default(),
            elastic_modulus_pa: DEFAULT_MODULUS_PA,
            poisson_ratio: DEFAULT_POISSON_RATIO,
            n_surface_points: 10,
            n_rotations: 3,
            substeps: 10,
            peak_force_n: DEFAULT_PEAK_FORCE_N,
            contact_eps_m: DEFAULT_CONTACT_EPS_M,
            train_fraction: 0.8,
            seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.substeps == 0 {
            return Err(Error::Train("need at least one substep".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return Err(Error::Train(format!(
                "train fraction must be in (0, 1], got {}",
                self.train_fraction
            )));
        }
        if !(self.peak_force_n > 0.0) {
            return Err(Error::Train("peak force must be positive".into()));
        }
        Ok(())
    }
}

/// One supervised example: the scene at one force substep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetRecord {
    /// Index into the sampled grasp list (grasps.json).
    pub grasp_index: usize,
    /// 1-based substep; the last substep carries the peak force.
    pub substep: usize,
    /// `substep / substeps`; the graph's force is this fraction of peak.
    pub substep_scale: f64,
    pub graph: MultiGraph,
    /// Raw physical targets over object nodes: `[stress_pa | displacement_m]`.
    pub target: Tensor,
}

/// Grasp-level split: a grasp's substeps never straddle train and test.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Summary written alongside the records.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub object_id: String,
    pub config: DataGenConfig,
    /// Grasps that produced records.
    pub n_grasps: usize,
    pub n_records: usize,
    /// Sampled grasps dropped because contact, load balancing, or the solve
    /// failed, or the solved fields were not finite.
    pub skipped_grasps: usize,
}

/// A dataset loaded back into memory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<DatasetRecord>,
    pub meta: DatasetMeta,
    pub split: SplitFile,
}

impl Dataset {
    pub fn train_records(&self) -> Vec<&DatasetRecord> {
        self.filtered(&self.split.train)
    }

    pub fn test_records(&self) -> Vec<&DatasetRecord> {
        self.filtered(&self.split.test)
    }

    fn filtered(&self, grasp_indices: &[usize]) -> Vec<&DatasetRecord> {
        let keep: HashSet<usize> = grasp_indices.iter().copied().collect();
        self.records.iter().filter(|r| keep.contains(&r.grasp_index)).collect()
    }
}

/// Samples grasps, solves each, and writes `dataset.jsonl`, `split.json`,
/// `grasps.json`, and `meta.json` under `dir`.
pub fn generate_dataset(config: &DataGenConfig, dir: &Path) -> Result<DatasetMeta> {
    config.validate()?;
    let mesh = config.object.build(config.elastic_modulus_pa)?;
    let material = Material::new(config.elastic_modulus_pa, config.poisson_ratio)?;
    let mut grasps = sample_antipodal(
        &mesh,
        &config.gripper,
        config.n_surface_points,
        config.n_rotations,
        config.seed,
    )?;
    for g in &mut grasps {
        g.f_g = config.peak_force_n;
    }

    fs::create_dir_all(dir)?;
    let mut out = BufWriter::new(fs::File::create(dir.join("dataset.jsonl"))?);
    let mut kept = Vec::new();
    let mut skipped = 0usize;
    let mut n_records = 0usize;
    for (grasp_index, grasp) in grasps.iter().enumerate() {
        match solve_one_grasp(&mesh, &material, config, grasp) {
            Ok(records) => {
                for (substep, (graph, target)) in records.into_iter().enumerate() {
                    let record = DatasetRecord {
                        grasp_index,
                        substep: substep + 1,
                        substep_scale: (substep + 1) as f64 / config.substeps as f64,
                        graph,
                        target,
                    };
                    serde_json::to_writer(&mut out, &record)?;
                    out.write_all(b"\n")?;
                    n_records += 1;
                }
                kept.push(grasp_index);
            }
            Err(_) => skipped += 1,
        }
    }
    out.flush()?;
    if kept.is_empty() {
        return Err(Error::Train("every sampled grasp failed to solve".into()));
    }

    let split = split_grasps(&kept, config.train_fraction, config.seed);
    fs::write(dir.join("split.json"), serde_json::to_string(&split)?)?;
    save_grasp_list(dir.join("grasps.json"), &mesh.id, &grasps)?;
    let meta = DatasetMeta {
        object_id: mesh.id.clone(),
        config: config.clone(),
        n_grasps: kept.len(),
        n_records,
        skipped_grasps: skipped,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(meta)
}

/// Solves one grasp and returns `(graph, target)` per substep, or an error if
/// any stage of the pipeline rejects it.
fn solve_one_grasp(
    mesh: &TetMesh,
    material: &Material,
    config: &DataGenConfig,
    grasp: &crate::grasp::Grasp,
) -> Result<Vec<(MultiGraph, Tensor)>> {
    let posed = pose_gripper(&config.gripper, &grasp.pose, grasp.p_g);
    let contacts = find_contacts(mesh, &posed, config.contact_eps_m)?;
    if !contacts.both_fingers_touch() {
        return Err(Error::Grasp("a finger lost contact at closure".into()));
    }
    let load = build_contact_load(
        mesh,
        [
            &contacts.object_nodes_per_finger[0],
            &contacts.object_nodes_per_finger[1],
        ],
        posed.closing_dirs_world,
        grasp.f_g,
    )?;
    let fields = run_grasp_trajectory(mesh, material, &load, config.substeps)?;
    let mut out = Vec::with_capacity(fields.len());
    for field in &fields {
        field.validate()?;
        let graph = build_graph(mesh, &posed, &contacts, field.force_level_n)?;
        out.push((graph, target_tensor(field)));
    }
    Ok(out)
}

/// Deterministic grasp-level split; uses its own stream one past the
/// sampling seed so adding grasps does not reshuffle record contents.
fn split_grasps(kept: &[usize], train_fraction: f64, seed: u64) -> SplitFile {
    let mut order: Vec<usize> = kept.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    order.shuffle(&mut rng);
    let mut n_train = (train_fraction * kept.len() as f64).round() as usize;
    n_train = n_train.clamp(1, kept.len());
    if train_fraction < 1.0 && kept.len() > 1 {
        n_train = n_train.min(kept.len() - 1);
    }
    let (train, test) = order.split_at(n_train);
    let mut split = SplitFile { train: train.to_vec(), test: test.to_vec() };
    split.train.sort_unstable();
    split.test.sort_unstable();
    split
}

/// Reads a dataset directory written by [`generate_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let split: SplitFile = serde_json::from_str(&fs::read_to_string(dir.join("split.json"))?)?;
    let file = BufReader::new(fs::File::open(dir.join("dataset.jsonl"))?);
    let mut records = Vec::with_capacity(meta.n_records);
    for line in file.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line)?);
    }
    Ok(Dataset { records, meta, split })
}

// ---------------------------------------------------------------------------
// Training variants
// ---------------------------------------------------------------------------

/// What the model predicts and how the scene is featurized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainVariant {
    /// Absolute stress and displacement (4 output channels).
    Full,
    /// Absolute stress only (1 channel).
    StressOnly,
    /// Absolute displacement only (3 channels).
    DeformationOnly,
    /// Per-substep field increments; evaluation accumulates them.
    IncrementTargets,
    /// Contact edges carry the raw total force instead of the per-edge share.
    RawForceEdges,
    /// Force moves to an extra node channel; contact edges carry none.
    NodeForce,
}

impl TrainVariant {
    pub fn output_dim(&self) -> usize {
        match self {
            TrainVariant::StressOnly => 1,
            TrainVariant::DeformationOnly => 3,
            _ => TARGET_DIM,
        }
    }

    pub fn node_feature_dim(&self) -> usize {
        match self {
            TrainVariant::NodeForce => NODE_FEATURE_DIM + 1,
            _ => NODE_FEATURE_DIM,
        }
    }

    pub fn uses_increments(&self) -> bool {
        matches!(self, TrainVariant::IncrementTargets)
    }

    /// Applies the variant's feature change to a raw graph.
    pub fn transform_graph(&self, graph: &MultiGraph) -> MultiGraph {
        match self {
            TrainVariant::RawForceEdges => ablate_raw_force(graph),
            TrainVariant::NodeForce => ablate_node_force(graph),
            _ => graph.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Training configuration and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub variant: TrainVariant,
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_final: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            variant: TrainVariant::Full,
            epochs: DEFAULT_EPOCHS,
            lr_initial: DEFAULT_LR_INITIAL,
            lr_final: DEFAULT_LR_FINAL,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The model configuration with input/output widths forced to match the
    /// variant, so callers only choose capacity knobs.
    pub fn resolved_model(&self) -> ModelConfig {
        ModelConfig {
            node_input_dim: self.variant.node_feature_dim(),
            output_dim: self.variant.output_dim(),
            ..self.model.clone()
        }
    }
}

/// Geometric interpolation from `lr_initial` at step 0 to `lr_final` at step
/// `total - 1`, with both endpoints exact.
pub fn geometric_lr(lr_initial: f64, lr_final: f64, step: usize, total: usize) -> f64 {
    assert!(total > 0 && step < total);
    if step == 0 {
        return lr_initial;
    }
    if step + 1 == total {
        return lr_final;
    }
    let t = step as f64 / (total - 1) as f64;
    lr_initial * (lr_final / lr_initial).powf(t)
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// Adam state aligned with the parameter visit order.
pub struct Adam {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ModelParams) -> Adam {
        let mut m = Vec::new();
        params.visit_params(|_, t| m.push(Tensor::zeros(t.rows, t.cols)));
        Adam { v: m.clone(), m, t: 0 }
    }

    /// One update; `grads` must be in visit order (`None` means zero).
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        let mut idx = 0usize;
        params.visit_params_mut(|_, p| {
            if let Some(g) = &grads[idx] {
                let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
                for i in 0..p.data.len() {
                    let gi = g.data[i];
                    m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
                    v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let m_hat = m.data[i] / bc1;
                    let v_hat = v.data[i] / bc2;
                    p.data[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
            idx += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Example preparation
// ---------------------------------------------------------------------------

/// A record after variant transforms, still in physical units.
struct Example {
    graph: MultiGraph,
    /// Absolute field, or the substep increment for the increment variant.
    target: Tensor,
}

/// Applies the variant's graph transform and target mode to raw records.
/// For increment targets, substep `k`'s target is `Y_k - Y_(k-1)` with
/// `Y_0 = 0`, so the increments of one grasp sum to its final field.
fn prepare_examples(records: &[&DatasetRecord], variant: TrainVariant) -> Result<Vec<Example>> {
    let mut by_key: BTreeMap<(usize, usize), &Tensor> = BTreeMap::new();
    if variant.uses_increments() {
        for r in records {
            by_key.insert((r.grasp_index, r.substep), &r.target);
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let target = if variant.uses_increments() && r.substep > 1 {
            let prev = by_key.get(&(r.grasp_index, r.substep - 1)).ok_or_else(|| {
                Error::Train(format!(
                    "grasp {} is missing substep {} needed for increments",
                    r.grasp_index,
                    r.substep - 1
                ))
            })?;
            let mut inc = r.target.clone();
            for (v, &p) in inc.data.iter_mut().zip(&prev.data) {
                *v -= p;
            }
            inc
        } else {
            r.target.clone()
        };
        out.push(Example { graph: variant.transform_graph(&r.graph), target });
    }
    Ok(out)
}

/// Fits normalization statistics over prepared examples (train split only).
fn fit_stats(examples: &[Example], node_dim: usize) -> Result<NormStats> {
    let mut acc = NormStatsAccumulator::new(node_dim);
    for ex in examples {
        acc.add(&ex.graph, &ex.target);
    }
    acc.finish()
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One logged optimization step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStep {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// A trained model with its statistics and the full loss history.
pub struct TrainOutcome {
    pub params: ModelParams,
    pub stats: NormStats,
    pub history: Vec<TrainStep>,
}

impl TrainOutcome {
    /// Mean loss over one epoch of the history.
    pub fn epoch_mean_loss(&self, epoch: usize) -> f64 {
        let steps: Vec<&TrainStep> = self.history.iter().filter(|s| s.epoch == epoch).collect();
        steps.iter().map(|s| s.loss).sum::<f64>() / steps.len().max(1) as f64
    }
}

/// Writes the history as `epoch,step,lr,loss` CSV rows.
pub fn write_history_csv(path: &Path, history: &[TrainStep]) -> Result<()> {
    let mut text = String::from("epoch,step,lr,loss\n");
    for s in history {
        let _ = writeln!(text, "{},{},{},{}", s.epoch, s.step, s.lr, s.loss);
    }
    fs::write(path, text)?;
    Ok(())
}

/// Trains a model from scratch on the given records.
pub fn train_model(records: &[&DatasetRecord], config: &TrainConfig) -> Result<TrainOutcome> {
    if records.is_empty() {
        return Err(Error::Train("cannot train on an empty record set".into()));
    }
    if config.epochs == 0 {
        return Err(Error::Train("need at least one epoch".into()));
    }
    let model_config = config.resolved_model();
    let variant = config.variant;
    let examples = prepare_examples(records, variant)?;
    let stats = fit_stats(&examples, model_config.node_input_dim)?;

    // Normalize once; examples are reused every epoch.
    struct Normalized {
        graph: MultiGraph,
        stress: Tensor,
        displacement: Tensor,
    }
    let normalized: Vec<Normalized> = examples
        .iter()
        .map(|ex| {
            let target = stats.normalize_target(&ex.target);
            Normalized {
                graph: stats.apply_norm(&ex.graph),
                stress: slice_cols(&target, 0, 1),
                displacement: slice_cols(&target, 1, TARGET_DIM),
            }
        })
        .collect();

    let mut params = ModelParams::init(&model_config, config.seed)?;
    let mut adam = Adam::new(&params);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let total_steps = config.epochs * normalized.len();
    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..normalized.len()).collect();

    for epoch in 0..config.epochs {
        order.shuffle(&mut shuffle_rng);
        for &i in &order {
            let ex = &normalized[i];
            let lr = geometric_lr(config.lr_initial, config.lr_final, step, total_steps);
            let (loss, grads) = loss_and_grads(&params, &ex.graph, &ex.stress, &ex.displacement)?;
            adam.step(&mut params, &grads, lr);
            history.push(TrainStep { epoch, step, lr, loss });
            step += 1;
        }
    }
    Ok(TrainOutcome { params, stats, history })
}

/// One taped forward/backward pass; returns the scalar loss and parameter
/// gradients in visit order.
fn loss_and_grads(
    params: &ModelParams,
    graph: &MultiGraph,
    stress_target: &Tensor,
    displacement_target: &Tensor,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let n_obj = graph.object_node_count;
    let mut tape = Tape::new();
    let ids = params.register_params(&mut tape);
    let inputs = GraphTapeInputs::from_graph_const(&mut tape, graph);
    let out = params.forward_tape(&mut tape, &ids, &inputs);
    let obj = tape.slice_rows(out, 0, n_obj);
    let loss_id = match params.config.output_dim {
        1 => tape.mse_vs(obj, stress_target.clone()),
        3 => tape.mse_vs(obj, displacement_target.clone()),
        4 => {
            let s = tape.slice_cols(obj, 0, 1);
            let d = tape.slice_cols(obj, 1, TARGET_DIM);
            let ls = tape.mse_vs(s, stress_target.clone());
            let ld = tape.mse_vs(d, displacement_target.clone());
            tape.add_scalars(ls, ld)
        }
        other => return Err(Error::Train(format!("unsupported output width {other}"))),
    };
    let loss = tape.value(loss_id).scalar_value();
    if !loss.is_finite() {
        return Err(Error::Train(format!("loss became non-finite: {loss}")));
    }
    let mut grads_by_id = tape.backward(loss_id);
    let mut grads = Vec::new();
    ids.visit(|_, id| grads.push(grads_by_id.take(id)));
    Ok((loss, grads))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Prediction-versus-truth summary for one quantity of one grasp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantityEval {
    pub true_value: f64,
    pub pred_value: f64,
    /// Mean per-vertex absolute error at the peak-force substep.
    pub mae: f64,
}

/// Per-grasp evaluation at the peak-force substep. Quantities the variant
/// does not predict are `None`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GraspEval {
    pub grasp_index: usize,
    /// Mean von Mises stress over object vertices, Pa.
    pub stress: Option<QuantityEval>,
    /// Mean displacement magnitude over object vertices, m.
    pub deformation: Option<QuantityEval>,
}

/// Runs the model over every grasp in `records` and compares against the
/// stored oracle fields at peak force. For the increment variant the
/// per-substep predictions are accumulated first.
pub fn evaluate(
    records: &[&DatasetRecord],
    params: &ModelParams,
    stats: &NormStats,
    variant: TrainVariant,
) -> Result<Vec<GraspEval>> {
    let mut by_grasp: BTreeMap<usize, Vec<&DatasetRecord>> = BTreeMap::new();
    for r in records {
        by_grasp.entry(r.grasp_index).or_default().push(r);
    }
    let mut out = Vec::with_capacity(by_grasp.len());
    for (grasp_index, mut group) in by_grasp {
        group.sort_by_key(|r| r.substep);
        let last = group.last().expect("group is non-empty");
        let n_obj = last.graph.object_node_count;

        // Physical-space prediction over object nodes at peak force.
        let pred = if variant.uses_increments() {
            let mut sum = Tensor::zeros(n_obj, TARGET_DIM);
            for r in &group {
                let inc = predict_physical(params, stats, variant, r)?;
                sum.add_assign(&inc);
            }
            sum
        } else {
            predict_physical(params, stats, variant, last)?
        };

        let truth = &last.target;
        let stress = (variant.output_dim() != 3).then(|| {
            let pred_col = slice_cols(&pred, 0, 1);
            let true_col = slice_cols(truth, 0, 1);
            QuantityEval {
                true_value: mean_of(&true_col.data),
                pred_value: mean_of(&pred_col.data),
                mae: mean_abs_diff(&pred_col.data, &true_col.data),
            }
        });
        let deformation = (variant.output_dim() != 1).then(|| {
            let pred_norms = row_norms(&slice_cols(&pred, 1, TARGET_DIM));
            let true_norms = row_norms(&slice_cols(truth, 1, TARGET_DIM));
            QuantityEval {
                true_value: mean_of(&true_norms.data),
                pred_value: mean_of(&pred_norms.data),
                mae: mean_abs_diff(&pred_norms.data, &true_norms.data),
            }
        });
        out.push(GraspEval { grasp_index, stress, deformation });
    }
    Ok(out)
}

/// One forward pass mapped back to physical units as an `n_obj x 4` tensor
/// (unpredicted channels zero).
fn predict_physical(
    params: &ModelParams,
    stats: &NormStats,
    variant: TrainVariant,
    record: &DatasetRecord,
) -> Result<Tensor> {
    let graph = stats.apply_norm(&variant.transform_graph(&record.graph));
    let raw = params.forward_infer(&graph)?;
    let obj = slice_rows(&raw, 0, record.graph.object_node_count);
    let fields = stats.denorm_output(&obj, record.graph.force_level_n)?;
    Ok(target_tensor(&fields))
}

fn mean_of(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn mean_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn tiny_gen_config(seed: u64) -> DataGenConfig {
        DataGenConfig {
            n_surface_points: 2,
            n_rotations: 1,
            substeps: 3,
            gripper: GripperModel { pad_size: [0.02, 0.02], w_open: 0.08, pad_res: 3 },
            train_fraction: 0.5,
            seed,
            ..DataGenConfig::desk_default(ObjectSpec::Cuboid {
                dims: [0.04, 0.03, 0.03],
                res: 2,
            })
        }
    }

    #[test]
    fn dataset_generation_is_deterministic_and_complete() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let config = tiny_gen_config(5);
        let meta = generate_dataset(&config, dir_a.path()).unwrap();
        generate_dataset(&config, dir_b.path()).unwrap();
        for name in ["dataset.jsonl", "split.json", "grasps.json", "meta.json"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }

        let dataset = load_dataset(dir_a.path()).unwrap();
        assert_eq!(dataset.records.len(), meta.n_records);
        assert_eq!(meta.n_records, meta.n_grasps * config.substeps);
        // Substeps scale force linearly up to the peak.
        for r in &dataset.records {
            assert_eq!(r.substep_scale, r.substep as f64 / config.substeps as f64);
            assert_relative_eq!(
                r.graph.force_level_n,
                r.substep_scale * config.peak_force_n,
                max_relative = 1e-12
            );
            // Targets cover exactly the object nodes.
            assert_eq!(r.target.rows, r.graph.object_node_count);
            assert_eq!(r.target.cols, TARGET_DIM);
        }
        // The split covers every kept grasp exactly once.
        let mut all: Vec<usize> = dataset
            .split
            .train
            .iter()
            .chain(&dataset.split.test)
            .copied()
            .collect();
        all.sort_unstable();
        let mut kept: Vec<usize> =
            dataset.records.iter().map(|r| r.grasp_index).collect();
        kept.sort_unstable();
        kept.dedup();
        assert_eq!(all, kept);
        assert!(!dataset.split.train.is_empty());
        assert!(!dataset.split.test.is_empty());
    }

    #[test]
    fn lr_schedule_is_geometric_with_exact_endpoints() {
        let total = 100;
        assert_eq!(geometric_lr(5e-5, 1e-6, 0, total), 5e-5);
        assert_eq!(geometric_lr(5e-5, 1e-6, total - 1, total), 1e-6);
        let mut prev_ratio = None;
        for step in 1..total {
            let a = geometric_lr(5e-5, 1e-6, step - 1, total);
            let b = geometric_lr(5e-5, 1e-6, step, total);
            assert!(b < a, "schedule must decay");
            let ratio = b / a;
            if let Some(p) = prev_ratio {
                assert_relative_eq!(ratio, p, max_relative = 1e-9);
            }
            prev_ratio = Some(ratio);
        }
    }

    #[test]
    fn adam_first_step_matches_closed_form() {
        let config = ModelConfig {
            latent_size: 4,
            message_passing_steps: 1,
            mlp_hidden_width: 4,
            node_input_dim: 9,
            edge_input_dim: 5,
            output_dim: 4,
        };
        let mut params = ModelParams::init(&config, 1).unwrap();
        let before = params.clone();
        let mut adam = Adam::new(&params);
        // Gradient 2.0 on every coordinate of the first tensor, None elsewhere.
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        params.visit_params(|_, _| grads.push(None));
        let shape0 = {
            let mut s = (0, 0);
            let mut first = true;
            params.visit_params(|_, t| {
                if first {
                    s = (t.rows, t.cols);
                    first = false;
                }
            });
            s
        };
        grads[0] = Some(Tensor::from_fn(shape0.0, shape0.1, |_, _| 2.0));
        let lr = 1e-3;
        adam.step(&mut params, &grads, lr);

        // First step: m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
        let expected_delta = lr * 2.0 / (2.0 + ADAM_EPS);
        let mut idx = 0;
        let mut before_t0 = None;
        before.visit_params(|_, t| {
            if idx == 0 {
                before_t0 = Some(t.clone());
            }
            idx += 1;
        });
        idx = 0;
        params.visit_params(|_, t| {
            if idx == 0 {
                let b = before_t0.as_ref().unwrap();
                for (a, e) in t.data.iter().zip(&b.data) {
                    assert_relative_eq!(*a, e - expected_delta, max_relative = 1e-12);
                }
            } else {
                // Untouched tensors stay bitwise identical.
            }
            idx += 1;
        });
    }

    #[test]
    fn increment_targets_telescope_to_absolute() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen_config(7), dir.path()).unwrap();
        let dataset = load_dataset(dir.path()).unwrap();
        let refs: Vec<&DatasetRecord> = dataset.records.iter().collect();
        let examples = prepare_examples(&refs, TrainVariant::IncrementTargets).unwrap();

        // Examples come back in record order, so pairing is a zip.
        let mut sums: BTreeMap<usize, Tensor> = BTreeMap::new();
        for (r, ex) in refs.iter().zip(&examples) {
            sums.entry(r.grasp_index)
                .and_modify(|t| t.add_assign(&ex.target))
                .or_insert_with(|| ex.target.clone());
            if r.substep == 1 {
                // First increment is the absolute first-substep field.
                assert_eq!(ex.target, r.target);
            }
        }
        for r in &dataset.records {
            if r.substep == dataset.meta.config.substeps {
                let sum = &sums[&r.grasp_index];
                for (a, b) in sum.data.iter().zip(&r.target.data) {
                    assert_relative_eq!(*a, *b, max_relative = 1e-9, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn variants_resolve_model_widths_and_features() {
        let base = TrainConfig::default();
        for (variant, out_dim, node_dim) in [
            (TrainVariant::Full, 4, 9),
            (TrainVariant::StressOnly, 1, 9),
            (TrainVariant::DeformationOnly, 3, 9),
            (TrainVariant::IncrementTargets, 4, 9),
            (TrainVariant::RawForceEdges, 4, 9),
            (TrainVariant::NodeForce, 4, 10),
        ] {
            let config = TrainConfig { variant, ..base.clone() };
            let model = config.resolved_model();
            assert_eq!(model.output_dim, out_dim);
            assert_eq!(model.node_input_dim, node_dim);
        }
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen_config(3), dir.path()).unwrap();
        let dataset = load_dataset(dir.path()).unwrap();
        let train = dataset.train_records();
        let config = TrainConfig {
            model: ModelConfig {
                latent_size: 8,
                message_passing_steps: 1,
                mlp_hidden_width: 8,
                ..ModelConfig::default()
            },
            variant: TrainVariant::Full,
            epochs: 150,
            lr_initial: 3e-3,
            lr_final: 3e-4,
            seed: 4,
        };
        let outcome = train_model(&train, &config).unwrap();
        assert_eq!(outcome.history.len(), config.epochs * train.len());
        let first = outcome.epoch_mean_loss(0);
        let last = outcome.epoch_mean_loss(config.epochs - 1);
        assert!(
            last < 0.5 * first,
            "training failed to reduce loss: first {first}, last {last}"
        );

        // Bitwise-reproducible: same records + config give the same history
        // and parameters.
        let again = train_model(&train, &config).unwrap();
        assert_eq!(outcome.history, again.history);
        assert_eq!(outcome.params, again.params);

        // History CSV has the documented header and row count.
        let csv_path = dir.path().join("history.csv");
        write_history_csv(&csv_path, &outcome.history).unwrap();
        let text = fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("epoch,step,lr,loss"));
        assert_eq!(lines.count(), outcome.history.len());
    }

    #[test]
    fn untrained_model_predicts_the_target_mean() {
        let dir = tempfile::tempdir().unwrap();
        generate_dataset(&tiny_gen_config(9), dir.path()).unwrap();
        let dataset = load_dataset(dir.path()).unwrap();
        let refs: Vec<&DatasetRecord> = dataset.records.iter().collect();

        let config = TrainConfig {
            model: ModelConfig {
                latent_size: 8,
                message_passing_steps: 1,
                mlp_hidden_width: 8,
                ..ModelConfig::default()
            },
            ..TrainConfig::default()
        };
        let examples = prepare_examples(&refs, TrainVariant::Full).unwrap();
        let stats = fit_stats(&examples, 9).unwrap();
        let params = ModelParams::init(&config.resolved_model(), 0).unwrap();

        // Zero-initialized decoder output denormalizes to the fitted target
        // mean, so every grasp's predicted mean stress is that constant.
        let evals = evaluate(&refs, &params, &stats, TrainVariant::Full).unwrap();
        let expected_stress = stats.target.mean[0];
        let expected_def = (stats.target.mean[1].powi(2)
            + stats.target.mean[2].powi(2)
            + stats.target.mean[3].powi(2))
        .sqrt();
        for eval in &evals {
            let s = eval.stress.as_ref().unwrap();
            assert_relative_eq!(s.pred_value, expected_stress, max_relative = 1e-9);
            let d = eval.deformation.as_ref().unwrap();
            assert_relative_eq!(d.pred_value, expected_def, max_relative = 1e-9);
            assert!(s.true_value > 0.0);
            assert!(d.true_value > 0.0);
        }

        // Single-quantity variants only evaluate their own field.
        let params1 = ModelParams::init(
            &TrainConfig { variant: TrainVariant::StressOnly, ..config.clone() }
                .resolved_model(),
            0,
        )
        .unwrap();
        let evals1 = evaluate(&refs, &params1, &stats, TrainVariant::StressOnly).unwrap();
        assert!(evals1.iter().all(|e| e.stress.is_some() && e.deformation.is_none()));
    }
}
