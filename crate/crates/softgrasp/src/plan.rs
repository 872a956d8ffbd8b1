//! Grasp ranking and gradient-based pose refinement on top of the trained
//! surrogate.
//!
//! Quality is a scalar objective of the predicted fields, lower is better.
//! Ranking evaluates each candidate from scratch: closure, contacts, graph,
//! one forward pass. Refinement freezes the contact topology at the current
//! pose, rebuilds the pose-dependent features on the tape, and
//! backpropagates the objective to a six-channel local pose increment
//! `[t | omega]`; candidate steps are then re-scored from scratch so every
//! accepted move reflects real, recomputed contacts. The module also owns
//! the rank-correlation metrics that compare predicted and oracle quality.

use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fem::{build_contact_load, run_grasp_trajectory, FieldOutput, Material};
use crate::grasp::{
    compute_joint_closure, find_contacts, pose_gripper, ContactAssignment, Grasp, GraspPose,
    GripperModel, DEFAULT_CONTACT_EPS_M,
};
use crate::graph::{build_graph, MultiGraph, NormStats};
use crate::mesh::TetMesh;
use crate::net::model::edge_endpoints;
use crate::net::{save_checkpoint, GraphTapeInputs, ModelParams, NodeId, ParamIds, Tape};
use crate::tensor::{slice_cols, slice_rows, smooth_max, Tensor};
use crate::train::{
    evaluate, load_dataset, train_model, write_history_csv, Dataset, DatasetRecord, GraspEval,
    TrainConfig, TrainVariant,
};
use crate::{Error, Result};

/// Sharpness of the smooth stress maximum.
pub const SMOOTH_MAX_BETA: f64 = 10.0;

/// Percentile of the training stress entries used as the smooth-max scale.
pub const STRESS_REF_PERCENTILE: f64 = 95.0;

/// Candidates scored per ranking batch.
pub const RANK_BATCH: usize = 5;

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

/// Scalar grasp quality derived from the predicted fields; lower is better.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Mean displacement magnitude over object vertices.
    MeanDeformation,
    /// Smooth upper envelope of the per-vertex von Mises stress.
    SmoothMaxStress,
    /// Mean von Mises stress over object vertices.
    MeanStress,
}

impl Objective {
    pub fn needs_stress(&self) -> bool {
        matches!(self, Objective::SmoothMaxStress | Objective::MeanStress)
    }

    pub fn needs_displacement(&self) -> bool {
        matches!(self, Objective::MeanDeformation)
    }

    /// Reduces physical-space fields to the objective value. `sigma_ref_pa`
    /// only matters for the smooth maximum.
    pub fn of_fields(&self, fields: &FieldOutput, sigma_ref_pa: f64) -> f64 {
        match self {
            Objective::MeanDeformation => fields.mean_deformation_m(),
            Objective::MeanStress => fields.mean_stress_pa(),
            Objective::SmoothMaxStress => {
                let col =
                    Tensor::from_fn(fields.stress_pa.len(), 1, |r, _| fields.stress_pa[r]);
                smooth_max(&col, SMOOTH_MAX_BETA, sigma_ref_pa).scalar_value()
            }
        }
    }
}

/// Interpolated percentile (`pct` in 0..=100) of a sample.
pub fn percentile(values: &[f64], pct: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Plan("cannot take a percentile of an empty sample".into()));
    }
    if !(0.0..=100.0).contains(&pct) {
        return Err(Error::Plan(format!("percentile {pct} outside [0, 100]")));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    Ok(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// The smooth-max stress scale: the [`STRESS_REF_PERCENTILE`]-th percentile
/// of all stress entries in the given (training) records.
pub fn stress_reference_pa(records: &[&DatasetRecord]) -> Result<f64> {
    let stresses: Vec<f64> = records
        .iter()
        .flat_map(|r| (0..r.target.rows).map(|v| r.target.get(v, 0)))
        .collect();
    let p = percentile(&stresses, STRESS_REF_PERCENTILE)?;
    if !(p > 0.0) {
        return Err(Error::Plan(format!("stress reference must be positive, got {p}")));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Planner
// ---------------------------------------------------------------------------

/// Scores grasps on one object with one trained model.
pub struct Planner<'a> {
    pub mesh: &'a TetMesh,
    pub gripper: &'a GripperModel,
    pub params: &'a ModelParams,
    pub stats: &'a NormStats,
    pub variant: TrainVariant,
    pub objective: Objective,
    /// Stress scale of the smooth maximum, Pa (ignored by other objectives).
    pub sigma_ref_pa: f64,
    pub contact_eps_m: f64,
}

impl<'a> Planner<'a> {
    /// Checks that the model, statistics, variant, and objective fit
    /// together before any grasp is scored.
    pub fn new(
        mesh: &'a TetMesh,
        gripper: &'a GripperModel,
        params: &'a ModelParams,
        stats: &'a NormStats,
        variant: TrainVariant,
        objective: Objective,
        sigma_ref_pa: f64,
    ) -> Result<Planner<'a>> {
        if variant.uses_increments() {
            return Err(Error::Plan(
                "the planner needs single-pass absolute predictions, not increments".into(),
            ));
        }
        if objective.needs_stress() && variant.output_dim() == 3 {
            return Err(Error::Plan("a stress objective needs a stress-predicting model".into()));
        }
        if objective.needs_displacement() && variant.output_dim() == 1 {
            return Err(Error::Plan(
                "a deformation objective needs a displacement-predicting model".into(),
            ));
        }
        if objective == Objective::SmoothMaxStress && !(sigma_ref_pa > 0.0) {
            return Err(Error::Plan(format!(
                "smooth-max stress scale must be positive, got {sigma_ref_pa}"
            )));
        }
        if stats.node.mean.len() != variant.node_feature_dim() {
            return Err(Error::Plan(format!(
                "normalization was fitted for {}-channel nodes but the variant produces {}",
                stats.node.mean.len(),
                variant.node_feature_dim()
            )));
        }
        if params.config.node_input_dim != variant.node_feature_dim()
            || params.config.output_dim != variant.output_dim()
        {
            return Err(Error::Plan("model widths do not match the training variant".into()));
        }
        Ok(Planner {
            mesh,
            gripper,
            params,
            stats,
            variant,
            objective,
            sigma_ref_pa,
            contact_eps_m: DEFAULT_CONTACT_EPS_M,
        })
    }

    /// Predicted quality of a grasp, recomputing closure and contacts at its
    /// pose. Fails when the pose does not produce a two-finger grasp.
    pub fn evaluate_grasp(&self, grasp: &Grasp) -> Result<f64> {
        self.probe_pose(&grasp.pose, grasp.f_g).map(|(q, _)| q)
    }

    /// Fresh quality and closure travel at a pose.
    fn probe_pose(&self, pose: &GraspPose, f_g: f64) -> Result<(f64, [f64; 2])> {
        let p_g = compute_joint_closure(self.mesh, self.gripper, pose)?;
        let posed = pose_gripper(self.gripper, pose, p_g);
        let contacts = find_contacts(self.mesh, &posed, self.contact_eps_m)?;
        if !contacts.both_fingers_touch() {
            return Err(Error::Plan("only one finger touches the object".into()));
        }
        let graph = build_graph(self.mesh, &posed, &contacts, f_g)?;
        Ok((self.quality_of_graph(&graph)?, p_g))
    }

    /// One forward pass over a raw scene graph, reduced by the objective.
    fn quality_of_graph(&self, graph: &MultiGraph) -> Result<f64> {
        let normalized = self.stats.apply_norm(&self.variant.transform_graph(graph));
        let raw = self.params.forward_infer(&normalized)?;
        let obj = slice_rows(&raw, 0, graph.object_node_count);
        let fields = self.stats.denorm_output(&obj, graph.force_level_n)?;
        Ok(self.objective.of_fields(&fields, self.sigma_ref_pa))
    }

    /// Scores every candidate (processed in batches of [`RANK_BATCH`]) and
    /// sorts ascending: best first, candidates that fail to grasp last.
    pub fn rank(&self, grasps: &[Grasp]) -> Vec<RankedGrasp> {
        let mut out = Vec::with_capacity(grasps.len());
        for batch in grasps.chunks(RANK_BATCH) {
            let offset = out.len();
            for (i, g) in batch.iter().enumerate() {
                out.push(RankedGrasp { index: offset + i, q: self.evaluate_grasp(g).ok() });
            }
        }
        out.sort_by(|a, b| match (&a.q, &b.q) {
            (Some(x), Some(y)) => x.total_cmp(y).then(a.index.cmp(&b.index)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => a.index.cmp(&b.index),
        });
        out
    }

    // -- frozen-topology differentiation ------------------------------------

    /// Freezes closure, contacts, and graph topology at a pose.
    pub fn frozen_context(&self, pose: &GraspPose, f_g: f64) -> Result<FrozenContext> {
        let p_g = compute_joint_closure(self.mesh, self.gripper, pose)?;
        let posed = pose_gripper(self.gripper, pose, p_g);
        let contacts = find_contacts(self.mesh, &posed, self.contact_eps_m)?;
        if !contacts.both_fingers_touch() {
            return Err(Error::Plan("only one finger touches the object".into()));
        }
        let graph =
            self.variant.transform_graph(&build_graph(self.mesh, &posed, &contacts, f_g)?);
        let center = self.mesh.centroid();

        let n_grip = posed.vertices_local.len();
        let local_points =
            Tensor::from_fn(n_grip, 3, |r, c| posed.vertices_local[r][c]);
        let dirs_local = self.gripper.closing_dirs_local();
        let local_dirs =
            Tensor::from_fn(n_grip, 3, |r, c| dirs_local[posed.pad_of_vertex[r]][c]);
        // Directed pad-edge differences in build order: [a, b] then [b, a].
        let local_edge_diffs = Tensor::from_fn(2 * posed.edges.len(), 3, |r, c| {
            let [a, b] = posed.edges[r / 2];
            let d = posed.vertices_local[b][c] - posed.vertices_local[a][c];
            if r % 2 == 0 {
                d
            } else {
                -d
            }
        });
        let pair_grip: Vec<usize> = contacts.pairs.iter().map(|&(g, _)| g).collect();
        let pair_obj_positions = Tensor::from_fn(contacts.pairs.len(), 3, |r, c| {
            self.mesh.vertices[contacts.pairs[r].1][c] - center[c]
        });

        Ok(FrozenContext {
            pose: *pose,
            p_g,
            f_g,
            translation_recentered: pose.translation - center.coords,
            contacts,
            graph,
            local_points,
            local_dirs,
            local_edge_diffs,
            pair_grip,
            pair_obj_positions,
        })
    }

    /// The objective and its gradient `[d/dt | d/domega]` at the frozen
    /// pose, from one taped forward/backward pass.
    pub fn pose_gradient(&self, ctx: &FrozenContext) -> Result<(f64, [f64; 6])> {
        let mut tape = Tape::new();
        let ids = self.params.register_params(&mut tape);
        let delta = tape.leaf(Tensor::zeros(1, 6));
        let q_id = self.build_taped_quality(&mut tape, &ids, ctx, delta);
        let q0 = tape.value(q_id).scalar_value();
        if !q0.is_finite() {
            return Err(Error::Plan(format!("objective is not finite: {q0}")));
        }
        let mut grads = tape.backward(q_id);
        let g = grads
            .take(delta)
            .ok_or_else(|| Error::Plan("objective does not depend on the pose".into()))?;
        Ok((q0, [g.data[0], g.data[1], g.data[2], g.data[3], g.data[4], g.data[5]]))
    }

    /// Rebuilds the grasp features on the tape with the pose increment as
    /// the only live input, then runs the taped forward pass and the
    /// objective reduction. Constant blocks are spliced from the frozen
    /// graph so the layout matches [`build_graph`] exactly.
    fn build_taped_quality(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        ctx: &FrozenContext,
        delta: NodeId,
    ) -> NodeId {
        let rot = ctx.pose.rotation.to_rotation_matrix().into_inner();
        let graph = &ctx.graph;
        let n_obj = graph.object_node_count;
        let n = graph.node_features.rows;

        // Gripper positions (re-centered) and closing directions move with
        // the pose; object rows and one-hot / trailing channels are frozen.
        let grip_pos = tape.rigid_perturb_points(
            ctx.local_points.clone(),
            rot,
            ctx.translation_recentered,
            delta,
        );
        let grip_dirs = tape.rotate_perturb_vecs(ctx.local_dirs.clone(), rot, delta);
        let grip_raw = slice_rows(&graph.node_features, n_obj, n);
        let one_hot = tape.constant(slice_cols(&grip_raw, 0, 3));
        let mut parts = vec![one_hot, grip_pos, grip_dirs];
        if grip_raw.cols > 9 {
            parts.push(tape.constant(slice_cols(&grip_raw, 9, grip_raw.cols)));
        }
        let grip_rows = tape.concat_cols(&parts);
        let obj_rows = tape.constant(slice_rows(&graph.node_features, 0, n_obj));
        let node_raw = tape.concat_rows(obj_rows, grip_rows);
        let (scale, shift) = self.stats.node.scale_shift();
        let node_features = tape.affine_cols(node_raw, scale, shift);

        // Mesh edges: object rows frozen; pad rows rotate their displacement
        // while distance and modulus channels stay fixed (rigid pads).
        let pad_rows_n = ctx.local_edge_diffs.rows;
        let obj_rows_n = graph.mesh_edge_features.rows - pad_rows_n;
        let mesh_obj = tape.constant(slice_rows(&graph.mesh_edge_features, 0, obj_rows_n));
        let pad_disp = tape.rotate_perturb_vecs(ctx.local_edge_diffs.clone(), rot, delta);
        let pad_tail = tape.constant(slice_cols(
            &slice_rows(&graph.mesh_edge_features, obj_rows_n, graph.mesh_edge_features.rows),
            3,
            5,
        ));
        let pad_full = tape.concat_cols(&[pad_disp, pad_tail]);
        let mesh_raw = tape.concat_rows(mesh_obj, pad_full);
        let (scale, shift) = self.stats.mesh_edge.scale_shift();
        let mesh_features = tape.affine_cols(mesh_raw, scale, shift);

        // Contact displacements: object minus gripper endpoint for g->o,
        // negated for o->g, interleaved back into build order; the distance
        // is recomputed from the moving displacement, the force is frozen.
        let pair_obj = tape.constant(ctx.pair_obj_positions.clone());
        let pair_grip = tape.gather_rows(grip_pos, Rc::new(ctx.pair_grip.clone()));
        let d_go = tape.sub(pair_obj, pair_grip);
        let d_og = tape.sub(pair_grip, pair_obj);
        let stacked = tape.concat_rows(d_go, d_og);
        let pairs = ctx.pair_grip.len();
        let interleave: Vec<usize> = (0..pairs).flat_map(|k| [k, pairs + k]).collect();
        let contact_disp = tape.gather_rows(stacked, Rc::new(interleave));
        let contact_dist = tape.row_norms(contact_disp);
        let contact_tail = tape.constant(slice_cols(&graph.contact_edge_features, 4, 5));
        let contact_raw = tape.concat_cols(&[contact_disp, contact_dist, contact_tail]);
        let (scale, shift) = self.stats.contact_edge.scale_shift();
        let contact_features = tape.affine_cols(contact_raw, scale, shift);

        let (mesh_src, mesh_dst) = edge_endpoints(&graph.mesh_edges);
        let (contact_src, contact_dst) = edge_endpoints(&graph.contact_edges);
        let inputs = GraphTapeInputs {
            node_features,
            mesh_edge_features: mesh_features,
            contact_edge_features: contact_features,
            mesh_src: Rc::new(mesh_src),
            mesh_dst: Rc::new(mesh_dst),
            contact_src: Rc::new(contact_src),
            contact_dst: Rc::new(contact_dst),
            n_nodes: n,
        };
        let out = self.params.forward_tape(tape, ids, &inputs);
        let obj_out = tape.slice_rows(out, 0, n_obj);
        self.taped_objective(tape, obj_out)
    }

    /// Denormalizes the needed output channels and reduces them, mirroring
    /// [`Objective::of_fields`] on the tape.
    fn taped_objective(&self, tape: &mut Tape, obj_out: NodeId) -> NodeId {
        let output_dim = self.params.config.output_dim;
        let t = &self.stats.target;
        match self.objective {
            Objective::MeanStress | Objective::SmoothMaxStress => {
                let col = if output_dim == 1 {
                    obj_out
                } else {
                    tape.slice_cols(obj_out, 0, 1)
                };
                let phys = tape.affine_cols(col, vec![t.std[0]], vec![t.mean[0]]);
                match self.objective {
                    Objective::MeanStress => tape.mean_all(phys),
                    _ => tape.smooth_max(phys, SMOOTH_MAX_BETA, self.sigma_ref_pa),
                }
            }
            Objective::MeanDeformation => {
                let cols = if output_dim == 3 {
                    obj_out
                } else {
                    tape.slice_cols(obj_out, 1, 4)
                };
                let phys = tape.affine_cols(cols, t.std[1..4].to_vec(), t.mean[1..4].to_vec());
                let norms = tape.row_norms(phys);
                tape.mean_all(norms)
            }
        }
    }

    /// Frozen-topology quality at a local pose increment (exact pose
    /// composition, contacts and closure pinned). This is the function whose
    /// gradient at zero [`Planner::pose_gradient`] computes.
    pub fn frozen_quality(
        &self,
        ctx: &FrozenContext,
        t: &Vector3<f64>,
        omega: &Vector3<f64>,
    ) -> Result<f64> {
        let pose = ctx.pose.compose_local(t, omega);
        let posed = pose_gripper(self.gripper, &pose, ctx.p_g);
        let graph = build_graph(self.mesh, &posed, &ctx.contacts, ctx.f_g)?;
        self.quality_of_graph(&graph)
    }

    // -- refinement ----------------------------------------------------------

    /// Gradient descent on the pose. Each outer step differentiates through
    /// a freshly frozen contact topology, then backtracks along the negative
    /// gradient: candidates are scored from scratch, accepted on Armijo
    /// sufficient decrease, on any decrease, or (while the temperature is
    /// warm) on a simulated-annealing coin flip. Candidates that lose
    /// contact shorten the step. Returns the best grasp ever scored,
    /// including the start, so refinement cannot end worse than it began.
    pub fn refine(&self, grasp: &Grasp, config: &RefineConfig, seed: u64) -> Result<Refinement> {
        config.validate()?;
        let (initial_q, p_g) = self.probe_pose(&grasp.pose, grasp.f_g)?;
        let mut best = Grasp { pose: grasp.pose, p_g, f_g: grasp.f_g };
        let mut best_q = initial_q;
        let mut pose = grasp.pose;
        let mut tau = config.anneal_tau0_factor * initial_q.abs();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rejections = 0usize;
        let mut steps_taken = 0usize;
        let mut accepted_steps = 0usize;

        for _ in 0..config.steps {
            // Accepted poses were scored successfully, so a frozen context
            // should exist; losing it means the scene degenerated.
            let Ok(ctx) = self.frozen_context(&pose, grasp.f_g) else {
                break;
            };
            steps_taken += 1;
            let (q_here, g) = self.pose_gradient(&ctx)?;
            let g_t = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
            let g_w = (g[3] * g[3] + g[4] * g[4] + g[5] * g[5]).sqrt();
            let g_sq = g_t * g_t + g_w * g_w;
            // First trial step caps the worst-case gripper-vertex motion.
            let speed = g_t + g_w * ctx.max_vertex_radius_m();
            if !(speed > 1e-12) {
                break; // the objective no longer responds to the pose
            }
            let mut alpha = config.initial_step_cap_m / speed;
            let mut moved = false;
            for _ in 0..config.max_backtracks {
                let t = Vector3::new(-alpha * g[0], -alpha * g[1], -alpha * g[2]);
                let w = Vector3::new(-alpha * g[3], -alpha * g[4], -alpha * g[5]);
                let candidate = pose.compose_local(&t, &w);
                let Ok((q_cand, p_g_cand)) = self.probe_pose(&candidate, grasp.f_g) else {
                    alpha *= config.shrink; // lost contact; shorten the step
                    continue;
                };
                if q_cand < best_q {
                    best = Grasp { pose: candidate, p_g: p_g_cand, f_g: grasp.f_g };
                    best_q = q_cand;
                }
                let armijo = q_cand <= q_here - config.c1 * alpha * g_sq;
                let delta_q = q_cand - q_here;
                let annealed = delta_q <= 0.0
                    || (tau > 0.0 && rng.gen::<f64>() < (-delta_q / tau).exp());
                if armijo || annealed {
                    pose = candidate;
                    moved = true;
                    accepted_steps += 1;
                    rejections = 0;
                    break;
                }
                alpha *= config.shrink;
            }
            if !moved {
                rejections += 1;
                if rejections >= config.max_consecutive_rejections {
                    break;
                }
            }
            tau *= config.anneal_gamma;
        }

        Ok(Refinement {
            initial: grasp.clone(),
            refined: best,
            initial_q,
            refined_q: best_q,
            steps_taken,
            accepted_steps,
        })
    }

    /// FEM value of the same objective at a pose: closure, contacts, load
    /// balancing, equilibrium solve, field recovery. Used to judge
    /// refinement, never to rank.
    pub fn oracle_quality(&self, material: &Material, pose: &GraspPose, f_g: f64) -> Result<f64> {
        let p_g = compute_joint_closure(self.mesh, self.gripper, pose)?;
        let posed = pose_gripper(self.gripper, pose, p_g);
        let contacts = find_contacts(self.mesh, &posed, self.contact_eps_m)?;
        if !contacts.both_fingers_touch() {
            return Err(Error::Plan("only one finger touches the object".into()));
        }
        let load = build_contact_load(
            self.mesh,
            [&contacts.object_nodes_per_finger[0], &contacts.object_nodes_per_finger[1]],
            posed.closing_dirs_world,
            f_g,
        )?;
        let fields = run_grasp_trajectory(self.mesh, material, &load, 1)?
            .pop()
            .expect("one substep yields one output");
        Ok(self.objective.of_fields(&fields, self.sigma_ref_pa))
    }
}

/// A grasp scene pinned at one pose: fixed closure, contacts, and graph
/// topology, with the rigid-local geometry needed to rebuild the
/// pose-dependent features.
pub struct FrozenContext {
    pub pose: GraspPose,
    pub p_g: [f64; 2],
    pub f_g: f64,
    /// `pose.translation` minus the object centroid (graph positions are
    /// re-centered there).
    translation_recentered: Vector3<f64>,
    contacts: ContactAssignment,
    /// Variant-transformed raw graph at the frozen pose.
    graph: MultiGraph,
    /// Closed gripper vertices in the gripper frame.
    local_points: Tensor,
    /// Per-vertex closing directions in the gripper frame.
    local_dirs: Tensor,
    /// Directed pad-edge endpoint differences in the gripper frame.
    local_edge_diffs: Tensor,
    /// Gripper member (local index) of each contact pair.
    pair_grip: Vec<usize>,
    /// Re-centered object member position of each contact pair.
    pair_obj_positions: Tensor,
}

impl FrozenContext {
    /// The variant-transformed raw graph frozen at this pose.
    pub fn graph(&self) -> &MultiGraph {
        &self.graph
    }

    /// Largest gripper-vertex distance from the gripper origin; converts a
    /// rotational gradient into a worst-case vertex speed.
    fn max_vertex_radius_m(&self) -> f64 {
        (0..self.local_points.rows)
            .map(|r| {
                let p = self.local_points.row(r);
                (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
            })
            .fold(0.0, f64::max)
    }
}

// ---------------------------------------------------------------------------
// Refinement configuration and outcomes
// ---------------------------------------------------------------------------

/// Schedule for [`Planner::refine`]. Serialized configs may name only the
/// fields they change; the rest fall back to [`RefineConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    /// Outer gradient steps.
    pub steps: usize,
    /// Armijo sufficient-decrease constant.
    pub c1: f64,
    /// Step shrink factor between backtracks.
    pub shrink: f64,
    /// Trial steps per outer step.
    pub max_backtracks: usize,
    /// The first trial step moves no gripper vertex further than this, m.
    pub initial_step_cap_m: f64,
    /// Initial annealing temperature as a fraction of the start objective
    /// magnitude; zero never accepts uphill moves.
    pub anneal_tau0_factor: f64,
    /// Temperature decay per outer step.
    pub anneal_gamma: f64,
    /// Stop after this many consecutive outer steps without a move.
    pub max_consecutive_rejections: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            steps: 12,
            c1: 1e-4,
            shrink: 0.5,
            max_backtracks: 8,
            initial_step_cap_m: 0.005,
            anneal_tau0_factor: 0.05,
            anneal_gamma: 0.7,
            max_consecutive_rejections: 5,
        }
    }
}

impl RefineConfig {
    fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.max_backtracks == 0 {
            return Err(Error::Plan("refinement needs at least one step and backtrack".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::Plan(format!("shrink must be in (0, 1), got {}", self.shrink)));
        }
        if !(self.initial_step_cap_m > 0.0) {
            return Err(Error::Plan("initial step cap must be positive".into()));
        }
        if !(self.anneal_gamma > 0.0 && self.anneal_gamma <= 1.0)
            || self.anneal_tau0_factor < 0.0
        {
            return Err(Error::Plan("annealing schedule out of range".into()));
        }
        Ok(())
    }
}

/// Outcome of refining one grasp; `refined` is the best grasp ever scored.
#[derive(Debug, Clone)]
pub struct Refinement {
    pub initial: Grasp,
    pub refined: Grasp,
    pub initial_q: f64,
    pub refined_q: f64,
    pub steps_taken: usize,
    pub accepted_steps: usize,
}

/// Predicted and oracle objective for one refined grasp; poses are stored
/// as `[qw qx qy qz tx ty tz]` so the outcome serializes directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefinementOutcome {
    pub grasp_index: usize,
    pub initial_pose: [f64; 7],
    pub refined_pose: [f64; 7],
    pub predicted_initial_q: f64,
    pub predicted_refined_q: f64,
    pub oracle_initial_q: f64,
    pub oracle_refined_q: f64,
}

impl RefinementOutcome {
    /// Did the oracle confirm the improvement?
    pub fn oracle_improved(&self) -> bool {
        self.oracle_refined_q < self.oracle_initial_q
    }
}

/// Refines each `(index, grasp)` pair and scores the initial and refined
/// poses with the FEM oracle.
pub fn refinement_experiment(
    planner: &Planner,
    material: &Material,
    grasps: &[(usize, Grasp)],
    config: &RefineConfig,
    seed: u64,
) -> Result<Vec<RefinementOutcome>> {
    let mut out = Vec::with_capacity(grasps.len());
    for (index, grasp) in grasps {
        let refinement = planner.refine(grasp, config, seed.wrapping_add(*index as u64))?;
        out.push(RefinementOutcome {
            grasp_index: *index,
            initial_pose: refinement.initial.pose.to_array(),
            refined_pose: refinement.refined.pose.to_array(),
            predicted_initial_q: refinement.initial_q,
            predicted_refined_q: refinement.refined_q,
            oracle_initial_q: planner.oracle_quality(material, &grasp.pose, grasp.f_g)?,
            oracle_refined_q: planner.oracle_quality(
                material,
                &refinement.refined.pose,
                grasp.f_g,
            )?,
        });
    }
    Ok(out)
}

/// Ranked candidates plus refinement outcomes for the two threshold bands,
/// flattened into the five box-plot groups.
#[derive(Debug, Clone)]
pub struct ThresholdExperiment {
    pub ranked: Vec<RankedGrasp>,
    /// Outcomes for the `n_low` worst-predicted candidates.
    pub low: Vec<RefinementOutcome>,
    /// Outcomes for the `n_high` best-predicted candidates.
    pub high: Vec<RefinementOutcome>,
    pub rows: Vec<BoxplotRow>,
}

/// Ranks `grasps`, refines the worst `n_low` and best `n_high`, and scores
/// every pose with the FEM oracle. The returned rows hold one oracle
/// quality per grasp per group: `all` covers every candidate that scored,
/// `threshold_low` / `threshold_high` the two selected bands before
/// refinement, and `refined_low` / `refined_high` the same bands after.
pub fn threshold_refinement_experiment(
    planner: &Planner,
    material: &Material,
    grasps: &[Grasp],
    n_low: usize,
    n_high: usize,
    config: &RefineConfig,
    seed: u64,
) -> Result<ThresholdExperiment> {
    let ranked = planner.rank(grasps);
    let selection = |indices: Vec<usize>| -> Vec<(usize, Grasp)> {
        indices.into_iter().map(|i| (i, grasps[i].clone())).collect()
    };
    let low = refinement_experiment(
        planner,
        material,
        &selection(worst_ranked(&ranked, n_low)),
        config,
        seed,
    )?;
    let high = refinement_experiment(
        planner,
        material,
        &selection(best_ranked(&ranked, n_high)),
        config,
        seed,
    )?;

    let mut rows = Vec::new();
    for r in ranked.iter().filter(|r| r.q.is_some()) {
        let grasp = &grasps[r.index];
        rows.push(BoxplotRow {
            group: "all",
            grasp_index: r.index,
            oracle_q: planner.oracle_quality(material, &grasp.pose, grasp.f_g)?,
            predicted_q: r.q,
        });
    }
    for (band, threshold, refined) in
        [(&low, "threshold_low", "refined_low"), (&high, "threshold_high", "refined_high")]
    {
        for o in band.iter() {
            rows.push(BoxplotRow {
                group: threshold,
                grasp_index: o.grasp_index,
                oracle_q: o.oracle_initial_q,
                predicted_q: Some(o.predicted_initial_q),
            });
            rows.push(BoxplotRow {
                group: refined,
                grasp_index: o.grasp_index,
                oracle_q: o.oracle_refined_q,
                predicted_q: Some(o.predicted_refined_q),
            });
        }
    }
    Ok(ThresholdExperiment { ranked, low, high, rows })
}

// ---------------------------------------------------------------------------
// Ranking outputs and selection
// ---------------------------------------------------------------------------

/// One ranked candidate; `q` is `None` when the pose failed to grasp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedGrasp {
    /// Index into the candidate list passed to [`Planner::rank`].
    pub index: usize,
    pub q: Option<f64>,
}

/// Candidate indices of the `n` best-predicted (lowest-Q) grasps.
pub fn best_ranked(ranked: &[RankedGrasp], n: usize) -> Vec<usize> {
    ranked.iter().filter(|r| r.q.is_some()).take(n).map(|r| r.index).collect()
}

/// Candidate indices of the `n` worst-predicted grasps that still scored.
pub fn worst_ranked(ranked: &[RankedGrasp], n: usize) -> Vec<usize> {
    ranked.iter().filter(|r| r.q.is_some()).rev().take(n).map(|r| r.index).collect()
}

// ---------------------------------------------------------------------------
// Rank correlation
// ---------------------------------------------------------------------------

/// Kendall rank correlation (tau-b, tie-adjusted) between paired samples.
/// Discordances are counted with a merge sort, so a thousand pairs stay
/// cheap; an exhaustive pair scan gives identical output and serves as the
/// test oracle. Errors when either list is all ties (the correlation is
/// undefined) or any value is not finite.
pub fn kendall_tau_b(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Plan(format!(
            "rank correlation needs paired samples, got {} vs {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len();
    if n < 2 {
        return Err(Error::Plan("rank correlation needs at least two pairs".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::Plan("rank correlation inputs must be finite".into()));
    }

    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]).then(y[a].total_cmp(&y[b])));

    // Tie counts: pairs tied in x, and tied in both, from runs of the
    // (x, y)-sorted order.
    let (mut tied_x, mut tied_both) = (0i64, 0i64);
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && x[idx[j]] == x[idx[i]] {
            j += 1;
        }
        tied_x += pair_count(j - i);
        let mut k = i;
        while k < j {
            let mut l = k;
            while l < j && y[idx[l]] == y[idx[k]] {
                l += 1;
            }
            tied_both += pair_count(l - k);
            k = l;
        }
        i = j;
    }

    // In x-order, discordant pairs are exactly the strict inversions of y.
    let mut ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
    let discordant = merge_count_inversions(&mut ys) as i64;

    // ys is sorted now; count pairs tied in y.
    let mut tied_y = 0i64;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j < n && ys[j] == ys[i] {
            j += 1;
        }
        tied_y += pair_count(j - i);
        i = j;
    }

    let n0 = pair_count(n);
    if n0 == tied_x || n0 == tied_y {
        return Err(Error::Plan("rank correlation is undefined for an all-tie list".into()));
    }
    let c_minus_d = n0 - tied_x - tied_y + tied_both - 2 * discordant;
    Ok(c_minus_d as f64 / (((n0 - tied_x) as f64) * ((n0 - tied_y) as f64)).sqrt())
}

fn pair_count(t: usize) -> i64 {
    let t = t as i64;
    t * (t - 1) / 2
}

/// Sorts in place, returning the number of strictly descending pairs.
fn merge_count_inversions(xs: &mut [f64]) -> u64 {
    let n = xs.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut inversions = {
        let (lo, hi) = xs.split_at_mut(mid);
        merge_count_inversions(lo) + merge_count_inversions(hi)
    };
    let mut merged = Vec::with_capacity(n);
    let (mut i, mut j) = (0, mid);
    while i < mid && j < n {
        if xs[j] < xs[i] {
            // Inverted with every element remaining in the left half.
            inversions += (mid - i) as u64;
            merged.push(xs[j]);
            j += 1;
        } else {
            merged.push(xs[i]);
            i += 1;
        }
    }
    merged.extend_from_slice(&xs[i..mid]);
    merged.extend_from_slice(&xs[j..n]);
    xs.copy_from_slice(&merged);
    inversions
}

// ---------------------------------------------------------------------------
// Evaluation summaries and reports
// ---------------------------------------------------------------------------

/// Rank-correlation and error summary of predicted versus oracle grasp
/// quantities. Taus are `None` when fewer than two grasps carry the
/// quantity; an all-tie quantity is an error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingSummary {
    pub n_grasps: usize,
    /// Kendall tau-b between predicted and true mean stress.
    pub stress_tau: Option<f64>,
    /// Kendall tau-b between predicted and true mean deformation.
    pub deformation_tau: Option<f64>,
    /// Mean over grasps of the per-vertex stress MAE, kPa.
    pub stress_mae_kpa: Option<f64>,
    /// Mean over grasps of the per-vertex deformation-magnitude MAE, mm.
    pub deformation_mae_mm: Option<f64>,
}

/// Condenses per-grasp evaluations into ranking metrics.
pub fn summarize_ranking(evals: &[GraspEval]) -> Result<RankingSummary> {
    if evals.is_empty() {
        return Err(Error::Plan("cannot summarize an empty evaluation".into()));
    }
    let stress: Vec<(f64, f64, f64)> = evals
        .iter()
        .filter_map(|e| e.stress.map(|q| (q.true_value, q.pred_value, q.mae)))
        .collect();
    let deformation: Vec<(f64, f64, f64)> = evals
        .iter()
        .filter_map(|e| e.deformation.map(|q| (q.true_value, q.pred_value, q.mae)))
        .collect();

    let tau_of = |triples: &[(f64, f64, f64)]| -> Result<Option<f64>> {
        if triples.len() < 2 {
            return Ok(None);
        }
        let truth: Vec<f64> = triples.iter().map(|t| t.0).collect();
        let pred: Vec<f64> = triples.iter().map(|t| t.1).collect();
        kendall_tau_b(&truth, &pred).map(Some)
    };
    let mae_of = |triples: &[(f64, f64, f64)], unit: f64| -> Option<f64> {
        (!triples.is_empty())
            .then(|| triples.iter().map(|t| t.2).sum::<f64>() / triples.len() as f64 * unit)
    };

    Ok(RankingSummary {
        n_grasps: evals.len(),
        stress_tau: tau_of(&stress)?,
        deformation_tau: tau_of(&deformation)?,
        stress_mae_kpa: mae_of(&stress, 1e-3),
        deformation_mae_mm: mae_of(&deformation, 1e3),
    })
}

/// Writes one CSV row per grasp with true and predicted quantities; `NA`
/// marks quantities the variant does not predict.
pub fn write_eval_csv(path: &Path, evals: &[GraspEval]) -> Result<()> {
    let mut out = String::from(
        "grasp_index,true_mean_stress_pa,pred_mean_stress_pa,stress_mae_pa,\
         true_mean_deformation_m,pred_mean_deformation_m,deformation_mae_m\n",
    );
    for e in evals {
        let cell = |q: &Option<crate::train::QuantityEval>| match q {
            Some(q) => format!("{},{},{}", q.true_value, q.pred_value, q.mae),
            None => "NA,NA,NA".into(),
        };
        out.push_str(&format!(
            "{},{},{}\n",
            e.grasp_index,
            cell(&e.stress),
            cell(&e.deformation)
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// One grasp's oracle quality in one box-plot group; `predicted_q` is `None`
/// for rows whose surrogate score is not meaningful.
#[derive(Debug, Clone, PartialEq)]
pub struct BoxplotRow {
    /// `all`, `threshold_low`, `refined_low`, `threshold_high`, or
    /// `refined_high`.
    pub group: &'static str,
    pub grasp_index: usize,
    pub oracle_q: f64,
    pub predicted_q: Option<f64>,
}

/// Writes flat `group,grasp_index,oracle_q,predicted_q` rows — the data
/// behind the grouped quality box plot.
pub fn write_boxplot_csv(path: &Path, rows: &[BoxplotRow]) -> Result<()> {
    let mut out = String::from("group,grasp_index,oracle_q,predicted_q\n");
    for r in rows {
        let predicted = r.predicted_q.map_or("NA".into(), |q| q.to_string());
        out.push_str(&format!("{},{},{},{predicted}\n", r.group, r.grasp_index, r.oracle_q));
    }
    std::fs::write(path, out)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Generalization experiments
// ---------------------------------------------------------------------------

/// Full-scale reference taus (stress, deformation) recorded in experiment
/// summaries for context next to the desk-scale numbers.
pub const REFERENCE_TAUS: (f64, f64) = (0.78, 0.66);

/// One train-and-evaluate run over a chosen generalization split.
///
/// A directory listed in both `train_dirs` and `test_dirs` contributes its
/// train split to training and its test split to evaluation (the held-out-
/// grasps setting); a directory in only one list contributes every record.
/// `level` is a 1-4 tag recorded in the report: held-out grasps, moduli,
/// objects, or object category.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub level: u8,
    pub train_dirs: Vec<PathBuf>,
    pub test_dirs: Vec<PathBuf>,
    pub train: TrainConfig,
}

/// Ranking metrics for the train and held-out sides of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub level: u8,
    pub train_summary: RankingSummary,
    pub test_summary: RankingSummary,
}

/// Trains on the pooled training records, evaluates both sides, and writes
/// `checkpoint.json`, `history.csv`, `eval_train.csv`, `eval_test.csv`, and
/// `summary.csv` under `out_dir`. Grasp indices in the pooled evaluations
/// are offset per dataset so two datasets never share an index.
pub fn full_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<ExperimentReport> {
    if !(1..=4).contains(&config.level) {
        return Err(Error::Plan(format!(
            "generalization level must be 1-4, got {}",
            config.level
        )));
    }
    if config.train_dirs.is_empty() || config.test_dirs.is_empty() {
        return Err(Error::Plan("experiment needs train and test datasets".into()));
    }

    // Load each directory once, in first-appearance order.
    let mut dirs: Vec<&PathBuf> = Vec::new();
    for d in config.train_dirs.iter().chain(&config.test_dirs) {
        if !dirs.contains(&d) {
            dirs.push(d);
        }
    }
    let datasets: Vec<Dataset> =
        dirs.iter().map(|d| load_dataset(d)).collect::<Result<_>>()?;
    let shared =
        |d: &PathBuf| config.train_dirs.contains(d) && config.test_dirs.contains(d);

    let mut train_records: Vec<&DatasetRecord> = Vec::new();
    for (dir, ds) in dirs.iter().zip(&datasets) {
        if config.train_dirs.contains(dir) {
            if shared(dir) {
                train_records.extend(ds.train_records());
            } else {
                train_records.extend(ds.records.iter());
            }
        }
    }
    let outcome = train_model(&train_records, &config.train)?;

    fs::create_dir_all(out_dir)?;
    save_checkpoint(&out_dir.join("checkpoint.json"), &outcome.params, &outcome.stats)?;
    write_history_csv(&out_dir.join("history.csv"), &outcome.history)?;

    // Evaluate per dataset, then pool under per-dataset index offsets. The
    // offset advances over every dataset so both sides agree on indices.
    let pooled = |pick: &dyn for<'a> Fn(&PathBuf, &'a Dataset) -> Option<Vec<&'a DatasetRecord>>|
     -> Result<Vec<GraspEval>> {
        let mut out = Vec::new();
        let mut base = 0usize;
        for (dir, ds) in dirs.iter().zip(&datasets) {
            if let Some(records) = pick(dir, ds) {
                if !records.is_empty() {
                    let mut evals =
                        evaluate(&records, &outcome.params, &outcome.stats, config.train.variant)?;
                    for e in &mut evals {
                        e.grasp_index += base;
                    }
                    out.extend(evals);
                }
            }
            base += ds.records.iter().map(|r| r.grasp_index + 1).max().unwrap_or(0);
        }
        Ok(out)
    };
    let train_evals = pooled(&|dir, ds| {
        config.train_dirs.contains(dir).then(|| {
            if shared(dir) {
                ds.train_records()
            } else {
                ds.records.iter().collect()
            }
        })
    })?;
    let test_evals = pooled(&|dir, ds| {
        config.test_dirs.contains(dir).then(|| {
            if shared(dir) {
                ds.test_records()
            } else {
                ds.records.iter().collect()
            }
        })
    })?;
    if test_evals.is_empty() {
        return Err(Error::Plan(
            "held-out evaluation is empty; check the split or test directories".into(),
        ));
    }

    write_eval_csv(&out_dir.join("eval_train.csv"), &train_evals)?;
    write_eval_csv(&out_dir.join("eval_test.csv"), &test_evals)?;
    let train_summary = summarize_ranking(&train_evals)?;
    let test_summary = summarize_ranking(&test_evals)?;

    let mut summary = String::from(
        "split,level,n_grasps,stress_tau,deformation_tau,stress_mae_kpa,deformation_mae_mm\n",
    );
    let cell = |v: Option<f64>| v.map_or("NA".into(), |x| x.to_string());
    for (split, s) in [("train", &train_summary), ("test", &test_summary)] {
        summary.push_str(&format!(
            "{split},{},{},{},{},{},{}\n",
            config.level,
            s.n_grasps,
            cell(s.stress_tau),
            cell(s.deformation_tau),
            cell(s.stress_mae_kpa),
            cell(s.deformation_mae_mm),
        ));
    }
    summary.push_str(&format!(
        "full_scale_reference,NA,NA,{},{},NA,NA\n",
        REFERENCE_TAUS.0, REFERENCE_TAUS.1
    ));
    fs::write(out_dir.join("summary.csv"), summary)?;

    Ok(ExperimentReport { level: config.level, train_summary, test_summary })
}
