//! Converts a grasp scene (object mesh + closed gripper + contacts) into the
//! multigraph the network consumes, and owns feature normalization.
//!
//! Node features are `[type one-hot (3) | position (3) | closing dir (3)]`;
//! positions are re-centered to the object centroid and the closing direction
//! is nonzero only on gripper nodes. Mesh edges (tet edges plus pad-grid
//! edges) and contact edges (gripper/object pairs within tolerance) each
//! carry `[relative displacement (3) | distance (1) | modulus-or-force (1)]`:
//! the last channel holds the elastic modulus on object mesh edges, zero on
//! gripper mesh edges, and the per-edge contact force `F_g / |pairs|` on
//! contact edges. Every undirected edge is stored as two directed edges with
//! the displacement negated on the reverse direction.
//!
//! Normalization is per-channel z-scoring with statistics fitted on training
//! data only; one-hot channels are exempt and standard deviations are floored
//! to keep constant channels finite.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::fem::FieldOutput;
use crate::grasp::{ContactAssignment, PosedGripper};
use crate::mesh::{tet_edges, TetMesh};
use crate::tensor::{affine_cols, Tensor};
use crate::{Error, Result};

/// Floor applied to fitted standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

/// Width of the standard node feature block.
pub const NODE_FEATURE_DIM: usize = 9;

/// Width of edge feature blocks (mesh and contact alike).
pub const EDGE_FEATURE_DIM: usize = 5;

/// Number of target channels: von Mises stress then displacement xyz.
pub const TARGET_DIM: usize = 4;

/// Role of a node in the scene graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeType {
    Gripper,
    ObjectSurface,
    ObjectInterior,
}

impl NodeType {
    fn one_hot(self) -> [f64; 3] {
        match self {
            NodeType::Gripper => [1.0, 0.0, 0.0],
            NodeType::ObjectSurface => [0.0, 1.0, 0.0],
            NodeType::ObjectInterior => [0.0, 0.0, 1.0],
        }
    }
}

/// The network's input graph. Object nodes come first (mesh vertex order),
/// then gripper nodes; `[src, dst]` edge pairs index that combined list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiGraph {
    pub node_features: Tensor,
    pub node_types: Vec<NodeType>,
    pub object_node_count: usize,
    pub mesh_edges: Vec<[usize; 2]>,
    pub mesh_edge_features: Tensor,
    pub contact_edges: Vec<[usize; 2]>,
    pub contact_edge_features: Tensor,
    /// Squeeze force of the grasp this graph encodes, N.
    pub force_level_n: f64,
    /// Undirected contact pair count (denominator of the per-edge force).
    pub contact_pair_count: usize,
}

/// Builds the multigraph for one grasp scene at a given squeeze force.
pub fn build_graph(
    mesh: &TetMesh,
    posed: &PosedGripper,
    contacts: &ContactAssignment,
    f_g: f64,
) -> Result<MultiGraph> {
    if contacts.pairs.is_empty() {
        return Err(Error::Graph("cannot build a graph without contact pairs".into()));
    }
    if !(f_g > 0.0) {
        return Err(Error::Graph(format!("squeeze force must be positive, got {f_g}")));
    }
    let n_obj = mesh.vertices.len();
    let n_grip = posed.vertices_world.len();
    let n = n_obj + n_grip;
    let center = mesh.centroid();

    // Re-centered positions, object rows first.
    let mut positions = Tensor::zeros(n, 3);
    for (i, v) in mesh.vertices.iter().enumerate() {
        positions.row_mut(i).copy_from_slice(&[v.x - center.x, v.y - center.y, v.z - center.z]);
    }
    for (i, v) in posed.vertices_world.iter().enumerate() {
        positions
            .row_mut(n_obj + i)
            .copy_from_slice(&[v.x - center.x, v.y - center.y, v.z - center.z]);
    }

    let surface_mask = mesh.surface_vertex_mask();
    let mut node_types = Vec::with_capacity(n);
    for i in 0..n_obj {
        node_types.push(if surface_mask[i] {
            NodeType::ObjectSurface
        } else {
            NodeType::ObjectInterior
        });
    }
    node_types.extend(std::iter::repeat(NodeType::Gripper).take(n_grip));

    let mut closing = Tensor::zeros(n, 3);
    for (i, &pad) in posed.pad_of_vertex.iter().enumerate() {
        let dir = posed.closing_dirs_world[pad];
        closing.row_mut(n_obj + i).copy_from_slice(&[dir.x, dir.y, dir.z]);
    }

    let mut node_features = Tensor::zeros(n, NODE_FEATURE_DIM);
    for i in 0..n {
        let one_hot = node_types[i].one_hot();
        let row = node_features.row_mut(i);
        row[..3].copy_from_slice(&one_hot);
        row[3..6].copy_from_slice(positions.row(i));
        row[6..9].copy_from_slice(closing.row(i));
    }

    // Undirected mesh edges: object tet edges then gripper pad edges.
    let mut undirected: Vec<([usize; 2], f64)> = tet_edges(mesh)
        .into_iter()
        .map(|e| (e, mesh.elastic_modulus_pa))
        .collect();
    undirected.extend(
        posed
            .edges
            .iter()
            .map(|&[a, b]| ([a + n_obj, b + n_obj], 0.0)),
    );

    let mut mesh_edges = Vec::with_capacity(2 * undirected.len());
    let mut mesh_rows = Vec::with_capacity(2 * undirected.len());
    for ([a, b], modulus) in undirected {
        for [src, dst] in [[a, b], [b, a]] {
            mesh_edges.push([src, dst]);
            mesh_rows.push(edge_feature_row(&positions, src, dst, modulus));
        }
    }

    let pair_count = contacts.pairs.len();
    let force_per_edge = f_g / pair_count as f64;
    let mut contact_edges = Vec::with_capacity(2 * pair_count);
    let mut contact_rows = Vec::with_capacity(2 * pair_count);
    for &(g, o) in &contacts.pairs {
        let g_global = g + n_obj;
        for [src, dst] in [[g_global, o], [o, g_global]] {
            contact_edges.push([src, dst]);
            contact_rows.push(edge_feature_row(&positions, src, dst, force_per_edge));
        }
    }

    Ok(MultiGraph {
        node_features,
        node_types,
        object_node_count: n_obj,
        mesh_edges,
        mesh_edge_features: Tensor::from_rows(mesh_rows),
        contact_edges,
        contact_edge_features: Tensor::from_rows(contact_rows),
        force_level_n: f_g,
        contact_pair_count: pair_count,
    })
}

fn edge_feature_row(positions: &Tensor, src: usize, dst: usize, last: f64) -> Vec<f64> {
    let ps = positions.row(src);
    let pd = positions.row(dst);
    let d = [pd[0] - ps[0], pd[1] - ps[1], pd[2] - ps[2]];
    let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    vec![d[0], d[1], d[2], dist, last]
}

/// Packs oracle fields into the `n_obj x 4` target tensor
/// `[stress | displacement xyz]`.
pub fn target_tensor(fields: &FieldOutput) -> Tensor {
    Tensor::from_fn(fields.stress_pa.len(), TARGET_DIM, |r, c| match c {
        0 => fields.stress_pa[r],
        _ => fields.displacement_m[r][c - 1],
    })
}

// ---------------------------------------------------------------------------
// Force-representation ablations
// ---------------------------------------------------------------------------

/// Replaces the per-edge contact force channel with the raw total `F_g`
/// (force-representation ablation: no distribution over edges).
pub fn ablate_raw_force(graph: &MultiGraph) -> MultiGraph {
    let mut out = graph.clone();
    for r in 0..out.contact_edge_features.rows {
        out.contact_edge_features.row_mut(r)[EDGE_FEATURE_DIM - 1] = out.force_level_n;
    }
    out
}

/// Moves the force out of the contact edges entirely: appends a node channel
/// carrying `F_g` on every node and zeroes the contact force channel.
pub fn ablate_node_force(graph: &MultiGraph) -> MultiGraph {
    let mut out = graph.clone();
    let n = graph.node_features.rows;
    let mut widened = Tensor::zeros(n, graph.node_features.cols + 1);
    for r in 0..n {
        let row = widened.row_mut(r);
        row[..graph.node_features.cols].copy_from_slice(graph.node_features.row(r));
        row[graph.node_features.cols] = graph.force_level_n;
    }
    out.node_features = widened;
    for r in 0..out.contact_edge_features.rows {
        out.contact_edge_features.row_mut(r)[EDGE_FEATURE_DIM - 1] = 0.0;
    }
    out
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Mean and standard deviation per channel, with exempt channels passed
/// through unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Channels left unnormalized (the node one-hot block).
    pub exempt: Vec<bool>,
}

impl ChannelStats {
    fn identity(width: usize) -> ChannelStats {
        ChannelStats {
            mean: vec![0.0; width],
            std: vec![1.0; width],
            exempt: vec![false; width],
        }
    }

    fn apply(&self, x: &Tensor) -> Tensor {
        let scale: Vec<f64> = self
            .std
            .iter()
            .zip(&self.exempt)
            .map(|(&s, &e)| if e { 1.0 } else { 1.0 / s })
            .collect();
        let shift: Vec<f64> = self
            .mean
            .iter()
            .zip(&scale)
            .zip(&self.exempt)
            .map(|((&m, &sc), &e)| if e { 0.0 } else { -m * sc })
            .collect();
        affine_cols(x, &scale, &shift)
    }

    fn unapply(&self, x: &Tensor) -> Tensor {
        let scale: Vec<f64> = self
            .std
            .iter()
            .zip(&self.exempt)
            .map(|(&s, &e)| if e { 1.0 } else { s })
            .collect();
        let shift: Vec<f64> = self
            .mean
            .iter()
            .zip(&self.exempt)
            .map(|(&m, &e)| if e { 0.0 } else { m })
            .collect();
        affine_cols(x, &scale, &shift)
    }

    /// Normalization factors as per-column `(scale, shift)` for taped paths.
    pub fn scale_shift(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .std
            .iter()
            .zip(&self.exempt)
            .map(|(&s, &e)| if e { 1.0 } else { 1.0 / s })
            .collect();
        let shift: Vec<f64> = self
            .mean
            .iter()
            .zip(&scale)
            .zip(&self.exempt)
            .map(|((&m, &sc), &e)| if e { 0.0 } else { -m * sc })
            .collect();
        (scale, shift)
    }
}

/// Z-score statistics for every feature class plus the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub node: ChannelStats,
    pub mesh_edge: ChannelStats,
    pub contact_edge: ChannelStats,
    pub target: ChannelStats,
    /// Positions were re-centered to the object centroid when building.
    pub recentered: bool,
}

/// Streaming accumulator so statistics can be fitted without holding every
/// graph in memory.
#[derive(Debug, Clone)]
pub struct NormStatsAccumulator {
    node: MomentAcc,
    mesh_edge: MomentAcc,
    contact_edge: MomentAcc,
    target: MomentAcc,
}

#[derive(Debug, Clone)]
struct MomentAcc {
    count: f64,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl MomentAcc {
    fn new(width: usize) -> MomentAcc {
        MomentAcc { count: 0.0, sum: vec![0.0; width], sum_sq: vec![0.0; width] }
    }

    fn add(&mut self, x: &Tensor) {
        assert_eq!(x.cols, self.sum.len(), "channel width changed mid-fit");
        for r in 0..x.rows {
            for (c, &v) in x.row(r).iter().enumerate() {
                self.sum[c] += v;
                self.sum_sq[c] += v * v;
            }
        }
        self.count += x.rows as f64;
    }

    fn finish(&self, exempt: Vec<bool>) -> Result<ChannelStats> {
        if self.count == 0.0 {
            return Err(Error::Graph("no samples accumulated for normalization".into()));
        }
        let mean: Vec<f64> = self.sum.iter().map(|&s| s / self.count).collect();
        let std: Vec<f64> = self
            .sum_sq
            .iter()
            .zip(&mean)
            .map(|(&sq, &m)| (sq / self.count - m * m).max(0.0).sqrt().max(STD_FLOOR))
            .collect();
        Ok(ChannelStats { mean, std, exempt })
    }
}

impl NormStatsAccumulator {
    /// Channel widths are taken from the first record; ablations that widen
    /// the node block must be applied before fitting.
    pub fn new(node_dim: usize) -> NormStatsAccumulator {
        NormStatsAccumulator {
            node: MomentAcc::new(node_dim),
            mesh_edge: MomentAcc::new(EDGE_FEATURE_DIM),
            contact_edge: MomentAcc::new(EDGE_FEATURE_DIM),
            target: MomentAcc::new(TARGET_DIM),
        }
    }

    pub fn add(&mut self, graph: &MultiGraph, target: &Tensor) {
        self.node.add(&graph.node_features);
        self.mesh_edge.add(&graph.mesh_edge_features);
        self.contact_edge.add(&graph.contact_edge_features);
        self.target.add(target);
    }

    pub fn finish(&self) -> Result<NormStats> {
        let node_dim = self.node.sum.len();
        let mut node_exempt = vec![false; node_dim];
        for flag in node_exempt.iter_mut().take(3) {
            *flag = true; // type one-hot block
        }
        Ok(NormStats {
            node: self.node.finish(node_exempt)?,
            mesh_edge: self.mesh_edge.finish(vec![false; EDGE_FEATURE_DIM])?,
            contact_edge: self.contact_edge.finish(vec![false; EDGE_FEATURE_DIM])?,
            target: self.target.finish(vec![false; TARGET_DIM])?,
            recentered: true,
        })
    }
}

impl NormStats {
    /// Identity statistics (useful for tests and untrained forward passes).
    pub fn identity(node_dim: usize) -> NormStats {
        NormStats {
            node: ChannelStats::identity(node_dim),
            mesh_edge: ChannelStats::identity(EDGE_FEATURE_DIM),
            contact_edge: ChannelStats::identity(EDGE_FEATURE_DIM),
            target: ChannelStats::identity(TARGET_DIM),
            recentered: true,
        }
    }

    /// Z-scores all feature blocks of a graph.
    pub fn apply_norm(&self, graph: &MultiGraph) -> MultiGraph {
        let mut out = graph.clone();
        out.node_features = self.node.apply(&graph.node_features);
        out.mesh_edge_features = self.mesh_edge.apply(&graph.mesh_edge_features);
        out.contact_edge_features = self.contact_edge.apply(&graph.contact_edge_features);
        out
    }

    /// Z-scores a raw target tensor.
    pub fn normalize_target(&self, target: &Tensor) -> Tensor {
        self.target.apply(target)
    }

    /// Maps a normalized `n x 4` target-space tensor back to physical units.
    pub fn denormalize_target(&self, normalized: &Tensor) -> Tensor {
        self.target.unapply(normalized)
    }

    /// Converts a model output over object nodes back to physical fields.
    /// `output_dim` 4 carries stress then displacement; 1 is stress only and
    /// 3 displacement only (missing fields are zero).
    pub fn denorm_output(&self, pred: &Tensor, force_level_n: f64) -> Result<FieldOutput> {
        let n = pred.rows;
        let full = match pred.cols {
            4 => self.denormalize_target(pred),
            1 => {
                let mut widened = Tensor::zeros(n, TARGET_DIM);
                for r in 0..n {
                    widened.row_mut(r)[0] = pred.get(r, 0);
                }
                let mut out = self.denormalize_target(&widened);
                for r in 0..n {
                    let row = out.row_mut(r);
                    row[1] = 0.0;
                    row[2] = 0.0;
                    row[3] = 0.0;
                }
                out
            }
            3 => {
                let mut widened = Tensor::zeros(n, TARGET_DIM);
                for r in 0..n {
                    widened.row_mut(r)[1..4].copy_from_slice(pred.row(r));
                }
                let mut out = self.denormalize_target(&widened);
                for r in 0..n {
                    out.row_mut(r)[0] = 0.0;
                }
                out
            }
            other => {
                return Err(Error::Graph(format!(
                    "cannot denormalize an output with {other} channels"
                )))
            }
        };
        Ok(FieldOutput {
            stress_pa: (0..n).map(|r| full.get(r, 0)).collect(),
            displacement_m: (0..n)
                .map(|r| Vector3::new(full.get(r, 1), full.get(r, 2), full.get(r, 3)))
                .collect(),
            force_level_n,
        })
    }
}
