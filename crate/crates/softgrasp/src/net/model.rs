//! Encode-process-decode graph network.
//!
//! Three encoders lift node, mesh-edge, and contact-edge features to a shared
//! latent width. Each processor block updates mesh edges, contact edges, and
//! nodes in turn: edge updates see the edge latent and both endpoint latents;
//! the node update sees the node latent and the sum of incoming latents of
//! each edge class, aggregated in fixed ascending edge order. Every update is
//! residual, and every MLP except the decoder ends in a trainable layer norm.
//! The decoder's final layer is zero-initialized so an untrained model
//! predicts exactly zero in normalized target space.
//!
//! Two forward paths share the same kernels and op order: a tape-free
//! inference path ([`ModelParams::forward_infer`]) and a taped path
//! ([`ModelParams::forward_tape`]) for training and pose refinement. Their
//! outputs are bit-identical.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::MultiGraph;
use crate::net::tape::{NodeId, Tape};
use crate::tensor::{
    add_bias, concat_cols, gather_rows, layer_norm, matmul, relu, scatter_add_rows, Tensor,
};
use crate::{Error, Result};

/// Network architecture. Defaults follow the reference configuration; the
/// desk-scale presets shrink `latent_size` and `message_passing_steps`.
///
/// The width fields may be omitted in serialized configs: training resolves
/// them from the variant anyway, and the defaults match the full graph
/// features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub latent_size: usize,
    pub message_passing_steps: usize,
    pub mlp_hidden_width: usize,
    #[serde(default = "default_node_input_dim")]
    pub node_input_dim: usize,
    #[serde(default = "default_edge_input_dim")]
    pub edge_input_dim: usize,
    /// 4 = stress + displacement, 1 = stress only, 3 = displacement only.
    #[serde(default = "default_output_dim")]
    pub output_dim: usize,
}

fn default_node_input_dim() -> usize {
    crate::graph::NODE_FEATURE_DIM
}

fn default_edge_input_dim() -> usize {
    crate::graph::EDGE_FEATURE_DIM
}

fn default_output_dim() -> usize {
    4
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent_size: 128,
            message_passing_steps: 15,
            mlp_hidden_width: 128,
            node_input_dim: crate::graph::NODE_FEATURE_DIM,
            edge_input_dim: crate::graph::EDGE_FEATURE_DIM,
            output_dim: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_size == 0
            || self.message_passing_steps == 0
            || self.mlp_hidden_width == 0
            || self.node_input_dim == 0
            || self.edge_input_dim == 0
        {
            return Err(Error::Net("model dimensions must be positive".into()));
        }
        if ![1, 3, 4].contains(&self.output_dim) {
            return Err(Error::Net(format!(
                "output_dim must be 1, 3, or 4, got {}",
                self.output_dim
            )));
        }
        Ok(())
    }
}

/// A two-hidden-layer ReLU MLP with optional trailing layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// Per-layer weights, stored input-major (`in x out`).
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
    /// `(gamma, beta)` of the trailing layer norm, if present.
    pub layer_norm: Option<(Tensor, Tensor)>,
}

impl Mlp {
    /// Glorot-uniform initialization; `zero_final` zeroes the last layer
    /// (used by the decoder).
    fn init(
        input: usize,
        hidden: usize,
        output: usize,
        with_layer_norm: bool,
        zero_final: bool,
        rng: &mut ChaCha8Rng,
    ) -> Mlp {
        let dims = [input, hidden, hidden, output];
        let mut weights = Vec::with_capacity(3);
        let mut biases = Vec::with_capacity(3);
        for layer in 0..3 {
            let (fan_in, fan_out) = (dims[layer], dims[layer + 1]);
            let zero = zero_final && layer == 2;
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push(Tensor::from_fn(fan_in, fan_out, |_, _| {
                if zero { 0.0 } else { rng.gen_range(-limit..limit) }
            }));
            biases.push(Tensor::zeros(1, fan_out));
        }
        let layer_norm = with_layer_norm.then(|| {
            (
                Tensor { rows: 1, cols: output, data: vec![1.0; output] },
                Tensor::zeros(1, output),
            )
        });
        Mlp { weights, biases, layer_norm }
    }

    /// Tape-free application to each row of `x`.
    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in 0..self.weights.len() {
            h = add_bias(&matmul(&h, &self.weights[layer]), &self.biases[layer]);
            if layer + 1 < self.weights.len() {
                h = relu(&h);
            }
        }
        match &self.layer_norm {
            Some((gamma, beta)) => layer_norm(&h, gamma, beta),
            None => h,
        }
    }

    fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor)) {
        for layer in 0..self.weights.len() {
            f(format!("{prefix}.w{layer}"), &self.weights[layer]);
            f(format!("{prefix}.b{layer}"), &self.biases[layer]);
        }
        if let Some((gamma, beta)) = &self.layer_norm {
            f(format!("{prefix}.ln_g"), gamma);
            f(format!("{prefix}.ln_b"), beta);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor)) {
        for layer in 0..self.weights.len() {
            f(format!("{prefix}.w{layer}"), &mut self.weights[layer]);
            f(format!("{prefix}.b{layer}"), &mut self.biases[layer]);
        }
        if let Some((gamma, beta)) = &mut self.layer_norm {
            f(format!("{prefix}.ln_g"), gamma);
            f(format!("{prefix}.ln_b"), beta);
        }
    }
}

/// One message-passing block.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorBlock {
    pub mesh_edge: Mlp,
    pub contact_edge: Mlp,
    pub node: Mlp,
}

/// All trainable parameters of the surrogate.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder_node: Mlp,
    pub encoder_mesh_edge: Mlp,
    pub encoder_contact_edge: Mlp,
    pub blocks: Vec<ProcessorBlock>,
    pub decoder: Mlp,
}

impl ModelParams {
    /// Deterministic seeded initialization.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (latent, hidden) = (config.latent_size, config.mlp_hidden_width);
        let encoder_node = Mlp::init(config.node_input_dim, hidden, latent, true, false, &mut rng);
        let encoder_mesh_edge =
            Mlp::init(config.edge_input_dim, hidden, latent, true, false, &mut rng);
        let encoder_contact_edge =
            Mlp::init(config.edge_input_dim, hidden, latent, true, false, &mut rng);
        let blocks = (0..config.message_passing_steps)
            .map(|_| ProcessorBlock {
                mesh_edge: Mlp::init(3 * latent, hidden, latent, true, false, &mut rng),
                contact_edge: Mlp::init(3 * latent, hidden, latent, true, false, &mut rng),
                node: Mlp::init(3 * latent, hidden, latent, true, false, &mut rng),
            })
            .collect();
        let decoder = Mlp::init(latent, hidden, config.output_dim, false, true, &mut rng);
        Ok(ModelParams {
            config: config.clone(),
            encoder_node,
            encoder_mesh_edge,
            encoder_contact_edge,
            blocks,
            decoder,
        })
    }

    /// Visits every named parameter tensor in a fixed order (block indices
    /// zero-padded so lexicographic order matches visit order).
    pub fn visit_params<'a>(&'a self, mut f: impl FnMut(String, &'a Tensor)) {
        self.encoder_node.visit("encoder_node", &mut f);
        self.encoder_mesh_edge.visit("encoder_mesh_edge", &mut f);
        self.encoder_contact_edge.visit("encoder_contact_edge", &mut f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.mesh_edge.visit(&format!("block{i:02}.mesh_edge"), &mut f);
            block.contact_edge.visit(&format!("block{i:02}.contact_edge"), &mut f);
            block.node.visit(&format!("block{i:02}.node"), &mut f);
        }
        self.decoder.visit("decoder", &mut f);
    }

    /// Mutable variant of [`Self::visit_params`], same order.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(String, &mut Tensor)) {
        self.encoder_node.visit_mut("encoder_node", &mut f);
        self.encoder_mesh_edge.visit_mut("encoder_mesh_edge", &mut f);
        self.encoder_contact_edge.visit_mut("encoder_contact_edge", &mut f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.mesh_edge.visit_mut(&format!("block{i:02}.mesh_edge"), &mut f);
            block.contact_edge.visit_mut(&format!("block{i:02}.contact_edge"), &mut f);
            block.node.visit_mut(&format!("block{i:02}.node"), &mut f);
        }
        self.decoder.visit_mut("decoder", &mut f);
    }

    /// Total parameter count.
    pub fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| n += t.data.len());
        n
    }

    /// Tape-free forward pass over a normalized graph. Returns the
    /// `n_nodes x output_dim` prediction in normalized target space.
    pub fn forward_infer(&self, graph: &MultiGraph) -> Result<Tensor> {
        self.check_graph(graph)?;
        let n = graph.node_features.rows;
        let (mesh_src, mesh_dst) = edge_endpoints(&graph.mesh_edges);
        let (contact_src, contact_dst) = edge_endpoints(&graph.contact_edges);

        let mut v = self.encoder_node.apply(&graph.node_features);
        let mut e_m = self.encoder_mesh_edge.apply(&graph.mesh_edge_features);
        let mut e_c = self.encoder_contact_edge.apply(&graph.contact_edge_features);

        for block in &self.blocks {
            let m_in = concat_cols(&[&e_m, &gather_rows(&v, &mesh_src), &gather_rows(&v, &mesh_dst)]);
            let mut e_m_new = block.mesh_edge.apply(&m_in);
            e_m_new.add_assign(&e_m);

            let c_in = concat_cols(&[
                &e_c,
                &gather_rows(&v, &contact_src),
                &gather_rows(&v, &contact_dst),
            ]);
            let mut e_c_new = block.contact_edge.apply(&c_in);
            e_c_new.add_assign(&e_c);

            let agg_m = scatter_add_rows(&e_m_new, &mesh_dst, n);
            let agg_c = scatter_add_rows(&e_c_new, &contact_dst, n);
            let n_in = concat_cols(&[&v, &agg_m, &agg_c]);
            let mut v_new = block.node.apply(&n_in);
            v_new.add_assign(&v);

            v = v_new;
            e_m = e_m_new;
            e_c = e_c_new;
        }
        Ok(self.decoder.apply(&v))
    }

    /// Taped forward pass; `inputs` supplies the feature nodes (leaves,
    /// constants, or the output of the pose-perturbation subgraph).
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        inputs: &GraphTapeInputs,
    ) -> NodeId {
        let n = inputs.n_nodes;
        let mut v = mlp_tape(tape, &ids.encoder_node, inputs.node_features);
        let mut e_m = mlp_tape(tape, &ids.encoder_mesh_edge, inputs.mesh_edge_features);
        let mut e_c = mlp_tape(tape, &ids.encoder_contact_edge, inputs.contact_edge_features);

        for block in &ids.blocks {
            let src_m = tape.gather_rows(v, inputs.mesh_src.clone());
            let dst_m = tape.gather_rows(v, inputs.mesh_dst.clone());
            let m_in = tape.concat_cols(&[e_m, src_m, dst_m]);
            let m_out = mlp_tape(tape, &block.mesh_edge, m_in);
            let e_m_new = tape.add(m_out, e_m);

            let src_c = tape.gather_rows(v, inputs.contact_src.clone());
            let dst_c = tape.gather_rows(v, inputs.contact_dst.clone());
            let c_in = tape.concat_cols(&[e_c, src_c, dst_c]);
            let c_out = mlp_tape(tape, &block.contact_edge, c_in);
            let e_c_new = tape.add(c_out, e_c);

            let agg_m = tape.scatter_add_rows(e_m_new, inputs.mesh_dst.clone(), n);
            let agg_c = tape.scatter_add_rows(e_c_new, inputs.contact_dst.clone(), n);
            let n_in = tape.concat_cols(&[v, agg_m, agg_c]);
            let n_out = mlp_tape(tape, &block.node, n_in);
            let v_new = tape.add(n_out, v);

            v = v_new;
            e_m = e_m_new;
            e_c = e_c_new;
        }
        mlp_tape(tape, &ids.decoder, v)
    }

    fn check_graph(&self, graph: &MultiGraph) -> Result<()> {
        if graph.node_features.cols != self.config.node_input_dim {
            return Err(Error::Net(format!(
                "graph node features have {} channels, model expects {}",
                graph.node_features.cols, self.config.node_input_dim
            )));
        }
        if graph.mesh_edge_features.cols != self.config.edge_input_dim
            || graph.contact_edge_features.cols != self.config.edge_input_dim
        {
            return Err(Error::Net("graph edge feature width mismatch".into()));
        }
        if graph.mesh_edges.is_empty() || graph.contact_edges.is_empty() {
            return Err(Error::Net("graph has no mesh or no contact edges".into()));
        }
        Ok(())
    }

    /// Registers every parameter as a tape leaf, in visit order.
    pub fn register_params(&self, tape: &mut Tape) -> ParamIds {
        let mlp = |tape: &mut Tape, m: &Mlp| MlpIds {
            weights: m.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: m.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
            layer_norm: m
                .layer_norm
                .as_ref()
                .map(|(g, b)| (tape.leaf(g.clone()), tape.leaf(b.clone()))),
        };
        ParamIds {
            encoder_node: mlp(tape, &self.encoder_node),
            encoder_mesh_edge: mlp(tape, &self.encoder_mesh_edge),
            encoder_contact_edge: mlp(tape, &self.encoder_contact_edge),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockIds {
                    mesh_edge: mlp(tape, &b.mesh_edge),
                    contact_edge: mlp(tape, &b.contact_edge),
                    node: mlp(tape, &b.node),
                })
                .collect(),
            decoder: mlp(tape, &self.decoder),
        }
    }
}

/// Splits `[src, dst]` pairs into separate index vectors.
pub fn edge_endpoints(edges: &[[usize; 2]]) -> (Vec<usize>, Vec<usize>) {
    (
        edges.iter().map(|e| e[0]).collect(),
        edges.iter().map(|e| e[1]).collect(),
    )
}

fn mlp_tape(tape: &mut Tape, ids: &MlpIds, x: NodeId) -> NodeId {
    let mut h = x;
    for layer in 0..ids.weights.len() {
        h = tape.matmul(h, ids.weights[layer]);
        h = tape.add_bias(h, ids.biases[layer]);
        if layer + 1 < ids.weights.len() {
            h = tape.relu(h);
        }
    }
    match ids.layer_norm {
        Some((gamma, beta)) => tape.layer_norm(h, gamma, beta),
        None => h,
    }
}

/// Tape node ids of one MLP's parameters.
pub struct MlpIds {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
    pub layer_norm: Option<(NodeId, NodeId)>,
}

impl MlpIds {
    fn visit(&self, prefix: &str, f: &mut impl FnMut(String, NodeId)) {
        for layer in 0..self.weights.len() {
            f(format!("{prefix}.w{layer}"), self.weights[layer]);
            f(format!("{prefix}.b{layer}"), self.biases[layer]);
        }
        if let Some((gamma, beta)) = self.layer_norm {
            f(format!("{prefix}.ln_g"), gamma);
            f(format!("{prefix}.ln_b"), beta);
        }
    }
}

/// Tape node ids of all parameters, mirroring [`ModelParams`].
pub struct ParamIds {
    pub encoder_node: MlpIds,
    pub encoder_mesh_edge: MlpIds,
    pub encoder_contact_edge: MlpIds,
    pub blocks: Vec<BlockIds>,
    pub decoder: MlpIds,
}

pub struct BlockIds {
    pub mesh_edge: MlpIds,
    pub contact_edge: MlpIds,
    pub node: MlpIds,
}

impl ParamIds {
    /// Visits ids in the same order as [`ModelParams::visit_params`].
    pub fn visit(&self, mut f: impl FnMut(String, NodeId)) {
        self.encoder_node.visit("encoder_node", &mut f);
        self.encoder_mesh_edge.visit("encoder_mesh_edge", &mut f);
        self.encoder_contact_edge.visit("encoder_contact_edge", &mut f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.mesh_edge.visit(&format!("block{i:02}.mesh_edge"), &mut f);
            block.contact_edge.visit(&format!("block{i:02}.contact_edge"), &mut f);
            block.node.visit(&format!("block{i:02}.node"), &mut f);
        }
        self.decoder.visit("decoder", &mut f);
    }
}

/// Feature and topology inputs for the taped forward pass.
pub struct GraphTapeInputs {
    pub node_features: NodeId,
    pub mesh_edge_features: NodeId,
    pub contact_edge_features: NodeId,
    pub mesh_src: Rc<Vec<usize>>,
    pub mesh_dst: Rc<Vec<usize>>,
    pub contact_src: Rc<Vec<usize>>,
    pub contact_dst: Rc<Vec<usize>>,
    pub n_nodes: usize,
}

impl GraphTapeInputs {
    /// Loads a normalized graph onto the tape with features as constants
    /// (the training case: gradients flow to parameters only).
    pub fn from_graph_const(tape: &mut Tape, graph: &MultiGraph) -> GraphTapeInputs {
        let (mesh_src, mesh_dst) = edge_endpoints(&graph.mesh_edges);
        let (contact_src, contact_dst) = edge_endpoints(&graph.contact_edges);
        GraphTapeInputs {
            node_features: tape.constant(graph.node_features.clone()),
            mesh_edge_features: tape.constant(graph.mesh_edge_features.clone()),
            contact_edge_features: tape.constant(graph.contact_edge_features.clone()),
            mesh_src: Rc::new(mesh_src),
            mesh_dst: Rc::new(mesh_dst),
            contact_src: Rc::new(contact_src),
            contact_dst: Rc::new(contact_dst),
            n_nodes: graph.node_features.rows,
        }
    }
}
