//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Every operation eagerly computes its value with the shared kernels from
//! [`crate::tensor`] and records just enough to replay the chain rule
//! backwards. Gradients flow to every [`Tape::leaf`]; [`Tape::constant`]
//! nodes terminate propagation. Leaves cover both network parameters and
//! input features, which is what lets the planner differentiate a grasp
//! objective with respect to the gripper pose through feature construction.
//!
//! Pose sensitivity enters through two linearized operations evaluated at a
//! zero increment: [`Tape::rigid_perturb_points`] (positions under a local
//! translation + rotation) and [`Tape::rotate_perturb_vecs`] (directions
//! under the rotation only). Their forward values are the unperturbed world
//! quantities; their backward rules inject the exact Jacobians of the rigid
//! map at the origin into the six pose coordinates.

use std::rc::Rc;

use nalgebra::{Matrix3, Vector3};

use crate::tensor::{
    add_bias, affine_cols, concat_cols, concat_rows, gather_rows, layer_norm,
    layer_norm_row_stats, matmul, matmul_nt, matmul_tn, mean_all, mse_vs, relu, row_norms,
    scatter_add_rows, slice_cols, slice_rows, smooth_max, smooth_max_weights, Tensor,
};

/// Row norms below this propagate a zero subgradient.
pub const ROW_NORM_GRAD_EPS: f64 = 1e-12;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Constant,
    MatMul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId },
    GatherRows { x: NodeId, idx: Rc<Vec<usize>> },
    ScatterAddRows { x: NodeId, idx: Rc<Vec<usize>> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(NodeId, NodeId),
    SliceCols { x: NodeId, start: usize },
    SliceRows { x: NodeId, start: usize },
    AffineCols { x: NodeId, scale: Vec<f64> },
    RowNorms(NodeId),
    MeanAll(NodeId),
    SmoothMax { x: NodeId, beta: f64, sigma_ref: f64 },
    MseVs { x: NodeId, target: Tensor },
    AddScalars(NodeId, NodeId),
    RigidPerturbPoints { local: Tensor, rot: Matrix3<f64>, delta: NodeId },
    RotatePerturbVecs { local: Tensor, rot: Matrix3<f64>, delta: NodeId },
}

struct TapeNode {
    op: Op,
    value: Tensor,
}

/// The tape itself: append-only during the forward pass, replayed in reverse
/// by [`Tape::backward`].
#[derive(Default)]
pub struct Tape {
    nodes: Vec<TapeNode>,
}

/// Gradients keyed by node id; populated for leaves (and any node an
/// accumulation passed through that is itself a leaf).
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads[id.0].take()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(TapeNode { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Differentiable input: parameters, features, the pose increment.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input; backward stops here.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = matmul(self.value(a), self.value(b));
        self.push(Op::MatMul(a, b), v)
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let v = add_bias(self.value(x), self.value(bias));
        self.push(Op::AddBias(x, bias), v)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut v = self.value(a).clone();
        v.add_scaled_assign(self.value(b), -1.0);
        self.push(Op::Sub(a, b), v)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let mut v = self.value(x).clone();
        for e in &mut v.data {
            *e *= s;
        }
        self.push(Op::Scale(x, s), v)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = relu(self.value(x));
        self.push(Op::Relu(x), v)
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let v = layer_norm(self.value(x), self.value(gamma), self.value(beta));
        self.push(Op::LayerNorm { x, gamma, beta }, v)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>) -> NodeId {
        let v = gather_rows(self.value(x), &idx);
        self.push(Op::GatherRows { x, idx }, v)
    }

    pub fn scatter_add_rows(&mut self, x: NodeId, idx: Rc<Vec<usize>>, out_rows: usize) -> NodeId {
        let v = scatter_add_rows(self.value(x), &idx, out_rows);
        self.push(Op::ScatterAddRows { x, idx }, v)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let v = concat_cols(&values);
        self.push(Op::ConcatCols(parts.to_vec()), v)
    }

    pub fn concat_rows(&mut self, top: NodeId, bottom: NodeId) -> NodeId {
        let v = concat_rows(self.value(top), self.value(bottom));
        self.push(Op::ConcatRows(top, bottom), v)
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = slice_cols(self.value(x), start, end);
        self.push(Op::SliceCols { x, start }, v)
    }

    pub fn slice_rows(&mut self, x: NodeId, start: usize, end: usize) -> NodeId {
        let v = slice_rows(self.value(x), start, end);
        self.push(Op::SliceRows { x, start }, v)
    }

    /// Per-column affine map with constant coefficients (normalization).
    pub fn affine_cols(&mut self, x: NodeId, scale: Vec<f64>, shift: Vec<f64>) -> NodeId {
        let v = affine_cols(self.value(x), &scale, &shift);
        self.push(Op::AffineCols { x, scale }, v)
    }

    pub fn row_norms(&mut self, x: NodeId) -> NodeId {
        let v = row_norms(self.value(x));
        self.push(Op::RowNorms(x), v)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let v = mean_all(self.value(x));
        self.push(Op::MeanAll(x), v)
    }

    pub fn smooth_max(&mut self, x: NodeId, beta: f64, sigma_ref: f64) -> NodeId {
        let v = smooth_max(self.value(x), beta, sigma_ref);
        self.push(Op::SmoothMax { x, beta, sigma_ref }, v)
    }

    /// Scalar `sum((x - target)^2) / rows` against a constant target.
    pub fn mse_vs(&mut self, x: NodeId, target: Tensor) -> NodeId {
        let v = mse_vs(self.value(x), &target);
        self.push(Op::MseVs { x, target }, v)
    }

    pub fn add_scalars(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).scalar_value() + self.value(b).scalar_value());
        self.push(Op::AddScalars(a, b), v)
    }

    /// World positions of rigid local points under pose `(rot, translation)`,
    /// differentiable with respect to a six-channel local pose increment
    /// `delta = [t | omega]` evaluated at zero.
    pub fn rigid_perturb_points(
        &mut self,
        local: Tensor,
        rot: Matrix3<f64>,
        translation: Vector3<f64>,
        delta: NodeId,
    ) -> NodeId {
        assert_eq!(local.cols, 3);
        assert_eq!(self.value(delta).cols, 6);
        let value = Tensor::from_fn(local.rows, 3, |r, c| {
            let p = Vector3::new(local.get(r, 0), local.get(r, 1), local.get(r, 2));
            (rot * p + translation)[c]
        });
        self.push(Op::RigidPerturbPoints { local, rot, delta }, value)
    }

    /// World directions of rigid local vectors, differentiable with respect
    /// to the rotational part of the same increment.
    pub fn rotate_perturb_vecs(
        &mut self,
        local: Tensor,
        rot: Matrix3<f64>,
        delta: NodeId,
    ) -> NodeId {
        assert_eq!(local.cols, 3);
        assert_eq!(self.value(delta).cols, 6);
        let value = Tensor::from_fn(local.rows, 3, |r, c| {
            let v = Vector3::new(local.get(r, 0), local.get(r, 1), local.get(r, 2));
            (rot * v)[c]
        });
        self.push(Op::RotatePerturbVecs { local, rot, delta }, value)
    }

    /// Runs the chain rule from `root` (any shape; the seed is all-ones) back
    /// to every leaf. Interior gradients are dropped as soon as they have
    /// been propagated.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = Tensor {
            rows: self.value(root).rows,
            cols: self.value(root).cols,
            data: vec![1.0; self.value(root).data.len()],
        };
        grads[root.0] = Some(seed);

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf | Op::Constant) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
        }
        // Drop constant slots so only leaves report gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Constant) {
                grads[id] = None;
            }
        }
        Gradients { grads }
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let accum = |slot: &mut Option<Tensor>, delta: Tensor| match slot {
            Some(t) => t.add_assign(&delta),
            None => *slot = Some(delta),
        };
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => unreachable!("handled by caller"),
            Op::MatMul(a, b) => {
                accum(&mut grads[a.0], matmul_nt(g, self.value(*b)));
                accum(&mut grads[b.0], matmul_tn(self.value(*a), g));
            }
            Op::AddBias(x, bias) => {
                accum(&mut grads[x.0], g.clone());
                let mut gb = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (o, &v) in gb.data.iter_mut().zip(g.row(r)) {
                        *o += v;
                    }
                }
                accum(&mut grads[bias.0], gb);
            }
            Op::Add(a, b) => {
                accum(&mut grads[a.0], g.clone());
                accum(&mut grads[b.0], g.clone());
            }
            Op::Sub(a, b) => {
                accum(&mut grads[a.0], g.clone());
                let mut neg = g.clone();
                for v in &mut neg.data {
                    *v = -*v;
                }
                accum(&mut grads[b.0], neg);
            }
            Op::Scale(x, s) => {
                let mut gx = g.clone();
                for v in &mut gx.data {
                    *v *= s;
                }
                accum(&mut grads[x.0], gx);
            }
            Op::Relu(x) => {
                let input = self.value(*x);
                let mut gx = g.clone();
                for (v, &inp) in gx.data.iter_mut().zip(&input.data) {
                    if inp <= 0.0 {
                        *v = 0.0;
                    }
                }
                accum(&mut grads[x.0], gx);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let input = self.value(*x);
                let gamma_v = self.value(*gamma);
                let k = input.cols as f64;
                let mut gx = Tensor::zeros(input.rows, input.cols);
                let mut gg = Tensor::zeros(1, input.cols);
                let mut gb = Tensor::zeros(1, input.cols);
                for r in 0..input.rows {
                    let row = input.row(r);
                    let (mean, inv_std) = layer_norm_row_stats(row);
                    let g_row = g.row(r);
                    // h = gamma .* g; means of h and h .* xhat over columns.
                    let mut mean_h = 0.0;
                    let mut mean_hx = 0.0;
                    for c in 0..input.cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let h = gamma_v.data[c] * g_row[c];
                        mean_h += h;
                        mean_hx += h * xhat;
                        gg.data[c] += g_row[c] * xhat;
                        gb.data[c] += g_row[c];
                    }
                    mean_h /= k;
                    mean_hx /= k;
                    let gx_row = gx.row_mut(r);
                    for c in 0..input.cols {
                        let xhat = (row[c] - mean) * inv_std;
                        let h = gamma_v.data[c] * g_row[c];
                        gx_row[c] = inv_std * (h - mean_h - xhat * mean_hx);
                    }
                }
                accum(&mut grads[x.0], gx);
                accum(&mut grads[gamma.0], gg);
                accum(&mut grads[beta.0], gb);
            }
            Op::GatherRows { x, idx } => {
                let rows = self.value(*x).rows;
                accum(&mut grads[x.0], scatter_add_rows(g, idx, rows));
            }
            Op::ScatterAddRows { x, idx } => {
                accum(&mut grads[x.0], gather_rows(g, idx));
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).cols;
                    accum(&mut grads[p.0], slice_cols(g, offset, offset + w));
                    offset += w;
                }
            }
            Op::ConcatRows(top, bottom) => {
                let top_rows = self.value(*top).rows;
                accum(&mut grads[top.0], slice_rows(g, 0, top_rows));
                accum(&mut grads[bottom.0], slice_rows(g, top_rows, g.rows));
            }
            Op::SliceCols { x, start } => {
                let input = self.value(*x);
                let mut gx = Tensor::zeros(input.rows, input.cols);
                for r in 0..g.rows {
                    gx.row_mut(r)[*start..start + g.cols].copy_from_slice(g.row(r));
                }
                accum(&mut grads[x.0], gx);
            }
            Op::SliceRows { x, start } => {
                let input = self.value(*x);
                let mut gx = Tensor::zeros(input.rows, input.cols);
                for r in 0..g.rows {
                    gx.row_mut(start + r).copy_from_slice(g.row(r));
                }
                accum(&mut grads[x.0], gx);
            }
            Op::AffineCols { x, scale } => {
                let mut gx = g.clone();
                for r in 0..gx.rows {
                    for (v, &s) in gx.row_mut(r).iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                accum(&mut grads[x.0], gx);
            }
            Op::RowNorms(x) => {
                let input = self.value(*x);
                let norms = &self.nodes[id].value;
                let mut gx = Tensor::zeros(input.rows, input.cols);
                for r in 0..input.rows {
                    let n = norms.data[r];
                    if n > ROW_NORM_GRAD_EPS {
                        let scale = g.data[r] / n;
                        for (o, &v) in gx.row_mut(r).iter_mut().zip(input.row(r)) {
                            *o = scale * v;
                        }
                    }
                }
                accum(&mut grads[x.0], gx);
            }
            Op::MeanAll(x) => {
                let input = self.value(*x);
                let scale = g.scalar_value() / input.data.len() as f64;
                let gx = Tensor {
                    rows: input.rows,
                    cols: input.cols,
                    data: vec![scale; input.data.len()],
                };
                accum(&mut grads[x.0], gx);
            }
            Op::SmoothMax { x, beta, sigma_ref } => {
                let mut gx = smooth_max_weights(self.value(*x), *beta, *sigma_ref);
                let s = g.scalar_value();
                for v in &mut gx.data {
                    *v *= s;
                }
                accum(&mut grads[x.0], gx);
            }
            Op::MseVs { x, target } => {
                let input = self.value(*x);
                let scale = 2.0 * g.scalar_value() / input.rows as f64;
                let mut gx = input.clone();
                for (v, &t) in gx.data.iter_mut().zip(&target.data) {
                    *v = scale * (*v - t);
                }
                accum(&mut grads[x.0], gx);
            }
            Op::AddScalars(a, b) => {
                accum(&mut grads[a.0], g.clone());
                accum(&mut grads[b.0], g.clone());
            }
            Op::RigidPerturbPoints { local, rot, delta } => {
                let rot_t = rot.transpose();
                let mut gd = Tensor::zeros(1, 6);
                for r in 0..local.rows {
                    let gi = Vector3::new(g.get(r, 0), g.get(r, 1), g.get(r, 2));
                    let back = rot_t * gi;
                    let x_local = Vector3::new(local.get(r, 0), local.get(r, 1), local.get(r, 2));
                    let omega_part = x_local.cross(&back);
                    for k in 0..3 {
                        gd.data[k] += back[k];
                        gd.data[3 + k] += omega_part[k];
                    }
                }
                accum(&mut grads[delta.0], gd);
            }
            Op::RotatePerturbVecs { local, rot, delta } => {
                let rot_t = rot.transpose();
                let mut gd = Tensor::zeros(1, 6);
                for r in 0..local.rows {
                    let gi = Vector3::new(g.get(r, 0), g.get(r, 1), g.get(r, 2));
                    let back = rot_t * gi;
                    let v_local = Vector3::new(local.get(r, 0), local.get(r, 1), local.get(r, 2));
                    let omega_part = v_local.cross(&back);
                    for k in 0..3 {
                        gd.data[3 + k] += omega_part[k];
                    }
                }
                accum(&mut grads[delta.0], gd);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central-difference gradient check: `build` must recompute the scalar
    /// from scratch on a fresh tape each call.
    fn gradcheck(
        inputs: &[Tensor],
        build: impl Fn(&mut Tape, &[NodeId]) -> NodeId,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let root = build(&mut tape, &ids);
        assert_eq!(self::shape(&tape, root), (1, 1), "gradcheck wants a scalar root");
        let grads = tape.backward(root);

        let eval = |probe: &[Tensor]| -> f64 {
            let mut t = Tape::new();
            let ids: Vec<NodeId> = probe.iter().map(|x| t.leaf(x.clone())).collect();
            let r = build(&mut t, &ids);
            t.value(r).scalar_value()
        };

        let h = 1e-6;
        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(ids[k])
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(input.rows, input.cols));
            for j in 0..input.data.len() {
                let mut plus = inputs.to_vec();
                plus[k].data[j] += h;
                let mut minus = inputs.to_vec();
                minus[k].data[j] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data[j];
                let denom = a.abs().max(fd.abs()).max(1.0);
                assert!(
                    (a - fd).abs() / denom <= tol,
                    "input {k} entry {j}: analytic {a:.9e} vs fd {fd:.9e}"
                );
            }
        }
    }

    fn shape(tape: &Tape, id: NodeId) -> (usize, usize) {
        (tape.value(id).rows, tape.value(id).cols)
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen::<f64>() - 0.5)
    }

    #[test]
    fn matmul_bias_relu_chain_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = random(4, 3, &mut rng);
        let w = random(3, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        let target = random(4, 5, &mut rng);
        gradcheck(&[x, w, b], |tape, ids| {
            let h = tape.matmul(ids[0], ids[1]);
            let h = tape.add_bias(h, ids[2]);
            let h = tape.relu(h);
            tape.mse_vs(h, target.clone())
        }, 1e-6);
    }

    #[test]
    fn layer_norm_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(5, 8, &mut rng);
        let gamma = random(1, 8, &mut rng);
        let beta = random(1, 8, &mut rng);
        let target = random(5, 8, &mut rng);
        gradcheck(&[x, gamma, beta], |tape, ids| {
            let h = tape.layer_norm(ids[0], ids[1], ids[2]);
            tape.mse_vs(h, target.clone())
        }, 1e-5);
    }

    #[test]
    fn gather_scatter_concat_slice_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(6, 4, &mut rng);
        let y = random(6, 3, &mut rng);
        let idx = Rc::new(vec![0usize, 3, 3, 5, 1, 2, 4, 0]);
        let scatter_idx = Rc::new(vec![2usize, 0, 1, 1, 2, 0, 1, 2]);
        let target = random(3, 7, &mut rng);
        gradcheck(&[x, y], |tape, ids| {
            let joined = tape.concat_cols(&[ids[0], ids[1]]);
            let picked = tape.gather_rows(joined, idx.clone());
            let pooled = tape.scatter_add_rows(picked, scatter_idx.clone(), 3);
            tape.mse_vs(pooled, target.clone())
        }, 1e-6);

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = random(5, 6, &mut rng);
        let t2 = random(2, 3, &mut rng);
        gradcheck(&[z], |tape, ids| {
            let cols = tape.slice_cols(ids[0], 1, 4);
            let rows = tape.slice_rows(cols, 2, 4);
            tape.mse_vs(rows, t2.clone())
        }, 1e-6);
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(7, 3, &mut rng);
        gradcheck(&[x.clone()], |tape, ids| {
            let n = tape.row_norms(ids[0]);
            tape.mean_all(n)
        }, 1e-6);
        gradcheck(&[x.clone()], |tape, ids| {
            tape.smooth_max(ids[0], 10.0, 0.8)
        }, 1e-6);
        let scale: Vec<f64> = (0..3).map(|c| 0.5 + c as f64).collect();
        let shift: Vec<f64> = (0..3).map(|c| 0.1 * c as f64).collect();
        gradcheck(&[x], |tape, ids| {
            let a = tape.affine_cols(ids[0], scale.clone(), shift.clone());
            let m = tape.mean_all(a);
            let m2 = tape.scale(m, 3.0);
            tape.add_scalars(m, m2)
        }, 1e-6);
    }

    #[test]
    fn residual_add_sub_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let a = random(4, 4, &mut rng);
        let b = random(4, 4, &mut rng);
        let target = random(4, 4, &mut rng);
        gradcheck(&[a, b], |tape, ids| {
            let s = tape.add(ids[0], ids[1]);
            let d = tape.sub(s, ids[1]);
            let s2 = tape.add(d, ids[0]); // reuse to exercise accumulation
            tape.mse_vs(s2, target.clone())
        }, 1e-6);
    }

    /// The pose ops are linearized at zero, so the oracle rebuilds the world
    /// quantities with the exact exponential map and differentiates that.
    #[test]
    fn pose_perturbation_gradients_match_exact_rigid_map_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let rot = nalgebra::Rotation3::from_euler_angles(0.4, -0.3, 1.1);
        let translation = Vector3::new(0.02, -0.01, 0.03);
        let local_pts = random(8, 3, &mut rng);
        let local_vecs = random(8, 3, &mut rng);

        // Taped objective: mean row norm of world points
        //                  + mean row norm of rotated vectors.
        let mut tape = Tape::new();
        let delta = tape.leaf(Tensor::zeros(1, 6));
        let world = tape.rigid_perturb_points(
            local_pts.clone(),
            *rot.matrix(),
            translation,
            delta,
        );
        let dirs = tape.rotate_perturb_vecs(local_vecs.clone(), *rot.matrix(), delta);
        let n1 = tape.row_norms(world);
        let n2 = tape.row_norms(dirs);
        let m1 = tape.mean_all(n1);
        let m2 = tape.mean_all(n2);
        let root = tape.add_scalars(m1, m2);
        let grads = tape.backward(root);
        let analytic = grads.get(delta).unwrap().clone();

        // Exact evaluation at a finite local increment.
        let eval = |d: &[f64; 6]| -> f64 {
            let t = Vector3::new(d[0], d[1], d[2]);
            let omega = Vector3::new(d[3], d[4], d[5]);
            let dr = nalgebra::Rotation3::new(omega);
            let mut total = 0.0;
            for r in 0..local_pts.rows {
                let p = Vector3::new(
                    local_pts.get(r, 0),
                    local_pts.get(r, 1),
                    local_pts.get(r, 2),
                );
                total += (rot * (dr * p + t) + translation).norm();
            }
            let mut total_v = 0.0;
            for r in 0..local_vecs.rows {
                let v = Vector3::new(
                    local_vecs.get(r, 0),
                    local_vecs.get(r, 1),
                    local_vecs.get(r, 2),
                );
                total_v += (rot * (dr * v)).norm();
            }
            total / local_pts.rows as f64 + total_v / local_vecs.rows as f64
        };

        let h = 1e-6;
        for j in 0..6 {
            let mut plus = [0.0; 6];
            plus[j] = h;
            let mut minus = [0.0; 6];
            minus[j] = -h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data[j];
            let denom = a.abs().max(fd.abs()).max(1e-3);
            assert!(
                (a - fd).abs() / denom <= 1e-6,
                "delta[{j}]: analytic {a:.9e} vs exact-map fd {fd:.9e}"
            );
        }
    }

    #[test]
    fn constants_block_gradient_flow() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(2.0));
        let c = tape.constant(Tensor::scalar(5.0));
        let y = tape.add_scalars(x, c);
        let grads = tape.backward(y);
        assert!(grads.get(x).is_some());
        assert!(grads.get(c).is_none());
    }
}
