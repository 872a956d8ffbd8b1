//! Dense row-major f64 matrices and the numeric kernels shared by the
//! network's taped and tape-free forward paths.
//!
//! Keeping the kernels as free functions means the autodiff tape and the
//! inference path execute literally the same code, so their outputs are
//! bit-identical and the fast path needs no separate numeric validation.

use serde::{Deserialize, Serialize};

/// Epsilon inside layer-norm's variance square root.
pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Tensor {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Tensor {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for row in &rows {
            assert_eq!(row.len(), n_cols, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { rows: n_rows, cols: n_cols, data }
    }

    /// 1 x n row vector.
    pub fn row_vector(values: Vec<f64>) -> Tensor {
        Tensor { rows: 1, cols: values.len(), data: values }
    }

    /// 1 x 1 scalar.
    pub fn scalar(v: f64) -> Tensor {
        Tensor { rows: 1, cols: 1, data: vec![v] }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert_eq!((self.rows, self.cols), (1, 1));
        self.data[0]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Elementwise `self += s * other`.
    pub fn add_scaled_assign(&mut self, other: &Tensor, s: f64) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

/// `a (m x k) * b (k x n)`, accumulating over `k` in the middle loop so the
/// inner loop streams rows of `b` (autovectorizes well).
pub fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (o, &bkj) in out_row.iter_mut().zip(b_row) {
                *o += aik * bkj;
            }
        }
    }
    out
}

/// `a (m x k) * b^T (n x k) -> m x n`: row-by-row dot products.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt shape mismatch");
    let mut out = Tensor::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let out_row = out.row_mut(i);
        for j in 0..b.rows {
            let b_row = b.row(j);
            out_row[j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `a^T (k x m) * b (k x n) -> m x n`: accumulate outer products row-wise.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn shape mismatch");
    let mut out = Tensor::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let a_row = a.row(r);
        let b_row = b.row(r);
        for (i, &ari) in a_row.iter().enumerate() {
            let out_row = out.row_mut(i);
            for (o, &brj) in out_row.iter_mut().zip(b_row) {
                *o += ari * brj;
            }
        }
    }
    out
}

/// Adds a 1 x n bias row to every row.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Tensor {
    assert_eq!(bias.rows, 1);
    assert_eq!(x.cols, bias.cols);
    let mut out = x.clone();
    for r in 0..out.rows {
        for (o, &b) in out.row_mut(r).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    out
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for v in &mut out.data {
        *v = v.max(0.0);
    }
    out
}

/// Row-wise layer normalization with trainable per-column gain and shift.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    assert_eq!(gamma.cols, x.cols);
    assert_eq!(beta.cols, x.cols);
    let mut out = Tensor::zeros(x.rows, x.cols);
    let k = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / k;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
        let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        let out_row = out.row_mut(r);
        for c in 0..x.cols {
            out_row[c] = gamma.data[c] * (row[c] - mean) * inv_std + beta.data[c];
        }
    }
    out
}

/// Per-row statistics needed by layer-norm's backward pass.
pub fn layer_norm_row_stats(row: &[f64]) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + LAYER_NORM_EPS).sqrt())
}

/// Picks rows by index: `out[i] = x[idx[i]]`.
pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(idx.len(), x.cols);
    for (i, &src) in idx.iter().enumerate() {
        out.row_mut(i).copy_from_slice(x.row(src));
    }
    out
}

/// Sums rows into slots: `out[idx[i]] += x[i]`, iterating `i` in ascending
/// order so the accumulation order is fixed.
pub fn scatter_add_rows(x: &Tensor, idx: &[usize], out_rows: usize) -> Tensor {
    let mut out = Tensor::zeros(out_rows, x.cols);
    for (i, &dst) in idx.iter().enumerate() {
        let src = x.row(i);
        let out_row = out.row_mut(dst);
        for (o, &v) in out_row.iter_mut().zip(src) {
            *o += v;
        }
    }
    out
}

/// Horizontal concatenation.
pub fn concat_cols(parts: &[&Tensor]) -> Tensor {
    let rows = parts[0].rows;
    assert!(parts.iter().all(|p| p.rows == rows));
    let cols = parts.iter().map(|p| p.cols).sum();
    let mut out = Tensor::zeros(rows, cols);
    for r in 0..rows {
        let out_row = out.row_mut(r);
        let mut offset = 0;
        for p in parts {
            out_row[offset..offset + p.cols].copy_from_slice(p.row(r));
            offset += p.cols;
        }
    }
    out
}

/// Vertical concatenation.
pub fn concat_rows(top: &Tensor, bottom: &Tensor) -> Tensor {
    assert_eq!(top.cols, bottom.cols);
    let mut out = Tensor::zeros(top.rows + bottom.rows, top.cols);
    out.data[..top.data.len()].copy_from_slice(&top.data);
    out.data[top.data.len()..].copy_from_slice(&bottom.data);
    out
}

pub fn slice_cols(x: &Tensor, start: usize, end: usize) -> Tensor {
    assert!(start <= end && end <= x.cols);
    let mut out = Tensor::zeros(x.rows, end - start);
    for r in 0..x.rows {
        out.row_mut(r).copy_from_slice(&x.row(r)[start..end]);
    }
    out
}

pub fn slice_rows(x: &Tensor, start: usize, end: usize) -> Tensor {
    assert!(start <= end && end <= x.rows);
    Tensor {
        rows: end - start,
        cols: x.cols,
        data: x.data[start * x.cols..end * x.cols].to_vec(),
    }
}

/// Per-column affine map `out[:, c] = scale[c] * x[:, c] + shift[c]`
/// (feature normalization against constant statistics).
pub fn affine_cols(x: &Tensor, scale: &[f64], shift: &[f64]) -> Tensor {
    assert_eq!(scale.len(), x.cols);
    assert_eq!(shift.len(), x.cols);
    let mut out = Tensor::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let out_row = out.row_mut(r);
        for c in 0..x.cols {
            out_row[c] = scale[c] * row[c] + shift[c];
        }
    }
    out
}

/// Euclidean norm of each row as an n x 1 column.
pub fn row_norms(x: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, 1);
    for r in 0..x.rows {
        out.data[r] = x.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
    }
    out
}

/// Mean over all entries as a 1 x 1 scalar.
pub fn mean_all(x: &Tensor) -> Tensor {
    Tensor::scalar(x.data.iter().sum::<f64>() / x.data.len() as f64)
}

/// Stable scaled log-sum-exp of all entries:
/// `(sigma_ref / beta) * ln(sum_i exp(beta * x_i / sigma_ref))`, a smooth
/// upper envelope of the maximum. The max is subtracted before
/// exponentiation.
pub fn smooth_max(x: &Tensor, beta: f64, sigma_ref: f64) -> Tensor {
    let scale = beta / sigma_ref;
    let max = x.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let sum: f64 = x.data.iter().map(|&v| ((v - max) * scale).exp()).sum();
    Tensor::scalar(max + sum.ln() / scale)
}

/// Softmax weights matching [`smooth_max`]'s gradient.
pub fn smooth_max_weights(x: &Tensor, beta: f64, sigma_ref: f64) -> Tensor {
    let scale = beta / sigma_ref;
    let max = x.data.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let mut out = x.clone();
    let mut sum = 0.0;
    for v in &mut out.data {
        *v = ((*v - max) * scale).exp();
        sum += *v;
    }
    for v in &mut out.data {
        *v /= sum;
    }
    out
}

/// `sum((x - target)^2) / rows` — mean over rows of the squared row error.
pub fn mse_vs(x: &Tensor, target: &Tensor) -> Tensor {
    assert!(x.same_shape(target));
    let sum: f64 = x
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Tensor::scalar(sum / x.rows as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_fn(rows, cols, |_, _| rng.gen::<f64>() - 0.5)
    }

    /// Naive triple-loop oracle for all three matmul layouts.
    fn matmul_oracle(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows, b.cols);
        for i in 0..a.rows {
            for j in 0..b.cols {
                let mut acc = 0.0;
                for k in 0..a.cols {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn transpose(x: &Tensor) -> Tensor {
        Tensor::from_fn(x.cols, x.rows, |r, c| x.get(c, r))
    }

    #[test]
    fn matmul_variants_match_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let (m, k, n) = (
                rng.gen_range(1..8usize),
                rng.gen_range(1..8usize),
                rng.gen_range(1..8usize),
            );
            let a = random_tensor(m, k, &mut rng);
            let b = random_tensor(k, n, &mut rng);
            let expected = matmul_oracle(&a, &b);
            for (got, name) in [
                (matmul(&a, &b), "nn"),
                (matmul_nt(&a, &transpose(&b)), "nt"),
                (matmul_tn(&transpose(&a), &b), "tn"),
            ] {
                assert!(got.same_shape(&expected));
                for (x, y) in got.data.iter().zip(&expected.data) {
                    assert_relative_eq!(x, y, max_relative = 1e-12, epsilon = 1e-14);
                }
                let _ = name;
            }
        }
    }

    #[test]
    fn layer_norm_rows_have_unit_statistics_under_identity_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(6, 32, &mut rng);
        let gamma = Tensor::row_vector(vec![1.0; 32]);
        let beta = Tensor::row_vector(vec![0.0; 32]);
        let y = layer_norm(&x, &gamma, &beta);
        for r in 0..y.rows {
            let row = y.row(r);
            let mean = row.iter().sum::<f64>() / 32.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-12);
            assert_relative_eq!(var, 1.0, epsilon = 1e-4); // eps shifts variance slightly
        }
    }

    #[test]
    fn scatter_add_is_adjoint_of_gather() {
        // <scatter(x), y> must equal <x, gather(y)> for all x, y: the two
        // kernels are transposes of each other, which is exactly what the
        // backward pass relies on.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let idx: Vec<usize> = (0..40).map(|_| rng.gen_range(0..12usize)).collect();
        let x = random_tensor(40, 7, &mut rng);
        let y = random_tensor(12, 7, &mut rng);
        let scattered = scatter_add_rows(&x, &idx, 12);
        let gathered = gather_rows(&y, &idx);
        let lhs: f64 = scattered.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gathered.data).map(|(a, b)| a * b).sum();
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);
    }

    #[test]
    fn smooth_max_bounds_and_approaches_the_maximum() {
        let x = Tensor::row_vector(vec![1.0, 4.0, 2.5, 3.9]);
        // Upper envelope of max; tightens as beta grows.
        let loose = smooth_max(&x, 2.0, 1.0).scalar_value();
        let tight = smooth_max(&x, 50.0, 1.0).scalar_value();
        assert!(loose >= 4.0 && tight >= 4.0);
        assert!(tight - 4.0 < loose - 4.0);
        assert!(tight - 4.0 < 0.05);
        // Weights form a convex combination.
        let w = smooth_max_weights(&x, 10.0, 1.0);
        assert_relative_eq!(w.data.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(w.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn smooth_max_is_stable_for_huge_inputs() {
        let x = Tensor::row_vector(vec![1e6, 9.9e5, 1.01e6]);
        let v = smooth_max(&x, 10.0, 1e5).scalar_value();
        assert!(v.is_finite() && v >= 1.01e6);
    }

    #[test]
    fn concat_and_slice_are_inverses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_tensor(4, 3, &mut rng);
        let b = random_tensor(4, 5, &mut rng);
        let joined = concat_cols(&[&a, &b]);
        assert_eq!(slice_cols(&joined, 0, 3), a);
        assert_eq!(slice_cols(&joined, 3, 8), b);

        let top = random_tensor(2, 6, &mut rng);
        let bottom = random_tensor(3, 6, &mut rng);
        let stacked = concat_rows(&top, &bottom);
        assert_eq!(slice_rows(&stacked, 0, 2), top);
        assert_eq!(slice_rows(&stacked, 2, 5), bottom);
    }
}
