//! Gaussian-kernel Gram matrices and the biased empirical HSIC estimator
//! `(n-1)^-2 tr(H K G K)`, with its gradient with respect to the samples
//! that produced `H`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Above this batch size centering uses rank-1 corrections instead of
/// forming the dense centering matrix.
pub const DENSE_CENTERING_MAX: usize = 64;

/// A symmetric Gaussian-kernel Gram matrix over one mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelGram {
    entries: Array2<f64>,
    bandwidth: f64,
}

impl KernelGram {
    pub fn size(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// `K G K` where `K = I - 11ᵀ/n`.
    pub fn centered(&self) -> Array2<f64> {
        center(self.entries.view())
    }
}

/// How the kernel bandwidth is chosen for a batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    /// Median pairwise Euclidean distance of the batch.
    Median,
    Fixed(f64),
}

impl Bandwidth {
    pub fn resolve(&self, batch: ArrayView2<f64>) -> Result<f64> {
        match *self {
            Bandwidth::Median => median_bandwidth(batch),
            Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => Ok(s),
            Bandwidth::Fixed(s) => Err(Error::Parameter(format!("bandwidth must be positive, got {s}"))),
        }
    }
}

fn check_batch(batch: &ArrayView2<f64>) -> Result<()> {
    if batch.nrows() < 2 {
        return Err(Error::Parameter(format!("batch needs at least 2 rows, got {}", batch.nrows())));
    }
    if batch.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("batch contains non-finite values".into()));
    }
    Ok(())
}

fn squared_distances(batch: &ArrayView2<f64>) -> Array2<f64> {
    let n = batch.nrows();
    let mut d2 = Array2::zeros((n, n));
    for i in 0..n {
        let ri = batch.row(i);
        for j in (i + 1)..n {
            let rj = batch.row(j);
            let s: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d2[[i, j]] = s;
            d2[[j, i]] = s;
        }
    }
    d2
}

/// Gram matrix with entries `exp(-|x_i - x_j|² / (2σ²))`.
pub fn gaussian_gram(batch: ArrayView2<f64>, bandwidth: f64) -> Result<KernelGram> {
    check_batch(&batch)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::Parameter(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let scale = -1.0 / (2.0 * bandwidth * bandwidth);
    let mut entries = squared_distances(&batch);
    entries.mapv_inplace(|d| (d * scale).exp());
    Ok(KernelGram { entries, bandwidth })
}

/// Median pairwise Euclidean distance; 1 when every row is identical.
pub fn median_bandwidth(batch: ArrayView2<f64>) -> Result<f64> {
    check_batch(&batch)?;
    let n = batch.nrows();
    let d2 = squared_distances(&batch);
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(d2[[i, j]].sqrt());
        }
    }
    dists.sort_by(|a, b| a.total_cmp(b));
    let k = dists.len();
    let median = if k % 2 == 1 { dists[k / 2] } else { 0.5 * (dists[k / 2 - 1] + dists[k / 2]) };
    if !median.is_finite() {
        return Err(Error::numerical(None, "pairwise distances overflow; activations have diverged"));
    }
    Ok(if median > 0.0 { median } else { 1.0 })
}

/// Double centering `K M K` of a square matrix.
pub fn center(m: ArrayView2<f64>) -> Array2<f64> {
    let n = m.nrows();
    if n <= DENSE_CENTERING_MAX {
        let k = centering_matrix(n);
        return k.dot(&m).dot(&k);
    }
    let row_means: Array1<f64> = m.mean_axis(Axis(1)).expect("non-empty");
    let col_means: Array1<f64> = m.mean_axis(Axis(0)).expect("non-empty");
    let grand = row_means.mean().expect("non-empty");
    let mut out = m.to_owned();
    for ((i, j), v) in out.indexed_iter_mut() {
        *v += grand - row_means[i] - col_means[j];
    }
    out
}

/// Dense `I - 11ᵀ/n`.
pub fn centering_matrix(n: usize) -> Array2<f64> {
    let mut k = Array2::from_elem((n, n), -1.0 / n as f64);
    for i in 0..n {
        k[[i, i]] += 1.0;
    }
    k
}

/// Biased empirical HSIC `(n-1)^-2 tr(H K G K)`.
pub fn hsic(gram_a: &KernelGram, gram_b: &KernelGram) -> Result<f64> {
    let n = gram_a.size();
    if gram_b.size() != n {
        return Err(Error::Parameter(format!("Gram sizes differ: {} vs {}", n, gram_b.size())));
    }
    // centering annihilates a constant Gram exactly; skip the rounding noise
    if is_constant(&gram_a.entries) || is_constant(&gram_b.entries) {
        return Ok(0.0);
    }
    Ok(hsic_centered(gram_a.entries.view(), gram_b.centered().view()))
}

fn is_constant(m: &Array2<f64>) -> bool {
    m.first().is_some_and(|first| m.iter().all(|v| v == first))
}

/// `(n-1)^-2 Σ_ij H_ij (KGK)_ij` for a precomputed centered `KGK`.
pub fn hsic_centered(gram_a: ArrayView2<f64>, gram_b_centered: ArrayView2<f64>) -> f64 {
    let n = gram_a.nrows() as f64;
    let s: f64 = gram_a.iter().zip(gram_b_centered.iter()).map(|(h, g)| h * g).sum();
    s / ((n - 1.0) * (n - 1.0))
}

/// Value and gradient of `hsic(gram(A, σ), G)` with respect to `A`.
///
/// `gram_b_centered` is `K G K`. Since HSIC is linear in `G`, a weighted
/// combination of several centered Grams yields the gradient of the same
/// weighted combination of HSIC values.
pub fn hsic_value_and_grad(
    batch_a: ArrayView2<f64>,
    gram_b_centered: ArrayView2<f64>,
    bandwidth: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = batch_a.nrows();
    if gram_b_centered.dim() != (n, n) {
        return Err(Error::Parameter(format!(
            "centered Gram is {:?}, expected ({n}, {n})",
            gram_b_centered.dim()
        )));
    }
    let gram = gaussian_gram(batch_a, bandwidth)?;
    let value = hsic_centered(gram.entries.view(), gram_b_centered);

    // dH_ij/da_i = H_ij (a_j - a_i) / σ², and both H_ij and H_ji depend on a_i.
    let mut weights = gram.entries;
    weights.zip_mut_with(&gram_b_centered, |h, g| *h *= g);
    let row_sums = weights.sum_axis(Axis(1));
    let mut grad = weights.dot(&batch_a);
    for (mut row, (a, s)) in grad.outer_iter_mut().zip(batch_a.outer_iter().zip(row_sums.iter())) {
        row.scaled_add(-*s, &a);
    }
    let c = 2.0 / ((n as f64 - 1.0).powi(2) * bandwidth * bandwidth);
    grad.mapv_inplace(|v| v * c);
    Ok((value, grad))
}

/// Gradient of `hsic(gram(A, σ), G)` with respect to `A`.
pub fn hsic_grad_wrt_a(
    batch_a: ArrayView2<f64>,
    gram_b_centered: ArrayView2<f64>,
    bandwidth: f64,
) -> Result<Array2<f64>> {
    hsic_value_and_grad(batch_a, gram_b_centered, bandwidth).map(|(_, g)| g)
}

/// One-hot encoding of `labels` over `classes` (label order defines columns).
pub fn one_hot(labels: &[u32], classes: &[u32]) -> Result<Array2<f64>> {
    let mut y = Array2::zeros((labels.len(), classes.len()));
    for (i, l) in labels.iter().enumerate() {
        let c = classes
            .iter()
            .position(|c| c == l)
            .ok_or_else(|| Error::InvalidInput(format!("label {l} is not among the task classes")))?;
        y[[i, c]] = 1.0;
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(n: usize, d: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0))
    }

    fn naive_gram(x: &Array2<f64>, s: f64) -> Array2<f64> {
        let n = x.nrows();
        let mut g = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                let mut d = 0.0;
                for k in 0..x.ncols() {
                    d += (x[[i, k]] - x[[j, k]]).powi(2);
                }
                g[[i, j]] = (-d / (2.0 * s * s)).exp();
            }
        }
        g
    }

    #[test]
    fn overflowing_distances_are_a_numerical_failure() {
        let batch = ndarray::array![[1e200, 0.0], [-1e200, 0.0], [0.0, 1e200]];
        assert!(matches!(median_bandwidth(batch.view()), Err(Error::Numerical { .. })));
    }

    #[test]
    fn identical_rows_give_unit_kernel() {
        let x = array![[0.3, -1.0], [0.3, -1.0]];
        let g = gaussian_gram(x.view(), 0.7).unwrap();
        assert_eq!(g.entries()[[0, 1]], 1.0);
    }

    #[test]
    fn unit_vectors_give_exp_minus_one() {
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        let g = gaussian_gram(x.view(), 1.0).unwrap();
        assert!((g.entries()[[0, 1]] - (-1.0f64).exp()).abs() < 1e-15);
        assert_eq!(g.entries()[[0, 0]], 1.0);
    }

    #[test]
    fn gram_matches_scalar_loop() {
        let x = random(8, 4, 1);
        let g = gaussian_gram(x.view(), 0.9).unwrap();
        let oracle = naive_gram(&x, 0.9);
        for (a, b) in g.entries().iter().zip(oracle.iter()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn gram_rejects_bad_input() {
        let x = array![[1.0, f64::NAN], [0.0, 1.0]];
        assert!(matches!(gaussian_gram(x.view(), 1.0), Err(Error::InvalidInput(_))));
        let x = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(matches!(gaussian_gram(x.view(), 0.0), Err(Error::Parameter(_))));
        assert!(matches!(gaussian_gram(x.view(), -2.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn median_of_two_rows() {
        let x = array![[0.0, 0.0], [2.0, 0.0]];
        assert_eq!(median_bandwidth(x.view()).unwrap(), 2.0);
    }

    #[test]
    fn median_falls_back_to_one() {
        let x = Array2::from_elem((5, 3), 0.25);
        assert_eq!(median_bandwidth(x.view()).unwrap(), 1.0);
    }

    #[test]
    fn median_needs_two_rows() {
        let x = Array2::zeros((1, 3));
        assert!(matches!(median_bandwidth(x.view()), Err(Error::Parameter(_))));
    }

    #[test]
    fn median_matches_enumeration() {
        let x = random(16, 8, 2);
        let mut d = vec![];
        for i in 0..16 {
            for j in 0..i {
                let s: f64 = (0..8).map(|k| (x[[i, k]] - x[[j, k]]).powi(2)).sum();
                d.push(s.sqrt());
            }
        }
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        // 120 pairs: midpoint of the 60th and 61st
        let expected = 0.5 * (d[59] + d[60]);
        assert!((median_bandwidth(x.view()).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_batch_has_zero_hsic() {
        let x = random(8, 3, 3);
        let c = Array2::from_elem((8, 3), 1.5);
        let h = gaussian_gram(x.view(), 1.0).unwrap();
        let g = gaussian_gram(c.view(), 1.0).unwrap();
        assert_eq!(hsic(&h, &g).unwrap().abs(), 0.0);
    }

    #[test]
    fn self_dependence_is_positive() {
        let x = random(8, 3, 4);
        let h = gaussian_gram(x.view(), 1.0).unwrap();
        assert!(hsic(&h, &h).unwrap() > 0.0);
    }

    #[test]
    fn hsic_size_mismatch() {
        let h = gaussian_gram(random(8, 3, 5).view(), 1.0).unwrap();
        let g = gaussian_gram(random(6, 3, 6).view(), 1.0).unwrap();
        assert!(matches!(hsic(&h, &g), Err(Error::Parameter(_))));
    }

    #[test]
    fn rank_one_centering_matches_dense() {
        let x = random(100, 5, 7);
        let g = gaussian_gram(x.view(), 1.3).unwrap();
        let fast = center(g.entries().view());
        let k = centering_matrix(100);
        let dense = k.dot(g.entries()).dot(&k);
        for (a, b) in fast.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn centering_is_idempotent() {
        let k = centering_matrix(6);
        let kk = k.dot(&k);
        for (a, b) in kk.iter().zip(k.iter()) {
            assert!((a - b).abs() < 1e-14);
        }
        let m = random(70, 70, 8);
        let once = center(m.view());
        let twice = center(once.view());
        for (a, b) in once.iter().zip(twice.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_target_gives_zero_gradient() {
        let a = random(8, 3, 9);
        let c = Array2::from_elem((8, 2), -0.5);
        let gc = gaussian_gram(c.view(), 1.0).unwrap().centered();
        let grad = hsic_grad_wrt_a(a.view(), gc.view(), 1.0).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_shape_mismatch() {
        let a = random(8, 3, 10);
        let gc = Array2::zeros((7, 7));
        assert!(matches!(hsic_grad_wrt_a(a.view(), gc.view(), 1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn one_hot_is_task_local() {
        let y = one_hot(&[3, 2, 3], &[2, 3]).unwrap();
        assert_eq!(y, array![[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]]);
        assert!(one_hot(&[7], &[2, 3]).is_err());
    }
}
