//! Symmetric eigendecomposition of small dense matrices and the smallest
//! eigenvalue of the task-weight Gram matrix `K = P^T P / T` with its
//! gradient with respect to `P`.
//!
//! The eigensolver is cyclic Jacobi: rotation sweeps over all off-diagonal
//! pairs until the off-diagonal Frobenius norm drops below `1e-12 * ||A||`.
//! Intended for dimensions up to 256.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("matrix is not symmetric: |a[{i}][{j}] - a[{j}][{i}]| = {diff:e} exceeds tolerance")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("matrix dimension {dim} exceeds supported maximum 256")]
    DimensionTooLarge { dim: usize },
    #[error("matrix contains a non-finite entry")]
    NonFinite,
    #[error("weight stack is empty")]
    EmptyStack,
}

/// Dense symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymmetricMatrix {
    /// Validates symmetry to within `1e-12` relative to the largest entry.
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        assert_eq!(data.len(), dim * dim, "data length must equal dim^2");
        if dim > 256 {
            return Err(LinalgError::DimensionTooLarge { dim });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let scale = data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let diff = (data[i * dim + j] - data[j * dim + i]).abs();
                if diff > 1e-12 * scale {
                    return Err(LinalgError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(SymmetricMatrix { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }
}

/// Eigendecomposition: `values` ascending, `vectors[k]` the unit eigenvector
/// paired with `values[k]`.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic-Jacobi eigendecomposition of a symmetric matrix.
pub fn eigh_small(a: &SymmetricMatrix) -> EigenDecomposition {
    let n = a.dim;
    let mut m = a.data.clone();
    // accumulated rotations, columns are eigenvectors
    let mut q = vec![0.0f64; n * n];
    for i in 0..n {
        q[i * n + i] = 1.0;
    }

    let norm: f64 = a.data.iter().map(|v| v * v).sum::<f64>().sqrt();
    // tighter than the 1e-12 * ||A|| contract: the eigenvalue noise floor
    // sets the accuracy of finite-difference checks downstream, and the
    // final sweeps converge quadratically anyway
    let tol = 1e-15 * norm.max(f64::MIN_POSITIVE);

    let off = |m: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += m[i * n + j] * m[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    let max_sweeps = 100;
    for _ in 0..max_sweeps {
        if off(&m) <= tol {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for r in (p + 1)..n {
                let apq = m[p * n + r];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[r * n + r];
                // rotation annihilating m[p][r]
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    1.0 / (theta - (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + r];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + r] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[r * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[r * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let qkp = q[k * n + p];
                    let qkq = q[k * n + r];
                    q[k * n + p] = c * qkp - s * qkq;
                    q[k * n + r] = s * qkp + c * qkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[i * n + i].partial_cmp(&m[j * n + j]).unwrap());

    let values = order.iter().map(|&i| m[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| (0..n).map(|k| q[k * n + i]).collect())
        .collect();
    EigenDecomposition { values, vectors }
}

/// Stacked task weight vectors, one row per task.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightStack {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        assert_eq!(data.len(), rows * cols, "data length must equal rows*cols");
        if rows == 0 || cols == 0 {
            return Err(LinalgError::EmptyStack);
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(WeightStack { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        if rows.is_empty() {
            return Err(LinalgError::EmptyStack);
        }
        let cols = rows[0].len();
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        WeightStack::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    /// `P^T P / t` as a symmetric matrix.
    pub fn gram(&self, t: usize) -> SymmetricMatrix {
        let d = self.cols;
        let mut k = vec![0.0f64; d * d];
        for r in 0..self.rows {
            let row = &self.data[r * d..(r + 1) * d];
            for i in 0..d {
                let ri = row[i];
                if ri == 0.0 {
                    continue;
                }
                for j in 0..d {
                    k[i * d + j] += ri * row[j];
                }
            }
        }
        let inv_t = 1.0 / t as f64;
        for v in &mut k {
            *v *= inv_t;
        }
        // symmetrize away accumulation round-off
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (k[i * d + j] + k[j * d + i]);
                k[i * d + j] = avg;
                k[j * d + i] = avg;
            }
        }
        SymmetricMatrix::new(d, k).expect("gram matrix is symmetric by construction")
    }
}

/// Smallest eigenvalue of `K = P^T P / t`.
///
/// Exactly zero when `P` has fewer rows than columns (rank deficiency).
/// `K` is positive semidefinite by construction, so solver round-off below
/// zero clamps to zero.
pub fn sigma_min(p: &WeightStack, t: usize) -> f64 {
    if p.rows < p.cols {
        return 0.0;
    }
    let decomp = eigh_small(&p.gram(t));
    decomp.values[0].max(0.0)
}

/// Gradient of `sigma_min` with respect to `P`, plus eigen data.
#[derive(Debug, Clone)]
pub struct SigmaMinGrad {
    /// Same shape as `P`, row-major: `(2/t) * P v v^T`.
    pub grad: Vec<f64>,
    /// Unit eigenvector of the smallest eigenvalue of `K`.
    pub eigvec: Vec<f64>,
    /// Smallest eigenvalue of `K`.
    pub value: f64,
    /// True when the eigengap `lambda_2 - lambda_1` is below `1e-8`; the
    /// returned gradient is then one valid subgradient.
    pub degenerate: bool,
}

/// `d lambda_min(P^T P / t) / dP = (2/t) P v v^T` with `v` the unit
/// eigenvector of the smallest eigenvalue.
pub fn sigma_min_grad(p: &WeightStack, t: usize) -> SigmaMinGrad {
    let decomp = eigh_small(&p.gram(t));
    let v = &decomp.vectors[0];
    let degenerate = if decomp.values.len() > 1 {
        decomp.values[1] - decomp.values[0] <= 1e-8
    } else {
        false
    };

    let d = p.cols;
    let scale = 2.0 / t as f64;
    let mut grad = vec![0.0f64; p.rows * d];
    for r in 0..p.rows {
        let mut pv = 0.0;
        for j in 0..d {
            pv += p.get(r, j) * v[j];
        }
        for j in 0..d {
            grad[r * d + j] = scale * pv * v[j];
        }
    }
    SigmaMinGrad {
        grad,
        eigvec: v.clone(),
        value: decomp.values[0].max(0.0),
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_symmetric(dim: usize, rng: &mut Rng) -> SymmetricMatrix {
        let mut data = vec![0.0f64; dim * dim];
        for i in 0..dim {
            for j in i..dim {
                let v = rng.uniform_in(-2.0, 2.0);
                data[i * dim + j] = v;
                data[j * dim + i] = v;
            }
        }
        SymmetricMatrix::new(dim, data).unwrap()
    }

    fn residual(a: &SymmetricMatrix, lambda: f64, v: &[f64]) -> f64 {
        let n = a.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            let mut av = 0.0;
            for j in 0..n {
                av += a.get(i, j) * v[j];
            }
            worst = worst.max((av - lambda * v[i]).abs());
        }
        worst
    }

    #[test]
    fn identity_eigenvalues_are_ones() {
        let a = SymmetricMatrix::new(2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let d = eigh_small(&a);
        assert!((d.values[0] - 1.0).abs() < 1e-14);
        assert!((d.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn diagonal_matrix_recovers_diagonal() {
        let a = SymmetricMatrix::new(2, vec![2.0, 0.0, 0.0, 5.0]).unwrap();
        let d = eigh_small(&a);
        assert!((d.values[0] - 2.0).abs() < 1e-14);
        assert!((d.values[1] - 5.0).abs() < 1e-14);
        // eigenvectors are the coordinate axes up to sign
        assert!((d.vectors[0][0].abs() - 1.0).abs() < 1e-12);
        assert!(d.vectors[0][1].abs() < 1e-12);
    }

    #[test]
    fn rejects_asymmetric_input() {
        let err = SymmetricMatrix::new(2, vec![1.0, 0.5, 0.1, 1.0]).unwrap_err();
        assert!(matches!(err, LinalgError::NotSymmetric { .. }));
    }

    // Independent oracle: eigenvalues of a 5x5 via roots of the
    // characteristic polynomial, evaluated with bisection on det(A - xI).
    fn det(m: &[f64], n: usize) -> f64 {
        let mut a = m.to_vec();
        let mut sign = 1.0;
        for col in 0..n {
            let mut pivot = col;
            for r in (col + 1)..n {
                if a[r * n + col].abs() > a[pivot * n + col].abs() {
                    pivot = r;
                }
            }
            if a[pivot * n + col] == 0.0 {
                return 0.0;
            }
            if pivot != col {
                for c in 0..n {
                    a.swap(col * n + c, pivot * n + c);
                }
                sign = -sign;
            }
            let inv = 1.0 / a[col * n + col];
            for r in (col + 1)..n {
                let factor = a[r * n + col] * inv;
                for c in col..n {
                    a[r * n + c] -= factor * a[col * n + c];
                }
            }
        }
        let mut d = sign;
        for i in 0..n {
            d *= a[i * n + i];
        }
        d
    }

    fn char_poly_roots(a: &SymmetricMatrix) -> Vec<f64> {
        let n = a.dim();
        let shifted_det = |x: f64| -> f64 {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    m[i * n + j] = a.get(i, j) - if i == j { x } else { 0.0 };
                }
            }
            det(&m, n)
        };
        // Gershgorin bound, then scan for sign changes, then bisect.
        let mut bound = 0.0f64;
        for i in 0..n {
            let mut radius = 0.0;
            for j in 0..n {
                if i != j {
                    radius += a.get(i, j).abs();
                }
            }
            bound = bound.max(a.get(i, i).abs() + radius);
        }
        bound += 1.0;
        let steps = 20_000;
        let mut roots = Vec::new();
        let mut prev_x = -bound;
        let mut prev_f = shifted_det(prev_x);
        for k in 1..=steps {
            let x = -bound + 2.0 * bound * k as f64 / steps as f64;
            let f = shifted_det(x);
            if prev_f == 0.0 {
                roots.push(prev_x);
            } else if prev_f * f < 0.0 {
                let (mut lo, mut hi) = (prev_x, x);
                let (mut flo, _) = (prev_f, f);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let fm = shifted_det(mid);
                    if flo * fm <= 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                        flo = fm;
                    }
                }
                roots.push(0.5 * (lo + hi));
            }
            prev_x = x;
            prev_f = f;
        }
        roots
    }

    #[test]
    fn seeded_5x5_matches_characteristic_polynomial_roots() {
        let mut rng = Rng::new(2024);
        let a = random_symmetric(5, &mut rng);
        let d = eigh_small(&a);
        let roots = char_poly_roots(&a);
        assert_eq!(roots.len(), 5, "oracle found {} roots", roots.len());
        for (lam, root) in d.values.iter().zip(roots.iter()) {
            assert!((lam - root).abs() < 1e-8, "eigh {lam} vs oracle {root}");
        }
    }

    #[test]
    fn residual_and_orthonormality_on_seeded_matrices() {
        let mut rng = Rng::new(11);
        for &dim in &[2usize, 5, 40] {
            // 1000 total across dims would be slow in debug; acceptance
            // suite covers the full count in release.
            for _ in 0..20 {
                let a = random_symmetric(dim, &mut rng);
                let norm: f64 = (0..dim)
                    .flat_map(|i| (0..dim).map(move |j| (i, j)))
                    .map(|(i, j)| a.get(i, j) * a.get(i, j))
                    .sum::<f64>()
                    .sqrt();
                let d = eigh_small(&a);
                for k in 0..dim {
                    assert!(
                        residual(&a, d.values[k], &d.vectors[k]) < 1e-10 * norm.max(1.0),
                        "residual too large at dim {dim}"
                    );
                }
                for i in 0..dim {
                    for j in 0..dim {
                        let dot: f64 =
                            (0..dim).map(|k| d.vectors[i][k] * d.vectors[j][k]).sum();
                        let expect = if i == j { 1.0 } else { 0.0 };
                        assert!((dot - expect).abs() < 1e-10, "orthonormality at dim {dim}");
                    }
                }
            }
        }
    }

    #[test]
    fn sigma_min_identity() {
        let p = WeightStack::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!((sigma_min(&p, 2) - 0.5).abs() < 1e-14);
    }

    #[test]
    fn sigma_min_rank_deficient_is_zero() {
        let p = WeightStack::new(1, 40, vec![1.0; 40]).unwrap();
        assert_eq!(sigma_min(&p, 1), 0.0);
    }

    #[test]
    fn sigma_min_matches_eigh_on_seeded_stack() {
        let mut rng = Rng::new(5);
        let data: Vec<f64> = (0..60 * 40).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let p = WeightStack::new(60, 40, data).unwrap();
        let direct = sigma_min(&p, 60);
        let oracle = eigh_small(&p.gram(60)).values[0];
        assert!((direct - oracle).abs() < 1e-10);
    }

    #[test]
    fn sigma_min_row_permutation_invariant_and_quadratic_scaling() {
        let mut rng = Rng::new(17);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..3).map(|_| rng.uniform_in(-1.0, 1.0)).collect())
            .collect();
        let p = WeightStack::from_rows(&rows).unwrap();
        let mut permuted = rows.clone();
        permuted.swap(0, 4);
        permuted.swap(2, 5);
        let pp = WeightStack::from_rows(&permuted).unwrap();
        assert!((sigma_min(&p, 6) - sigma_min(&pp, 6)).abs() < 1e-12);

        let c = 1.7;
        let scaled: Vec<Vec<f64>> = rows
            .iter()
            .map(|r| r.iter().map(|v| c * v).collect())
            .collect();
        let ps = WeightStack::from_rows(&scaled).unwrap();
        assert!((sigma_min(&ps, 6) - c * c * sigma_min(&p, 6)).abs() < 1e-10);
    }

    fn fd_sigma_min_grad(p: &WeightStack, t: usize, h: f64) -> Vec<f64> {
        let mut grad = vec![0.0; p.rows() * p.cols()];
        for r in 0..p.rows() {
            for c in 0..p.cols() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                plus.data[r * p.cols() + c] += h;
                minus.data[r * p.cols() + c] -= h;
                grad[r * p.cols() + c] =
                    (sigma_min(&plus, t) - sigma_min(&minus, t)) / (2.0 * h);
            }
        }
        grad
    }

    #[test]
    fn sigma_min_grad_diagonal_case_matches_finite_differences() {
        let p = WeightStack::new(2, 2, vec![3.0, 0.0, 0.0, 1.0]).unwrap();
        let res = sigma_min_grad(&p, 2);
        assert!(!res.degenerate);
        let fd = fd_sigma_min_grad(&p, 2, 1e-6);
        for (a, b) in res.grad.iter().zip(fd.iter()) {
            assert!((a - b).abs() < 1e-6, "analytic {a} vs fd {b}");
        }
        // gradient concentrates on the smaller-eigenvalue direction
        assert!(res.grad[0].abs() < 1e-9);
        assert!(res.grad[3].abs() > 0.5);
    }

    #[test]
    fn sigma_min_grad_zero_stack_is_zero() {
        let p = WeightStack::new(3, 2, vec![0.0; 6]).unwrap();
        let res = sigma_min_grad(&p, 3);
        assert!(res.grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn sigma_min_grad_seeded_60x40_matches_finite_differences() {
        let mut rng = Rng::new(31);
        let data: Vec<f64> = (0..60 * 40).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let p = WeightStack::new(60, 40, data).unwrap();
        let decomp = eigh_small(&p.gram(60));
        assert!(decomp.values[1] - decomp.values[0] > 1e-3, "eigengap too small");
        let res = sigma_min_grad(&p, 60);
        // step 1e-4: at smaller steps the eigensolver's convergence
        // tolerance dominates the subtractive cancellation
        let fd = fd_sigma_min_grad(&p, 60, 1e-4);
        for (a, b) in res.grad.iter().zip(fd.iter()) {
            let denom = a.abs().max(b.abs()).max(1e-12);
            assert!((a - b).abs() / denom < 1e-5, "analytic {a} vs fd {b}");
        }
    }
}
