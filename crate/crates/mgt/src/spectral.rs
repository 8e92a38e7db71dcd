//! Symmetric eigendecomposition and spectral positional encodings: heat-kernel
//! graph wavelets, random-walk encoding, and Laplacian eigenvector encoding.

use thiserror::Error;

use crate::graph::Graph;
use crate::mat::Mat;

/// Off-diagonal threshold for the Jacobi sweep.
const JACOBI_THRESHOLD: f64 = 1e-12;
/// Sweep cap; hitting it on a valid symmetric input signals a bug.
const JACOBI_MAX_SWEEPS: usize = 100;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("input matrix is not symmetric (max |M - M^T| = {0:e})")]
    NotSymmetric(f64),
    #[error("jacobi iteration did not converge within {0} sweeps")]
    NoConvergence(usize),
    #[error("wavelet scale must be non-negative, got {0}")]
    NegativeScale(f64),
    #[error("scale list must be non-empty")]
    EmptyScales,
    #[error("eigenvector count {m} out of range for n = {n} (require 1 <= m <= n-1)")]
    EigenvectorCountOutOfRange { m: usize, n: usize },
}

/// Eigensystem of a symmetric matrix: ascending eigenvalues, orthonormal
/// eigenvector columns (column `j` pairs with `eigenvalues[j]`).
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Mat,
}

impl EigenDecomposition {
    pub fn n(&self) -> usize {
        self.eigenvalues.len()
    }

    /// `U diag(f(lambda)) U^T`, computed entrywise so the result is
    /// bit-symmetric.
    pub fn apply_spectral_filter(&self, f: impl Fn(f64) -> f64) -> Mat {
        let n = self.n();
        let filtered: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let u = &self.eigenvectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = 0.0;
                for k in 0..n {
                    acc += filtered[k] * u.get(i, k) * u.get(j, k);
                }
                out.set(i, j, acc);
                out.set(j, i, acc);
            }
        }
        out
    }
}

/// Cyclic Jacobi rotations on a dense symmetric matrix. Deterministic: the
/// sweep order is fixed, so a fixed input always yields the same output.
pub fn eigendecompose(m: &Mat) -> Result<EigenDecomposition, SpectralError> {
    let n = m.rows();
    assert_eq!(n, m.cols(), "eigendecompose requires a square matrix");
    let mut max_asym: f64 = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            max_asym = max_asym.max((m.get(i, j) - m.get(j, i)).abs());
        }
    }
    if max_asym >= 1e-12 {
        return Err(SpectralError::NotSymmetric(max_asym));
    }

    let mut a = m.clone();
    let mut v = Mat::identity(n);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off: f64 = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= JACOBI_THRESHOLD {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= JACOBI_THRESHOLD {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                // Accumulate the rotation into the eigenvector columns.
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged && n > 1 {
        return Err(SpectralError::NoConvergence(JACOBI_MAX_SWEEPS));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut eigenvectors = Mat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        for k in 0..n {
            eigenvectors.set(k, dst, v.get(k, src));
        }
    }
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Stack of heat-kernel diffusion matrices `psi_s` with their scales.
#[derive(Debug, Clone)]
pub struct WaveletTensor {
    pub scales: Vec<f64>,
    pub matrices: Vec<Mat>,
}

impl WaveletTensor {
    pub fn n(&self) -> usize {
        self.matrices.first().map_or(0, Mat::rows)
    }

    pub fn k(&self) -> usize {
        self.matrices.len()
    }
}

/// Heat-kernel wavelet `psi_s = U diag(e^{-s lambda}) U^T`.
pub fn wavelet_matrix(eig: &EigenDecomposition, s: f64) -> Result<Mat, SpectralError> {
    if s < 0.0 {
        return Err(SpectralError::NegativeScale(s));
    }
    Ok(eig.apply_spectral_filter(|l| (-s * l).exp()))
}

/// All requested scales from a single eigendecomposition of the normalized
/// Laplacian.
pub fn wavelet_tensor(g: &Graph, scales: &[f64]) -> Result<WaveletTensor, SpectralError> {
    if scales.is_empty() {
        return Err(SpectralError::EmptyScales);
    }
    let eig = eigendecompose(&g.normalized_laplacian())?;
    let matrices = scales
        .iter()
        .map(|&s| wavelet_matrix(&eig, s))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(WaveletTensor {
        scales: scales.to_vec(),
        matrices,
    })
}

/// Random-walk encoding: column `t-1` holds the diagonal of `(D^{-1} A)^t`.
/// Rows of isolated nodes are all zeros. Powers are accumulated by repeated
/// right-multiplication, `M_t = M_{t-1} P`.
pub fn rwpe(g: &Graph, steps: usize) -> Mat {
    assert!(steps >= 1, "rwpe requires at least one step");
    let n = g.n();
    let mut transition = Mat::zeros(n, n);
    for i in 0..n {
        let d = g.degree(i);
        if d > 0.0 {
            for j in 0..n {
                if g.adjacency().get(i, j) != 0.0 {
                    transition.set(i, j, 1.0 / d);
                }
            }
        }
    }
    let mut out = Mat::zeros(n, steps);
    let mut power = transition.clone();
    for t in 0..steps {
        if t > 0 {
            power = power.matmul(&transition);
        }
        for i in 0..n {
            out.set(i, t, power.get(i, i));
        }
    }
    out
}

/// Laplacian eigenvector encoding: the eigenvectors at ascending indices
/// `1..=m`, each sign-normalized so its largest-magnitude entry is positive
/// (ties broken by lowest index). The sign rule is a deterministic
/// convention and is not permutation-stable.
pub fn lappe(g: &Graph, m: usize) -> Result<Mat, SpectralError> {
    let n = g.n();
    if m < 1 || m > n.saturating_sub(1) {
        return Err(SpectralError::EigenvectorCountOutOfRange { m, n });
    }
    let eig = eigendecompose(&g.normalized_laplacian())?;
    let mut out = Mat::zeros(n, m);
    for col in 0..m {
        let src = col + 1;
        let mut best_idx = 0;
        let mut best_abs = -1.0;
        for i in 0..n {
            let a = eig.eigenvectors.get(i, src).abs();
            if a > best_abs {
                best_abs = a;
                best_idx = i;
            }
        }
        let flip = if eig.eigenvectors.get(best_idx, src) < 0.0 {
            -1.0
        } else {
            1.0
        };
        for i in 0..n {
            out.set(i, col, flip * eig.eigenvectors.get(i, src));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Edge, GraphDocument};

    fn graph_from_edges(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::from_document(GraphDocument {
            nodes: vec![vec![0.0]; n],
            edges: edges
                .iter()
                .map(|&(src, dst)| Edge {
                    src,
                    dst,
                    feat: vec![1.0],
                })
                .collect(),
            target: None,
            positional: None,
        })
        .unwrap()
    }

    fn two_path() -> Graph {
        graph_from_edges(2, &[(0, 1)])
    }

    fn triangle() -> Graph {
        graph_from_edges(3, &[(0, 1), (1, 2), (0, 2)])
    }

    fn check_eigen_invariants(m: &Mat, eig: &EigenDecomposition) {
        let n = eig.n();
        let u = &eig.eigenvectors;
        // Orthonormality.
        let gram = u.transpose().matmul(u);
        assert!(gram.max_abs_diff(&Mat::identity(n)) < 1e-10);
        // Reconstruction.
        let recon = eig.apply_spectral_filter(|l| l);
        assert!(recon.max_abs_diff(m) < 1e-10);
        // Ascending order.
        for w in eig.eigenvalues.windows(2) {
            assert!(w[0] <= w[1]);
        }
    }

    #[test]
    fn eigendecompose_identity() {
        let m = Mat::identity(3);
        let eig = eigendecompose(&m).unwrap();
        for &l in &eig.eigenvalues {
            assert!((l - 1.0).abs() < 1e-12);
        }
        check_eigen_invariants(&m, &eig);
    }

    #[test]
    fn eigendecompose_two_path_laplacian() {
        let m = two_path().normalized_laplacian();
        let eig = eigendecompose(&m).unwrap();
        assert!((eig.eigenvalues[0] - 0.0).abs() < 1e-12);
        assert!((eig.eigenvalues[1] - 2.0).abs() < 1e-12);
        let r = 0.5f64.sqrt();
        // Columns match [1,1]/sqrt(2) and [1,-1]/sqrt(2) up to sign.
        let u = &eig.eigenvectors;
        let dot0 = (u.get(0, 0) * r + u.get(1, 0) * r).abs();
        let dot1 = (u.get(0, 1) * r - u.get(1, 1) * r).abs();
        assert!((dot0 - 1.0).abs() < 1e-12);
        assert!((dot1 - 1.0).abs() < 1e-12);
        check_eigen_invariants(&m, &eig);
    }

    #[test]
    fn eigendecompose_diagonal_sorts() {
        let m = Mat::from_rows(&[
            vec![3.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 2.0],
        ]);
        let eig = eigendecompose(&m).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 2.0, 3.0]);
        // Eigenvectors are signed standard basis vectors.
        for col in 0..3 {
            let mut ones = 0;
            for row in 0..3 {
                let v = eig.eigenvectors.get(row, col).abs();
                if (v - 1.0).abs() < 1e-12 {
                    ones += 1;
                } else {
                    assert!(v < 1e-12);
                }
            }
            assert_eq!(ones, 1);
        }
        check_eigen_invariants(&m, &eig);
    }

    #[test]
    fn eigendecompose_rejects_asymmetric() {
        let m = Mat::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        assert!(matches!(
            eigendecompose(&m),
            Err(SpectralError::NotSymmetric(_))
        ));
    }

    #[test]
    fn wavelet_scale_zero_is_identity() {
        let eig = eigendecompose(&triangle().normalized_laplacian()).unwrap();
        let psi = wavelet_matrix(&eig, 0.0).unwrap();
        assert!(psi.max_abs_diff(&Mat::identity(3)) < 1e-10);
    }

    #[test]
    fn wavelet_two_path_analytic() {
        let eig = eigendecompose(&two_path().normalized_laplacian()).unwrap();
        let psi = wavelet_matrix(&eig, 1.0).unwrap();
        // 0.5*(1 + e^-2) and 0.5*(1 - e^-2)
        let expect = Mat::from_rows(&[
            vec![0.567668, 0.432332],
            vec![0.432332, 0.567668],
        ]);
        assert!(psi.max_abs_diff(&expect) < 1e-6);
    }

    #[test]
    fn wavelet_triangle_analytic() {
        let eig = eigendecompose(&triangle().normalized_laplacian()).unwrap();
        let psi = wavelet_matrix(&eig, 1.0).unwrap();
        // 1/3 + (2/3) e^-1.5 on the diagonal, (1 - e^-1.5)/3 off it.
        for i in 0..3 {
            for j in 0..3 {
                let expect = if i == j { 0.482087 } else { 0.258957 };
                assert!((psi.get(i, j) - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn wavelet_rejects_negative_scale() {
        let eig = eigendecompose(&two_path().normalized_laplacian()).unwrap();
        assert!(matches!(
            wavelet_matrix(&eig, -0.5),
            Err(SpectralError::NegativeScale(_))
        ));
    }

    #[test]
    fn wavelet_tensor_scale_zero_identity() {
        let t = wavelet_tensor(&triangle(), &[0.0]).unwrap();
        assert_eq!(t.k(), 1);
        assert!(t.matrices[0].max_abs_diff(&Mat::identity(3)) < 1e-10);
    }

    #[test]
    fn wavelet_tensor_two_path_two_scales() {
        let t = wavelet_tensor(&two_path(), &[1.0, 2.0]).unwrap();
        let expect_s2 = Mat::from_rows(&[
            vec![0.509158, 0.490842],
            vec![0.490842, 0.509158],
        ]);
        assert!(t.matrices[1].max_abs_diff(&expect_s2) < 1e-6);
    }

    #[test]
    fn wavelet_tensor_default_scales() {
        let t = wavelet_tensor(&triangle(), &[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(t.k(), 5);
    }

    #[test]
    fn wavelet_tensor_rejects_empty_scales() {
        assert!(matches!(
            wavelet_tensor(&triangle(), &[]),
            Err(SpectralError::EmptyScales)
        ));
    }

    #[test]
    fn rwpe_two_path() {
        let pe = rwpe(&two_path(), 3);
        for i in 0..2 {
            assert_eq!(pe.row(i), &[0.0, 1.0, 0.0]);
        }
    }

    #[test]
    fn rwpe_triangle() {
        let pe = rwpe(&triangle(), 2);
        for i in 0..3 {
            assert_eq!(pe.row(i), &[0.0, 0.5]);
        }
    }

    #[test]
    fn rwpe_isolated_node() {
        let g = graph_from_edges(1, &[]);
        assert_eq!(rwpe(&g, 2).row(0), &[0.0, 0.0]);
    }

    #[test]
    fn lappe_two_path_sign_rule() {
        let pe = lappe(&two_path(), 1).unwrap();
        let r = 0.5f64.sqrt();
        assert!((pe.get(0, 0) - r).abs() < 1e-10);
        assert!((pe.get(1, 0) + r).abs() < 1e-10);
    }

    #[test]
    fn lappe_four_cycle_subspace_membership() {
        // Degenerate eigenspace at lambda = 1: pin only L v = v.
        let g = graph_from_edges(4, &[(0, 1), (1, 2), (2, 3), (3, 0)]);
        let lap = g.normalized_laplacian();
        let pe = lappe(&g, 1).unwrap();
        let v: Vec<f64> = (0..4).map(|i| pe.get(i, 0)).collect();
        let lv = lap.matvec(&v);
        let resid: f64 = lv
            .iter()
            .zip(&v)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(resid < 1e-8);
    }

    #[test]
    fn lappe_rejects_out_of_range() {
        assert!(matches!(
            lappe(&two_path(), 2),
            Err(SpectralError::EigenvectorCountOutOfRange { m: 2, n: 2 })
        ));
    }
}
