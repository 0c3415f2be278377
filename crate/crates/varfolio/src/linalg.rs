//! Small numeric helpers: guarded Cholesky, spectral quantities,
//! stationary moments, and Gauss-Hermite nodes.
//!
//! Inverses are never formed for solving; every `A^-1 b` term in the crate
//! goes through a factorization held by one of these helpers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative floor for the smallest eigenvalue of a covariance matrix,
/// measured against its largest diagonal entry.
pub const PD_TOL: f64 = 1e-10;

/// Relative symmetry tolerance for covariance input.
pub const SYM_TOL: f64 = 1e-12;

/// Checks symmetry within `SYM_TOL` (relative to the largest absolute
/// entry), then returns the symmetrized matrix. Exact zeros stay zero.
pub fn symmetrize_checked(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::dim(format!("{what} must be square, got {}x{}", m.nrows(), m.ncols())));
    }
    // Tolerance has an absolute floor: products with heavy cancellation leave
    // harmless absolute asymmetry far below SYM_TOL even when entries are tiny.
    let scale = m.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1.0);
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if worst > SYM_TOL * scale {
        return Err(Error::invalid(format!(
            "{what} is not symmetric: max off-diagonal gap {worst:.3e} exceeds {SYM_TOL:.0e} relative"
        )));
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Symmetric positive definite matrix with its Cholesky factor.
///
/// Construction enforces the crate's PD margin: the smallest eigenvalue must
/// exceed `PD_TOL` times the largest diagonal entry, so nearly singular
/// covariances are rejected here rather than poisoning downstream solves.
#[derive(Clone, Debug)]
pub struct SpdMatrix {
    mat: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
    factor: DMatrix<f64>,
    min_eigenvalue: f64,
}

impl SpdMatrix {
    pub fn new(m: DMatrix<f64>, what: &str) -> Result<Self> {
        let mat = symmetrize_checked(&m, what)?;
        if mat.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("{what} contains non-finite entries")));
        }
        let max_diag = mat.diagonal().iter().fold(0.0f64, |a, v| a.max(*v));
        if max_diag <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!("{what} has no positive diagonal entry")));
        }
        let eig = mat.clone().symmetric_eigenvalues();
        let min_eigenvalue = eig.iter().fold(f64::INFINITY, |a, v| a.min(*v));
        if min_eigenvalue <= PD_TOL * max_diag {
            return Err(Error::NotPositiveDefinite(format!(
                "{what}: smallest eigenvalue {min_eigenvalue:.6e} is below the margin {:.6e}",
                PD_TOL * max_diag
            )));
        }
        let chol = Cholesky::new(mat.clone()).ok_or_else(|| {
            Error::NotPositiveDefinite(format!("{what}: Cholesky factorization failed"))
        })?;
        let factor = chol.l();
        Ok(SpdMatrix { mat, chol, factor, min_eigenvalue })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.mat
    }

    pub fn dim(&self) -> usize {
        self.mat.nrows()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.min_eigenvalue
    }

    /// Lower Cholesky factor L with self = L L', cached at construction.
    pub fn factor(&self) -> &DMatrix<f64> {
        &self.factor
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Spectral radius of a square matrix (largest eigenvalue modulus).
pub fn spectral_radius(m: &DMatrix<f64>) -> Result<f64> {
    if !m.is_square() {
        return Err(Error::dim("spectral radius needs a square matrix"));
    }
    let eigs = m.clone().complex_eigenvalues();
    let rho = eigs.iter().fold(0.0f64, |a, z| a.max(z.norm()));
    if !rho.is_finite() {
        return Err(Error::numerical("eigenvalue computation produced non-finite values"));
    }
    Ok(rho)
}

/// Solves (I - A) x = b. Errors when I - A is singular to working precision.
pub fn solve_i_minus(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    let m = DMatrix::identity(n, n) - a;
    m.lu()
        .solve(b)
        .ok_or_else(|| Error::numerical("I - coefficient matrix is singular"))
}

/// Stationary covariance of y_t = A y_{t-1} + e_t, e ~ (0, Q):
/// solves the discrete Lyapunov equation V = A V A' + Q by vectorization.
/// Requires spectral radius of A below one.
pub fn stationary_covariance(a: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.nrows();
    if q.nrows() != n || q.ncols() != n || a.ncols() != n {
        return Err(Error::dim("Lyapunov inputs must be n x n"));
    }
    let kron = a.kronecker(a);
    let nn = n * n;
    let lhs = DMatrix::identity(nn, nn) - kron;
    let rhs = DVector::from_iterator(nn, q.iter().copied());
    let sol = lhs
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::numerical("Lyapunov system singular; is the process stationary?"))?;
    let v = DMatrix::from_iterator(n, n, sol.iter().copied());
    Ok((&v + v.transpose()) * 0.5)
}

/// Gauss-Hermite rule normalized for standard-normal expectations:
/// E[f(Z)] ~ sum_i w_i f(z_i) with Z ~ N(0,1) and sum w_i = 1.
///
/// Nodes come from the Golub-Welsch eigenproblem of the Hermite Jacobi
/// matrix; weights are the squared first eigenvector components. The rule is
/// exact for polynomials up to degree 2n-1 and converges super-geometrically
/// for the exp-of-quadratic integrands used by the oracle.
#[derive(Clone, Debug)]
pub struct GaussHermite {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussHermite {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 || n > 512 {
            return Err(Error::invalid(format!("quadrature node count {n} out of range 1..=512")));
        }
        if n == 1 {
            return Ok(GaussHermite { nodes: vec![0.0], weights: vec![1.0] });
        }
        let mut jac = DMatrix::<f64>::zeros(n, n);
        for i in 1..n {
            let b = (i as f64 / 2.0).sqrt();
            jac[(i - 1, i)] = b;
            jac[(i, i - 1)] = b;
        }
        let se = jac.symmetric_eigen();
        let mut pairs: Vec<(f64, f64)> = (0..n)
            .map(|j| {
                let x = se.eigenvalues[j];
                let v0 = se.eigenvectors[(0, j)];
                // physicists' node x, normalized weight v0^2; scale to N(0,1)
                (x * std::f64::consts::SQRT_2, v0 * v0)
            })
            .collect();
        pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        let wsum: f64 = pairs.iter().map(|p| p.1).sum();
        Ok(GaussHermite {
            nodes: pairs.iter().map(|p| p.0).collect(),
            weights: pairs.iter().map(|p| p.1 / wsum).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest node magnitude, used for reachability boxes.
    pub fn max_node(&self) -> f64 {
        self.nodes.iter().fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Iterator over the tensor product {0..n}^dim as index tuples.
pub struct TensorGrid {
    idx: Vec<usize>,
    n: usize,
    done: bool,
}

impl TensorGrid {
    pub fn new(dim: usize, n: usize) -> Self {
        TensorGrid { idx: vec![0; dim], n, done: dim == 0 || n == 0 }
    }
}

impl Iterator for TensorGrid {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.idx.clone();
        let mut d = 0;
        loop {
            if d == self.idx.len() {
                self.done = true;
                break;
            }
            self.idx[d] += 1;
            if self.idx[d] < self.n {
                break;
            }
            self.idx[d] = 0;
            d += 1;
        }
        Some(out)
    }
}
