//! Seeded random streams and the dense linear-algebra kernels everything
//! else is built on.
//!
//! All math runs in `f64`. Random draws come from named streams: a stream is
//! a ChaCha20 generator keyed by SHA-256 of `(root_seed, label)`, so two
//! streams with different labels never share draws and a given label always
//! reproduces the same sequence regardless of which thread consumes it.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;
pub type Vector = DVector<f64>;

/// A named, reproducible random stream.
#[derive(Clone, Debug)]
pub struct RngStream {
    root_seed: u64,
    label: String,
    rng: ChaCha20Rng,
}

impl RngStream {
    pub fn new(root_seed: u64, label: impl Into<String>) -> Self {
        let label = label.into();
        let mut hasher = Sha256::new();
        hasher.update(root_seed.to_le_bytes());
        hasher.update(label.as_bytes());
        let seed: [u8; 32] = hasher.finalize().into();
        Self {
            root_seed,
            label,
            rng: ChaCha20Rng::from_seed(seed),
        }
    }

    /// A fresh stream under `label/suffix`. Independent of how many draws
    /// have already been taken from `self`.
    pub fn child(&self, suffix: impl std::fmt::Display) -> Self {
        Self::new(self.root_seed, format!("{}/{}", self.label, suffix))
    }

    pub fn root_seed(&self) -> u64 {
        self.root_seed
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn gaussian(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform on `[-1, 1)`.
    pub fn uniform_symmetric(&mut self) -> f64 {
        self.rng.gen_range(-1.0..1.0)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        self.rng.gen_range(low..high)
    }

    pub fn index(&mut self, upper: usize) -> usize {
        self.rng.gen_range(0..upper)
    }
}

/// `rows x cols` matrix of i.i.d. standard normal draws, filled row by row.
pub fn sample_standard_gaussian(rng: &mut RngStream, rows: usize, cols: usize) -> Matrix {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Matrix::from_row_slice(rows, cols, &data)
}

/// Eigen-decomposition of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: Vector,
    /// Eigenvectors as columns, in the same order as `values`.
    pub vectors: Matrix,
}

const SYMMETRY_TOL: f64 = 1e-10;
const SIGN_TOL: f64 = 1e-12;
const EIG_RESIDUAL_TOL: f64 = 1e-9;

pub fn check_symmetric(a: &Matrix, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Precondition(format!(
            "{what}: expected a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let asym = (a - a.transpose()).norm();
    if asym > SYMMETRY_TOL * a.norm().max(f64::MIN_POSITIVE) {
        return Err(Error::Precondition(format!(
            "{what}: matrix is not symmetric (||A - A^T||_F = {asym:.3e})"
        )));
    }
    Ok(())
}

/// Symmetric eigen-decomposition with eigenvalues sorted descending.
///
/// Ties keep the order the underlying solver produced them in. Each
/// eigenvector is flipped so that its first entry with magnitude above
/// `1e-12` is positive.
pub fn sym_eig_desc(a: &Matrix) -> Result<SymEig> {
    check_symmetric(a, "sym_eig_desc")?;
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    let n = eig.eigenvalues.len();
    let residual = (&sym * &eig.eigenvectors - &eig.eigenvectors * Matrix::from_diagonal(&eig.eigenvalues)).norm();
    if !(residual <= EIG_RESIDUAL_TOL * sym.norm()) {
        return Err(Error::Numerical(format!(
            "sym_eig_desc: eigen-decomposition residual {residual:.3e} for a matrix of norm {:.3e}",
            sym.norm()
        )));
    }

    let mut order: Vec<usize> = (0..n).collect();
    // stable sort keeps the original index order on exact ties
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));

    let values = Vector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = eig.eigenvectors.column(src).into_owned();
        if let Some(lead) = col.iter().copied().find(|v| v.abs() > SIGN_TOL) {
            if lead < 0.0 {
                col.neg_mut();
            }
        }
        vectors.set_column(dst, &col);
    }
    Ok(SymEig { values, vectors })
}

/// Lower Cholesky factor `L` with `L L^T = a`.
pub fn cholesky_lower(a: &Matrix) -> Result<Matrix> {
    Ok(cholesky(a, "cholesky_lower")?.unpack())
}

pub(crate) fn cholesky(a: &Matrix, what: &str) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    if !a.is_square() {
        return Err(Error::Precondition(format!("{what}: matrix is not square")));
    }
    Cholesky::new(a.clone()).ok_or_else(|| Error::SingularMatrix(what.to_string()))
}

/// Solves `a x = b` for symmetric positive-definite `a` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.nrows() != b.nrows() {
        return Err(Error::Precondition(format!(
            "solve_spd: {}x{} system with {} right-hand rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let chol = cholesky(a, "solve_spd")?;
    Ok(chol.solve(b))
}

pub fn all_finite(a: &Matrix) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Population mean and standard deviation (divides by the count).
pub fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Mean and standard error of the mean (sample variance, n - 1).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}
