//! Linear-solver backends for the Newton corrections: dense LU with partial
//! pivoting for small systems, sparse LU above a size threshold. One entry
//! point, deterministic pivoting in both backends.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Unknown-count threshold above which the sparse backend is selected
/// automatically.
pub const SPARSE_THRESHOLD: usize = 2000;

/// Linear-solver backend selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearBackend {
    /// Dense below [`SPARSE_THRESHOLD`] unknowns, sparse above.
    #[default]
    Auto,
    /// Dense LU (partial pivoting).
    Dense,
    /// Sparse LU.
    Sparse,
}

impl LinearBackend {
    /// Resolves `Auto` against a system dimension.
    #[must_use]
    pub fn resolve(self, dim: usize) -> LinearBackend {
        match self {
            LinearBackend::Auto => {
                if dim < SPARSE_THRESHOLD {
                    LinearBackend::Dense
                } else {
                    LinearBackend::Sparse
                }
            }
            other => other,
        }
    }
}

/// Solves `A x = b` where `A` is given as unsorted, possibly duplicated
/// triplets of a `dim × dim` matrix (duplicates are summed).
pub fn solve_triplets(
    dim: usize,
    triplets: &[(usize, usize, f64)],
    rhs: &DVector<f64>,
    backend: LinearBackend,
) -> Result<DVector<f64>> {
    if rhs.len() != dim {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side length {} does not match system dimension {dim}",
            rhs.len()
        )));
    }
    match backend.resolve(dim) {
        LinearBackend::Dense => {
            let mut a = DMatrix::zeros(dim, dim);
            for &(i, j, v) in triplets {
                a[(i, j)] += v;
            }
            solve_dense(&a, rhs)
        }
        LinearBackend::Sparse => {
            let mat = faer::sparse::SparseColMat::<usize, f64>::try_new_from_triplets(
                dim, dim, triplets,
            )
            .map_err(|e| Error::LinearSolve(format!("sparse matrix assembly failed: {e:?}")))?;
            let lu = mat
                .sp_lu()
                .map_err(|e| Error::LinearSolve(format!("sparse LU failed: {e:?}")))?;
            let mut x = faer::Col::<f64>::from_fn(dim, |i| rhs[i]);
            use faer::prelude::SpSolver;
            lu.solve_in_place(x.as_mut());
            let out = DVector::from_fn(dim, |i, _| x[i]);
            if out.iter().any(|v| !v.is_finite()) {
                return Err(Error::LinearSolve(
                    "sparse LU produced non-finite entries (singular matrix?)".into(),
                ));
            }
            Ok(out)
        }
        LinearBackend::Auto => unreachable!("resolved above"),
    }
}

/// Solves a dense system by LU with partial pivoting.
pub fn solve_dense(a: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    a.clone()
        .lu()
        .solve(rhs)
        .filter(|x| x.iter().all(|v| v.is_finite()))
        .ok_or_else(|| Error::LinearSolve("dense LU failed (singular matrix?)".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::prelude::*;

    fn random_triplets(dim: usize, seed: u64) -> (Vec<(usize, usize, f64)>, DVector<f64>) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut trips = Vec::new();
        for i in 0..dim {
            // Diagonally dominant, split across duplicate triplets.
            trips.push((i, i, 5.0 + dim as f64));
            trips.push((i, i, rng.gen_range(0.0..1.0)));
            for _ in 0..3 {
                let j = rng.gen_range(0..dim);
                trips.push((i, j, rng.gen_range(-1.0..1.0)));
            }
        }
        let rhs = DVector::from_fn(dim, |_, _| rng.gen_range(-1.0..1.0));
        (trips, rhs)
    }

    #[test]
    fn backends_agree() {
        let dim = 60;
        let (trips, rhs) = random_triplets(dim, 3);
        let xd = solve_triplets(dim, &trips, &rhs, LinearBackend::Dense).unwrap();
        let xs = solve_triplets(dim, &trips, &rhs, LinearBackend::Sparse).unwrap();
        assert_relative_eq!(xd, xs, epsilon = 1e-10);
        // Residual check against the dense matrix.
        let mut a = DMatrix::zeros(dim, dim);
        for &(i, j, v) in &trips {
            a[(i, j)] += v;
        }
        assert_relative_eq!(&a * &xd, rhs, epsilon = 1e-10);
    }

    #[test]
    fn auto_threshold() {
        assert_eq!(LinearBackend::Auto.resolve(305), LinearBackend::Dense);
        assert_eq!(LinearBackend::Auto.resolve(1999), LinearBackend::Dense);
        assert_eq!(LinearBackend::Auto.resolve(2000), LinearBackend::Sparse);
        assert_eq!(LinearBackend::Sparse.resolve(10), LinearBackend::Sparse);
    }

    #[test]
    fn singular_matrix_is_an_error() {
        let dim = 4;
        let trips = vec![(0, 0, 1.0), (1, 1, 1.0), (2, 2, 1.0)]; // row 3 empty
        let rhs = DVector::from_element(dim, 1.0);
        assert!(solve_triplets(dim, &trips, &rhs, LinearBackend::Dense).is_err());
    }
}
