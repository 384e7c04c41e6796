//! Non-negative least squares by the active-set method of Lawson and
//! Hanson, operating on the normal equations so that repeated solves with
//! masked column sets stay cheap.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// Solves `min ‖A·x − b‖₂` subject to `x ≥ 0`. Returns the solution and the
/// residual norm. Ties in the active-set selection break toward the lowest
/// column index, making the result deterministic.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if a.nrows() != b.len() {
        return Err(Error::DimensionMismatch(format!(
            "matrix has {} rows, right-hand side {}",
            a.nrows(),
            b.len()
        )));
    }
    let gram = a.transpose() * a;
    let c = a.transpose() * b;
    nnls_gram(&gram, &c, b.dot(b), &vec![true; a.ncols()])
}

/// Normal-equation form of [`nnls`]: minimizes `xᵀGx − 2cᵀx + btb` over
/// `x ≥ 0` with `G = AᵀA`, `c = Aᵀb`, `btb = bᵀb`. Columns with
/// `allowed[j] = false` are pinned to zero (used when pruning a support).
pub fn nnls_gram(
    gram: &DMatrix<f64>,
    c: &DVector<f64>,
    btb: f64,
    allowed: &[bool],
) -> Result<(DVector<f64>, f64)> {
    let n = c.len();
    if gram.nrows() != n || gram.ncols() != n || allowed.len() != n {
        return Err(Error::DimensionMismatch(
            "Gram matrix, gradient, and mask sizes disagree".into(),
        ));
    }
    let mut x = DVector::zeros(n);
    let mut passive = vec![false; n];
    let tol = 1e-12 * c.amax().max(f64::MIN_POSITIVE);
    let max_outer = 10 * n + 10;
    for _outer in 0..max_outer {
        // Gradient of ½‖Ax − b‖²: negative components mark descent columns.
        let w = c - gram * &x;
        let mut best: Option<(usize, f64)> = None;
        for j in 0..n {
            if allowed[j] && !passive[j] && w[j] > tol {
                // Strictly-greater keeps the lowest index on ties.
                if best.is_none_or(|(_, bw)| w[j] > bw) {
                    best = Some((j, w[j]));
                }
            }
        }
        let Some((j_star, _)) = best else {
            break; // Karush–Kuhn–Tucker conditions hold
        };
        passive[j_star] = true;
        // Inner loop: solve the unconstrained subproblem on the passive set
        // and walk back until it is feasible.
        loop {
            let idx: Vec<usize> = (0..n).filter(|&j| passive[j]).collect();
            let z = solve_subproblem(gram, c, &idx)?;
            if z.iter().all(|&v| v > 0.0) {
                x.fill(0.0);
                for (k, &j) in idx.iter().enumerate() {
                    x[j] = z[k];
                }
                break;
            }
            // Step length to the first coordinate that hits zero.
            let mut alpha = 1.0f64;
            for (k, &j) in idx.iter().enumerate() {
                if z[k] <= 0.0 {
                    let denom = x[j] - z[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[j] / denom);
                    }
                }
            }
            for (k, &j) in idx.iter().enumerate() {
                x[j] += alpha * (z[k] - x[j]);
                if z[k] <= 0.0 && x[j] <= tol.max(1e-14) {
                    x[j] = 0.0;
                    passive[j] = false;
                }
            }
        }
    }
    let quad = (btb - 2.0 * x.dot(c) + x.dot(&(gram * &x))).max(0.0);
    Ok((x, quad.sqrt()))
}

/// Unconstrained normal-equation solve restricted to the index set.
fn solve_subproblem(gram: &DMatrix<f64>, c: &DVector<f64>, idx: &[usize]) -> Result<DVector<f64>> {
    let p = idx.len();
    let mut g = DMatrix::zeros(p, p);
    let mut rhs = DVector::zeros(p);
    for (a, &i) in idx.iter().enumerate() {
        rhs[a] = c[i];
        for (b, &j) in idx.iter().enumerate() {
            g[(a, b)] = gram[(i, j)];
        }
    }
    if let Some(chol) = Cholesky::new(g.clone()) {
        return Ok(chol.solve(&rhs));
    }
    // Semi-definite subset: fall back to a pseudo-inverse solve.
    let svd = g.svd(true, true);
    svd.solve(&rhs, 1e-13)
        .map_err(|e| Error::LinearSolve(format!("non-negative least squares subproblem: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    #[test]
    fn interior_solution_matches_unconstrained_least_squares() {
        // Overdetermined system whose least-squares solution is positive.
        let a = DMatrix::from_row_slice(4, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -1.0]);
        let x_true = DVector::from_vec(vec![2.0, 1.0]);
        let b = &a * &x_true;
        let (x, res) = nnls(&a, &b).unwrap();
        assert_relative_eq!(x, x_true, epsilon = 1e-12);
        // The Gram-form residual only resolves an exact fit to √ε.
        assert_abs_diff_eq!(res, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn negative_directions_clamp_to_zero() {
        // Unconstrained optimum is (−1, 2); the constrained one pins x₁ = 0.
        let a = DMatrix::identity(2, 2);
        let b = DVector::from_vec(vec![-1.0, 2.0]);
        let (x, res) = nnls(&a, &b).unwrap();
        assert_abs_diff_eq!(x[0], 0.0, epsilon = 1e-14);
        assert_relative_eq!(x[1], 2.0, epsilon = 1e-14);
        assert_relative_eq!(res, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn single_constant_row_picks_the_lowest_index() {
        // One constraint Σ w_j = L: any single column solves it; the greedy
        // selection must take the first.
        let a = DMatrix::from_element(1, 5, 1.0);
        let b = DVector::from_vec(vec![2.5]);
        let (x, res) = nnls(&a, &b).unwrap();
        assert_relative_eq!(x[0], 2.5, epsilon = 1e-13);
        for j in 1..5 {
            assert_eq!(x[j], 0.0);
        }
        assert_abs_diff_eq!(res, 0.0, epsilon = 1e-6);
    }

    #[test]
    fn masked_columns_stay_zero() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![1.0, 1.0]);
        let gram = a.transpose() * &a;
        let c = a.transpose() * &b;
        let (x, res) = nnls_gram(&gram, &c, b.dot(&b), &[true, false, true]).unwrap();
        assert_eq!(x[1], 0.0);
        assert_relative_eq!(x[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(x[2], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(res, 0.0, epsilon = 1e-6);
    }
}
