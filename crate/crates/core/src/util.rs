//! Small numeric helpers shared across modules.

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};

/// Cosine similarity with the pipeline-wide convention that a zero vector
/// has similarity 0 to anything.
pub fn cosine(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

/// Mean over rows of per-row cosine between two equally shaped matrices.
pub fn mean_row_cosine(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    let m = a.nrows();
    if m == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..m {
        total += cosine(a.row(i), b.row(i));
    }
    total / m as f64
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (ddof = 1).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let mu = mean(xs);
    let ss: f64 = xs.iter().map(|x| (x - mu) * (x - mu)).sum();
    (ss / (xs.len() - 1) as f64).sqrt()
}

pub fn all_finite(data: &Array2<f64>) -> bool {
    data.iter().all(|v| v.is_finite())
}

/// Solves `A x = b` for symmetric positive-definite `A` via Cholesky.
pub fn solve_spd(a: &Array2<f64>, b: &Array1<f64>) -> Result<Array1<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[[i, j]];
            for k in 0..j {
                sum -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Fit("matrix is not positive definite".into()));
                }
                l[[i, j]] = sum.sqrt();
            } else {
                l[[i, j]] = sum / l[[j, j]];
            }
        }
    }
    let mut y = Array1::zeros(n);
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[[i, k]] * y[k];
        }
        y[i] = sum / l[[i, i]];
    }
    let mut x = Array1::zeros(n);
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in i + 1..n {
            sum -= l[[k, i]] * x[k];
        }
        x[i] = sum / l[[i, i]];
    }
    Ok(x)
}

/// Ridge-free least squares `min ||X beta - y||` via normal equations with a
/// tiny diagonal jitter; returns the fitted coefficients.
pub fn least_squares(design: &Array2<f64>, y: &Array1<f64>) -> Result<Array1<f64>> {
    let mut gram = design.t().dot(design);
    for i in 0..gram.nrows() {
        gram[[i, i]] += 1e-10;
    }
    let rhs = design.t().dot(y);
    solve_spd(&gram, &rhs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_basics() {
        let a = array![1.0, 0.0];
        let b = array![0.0, 1.0];
        assert_eq!(cosine(a.view(), a.view()), 1.0);
        assert_eq!(cosine(a.view(), b.view()), 0.0);
        let z = array![0.0, 0.0];
        assert_eq!(cosine(a.view(), z.view()), 0.0);
    }

    #[test]
    fn std_of_constant_is_zero() {
        assert_eq!(sample_std(&[2.0, 2.0, 2.0]), 0.0);
    }
}
