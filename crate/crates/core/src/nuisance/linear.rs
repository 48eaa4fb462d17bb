//! Least squares and logistic regression with an intercept.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{DtrError, Result};
use crate::matrix::Matrix;

/// Diagonal jitter added to the normal equations (intercept excluded).
pub const RIDGE_JITTER: f64 = 1e-8;
/// Penalty used by the logistic Newton iterations (intercept excluded).
const LOGISTIC_RIDGE: f64 = 1e-6;
const LOGISTIC_MAX_ITER: usize = 100;

fn design(x: &Matrix) -> DMatrix<f64> {
    let (n, p) = (x.rows(), x.cols());
    DMatrix::from_fn(n, p + 1, |r, c| if c == 0 { 1.0 } else { x.get(r, c - 1) })
}

fn solve_spd(mut a: DMatrix<f64>, b: DVector<f64>) -> Result<DVector<f64>> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(chol.solve(&b));
    }
    // fall back to a pseudo-inverse style solve for singular systems
    let n = a.nrows();
    for i in 1..n {
        a[(i, i)] += 1e-6;
    }
    a.lu()
        .solve(&b)
        .ok_or_else(|| DtrError::Numerical("singular normal equations".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    intercept: f64,
    coefficients: Vec<f64>,
}

impl LinearModel {
    pub fn fit(x: &Matrix, y: &[f64]) -> Result<Self> {
        let n = x.rows();
        if n == 0 || y.len() != n {
            return Err(DtrError::InvalidInput(format!(
                "linear fit needs matching non-empty inputs, got {n} rows and {} targets",
                y.len()
            )));
        }
        let first = y[0];
        if y.iter().all(|&v| v == first) {
            return Ok(Self {
                intercept: first,
                coefficients: vec![0.0; x.cols()],
            });
        }
        let xd = design(x);
        let mut xtx = xd.transpose() * &xd;
        for i in 1..xtx.nrows() {
            xtx[(i, i)] += RIDGE_JITTER;
        }
        let xty = xd.transpose() * DVector::from_column_slice(y);
        let beta = solve_spd(xtx, xty)?;
        Ok(Self {
            intercept: beta[0],
            coefficients: beta.iter().skip(1).copied().collect(),
        })
    }

    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept
            + self
                .coefficients
                .iter()
                .zip(x)
                .map(|(b, v)| b * v)
                .sum::<f64>()
    }

    pub fn coefficients(&self) -> (f64, &[f64]) {
        (self.intercept, &self.coefficients)
    }
}

/// Multinomial logistic regression with class 0 as the reference category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    num_classes: usize,
    /// `(num_classes - 1) × (p + 1)` coefficients, intercept first.
    weights: Vec<Vec<f64>>,
}

impl LogisticModel {
    /// Fit by damped Newton iterations. `labels` must lie in `0..num_classes`.
    pub fn fit(x: &Matrix, labels: &[usize], num_classes: usize) -> Result<Self> {
        let n = x.rows();
        if n == 0 || labels.len() != n || num_classes < 2 {
            return Err(DtrError::InvalidInput(
                "logistic fit needs matching non-empty inputs and two classes".into(),
            ));
        }
        let xd = design(x);
        let q = xd.ncols();
        let m = num_classes - 1;
        let dim = m * q;
        let mut w = DVector::<f64>::zeros(dim);

        let loss = |w: &DVector<f64>| -> f64 {
            let mut total = 0.0;
            for r in 0..n {
                let eta = Self::linear_terms(&xd, r, w, m, q);
                let lse = log_sum_exp(&eta);
                let obs = if labels[r] == 0 { 0.0 } else { eta[labels[r] - 1] };
                total += lse - obs;
            }
            let penalty: f64 = (0..m)
                .flat_map(|c| (1..q).map(move |j| c * q + j))
                .map(|i| w[i] * w[i])
                .sum();
            total + 0.5 * LOGISTIC_RIDGE * penalty
        };

        let mut current = loss(&w);
        for _ in 0..LOGISTIC_MAX_ITER {
            let mut grad = DVector::<f64>::zeros(dim);
            let mut hess = DMatrix::<f64>::zeros(dim, dim);
            for r in 0..n {
                let eta = Self::linear_terms(&xd, r, &w, m, q);
                let probs = softmax_with_reference(&eta);
                let xr = xd.row(r);
                for a in 0..m {
                    let resid = probs[a + 1] - f64::from(labels[r] == a + 1);
                    for j in 0..q {
                        grad[a * q + j] += resid * xr[j];
                    }
                    for b in 0..m {
                        let wab = probs[a + 1] * (f64::from(a == b) - probs[b + 1]);
                        if wab == 0.0 {
                            continue;
                        }
                        for j in 0..q {
                            let s = wab * xr[j];
                            for l in 0..q {
                                hess[(a * q + j, b * q + l)] += s * xr[l];
                            }
                        }
                    }
                }
            }
            for a in 0..m {
                for j in 1..q {
                    grad[a * q + j] += LOGISTIC_RIDGE * w[a * q + j];
                    hess[(a * q + j, a * q + j)] += LOGISTIC_RIDGE;
                }
                hess[(a * q, a * q)] += 1e-12;
            }
            let step = solve_spd(hess, grad)?;
            let mut scale = 1.0;
            let mut accepted = false;
            for _ in 0..30 {
                let cand = &w - &step * scale;
                let l = loss(&cand);
                if l.is_finite() && l <= current {
                    let improvement = current - l;
                    w = cand;
                    current = l;
                    accepted = true;
                    if improvement < 1e-10 * (1.0 + current.abs()) {
                        return Ok(from_weights(num_classes, &w, m, q));
                    }
                    break;
                }
                scale *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        Ok(from_weights(num_classes, &w, m, q))
    }

    fn linear_terms(xd: &DMatrix<f64>, r: usize, w: &DVector<f64>, m: usize, q: usize) -> Vec<f64> {
        (0..m)
            .map(|a| (0..q).map(|j| xd[(r, j)] * w[a * q + j]).sum())
            .collect()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let eta: Vec<f64> = self
            .weights
            .iter()
            .map(|w| w[0] + w[1..].iter().zip(x).map(|(b, v)| b * v).sum::<f64>())
            .collect();
        softmax_with_reference(&eta)
    }
}

fn from_weights(num_classes: usize, w: &DVector<f64>, m: usize, q: usize) -> LogisticModel {
    LogisticModel {
        num_classes,
        weights: (0..m)
            .map(|a| (0..q).map(|j| w[a * q + j]).collect())
            .collect(),
    }
}

/// `log(1 + Σ exp(eta))`, the normalizer including the reference class.
fn log_sum_exp(eta: &[f64]) -> f64 {
    let max = eta.iter().copied().fold(0.0_f64, f64::max);
    let s = (-max).exp() + eta.iter().map(|e| (e - max).exp()).sum::<f64>();
    max + s.ln()
}

/// Class probabilities for linear terms of classes `1..`, class 0 fixed at 0.
fn softmax_with_reference(eta: &[f64]) -> Vec<f64> {
    let max = eta.iter().copied().fold(0.0_f64, f64::max);
    let mut out = Vec::with_capacity(eta.len() + 1);
    out.push((-max).exp());
    out.extend(eta.iter().map(|e| (e - max).exp()));
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= z);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_is_interpolated() {
        let x = Matrix::from_vec(4, 1, vec![0.0, 1.0, 2.0, 3.0]);
        let y = [1.0, 3.0, 5.0, 7.0];
        let m = LinearModel::fit(&x, &y).unwrap();
        assert!((m.predict(&[10.0]) - 21.0).abs() < 1e-6);
    }

    #[test]
    fn constant_target() {
        let x = Matrix::from_vec(3, 1, vec![0.0, 1.0, 2.0]);
        let m = LinearModel::fit(&x, &[2.5; 3]).unwrap();
        assert_eq!(m.predict(&[100.0]), 2.5);
    }

    #[test]
    fn collinear_design_is_stable() {
        let x = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![2.0, 4.0],
            vec![3.0, 6.0],
            vec![4.0, 8.0],
        ]);
        let m = LinearModel::fit(&x, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((m.predict(&[5.0, 10.0]) - 5.0).abs() < 1e-5);
    }

    #[test]
    fn logistic_recovers_probabilities() {
        // exact frequencies 1/4 at x=0 and 3/4 at x=1
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (x, ones) in [(0.0, 1), (1.0, 3)] {
            for j in 0..4 {
                rows.push(vec![x]);
                labels.push(usize::from(j < ones));
            }
        }
        let m = LogisticModel::fit(&Matrix::from_rows(&rows), &labels, 2).unwrap();
        assert!((m.predict_proba(&[0.0])[1] - 0.25).abs() < 1e-4);
        assert!((m.predict_proba(&[1.0])[1] - 0.75).abs() < 1e-4);
    }

    #[test]
    fn multinomial_matches_frequencies() {
        let labels: Vec<usize> = (0..60).map(|i| if i < 10 { 0 } else if i < 30 { 1 } else { 2 }).collect();
        let x = Matrix::zeros(60, 1);
        let m = LogisticModel::fit(&x, &labels, 3).unwrap();
        let p = m.predict_proba(&[0.0]);
        assert!((p[0] - 1.0 / 6.0).abs() < 1e-4);
        assert!((p[1] - 1.0 / 3.0).abs() < 1e-4);
        assert!((p[2] - 0.5).abs() < 1e-4);
    }
}
