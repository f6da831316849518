//! Newton-Raphson and proximal-Newton solvers for penalized partial likelihood.

use nalgebra::{DMatrix, DVector};

use super::likelihood::CoxProblem;
use super::ReasonCode;
use crate::error::Result;

/// Linear-predictor spread beyond which a fit is declared divergent.
pub(crate) const DIVERGENCE_ETA_RANGE: f64 = 50.0;

/// Relative pivot size below which the information matrix is singular.
const PIVOT_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
pub(crate) struct SolverSettings {
    pub max_iter: usize,
    pub tol: f64,
    pub step_halving_max: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub beta: DVector<f64>,
    pub reason: ReasonCode,
    pub iterations: usize,
    pub loglik: f64,
}

impl Solution {
    pub fn converged(&self) -> bool {
        self.reason == ReasonCode::Converged
    }
}

/// Cholesky solve of `a x = b` that reports rank deficiency instead of
/// producing a numerically meaningless solution.
pub(crate) fn cholesky_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let l = cholesky(a)?;
    let mut y = b.clone();
    let n = a.nrows();
    for i in 0..n {
        let mut v = y[i];
        for k in 0..i {
            v -= l[(i, k)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    for i in (0..n).rev() {
        let mut v = y[i];
        for k in i + 1..n {
            v -= l[(k, i)] * y[k];
        }
        y[i] = v / l[(i, i)];
    }
    Some(y)
}

/// Lower Cholesky factor, `None` when a pivot collapses relative to its diagonal.
pub(crate) fn cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > PIVOT_TOLERANCE * a[(j, j)].abs()) || !d.is_finite() {
            return None;
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / d;
        }
    }
    Some(l)
}

/// Inverse of a symmetric positive definite matrix, `None` when singular.
pub(crate) fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    let mut inv = DMatrix::zeros(n, n);
    let l = cholesky(a)?;
    for c in 0..n {
        let mut y = DVector::zeros(n);
        y[c] = 1.0;
        for i in 0..n {
            let mut v = y[i];
            for k in 0..i {
                v -= l[(i, k)] * y[k];
            }
            y[i] = v / l[(i, i)];
        }
        for i in (0..n).rev() {
            let mut v = y[i];
            for k in i + 1..n {
                v -= l[(k, i)] * y[k];
            }
            y[i] = v / l[(i, i)];
        }
        inv.set_column(c, &y);
    }
    Some(inv)
}

fn eta_range(problem: &CoxProblem, beta: &DVector<f64>) -> f64 {
    let eta = problem.linear_predictor(beta);
    eta.max() - eta.min()
}

fn quadratic_penalty(weights: &[f64], beta: &DVector<f64>) -> f64 {
    weights.iter().zip(beta.iter()).map(|(w, b)| w * b * b).sum()
}

/// Minimizes `-2 L(beta) + sum_j weights_j * beta_j^2` by Newton-Raphson with
/// step halving.
pub(crate) fn newton(
    problem: &CoxProblem,
    weights: &[f64],
    start: DVector<f64>,
    settings: SolverSettings,
) -> Result<Solution> {
    newton_scaled(problem, weights, None, start, settings)
}

/// Round-off allowance when comparing objective values.
fn slack(objective: f64) -> f64 {
    1e-12 * (1.0 + objective.abs())
}

/// Newton-Raphson in the variable `gamma = beta / scale`, with the quadratic
/// penalty `sum_j weights_j * gamma_j^2`. Convergence is tested on the
/// gradient in `gamma`. `start` and the returned coefficients are `gamma`.
pub(crate) fn newton_scaled(
    problem: &CoxProblem,
    weights: &[f64],
    scale: Option<&[f64]>,
    start: DVector<f64>,
    settings: SolverSettings,
) -> Result<Solution> {
    let to_beta = |gamma: &DVector<f64>| match scale {
        Some(d) => DVector::from_iterator(gamma.len(), gamma.iter().zip(d).map(|(g, s)| g * s)),
        None => gamma.clone(),
    };
    let mut beta = start;
    let mut current = problem.derivatives(&to_beta(&beta), true)?;
    let mut objective = -2.0 * current.loglik + quadratic_penalty(weights, &beta);

    for iteration in 0..=settings.max_iter {
        // objective gradient and Hessian on the -2L scale
        let mut grad = -2.0 * &current.gradient;
        if let Some(d) = scale {
            for (g, s) in grad.iter_mut().zip(d) {
                *g *= s;
            }
        }
        for (j, w) in weights.iter().enumerate() {
            grad[j] += 2.0 * w * beta[j];
        }
        if grad.amax() < settings.tol {
            return Ok(Solution {
                beta,
                reason: ReasonCode::Converged,
                iterations: iteration,
                loglik: current.loglik,
            });
        }
        if iteration == settings.max_iter {
            break;
        }
        let mut info = -2.0 * current.hessian.take().expect("hessian");
        if let Some(d) = scale {
            let n = info.nrows();
            for c in 0..n {
                for r in 0..n {
                    info[(r, c)] *= d[r] * d[c];
                }
            }
        }
        for (j, w) in weights.iter().enumerate() {
            info[(j, j)] += 2.0 * w;
        }
        let Some(step) = cholesky_solve(&info, &grad) else {
            return Ok(Solution {
                beta,
                reason: ReasonCode::Singular,
                iterations: iteration,
                loglik: current.loglik,
            });
        };

        let mut factor = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.step_halving_max {
            let candidate = &beta - factor * &step;
            if let Ok(ll) = problem.loglik(&to_beta(&candidate)) {
                let obj = -2.0 * ll + quadratic_penalty(weights, &candidate);
                if obj <= objective + slack(objective) {
                    accepted = Some((candidate, obj));
                    break;
                }
            }
            factor *= 0.5;
        }
        let Some((candidate, obj)) = accepted else {
            return Ok(Solution {
                beta,
                reason: ReasonCode::NoProgress,
                iterations: iteration,
                loglik: current.loglik,
            });
        };
        beta = candidate;
        objective = obj;
        if eta_range(problem, &to_beta(&beta)) > DIVERGENCE_ETA_RANGE {
            return Ok(Solution {
                loglik: problem.loglik(&to_beta(&beta))?,
                beta,
                reason: ReasonCode::Diverged,
                iterations: iteration + 1,
            });
        }
        current = problem.derivatives(&to_beta(&beta), true)?;
    }

    let reason = if eta_range(problem, &to_beta(&beta)) > DIVERGENCE_ETA_RANGE / 2.0 {
        ReasonCode::Diverged
    } else {
        ReasonCode::MaxIter
    };
    Ok(Solution {
        beta,
        reason,
        iterations: settings.max_iter,
        loglik: current.loglik,
    })
}

fn soft_threshold(z: f64, t: f64) -> f64 {
    if z > t {
        z - t
    } else if z < -t {
        z + t
    } else {
        0.0
    }
}

/// Minimizes `-2 L(beta) + s * ||beta||_1` by proximal Newton: each outer step
/// solves the local quadratic model with cyclic coordinate descent, then
/// backtracks on the true objective.
pub(crate) fn lasso(
    problem: &CoxProblem,
    s: f64,
    start: DVector<f64>,
    settings: SolverSettings,
) -> Result<Solution> {
    let q = problem.dim();
    let mut beta = start;
    let l1 = |b: &DVector<f64>| b.iter().map(|v| v.abs()).sum::<f64>();
    let mut current = problem.derivatives(&beta, true)?;
    let mut objective = -2.0 * current.loglik + s * l1(&beta);

    for iteration in 0..settings.max_iter {
        let grad = -2.0 * &current.gradient;
        let hess = -2.0 * current.hessian.take().expect("hessian");

        // coordinate descent on the quadratic model around `beta`
        let mut next = beta.clone();
        let mut h_delta = DVector::<f64>::zeros(q);
        for _sweep in 0..1000 {
            let mut max_change: f64 = 0.0;
            for j in 0..q {
                let hjj = hess[(j, j)];
                if hjj <= 0.0 {
                    if next[j] != 0.0 {
                        let change = -next[j];
                        h_delta.axpy(change, &hess.column(j), 1.0);
                        next[j] = 0.0;
                    }
                    continue;
                }
                let r = grad[j] + h_delta[j] - hjj * (next[j] - beta[j]);
                let updated = soft_threshold(hjj * beta[j] - r, s) / hjj;
                let change = updated - next[j];
                if change != 0.0 {
                    h_delta.axpy(change, &hess.column(j), 1.0);
                    next[j] = updated;
                    max_change = max_change.max(change.abs());
                }
            }
            if max_change < settings.tol * 0.1 {
                break;
            }
        }

        let direction = &next - &beta;
        if direction.amax() < settings.tol {
            return Ok(Solution {
                beta,
                reason: ReasonCode::Converged,
                iterations: iteration,
                loglik: current.loglik,
            });
        }
        let predicted = grad.dot(&direction) + s * (l1(&next) - l1(&beta));
        let mut scale = 1.0;
        let mut accepted = None;
        for _ in 0..=settings.step_halving_max {
            let candidate = &beta + scale * &direction;
            if let Ok(ll) = problem.loglik(&candidate) {
                let obj = -2.0 * ll + s * l1(&candidate);
                if obj <= objective + 1e-4 * scale * predicted.min(0.0) + slack(objective) {
                    accepted = Some((candidate, obj));
                    break;
                }
            }
            scale *= 0.5;
        }
        let Some((candidate, obj)) = accepted else {
            // no decrease available: at the optimum up to round-off
            let reason = if direction.amax() < settings.tol.sqrt() {
                ReasonCode::Converged
            } else {
                ReasonCode::NoProgress
            };
            return Ok(Solution {
                beta,
                reason,
                iterations: iteration,
                loglik: current.loglik,
            });
        };
        let change = (&candidate - &beta).amax();
        beta = candidate;
        objective = obj;
        if eta_range(problem, &beta) > DIVERGENCE_ETA_RANGE {
            return Ok(Solution {
                loglik: problem.loglik(&beta)?,
                beta,
                reason: ReasonCode::Diverged,
                iterations: iteration + 1,
            });
        }
        current = problem.derivatives(&beta, true)?;
        if change < settings.tol {
            return Ok(Solution {
                beta,
                reason: ReasonCode::Converged,
                iterations: iteration + 1,
                loglik: current.loglik,
            });
        }
    }
    Ok(Solution {
        beta,
        reason: ReasonCode::MaxIter,
        iterations: settings.max_iter,
        loglik: current.loglik,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cholesky_detects_rank_deficiency() {
        // rank-1 3x3
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        assert!(cholesky(&a).is_none());
        let mut b = a.clone();
        for i in 0..3 {
            b[(i, i)] += 1.0;
        }
        let x = cholesky_solve(&b, &v).unwrap();
        assert!((&b * x - &v).amax() < 1e-12);
        let inv = spd_inverse(&b).unwrap();
        assert!((&b * inv - DMatrix::<f64>::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn soft_threshold_cases() {
        assert_eq!(soft_threshold(3.0, 1.0), 2.0);
        assert_eq!(soft_threshold(-3.0, 1.0), -2.0);
        assert_eq!(soft_threshold(0.5, 1.0), 0.0);
    }
}
