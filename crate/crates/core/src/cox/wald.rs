//! Wald tests for fitted coefficients.

use nalgebra::DVector;
use statrs::function::erf::erfc;

use super::likelihood::CoxProblem;
use super::solver::{self, spd_inverse};
use super::{FitConfig, FitResult, Penalty};
use crate::data::ModelLayout;
use crate::error::{Error, Result};

/// `P(|Z| >= |z|)` for a standard normal `Z`.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2)
}

/// Two-sided Wald p-values for every coefficient of `result`.
///
/// Unpenalized fits are tested at their estimate. Penalized fits are refit
/// without penalty on the selected support first; unselected coefficients get
/// p = 1. Fails when the information matrix on the tested support is not
/// invertible.
pub fn wald_pvalues(result: &FitResult, layout: &ModelLayout) -> Result<Vec<f64>> {
    if !result.converged {
        return Err(Error::Numerical(format!(
            "cannot test a fit that did not converge ({})",
            result.reason
        )));
    }
    let p = layout.p;
    if result.beta_hat.len() != p {
        return Err(Error::InvalidData("coefficient length does not match layout".into()));
    }
    let offsets = result.subject_offsets.as_deref();
    let columns: Vec<usize> = match result.penalty {
        Penalty::None => (0..p).collect(),
        _ => (0..p).filter(|&j| result.selected[j]).collect(),
    };
    let mut p_values = vec![1.0; p];
    if columns.is_empty() {
        return Ok(p_values);
    }
    let problem = CoxProblem::with_columns(layout, offsets, &columns)?;
    let beta = match result.penalty {
        Penalty::None => DVector::from_iterator(columns.len(), columns.iter().map(|&j| result.beta_hat[j])),
        _ => {
            let start = DVector::from_iterator(columns.len(), columns.iter().map(|&j| result.beta_hat[j]));
            let sol = solver::newton(
                &problem,
                &vec![0.0; columns.len()],
                start,
                FitConfig::default().settings(),
            )?;
            if !sol.converged() {
                return Err(Error::Numerical(format!(
                    "unpenalized refit on the selected support failed ({})",
                    sol.reason
                )));
            }
            sol.beta
        }
    };
    let d = problem.derivatives(&beta, true)?;
    let info = -d.hessian.expect("hessian");
    let cov = spd_inverse(&info)
        .ok_or_else(|| Error::Numerical("information matrix is not invertible".into()))?;
    for (k, &j) in columns.iter().enumerate() {
        let se = cov[(k, k)].sqrt();
        p_values[j] = if beta[k] == 0.0 { 1.0 } else { normal_two_sided_p(beta[k] / se) };
    }
    Ok(p_values)
}
