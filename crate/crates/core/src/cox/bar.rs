//! Broken adaptive ridge: a ridge start followed by reweighted ridge fits whose
//! weights grow without bound for coefficients heading to zero.

use nalgebra::DVector;

use super::likelihood::CoxProblem;
use super::solver;
use super::{BarDenominator, FitConfig, FitResult, Penalty, ReasonCode, ZERO_THRESHOLD};
use crate::data::ModelLayout;
use crate::error::{Error, Result};

/// BAR fit with ridge start `xi` and reweighting strength `theta`.
pub fn fit_bar(layout: &ModelLayout, xi: f64, theta: f64, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    fit_bar_with_offsets(layout, None, xi, theta, config)
}

pub(crate) fn fit_bar_with_offsets(
    layout: &ModelLayout,
    offsets: Option<&[f64]>,
    xi: f64,
    theta: f64,
    config: &FitConfig,
) -> Result<FitResult> {
    Ok(fit_bar_path(layout, offsets, xi, theta, config)?.0)
}

/// BAR fit plus the support size after each reweighting pass.
pub fn fit_bar_path(
    layout: &ModelLayout,
    offsets: Option<&[f64]>,
    xi: f64,
    theta: f64,
    config: &FitConfig,
) -> Result<(FitResult, Vec<usize>)> {
    if !(xi >= 0.0 && theta >= 0.0) {
        return Err(Error::InvalidConfig("BAR xi and theta must be >= 0".into()));
    }
    let penalty = Penalty::Bar { xi, theta };
    let p = layout.p;
    let settings = config.settings();
    let wrap = |iteration: usize| move |e: Error| Error::Bar {
        iteration,
        source: Box::new(e),
    };

    let full = CoxProblem::new(layout, offsets).map_err(wrap(0))?;
    let start = solver::newton(&full, &vec![xi; p], DVector::zeros(p), settings).map_err(wrap(0))?;
    let mut support = vec![p];
    if !start.converged() {
        let mut result = FitResult::from_solution(&start, penalty, p, full.columns());
        result.iterations = 0;
        result.subject_offsets = offsets.map(<[f64]>::to_vec);
        return Ok((result, support));
    }

    let mut columns: Vec<usize> = (0..p).filter(|&j| start.beta[j].abs() > ZERO_THRESHOLD).collect();
    let mut prev: Vec<f64> = columns.iter().map(|&j| start.beta[j]).collect();
    let mut loglik = start.loglik;
    support.push(columns.len());
    let mut problem = if columns.len() == p {
        full
    } else {
        CoxProblem::with_columns(layout, offsets, &columns).map_err(wrap(0))?
    };

    let finish = |columns: &[usize], values: &[f64], reason, iterations, loglik| {
        let mut beta_hat = vec![0.0; p];
        for (&j, &v) in columns.iter().zip(values) {
            beta_hat[j] = v;
        }
        let mut result = FitResult::new(beta_hat, penalty, reason, iterations, loglik);
        result.subject_offsets = offsets.map(<[f64]>::to_vec);
        result
    };

    for iteration in 1..=config.bar_max_iter {
        if columns.is_empty() {
            let ll = CoxProblem::with_columns(layout, offsets, &[])
                .and_then(|pr| pr.loglik(&DVector::zeros(0)))
                .map_err(wrap(iteration))?;
            return Ok((finish(&[], &[], ReasonCode::Converged, iteration, ll), support));
        }
        // Solved in gamma = beta / prev, where the reweighted penalty is a
        // plain ridge; weights of order theta / prev^2 would otherwise make
        // the problem hopelessly ill-conditioned as coefficients shrink.
        let weights: Vec<f64> = prev
            .iter()
            .map(|b| match config.bar_denominator {
                BarDenominator::Squared => theta,
                BarDenominator::FirstPower => theta * b.abs(),
            })
            .collect();
        let sol = solver::newton_scaled(
            &problem,
            &weights,
            Some(&prev),
            DVector::from_element(prev.len(), 1.0),
            settings,
        )
        .map_err(wrap(iteration))?;
        let beta: Vec<f64> = sol.beta.iter().zip(&prev).map(|(g, b)| g * b).collect();
        if !sol.converged() {
            return Ok((finish(&columns, &beta, sol.reason, iteration, sol.loglik), support));
        }
        loglik = sol.loglik;

        let mut change: f64 = 0.0;
        let mut kept_columns = Vec::with_capacity(columns.len());
        let mut kept_values = Vec::with_capacity(columns.len());
        for (k, &j) in columns.iter().enumerate() {
            let v = beta[k];
            if v.abs() > ZERO_THRESHOLD {
                change = change.max((v - prev[k]).abs());
                kept_columns.push(j);
                kept_values.push(v);
            } else {
                change = change.max(prev[k].abs());
            }
        }
        support.push(kept_columns.len());
        let shrunk = kept_columns.len() < columns.len();
        columns = kept_columns;
        prev = kept_values;
        if change < config.tol {
            let loglik = if shrunk {
                CoxProblem::with_columns(layout, offsets, &columns)
                    .and_then(|pr| pr.loglik(&DVector::from_vec(prev.clone())))
                    .map_err(wrap(iteration))?
            } else {
                loglik
            };
            return Ok((finish(&columns, &prev, ReasonCode::Converged, iteration, loglik), support));
        }
        if shrunk {
            problem = CoxProblem::with_columns(layout, offsets, &columns).map_err(wrap(iteration))?;
        }
    }
    Ok((
        finish(&columns, &prev, ReasonCode::MaxIter, config.bar_max_iter, loglik),
        support,
    ))
}
