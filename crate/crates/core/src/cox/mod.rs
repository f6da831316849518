//! Penalized partial-likelihood estimation for the AG, PWP, WLW and gamma
//! frailty recurrent-event models.

mod bar;
mod frailty;
mod likelihood;
mod solver;
mod wald;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::data::{expand_layout_with_kmax, ModelKind, ModelLayout, RecurrentDataset, RiskSet};
use crate::error::{Error, Result};

pub use bar::{fit_bar, fit_bar_path};
pub use frailty::{fit_frailty, frailty_profile_loglik};
pub use likelihood::{gradient_hessian, partial_loglik, BaselineFit, CoxProblem, Derivatives};
pub use wald::{normal_two_sided_p, wald_pvalues};

use solver::{SolverSettings, Solution};

/// Coefficients at or below this magnitude count as not selected.
pub const ZERO_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    None,
    /// `-2 L + s * ||beta||_1`
    Lasso { s: f64 },
    /// `-2 L + s * ||beta||_2^2`
    Ridge { s: f64 },
    /// Ridge start with `xi`, then reweighted ridge with `theta`.
    Bar { xi: f64, theta: f64 },
}

impl Penalty {
    pub fn label(&self) -> String {
        match self {
            Penalty::None => "none".into(),
            Penalty::Lasso { s } => format!("lasso({s})"),
            Penalty::Ridge { s } => format!("ridge({s})"),
            Penalty::Bar { xi, theta } => format!("bar({xi},{theta})"),
        }
    }
}

/// How the BAR reweighting divides by the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarDenominator {
    /// `theta * beta_j^2 / beta_prev_j^2`
    #[default]
    Squared,
    /// `theta * beta_j^2 / |beta_prev_j|`
    FirstPower,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrailtyVariance {
    /// Maximize the profile likelihood over `[0, max]`.
    Estimate { max: f64 },
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub penalty: Penalty,
    pub max_iter: usize,
    pub tol: f64,
    pub step_halving_max: usize,
    /// Cap on BAR reweighting passes; each pass is a full Newton solve.
    pub bar_max_iter: usize,
    pub bar_denominator: BarDenominator,
    /// Fit PWP/WLW strata with their own coefficient vectors.
    pub stratum_specific: bool,
    pub frailty: FrailtyVariance,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            penalty: Penalty::None,
            max_iter: 100,
            tol: 1e-6,
            step_halving_max: 30,
            bar_max_iter: 500,
            bar_denominator: BarDenominator::Squared,
            stratum_specific: false,
            frailty: FrailtyVariance::Estimate { max: 5.0 },
        }
    }
}

impl FitConfig {
    pub fn with_penalty(penalty: Penalty) -> Self {
        Self {
            penalty,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.to_string()));
        match self.penalty {
            Penalty::Lasso { s } | Penalty::Ridge { s } if !(s >= 0.0) => {
                return bad("penalty s must be >= 0")
            }
            Penalty::Bar { xi, theta } if !(xi >= 0.0 && theta >= 0.0) => {
                return bad("BAR xi and theta must be >= 0")
            }
            _ => {}
        }
        if !(self.tol > 0.0) {
            return bad("tol must be > 0");
        }
        if let FrailtyVariance::Fixed(v) = self.frailty {
            if !(v >= 0.0) {
                return bad("fixed frailty variance must be >= 0");
            }
        }
        Ok(())
    }

    pub(crate) fn settings(&self) -> SolverSettings {
        SolverSettings {
            max_iter: self.max_iter,
            tol: self.tol,
            step_halving_max: self.step_halving_max,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ReasonCode {
    Converged,
    /// Information matrix numerically singular.
    Singular,
    /// Linear predictor unbounded (monotone likelihood).
    Diverged,
    MaxIter,
    /// Step halving could not decrease the objective.
    NoProgress,
}

impl ReasonCode {
    pub fn as_str(self) -> &'static str {
        match self {
            ReasonCode::Converged => "CONVERGED",
            ReasonCode::Singular => "SINGULAR",
            ReasonCode::Diverged => "DIVERGED",
            ReasonCode::MaxIter => "MAX_ITER",
            ReasonCode::NoProgress => "NO_PROGRESS",
        }
    }
}

impl std::fmt::Display for ReasonCode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: Option<ModelKind>,
    pub penalty: Penalty,
    pub beta_hat: Vec<f64>,
    pub selected: Vec<bool>,
    pub p_values: Option<Vec<f64>>,
    pub converged: bool,
    pub reason: ReasonCode,
    pub iterations: usize,
    pub final_loglik: f64,
    /// Per-stratum coefficients when fitted stratum-specific.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stratum_betas: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frailty_variance: Option<f64>,
    /// Frailty estimate collapsed to zero, fit equivalent to AG.
    #[serde(default)]
    pub frailty_degenerate: bool,
    /// Per-subject log-frailty offsets used by the final fit.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_offsets: Option<Vec<f64>>,
}

impl FitResult {
    pub(crate) fn from_solution(
        sol: &Solution,
        penalty: Penalty,
        p: usize,
        columns: &[usize],
    ) -> Self {
        let mut beta_hat = vec![0.0; p];
        for (k, &j) in columns.iter().enumerate() {
            beta_hat[j] = sol.beta[k];
        }
        Self::new(beta_hat, penalty, sol.reason, sol.iterations, sol.loglik)
    }

    pub(crate) fn new(
        beta_hat: Vec<f64>,
        penalty: Penalty,
        reason: ReasonCode,
        iterations: usize,
        final_loglik: f64,
    ) -> Self {
        let selected = selection_mask(&beta_hat);
        Self {
            model: None,
            penalty,
            beta_hat,
            selected,
            p_values: None,
            converged: reason == ReasonCode::Converged,
            reason,
            iterations,
            final_loglik,
            stratum_betas: None,
            frailty_variance: None,
            frailty_degenerate: false,
            subject_offsets: None,
        }
    }

    /// Variables flagged for the error rate: significant at 0.05 when Wald
    /// p-values exist, the selection mask otherwise.
    pub fn flagged(&self) -> Vec<bool> {
        match &self.p_values {
            Some(pv) => pv.iter().map(|&v| v < 0.05).collect(),
            None => self.selected.clone(),
        }
    }

    pub fn risk_scores(&self, covariates: &[Vec<f64>]) -> Vec<f64> {
        covariates
            .iter()
            .map(|x| x.iter().zip(&self.beta_hat).map(|(a, b)| a * b).sum())
            .collect()
    }
}

pub fn selection_mask(beta: &[f64]) -> Vec<bool> {
    beta.iter().map(|b| b.abs() > ZERO_THRESHOLD).collect()
}

/// Fits `layout` under `config.penalty`.
pub fn fit(layout: &ModelLayout, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    if config.stratum_specific && layout.n_strata() > 1 {
        return fit_stratum_specific(layout, config);
    }
    fit_with_offsets(layout, None, config)
}

pub(crate) fn fit_with_offsets(
    layout: &ModelLayout,
    offsets: Option<&[f64]>,
    config: &FitConfig,
) -> Result<FitResult> {
    match config.penalty {
        Penalty::Bar { xi, theta } => bar::fit_bar_with_offsets(layout, offsets, xi, theta, config),
        _ => {
            let problem = CoxProblem::new(layout, offsets)?;
            let sol = solve(&problem, config.penalty, DVector::zeros(layout.p), config)?;
            let mut result = FitResult::from_solution(&sol, config.penalty, layout.p, problem.columns());
            result.subject_offsets = offsets.map(<[f64]>::to_vec);
            Ok(result)
        }
    }
}

/// Solves a non-BAR penalty on a prepared problem.
pub(crate) fn solve(
    problem: &CoxProblem,
    penalty: Penalty,
    start: DVector<f64>,
    config: &FitConfig,
) -> Result<Solution> {
    let q = problem.dim();
    match penalty {
        Penalty::None => solver::newton(problem, &vec![0.0; q], start, config.settings()),
        Penalty::Ridge { s } => solver::newton(problem, &vec![s; q], start, config.settings()),
        Penalty::Lasso { s } => solver::lasso(problem, s, start, config.settings()),
        Penalty::Bar { .. } => Err(Error::InvalidConfig(
            "BAR penalties are solved by fit_bar".into(),
        )),
    }
}

fn fit_stratum_specific(layout: &ModelLayout, config: &FitConfig) -> Result<FitResult> {
    let mut betas = Vec::new();
    let mut weights = Vec::new();
    let mut worst: Option<FitResult> = None;
    let mut iterations = 0;
    let mut loglik = 0.0;
    for k in 1..=layout.n_strata() {
        let rows: Vec<_> = layout.rows.iter().filter(|r| r.stratum == k).cloned().collect();
        let events = rows.iter().filter(|r| r.status).count();
        if events == 0 {
            continue;
        }
        let sub = ModelLayout {
            rows: rows.into_iter().map(|r| crate::data::LayoutRow { stratum: 1, ..r }).collect(),
            ..layout.clone()
        };
        let res = fit_with_offsets(&sub, None, config)?;
        iterations = iterations.max(res.iterations);
        loglik += res.final_loglik;
        betas.push(res.beta_hat.clone());
        weights.push(events as f64);
        if !res.converged && worst.is_none() {
            worst = Some(res);
        }
    }
    let total: f64 = weights.iter().sum();
    let mut pooled = vec![0.0; layout.p];
    for (b, w) in betas.iter().zip(&weights) {
        for (acc, v) in pooled.iter_mut().zip(b) {
            *acc += v * w / total;
        }
    }
    let reason = worst.map_or(ReasonCode::Converged, |r| r.reason);
    let mut result = FitResult::new(pooled, config.penalty, reason, iterations, loglik);
    result.stratum_betas = Some(betas);
    Ok(result)
}

/// Expands `data` for `model` and fits it. WLW strata are capped at `k_max`
/// when given.
pub fn fit_model(
    data: &RecurrentDataset,
    model: ModelKind,
    k_max: Option<usize>,
    config: &FitConfig,
) -> Result<(ModelLayout, FitResult)> {
    let layout = expand_layout_with_kmax(data, model, k_max)?;
    let mut result = match model {
        ModelKind::Frailty => fit_frailty(&layout, config)?,
        _ => fit(&layout, config)?,
    };
    result.model = Some(model);
    Ok((layout, result))
}

pub(crate) fn require_unrestricted(layout: &ModelLayout) -> Result<()> {
    if layout.risk_set != RiskSet::Unrestricted || layout.n_strata() > 1 {
        return Err(Error::InvalidData(
            "frailty models need an unrestricted single-stratum layout".into(),
        ));
    }
    Ok(())
}
