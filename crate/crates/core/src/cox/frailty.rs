//! Shared gamma frailty on the AG layout.
//!
//! For a fixed frailty variance the coefficients, Breslow baseline and
//! per-subject frailty predictions are found by EM, where the M-step is an
//! ordinary (penalized) Cox fit with log-frailty offsets. The variance is then
//! chosen by maximizing the marginal (profile) likelihood over a grid refined
//! by golden-section search.

use nalgebra::DVector;
use statrs::function::gamma::ln_gamma;

use super::likelihood::CoxProblem;
use super::{
    bar, fit_with_offsets, require_unrestricted, solve, FitConfig, FitResult, FrailtyVariance,
    Penalty, ReasonCode,
};
use crate::data::ModelLayout;
use crate::error::Result;

const VARIANCE_GRID: [f64; 8] = [0.0, 0.02, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0];
const GOLDEN_STEPS: usize = 12;
const EM_MAX_ITER: usize = 150;
const EM_TOL: f64 = 1e-6;
/// Variance estimates below this are reported as a collapse to AG.
const DEGENERATE_VARIANCE: f64 = 1e-3;

#[derive(Debug, Clone)]
struct EmState {
    beta: DVector<f64>,
    offsets: Vec<f64>,
    marginal: f64,
    reason: ReasonCode,
    iterations: usize,
}

fn penalty_value(penalty: Penalty, beta: &DVector<f64>) -> f64 {
    match penalty {
        Penalty::None | Penalty::Bar { .. } => 0.0,
        Penalty::Ridge { s } => s * beta.norm_squared(),
        Penalty::Lasso { s } => s * beta.iter().map(|b| b.abs()).sum::<f64>(),
    }
}

/// Penalty used while profiling the variance. BAR is profiled under its ridge
/// start; its selection runs once at the chosen variance.
fn profile_penalty(penalty: Penalty) -> Penalty {
    match penalty {
        Penalty::Bar { xi, .. } if xi > 0.0 => Penalty::Ridge { s: xi },
        Penalty::Bar { .. } => Penalty::None,
        other => other,
    }
}

/// Marginal log-likelihood of the gamma frailty model at `variance`, given the
/// Breslow fit of `problem` at `beta` (offsets already set).
fn marginal_loglik(problem: &CoxProblem, beta: &DVector<f64>, variance: f64) -> Result<f64> {
    let base = problem.baseline(beta)?;
    let eta = problem.linear_predictor(beta);
    let counts = problem.event_counts();
    let mut ll = base.log_jump_sum + counts.iter().zip(eta.iter()).map(|(d, e)| d * e).sum::<f64>();
    if variance == 0.0 {
        ll -= base.cumulative.iter().sum::<f64>();
    } else {
        let inv = 1.0 / variance;
        for (&d, &h) in counts.iter().zip(&base.cumulative) {
            ll += ln_gamma(inv + d) - ln_gamma(inv) + d * variance.ln()
                - (inv + d) * (variance * h).ln_1p();
        }
    }
    Ok(ll)
}

fn em(
    problem: &mut CoxProblem,
    variance: f64,
    penalty: Penalty,
    warm: Option<&EmState>,
    config: &FitConfig,
) -> Result<EmState> {
    let n = problem.n_subjects();
    let mut beta = warm.map_or_else(|| DVector::zeros(problem.dim()), |w| w.beta.clone());
    let mut offsets = if variance == 0.0 {
        vec![0.0; n]
    } else {
        warm.map_or_else(|| vec![0.0; n], |w| w.offsets.clone())
    };
    let counts = problem.event_counts().to_vec();
    let mut iterations = 0;
    let mut reason = ReasonCode::MaxIter;

    for it in 0..EM_MAX_ITER {
        problem.set_offsets(&offsets)?;
        let sol = solve(problem, penalty, beta.clone(), config)?;
        iterations = it + 1;
        if !sol.converged() {
            let marginal = f64::NEG_INFINITY;
            return Ok(EmState {
                beta: sol.beta,
                offsets,
                marginal,
                reason: sol.reason,
                iterations,
            });
        }
        let beta_change = (&sol.beta - &beta).amax();
        beta = sol.beta;
        if variance == 0.0 {
            reason = ReasonCode::Converged;
            break;
        }
        let base = problem.baseline(&beta)?;
        let inv = 1.0 / variance;
        let next: Vec<f64> = counts
            .iter()
            .zip(&base.cumulative)
            .map(|(&d, &h)| ((inv + d) / (inv + h)).ln())
            .collect();
        let offset_change = next
            .iter()
            .zip(&offsets)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        offsets = next;
        if beta_change < EM_TOL && offset_change < EM_TOL {
            reason = ReasonCode::Converged;
            break;
        }
    }
    // the marginal likelihood uses the M-step baseline under the final offsets
    problem.set_offsets(&offsets)?;
    let marginal = marginal_loglik(problem, &beta, variance)? - 0.5 * penalty_value(penalty, &beta);
    Ok(EmState {
        beta,
        offsets,
        marginal,
        reason,
        iterations,
    })
}

/// Penalized marginal log-likelihood profiled at a fixed frailty variance.
pub fn frailty_profile_loglik(layout: &ModelLayout, variance: f64, config: &FitConfig) -> Result<f64> {
    require_unrestricted(layout)?;
    let mut problem = CoxProblem::new(layout, None)?;
    Ok(em(&mut problem, variance, profile_penalty(config.penalty), None, config)?.marginal)
}

/// Gamma-frailty fit. The variance is estimated unless `config.frailty` fixes it.
pub fn fit_frailty(layout: &ModelLayout, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    require_unrestricted(layout)?;
    let p = layout.p;
    let penalty = profile_penalty(config.penalty);
    let mut problem = CoxProblem::new(layout, None)?;

    let null = em(&mut problem, 0.0, penalty, None, config)?;
    if null.reason != ReasonCode::Converged {
        let mut result = FitResult::new(
            null.beta.iter().cloned().collect(),
            config.penalty,
            null.reason,
            null.iterations,
            null.marginal,
        );
        result.frailty_variance = Some(0.0);
        return Ok(result);
    }

    let (variance, state) = match config.frailty {
        FrailtyVariance::Fixed(v) if v == 0.0 => (0.0, null),
        FrailtyVariance::Fixed(v) => {
            let s = em(&mut problem, v, penalty, Some(&null), config)?;
            (v, s)
        }
        FrailtyVariance::Estimate { max } => maximize_profile(&mut problem, penalty, null, max, config)?,
    };

    let degenerate = variance < DEGENERATE_VARIANCE;
    let mut result = if degenerate {
        let mut r = fit_with_offsets(layout, None, config)?;
        r.frailty_variance = Some(0.0);
        r.frailty_degenerate = true;
        r
    } else {
        let mut r = match config.penalty {
            Penalty::Bar { xi, theta } => {
                bar::fit_bar_with_offsets(layout, Some(&state.offsets), xi, theta, config)?
            }
            _ => {
                let mut r = FitResult::new(
                    state.beta.iter().cloned().collect(),
                    config.penalty,
                    state.reason,
                    state.iterations,
                    state.marginal,
                );
                r.subject_offsets = Some(state.offsets.clone());
                r
            }
        };
        if r.converged && state.reason != ReasonCode::Converged {
            r.converged = false;
            r.reason = state.reason;
        }
        r.final_loglik = state.marginal;
        r.frailty_variance = Some(variance);
        r
    };
    debug_assert_eq!(result.beta_hat.len(), p);
    result.penalty = config.penalty;
    Ok(result)
}

fn maximize_profile(
    problem: &mut CoxProblem,
    penalty: Penalty,
    null: EmState,
    max: f64,
    config: &FitConfig,
) -> Result<(f64, EmState)> {
    let mut grid: Vec<f64> = VARIANCE_GRID.iter().cloned().filter(|&v| v <= max).collect();
    if max > 0.0 && grid.last() != Some(&max) {
        grid.push(max);
    }
    let mut states: Vec<EmState> = vec![null];
    for &v in &grid[1..] {
        let warm = states.last().cloned();
        states.push(em(problem, v, penalty, warm.as_ref(), config)?);
        // EM slows down as the variance grows; stop once the profile has
        // fallen twice in a row
        let k = states.len();
        if k >= 3 && states[k - 1].marginal < states[k - 2].marginal && states[k - 2].marginal < states[k - 3].marginal {
            break;
        }
    }
    grid.truncate(states.len());
    let best = (0..states.len())
        .max_by(|&a, &b| states[a].marginal.total_cmp(&states[b].marginal))
        .unwrap_or(0);
    if best == 0 || grid.len() < 2 {
        return Ok((0.0, states.swap_remove(0)));
    }

    let mut lo = grid[best - 1];
    let mut hi = if best + 1 < grid.len() { grid[best + 1] } else { grid[best] };
    let mut best_v = grid[best];
    let mut best_state = states[best].clone();
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - ratio * (hi - lo);
    let mut b = lo + ratio * (hi - lo);
    let mut fa = em(problem, a, penalty, Some(&best_state), config)?;
    let mut fb = em(problem, b, penalty, Some(&best_state), config)?;
    for _ in 0..GOLDEN_STEPS {
        if fa.marginal >= fb.marginal {
            hi = b;
            b = a;
            fb = fa;
            a = hi - ratio * (hi - lo);
            fa = em(problem, a, penalty, Some(&fb), config)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + ratio * (hi - lo);
            fb = em(problem, b, penalty, Some(&fa), config)?;
        }
    }
    for (v, s) in [(a, fa), (b, fb)] {
        if s.marginal > best_state.marginal {
            best_v = v;
            best_state = s;
        }
    }
    Ok((best_v, best_state))
}
