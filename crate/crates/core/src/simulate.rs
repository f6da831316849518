//! Synthetic recurrent-event data: AR(1)-correlated Gaussian covariates, a
//! Weibull baseline hazard with a multiplicative gamma frailty, event times by
//! recursive inversion of the conditional cumulative hazard, and censoring of
//! a fixed share of subjects.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{RecurrentDataset, Subject};
use crate::error::{Error, Result};
use crate::rng::{self, tag, Stream};

/// Administrative follow-up horizon. With the default scenario (p = 25,
/// sparse rate 0.25, unit-mean frailty, 20% censoring) subjects see about
/// 2.5 events on average.
pub const DEFAULT_FOLLOW_UP: f64 = 1.5;

/// How the single frailty parameter is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrailtyReading {
    /// Gamma with mean 1 and the given variance (shape `1/v`, scale `v`).
    #[default]
    Variance,
    /// Gamma with the given shape and scale `1/shape` (mean 1, variance `1/shape`).
    Shape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub n: usize,
    pub p: usize,
    pub sparse_rate: f64,
    pub censoring_rate: f64,
    pub rho: f64,
    pub covariate_mean: f64,
    pub beta_active: f64,
    pub weibull_scale: f64,
    pub weibull_shape: f64,
    pub frailty_variance: f64,
    pub frailty_reading: FrailtyReading,
    pub follow_up: f64,
    /// Follow-up of a subject stops at its `max_events`-th event when set.
    pub max_events: Option<usize>,
    pub replicates: usize,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            n: 100,
            p: 25,
            sparse_rate: 0.25,
            censoring_rate: 0.2,
            rho: 0.7,
            covariate_mean: 0.0,
            beta_active: 0.15,
            weibull_scale: 1.0,
            weibull_shape: 2.0,
            frailty_variance: 0.25,
            frailty_reading: FrailtyReading::Variance,
            follow_up: DEFAULT_FOLLOW_UP,
            max_events: None,
            replicates: 100,
            seed: 20_240_101,
        }
    }
}

impl ScenarioSpec {
    /// Number of active covariates, `round(sparse_rate * p)`.
    pub fn n_active(&self) -> usize {
        (self.sparse_rate * self.p as f64).round() as usize
    }

    /// Short identifier such as `p25-sr25`.
    pub fn label(&self) -> String {
        format!("p{}-sr{}", self.p, (self.sparse_rate * 100.0).round() as i64)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.n < 2 {
            return fail(format!("n must be >= 2, got {}", self.n));
        }
        if self.p < 1 {
            return fail("p must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.sparse_rate) {
            return fail(format!("sparse_rate {} outside [0, 1]", self.sparse_rate));
        }
        if !(0.0..1.0).contains(&self.censoring_rate) {
            return fail(format!("censoring_rate {} outside [0, 1)", self.censoring_rate));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return fail(format!("rho {} outside (0, 1)", self.rho));
        }
        if !(self.weibull_scale > 0.0 && self.weibull_shape > 0.0) {
            return fail("Weibull scale and shape must be > 0".into());
        }
        if !(self.frailty_variance >= 0.0) {
            return fail("frailty_variance must be >= 0".into());
        }
        if !(self.follow_up > 0.0 && self.follow_up.is_finite()) {
            return fail("follow_up must be > 0".into());
        }
        if self.max_events == Some(0) {
            return fail("max_events must be >= 1 when set".into());
        }
        if self.replicates < 1 {
            return fail("replicates must be >= 1".into());
        }
        if !self.covariate_mean.is_finite() || !self.beta_active.is_finite() {
            return fail("covariate_mean and beta_active must be finite".into());
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario spec serializes")
    }
}

/// Row-major `n × p` covariate draws.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateMatrix(DMatrix<f64>);

impl CovariateMatrix {
    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.0.row(i).iter().cloned().collect()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// AR(1) correlation matrix, `rho^|j-k|`.
pub fn ar1_correlation(p: usize, rho: f64) -> DMatrix<f64> {
    DMatrix::from_fn(p, p, |j, k| rho.powi((j as i32 - k as i32).abs()))
}

pub fn sample_covariates(
    n: usize,
    p: usize,
    mean: f64,
    rho: f64,
    rng: &mut Stream,
) -> Result<CovariateMatrix> {
    if n < 2 || p < 1 || !(rho > 0.0 && rho < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "covariate sampling needs n >= 2, p >= 1, 0 < rho < 1 (got {n}, {p}, {rho})"
        )));
    }
    let chol = ar1_correlation(p, rho)
        .cholesky()
        .ok_or_else(|| Error::Numerical("AR(1) correlation matrix is not positive definite".into()))?;
    let l = chol.l();
    let z = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    // each row x = mean + L z
    let mut x = z * l.transpose();
    x.add_scalar_mut(mean);
    Ok(CovariateMatrix(x))
}

/// `Lambda(t) = z * alpha * t^gamma * exp(eta)`.
pub fn cumulative_hazard(t: f64, eta: f64, spec: &ScenarioSpec, z: f64) -> f64 {
    z * spec.weibull_scale * t.powf(spec.weibull_shape) * eta.exp()
}

/// Solves `Lambda(t_prev + w) - Lambda(t_prev) = u` for the gap `w`.
pub fn invert_conditional_hazard(
    u: f64,
    t_prev: f64,
    eta: f64,
    spec: &ScenarioSpec,
    z: f64,
) -> Result<f64> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::InvalidData(format!("hazard increment must be > 0, got {u}")));
    }
    if !(t_prev >= 0.0) {
        return Err(Error::InvalidData(format!("t_prev must be >= 0, got {t_prev}")));
    }
    let rate = z * spec.weibull_scale * eta.exp();
    let gamma = spec.weibull_shape;
    let w = if t_prev == 0.0 {
        (u / rate).powf(1.0 / gamma)
    } else {
        // (t^g + u/rate)^(1/g) - t without cancellation
        let r = u / (rate * t_prev.powf(gamma));
        t_prev * (r.ln_1p() / gamma).exp_m1()
    };
    if w > 0.0 && w.is_finite() {
        Ok(w)
    } else {
        Err(Error::Numerical(format!(
            "gap time {w} from u={u}, t_prev={t_prev} is not positive and finite"
        )))
    }
}

/// Uniform draw on the open interval (0, 1).
fn open_unit(rng: &mut Stream) -> f64 {
    loop {
        let e: f64 = rng.random();
        if e > 0.0 && e < 1.0 {
            return e;
        }
    }
}

/// Recurrent event times in `(0, follow_up]`, at most `spec.max_events`.
pub fn sample_event_times(eta: f64, spec: &ScenarioSpec, z: f64, rng: &mut Stream) -> Result<Vec<f64>> {
    let mut times = Vec::new();
    let mut t = 0.0;
    loop {
        if spec.max_events == Some(times.len()) {
            return Ok(times);
        }
        let u = -open_unit(rng).ln();
        let next = t + invert_conditional_hazard(u, t, eta, spec, z)?;
        if next > spec.follow_up {
            return Ok(times);
        }
        // gaps below the spacing of doubles collapse onto the previous time
        if next > t {
            times.push(next);
        }
        t = next;
    }
}

/// Censors exactly `round(rate * n)` randomly chosen subjects at a uniform
/// time in `(0, tau)`. A follow-up that already ends earlier is kept. Returns
/// the subjects and which of them were drawn for censoring.
pub fn apply_censoring(
    mut subjects: Vec<Subject>,
    rate: f64,
    tau: f64,
    rng: &mut Stream,
) -> Result<(Vec<Subject>, Vec<bool>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidConfig(format!("censoring rate {rate} outside [0, 1)")));
    }
    let n = subjects.len();
    let k = (rate * n as f64).round() as usize;
    let mut drawn = vec![false; n];
    let mut chosen = index::sample(rng, n, k).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        drawn[i] = true;
    }
    for (subject, &censored) in subjects.iter_mut().zip(&drawn) {
        if censored {
            let c = tau * open_unit(rng);
            if c < subject.censoring_time {
                subject.event_times.retain(|&t| t <= c);
                subject.censoring_time = c;
            }
        }
    }
    Ok((subjects, drawn))
}

/// The data-generating truth behind one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueModel {
    pub beta: Vec<f64>,
    pub frailty_draws: Vec<f64>,
    /// Subjects drawn for random censoring.
    pub censored: Vec<bool>,
}

pub fn true_beta(spec: &ScenarioSpec) -> Vec<f64> {
    let m = spec.n_active();
    (0..spec.p).map(|j| if j < m { spec.beta_active } else { 0.0 }).collect()
}

fn sample_frailty(spec: &ScenarioSpec, rng: &mut Stream) -> Result<Vec<f64>> {
    let v = spec.frailty_variance;
    if v == 0.0 {
        return Ok(vec![1.0; spec.n]);
    }
    let (shape, scale) = match spec.frailty_reading {
        FrailtyReading::Variance => (1.0 / v, v),
        FrailtyReading::Shape => (v, 1.0 / v),
    };
    let gamma = Gamma::new(shape, scale)
        .map_err(|e| Error::InvalidConfig(format!("frailty distribution: {e}")))?;
    Ok((0..spec.n)
        .map(|_| loop {
            let z: f64 = gamma.sample(rng);
            if z > 0.0 {
                break z;
            }
        })
        .collect())
}

/// One replicate of `spec`, deterministic in `(spec.seed, replicate_index)`.
pub fn generate_scenario(spec: &ScenarioSpec, replicate_index: u64) -> Result<(RecurrentDataset, TrueModel)> {
    spec.validate()?;
    let stream = |t: u64| rng::substream(spec.seed, &[tag::SCENARIO, replicate_index, t]);
    let x = sample_covariates(
        spec.n,
        spec.p,
        spec.covariate_mean,
        spec.rho,
        &mut stream(tag::COVARIATES),
    )?;
    let beta = true_beta(spec);
    let frailty = sample_frailty(spec, &mut stream(tag::FRAILTY))?;

    let mut event_rng = stream(tag::EVENTS);
    let mut subjects = Vec::with_capacity(spec.n);
    for i in 0..spec.n {
        let covariates = x.row(i);
        let eta: f64 = covariates.iter().zip(&beta).map(|(a, b)| a * b).sum();
        let events = sample_event_times(eta, spec, frailty[i], &mut event_rng)?;
        let censoring_time = match (spec.max_events, events.last()) {
            (Some(cap), Some(&last)) if events.len() == cap => last,
            _ => spec.follow_up,
        };
        subjects.push(Subject {
            id: i,
            event_times: events,
            censoring_time,
            covariates,
        });
    }
    let (subjects, censored) = apply_censoring(
        subjects,
        spec.censoring_rate,
        spec.follow_up,
        &mut stream(tag::CENSORING),
    )?;
    let mask = beta.iter().map(|&b| b != 0.0).collect();
    let data = RecurrentDataset::new(subjects, spec.p, Some(mask))?;
    Ok((
        data,
        TrueModel {
            beta,
            frailty_draws: frailty,
            censored,
        },
    ))
}
