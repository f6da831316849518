//! Breslow partial likelihood on counting-process layouts.
//!
//! Risk sets follow the `(start, stop]` convention: a row is at risk at `t`
//! when `start < t <= stop`, within its own stratum. The risk-set membership
//! schedule does not depend on the coefficients, so it is built once per
//! layout and replayed on every evaluation.

use nalgebra::{DMatrix, DVector};

use crate::data::ModelLayout;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
struct StratumPlan {
    /// Event counts per distinct event time, times in descending order.
    counts: Vec<f64>,
    /// Net at-risk multiplicity changes per subject applied before each time.
    schedule: Vec<Vec<(usize, f64)>>,
    /// `(subject, first, last)` event-time index range covered by each row.
    row_spans: Vec<(usize, usize, usize)>,
    /// `(subject, time index)` of every event row.
    event_rows: Vec<(usize, usize)>,
}

/// Precomputed partial-likelihood problem over a subset of covariate columns.
#[derive(Debug, Clone)]
pub struct CoxProblem {
    x: DMatrix<f64>,
    offsets: Vec<f64>,
    event_counts: Vec<f64>,
    strata: Vec<StratumPlan>,
    columns: Vec<usize>,
}

/// Partial log-likelihood with its first two derivatives.
#[derive(Debug, Clone)]
pub struct Derivatives {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

/// Breslow baseline hazard increments and per-subject cumulative intensities.
#[derive(Debug, Clone)]
pub struct BaselineFit {
    /// `sum over event rows of log(dLambda(t))`.
    pub log_jump_sum: f64,
    /// Per subject, `exp(eta_i) * sum of dLambda over its at-risk intervals`,
    /// without the subject's offset.
    pub cumulative: Vec<f64>,
}

impl CoxProblem {
    pub fn new(layout: &ModelLayout, offsets: Option<&[f64]>) -> Result<Self> {
        let all: Vec<usize> = (0..layout.p).collect();
        Self::with_columns(layout, offsets, &all)
    }

    pub fn with_columns(
        layout: &ModelLayout,
        offsets: Option<&[f64]>,
        columns: &[usize],
    ) -> Result<Self> {
        if layout.rows.is_empty() {
            return Err(Error::InvalidData("layout has no rows".into()));
        }
        let n = layout.n_subjects();
        if let Some(off) = offsets {
            if off.len() != n {
                return Err(Error::InvalidData(format!(
                    "{} offsets for {} subjects",
                    off.len(),
                    n
                )));
            }
        }
        if let Some(&j) = columns.iter().find(|&&j| j >= layout.p) {
            return Err(Error::InvalidData(format!("column {j} out of range")));
        }
        let x = DMatrix::from_fn(n, columns.len(), |s, k| {
            layout.covariates[s * layout.p + columns[k]]
        });

        let mut event_counts = vec![0.0; n];
        let n_strata = layout.n_strata() as usize;
        let mut by_stratum: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
        for (i, row) in layout.rows.iter().enumerate() {
            if !(row.start < row.stop) {
                return Err(Error::InvalidData(format!(
                    "row for subject {} has start {} >= stop {}",
                    row.subject_id, row.start, row.stop
                )));
            }
            if row.stratum == 0 {
                return Err(Error::InvalidData("strata are numbered from 1".into()));
            }
            by_stratum[row.stratum as usize - 1].push(i);
            if row.status {
                event_counts[row.subject] += 1.0;
            }
        }

        let strata = by_stratum
            .iter()
            .filter(|rows| !rows.is_empty())
            .map(|rows| plan_stratum(layout, rows))
            .collect();

        Ok(Self {
            x,
            offsets: offsets.map_or_else(|| vec![0.0; n], <[f64]>::to_vec),
            event_counts,
            strata,
            columns: columns.to_vec(),
        })
    }

    /// Replaces the per-subject offsets.
    pub fn set_offsets(&mut self, offsets: &[f64]) -> Result<()> {
        if offsets.len() != self.n_subjects() {
            return Err(Error::InvalidData(format!(
                "{} offsets for {} subjects",
                offsets.len(),
                self.n_subjects()
            )));
        }
        self.offsets.copy_from_slice(offsets);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.x.ncols()
    }

    pub fn columns(&self) -> &[usize] {
        &self.columns
    }

    pub fn n_subjects(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_events(&self) -> f64 {
        self.event_counts.iter().sum()
    }

    pub fn event_counts(&self) -> &[f64] {
        &self.event_counts
    }

    pub fn linear_predictor(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.x * beta
    }

    fn check_beta(&self, beta: &DVector<f64>) -> Result<()> {
        if beta.len() != self.dim() {
            return Err(Error::InvalidData(format!(
                "coefficient vector has length {}, expected {}",
                beta.len(),
                self.dim()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Numerical("non-finite coefficient".into()));
        }
        Ok(())
    }

    /// Centered weights `exp(eta + offset - c)` and the centering constant.
    fn weights(&self, eta: &DVector<f64>) -> (Vec<f64>, f64) {
        let shifted: Vec<f64> = eta
            .iter()
            .zip(&self.offsets)
            .map(|(e, o)| e + o)
            .collect();
        let c = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (shifted.iter().map(|v| (v - c).exp()).collect(), c)
    }

    pub fn loglik(&self, beta: &DVector<f64>) -> Result<f64> {
        self.check_beta(beta)?;
        let eta = self.linear_predictor(beta);
        let (w, c) = self.weights(&eta);
        let mut ll: f64 = self
            .event_counts
            .iter()
            .zip(eta.iter().zip(&self.offsets))
            .map(|(d, (e, o))| d * (e + o))
            .sum();
        for plan in &self.strata {
            sweep(plan, &w, None, |e, s0, _| {
                ll -= plan.counts[e] * (checked_log(s0)? + c);
                Ok(())
            })?;
        }
        finite(ll, "partial log-likelihood")
    }

    pub fn derivatives(&self, beta: &DVector<f64>, with_hessian: bool) -> Result<Derivatives> {
        self.check_beta(beta)?;
        let q = self.dim();
        let n = self.n_subjects();
        let eta = self.linear_predictor(beta);
        let (w, c) = self.weights(&eta);

        let mut ll: f64 = self
            .event_counts
            .iter()
            .zip(eta.iter().zip(&self.offsets))
            .map(|(d, (e, o))| d * (e + o))
            .sum();
        let ev = DVector::from_column_slice(&self.event_counts);
        let mut gradient = self.x.tr_mul(&ev);

        let total_times: usize = self.strata.iter().map(|p| p.counts.len()).sum();
        // rows: sqrt(d_t) * mean covariate of the risk set at t
        let mut means = if with_hessian {
            DMatrix::zeros(total_times, q)
        } else {
            DMatrix::zeros(0, 0)
        };
        let mut subject_weight = vec![0.0; n];
        let mut time_offset = 0;

        for plan in &self.strata {
            let n_times = plan.counts.len();
            let mut hazard = Vec::with_capacity(n_times);
            sweep(plan, &w, Some(&self.x), |e, s0, s1| {
                let d = plan.counts[e];
                ll -= d * (checked_log(s0)? + c);
                let mean = s1.expect("first moment") / s0;
                gradient.axpy(-d, &mean, 1.0);
                if with_hessian {
                    let scale = d.sqrt();
                    for k in 0..q {
                        means[(time_offset + e, k)] = scale * mean[k];
                    }
                }
                hazard.push(d / s0);
                Ok(())
            })?;
            if with_hessian {
                let sums = RangeSum::new(&hazard);
                for &(s, lo, hi) in &plan.row_spans {
                    subject_weight[s] += w[s] * sums.sum(lo, hi);
                }
            }
            time_offset += n_times;
        }

        finite(ll, "partial log-likelihood")?;
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical("non-finite score vector".into()));
        }

        let hessian = if with_hessian {
            let mut scaled = self.x.clone();
            for (s, mut row) in scaled.row_iter_mut().enumerate() {
                row *= subject_weight[s].sqrt();
            }
            let mut h = means.tr_mul(&means);
            h -= scaled.tr_mul(&scaled);
            if h.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("non-finite information matrix".into()));
            }
            Some(h)
        } else {
            None
        };

        Ok(Derivatives {
            loglik: ll,
            gradient,
            hessian,
        })
    }

    /// Breslow baseline at `beta` with the problem's offsets.
    pub fn baseline(&self, beta: &DVector<f64>) -> Result<BaselineFit> {
        self.check_beta(beta)?;
        let eta = self.linear_predictor(beta);
        let (w, c) = self.weights(&eta);
        let mut cumulative = vec![0.0; self.n_subjects()];
        let mut log_jump_sum = 0.0;
        for plan in &self.strata {
            let mut hazard = Vec::with_capacity(plan.counts.len());
            sweep(plan, &w, None, |e, s0, _| {
                checked_log(s0)?;
                // true-scale jump d / (S0 * e^c)
                hazard.push(plan.counts[e] / s0);
                Ok(())
            })?;
            for &(_, e) in &plan.event_rows {
                log_jump_sum += hazard[e].ln() - c;
            }
            let sums = RangeSum::new(&hazard);
            for &(s, lo, hi) in &plan.row_spans {
                // w_s * jump_c = exp(eta + off) * jump_true
                cumulative[s] += w[s] * sums.sum(lo, hi);
            }
        }
        for (s, h) in cumulative.iter_mut().enumerate() {
            *h *= (-self.offsets[s]).exp();
        }
        finite(log_jump_sum, "baseline hazard")?;
        Ok(BaselineFit {
            log_jump_sum,
            cumulative,
        })
    }
}

/// Relative size below which a running risk-set sum is rebuilt from scratch.
const CANCELLATION_RATIO: f64 = 1e-8;

/// Replays a stratum's at-risk schedule, calling `visit(time index, S0, S1)`
/// at each event time. Departures are subtracted from running sums; when they
/// cancel most of the accumulated weight the sums are rebuilt from the
/// current membership.
fn sweep<F>(plan: &StratumPlan, w: &[f64], x: Option<&DMatrix<f64>>, mut visit: F) -> Result<()>
where
    F: FnMut(usize, f64, Option<&DVector<f64>>) -> Result<()>,
{
    let mut s0 = 0.0;
    let mut s1 = x.map(|x| DVector::zeros(x.ncols()));
    let mut members: Vec<(usize, f64)> = Vec::new();
    let mut peak: f64 = 0.0;
    for (e, updates) in plan.schedule.iter().enumerate() {
        let mut departed = false;
        for &(s, delta) in updates {
            let dw = delta * w[s];
            s0 += dw;
            if let (Some(acc), Some(x)) = (s1.as_mut(), x) {
                for (k, a) in acc.iter_mut().enumerate() {
                    *a += dw * x[(s, k)];
                }
            }
            departed |= delta < 0.0;
            match members.binary_search_by_key(&s, |m| m.0) {
                Ok(i) => members[i].1 += delta,
                Err(i) => members.insert(i, (s, delta)),
            }
        }
        peak = peak.max(s0);
        if departed && s0 < CANCELLATION_RATIO * peak {
            members.retain(|m| m.1 != 0.0);
            s0 = members.iter().map(|&(s, m)| m * w[s]).sum();
            if let (Some(acc), Some(x)) = (s1.as_mut(), x) {
                acc.fill(0.0);
                for &(s, m) in &members {
                    for (k, a) in acc.iter_mut().enumerate() {
                        *a += m * w[s] * x[(s, k)];
                    }
                }
            }
            peak = s0;
        }
        visit(e, s0, s1.as_ref())?;
    }
    Ok(())
}

fn plan_stratum(layout: &ModelLayout, rows: &[usize]) -> StratumPlan {
    let mut times: Vec<f64> = rows
        .iter()
        .map(|&i| &layout.rows[i])
        .filter(|r| r.status)
        .map(|r| r.stop)
        .collect();
    times.sort_by(|a, b| b.total_cmp(a));
    let mut distinct: Vec<f64> = Vec::new();
    let mut counts: Vec<f64> = Vec::new();
    for t in times {
        if distinct.last() == Some(&t) {
            *counts.last_mut().unwrap() += 1.0;
        } else {
            distinct.push(t);
            counts.push(1.0);
        }
    }
    let n_times = distinct.len();
    let mut deltas: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n_times + 1];
    let mut row_spans = Vec::new();
    let mut event_rows = Vec::new();
    for &i in rows {
        let row = &layout.rows[i];
        // descending times: at risk for indices first..last
        let first = distinct.partition_point(|&t| t > row.stop);
        let last = distinct.partition_point(|&t| t > row.start);
        if first < last {
            deltas[first].push((row.subject, 1.0));
            deltas[last].push((row.subject, -1.0));
            row_spans.push((row.subject, first, last));
        }
        if row.status {
            event_rows.push((row.subject, first));
        }
    }
    deltas.truncate(n_times);
    let schedule = deltas
        .into_iter()
        .map(|mut d| {
            d.sort_by_key(|&(s, _)| s);
            let mut merged: Vec<(usize, f64)> = Vec::with_capacity(d.len());
            for (s, v) in d {
                match merged.last_mut() {
                    Some(last) if last.0 == s => last.1 += v,
                    _ => merged.push((s, v)),
                }
            }
            merged.retain(|&(_, v)| v != 0.0);
            merged
        })
        .collect();
    StratumPlan {
        counts,
        schedule,
        row_spans,
        event_rows,
    }
}

/// Range sums of non-negative values. Each query adds O(log n) stored
/// partial sums, so no subtraction happens and a huge hazard at one time
/// cannot swamp the sums over ranges that exclude it.
struct RangeSum {
    tree: Vec<f64>,
    n: usize,
}

impl RangeSum {
    fn new(values: &[f64]) -> Self {
        let n = values.len();
        let mut tree = vec![0.0; 2 * n];
        tree[n..].copy_from_slice(values);
        for i in (1..n).rev() {
            tree[i] = tree[2 * i] + tree[2 * i + 1];
        }
        Self { tree, n }
    }

    /// Sum over `lo..hi`.
    fn sum(&self, lo: usize, hi: usize) -> f64 {
        let (mut l, mut r) = (lo + self.n, hi + self.n);
        let mut acc = 0.0;
        while l < r {
            if l & 1 == 1 {
                acc += self.tree[l];
                l += 1;
            }
            if r & 1 == 1 {
                r -= 1;
                acc += self.tree[r];
            }
            l /= 2;
            r /= 2;
        }
        acc
    }
}

fn checked_log(s0: f64) -> Result<f64> {
    if s0 > 0.0 && s0.is_finite() {
        Ok(s0.ln())
    } else {
        Err(Error::Numerical(format!(
            "risk-set weight sum {s0} is not positive and finite"
        )))
    }
}

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numerical(format!("{what} is not finite ({v})")))
    }
}

/// Partial log-likelihood of `layout` at `beta`.
pub fn partial_loglik(layout: &ModelLayout, beta: &[f64]) -> Result<f64> {
    CoxProblem::new(layout, None)?.loglik(&DVector::from_column_slice(beta))
}

/// Score vector and Hessian of the partial log-likelihood at `beta`. The
/// Hessian is the negated observed information.
pub fn gradient_hessian(
    layout: &ModelLayout,
    beta: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = CoxProblem::new(layout, None)?.derivatives(&DVector::from_column_slice(beta), true)?;
    Ok((d.gradient, d.hessian.expect("hessian requested")))
}
