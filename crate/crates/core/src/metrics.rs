//! Concordance and variable-selection metrics for recurrent-event models.

use serde::{Deserialize, Serialize};

use crate::data::RecurrentDataset;
use crate::error::{Error, Result};

/// Per-subject risk scores; larger means higher risk.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskScores(Vec<f64>);

impl RiskScores {
    pub const HIGHER_IS_RISKIER: bool = true;

    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("risk scores must be finite".into()));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Credit given to a usable pair whose scores tie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieCredit {
    #[default]
    Zero,
    Half,
}

impl TieCredit {
    fn weight(self) -> f64 {
        match self {
            TieCredit::Zero => 0.0,
            TieCredit::Half => 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Concordance {
    /// Absent when no pair is usable.
    pub value: Option<f64>,
    pub pairs: u64,
}

impl Concordance {
    fn from_counts(concordant: u64, tied: u64, pairs: u64, ties: TieCredit) -> Self {
        let value = (pairs > 0)
            .then(|| (concordant as f64 + ties.weight() * tied as f64) / pairs as f64);
        Self { value, pairs }
    }
}

/// Fenwick tree over score ranks.
struct RankCounter {
    tree: Vec<u64>,
}

impl RankCounter {
    fn new(n: usize) -> Self {
        Self { tree: vec![0; n + 1] }
    }

    fn insert(&mut self, rank: usize) {
        let mut i = rank + 1;
        while i < self.tree.len() {
            self.tree[i] += 1;
            i += i & i.wrapping_neg();
        }
    }

    /// Number of inserted ranks `< rank`.
    fn below(&self, rank: usize) -> u64 {
        let mut i = rank;
        let mut acc = 0;
        while i > 0 {
            acc += self.tree[i];
            i -= i & i.wrapping_neg();
        }
        acc
    }
}

/// Dense ranks of `values` (equal values share a rank).
fn dense_ranks(values: &[f64]) -> (Vec<usize>, usize) {
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let ranks = values
        .iter()
        .map(|v| sorted.partition_point(|s| s < v))
        .collect();
    (ranks, sorted.len())
}

/// Harrell's C over ordered pairs `(i, j)` with `T_i > T_j` and an observed
/// event for `j`; concordant when `score_i < score_j`.
pub fn harrell_c(times: &[f64], events: &[bool], scores: &RiskScores, ties: TieCredit) -> Result<Concordance> {
    let n = times.len();
    if events.len() != n || scores.len() != n {
        return Err(Error::InvalidData(format!(
            "length mismatch: {} times, {} events, {} scores",
            n,
            events.len(),
            scores.len()
        )));
    }
    if n < 2 {
        return Err(Error::InvalidData("concordance needs at least 2 subjects".into()));
    }
    let (ranks, n_ranks) = dense_ranks(scores.values());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| times[b].total_cmp(&times[a]));

    let mut counter = RankCounter::new(n_ranks);
    let mut inserted = 0u64;
    let (mut concordant, mut tied, mut pairs) = (0u64, 0u64, 0u64);
    let mut start = 0;
    while start < n {
        let t = times[order[start]];
        let mut end = start;
        while end < n && times[order[end]] == t {
            end += 1;
        }
        // everything already inserted has a strictly later time
        for &j in &order[start..end] {
            if events[j] {
                let below = counter.below(ranks[j]);
                let not_above = counter.below(ranks[j] + 1);
                pairs += inserted;
                concordant += below;
                tied += not_above - below;
            }
        }
        for &j in &order[start..end] {
            counter.insert(ranks[j]);
            inserted += 1;
        }
        start = end;
    }
    Ok(Concordance::from_counts(concordant, tied, pairs, ties))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerEventConcordance {
    pub k: usize,
    pub value: Option<f64>,
    pub pairs: u64,
}

/// Harrell's C for each event order `k`: subjects with at least `k - 1`
/// events enter, timed at their `k`-th event (observed) or end of follow-up
/// (censored), on the calendar scale.
pub fn harrell_per_event(
    data: &RecurrentDataset,
    scores: &RiskScores,
    ties: TieCredit,
) -> Result<Vec<PerEventConcordance>> {
    if scores.len() != data.n() {
        return Err(Error::InvalidData("one score per subject required".into()));
    }
    let mut out = Vec::new();
    for k in 1..=data.max_events() {
        let mut times = Vec::new();
        let mut events = Vec::new();
        let mut sub_scores = Vec::new();
        for (s, &score) in data.subjects().iter().zip(scores.values()) {
            if s.n_events() + 1 < k {
                continue;
            }
            match s.event_times.get(k - 1) {
                Some(&t) => {
                    times.push(t);
                    events.push(true);
                }
                None => {
                    times.push(s.follow_up());
                    events.push(false);
                }
            }
            sub_scores.push(score);
        }
        let c = if times.len() >= 2 {
            harrell_c(&times, &events, &RiskScores(sub_scores), ties)?
        } else {
            Concordance { value: None, pairs: 0 }
        };
        out.push(PerEventConcordance {
            k,
            value: c.value,
            pairs: c.pairs,
        });
    }
    while out.last().is_some_and(|e| e.pairs == 0) {
        out.pop();
    }
    Ok(out)
}

/// Kim's C for recurrent events: ordered pairs whose event counts differ at
/// their shared follow-up, concordant when the subject with more events has the
/// higher score.
pub fn kim_c(data: &RecurrentDataset, scores: &RiskScores, ties: TieCredit) -> Result<Concordance> {
    let n = data.n();
    if scores.len() != n {
        return Err(Error::InvalidData("one score per subject required".into()));
    }
    let subjects = data.subjects();
    let eta = scores.values();
    let (mut concordant, mut tied, mut pairs) = (0u64, 0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = if subjects[i].follow_up() <= subjects[j].follow_up() {
                (i, j)
            } else {
                (j, i)
            };
            // `a` ends first: all of its events count
            let na = subjects[a].n_events();
            let nb = subjects[b].event_count(subjects[a].follow_up());
            let (hi, lo) = match na.cmp(&nb) {
                std::cmp::Ordering::Equal => continue,
                std::cmp::Ordering::Greater => (a, b),
                std::cmp::Ordering::Less => (b, a),
            };
            pairs += 1;
            if eta[hi] > eta[lo] {
                concordant += 1;
            } else if eta[hi] == eta[lo] {
                tied += 1;
            }
        }
    }
    Ok(Concordance::from_counts(concordant, tied, pairs, ties))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub err: f64,
}

/// Misclassified share of variables, `(FP + FN) / p`.
pub fn error_rate(active_mask: &[bool], flagged: &[bool]) -> Result<ErrorRate> {
    if active_mask.len() != flagged.len() || active_mask.is_empty() {
        return Err(Error::InvalidData(format!(
            "masks must be non-empty and equal length ({} vs {})",
            active_mask.len(),
            flagged.len()
        )));
    }
    let fp = active_mask.iter().zip(flagged).filter(|(a, f)| !**a && **f).count();
    let fn_ = active_mask.iter().zip(flagged).filter(|(a, f)| **a && !**f).count();
    Ok(ErrorRate {
        fp,
        fn_,
        err: (fp + fn_) as f64 / active_mask.len() as f64,
    })
}

/// All metrics for one fitted model on one evaluation set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub harrell_per_event: Vec<PerEventConcordance>,
    pub kim_c: Option<f64>,
    pub kim_pair_count: u64,
    pub error_rate: Option<ErrorRate>,
}

impl MetricReport {
    /// `flagged` is `None` for models without a variable-level test.
    pub fn compute(
        data: &RecurrentDataset,
        scores: &RiskScores,
        flagged: Option<&[bool]>,
        ties: TieCredit,
    ) -> Result<Self> {
        let kim = kim_c(data, scores, ties)?;
        let error_rate = match (data.active_mask(), flagged) {
            (Some(active), Some(flags)) => Some(error_rate(active, flags)?),
            _ => None,
        };
        Ok(Self {
            harrell_per_event: harrell_per_event(data, scores, ties)?,
            kim_c: kim.value,
            kim_pair_count: kim.pairs,
            error_rate,
        })
    }
}
