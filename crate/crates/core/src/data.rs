//! Recurrent-event data model and the counting-process layouts consumed by
//! the Cox-family estimators.

use std::io::Write;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// One subject's observed history on the calendar timescale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: usize,
    pub event_times: Vec<f64>,
    pub censoring_time: f64,
    pub covariates: Vec<f64>,
}

impl Subject {
    pub fn new(
        id: usize,
        event_times: Vec<f64>,
        censoring_time: f64,
        covariates: Vec<f64>,
    ) -> Result<Self> {
        let subject = Self {
            id,
            event_times,
            censoring_time,
            covariates,
        };
        subject.validate()?;
        Ok(subject)
    }

    fn validate(&self) -> Result<()> {
        if !self.censoring_time.is_finite() || self.censoring_time < 0.0 {
            return Err(Error::InvalidData(format!(
                "subject {}: censoring time {} must be finite and >= 0",
                self.id, self.censoring_time
            )));
        }
        let mut prev = 0.0;
        for &t in &self.event_times {
            if !t.is_finite() || t <= prev {
                return Err(Error::InvalidData(format!(
                    "subject {}: event times must be positive and strictly increasing",
                    self.id
                )));
            }
            prev = t;
        }
        if prev > self.censoring_time {
            return Err(Error::InvalidData(format!(
                "subject {}: event at {} after censoring at {}",
                self.id, prev, self.censoring_time
            )));
        }
        if self.covariates.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidData(format!(
                "subject {}: non-finite covariate",
                self.id
            )));
        }
        Ok(())
    }

    /// End of follow-up, `T_i`.
    pub fn follow_up(&self) -> f64 {
        self.censoring_time
    }

    pub fn n_events(&self) -> usize {
        self.event_times.len()
    }

    /// Number of events in `[0, t]`.
    pub fn event_count(&self, t: f64) -> usize {
        self.event_times.partition_point(|&e| e <= t)
    }
}

/// Free-function form of [`Subject::event_count`].
pub fn event_count(subject: &Subject, t: f64) -> usize {
    subject.event_count(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecurrentDataset {
    subjects: Vec<Subject>,
    p: usize,
    active_mask: Option<Vec<bool>>,
}

impl RecurrentDataset {
    pub fn new(subjects: Vec<Subject>, p: usize, active_mask: Option<Vec<bool>>) -> Result<Self> {
        if subjects.len() < 2 {
            return Err(Error::InvalidData(format!(
                "a dataset needs at least 2 subjects, got {}",
                subjects.len()
            )));
        }
        for s in &subjects {
            s.validate()?;
            if s.covariates.len() != p {
                return Err(Error::InvalidData(format!(
                    "subject {} has {} covariates, expected {}",
                    s.id,
                    s.covariates.len(),
                    p
                )));
            }
        }
        if let Some(mask) = &active_mask {
            if mask.len() != p {
                return Err(Error::InvalidData(format!(
                    "active mask has length {}, expected {}",
                    mask.len(),
                    p
                )));
            }
        }
        Ok(Self {
            subjects,
            p,
            active_mask,
        })
    }

    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn n(&self) -> usize {
        self.subjects.len()
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn active_mask(&self) -> Option<&[bool]> {
        self.active_mask.as_deref()
    }

    pub fn max_events(&self) -> usize {
        self.subjects.iter().map(Subject::n_events).max().unwrap_or(0)
    }

    pub fn total_events(&self) -> usize {
        self.subjects.iter().map(Subject::n_events).sum()
    }

    /// Same subjects with every covariate column replaced by `f(column index, value)`.
    pub fn map_covariates(&self, f: impl Fn(usize, f64) -> f64) -> Self {
        let subjects = self
            .subjects
            .iter()
            .map(|s| Subject {
                covariates: s.covariates.iter().enumerate().map(|(j, &x)| f(j, x)).collect(),
                ..s.clone()
            })
            .collect();
        Self {
            subjects,
            p: self.p,
            active_mask: self.active_mask.clone(),
        }
    }
}

/// Recurrent-event model families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "AG")]
    AndersenGill,
    #[serde(rename = "PWP")]
    Pwp,
    #[serde(rename = "WLW")]
    Wlw,
    #[serde(rename = "Frailty")]
    Frailty,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [
        ModelKind::AndersenGill,
        ModelKind::Pwp,
        ModelKind::Wlw,
        ModelKind::Frailty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::AndersenGill => "AG",
            ModelKind::Pwp => "PWP",
            ModelKind::Wlw => "WLW",
            ModelKind::Frailty => "Frailty",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ag" | "andersen-gill" => Some(ModelKind::AndersenGill),
            "pwp" => Some(ModelKind::Pwp),
            "wlw" => Some(ModelKind::Wlw),
            "frailty" => Some(ModelKind::Frailty),
            _ => None,
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Timescale {
    Calendar,
    Gap,
    CountingProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RiskSet {
    Unrestricted,
    Restricted,
    SemiRestricted,
}

/// One interval row `(start, stop]`. `subject` indexes the layout's
/// covariate table, `subject_id` is the dataset identifier.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayoutRow {
    pub subject: usize,
    pub subject_id: usize,
    pub start: f64,
    pub stop: f64,
    pub status: bool,
    pub stratum: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLayout {
    pub rows: Vec<LayoutRow>,
    pub timescale: Timescale,
    pub risk_set: RiskSet,
    pub p: usize,
    /// Row-major `n_subjects × p` covariates; rows refer to it by `subject`.
    pub covariates: Vec<f64>,
    pub subject_ids: Vec<usize>,
}

impl ModelLayout {
    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn subject_covariates(&self, subject: usize) -> &[f64] {
        &self.covariates[subject * self.p..(subject + 1) * self.p]
    }

    pub fn n_strata(&self) -> u32 {
        self.rows.iter().map(|r| r.stratum).max().unwrap_or(0)
    }

    pub fn n_events(&self) -> usize {
        self.rows.iter().filter(|r| r.status).count()
    }

    /// Writes `subject_id,start,stop,status,stratum,x1..xp`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> = ["subject_id", "start", "stop", "status", "stratum"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        header.extend((1..=self.p).map(|j| format!("x{j}")));
        w.write_record(&header)?;
        for row in &self.rows {
            let mut rec = vec![
                row.subject_id.to_string(),
                row.start.to_string(),
                row.stop.to_string(),
                u8::from(row.status).to_string(),
                row.stratum.to_string(),
            ];
            rec.extend(self.subject_covariates(row.subject).iter().map(|x| x.to_string()));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Expands `data` into the row layout for `model`. WLW uses the dataset's own
/// maximum event count as the number of strata.
pub fn expand_layout(data: &RecurrentDataset, model: ModelKind) -> Result<ModelLayout> {
    expand_layout_with_kmax(data, model, None)
}

/// As [`expand_layout`], with an explicit WLW stratum count. Subjects with more
/// than `k_max` events are truncated to their first `k_max` events.
pub fn expand_layout_with_kmax(
    data: &RecurrentDataset,
    model: ModelKind,
    k_max: Option<usize>,
) -> Result<ModelLayout> {
    for s in data.subjects() {
        if s.follow_up() <= 0.0 {
            return Err(Error::InvalidData(format!(
                "subject {} has zero follow-up time",
                s.id
            )));
        }
    }

    let p = data.p();
    let mut covariates = Vec::with_capacity(data.n() * p);
    let mut subject_ids = Vec::with_capacity(data.n());
    for s in data.subjects() {
        covariates.extend_from_slice(&s.covariates);
        subject_ids.push(s.id);
    }

    let mut rows = Vec::new();
    let (timescale, risk_set) = match model {
        ModelKind::AndersenGill | ModelKind::Frailty | ModelKind::Pwp => {
            let restricted = model == ModelKind::Pwp;
            for (idx, s) in data.subjects().iter().enumerate() {
                let mut start = 0.0;
                for (k, &t) in s.event_times.iter().enumerate() {
                    rows.push(LayoutRow {
                        subject: idx,
                        subject_id: s.id,
                        start,
                        stop: t,
                        status: true,
                        stratum: if restricted { k as u32 + 1 } else { 1 },
                    });
                    start = t;
                }
                // an event tied with the censoring time closes follow-up
                if s.follow_up() > start {
                    rows.push(LayoutRow {
                        subject: idx,
                        subject_id: s.id,
                        start,
                        stop: s.follow_up(),
                        status: false,
                        stratum: if restricted { s.n_events() as u32 + 1 } else { 1 },
                    });
                }
            }
            let risk = if restricted {
                RiskSet::Restricted
            } else {
                RiskSet::Unrestricted
            };
            (Timescale::CountingProcess, risk)
        }
        ModelKind::Wlw => {
            let k_max = k_max.unwrap_or_else(|| data.max_events()).max(1);
            for (idx, s) in data.subjects().iter().enumerate() {
                for k in 0..k_max {
                    let (stop, status) = match s.event_times.get(k) {
                        Some(&t) => (t, true),
                        None => (s.follow_up(), false),
                    };
                    rows.push(LayoutRow {
                        subject: idx,
                        subject_id: s.id,
                        start: 0.0,
                        stop,
                        status,
                        stratum: k as u32 + 1,
                    });
                }
            }
            (Timescale::Calendar, RiskSet::SemiRestricted)
        }
    };

    Ok(ModelLayout {
        rows,
        timescale,
        risk_set,
        p,
        covariates,
        subject_ids,
    })
}

/// Subject-level split; the first side receives `round(fraction * n)` subjects.
pub fn train_test_split(
    data: &RecurrentDataset,
    fraction: f64,
    seed: u64,
) -> Result<(RecurrentDataset, RecurrentDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "split fraction must be in (0, 1), got {fraction}"
        )));
    }
    let n = data.n();
    let n_train = (fraction * n as f64).round() as usize;
    if n_train < 2 || n - n_train < 2 {
        return Err(Error::InvalidData(format!(
            "split of {n} subjects at {fraction} leaves a side with fewer than 2 subjects"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = rng::substream(seed, &[rng::tag::SPLIT]);
    order.shuffle(&mut rng);
    let (train_idx, test_idx) = order.split_at(n_train);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        let subjects = idx.iter().map(|&i| data.subjects()[i].clone()).collect();
        RecurrentDataset::new(subjects, data.p(), data.active_mask.clone())
    };
    Ok((pick(train_idx)?, pick(test_idx)?))
}
