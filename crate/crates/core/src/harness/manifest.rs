use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cox::Penalty;
use crate::data::ModelKind;
use crate::error::{Error, Result};
use crate::metrics::TieCredit;
use crate::ranknet::{Activation, NetworkSpec, SampleMode};
use crate::rng;
use crate::simulate::ScenarioSpec;

/// Per-subject event cap in the shipped manifests. Without it the largest
/// scenarios produce subjects with tens of thousands of events.
pub const DESK_EVENT_CAP: usize = 20;

/// A Cox-family model or the ranking network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelChoice {
    Cox(ModelKind),
    RankDeepSurv,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Cox(kind) => kind.name(),
            ModelChoice::RankDeepSurv => "RankDeepSurv",
        }
    }
}

impl fmt::Display for ModelChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("RankDeepSurv") {
            return Ok(ModelChoice::RankDeepSurv);
        }
        ModelKind::parse(s)
            .map(ModelChoice::Cox)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown model `{s}`")))
    }
}

/// Penalty strength relative to `log(p)`, resolved once `p` is known.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PenaltyChoice {
    None,
    /// `s = factor * log(p)`.
    Lasso { factor: f64 },
    /// `s = factor * log(p)`.
    Ridge { factor: f64 },
    /// `xi = log(p)`, `theta = theta_factor * log(p)`.
    Bar { theta_factor: f64 },
}

impl PenaltyChoice {
    pub fn resolve(self, p: usize) -> Penalty {
        let lp = (p as f64).ln();
        match self {
            PenaltyChoice::None => Penalty::None,
            PenaltyChoice::Lasso { factor } => Penalty::Lasso { s: factor * lp },
            PenaltyChoice::Ridge { factor } => Penalty::Ridge { s: factor * lp },
            PenaltyChoice::Bar { theta_factor } => Penalty::Bar {
                xi: lp,
                theta: theta_factor * lp,
            },
        }
    }
}

impl fmt::Display for PenaltyChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PenaltyChoice::None => f.write_str("none"),
            PenaltyChoice::Lasso { factor } if factor == 1.0 => f.write_str("lasso"),
            PenaltyChoice::Lasso { factor } => write!(f, "lasso@{factor}"),
            PenaltyChoice::Ridge { factor } if factor == 1.0 => f.write_str("ridge"),
            PenaltyChoice::Ridge { factor } => write!(f, "ridge@{factor}"),
            PenaltyChoice::Bar { theta_factor } => write!(f, "bar@{theta_factor}"),
        }
    }
}

impl FromStr for PenaltyChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("unknown penalty `{s}`"));
        let (name, factor) = match s.split_once('@') {
            Some((name, f)) => {
                let f: f64 = f.parse().map_err(|_| bad())?;
                if !(f >= 0.0 && f.is_finite()) {
                    return Err(bad());
                }
                (name, Some(f))
            }
            None => (s, None),
        };
        match (name, factor) {
            ("none", None) => Ok(PenaltyChoice::None),
            ("lasso", f) => Ok(PenaltyChoice::Lasso { factor: f.unwrap_or(1.0) }),
            ("ridge", f) => Ok(PenaltyChoice::Ridge { factor: f.unwrap_or(1.0) }),
            ("bar", Some(theta_factor)) => Ok(PenaltyChoice::Bar { theta_factor }),
            _ => Err(bad()),
        }
    }
}

/// One roster line, e.g. `{ model = "AG", penalty = "bar@0.05" }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RosterText", into = "RosterText")]
pub struct RosterEntry {
    pub model: ModelChoice,
    pub penalty: PenaltyChoice,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RosterText {
    model: String,
    #[serde(default = "none_text")]
    penalty: String,
}

fn none_text() -> String {
    "none".into()
}

impl TryFrom<RosterText> for RosterEntry {
    type Error = Error;

    fn try_from(t: RosterText) -> Result<Self> {
        Ok(Self {
            model: t.model.parse()?,
            penalty: t.penalty.parse()?,
        })
    }
}

impl From<RosterEntry> for RosterText {
    fn from(e: RosterEntry) -> Self {
        Self {
            model: e.model.to_string(),
            penalty: e.penalty.to_string(),
        }
    }
}

/// Four Cox families under five penalties, then the network.
pub fn default_roster() -> Vec<RosterEntry> {
    let penalties = [
        PenaltyChoice::None,
        PenaltyChoice::Lasso { factor: 1.0 },
        PenaltyChoice::Ridge { factor: 1.0 },
        PenaltyChoice::Bar { theta_factor: 0.05 },
        PenaltyChoice::Bar { theta_factor: 0.1 },
    ];
    let mut roster: Vec<RosterEntry> = ModelKind::ALL
        .iter()
        .flat_map(|&kind| {
            penalties.iter().map(move |&penalty| RosterEntry {
                model: ModelChoice::Cox(kind),
                penalty,
            })
        })
        .collect();
    roster.push(RosterEntry {
        model: ModelChoice::RankDeepSurv,
        penalty: PenaltyChoice::None,
    });
    roster
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSettings {
    pub epochs: usize,
    pub learning_rate: f64,
    pub mu: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub activation: Activation,
    /// Hidden width is `min(p, hidden_max)`.
    pub hidden_max: usize,
    pub sample_mode: SampleMode,
}

impl Default for NetworkSettings {
    fn default() -> Self {
        let base = NetworkSpec::for_inputs(32);
        Self {
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            mu: base.mu,
            alpha1: base.alpha1,
            alpha2: base.alpha2,
            activation: base.activation,
            hidden_max: 32,
            sample_mode: SampleMode::Gaps,
        }
    }
}

impl NetworkSettings {
    pub fn spec_for(&self, p: usize) -> NetworkSpec {
        let h = p.min(self.hidden_max).max(1);
        NetworkSpec {
            layer_sizes: vec![p, h, h, 1],
            activation: self.activation,
            alpha1: self.alpha1,
            alpha2: self.alpha2,
            mu: self.mu,
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch: None,
        }
    }
}

/// A batch of scenarios crossed with a model roster.
///
/// Scenario seeds are derived from the manifest seed and the scenario label,
/// so any `seed` given inside a scenario is ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunManifest {
    pub name: String,
    pub seed: u64,
    /// Worker threads; has no effect on results.
    pub parallelism: usize,
    pub output_dir: Option<PathBuf>,
    pub train_fraction: f64,
    /// Number of per-event Harrell columns in the raw table.
    pub harrell_k: usize,
    pub tie_credit: TieCredit,
    /// Scenario labels whose per-replicate values are extracted for plotting.
    pub distribution_scenarios: Vec<String>,
    pub network: NetworkSettings,
    pub roster: Vec<RosterEntry>,
    pub scenarios: Vec<ScenarioSpec>,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: ScenarioSpec::default().seed,
            parallelism: 1,
            output_dir: None,
            train_fraction: 0.7,
            harrell_k: 5,
            tie_credit: TieCredit::Zero,
            distribution_scenarios: vec!["p25-sr0".into(), "p150-sr25".into()],
            network: NetworkSettings::default(),
            roster: default_roster(),
            scenarios: Vec::new(),
        }
    }
}

/// Fields of the manifest that determine results.
#[derive(Serialize)]
struct HashedContent<'a> {
    seed: u64,
    train_fraction: f64,
    harrell_k: usize,
    tie_credit: TieCredit,
    network: &'a NetworkSettings,
    roster: &'a [RosterEntry],
    scenarios: &'a [ScenarioSpec],
}

impl RunManifest {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let manifest: Self = toml::from_str(text)?;
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    /// Study grid: p in {25, 50, 100, 150, 200} by sparse rate in {0, 0.25, 0.5}.
    pub fn study_grid(ps: &[usize], replicates: usize, max_events: Option<usize>) -> Vec<ScenarioSpec> {
        [0.0, 0.25, 0.5]
            .iter()
            .flat_map(|&sparse_rate| {
                ps.iter().map(move |&p| ScenarioSpec {
                    p,
                    sparse_rate,
                    replicates,
                    max_events,
                    ..ScenarioSpec::default()
                })
            })
            .collect()
    }

    /// Desk-scale study: p up to 150, 10 replicates, 100 network epochs.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            network: NetworkSettings {
                epochs: 100,
                ..NetworkSettings::default()
            },
            scenarios: Self::study_grid(&[25, 50, 100, 150], 10, Some(DESK_EVENT_CAP)),
            ..Self::default()
        }
    }

    /// The full 15-scenario grid at 100 replicates.
    pub fn full() -> Self {
        Self {
            name: "full".into(),
            scenarios: Self::study_grid(&[25, 50, 100, 150, 200], 100, Some(DESK_EVENT_CAP)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.scenarios.is_empty() {
            return fail("manifest has no scenarios".into());
        }
        if self.roster.is_empty() {
            return fail("manifest roster is empty".into());
        }
        if self.parallelism == 0 {
            return fail("parallelism must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail(format!("train_fraction {} outside (0, 1)", self.train_fraction));
        }
        if self.harrell_k == 0 {
            return fail("harrell_k must be >= 1".into());
        }
        let mut labels = std::collections::HashSet::new();
        for s in &self.scenarios {
            s.validate()?;
            if !labels.insert(s.label()) {
                return fail(format!("duplicate scenario {}", s.label()));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.roster {
            if e.model == ModelChoice::RankDeepSurv && e.penalty != PenaltyChoice::None {
                return fail("RankDeepSurv takes no penalty".into());
            }
            if !seen.insert((e.model, e.penalty.to_string())) {
                return fail(format!("duplicate roster entry {} {}", e.model, e.penalty));
            }
        }
        let n = &self.network;
        if n.hidden_max == 0 || !(n.learning_rate > 0.0) || !(n.alpha1 > 0.0 && n.alpha2 > 0.0) || !(n.mu >= 0.0) {
            return fail("invalid network settings".into());
        }
        Ok(())
    }

    /// SHA-256 over every field that affects results; parallelism, name and
    /// output directory are excluded.
    pub fn hash(&self) -> String {
        let content = HashedContent {
            seed: self.seed,
            train_fraction: self.train_fraction,
            harrell_k: self.harrell_k,
            tie_credit: self.tie_credit,
            network: &self.network,
            roster: &self.roster,
            scenarios: &self.scenarios,
        };
        let json = serde_json::to_vec(&content).expect("manifest serializes");
        hex::encode(Sha256::digest(&json))
    }

    /// Scenario `index` with its derived seed.
    pub fn scenario(&self, index: usize) -> ScenarioSpec {
        let spec = &self.scenarios[index];
        let label_key = Sha256::digest(spec.label().as_bytes());
        let key = u64::from_le_bytes(label_key[..8].try_into().expect("8 bytes"));
        ScenarioSpec {
            seed: rng::derive_key(self.seed, &[rng::tag::SCENARIO, key]),
            ..spec.clone()
        }
    }

    pub fn total_cells(&self) -> usize {
        self.scenarios.iter().map(|s| s.replicates).sum::<usize>() * self.roster.len()
    }
}
