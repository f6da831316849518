//! Simulation, fitting and scoring of high-dimensional recurrent-event
//! survival models.
//!
//! Four regression families (Andersen-Gill, PWP, WLW and shared gamma
//! frailty) are fitted by penalized Breslow partial likelihood, compared
//! against a ranking neural network, and scored with concordance indices
//! and variable-selection error rates.

pub mod cox;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod ranknet;
pub mod rng;
pub mod simulate;

pub use cox::{fit, fit_model, FitConfig, FitResult, Penalty, ReasonCode};
pub use data::{expand_layout, train_test_split, ModelKind, ModelLayout, RecurrentDataset, Subject};
pub use error::{Error, Result};
pub use metrics::{harrell_c, harrell_per_event, kim_c, error_rate, MetricReport, RiskScores, TieCredit};
pub use simulate::{generate_scenario, ScenarioSpec};
