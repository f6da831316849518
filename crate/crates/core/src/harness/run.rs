use std::collections::{HashMap, HashSet};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{ModelChoice, RosterEntry, RunManifest};
use super::{hash_header, parse_hash_header, LEDGER_FILE, MANIFEST_FILE, RAW_FILE};
use crate::cox::{fit_model, wald_pvalues, FitConfig};
use crate::data::{train_test_split, RecurrentDataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, RiskScores};
use crate::ranknet;
use crate::rng::{self, tag};
use crate::simulate::{generate_scenario, ScenarioSpec};

/// Reason recorded when a cell raised an error instead of returning a fit.
pub const ERROR_REASON: &str = "ERROR";

/// One (scenario, replicate, model) result.
#[derive(Debug, Clone, PartialEq)]
pub struct CellRow {
    pub scenario_id: String,
    pub replicate: usize,
    pub model: String,
    pub penalty: String,
    pub kim_c: Option<f64>,
    pub kim_pairs: Option<u64>,
    pub err: Option<f64>,
    pub fp: Option<usize>,
    pub fn_: Option<usize>,
    /// `(value, usable pairs)` for k = 1, 2, ...
    pub harrell: Vec<(Option<f64>, u64)>,
    pub converged: bool,
    pub reason: String,
    pub frailty_variance: Option<f64>,
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn parse_opt<T: std::str::FromStr>(field: &str) -> Result<Option<T>> {
    if field.is_empty() {
        return Ok(None);
    }
    field
        .parse()
        .map(Some)
        .map_err(|_| Error::InvalidData(format!("bad raw field `{field}`")))
}

impl CellRow {
    pub fn header(harrell_k: usize) -> Vec<String> {
        let mut h: Vec<String> = ["scenario_id", "replicate", "model", "penalty", "kim_c", "kim_pairs", "err", "fp", "fn"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for k in 1..=harrell_k {
            h.push(format!("harrell_k{k}"));
            h.push(format!("harrell_k{k}_pairs"));
        }
        h.extend(["converged", "reason", "frailty_variance"].map(String::from));
        h
    }

    pub fn to_record(&self) -> Vec<String> {
        let mut r = vec![
            self.scenario_id.clone(),
            self.replicate.to_string(),
            self.model.clone(),
            self.penalty.clone(),
            opt(self.kim_c),
            opt(self.kim_pairs),
            opt(self.err),
            opt(self.fp),
            opt(self.fn_),
        ];
        for &(value, pairs) in &self.harrell {
            r.push(opt(value));
            r.push(pairs.to_string());
        }
        r.push(self.converged.to_string());
        r.push(self.reason.clone());
        r.push(opt(self.frailty_variance));
        r
    }

    fn to_line(&self) -> String {
        let mut line = self.to_record().join(",");
        line.push('\n');
        line
    }

    pub fn from_record(record: &csv::StringRecord, harrell_k: usize) -> Result<Self> {
        if record.len() != 12 + 2 * harrell_k {
            return Err(Error::InvalidData(format!("raw row has {} fields", record.len())));
        }
        let f = |i: usize| &record[i];
        let mut harrell = Vec::with_capacity(harrell_k);
        for k in 0..harrell_k {
            let pairs = parse_opt(f(10 + 2 * k))?.unwrap_or(0);
            harrell.push((parse_opt(f(9 + 2 * k))?, pairs));
        }
        let tail = 9 + 2 * harrell_k;
        Ok(Self {
            scenario_id: f(0).to_string(),
            replicate: parse_opt(f(1))?.ok_or_else(|| Error::InvalidData("missing replicate".into()))?,
            model: f(2).to_string(),
            penalty: f(3).to_string(),
            kim_c: parse_opt(f(4))?,
            kim_pairs: parse_opt(f(5))?,
            err: parse_opt(f(6))?,
            fp: parse_opt(f(7))?,
            fn_: parse_opt(f(8))?,
            harrell,
            converged: parse_opt(f(tail))?.unwrap_or(false),
            reason: f(tail + 1).to_string(),
            frailty_variance: parse_opt(f(tail + 2))?,
        })
    }

    fn key(&self) -> (String, usize, String, String) {
        (self.scenario_id.clone(), self.replicate, self.model.clone(), self.penalty.clone())
    }

    fn failed(scenario_id: &str, replicate: usize, entry: &RosterEntry, harrell_k: usize, reason: &str) -> Self {
        Self {
            scenario_id: scenario_id.to_string(),
            replicate,
            model: entry.model.to_string(),
            penalty: entry.penalty.to_string(),
            kim_c: None,
            kim_pairs: None,
            err: None,
            fp: None,
            fn_: None,
            harrell: vec![(None, 0); harrell_k],
            converged: false,
            reason: reason.to_string(),
            frailty_variance: None,
        }
    }

    fn fill_metrics(&mut self, report: &MetricReport) {
        self.kim_c = report.kim_c;
        self.kim_pairs = Some(report.kim_pair_count);
        if let Some(e) = &report.error_rate {
            self.err = Some(e.err);
            self.fp = Some(e.fp);
            self.fn_ = Some(e.fn_);
        }
        for (k, slot) in self.harrell.iter_mut().enumerate() {
            if let Some(pe) = report.harrell_per_event.iter().find(|pe| pe.k == k + 1) {
                *slot = (pe.value, pe.pairs);
            }
        }
    }
}

/// A parsed `raw.csv` or ledger.
#[derive(Debug, Clone, PartialEq)]
pub struct RawStore {
    pub manifest_hash: String,
    pub harrell_k: usize,
    pub rows: Vec<CellRow>,
}

/// Reads a raw table, ignoring a trailing incomplete line.
pub fn read_raw(path: &Path) -> Result<RawStore> {
    let text = fs::read_to_string(path)?;
    parse_raw(&text, path)
}

fn parse_raw(text: &str, path: &Path) -> Result<RawStore> {
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    let mut lines = complete.lines();
    let manifest_hash = lines
        .next()
        .and_then(parse_hash_header)
        .ok_or_else(|| Error::InvalidData(format!("{} lacks a manifest hash header", path.display())))?
        .to_string();
    let body: String = lines.map(|l| format!("{l}\n")).collect();
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
    let n_fields = reader.headers()?.len();
    if n_fields < 12 || (n_fields - 12) % 2 != 0 {
        return Err(Error::InvalidData(format!("{} has an unexpected header", path.display())));
    }
    let harrell_k = (n_fields - 12) / 2;
    let rows = reader
        .records()
        .map(|r| CellRow::from_record(&r?, harrell_k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RawStore {
        manifest_hash,
        harrell_k,
        rows,
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    /// Continue from the completed-cell ledger of an earlier run.
    pub resume: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total_cells: usize,
    pub executed: usize,
    pub resumed: usize,
    pub not_converged: usize,
    pub errors: usize,
}

#[derive(Serialize, Deserialize)]
pub(crate) struct ManifestFile {
    pub manifest_sha256: String,
    pub manifest: RunManifest,
}

pub(crate) fn read_manifest_file(dir: &Path) -> Result<ManifestFile> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_str(&text)?)
}

/// Simulates the replicate and splits it into train and test sets.
fn prepare(manifest: &RunManifest, spec: &ScenarioSpec, replicate: usize) -> Result<(RecurrentDataset, RecurrentDataset)> {
    let (data, _) = generate_scenario(spec, replicate as u64)?;
    let split_seed = rng::derive_key(spec.seed, &[tag::SPLIT, replicate as u64]);
    train_test_split(&data, manifest.train_fraction, split_seed)
}

/// Fits `entry` on `train` and scores it on `test`. Errors become rows with
/// reason `ERROR`; fits that fail to converge are rows without metrics.
pub fn evaluate_cell(
    manifest: &RunManifest,
    spec: &ScenarioSpec,
    replicate: usize,
    entry: &RosterEntry,
    train: &RecurrentDataset,
    test: &RecurrentDataset,
) -> CellRow {
    let label = spec.label();
    let k = manifest.harrell_k;
    match try_evaluate(manifest, spec, replicate, entry, train, test) {
        Ok(row) => row,
        Err(e) => {
            log::warn!("{label} replicate {replicate} {} {}: {e}", entry.model, entry.penalty);
            CellRow::failed(&label, replicate, entry, k, ERROR_REASON)
        }
    }
}

fn try_evaluate(
    manifest: &RunManifest,
    spec: &ScenarioSpec,
    replicate: usize,
    entry: &RosterEntry,
    train: &RecurrentDataset,
    test: &RecurrentDataset,
) -> Result<CellRow> {
    let label = spec.label();
    let p = train.p();
    let test_x: Vec<Vec<f64>> = test.subjects().iter().map(|s| s.covariates.clone()).collect();
    match entry.model {
        ModelChoice::Cox(kind) => {
            let config = FitConfig::with_penalty(entry.penalty.resolve(p));
            let (layout, mut fit) = fit_model(train, kind, Some(train.max_events()), &config)?;
            let mut row = CellRow::failed(&label, replicate, entry, manifest.harrell_k, fit.reason.as_str());
            row.frailty_variance = fit.frailty_variance;
            if !fit.converged {
                return Ok(row);
            }
            row.converged = true;
            fit.p_values = wald_pvalues(&fit, &layout).ok();
            let scores = RiskScores::new(fit.risk_scores(&test_x))?;
            let report = MetricReport::compute(test, &scores, Some(&fit.flagged()), manifest.tie_credit)?;
            row.fill_metrics(&report);
            Ok(row)
        }
        ModelChoice::RankDeepSurv => {
            let net_spec = manifest.network.spec_for(p);
            let samples = ranknet::samples_from_dataset(train, manifest.network.sample_mode);
            let mut stream = rng::substream(spec.seed, &[tag::NETWORK, replicate as u64]);
            let (network, report) = ranknet::train(&samples, &net_spec, &mut stream)?;
            let finite = report.losses.last().is_some_and(|l| l.is_finite());
            let reason = if finite { "CONVERGED" } else { "DIVERGED" };
            let mut row = CellRow::failed(&label, replicate, entry, manifest.harrell_k, reason);
            if !finite {
                return Ok(row);
            }
            row.converged = true;
            let scores = ranknet::predict_risk(&network, test)?;
            let report = MetricReport::compute(test, &scores, None, manifest.tie_credit)?;
            row.fill_metrics(&report);
            Ok(row)
        }
    }
}

/// Opens the ledger, returning the rows already completed.
fn open_ledger(path: &Path, hash: &str, header: &str, resume: bool) -> Result<(File, Vec<CellRow>)> {
    if path.exists() && !resume {
        return Err(Error::InvalidConfig(format!(
            "{} already holds a run; pass --resume to continue it",
            path.parent().unwrap_or(path).display()
        )));
    }
    let mut done = Vec::new();
    let mut kept = format!("{}\n{header}\n", hash_header(hash));
    if resume && path.exists() {
        let text = fs::read_to_string(path)?;
        if !text.is_empty() {
            let store = parse_raw(&text, path)?;
            if store.manifest_hash != hash {
                return Err(Error::InvalidConfig(format!(
                    "ledger was written by manifest {}, not {hash}",
                    store.manifest_hash
                )));
            }
            let mut seen = HashSet::new();
            for row in store.rows {
                if seen.insert(row.key()) {
                    kept.push_str(&row.to_line());
                    done.push(row);
                }
            }
        }
    }
    fs::write(path, &kept)?;
    let file = OpenOptions::new().append(true).open(path)?;
    Ok((file, done))
}

/// Runs every cell of `manifest` not yet in the ledger and writes `raw.csv`.
///
/// Results do not depend on `manifest.parallelism`: every cell draws from
/// its own seeded streams and rows are sorted before the final write.
pub fn run(manifest: &RunManifest, options: &RunOptions) -> Result<RunSummary> {
    manifest.validate()?;
    let dir = &options.out_dir;
    fs::create_dir_all(dir)?;
    let hash = manifest.hash();

    let manifest_path = dir.join(MANIFEST_FILE);
    if options.resume && manifest_path.exists() {
        let prior = read_manifest_file(dir)?;
        if prior.manifest_sha256 != hash {
            return Err(Error::InvalidConfig(format!(
                "{} was written by a different manifest",
                dir.display()
            )));
        }
    }
    let header = CellRow::header(manifest.harrell_k).join(",");
    let (ledger, done) = open_ledger(&dir.join(LEDGER_FILE), &hash, &header, options.resume)?;
    let file = ManifestFile {
        manifest_sha256: hash.clone(),
        manifest: manifest.clone(),
    };
    fs::write(&manifest_path, serde_json::to_string_pretty(&file)? + "\n")?;

    let completed: HashSet<_> = done.iter().map(CellRow::key).collect();
    let specs: Vec<ScenarioSpec> = (0..manifest.scenarios.len()).map(|i| manifest.scenario(i)).collect();
    let groups: Vec<(usize, usize, Vec<usize>)> = specs
        .iter()
        .enumerate()
        .flat_map(|(si, spec)| (0..spec.replicates).map(move |rep| (si, rep)))
        .filter_map(|(si, rep)| {
            let label = specs[si].label();
            let pending: Vec<usize> = (0..manifest.roster.len())
                .filter(|&ri| {
                    let e = &manifest.roster[ri];
                    !completed.contains(&(label.clone(), rep, e.model.to_string(), e.penalty.to_string()))
                })
                .collect();
            (!pending.is_empty()).then_some((si, rep, pending))
        })
        .collect();

    let total = manifest.total_cells();
    log::info!(
        "{}: {} cells, {} already complete, {} threads",
        manifest.name,
        total,
        done.len(),
        manifest.parallelism
    );
    let appender = Mutex::new(ledger);
    let append = |row: &CellRow| -> Result<()> {
        let mut f = appender.lock().expect("ledger lock");
        f.write_all(row.to_line().as_bytes())?;
        f.flush()?;
        Ok(())
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(manifest.parallelism)
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
    pool.install(|| {
        groups.par_iter().try_for_each(|(si, rep, pending)| {
            let spec = &specs[*si];
            match prepare(manifest, spec, *rep) {
                Ok((train, test)) => {
                    for &ri in pending {
                        append(&evaluate_cell(manifest, spec, *rep, &manifest.roster[ri], &train, &test))?;
                    }
                }
                Err(e) => {
                    log::warn!("{} replicate {rep}: {e}", spec.label());
                    for &ri in pending {
                        append(&CellRow::failed(&spec.label(), *rep, &manifest.roster[ri], manifest.harrell_k, ERROR_REASON))?;
                    }
                }
            }
            log::debug!("{} replicate {rep} done", spec.label());
            Ok::<(), Error>(())
        })
    })?;
    drop(appender);

    let store = read_raw(&dir.join(LEDGER_FILE))?;
    let rows = order_rows(manifest, store.rows)?;
    let mut raw = format!("{}\n{header}\n", hash_header(&hash));
    for row in &rows {
        raw.push_str(&row.to_line());
    }
    fs::write(dir.join(RAW_FILE), raw)?;

    Ok(RunSummary {
        total_cells: total,
        executed: total - done.len(),
        resumed: done.len(),
        not_converged: rows.iter().filter(|r| !r.converged).count(),
        errors: rows.iter().filter(|r| r.reason == ERROR_REASON).count(),
    })
}

/// Sorts rows into manifest order and checks each cell appears exactly once.
fn order_rows(manifest: &RunManifest, rows: Vec<CellRow>) -> Result<Vec<CellRow>> {
    let scenario_rank: HashMap<String, usize> =
        manifest.scenarios.iter().enumerate().map(|(i, s)| (s.label(), i)).collect();
    let roster_rank: HashMap<(String, String), usize> = manifest
        .roster
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.model.to_string(), e.penalty.to_string()), i))
        .collect();
    let mut seen = HashSet::new();
    let mut keyed = Vec::with_capacity(rows.len());
    for row in rows {
        let s = scenario_rank.get(&row.scenario_id);
        let r = roster_rank.get(&(row.model.clone(), row.penalty.clone()));
        let (Some(&s), Some(&r)) = (s, r) else {
            return Err(Error::InvalidData(format!(
                "ledger row {} {} {} is not in the manifest",
                row.scenario_id, row.model, row.penalty
            )));
        };
        if seen.insert((s, row.replicate, r)) {
            keyed.push(((s, row.replicate, r), row));
        }
    }
    if keyed.len() != manifest.total_cells() {
        return Err(Error::InvalidData(format!(
            "ledger holds {} of {} cells",
            keyed.len(),
            manifest.total_cells()
        )));
    }
    keyed.sort_by_key(|(k, _)| *k);
    Ok(keyed.into_iter().map(|(_, r)| r).collect())
}
