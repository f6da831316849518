use std::fs;
use std::path::Path;

use serde::Serialize;

use super::manifest::RunManifest;
use super::run::{read_manifest_file, read_raw, CellRow};
use super::{hash_header, RAW_FILE};
use crate::error::{Error, Result};

/// Metric names summarized besides the per-event `harrell_k{k}` columns.
pub const AGGREGATED_METRICS: [&str; 3] = ["kim_c", "err", "converged"];

/// Statistics for one (scenario, model, penalty, metric) group.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub p: usize,
    pub sparse_rate: f64,
    pub model: String,
    pub penalty: String,
    pub metric: String,
    /// Replicates with a value for this metric.
    pub count: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation; absent below two values.
    pub sd: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

fn metric_names(harrell_k: usize) -> Vec<String> {
    let mut names = vec!["kim_c".to_string()];
    names.extend((1..=harrell_k).map(|k| format!("harrell_k{k}")));
    names.push("err".into());
    names.push("converged".into());
    names
}

fn metric_value(row: &CellRow, metric: &str) -> Option<f64> {
    match metric {
        "kim_c" => row.kim_c,
        "err" => row.err,
        "converged" => Some(if row.converged { 1.0 } else { 0.0 }),
        m => {
            let k: usize = m.strip_prefix("harrell_k")?.parse().ok()?;
            row.harrell.get(k.checked_sub(1)?)?.0
        }
    }
}

fn summarize(values: &[f64]) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None, None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), sd, Some(min), Some(max))
}

/// Folds raw rows into per-group statistics, in manifest order.
pub fn aggregate_rows(manifest: &RunManifest, harrell_k: usize, rows: &[CellRow]) -> Vec<SummaryRow> {
    let metrics = metric_names(harrell_k);
    let mut out = Vec::new();
    for spec in &manifest.scenarios {
        let label = spec.label();
        for entry in &manifest.roster {
            let (model, penalty) = (entry.model.to_string(), entry.penalty.to_string());
            let cell: Vec<&CellRow> = rows
                .iter()
                .filter(|r| r.scenario_id == label && r.model == model && r.penalty == penalty)
                .collect();
            for metric in &metrics {
                let values: Vec<f64> = cell.iter().filter_map(|r| metric_value(r, metric)).collect();
                let (mean, sd, min, max) = summarize(&values);
                out.push(SummaryRow {
                    scenario_id: label.clone(),
                    p: spec.p,
                    sparse_rate: spec.sparse_rate,
                    model: model.clone(),
                    penalty: penalty.clone(),
                    metric: metric.clone(),
                    count: values.len(),
                    mean,
                    sd,
                    min,
                    max,
                });
            }
        }
    }
    out
}

fn write_table<S: Serialize>(path: &Path, hash: &str, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let mut buf = format!("{}\n", hash_header(hash)).into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        for row in rows {
            w.serialize(row)?;
        }
        w.flush()?;
    }
    fs::write(path, buf)?;
    Ok(())
}

#[derive(Serialize)]
struct CurvePoint<'a> {
    sparse_rate: f64,
    p: usize,
    model: &'a str,
    penalty: &'a str,
    metric: &'a str,
    count: usize,
    mean: Option<f64>,
    sd: Option<f64>,
}

#[derive(Serialize)]
struct DistributionPoint<'a> {
    scenario_id: &'a str,
    replicate: usize,
    model: &'a str,
    penalty: &'a str,
    metric: &'a str,
    value: Option<f64>,
}

fn curves<'a>(summary: &'a [SummaryRow], keep: impl Fn(&str) -> bool) -> Vec<CurvePoint<'a>> {
    let mut points: Vec<CurvePoint> = summary
        .iter()
        .filter(|s| keep(&s.metric))
        .map(|s| CurvePoint {
            sparse_rate: s.sparse_rate,
            p: s.p,
            model: &s.model,
            penalty: &s.penalty,
            metric: &s.metric,
            count: s.count,
            mean: s.mean,
            sd: s.sd,
        })
        .collect();
    // Stable sort keeps roster order among equal keys.
    points.sort_by(|a, b| {
        a.sparse_rate
            .total_cmp(&b.sparse_rate)
            .then_with(|| a.metric.cmp(b.metric))
            .then_with(|| a.model.cmp(b.model))
            .then_with(|| a.penalty.cmp(b.penalty))
            .then_with(|| a.p.cmp(&b.p))
    });
    points
}

/// Reads `raw.csv` from `in_dir` and writes `summary.csv` plus the plot
/// tables `curves_cindex.csv`, `curves_error.csv` and `distributions.csv`.
pub fn aggregate(in_dir: &Path, out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let file = read_manifest_file(in_dir)?;
    let store = read_raw(&in_dir.join(RAW_FILE))?;
    if store.manifest_hash != file.manifest_sha256 {
        return Err(Error::InvalidData(format!(
            "{} belongs to manifest {}, not {}",
            RAW_FILE, store.manifest_hash, file.manifest_sha256
        )));
    }
    if store.rows.is_empty() {
        return Err(Error::InvalidData("raw store is empty".into()));
    }
    let hash = &store.manifest_hash;
    let manifest = &file.manifest;
    let summary = aggregate_rows(manifest, store.harrell_k, &store.rows);
    fs::create_dir_all(out_dir)?;
    write_table(&out_dir.join("summary.csv"), hash, &summary)?;
    write_table(
        &out_dir.join("curves_cindex.csv"),
        hash,
        curves(&summary, |m| m == "kim_c" || m.starts_with("harrell_k")),
    )?;
    write_table(&out_dir.join("curves_error.csv"), hash, curves(&summary, |m| m == "err"))?;

    let metrics = metric_names(store.harrell_k);
    let distribution = manifest.distribution_scenarios.iter().flat_map(|label| {
        let metrics = &metrics;
        store.rows.iter().filter(move |r| &r.scenario_id == label).flat_map(move |r| {
            metrics
                .iter()
                .filter(|m| m.as_str() != "converged" && m.as_str() != "err")
                .map(move |m| DistributionPoint {
                    scenario_id: &r.scenario_id,
                    replicate: r.replicate,
                    model: &r.model,
                    penalty: &r.penalty,
                    metric: m,
                    value: metric_value(r, m),
                })
        })
    });
    write_table(&out_dir.join("distributions.csv"), hash, distribution)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_statistics() {
        let (mean, sd, min, max) = summarize(&[1.0, 2.0, 4.0]);
        assert_eq!(mean, Some(7.0 / 3.0));
        assert!((sd.unwrap() - (7.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!((min, max), (Some(1.0), Some(4.0)));
        assert_eq!(summarize(&[0.5]), (Some(0.5), None, Some(0.5), Some(0.5)));
        assert_eq!(summarize(&[]), (None, None, None, None));
    }
}
