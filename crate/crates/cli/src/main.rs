use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use recsim_core::harness::{self, RunManifest, RunOptions};
use recsim_core::{expand_layout, generate_scenario, ModelKind, ScenarioSpec};

#[derive(Parser)]
#[command(name = "recsim", version, about = "Recurrent-event survival simulation study")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (scenario, replicate, model) cell of a manifest.
    Run {
        #[arg(long)]
        manifest: PathBuf,
        /// Output directory; defaults to the manifest's `output_dir`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads.
        #[arg(long)]
        parallel: Option<usize>,
        /// Continue an interrupted run from its ledger.
        #[arg(long)]
        resume: bool,
        /// Override the manifest seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a finished run into plot-ready tables.
    Aggregate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export one simulated replicate as a model layout CSV.
    Simulate {
        /// Scenario file (TOML).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: u64,
        /// Layout to export.
        #[arg(long, default_value = "AG")]
        model: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a default configuration as TOML.
    PrintDefaults {
        #[arg(value_enum, default_value_t = Defaults::Scenario)]
        what: Defaults,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Defaults {
    Scenario,
    Desk,
    Full,
}

fn run(
    manifest_path: &Path,
    out: Option<PathBuf>,
    parallel: Option<usize>,
    resume: bool,
    seed: Option<u64>,
) -> anyhow::Result<()> {
    let text = fs::read_to_string(manifest_path)
        .with_context(|| format!("reading {}", manifest_path.display()))?;
    let mut manifest = RunManifest::from_toml_str(&text)
        .with_context(|| format!("parsing {}", manifest_path.display()))?;
    if let Some(k) = parallel {
        manifest.parallelism = k;
    }
    if let Some(s) = seed {
        manifest.seed = s;
    }
    let Some(out_dir) = out.or_else(|| manifest.output_dir.clone()) else {
        bail!("no output directory: pass --out or set output_dir");
    };
    let summary = harness::run(&manifest, &RunOptions { out_dir: out_dir.clone(), resume })?;
    println!(
        "{} cells ({} run, {} resumed), {} not converged, {} errors -> {}",
        summary.total_cells,
        summary.executed,
        summary.resumed,
        summary.not_converged,
        summary.errors,
        out_dir.join(harness::RAW_FILE).display()
    );
    Ok(())
}

fn simulate(spec_path: &Path, out: &Path, replicate: u64, model: &str, seed: Option<u64>) -> anyhow::Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let mut spec = ScenarioSpec::from_toml_str(&text)?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let Some(kind) = ModelKind::parse(model) else {
        bail!("unknown model `{model}`");
    };
    let (data, truth) = generate_scenario(&spec, replicate)?;
    let layout = expand_layout(&data, kind)?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    layout.write_csv(std::io::BufWriter::new(file))?;
    let sidecar = out.with_extension("json");
    let meta = serde_json::json!({
        "n": data.n(),
        "p": data.p(),
        "seed": spec.seed,
        "active_mask": data.active_mask(),
        "spec": spec,
        "replicate": replicate,
        "model": kind.name(),
        "truth": truth,
    });
    fs::write(&sidecar, serde_json::to_string_pretty(&meta)? + "\n")?;
    println!("{} rows -> {}, truth -> {}", layout.rows.len(), out.display(), sidecar.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { manifest, out, parallel, resume, seed } => run(&manifest, out, parallel, resume, seed),
        Command::Aggregate { input, out } => harness::aggregate(&input, &out).map(|rows| {
            println!("{} summary rows -> {}", rows.len(), out.display());
        }).map_err(Into::into),
        Command::Simulate { spec, out, replicate, model, seed } => simulate(&spec, &out, replicate, &model, seed),
        Command::PrintDefaults { what } => {
            let text = match what {
                Defaults::Scenario => ScenarioSpec::default().to_toml_string(),
                Defaults::Desk => RunManifest::desk().to_toml_string(),
                Defaults::Full => RunManifest::full().to_toml_string(),
            };
            print!("{text}");
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
