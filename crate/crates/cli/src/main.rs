use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedstroke::aggregation::AggregationRule;
use fedstroke::metrics::{Connectivity, MetricsConfig};
use fedstroke::orchestrator::{
    self, ConfigFile, ExperimentReport, FederationConfig, Pool, PREDICTIONS_DIR,
};
use fedstroke::params::read_checkpoint;
use fedstroke::raster::{read_dataset, write_dataset};
use fedstroke::synth::CenterDataset;

/// Federated lesion segmentation simulator.
#[derive(Parser)]
#[command(name = "fedstroke", version)]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic centers and write rasters plus a manifest.
    Generate {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model: a federated rule or `centralized`.
    Run {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// fedavg, vanillaavg, beta[:B], softmax, fedprox[:MU] or centralized.
        #[arg(long, default_value = "fedavg")]
        rule: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the final model's masks as rasters.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Centralized baseline plus all five rules on the same data, ranked.
    RunSuite {
        #[command(flatten)]
        exp: ExperimentArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions (a directory of mask rasters or a checkpoint) on a
    /// generated dataset and print per-patient metrics as CSV.
    Evaluate {
        /// Dataset directory written by `generate`.
        #[arg(long)]
        data: PathBuf,
        #[arg(
            long,
            conflicts_with = "checkpoint",
            required_unless_present = "checkpoint"
        )]
        pred: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Model name written to the `model` column.
        #[arg(long, default_value = "model")]
        model: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// 4 or 8.
        #[arg(long, default_value_t = 8)]
        connectivity: u8,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank models by PRE from one or more per-patient CSV files.
    Rank {
        #[arg(required = true)]
        files: Vec<PathBuf>,
        /// Also write the ranking as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize a `run` or `run-suite` output directory.
    Report { dir: PathBuf },
}

#[derive(Args)]
struct ExperimentArgs {
    /// TOML experiment config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Use a dataset written by `generate` instead of generating one.
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self) -> Result<FederationConfig> {
        let mut file = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                ConfigFile::from_toml_str(&text)
                    .with_context(|| format!("parsing config {}", path.display()))?
            }
            None => ConfigFile::default(),
        };
        if self.seed.is_some() {
            file.master_seed = self.seed;
        }
        if self.rounds.is_some() {
            file.rounds = self.rounds;
        }
        Ok(file.into_config()?)
    }

    /// Config plus data. A loaded dataset replaces the configured centers.
    fn prepare(&self) -> Result<(FederationConfig, Vec<CenterDataset>)> {
        let mut config = self.config()?;
        let data = match &self.data {
            Some(dir) => {
                let data = read_dataset(dir)
                    .with_context(|| format!("loading dataset {}", dir.display()))?;
                config.centers = data.iter().map(|d| d.profile.clone()).collect();
                config.validate()?;
                data
            }
            None => orchestrator::prepare_data(&config)?,
        };
        Ok((config, data))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring thread pool")?;
    }
    match cli.command {
        Command::Generate { exp, out } => {
            let (_, data) = exp.prepare()?;
            let manifest = write_dataset(&out, &data)?;
            println!(
                "wrote {} studies from {} centers to {}",
                manifest.studies().count(),
                manifest.centers.len(),
                out.display()
            );
        }
        Command::Run {
            exp,
            rule,
            out,
            save_predictions,
        } => {
            let (mut config, data) = exp.prepare()?;
            let report = if rule == orchestrator::CENTRALIZED {
                orchestrator::run_centralized_on(&config, &data)?
            } else {
                config.rule = rule.parse::<AggregationRule>()?;
                orchestrator::run_federated_on(&config, &data)?
            };
            orchestrator::write_experiment(&out, &report)?;
            if save_predictions {
                let params = report
                    .final_params
                    .as_ref()
                    .context("report has no final model")?;
                orchestrator::write_predictions(
                    &out.join(PREDICTIONS_DIR),
                    params,
                    &data,
                    config.model.threshold,
                )?;
            }
            print_summary(&report);
        }
        Command::RunSuite { exp, out } => {
            let (config, data) = exp.prepare()?;
            let rules = orchestrator::suite_rules(&config);
            let suite = orchestrator::run_suite_on(&config, &data, &rules)?;
            orchestrator::write_suite(&out, &suite)?;
            for run in &suite.runs {
                print_summary(run);
            }
            print!("{}", orchestrator::ranking_text(&suite.rankings));
        }
        Command::Evaluate {
            data,
            pred,
            checkpoint,
            model,
            threshold,
            connectivity,
            out,
        } => {
            let datasets = read_dataset(&data)
                .with_context(|| format!("loading dataset {}", data.display()))?;
            let metrics = MetricsConfig {
                connectivity: Connectivity::try_from(connectivity)?,
                ..MetricsConfig::default()
            };
            let rows = match (pred, checkpoint) {
                (Some(dir), _) => {
                    orchestrator::evaluate_predictions(&datasets, &dir, &model, &metrics)?
                }
                (None, Some(path)) => {
                    let (params, _) = read_checkpoint(&path)?;
                    orchestrator::evaluate_model(&params, &datasets, &model, threshold, &metrics)?
                }
                (None, None) => bail!("one of --pred or --checkpoint is required"),
            };
            emit(out.as_deref(), &orchestrator::rows_csv(&rows))?;
        }
        Command::Rank { files, out } => {
            let mut rows = Vec::new();
            for path in &files {
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "model".into());
                rows.extend(orchestrator::read_per_patient_csv(path, &stem)?);
            }
            let rankings = orchestrator::rank_rows(&rows)?;
            print!("{}", orchestrator::ranking_text(&rankings));
            if let Some(path) = out {
                write(&path, &orchestrator::ranking_csv(&rankings))?;
            }
        }
        Command::Report { dir } => report(&dir)?,
    }
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    let Some(last) = report.final_round() else {
        return;
    };
    for pool in [Pool::Large, Pool::Limited] {
        if let Some(p) = last.pool(pool) {
            let s = &p.summary;
            println!(
                "{:<12} round {:>3} {:<8} PRE {:.4}  DSC {:.3}  AVD {:.3} mL  ALD {:.2}  LF1 {:.3}",
                report.model,
                last.round,
                pool.as_str(),
                s.pre,
                s.dsc,
                s.avd_ml,
                s.ald,
                s.lf1
            );
        }
    }
}

fn report(dir: &Path) -> Result<()> {
    let rounds = orchestrator::read_rounds_csv(&dir.join("rounds.csv"))?;
    if rounds.is_empty() {
        bail!("{} has no rounds", dir.join("rounds.csv").display());
    }
    println!(
        "{:<12} {:<8} {:>5} {:>8} {:>6} {:>8} {:>6} {:>6}",
        "model", "pool", "round", "PRE", "DSC", "AVD_mL", "ALD", "LF1"
    );
    let mut seen = Vec::new();
    for row in rounds.iter().rev() {
        let key = (row.rule.clone(), row.pool);
        if seen.contains(&key) {
            continue;
        }
        seen.push(key);
    }
    seen.reverse();
    for (rule, pool) in &seen {
        let last = rounds
            .iter()
            .rev()
            .find(|r| &r.rule == rule && r.pool == *pool)
            .expect("key taken from rows");
        println!(
            "{:<12} {:<8} {:>5} {:>8.4} {:>6.3} {:>8.3} {:>6.2} {:>6.3}",
            last.rule,
            pool.as_str(),
            last.round,
            last.pre,
            last.dsc,
            last.avd_ml,
            last.ald,
            last.lf1
        );
    }
    let per_patient = dir.join("per_patient.csv");
    if per_patient.is_file() {
        let rows = orchestrator::read_per_patient_csv(&per_patient, "model")?;
        let rankings = orchestrator::rank_rows(&rows)?;
        if rankings.values().any(|r| r.entries.len() > 1) {
            println!();
            print!("{}", orchestrator::ranking_text(&rankings));
        }
    }
    Ok(())
}

fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
