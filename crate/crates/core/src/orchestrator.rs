//! Federated round loop, centralized baseline, evaluation and report output.
//!
//! Every run is a pure function of its [`FederationConfig`]. Local trainings
//! inside a round and per-patient evaluation may run on several threads, but
//! results are always collected and reduced in center/patient order so the
//! outputs are identical for any thread count.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::{aggregate, AggregationRule};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_patient, LesionCategory, MetricsConfig, SegmentationMetrics};
use crate::model::{forward, init_params, predict_mask, ModelConfig};
use crate::params::{write_checkpoint, CheckpointMeta, ParameterSet};
use crate::ranking::{pre, rank_models, relative_errors, ModelRanking, RelativeErrors};
use crate::seed::{self, tag};
use crate::synth::{
    federation, generate_center, CenterDataset, CenterProfile, FederationOptions, PhantomStudy,
};
use crate::trainer::{train_local, TrainConfig};

pub const CENTRALIZED: &str = "centralized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub rounds: usize,
    pub rule: AggregationRule,
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub centers: Vec<CenterProfile>,
    pub master_seed: u64,
    pub eval_every: usize,
    pub metrics: MetricsConfig,
    /// Start every large center from its own seeded initialization instead
    /// of one broadcast model.
    pub per_center_init: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self::desk_default(FederationOptions::default().master_seed)
    }
}

impl FederationConfig {
    /// 14 synthetic centers, 32x32 phantoms, 30 rounds of 3 local epochs.
    pub fn desk_default(master_seed: u64) -> Self {
        let opts = FederationOptions {
            master_seed,
            ..FederationOptions::default()
        };
        Self {
            rounds: 30,
            rule: AggregationRule::FedAvg,
            train: TrainConfig::default(),
            model: ModelConfig::default(),
            centers: federation(&opts),
            master_seed,
            eval_every: 1,
            metrics: MetricsConfig::default(),
            per_center_init: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidConfig("rounds must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::InvalidConfig("eval_every must be >= 1".into()));
        }
        if !self.centers.iter().any(|c| c.is_large) {
            return Err(Error::InvalidConfig(
                "at least one large center is required".into(),
            ));
        }
        let mut ids: Vec<u32> = self.centers.iter().map(|c| c.center_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidConfig("center ids must be unique".into()));
        }
        self.rule.validate()?;
        self.train.validate()?;
        self.model.validate()?;
        for c in &self.centers {
            c.validate()?;
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        ConfigFile::from_toml_str(text)?.into_config()
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(&ConfigFile::from(self.clone()))?)
    }

    fn is_eval_round(&self, round: usize) -> bool {
        round.is_multiple_of(self.eval_every) || round == self.rounds
    }

    fn large_centers(&self) -> impl Iterator<Item = &CenterProfile> {
        self.centers.iter().filter(|c| c.is_large)
    }
}

/// Experiment config file. Every field is optional; missing values take the
/// desk defaults. Centers are either listed explicitly under `[[centers]]`
/// or generated from `[federation]` options.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub rounds: Option<usize>,
    pub master_seed: Option<u64>,
    pub eval_every: Option<usize>,
    pub per_center_init: Option<bool>,
    pub rule: Option<AggregationRule>,
    pub train: Option<TrainConfig>,
    pub model: Option<ModelConfig>,
    pub metrics: Option<MetricsConfig>,
    pub federation: Option<FederationOptions>,
    pub centers: Option<Vec<CenterProfile>>,
}

impl ConfigFile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn into_config(self) -> Result<FederationConfig> {
        let mut opts = self.federation.unwrap_or_default();
        if let Some(seed) = self.master_seed {
            opts.master_seed = seed;
        }
        let master_seed = opts.master_seed;
        let base = FederationConfig::desk_default(master_seed);
        let config = FederationConfig {
            rounds: self.rounds.unwrap_or(base.rounds),
            rule: self.rule.unwrap_or(base.rule),
            train: self.train.unwrap_or(base.train),
            model: self.model.unwrap_or(base.model),
            centers: self.centers.unwrap_or_else(|| federation(&opts)),
            master_seed,
            eval_every: self.eval_every.unwrap_or(base.eval_every),
            metrics: self.metrics.unwrap_or(base.metrics),
            per_center_init: self.per_center_init.unwrap_or(base.per_center_init),
        };
        config.validate()?;
        Ok(config)
    }
}

impl From<FederationConfig> for ConfigFile {
    fn from(c: FederationConfig) -> Self {
        Self {
            rounds: Some(c.rounds),
            master_seed: Some(c.master_seed),
            eval_every: Some(c.eval_every),
            per_center_init: Some(c.per_center_init),
            rule: Some(c.rule),
            train: Some(c.train),
            model: Some(c.model),
            metrics: Some(c.metrics),
            federation: None,
            centers: Some(c.centers),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    Large,
    Limited,
}

impl Pool {
    pub fn as_str(self) -> &'static str {
        match self {
            Pool::Large => "large",
            Pool::Limited => "limited",
        }
    }
}

/// Generates every center's data. Centers are independent streams, so they
/// are built in parallel and returned in config order.
pub fn prepare_data(config: &FederationConfig) -> Result<Vec<CenterDataset>> {
    config
        .centers
        .par_iter()
        .map(generate_center)
        .collect::<Result<Vec<_>>>()
}

pub fn datasets_digest(datasets: &[CenterDataset]) -> String {
    let mut h = Sha256::new();
    for d in datasets {
        h.update(d.digest().as_bytes());
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatientRow {
    pub model: String,
    pub pool: Pool,
    pub patient_id: String,
    pub center_id: u32,
    pub metrics: SegmentationMetrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub n_patients: usize,
    pub pre: f64,
    pub dsc: f64,
    pub avd_ml: f64,
    pub ald: f64,
    pub lf1: f64,
}

impl MetricSummary {
    pub fn from_metrics<'a>(
        metrics: impl IntoIterator<Item = &'a SegmentationMetrics>,
    ) -> Option<Self> {
        let list: Vec<&SegmentationMetrics> = metrics.into_iter().collect();
        if list.is_empty() {
            return None;
        }
        let n = list.len() as f64;
        let errors: Vec<RelativeErrors> = list.iter().map(|m| relative_errors(m)).collect();
        let mean =
            |f: &dyn Fn(&SegmentationMetrics) -> f64| list.iter().map(|m| f(m)).sum::<f64>() / n;
        Some(Self {
            n_patients: list.len(),
            pre: pre(&errors).expect("non-empty"),
            dsc: mean(&|m| m.dsc),
            avd_ml: mean(&|m| m.avd_ml),
            ald: mean(&|m| m.ald as f64),
            lf1: mean(&|m| m.lf1),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub pool: Pool,
    pub summary: MetricSummary,
    pub per_category: BTreeMap<LesionCategory, MetricSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterRecord {
    pub center_id: u32,
    pub pool: Pool,
    pub summary: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub pools: Vec<PoolRecord>,
    pub centers: Vec<CenterRecord>,
}

impl RoundRecord {
    pub fn pool(&self, pool: Pool) -> Option<&PoolRecord> {
        self.pools.iter().find(|p| p.pool == pool)
    }

    fn from_rows(round: usize, rows: &[PatientRow]) -> Self {
        let mut pools = Vec::new();
        for pool in [Pool::Large, Pool::Limited] {
            let in_pool: Vec<&PatientRow> = rows.iter().filter(|r| r.pool == pool).collect();
            let Some(summary) = MetricSummary::from_metrics(in_pool.iter().map(|r| &r.metrics))
            else {
                continue;
            };
            let per_category = LesionCategory::ALL
                .iter()
                .filter_map(|&c| {
                    MetricSummary::from_metrics(
                        in_pool
                            .iter()
                            .filter(|r| r.metrics.category == c)
                            .map(|r| &r.metrics),
                    )
                    .map(|s| (c, s))
                })
                .collect();
            pools.push(PoolRecord {
                pool,
                summary,
                per_category,
            });
        }
        let mut center_ids: Vec<(u32, Pool)> = rows.iter().map(|r| (r.center_id, r.pool)).collect();
        center_ids.dedup();
        let centers = center_ids
            .into_iter()
            .filter_map(|(id, pool)| {
                MetricSummary::from_metrics(
                    rows.iter()
                        .filter(|r| r.center_id == id)
                        .map(|r| &r.metrics),
                )
                .map(|summary| CenterRecord {
                    center_id: id,
                    pool,
                    summary,
                })
            })
            .collect();
        Self {
            round,
            pools,
            centers,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Rule name, or `centralized` for the pooled baseline.
    pub model: String,
    pub config: FederationConfig,
    pub dataset_digest: String,
    pub rounds: Vec<RoundRecord>,
    pub final_rows: Vec<PatientRow>,
    pub final_params_digest: String,
    pub wall_clock_secs: f64,
    pub digest: String,
    #[serde(skip)]
    pub final_params: Option<ParameterSet>,
    #[serde(skip)]
    pub checkpoints: Vec<(usize, ParameterSet)>,
}

impl ExperimentReport {
    pub fn final_round(&self) -> Option<&RoundRecord> {
        self.rounds.last()
    }

    pub fn round(&self, round: usize) -> Option<&RoundRecord> {
        self.rounds.iter().find(|r| r.round == round)
    }

    /// PRE over the final per-patient rows of one pool.
    pub fn final_pre(&self, pool: Pool) -> Option<f64> {
        let errors: Vec<RelativeErrors> = self
            .final_rows
            .iter()
            .filter(|r| r.pool == pool)
            .map(|r| relative_errors(&r.metrics))
            .collect();
        pre(&errors).ok()
    }

    fn seal(&mut self) {
        let mut h = Sha256::new();
        h.update(self.model.as_bytes());
        h.update(self.dataset_digest.as_bytes());
        h.update(rounds_csv(std::slice::from_ref(self)).as_bytes());
        h.update(per_patient_csv(std::slice::from_ref(self)).as_bytes());
        h.update(self.final_params_digest.as_bytes());
        self.digest = hex::encode(h.finalize());
    }
}

/// Scores `params` on every large center's test split and on every limited
/// center's full set.
pub fn evaluate_model(
    params: &ParameterSet,
    datasets: &[CenterDataset],
    model_name: &str,
    threshold: f64,
    metrics: &MetricsConfig,
) -> Result<Vec<PatientRow>> {
    let jobs: Vec<(Pool, &PhantomStudy)> = datasets
        .iter()
        .flat_map(|d| {
            let pool = if d.profile.is_large {
                Pool::Large
            } else {
                Pool::Limited
            };
            d.test.iter().map(move |s| (pool, s))
        })
        .collect();
    jobs.par_iter()
        .map(|&(pool, study)| {
            let pred = forward(params, study)?;
            let mask = predict_mask(&pred, threshold);
            Ok(PatientRow {
                model: model_name.to_string(),
                pool,
                patient_id: study.patient_id.clone(),
                center_id: study.center_id,
                metrics: evaluate_patient(&mask, &study.gt_mask, study.spacing, metrics)?,
            })
        })
        .collect()
}

fn shuffle_seed(center_seed: u64, round: usize) -> u64 {
    seed::derive(center_seed, &[tag::SHUFFLE, round as u64])
}

fn initial_params(config: &FederationConfig) -> Result<ParameterSet> {
    init_params(
        &config.model,
        seed::derive(config.master_seed, &[tag::INIT]),
    )
}

struct Tracker<'a> {
    config: &'a FederationConfig,
    datasets: &'a [CenterDataset],
    name: String,
    rounds: Vec<RoundRecord>,
    checkpoints: Vec<(usize, ParameterSet)>,
    last_rows: Vec<PatientRow>,
}

impl<'a> Tracker<'a> {
    fn new(config: &'a FederationConfig, datasets: &'a [CenterDataset], name: &str) -> Self {
        Self {
            config,
            datasets,
            name: name.to_string(),
            rounds: Vec::new(),
            checkpoints: Vec::new(),
            last_rows: Vec::new(),
        }
    }

    fn observe(&mut self, round: usize, params: &ParameterSet) -> Result<()> {
        if !self.config.is_eval_round(round) {
            return Ok(());
        }
        let rows = evaluate_model(
            params,
            self.datasets,
            &self.name,
            self.config.model.threshold,
            &self.config.metrics,
        )?;
        self.rounds.push(RoundRecord::from_rows(round, &rows));
        self.checkpoints.push((round, params.clone()));
        self.last_rows = rows;
        Ok(())
    }

    fn finish(self, params: ParameterSet, started: Instant) -> ExperimentReport {
        let mut report = ExperimentReport {
            model: self.name,
            config: self.config.clone(),
            dataset_digest: datasets_digest(self.datasets),
            rounds: self.rounds,
            final_rows: self.last_rows,
            final_params_digest: params.digest(),
            wall_clock_secs: started.elapsed().as_secs_f64(),
            digest: String::new(),
            final_params: Some(params),
            checkpoints: self.checkpoints,
        };
        report.seal();
        report
    }
}

/// One federated round: local training at every large center followed by
/// aggregation. Returns the aggregated parameters and the local models.
pub fn federated_round(
    config: &FederationConfig,
    datasets: &[CenterDataset],
    starts: &[ParameterSet],
    global: &ParameterSet,
    round: usize,
) -> Result<(ParameterSet, Vec<ParameterSet>)> {
    let large: Vec<&CenterDataset> = datasets.iter().filter(|d| d.profile.is_large).collect();
    if starts.len() != large.len() {
        return Err(Error::InvalidConfig(format!(
            "{} start models for {} large centers",
            starts.len(),
            large.len()
        )));
    }
    let anchor_mu = config.rule.proximal_mu();
    let locals: Vec<ParameterSet> = large
        .par_iter()
        .zip(starts.par_iter())
        .map(|(d, start)| {
            let mut cfg = config.train.clone();
            cfg.seed = shuffle_seed(d.profile.seed, round);
            if let Some(mu) = anchor_mu {
                cfg.mu = mu;
            }
            let anchor = anchor_mu.map(|_| global);
            train_local(start, &d.train, &config.model, &cfg, anchor)
        })
        .collect::<Result<Vec<_>>>()?;
    let sizes: Vec<usize> = large.iter().map(|d| d.train.len()).collect();
    let fused = aggregate(&config.rule, &locals, &sizes)?;
    Ok((fused, locals))
}

pub fn run_federated(config: &FederationConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let datasets = prepare_data(config)?;
    run_federated_on(config, &datasets)
}

/// Federated training over already generated data.
pub fn run_federated_on(
    config: &FederationConfig,
    datasets: &[CenterDataset],
) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let n_large = config.large_centers().count();
    let mut tracker = Tracker::new(config, datasets, config.rule.name());

    let mut global = initial_params(config)?;
    let mut starts: Vec<ParameterSet> = if config.per_center_init {
        config
            .large_centers()
            .map(|c| {
                init_params(
                    &config.model,
                    seed::derive(config.master_seed, &[tag::INIT, c.center_id as u64]),
                )
            })
            .collect::<Result<_>>()?
    } else {
        vec![global.clone(); n_large]
    };
    for round in 1..=config.rounds {
        let (fused, _) = federated_round(config, datasets, &starts, &global, round)?;
        global = fused;
        starts = vec![global.clone(); n_large];
        tracker.observe(round, &global)?;
    }
    Ok(tracker.finish(global, started))
}

pub fn run_centralized(config: &FederationConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let datasets = prepare_data(config)?;
    run_centralized_on(config, &datasets)
}

/// Trains one model on the pooled large-center training data for
/// `rounds * epochs_per_round` epochs, evaluated on the same schedule as the
/// federated path. The pooled shuffling seed is the XOR of the member center
/// seeds, so a single-center pool shuffles exactly like that center.
pub fn run_centralized_on(
    config: &FederationConfig,
    datasets: &[CenterDataset],
) -> Result<ExperimentReport> {
    config.validate()?;
    let started = Instant::now();
    let large: Vec<&CenterDataset> = datasets.iter().filter(|d| d.profile.is_large).collect();
    let pooled: Vec<PhantomStudy> = large.iter().flat_map(|d| d.train.iter().cloned()).collect();
    let pooled_seed = large.iter().fold(0u64, |acc, d| acc ^ d.profile.seed);
    let mut tracker = Tracker::new(config, datasets, CENTRALIZED);

    let mut params = initial_params(config)?;
    for round in 1..=config.rounds {
        let mut cfg = config.train.clone();
        cfg.seed = shuffle_seed(pooled_seed, round);
        params = train_local(&params, &pooled, &config.model, &cfg, None)?;
        tracker.observe(round, &params)?;
    }
    Ok(tracker.finish(params, started))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub dataset_digest: String,
    pub runs: Vec<ExperimentReport>,
    pub rankings: BTreeMap<Pool, ModelRanking>,
}

impl SuiteReport {
    pub fn run(&self, model: &str) -> Option<&ExperimentReport> {
        self.runs.iter().find(|r| r.model == model)
    }
}

/// The five rules with the config's FedProx `mu`.
pub fn suite_rules(base: &FederationConfig) -> Vec<AggregationRule> {
    AggregationRule::all_defaults()
        .into_iter()
        .map(|r| match r {
            AggregationRule::FedProx { .. } => AggregationRule::FedProx { mu: base.train.mu },
            other => other,
        })
        .collect()
}

/// Centralized baseline plus one federated run per rule, all on the same
/// generated data, ranked separately on the large and limited pools.
pub fn run_suite(base: &FederationConfig, rules: &[AggregationRule]) -> Result<SuiteReport> {
    base.validate()?;
    let datasets = prepare_data(base)?;
    run_suite_on(base, &datasets, rules)
}

pub fn run_suite_on(
    base: &FederationConfig,
    datasets: &[CenterDataset],
    rules: &[AggregationRule],
) -> Result<SuiteReport> {
    base.validate()?;
    let mut runs = vec![run_centralized_on(base, datasets)?];
    for rule in rules {
        let config = FederationConfig {
            rule: *rule,
            ..base.clone()
        };
        runs.push(run_federated_on(&config, datasets)?);
    }
    let mut rankings = BTreeMap::new();
    for pool in [Pool::Large, Pool::Limited] {
        let scores: BTreeMap<String, f64> = runs
            .iter()
            .filter_map(|r| r.final_pre(pool).map(|p| (r.model.clone(), p)))
            .collect();
        if !scores.is_empty() {
            rankings.insert(pool, rank_models(&scores));
        }
    }
    Ok(SuiteReport {
        dataset_digest: datasets_digest(datasets),
        runs,
        rankings,
    })
}

pub const ROUNDS_HEADER: &str = "round,rule,pool,pre,dsc,avd_ml,ald,lf1";
pub const PER_PATIENT_HEADER: &str =
    "model,pool,patient_id,center_id,category,dsc,avd_ml,ald,lf1,gt_volume_ml,gt_lesion_count";

pub fn rounds_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(ROUNDS_HEADER);
    out.push('\n');
    for r in reports {
        for rec in &r.rounds {
            for p in &rec.pools {
                let s = &p.summary;
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    rec.round,
                    r.model,
                    p.pool.as_str(),
                    s.pre,
                    s.dsc,
                    s.avd_ml,
                    s.ald,
                    s.lf1
                );
            }
        }
    }
    out
}

pub fn per_patient_csv(reports: &[ExperimentReport]) -> String {
    let mut out = String::from(PER_PATIENT_HEADER);
    out.push('\n');
    for r in reports {
        push_patient_rows(&mut out, &r.final_rows);
    }
    out
}

fn push_patient_rows(out: &mut String, rows: &[PatientRow]) {
    for row in rows {
        let m = &row.metrics;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{}",
            row.model,
            row.pool.as_str(),
            row.patient_id,
            row.center_id,
            m.category,
            m.dsc,
            m.avd_ml,
            m.ald,
            m.lf1,
            m.gt_volume_ml,
            m.gt_lesion_count
        );
    }
}

pub fn ranking_csv(rankings: &BTreeMap<Pool, ModelRanking>) -> String {
    let mut out = String::from("pool,rank,model,pre\n");
    for (pool, ranking) in rankings {
        for (i, e) in ranking.entries.iter().enumerate() {
            let _ = writeln!(out, "{},{},{},{}", pool.as_str(), i + 1, e.model, e.pre);
        }
    }
    out
}

pub fn ranking_text(rankings: &BTreeMap<Pool, ModelRanking>) -> String {
    let mut out = String::new();
    for (pool, ranking) in rankings {
        let _ = writeln!(out, "{} centers", pool.as_str());
        let _ = writeln!(out, "  {:>4}  {:<12} {:>8}", "rank", "model", "PRE");
        for (i, e) in ranking.entries.iter().enumerate() {
            let _ = writeln!(out, "  {:>4}  {:<12} {:>8.4}", i + 1, e.model, e.pre);
        }
    }
    out
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn write_checkpoints(dir: &Path, report: &ExperimentReport) -> Result<()> {
    let ckpt_dir = dir.join("checkpoints").join(&report.model);
    fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;
    for (round, params) in &report.checkpoints {
        let meta = CheckpointMeta {
            round: *round as u32,
            rule: report.model.clone(),
            seed: report.config.master_seed,
        };
        write_checkpoint(
            &ckpt_dir.join(format!("round_{round:04}.ckpt")),
            params,
            &meta,
        )?;
    }
    Ok(())
}

/// Writes `report.json`, `rounds.csv`, `per_patient.csv` and checkpoints
/// for a single run.
pub fn write_experiment(dir: &Path, report: &ExperimentReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(report)?,
    )?;
    write_file(
        &dir.join("rounds.csv"),
        &rounds_csv(std::slice::from_ref(report)),
    )?;
    write_file(
        &dir.join("per_patient.csv"),
        &per_patient_csv(std::slice::from_ref(report)),
    )?;
    write_checkpoints(dir, report)
}

/// Writes the suite outputs plus `ranking.csv` and `ranking.txt`.
pub fn write_suite(dir: &Path, suite: &SuiteReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(
        &dir.join("report.json"),
        &serde_json::to_string_pretty(suite)?,
    )?;
    write_file(&dir.join("rounds.csv"), &rounds_csv(&suite.runs))?;
    write_file(&dir.join("per_patient.csv"), &per_patient_csv(&suite.runs))?;
    write_file(&dir.join("ranking.csv"), &ranking_csv(&suite.rankings))?;
    write_file(&dir.join("ranking.txt"), &ranking_text(&suite.rankings))?;
    for run in &suite.runs {
        write_checkpoints(dir, run)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct PatientCsvRecord {
    #[serde(default)]
    model: Option<String>,
    #[serde(default)]
    pool: Option<Pool>,
    patient_id: String,
    center_id: u32,
    category: LesionCategory,
    dsc: f64,
    avd_ml: f64,
    ald: usize,
    lf1: f64,
    gt_volume_ml: f64,
    gt_lesion_count: usize,
}

/// Reads a per-patient CSV. Rows without a `model` column are attributed to
/// `default_model`; rows without a `pool` column to the large pool.
pub fn read_per_patient_csv(path: &Path, default_model: &str) -> Result<Vec<PatientRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize::<PatientCsvRecord>()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::format(path, e.to_string()))?;
            Ok(PatientRow {
                model: rec.model.unwrap_or_else(|| default_model.to_string()),
                pool: rec.pool.unwrap_or(Pool::Large),
                patient_id: rec.patient_id,
                center_id: rec.center_id,
                metrics: SegmentationMetrics {
                    dsc: rec.dsc,
                    avd_ml: rec.avd_ml,
                    ald: rec.ald,
                    lf1: rec.lf1,
                    gt_volume_ml: rec.gt_volume_ml,
                    gt_lesion_count: rec.gt_lesion_count,
                    category: rec.category,
                },
            })
        })
        .collect()
}

/// PRE per model, ranked separately for each pool present in `rows`.
pub fn rank_rows(rows: &[PatientRow]) -> Result<BTreeMap<Pool, ModelRanking>> {
    let mut grouped: BTreeMap<Pool, BTreeMap<String, Vec<RelativeErrors>>> = BTreeMap::new();
    for row in rows {
        grouped
            .entry(row.pool)
            .or_default()
            .entry(row.model.clone())
            .or_default()
            .push(relative_errors(&row.metrics));
    }
    grouped
        .into_iter()
        .map(|(pool, models)| {
            let scores = models
                .into_iter()
                .map(|(model, errors)| Ok((model, pre(&errors)?)))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok((pool, rank_models(&scores)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundsRow {
    pub round: usize,
    pub rule: String,
    pub pool: Pool,
    pub pre: f64,
    pub dsc: f64,
    pub avd_ml: f64,
    pub ald: f64,
    pub lf1: f64,
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundsRow>> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    reader
        .deserialize::<RoundsRow>()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

pub const PREDICTIONS_DIR: &str = "predictions";

pub fn prediction_file_name(patient_id: &str) -> String {
    format!("{patient_id}.raster")
}

/// Writes one single-channel mask raster per evaluated patient, named after
/// the patient id.
pub fn write_predictions(
    dir: &Path,
    params: &ParameterSet,
    datasets: &[CenterDataset],
    threshold: f64,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for study in datasets.iter().flat_map(|d| d.test.iter()) {
        let mask = predict_mask(&forward(params, study)?, threshold);
        let path = dir.join(prediction_file_name(&study.patient_id));
        crate::raster::write_raster(&path, &crate::raster::mask_raster(&mask, study.spacing))?;
    }
    Ok(())
}

/// Scores saved prediction rasters against a generated dataset. Every
/// evaluated patient of the dataset needs a prediction file.
pub fn evaluate_predictions(
    datasets: &[CenterDataset],
    pred_dir: &Path,
    model_name: &str,
    metrics: &MetricsConfig,
) -> Result<Vec<PatientRow>> {
    datasets
        .iter()
        .flat_map(|d| {
            let pool = if d.profile.is_large {
                Pool::Large
            } else {
                Pool::Limited
            };
            d.test.iter().map(move |s| (pool, s))
        })
        .map(|(pool, study)| {
            let path = pred_dir.join(prediction_file_name(&study.patient_id));
            let raster = crate::raster::read_raster(&path)?;
            let mask = raster
                .mask(0)
                .ok_or_else(|| Error::format(&path, "prediction raster has no channels"))?;
            Ok(PatientRow {
                model: model_name.to_string(),
                pool,
                patient_id: study.patient_id.clone(),
                center_id: study.center_id,
                metrics: evaluate_patient(&mask, &study.gt_mask, study.spacing, metrics)?,
            })
        })
        .collect()
}

/// Per-patient CSV for rows not attached to a report.
pub fn rows_csv(rows: &[PatientRow]) -> String {
    let mut out = String::from(PER_PATIENT_HEADER);
    out.push('\n');
    push_patient_rows(&mut out, rows);
    out
}
