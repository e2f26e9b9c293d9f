//! Experiment runner: config parsing, grid execution, results emission.
//!
//! Subcommands map onto the experiment grid: `train` fits one
//! variant/seed cell and writes a checkpoint, `eval` re-scores a saved
//! checkpoint, `sweep` crosses variants × seeds × corruption levels,
//! `ablate` runs the fixed four-variant comparison, and `selftest`
//! runs the fast invariant suite. Every cell is deterministic given
//! `(config, seed)`; rerunning any subcommand reproduces its results
//! file except for the wall-clock column.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use fleetfuse::checkpoint;
use fleetfuse::model::{Model, Variant};
use fleetfuse::seeding;
use fleetfuse::train::{self, EvalReport, TrainConfig};
use fleetfuse::world::ScenarioConfig;

/// Error category decides the process exit code: configuration and
/// usage problems exit 1, runtime failures exit 2.
#[derive(Debug)]
pub enum CliError {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(e) => write!(f, "config error: {e:#}"),
            CliError::Runtime(e) => write!(f, "runtime error: {e:#}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn config_err<T>(e: anyhow::Error) -> CliResult<T> {
    Err(CliError::Config(e))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmitFormat {
    #[default]
    Csv,
    Json,
}

impl EmitFormat {
    pub fn extension(self) -> &'static str {
        match self {
            EmitFormat::Csv => "csv",
            EmitFormat::Json => "json",
        }
    }
}

/// Top-level experiment description, one JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub scenario: ScenarioConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub emit: EmitFormat,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioConfig::default(),
            train: TrainConfig::default(),
            output_dir: default_output_dir(),
            emit: EmitFormat::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config file {}", path.display()))
            .or_else(config_err)?;
        let config: Self = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config file {}", path.display()))
            .or_else(config_err)?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> CliResult<()> {
        self.scenario
            .validate()
            .map_err(|e| CliError::Config(anyhow!(e)))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(anyhow!(e)))?;
        Ok(())
    }
}

/// One emitted grid cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsRow {
    pub variant: String,
    pub seed: u64,
    /// Corruption probability of the scenario this cell ran under.
    pub p: f64,
    pub adr: f64,
    pub eir: f64,
    pub ps_kb: f64,
    pub epochs: usize,
    pub wall_seconds: f64,
}

pub const CSV_HEADER: &str = "variant,seed,p,adr,eir,ps_kb,epochs,wall_seconds";

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Render rows in the requested format; floats carry four decimals and
/// the output is newline-terminated.
pub fn render_results(rows: &[ResultsRow], format: EmitFormat) -> String {
    match format {
        EmitFormat::Csv => {
            let mut out = String::from(CSV_HEADER);
            out.push('\n');
            for r in rows {
                writeln!(
                    out,
                    "{},{},{:.4},{:.4},{:.4},{:.4},{},{:.4}",
                    r.variant, r.seed, r.p, r.adr, r.eir, r.ps_kb, r.epochs, r.wall_seconds
                )
                .expect("write to string");
            }
            out
        }
        EmitFormat::Json => {
            let rounded: Vec<ResultsRow> = rows
                .iter()
                .map(|r| ResultsRow {
                    variant: r.variant.clone(),
                    seed: r.seed,
                    p: round4(r.p),
                    adr: round4(r.adr),
                    eir: round4(r.eir),
                    ps_kb: round4(r.ps_kb),
                    epochs: r.epochs,
                    wall_seconds: round4(r.wall_seconds),
                })
                .collect();
            let mut out =
                serde_json::to_string_pretty(&rounded).expect("rows serialize");
            out.push('\n');
            out
        }
    }
}

pub fn emit_results(
    rows: &[ResultsRow],
    format: EmitFormat,
    path: &Path,
) -> CliResult<()> {
    if rows.is_empty() {
        return Err(CliError::Runtime(anyhow!("no rows to emit")));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))
            .map_err(CliError::Runtime)?;
    }
    std::fs::write(path, render_results(rows, format))
        .with_context(|| format!("cannot write results file {}", path.display()))
        .map_err(CliError::Runtime)?;
    Ok(())
}

/// Train one `(variant, seed)` cell and score it on the shared test
/// corpus. Returns the row plus the trained model for checkpointing.
pub fn run_cell(
    scenario: &ScenarioConfig,
    train_config: &TrainConfig,
    seed: u64,
) -> CliResult<(ResultsRow, Model, EvalReport)> {
    let started = Instant::now();
    let outcome = train::train(scenario, train_config, seed)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let test = train::generate_frames(scenario, "test", train_config.test_frames)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let report =
        train::evaluate(&outcome.model, &test).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let row = ResultsRow {
        variant: train_config.model.variant.tag().to_string(),
        seed,
        p: scenario.corruption_prob,
        adr: report.metrics.adr.unwrap_or(f64::NAN),
        eir: report.metrics.eir,
        ps_kb: report.metrics.ps_kb,
        epochs: train_config.epochs,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    Ok((row, outcome.model, report))
}

/// Canonical checkpoint path for a trained cell.
pub fn checkpoint_path(output_dir: &Path, variant: Variant, seed: u64) -> PathBuf {
    output_dir.join(format!("{}_s{}.ffck", variant.tag(), seed))
}

fn results_path(output_dir: &Path, stem: &str, format: EmitFormat) -> PathBuf {
    output_dir.join(format!("{stem}.{}", format.extension()))
}

/// `train` subcommand: one cell, checkpoint + single-row results file.
pub fn run_train(config: &ExperimentConfig, seed: u64) -> CliResult<ResultsRow> {
    let (row, model, _) = run_cell(&config.scenario, &config.train, seed)?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| {
            format!(
                "cannot create output directory {}",
                config.output_dir.display()
            )
        })
        .map_err(CliError::Runtime)?;
    let ckpt = checkpoint_path(&config.output_dir, config.train.model.variant, seed);
    checkpoint::save(&ckpt, &model).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    log::info!("checkpoint written to {}", ckpt.display());
    let stem = format!("train_{}_s{}", config.train.model.variant.tag(), seed);
    emit_results(
        std::slice::from_ref(&row),
        config.emit,
        &results_path(&config.output_dir, &stem, config.emit),
    )?;
    Ok(row)
}

/// `eval` subcommand: load the cell's checkpoint and re-score it.
pub fn run_eval(config: &ExperimentConfig, seed: u64) -> CliResult<ResultsRow> {
    let started = Instant::now();
    let mut init_rng = seeding::stream(seed, "init", 0);
    let mut model = Model::init(&config.scenario, config.train.model, &mut init_rng)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let ckpt = checkpoint_path(&config.output_dir, config.train.model.variant, seed);
    checkpoint::load(&ckpt, &mut model).map_err(|e| {
        CliError::Runtime(anyhow!(e).context(format!("loading checkpoint {}", ckpt.display())))
    })?;
    let test = train::generate_frames(&config.scenario, "test", config.train.test_frames)
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let report = train::evaluate(&model, &test).map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let row = ResultsRow {
        variant: config.train.model.variant.tag().to_string(),
        seed,
        p: config.scenario.corruption_prob,
        adr: report.metrics.adr.unwrap_or(f64::NAN),
        eir: report.metrics.eir,
        ps_kb: report.metrics.ps_kb,
        epochs: 0,
        wall_seconds: started.elapsed().as_secs_f64(),
    };
    let stem = format!("eval_{}_s{}", config.train.model.variant.tag(), seed);
    emit_results(
        std::slice::from_ref(&row),
        config.emit,
        &results_path(&config.output_dir, &stem, config.emit),
    )?;
    Ok(row)
}

/// Outcome of one grid execution: completed rows plus per-cell failures.
#[derive(Debug)]
pub struct GridOutcome {
    pub rows: Vec<ResultsRow>,
    /// `(variant, seed, p, message)` per failed cell.
    pub failures: Vec<(Variant, u64, f64, String)>,
}

/// Run a variant × seed × p grid. Cells are independent jobs; `jobs`
/// bounds worker threads (0 = one per core). Row order is the
/// deterministic grid order regardless of scheduling, and failed cells
/// never poison completed ones.
pub fn run_grid(
    config: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    p_list: &[f64],
    jobs: usize,
) -> CliResult<GridOutcome> {
    if variants.is_empty() || seeds.is_empty() || p_list.is_empty() {
        return config_err(anyhow!("variants, seeds, and p lists must be non-empty"));
    }
    for &p in p_list {
        if !(0.0..=1.0).contains(&p) {
            return config_err(anyhow!("corruption probability {p} outside [0, 1]"));
        }
    }
    let mut cells = Vec::new();
    for &p in p_list {
        for &variant in variants {
            for &seed in seeds {
                cells.push((variant, seed, p));
            }
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(anyhow!(e)))?;
    let results: Vec<Result<ResultsRow, (Variant, u64, f64, String)>> = pool.install(|| {
        cells
            .par_iter()
            .map(|&(variant, seed, p)| {
                let mut scenario = config.scenario.clone();
                scenario.corruption_prob = p;
                let mut train_config = config.train;
                train_config.model.variant = variant;
                log::info!("cell {} seed {seed} p {p}", variant.tag());
                run_cell(&scenario, &train_config, seed)
                    .map(|(row, _, _)| row)
                    .map_err(|e| (variant, seed, p, e.to_string()))
            })
            .collect()
    });
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for result in results {
        match result {
            Ok(row) => rows.push(row),
            Err(f) => failures.push(f),
        }
    }
    Ok(GridOutcome { rows, failures })
}

/// `sweep` subcommand: emit the grid; completed rows survive failures.
pub fn run_sweep(
    config: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    p_list: &[f64],
    jobs: usize,
) -> CliResult<GridOutcome> {
    let outcome = run_grid(config, variants, seeds, p_list, jobs)?;
    if !outcome.rows.is_empty() {
        emit_results(
            &outcome.rows,
            config.emit,
            &results_path(&config.output_dir, "sweep", config.emit),
        )?;
    }
    for (variant, seed, p, message) in &outcome.failures {
        log::error!("cell {} seed {seed} p {p} failed: {message}", variant.tag());
    }
    Ok(outcome)
}

pub const ABLATION_VARIANTS: [Variant; 4] = [
    Variant::Full,
    Variant::NoSelect,
    Variant::NoBayes,
    Variant::Neither,
];

/// Per-variant mean ± sample standard deviation over seeds.
pub fn summarize(rows: &[ResultsRow]) -> Vec<(String, f64, f64, usize)> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
    }
    order
        .into_iter()
        .map(|variant| {
            let adrs: Vec<f64> = rows
                .iter()
                .filter(|r| r.variant == variant)
                .map(|r| r.adr)
                .collect();
            let n = adrs.len();
            let mean = adrs.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (adrs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1) as f64)
                    .sqrt()
            } else {
                0.0
            };
            (variant, mean, std, n)
        })
        .collect()
}

/// `ablate` subcommand: the fixed four-variant grid at the config's
/// corruption level, with a printed mean ± std summary.
pub fn run_ablate(config: &ExperimentConfig, seeds: &[u64], jobs: usize) -> CliResult<GridOutcome> {
    let outcome = run_grid(
        config,
        &ABLATION_VARIANTS,
        seeds,
        &[config.scenario.corruption_prob],
        jobs,
    )?;
    if !outcome.rows.is_empty() {
        emit_results(
            &outcome.rows,
            config.emit,
            &results_path(&config.output_dir, "ablate", config.emit),
        )?;
    }
    for (variant, seed, p, message) in &outcome.failures {
        log::error!("cell {} seed {seed} p {p} failed: {message}", variant.tag());
    }
    Ok(outcome)
}

/// Render the ablation summary block.
pub fn ablation_summary(rows: &[ResultsRow]) -> String {
    let summary = summarize(rows);
    let mut out = String::from("variant mean ADR ± std over seeds:\n");
    for (variant, mean, std, n) in &summary {
        writeln!(out, "  {variant:<13} {mean:.4} ± {std:.4}  (n={n})").expect("write to string");
    }
    let mean_of = |tag: &str| {
        summary
            .iter()
            .find(|(v, ..)| v == tag)
            .map(|&(_, mean, ..)| mean)
    };
    if let (Some(full), Some(no_select), Some(no_bayes), Some(neither)) = (
        mean_of("full"),
        mean_of("no_select"),
        mean_of("no_bayes"),
        mean_of("neither"),
    ) {
        let ordered = full >= no_select && no_select >= no_bayes && no_bayes >= neither;
        writeln!(
            out,
            "ordering full >= no_select >= no_bayes >= neither: {}",
            if ordered { "holds" } else { "violated" }
        )
        .expect("write to string");
    }
    out
}

/// `selftest` subcommand: run the invariant suite, one line per check.
pub fn run_selftest() -> CliResult<()> {
    let reports = fleetfuse::selfcheck::run_all();
    let mut failed = 0;
    for r in &reports {
        println!(
            "[{}] {} — {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
        if !r.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        Err(CliError::Runtime(anyhow!(
            "{failed} of {} checks failed",
            reports.len()
        )))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(variant: &str, seed: u64, adr: f64) -> ResultsRow {
        ResultsRow {
            variant: variant.to_string(),
            seed,
            p: 0.3,
            adr,
            eir: 0.75,
            ps_kb: 0.5123456,
            epochs: 2,
            wall_seconds: 1.25,
        }
    }

    #[test]
    fn csv_has_fixed_header_and_four_decimals() {
        let rows = vec![row("full", 1, 0.66666)];
        let text = render_results(&rows, EmitFormat::Csv);
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), CSV_HEADER);
        assert_eq!(
            lines.next().unwrap(),
            "full,1,0.3000,0.6667,0.7500,0.5123,2,1.2500"
        );
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn json_round_trips() {
        let rows = vec![row("full", 1, 0.66666), row("neither", 2, 0.5)];
        let text = render_results(&rows, EmitFormat::Json);
        let back: Vec<ResultsRow> = serde_json::from_str(&text).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].adr, 0.6667);
        assert_eq!(back[1].variant, "neither");
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let err = serde_json::from_str::<ExperimentConfig>(r#"{"output_dirr": "x"}"#)
            .unwrap_err()
            .to_string();
        assert!(err.contains("output_dirr"), "{err}");
    }

    #[test]
    fn config_parse_serialize_parse_is_identity() {
        let text = r#"{
            "scenario": {"corruption_prob": 0.5, "seed": 11},
            "train": {"epochs": 3, "model": {"variant": "no_bayes"}},
            "output_dir": "out",
            "emit": "json"
        }"#;
        let config: ExperimentConfig = serde_json::from_str(text).unwrap();
        let round: ExperimentConfig =
            serde_json::from_str(&serde_json::to_string(&config).unwrap()).unwrap();
        assert_eq!(config, round);
        assert_eq!(config.scenario.corruption_prob, 0.5);
        assert_eq!(config.train.model.variant, Variant::NoBayes);
    }

    #[test]
    fn missing_config_error_names_the_path() {
        let err = ExperimentConfig::load(Path::new("/no/such/config.json")).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("/no/such/config.json"));
    }

    #[test]
    fn summary_means_and_stds() {
        let rows = vec![
            row("full", 1, 0.8),
            row("full", 2, 0.9),
            row("neither", 1, 0.5),
        ];
        let summary = summarize(&rows);
        assert_eq!(summary.len(), 2);
        let (ref v, mean, std, n) = summary[0];
        assert_eq!(v, "full");
        assert!((mean - 0.85).abs() < 1e-12);
        assert!((std - (0.005f64).sqrt()).abs() < 1e-12);
        assert_eq!(n, 2);
        assert_eq!(summary[1].2, 0.0);
    }

    #[test]
    fn empty_rows_cannot_be_emitted() {
        let dir = tempfile::tempdir().unwrap();
        let err = emit_results(&[], EmitFormat::Csv, &dir.path().join("r.csv")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn grid_rejects_bad_probability() {
        let config = ExperimentConfig::default();
        let err = run_grid(&config, &[Variant::Full], &[1], &[1.5], 1).unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }
}
