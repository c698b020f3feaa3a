//! Command-line driver: config parsing, the phase pipeline and report
//! persistence. `run_command` is the whole program; `main` only forwards
//! argv and the exit code.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use levyscale::ergodics::{default_burn_in, sample_invariant};
use levyscale::harness::{
    build_model, estimate_contraction_rate, resolve_drifts, run_strong_experiment, run_weak_experiment, streams,
    DriftTable, ErrorReport, ExperimentConfig,
};
use levyscale::integrator::{choose_step, fit_step, simulate_coupled};
use levyscale::model::{validate_structural_conditions, ModelSpec, ProbeSpec, Regime};
use levyscale::noise::{empirical_cf_check, increment_sequence, StableNoiseSpec};
use levyscale::Error;

/// Failure of a CLI run, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Rejected request: exit 2.
    Config(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => m,
        }
    }

    /// Machine-readable form printed on failure.
    pub fn to_json(&self) -> String {
        let kind = if matches!(self, CliError::Config(_)) { "configuration" } else { "runtime" };
        serde_json::json!({ "error": kind, "exit_code": self.exit_code(), "message": self.message() }).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        if e.is_configuration() {
            CliError::Config(e.to_string())
        } else {
            CliError::Runtime(e.to_string())
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parse a JSON config, fill defaults and check every invariant. Unknown
/// keys and violated constraints produce messages naming the key.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Parser)]
#[command(name = "levyscale", version, about = "Averaging-rate experiments for stable-driven slow-fast systems")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config; defaults apply to missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Benchmark model name ("linear" or "sine").
    #[arg(long, global = true)]
    pub model: Option<String>,
    /// Regime tag R1..R4.
    #[arg(long, global = true)]
    pub regime: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; falls back to LEVYSCALE_THREADS.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, default_value = "levyscale-out")]
    pub out: PathBuf,
    /// Directory of reusable drift tables.
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Probe the structural conditions of the model.
    Validate,
    /// One coupled path at a given ε, written as CSV.
    Simulate {
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Frozen invariant ensemble at `x0`, written as CSV.
    Invariant,
    /// Tabulate the averaged drifts of the regime.
    Corrector,
    StrongRate,
    WeakRate,
    /// Characteristic-function check of both stable drivers.
    NoiseTest {
        #[arg(long, default_value_t = 20_000)]
        samples: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Simulate { .. } => "simulate",
            Command::Invariant => "invariant",
            Command::Corrector => "corrector",
            Command::StrongRate => "strong-rate",
            Command::WeakRate => "weak-rate",
            Command::NoiseTest { .. } => "noise-test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub name: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config: ExperimentConfig,
    /// The default table every missing config key was filled from.
    pub defaults: ExperimentConfig,
    pub config_hash: String,
    pub seed: u64,
    pub threads: usize,
    pub artifacts: Vec<PathBuf>,
    pub phases: Vec<Phase>,
}

struct Run {
    out: PathBuf,
    artifacts: Vec<PathBuf>,
    phases: Vec<Phase>,
}

impl Run {
    fn phase<T>(&mut self, name: &str, f: impl FnOnce() -> CliResult<T>) -> CliResult<T> {
        let start = Instant::now();
        let v = f()?;
        self.phases.push(Phase { name: name.into(), seconds: start.elapsed().as_secs_f64() });
        Ok(v)
    }

    fn write(&mut self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.artifacts.push(path.clone());
        Ok(path)
    }

    fn write_report(&mut self, stem: &str, report: &ErrorReport) -> CliResult<()> {
        for fmt in [ReportFormat::Csv, ReportFormat::Json] {
            let path = self.out.join(format!("{stem}.{}", fmt.extension()));
            write_report(report, &path, fmt)?;
            self.artifacts.push(path);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// One line of the CSV form of an [`ErrorReport`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub eps: f64,
    pub error: f64,
    pub spread: f64,
    pub predictor: f64,
    pub regime: Regime,
    pub stat: String,
}

pub const CSV_HEADER: &str = "eps,error,spread,predictor,regime,stat";

/// Write a report as CSV rows or as the full JSON document. Floats use the
/// shortest decimal that round-trips.
pub fn write_report(report: &ErrorReport, path: &Path, format: ReportFormat) -> CliResult<()> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(report).map_err(|e| io_err(path, e))?;
            fs::write(path, text + "\n").map_err(|e| io_err(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
            for r in &report.rows {
                let row = CsvRow {
                    eps: r.eps,
                    error: r.error,
                    spread: r.spread,
                    predictor: r.predictor,
                    regime: r.regime,
                    stat: r.stat.clone(),
                };
                w.serialize(row).map_err(|e| io_err(path, e))?;
            }
            w.flush().map_err(|e| io_err(path, e))
        }
    }
}

pub fn read_report(path: &Path) -> CliResult<ErrorReport> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_err(path, e))
}

pub fn read_report_csv(path: &Path) -> CliResult<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}

/// Cache key of a drift table: everything its values depend on.
pub fn table_cache_key(model: &ModelSpec, cfg: &ExperimentConfig) -> String {
    let spec = serde_json::to_string(&cfg.tabulation).expect("tabulation spec serializes");
    let mut h = Sha256::new();
    h.update(model.fingerprint().as_bytes());
    h.update(spec.as_bytes());
    h.update(cfg.t_end.to_le_bytes());
    h.update(cfg.seed.to_le_bytes());
    h.finalize().iter().take(12).map(|b| format!("{b:02x}")).collect()
}

fn table_path(dir: &Path, table: &DriftTable, key: &str) -> PathBuf {
    dir.join(format!("drift-{}-{key}.json", table.kind.label().to_ascii_lowercase()))
}

fn load_cache(dir: &Path, key: &str) -> CliResult<Vec<DriftTable>> {
    let Ok(entries) = fs::read_dir(dir) else {
        return Ok(Vec::new());
    };
    let mut tables = Vec::new();
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("drift-") && name.ends_with(&format!("-{key}.json")) {
            let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
            tables.push(serde_json::from_str(&text).map_err(|e| io_err(&p, e))?);
        }
    }
    Ok(tables)
}

fn store_cache(dir: &Path, key: &str, tables: &[DriftTable]) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for t in tables {
        let p = table_path(dir, t, key);
        let text = serde_json::to_string(t).map_err(|e| io_err(&p, e))?;
        fs::write(&p, text).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

fn thread_count(flag: Option<usize>) -> CliResult<usize> {
    if let Some(n) = flag {
        return Ok(n);
    }
    match std::env::var("LEVYSCALE_THREADS") {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("LEVYSCALE_THREADS: not a count: {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Config(format!("config: {}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config: {e}")))?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(m) = &cli.model {
        cfg.model = m.clone();
    }
    if let Some(r) = &cli.regime {
        cfg.regime = r.parse().map_err(|e: Error| CliError::Config(format!("regime: {e}")))?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Run the program on `argv` (including the program name). Returns the exit
/// code and, on success, the manifest that was written to the output dir.
pub fn run_command<I, S>(argv: I) -> (i32, Option<RunManifest>)
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return (0, None);
            }
            let err = CliError::Config(e.to_string());
            eprintln!("{}", err.to_json());
            return (err.exit_code(), None);
        }
    };
    match execute(&cli) {
        Ok(m) => (0, Some(m)),
        Err(e) => {
            eprintln!("{}", e.to_json());
            (e.exit_code(), None)
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<RunManifest> {
    let cfg = resolve_config(cli)?;
    let threads = thread_count(cli.threads)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    fs::create_dir_all(&cli.out).map_err(|e| io_err(&cli.out, e))?;
    let mut run = Run { out: cli.out.clone(), artifacts: Vec::new(), phases: Vec::new() };
    pool.install(|| pipeline(cli, &cfg, &mut run))?;
    let manifest = RunManifest {
        command: cli.command.name().into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
        config: cfg,
        defaults: ExperimentConfig::default(),
        threads: pool.current_num_threads(),
        artifacts: run.artifacts.clone(),
        phases: run.phases.clone(),
    };
    let path = cli.out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&path, e))?;
    fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}

fn pipeline(cli: &Cli, cfg: &ExperimentConfig, run: &mut Run) -> CliResult<()> {
    let model = run.phase("model", || Ok(build_model(cfg)?))?;
    match &cli.command {
        Command::Validate => {
            let report = run.phase("conditions", || {
                Ok(validate_structural_conditions(&model, ProbeSpec::default(), cfg.stream(streams::CONDITIONS))?)
            })?;
            let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Runtime(e.to_string()))?;
            println!("{text}");
            run.write("conditions.json", &(text + "\n"))?;
        }
        Command::Simulate { eps } => {
            let eps = eps.unwrap_or(cfg.eps_grid[0]);
            let sched = cfg.schedule()?;
            let path = run.phase("simulate", || {
                let (_, h) = fit_step(cfg.t_end, choose_step(eps, &sched, cfg.kappa_cfl))?;
                Ok(simulate_coupled(&model, &sched, eps, &cfg.x0, &cfg.y0, cfg.t_end, h, cfg.stream(streams::SIMULATE))?)
            })?;
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["time".to_string()];
            header.extend((0..model.d1).map(|i| format!("x{i}")));
            header.extend((0..model.d2).map(|j| format!("y{j}")));
            let csv_err = |e: csv::Error| CliError::Runtime(e.to_string());
            w.write_record(&header).map_err(csv_err)?;
            for (k, &t) in path.times.iter().enumerate() {
                let mut rec = vec![t];
                rec.extend(path.xs.row(k).iter());
                rec.extend(path.ys.row(k).iter());
                w.serialize(rec).map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
            run.write("path.csv", &String::from_utf8_lossy(&bytes))?;
        }
        Command::Invariant => {
            let spec = &cfg.tabulation;
            let ens = run.phase("invariant", || {
                let rate = estimate_contraction_rate(&model, spec, cfg.stream(streams::RATE))?;
                let burn = default_burn_in(rate, 1e-3);
                Ok(sample_invariant(&model, &cfg.x0, burn, spec.ensemble_n, spec.thin, spec.h, cfg.stream(streams::ENSEMBLES))?)
            })?;
            run.write("ensemble.csv", &ens.to_csv())?;
        }
        Command::Corrector => {
            let tables = drift_tables(cli, cfg, &model, cfg.regime, run)?;
            let key = table_cache_key(&model, cfg);
            for t in &tables {
                let name = table_path(Path::new(""), t, &key);
                let text = serde_json::to_string_pretty(t).map_err(|e| CliError::Runtime(e.to_string()))?;
                run.write(name.to_str().expect("ascii file name"), &(text + "\n"))?;
            }
        }
        Command::StrongRate | Command::WeakRate => {
            let strong = matches!(cli.command, Command::StrongRate);
            if strong {
                // reject R3/R4 before any expensive tabulation
                let sched = cfg.schedule()?;
                levyscale::harness::predictor_terms(
                    cfg.regime,
                    levyscale::harness::RateKind::Strong,
                    cfg.alpha1,
                    cfg.alpha2,
                    cfg.v,
                    &sched,
                )?;
            }
            let main = resolve(cli, cfg, &model, cfg.regime, run)?;
            let comps = cfg
                .compare
                .iter()
                .map(|&r| resolve(cli, cfg, &model, r, run))
                .collect::<CliResult<Vec<_>>>()?;
            if strong {
                let report = run.phase("strong", || Ok(run_strong_experiment(cfg, &model, &main, &comps)?))?;
                run.write_report("strong", &report)?;
            } else {
                let reports = run.phase("weak", || Ok(run_weak_experiment(cfg, &model, &main, &comps)?))?;
                for r in &reports {
                    let stem = format!("weak-{}", r.stat.trim_start_matches("phi="));
                    run.write_report(&stem, r)?;
                }
            }
        }
        Command::NoiseTest { samples } => {
            let n = *samples;
            let result = run.phase("noise", || {
                let u_grid: Vec<f64> = (1..=12).map(|k| 0.25 * k as f64).collect();
                let tol = 5.0 / (n as f64).sqrt();
                let mut checks = Vec::new();
                for (i, alpha) in [cfg.alpha1, cfg.alpha2].into_iter().enumerate() {
                    let spec = StableNoiseSpec::standard(alpha, 1)?;
                    let inc = increment_sequence(&spec, n, 1.0, &cfg.stream(streams::NOISE).substream(i as u64))?;
                    let dev = empirical_cf_check(inc.as_slice().expect("contiguous"), &u_grid, alpha, 1.0)?;
                    checks.push(serde_json::json!({ "alpha": alpha, "max_cf_deviation": dev, "tolerance": tol, "pass": dev <= tol }));
                }
                Ok(checks)
            })?;
            let pass = result.iter().all(|c| c["pass"] == true);
            let text = serde_json::to_string_pretty(&serde_json::json!({ "samples": n, "checks": result, "pass": pass }))
                .map_err(|e| CliError::Runtime(e.to_string()))?;
            run.write("noise_test.json", &(text + "\n"))?;
            if !pass {
                return Err(CliError::Runtime("noise self-test failed; see noise_test.json".into()));
            }
        }
    }
    Ok(())
}

fn drift_tables(cli: &Cli, cfg: &ExperimentConfig, model: &ModelSpec, regime: Regime, run: &mut Run) -> CliResult<Vec<DriftTable>> {
    let mut c = cfg.clone();
    c.drift_source = levyscale::harness::DriftSource::Tabulated;
    let key = table_cache_key(model, cfg);
    let cache = match &cli.cache {
        Some(d) => load_cache(d, &key)?,
        None => Vec::new(),
    };
    let resolved = run.phase(&format!("tabulate {regime}"), || Ok(resolve_drifts(model, &c, regime, &cache)?))?;
    if let Some(d) = &cli.cache {
        store_cache(d, &key, &resolved.tables)?;
    }
    Ok(resolved.tables)
}

fn resolve(
    cli: &Cli,
    cfg: &ExperimentConfig,
    model: &ModelSpec,
    regime: Regime,
    run: &mut Run,
) -> CliResult<levyscale::integrator::AveragedDrift> {
    let key = table_cache_key(model, cfg);
    let cache = match &cli.cache {
        Some(d) => load_cache(d, &key)?,
        None => Vec::new(),
    };
    let resolved = run.phase(&format!("drifts {regime}"), || Ok(resolve_drifts(model, cfg, regime, &cache)?))?;
    if let (Some(d), false) = (&cli.cache, resolved.tables.is_empty()) {
        store_cache(d, &key, &resolved.tables)?;
    }
    Ok(resolved.drift)
}
