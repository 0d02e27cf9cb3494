use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use coxvi::data::{read_long_csv, validate, BatchMode, ColumnSchema, DataSource, IndexedCsv, Severity};
use coxvi::metrics::{
    concordance, reweighting_study, run_experiment, CoverageReport, ExperimentSpec, IdentificationReport,
};
use coxvi::oracle::newton_fit;
use coxvi::simulator::{calibrate_hazard_scale, simulate_cohort, SimConfig};
use coxvi::variational::{marginal_summary, PosteriorSummary, VariationalState};
use coxvi::{fit, BatchSpec, Family, FitConfig, PriorSpec};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{CoverageSection, RunConfig, StudySection, SummarySection};
use crate::{CliError, Cli, Command, ConcordanceArgs, CoverageArgs, FitArgs, OracleArgs, StudyArgs, SummarizeArgs};

type CliResult<T> = Result<T, CliError>;

/// Fitted state together with the covariate names, as written by `fit`.
#[derive(Debug, Serialize, Deserialize)]
pub struct StateFile {
    pub names: Vec<String>,
    pub state: VariationalState,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    command: &'a str,
    version: &'a str,
    seed: Option<u64>,
    args: Vec<String>,
    config: &'a RunConfig,
    outputs: Vec<&'a str>,
    wall_time_secs: f64,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

struct Output {
    dir: PathBuf,
}

impl Output {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn create(&self, name: &str) -> CliResult<BufWriter<File>> {
        let path = self.dir.join(name);
        File::create(&path)
            .map(BufWriter::new)
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> CliResult<()> {
        let mut w = self.create(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(runtime)?;
        writeln!(w).map_err(runtime)?;
        w.flush().map_err(runtime)
    }

    fn text(&self, name: &str, text: &str) -> CliResult<()> {
        let mut w = self.create(name)?;
        w.write_all(text.as_bytes()).map_err(runtime)?;
        w.flush().map_err(runtime)
    }

    /// Writes the resolved configuration and the run manifest.
    fn finish(&self, command: &str, config: &RunConfig, outputs: Vec<&str>, started: Instant) -> CliResult<()> {
        let resolved = toml::to_string(config).map_err(runtime)?;
        self.text("resolved.toml", &resolved)?;
        self.json(
            "manifest.json",
            &Manifest {
                command,
                version: env!("CARGO_PKG_VERSION"),
                seed: config.seed,
                args: std::env::args().collect(),
                config,
                outputs,
                wall_time_secs: started.elapsed().as_secs_f64(),
            },
        )
    }
}

fn require_out(out: &Option<PathBuf>, command: &str) -> CliResult<Output> {
    match out {
        Some(dir) => Output::new(dir),
        None => Err(invalid(format!("{command} requires --out DIR"))),
    }
}

fn load_data(path: &Path, disk: bool, schema: &ColumnSchema) -> CliResult<Box<dyn DataSource>> {
    if !path.exists() {
        return Err(invalid(format!("data file {} not found", path.display())));
    }
    if disk {
        return Ok(Box::new(IndexedCsv::open(path, schema)?));
    }
    let ds = read_long_csv(path, schema)?;
    let violations = validate(ds.records());
    for v in violations.iter().filter(|v| v.severity == Severity::Warning) {
        log_warning(&format!("{}: {v}", path.display()));
    }
    if let Some(v) = violations.iter().find(|v| v.severity == Severity::Error) {
        return Err(invalid(format!("{}: {v}", path.display())));
    }
    Ok(Box::new(ds))
}

fn log_warning(msg: &str) {
    eprintln!("warning: {msg}");
}

fn parse_mode(s: &str) -> CliResult<BatchMode> {
    s.parse().map_err(|e: coxvi::CoxError| invalid(e.to_string()))
}

/// Applies `--batch-size` / `--batch-mode` on top of a configured batch.
fn resolve_batch(current: BatchSpec, size: Option<usize>, mode: Option<&str>) -> CliResult<BatchSpec> {
    let mode = mode.map(parse_mode).transpose()?;
    Ok(match (current, size, mode) {
        (b, None, None) => b,
        (BatchSpec::Sample { mode: m, size: s }, size, mode) => BatchSpec::Sample {
            mode: mode.unwrap_or(m),
            size: size.unwrap_or(s),
        },
        (BatchSpec::Full, Some(size), mode) => BatchSpec::Sample {
            mode: mode.unwrap_or(BatchMode::Observations),
            size,
        },
        (BatchSpec::Full, None, Some(_)) => return Err(invalid("--batch-mode needs --batch-size")),
    })
}

fn resolve_prior(current: Option<PriorSpec>, args: &FitArgs) -> CliResult<PriorSpec> {
    let current = current.unwrap_or_default();
    let kind = args.prior.as_deref().unwrap_or(match current {
        PriorSpec::Normal { .. } => "normal",
        PriorSpec::StudentT { .. } => "student-t",
    });
    let spec = match (kind, current) {
        ("normal", PriorSpec::Normal { sigma }) => PriorSpec::Normal {
            sigma: args.sigma.unwrap_or(sigma),
        },
        ("normal", _) => PriorSpec::Normal {
            sigma: args.sigma.unwrap_or(1.0),
        },
        (_, PriorSpec::StudentT { nu, s }) => PriorSpec::StudentT {
            nu: args.nu.unwrap_or(nu),
            s: args.s.unwrap_or(s),
        },
        _ => PriorSpec::StudentT {
            nu: args.nu.unwrap_or(1.0),
            s: args.s.unwrap_or(1.0),
        },
    };
    let mismatched = match spec {
        PriorSpec::Normal { .. } => args.nu.is_some() || args.s.is_some(),
        PriorSpec::StudentT { .. } => args.sigma.is_some(),
    };
    if mismatched {
        return Err(invalid("prior flags do not match the selected prior"));
    }
    spec.validate()?;
    Ok(spec)
}

fn resolve_family(current: Option<Family>, name: Option<&str>, rank: Option<usize>) -> CliResult<Family> {
    let mut family = match name {
        Some(n) => {
            let f: Family = n.parse().map_err(|e: coxvi::CoxError| invalid(e.to_string()))?;
            match (f, current) {
                (Family::LowRank { .. }, Some(Family::LowRank { rank })) => Family::LowRank { rank },
                (f, _) => f,
            }
        }
        None => current.unwrap_or(Family::FullRank),
    };
    if let Some(r) = rank {
        match &mut family {
            Family::LowRank { rank } => *rank = r,
            _ => return Err(invalid("--rank applies only to the lowrank family")),
        }
    }
    Ok(family)
}

/// Global seed precedence: flag, then top-level config key, then `fallback`.
fn resolve_seed(cli_seed: Option<u64>, config: &RunConfig, fallback: u64) -> u64 {
    cli_seed.or(config.seed).unwrap_or(fallback)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let started = Instant::now();
    let mut config = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(t) = cli.global.threads.or(config.threads) {
        if t == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        config.threads = Some(t);
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(runtime)?;
    }
    let g = &cli.global;
    match &cli.command {
        Command::Simulate(a) => {
            let out = require_out(&g.out, "simulate")?;
            let mut sim = config.sim.clone().unwrap_or_default();
            sim.seed = resolve_seed(g.seed, &config, sim.seed);
            config.seed = Some(sim.seed);
            if let Some(n) = a.n_individuals {
                sim.n_individuals = n;
            }
            if let Some(h) = a.hazard_scale {
                sim.hazard_scale = h;
            } else if let Some(c) = &config.calibrate {
                sim.hazard_scale = calibrate_hazard_scale(&sim, c.target_censorship, c.pilot_n)?;
            }
            sim.validate()?;
            let truth = simulate_cohort(&sim)?;
            truth.dataset.write_csv(out.create("data.csv")?)?;
            out.json("truth.json", &truth.summary(&sim))?;
            eprintln!(
                "simulated {} individuals, {} rows, censorship {:.3}",
                sim.n_individuals,
                truth.dataset.records().len(),
                truth.censorship
            );
            config.sim = Some(sim);
            config.calibrate = None;
            out.finish("simulate", &config, vec!["data.csv", "truth.json"], started)
        }
        Command::Fit(a) => run_fit(a, g, config, started),
        Command::OracleFit(a) => run_oracle(a, g, config, started),
        Command::Summarize(a) => run_summarize(a, g, config, started),
        Command::Concordance(a) => run_concordance(a, g, config, started),
        Command::ReweightStudy(a) => run_study(a, g, config, started),
        Command::Coverage(a) => run_coverage(a, g, config, started),
    }
}

fn run_fit(a: &FitArgs, g: &crate::GlobalArgs, mut config: RunConfig, started: Instant) -> CliResult<()> {
    let out = require_out(&g.out, "fit")?;
    let schema = config.columns.clone().unwrap_or_default();
    let source = load_data(&a.data.data, a.data.disk, &schema)?;

    let mut fc = config.fit.clone().unwrap_or_default();
    fc.seed = resolve_seed(g.seed, &config, fc.seed);
    config.seed = Some(fc.seed);
    fc.batch = resolve_batch(fc.batch, a.batch_size, a.batch_mode.as_deref())?;
    if let Some(v) = a.steps {
        fc.steps = v;
    }
    if let Some(v) = a.lr {
        fc.learning_rate = v;
    }
    if let Some(v) = a.final_lr_fraction {
        fc.final_lr_fraction = v;
    }
    if let Some(v) = a.mc_samples {
        fc.mc_samples = v;
    }
    fc.validate()?;
    let prior = resolve_prior(config.prior, a)?;
    let family = resolve_family(config.family, a.family.as_deref(), a.rank)?;
    let level = a.level.unwrap_or(config.level());

    let result = fit(source.as_ref(), &prior, family, &fc)?;
    let names = source.covariate_names().to_vec();
    let summary = marginal_summary(&result.state, &names, level)?;
    out.json(
        "state.json",
        &StateFile {
            names,
            state: result.state.clone(),
        },
    )?;
    summary.write_csv(out.create("summary.csv")?)?;
    result.write_trace_csv(out.create("trace.csv")?)?;
    eprintln!("fitted {} steps in {:.2}s", result.trace.len(), result.wall_time_secs);

    config.fit = Some(fc);
    config.prior = Some(prior);
    config.family = Some(family);
    config.summary = Some(SummarySection { level });
    out.finish("fit", &config, vec!["state.json", "summary.csv", "trace.csv"], started)
}

fn run_oracle(a: &OracleArgs, g: &crate::GlobalArgs, mut config: RunConfig, started: Instant) -> CliResult<()> {
    let schema = config.columns.clone().unwrap_or_default();
    let source = load_data(&a.data.data, a.data.disk, &schema)?;
    let mut opts = config.oracle.unwrap_or_default();
    if let Some(t) = a.tol {
        opts.tol = t;
    }
    if let Some(m) = a.max_iter {
        opts.max_iter = m;
    }
    if !(opts.tol > 0.0) || opts.max_iter == 0 {
        return Err(invalid("--tol must be positive and --max-iter at least 1"));
    }
    let level = a.level.unwrap_or(config.level());
    let records = source.fetch_all()?;
    let mle = newton_fit(&records, None, opts.tol, opts.max_iter)?;
    if !mle.converged {
        return Err(runtime(format!("Newton-Raphson did not converge in {} iterations", mle.iterations)));
    }
    let summary = mle.summary(source.covariate_names(), level)?;
    config.oracle = Some(opts);
    config.summary = Some(SummarySection { level });
    match &g.out {
        Some(dir) => {
            let out = Output::new(dir)?;
            out.json("oracle.json", &mle)?;
            summary.write_csv(out.create("summary.csv")?)?;
            out.finish("oracle-fit", &config, vec!["oracle.json", "summary.csv"], started)
        }
        None => {
            summary.write_csv(std::io::stdout().lock())?;
            Ok(())
        }
    }
}

fn read_state(path: &Path) -> CliResult<StateFile> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    let file: StateFile =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    file.state.validate()?;
    if file.names.len() != file.state.dim() {
        return Err(invalid(format!("{}: names do not match state dimension", path.display())));
    }
    Ok(file)
}

fn run_summarize(a: &SummarizeArgs, g: &crate::GlobalArgs, mut config: RunConfig, started: Instant) -> CliResult<()> {
    let file = read_state(&a.state)?;
    let level = a.level.unwrap_or(config.level());
    let summary = marginal_summary(&file.state, &file.names, level)?;
    config.summary = Some(SummarySection { level });
    match &g.out {
        Some(dir) => {
            let out = Output::new(dir)?;
            summary.write_csv(out.create("summary.csv")?)?;
            out.finish("summarize", &config, vec!["summary.csv"], started)
        }
        None => {
            summary.write_csv(std::io::stdout().lock())?;
            Ok(())
        }
    }
}

/// Coefficients from a JSON array, a state file, an oracle or truth file, or
/// a summary CSV (`mean` column).
fn read_theta(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e == "csv") {
        let summary = PosteriorSummary::read_csv(text.as_bytes(), 0.95)?;
        return Ok(summary.means());
    }
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    let numbers = |v: &serde_json::Value| -> Option<Vec<f64>> {
        v.as_array()?.iter().map(serde_json::Value::as_f64).collect()
    };
    numbers(&value)
        .or_else(|| value.pointer("/state/loc").and_then(numbers))
        .or_else(|| value.get("theta_hat").and_then(numbers))
        .or_else(|| value.get("theta_true").and_then(numbers))
        .ok_or_else(|| invalid(format!("{}: no coefficient vector found", path.display())))
}

#[derive(Serialize)]
struct ConcordanceOutput {
    concordance: f64,
    theta: Vec<f64>,
}

fn run_concordance(a: &ConcordanceArgs, g: &crate::GlobalArgs, config: RunConfig, started: Instant) -> CliResult<()> {
    let schema = config.columns.clone().unwrap_or_default();
    let source = load_data(&a.data.data, a.data.disk, &schema)?;
    let theta = read_theta(&a.theta)?;
    let c = concordance(&source.fetch_all()?, &theta)?;
    println!("{c}");
    if let Some(dir) = &g.out {
        let out = Output::new(dir)?;
        out.json("concordance.json", &ConcordanceOutput { concordance: c, theta })?;
        out.finish("concordance", &config, vec!["concordance.json"], started)?;
    }
    Ok(())
}

fn run_study(a: &StudyArgs, g: &crate::GlobalArgs, mut config: RunConfig, started: Instant) -> CliResult<()> {
    let out = require_out(&g.out, "reweight-study")?;
    let seed = resolve_seed(g.seed, &config, 0);
    config.seed = Some(seed);
    let source: Box<dyn DataSource> = match &a.data {
        Some(path) => load_data(path, a.disk, &config.columns.clone().unwrap_or_default())?,
        None => {
            let mut sim = config
                .sim
                .clone()
                .ok_or_else(|| invalid("reweight-study needs --data or a [sim] section"))?;
            sim.seed = seed;
            if let Some(c) = &config.calibrate {
                sim.hazard_scale = calibrate_hazard_scale(&sim, c.target_censorship, c.pilot_n)?;
                config.calibrate = None;
            }
            let truth = simulate_cohort(&sim)?;
            config.sim = Some(sim);
            Box::new(truth.dataset) as Box<dyn DataSource>
        }
    };
    let mut study = config.study.clone().unwrap_or(StudySection {
        batch: BatchSpec::Sample {
            mode: BatchMode::Observations,
            size: 256,
        },
        n_batches: 500,
        theta: None,
    });
    study.batch = resolve_batch(study.batch, a.batch_size, a.batch_mode.as_deref())?;
    if let Some(n) = a.n_batches {
        study.n_batches = n;
    }
    if let Some(path) = &a.theta {
        study.theta = Some(read_theta(path)?);
    }
    let p = source.totals().p;
    let theta = study.theta.clone().unwrap_or_else(|| vec![0.0; p]);
    if theta.len() != p {
        return Err(invalid(format!("theta has {} entries, data has {p} covariates", theta.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let result = reweighting_study(source.as_ref(), &theta, study.batch, study.n_batches, &mut rng)?;
    result.write_csv(out.create("study.csv")?)?;
    out.text("study.txt", &format!("{result}\n"))?;
    println!("{result}");
    study.theta = Some(theta);
    config.study = Some(study);
    out.finish("reweight-study", &config, vec!["study.csv", "study.txt"], started)
}

fn run_coverage(a: &CoverageArgs, g: &crate::GlobalArgs, mut config: RunConfig, started: Instant) -> CliResult<()> {
    let out = require_out(&g.out, "coverage")?;
    let seed = resolve_seed(g.seed, &config, 0);
    config.seed = Some(seed);
    let mut section = config.coverage.clone().unwrap_or(CoverageSection {
        runs: 30,
        sparse_truth: None,
        strong_threshold: None,
    });
    if let Some(r) = a.runs {
        section.runs = r;
    }
    let level = a.level.unwrap_or(config.level());
    let mut sim: SimConfig = config.sim.clone().unwrap_or_default();
    if let Some(c) = &config.calibrate {
        sim.seed = seed;
        sim.hazard_scale = calibrate_hazard_scale(&sim, c.target_censorship, c.pilot_n)?;
        config.calibrate = None;
    }
    let spec = ExperimentSpec {
        sim: sim.clone(),
        prior: config.prior.unwrap_or_default(),
        family: config.family.unwrap_or(Family::FullRank),
        fit: config.fit.clone().unwrap_or_else(FitConfig::default),
        runs: section.runs,
        level,
        seed,
        sparse_truth: section.sparse_truth,
    };
    let (outcomes, failed) = run_experiment(&spec)?;
    let report = CoverageReport::from_outcomes(&outcomes, failed)?;
    report.write_csv(out.create("coverage.csv")?)?;
    out.text("coverage.txt", &report.to_string())?;
    out.json("runs.json", &outcomes)?;
    print!("{report}");
    let mut outputs = vec!["coverage.csv", "coverage.txt", "runs.json"];
    if let Some(threshold) = section.strong_threshold {
        let id = IdentificationReport::from_outcomes(&outcomes, threshold);
        out.json("identification.json", &id)?;
        println!(
            "strong effects flagged {}/{}, zero coefficients flagged {}/{}",
            id.strong_flagged, id.n_strong, id.zero_flagged, id.n_zero
        );
        outputs.push("identification.json");
    }
    config.sim = Some(sim);
    config.prior = Some(spec.prior);
    config.family = Some(spec.family);
    config.fit = Some(spec.fit);
    config.coverage = Some(section);
    config.summary = Some(SummarySection { level });
    out.finish("coverage", &config, outputs, started)
}
