//! The `mtgmm` command-line interface.
//!
//! Exit status is 0 on success, 1 for usage or input errors and 2 when a
//! numerical procedure fails.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{align_exhaustive, align_greedy, align_greedy_restarts, align_transfer, alignment_score, mu_pairs, Alignment};
use crate::em::{em_single_task, fit_mtl_gmm, EmOptions, MtlFitResult, MtlOptions, Penalty, SingleFit, TuningSchedule};
use crate::error::{Error, Result};
use crate::gmm::{misclustering_error, TaskData, ThetaEstimate};
use crate::io::{pca_preprocess, read_json, read_task_csv, write_json, write_metrics_csv, write_task_csv, PcaModel};
use crate::linalg::Matrix;
use crate::selection::{cv_select_mtl, cv_select_tl, CvGrid, CvOptions, CvTable};
use crate::sim::{initial_estimate, run_replications, sweep, rate_probe, AlignMethod, Method, RateMethod, RateProbeConfig, Scenario, SimConfig, SimTuning, SweepParam};
use crate::transfer::{fit_tl_gmm, TlFitResult, TlOptions, TlPenalty, TlSchedule};

/// Environment variable consulted when `--threads` is absent.
pub const THREADS_ENV: &str = "MTGMM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "mtgmm", version, about = "Multi-task and transfer learning for two-component Gaussian mixtures")]
pub struct Cli {
    /// Worker threads (falls back to MTGMM_THREADS, then to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a simulation design and write the metric table.
    Simulate(SimulateArgs),
    /// Standard EM on one task.
    FitSingle(FitSingleArgs),
    /// Penalized multi-task EM.
    FitMtl(FitMtlArgs),
    /// Penalized transfer EM on a target task, anchored at a multi-task fit of the sources.
    FitTl(FitTlArgs),
    /// Resolve the label permutation across tasks.
    Align(AlignArgs),
    /// Cross-validate the penalty constants.
    Cv(CvArgs),
    /// Mis-clustering error of fitted estimates on labelled test files.
    Evaluate(EvaluateArgs),
    /// Per-task PCA projection.
    PcaPreprocess(PcaArgs),
    /// Empirical convergence rate on identical tasks.
    RateProbe(RateProbeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: Option<Scenario>,
    /// JSON simulation config; explicit flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub p: Option<usize>,
    #[arg(long)]
    pub h_w: Option<f64>,
    #[arg(long)]
    pub h_mu: Option<f64>,
    #[arg(long)]
    pub h_beta: Option<f64>,
    #[arg(long)]
    pub n_outliers: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long)]
    pub align: Option<AlignMethod>,
    /// Select constants by 5-fold CV inside every replication.
    #[arg(long)]
    pub cv: bool,
    /// Comma-separated methods; defaults to every method of the design.
    #[arg(long, value_delimiter = ',')]
    pub methods: Vec<Method>,
    /// Parameter to sweep; defaults to the design's heterogeneity parameter.
    #[arg(long)]
    pub sweep: Option<SweepParam>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<f64>,
    /// Output directory for metrics.csv and config.json; stdout otherwise.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitSingleArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Starting estimate as JSON; a 2-means start is used otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PenaltyArgs {
    /// Schedule as JSON; overrides the tied constants.
    #[arg(long)]
    pub schedule: Option<PathBuf>,
    #[arg(long, default_value_t = 0.1)]
    pub value_w: f64,
    #[arg(long, default_value_t = 0.1)]
    pub value_rest: f64,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
}

#[derive(Debug, Args)]
pub struct FitMtlArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long, default_value = "exhaustive")]
    pub align: AlignMethod,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitTlArgs {
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, num_args = 1.., required = true)]
    pub sources: Vec<PathBuf>,
    #[arg(long, default_value = "exhaustive")]
    pub align: AlignMethod,
    /// Couple the sample-size constants of the mean and coefficient blocks.
    #[arg(long)]
    pub symmetric: bool,
    #[command(flatten)]
    pub penalty: PenaltyArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AlignArgs {
    /// Task CSV files; each is given a 2-means/EM start.
    #[arg(long, num_args = 1.., conflicts_with = "estimates", required_unless_present = "estimates")]
    pub data: Vec<PathBuf>,
    /// A fit file whose estimates are aligned instead.
    #[arg(long)]
    pub estimates: Option<PathBuf>,
    #[arg(long, default_value = "exhaustive")]
    pub method: AlignMethod,
    /// Extra greedy passes from random starts (requires --seed).
    #[arg(long, default_value_t = 0, requires = "seed")]
    pub restarts: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CvArgs {
    /// Task files (sources when --target is given).
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0])]
    pub values_w: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = [0.05, 0.1, 0.2, 0.5, 1.0, 2.0])]
    pub values_rest: Vec<f64>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long, default_value = "exhaustive")]
    pub align: AlignMethod,
    #[arg(long)]
    pub symmetric: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// Labelled test files, one per estimate in the fit file.
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PcaArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub data: Vec<PathBuf>,
    /// Test files projected with the model of the matching training file.
    #[arg(long, num_args = 1..)]
    pub test: Vec<PathBuf>,
    #[arg(long)]
    pub components: usize,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct RateProbeArgs {
    #[arg(long, default_value = "single")]
    pub method: RateMethod,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 100)]
    pub reps: usize,
    #[arg(long, value_delimiter = ',', default_values_t = [100, 400, 1600])]
    pub n_list: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    pub p: usize,
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 1000)]
    pub bootstrap: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl std::str::FromStr for RateMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(RateMethod::Single),
            "mtl" => Ok(RateMethod::Mtl),
            _ => Err(Error::InvalidParameter(format!("unknown rate-probe method `{s}`"))),
        }
    }
}

/// Everything a fit command writes. `estimates` holds one entry per task in
/// input order (a single entry for the target of a transfer fit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFile {
    pub method: String,
    pub estimates: Vec<ThetaEstimate>,
    pub sigmas: Vec<Matrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alignment: Option<Alignment>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub single: Option<SingleFit>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mtl: Option<MtlFitResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tl: Option<TlFitResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignOutput {
    pub r: Vec<u8>,
    pub r_prime: Vec<u8>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CvSchedule {
    Mtl(TuningSchedule),
    Tl(TlSchedule),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOutput {
    pub schedule: CvSchedule,
    pub table: CvTable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOutput {
    pub errors: Vec<f64>,
    pub mean: f64,
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit status. Results go to `stdout`, diagnostics to `stderr`.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    configure_threads(cli.threads);
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if e.is_numerical() {
                2
            } else {
                1
            }
        }
    }
}

fn configure_threads(flag: Option<usize>) {
    let n = flag.or_else(|| std::env::var(THREADS_ENV).ok().and_then(|v| v.trim().parse().ok()));
    if let Some(n) = n.filter(|&n| n > 0) {
        // The global pool can only be set once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            serde_json::to_writer_pretty(&mut *stdout, value)?;
            writeln!(stdout)?;
            Ok(())
        }
    }
}

fn read_tasks(paths: &[PathBuf]) -> Result<Vec<TaskData>> {
    paths.iter().map(read_task_csv).collect()
}

fn initial_estimates(tasks: &[TaskData]) -> Result<Vec<ThetaEstimate>> {
    tasks
        .iter()
        .enumerate()
        .map(|(k, t)| initial_estimate(t, 10).map_err(|e| e.in_task(k)))
        .collect()
}

fn align(thetas: &[ThetaEstimate], how: AlignMethod) -> Result<Alignment> {
    let pairs = mu_pairs(thetas);
    match how {
        AlignMethod::Exhaustive => align_exhaustive(&pairs),
        AlignMethod::Greedy => align_greedy(&pairs),
    }
}

fn mtl_penalty(args: &PenaltyArgs) -> Result<Penalty> {
    let schedule = match &args.schedule {
        Some(path) => read_json(path)?,
        None => {
            let d = TuningSchedule::default();
            TuningSchedule::tied(args.value_w, args.value_rest, d.script, d.kappa)?
        }
    };
    Ok(Penalty::Schedule(schedule))
}

fn tl_penalty(args: &PenaltyArgs, symmetric: bool) -> Result<TlPenalty> {
    let schedule = match &args.schedule {
        Some(path) => read_json(path)?,
        None => {
            let d = TlSchedule::default();
            TlSchedule {
                symmetric,
                ..TlSchedule::tied(args.value_w, args.value_rest, d.script, d.kappa0)?
            }
        }
    };
    Ok(TlPenalty::Schedule(schedule))
}

/// Source fit plus the aligned target start shared by `fit-tl` and `cv --target`.
fn prepare_transfer(target: &TaskData, sources: &[TaskData], how: AlignMethod, source_penalty: &Penalty) -> Result<(Alignment, ThetaEstimate, MtlFitResult)> {
    let init0 = initial_estimate(target, 10)?;
    let inits = initial_estimates(sources)?;
    let source_alignment = align(&inits, how)?;
    let aligned = source_alignment.apply(&inits)?;
    let full = align_transfer(&mu_pairs(std::slice::from_ref(&init0))[0], &source_alignment, &mu_pairs(&inits))?;
    let init0 = full.restrict(&[0]).apply(&[init0])?.remove(0);
    let source_fit = fit_mtl_gmm(sources, &aligned, source_penalty, &MtlOptions::default())?;
    Ok((full, init0, source_fit))
}

fn execute(command: Command, stdout: &mut dyn Write) -> Result<()> {
    match command {
        Command::Simulate(a) => simulate(a, stdout),
        Command::FitSingle(a) => {
            let task = read_task_csv(&a.data)?;
            let init = match &a.init {
                Some(path) => read_json(path)?,
                None => initial_estimate(&task, 10)?,
            };
            let opts = EmOptions {
                max_iter: a.max_iter,
                tol: a.tol,
                record_path: false,
            };
            let fit = em_single_task(&task, &init, &opts)?;
            let file = FitFile {
                method: "single".into(),
                estimates: vec![fit.theta.clone()],
                sigmas: vec![fit.sigma.clone()],
                alignment: None,
                single: Some(fit),
                mtl: None,
                tl: None,
            };
            emit(&file, a.out.as_deref(), stdout)
        }
        Command::FitMtl(a) => {
            let tasks = read_tasks(&a.data)?;
            let inits = initial_estimates(&tasks)?;
            let alignment = align(&inits, a.align)?;
            let inits = alignment.apply(&inits)?;
            let opts = MtlOptions {
                rounds: a.penalty.rounds,
                tol: a.penalty.tol,
                ..MtlOptions::default()
            };
            let fit = fit_mtl_gmm(&tasks, &inits, &mtl_penalty(&a.penalty)?, &opts)?;
            let file = FitFile {
                method: "mtl".into(),
                estimates: fit.per_task.clone(),
                sigmas: fit.sigmas.clone(),
                alignment: Some(alignment),
                single: None,
                mtl: Some(fit),
                tl: None,
            };
            emit(&file, a.out.as_deref(), stdout)
        }
        Command::FitTl(a) => {
            let target = read_task_csv(&a.target)?;
            let sources = read_tasks(&a.sources)?;
            let source_penalty = Penalty::Schedule(TuningSchedule::default());
            let (alignment, init0, source_fit) = prepare_transfer(&target, &sources, a.align, &source_penalty)?;
            let opts = TlOptions {
                rounds: a.penalty.rounds,
                tol: a.penalty.tol,
                ..TlOptions::default()
            };
            let fit = fit_tl_gmm(&target, &init0, &source_fit.centers, &tl_penalty(&a.penalty, a.symmetric)?, &opts)?;
            let file = FitFile {
                method: "tl".into(),
                estimates: vec![fit.theta0.clone()],
                sigmas: vec![fit.sigma0.clone()],
                alignment: Some(alignment),
                single: None,
                mtl: Some(source_fit),
                tl: Some(fit),
            };
            emit(&file, a.out.as_deref(), stdout)
        }
        Command::Align(a) => {
            let thetas = match &a.estimates {
                Some(path) => read_json::<FitFile>(path)?.estimates,
                None => initial_estimates(&read_tasks(&a.data)?)?,
            };
            let pairs = mu_pairs(&thetas);
            let alignment = match (a.method, a.restarts) {
                (AlignMethod::Greedy, r) if r > 0 => {
                    let mut rng = ChaCha8Rng::seed_from_u64(a.seed.unwrap_or(0));
                    align_greedy_restarts(&pairs, r, &mut rng)?
                }
                (how, _) => align(&thetas, how)?,
            };
            let score = alignment_score(&pairs, &alignment)?;
            let out = AlignOutput {
                r: alignment.r,
                r_prime: alignment.r_prime,
                score,
            };
            emit(&out, a.out.as_deref(), stdout)
        }
        Command::Cv(a) => {
            let tasks = read_tasks(&a.data)?;
            let grid = CvGrid {
                values_w: a.values_w,
                values_rest: a.values_rest,
                folds: a.folds,
                seed: a.seed,
            };
            let opts = CvOptions {
                rounds: a.rounds,
                tl_symmetric: a.symmetric,
                ..CvOptions::default()
            };
            let out = match &a.target {
                None => {
                    let inits = initial_estimates(&tasks)?;
                    let inits = align(&inits, a.align)?.apply(&inits)?;
                    let (schedule, table) = cv_select_mtl(&tasks, &inits, &grid, &opts)?;
                    CvOutput {
                        schedule: CvSchedule::Mtl(schedule),
                        table,
                    }
                }
                Some(path) => {
                    let target = read_task_csv(path)?;
                    let (_, init0, source_fit) = prepare_transfer(&target, &tasks, a.align, &Penalty::Schedule(TuningSchedule::default()))?;
                    let (schedule, table) = cv_select_tl(&target, &init0, &source_fit.centers, &grid, &opts)?;
                    CvOutput {
                        schedule: CvSchedule::Tl(schedule),
                        table,
                    }
                }
            };
            emit(&out, a.out.as_deref(), stdout)
        }
        Command::Evaluate(a) => {
            let fit: FitFile = read_json(&a.fit)?;
            let tests = read_tasks(&a.data)?;
            if tests.len() != fit.estimates.len() {
                return Err(Error::InvalidData(format!(
                    "{} test files for {} estimates",
                    tests.len(),
                    fit.estimates.len()
                )));
            }
            let errors: Vec<f64> = fit
                .estimates
                .iter()
                .zip(&tests)
                .enumerate()
                .map(|(k, (e, t))| misclustering_error(e, t).map_err(|err| err.in_task(k)))
                .collect::<Result<_>>()?;
            let mean = errors.iter().sum::<f64>() / errors.len() as f64;
            emit(&EvaluateOutput { errors, mean }, a.out.as_deref(), stdout)
        }
        Command::PcaPreprocess(a) => {
            let train = read_tasks(&a.data)?;
            let test = read_tasks(&a.test)?;
            if !test.is_empty() && test.len() != train.len() {
                return Err(Error::InvalidData(format!(
                    "{} test files for {} training files",
                    test.len(),
                    train.len()
                )));
            }
            let (projected, models) = pca_preprocess(&train, a.components)?;
            fs::create_dir_all(&a.out_dir)?;
            for (k, t) in projected.iter().enumerate() {
                write_task_csv(a.out_dir.join(format!("train_{k}.csv")), t)?;
            }
            for (k, (t, m)) in test.iter().zip(&models).enumerate() {
                write_task_csv(a.out_dir.join(format!("test_{k}.csv")), &m.transform(t).map_err(|e| e.in_task(k))?)?;
            }
            write_json(a.out_dir.join("pca.json"), &models as &Vec<PcaModel>)
        }
        Command::RateProbe(a) => {
            let cfg = RateProbeConfig {
                method: a.method,
                p: a.p,
                k: a.k,
                n_list: a.n_list,
                reps: a.reps,
                seed: a.seed,
                bootstrap: a.bootstrap,
            };
            let probe = rate_probe(&cfg)?;
            emit(&probe, a.out.as_deref(), stdout)
        }
    }
}

fn simulate(a: SimulateArgs, stdout: &mut dyn Write) -> Result<()> {
    let mut cfg = match (&a.config, a.scenario) {
        (Some(path), _) => {
            let mut c: SimConfig = read_json(path)?;
            if let Some(s) = a.scenario {
                c.scenario = s;
            }
            c
        }
        (None, Some(s)) => {
            let seed = a
                .seed
                .ok_or_else(|| Error::InvalidParameter("simulate needs --seed (or a --config that sets one)".into()))?;
            SimConfig { seed, ..SimConfig::new(s) }
        }
        (None, None) => return Err(Error::InvalidParameter("simulate needs --scenario or --config".into())),
    };
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = a.$field { cfg.$field = v; })* };
    }
    set!(seed, k, n, p, h_w, h_mu, h_beta, n_outliers, n_test, reps, align);
    if a.cv {
        cfg.tuning = SimTuning::Cv {
            grid: CvGrid {
                seed: cfg.seed,
                ..CvGrid::default()
            },
            options: CvOptions {
                tl_symmetric: true,
                ..CvOptions::default()
            },
        };
    }
    cfg.validate()?;
    let methods = if a.methods.is_empty() {
        cfg.scenario.default_methods()
    } else {
        a.methods.clone()
    };
    let rows = if a.values.is_empty() {
        run_replications(&cfg, &methods)?
    } else {
        sweep(&cfg, a.sweep.unwrap_or(cfg.scenario.sweep_param()), &a.values, &methods)?
    };
    match &a.out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            write_json(dir.join("config.json"), &cfg)?;
            write_metrics_csv(dir.join("metrics.csv"), &rows)
        }
        None => {
            let mut w = csv::Writer::from_writer(&mut *stdout);
            for r in &rows {
                w.serialize(r).map_err(|e| Error::InvalidData(e.to_string()))?;
            }
            w.flush()?;
            Ok(())
        }
    }
}
