use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use drmpc::ambiguity::{mmd_radius_bound, verify_radius};
use drmpc::kernel::KernelSpec;
use drmpc::selftest::run_selftest;
use drmpc::sim::{self, ExperimentConfig, SweepResult, SweepSpec, CSV_HEADER, SCHEMA_VERSION};
use drmpc::svm::{svm_decision, svm_rkhs_norm, synthetic_exp_dataset, train_svm_detailed};
use drmpc::{Error, Result};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "drmpc", version, about = "Distributionally robust stochastic MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// CSV destination; defaults to the config's `output` or stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// JSON-lines trajectories.
        #[arg(long)]
        traces: Option<PathBuf>,
    },
    /// Grid of mismatch values, methods and radii.
    Sweep {
        /// Sweep spec JSON; defaults to the bundled preset.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Preset::Table1)]
        preset: Preset,
        #[arg(long, value_delimiter = ',')]
        lambdas: Option<Vec<f64>>,
        /// Method names to keep: tube, grad, kdrc, native.
        #[arg(long, value_delimiter = ',')]
        modes: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        epsilons: Option<Vec<f64>>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Print the resolved sweep spec as JSON and exit.
        #[arg(long)]
        dump_spec: bool,
    },
    /// Ambiguity radius for `n` samples at confidence `1 - alpha`.
    Radius {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        alpha: f64,
        /// Kernel bound `sup k(x, x)`.
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        /// JSON array of training points; with `--test` adds the MMD estimate.
        #[arg(long, requires = "test")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        test: Option<PathBuf>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Fit the learned constraint and save the model.
    TrainSvm {
        #[arg(long)]
        out: PathBuf,
        /// JSON `{"points": [[..]], "labels": [..]}`; synthetic data otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 0.3)]
        gap: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        sigma: f64,
        #[arg(long, default_value_t = 100.0)]
        reg: f64,
    },
    /// Run the invariant suites.
    Selftest,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Table1,
    SmallSample,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Dataset {
    points: Vec<Vec<f64>>,
    labels: Vec<f64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_input() { 1 } else { 2 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Run {
            config,
            seed,
            out,
            traces,
        } => {
            let mut cfg = ExperimentConfig::load(&config).map_err(|e| context(&config, e))?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let out = out.or_else(|| cfg.output.clone());
            let result = sim::sweep(&[cfg], traces.is_some())?;
            emit(&result, out.as_deref(), traces.as_deref())?;
        }
        Command::Sweep {
            config,
            preset,
            lambdas,
            modes,
            epsilons,
            runs,
            seed,
            out,
            traces,
            dump_spec,
        } => {
            let mut spec = match &config {
                Some(p) => SweepSpec::load(p).map_err(|e| context(p, e))?,
                None => match preset {
                    Preset::Table1 => sim::table1_spec(),
                    Preset::SmallSample => sim::small_sample_spec(),
                },
            };
            if let Some(l) = lambdas {
                spec.lambdas = l;
            }
            if let Some(m) = modes {
                spec.filter_methods(&m)?;
            }
            if let Some(e) = epsilons {
                spec.epsilons = e;
            }
            if let Some(r) = runs {
                spec.base.runs = r;
            }
            if let Some(s) = seed {
                spec.base.seed = s;
            }
            spec.base.validate()?;
            if dump_spec {
                println!("{}", serde_json::to_string_pretty(&spec)?);
                return Ok(ExitCode::SUCCESS);
            }
            let result = sim::sweep(&spec.configs(), traces.is_some())?;
            emit(&result, out.as_deref(), traces.as_deref())?;
        }
        Command::Radius {
            n,
            alpha,
            c,
            train,
            test,
            sigma,
            seed,
        } => {
            let radius = match (train, test) {
                (Some(tr), Some(te)) => {
                    let kernel = KernelSpec::gaussian(sigma)?;
                    if (kernel.sup_diagonal() - c).abs() > 0.0 {
                        return Err(Error::Input("--c must equal sup k(x, x) = 1 for the Gaussian kernel".into()));
                    }
                    verify_radius(n, alpha, &load_points(&tr)?, &load_points(&te)?, &kernel, seed)?
                }
                _ => mmd_radius_bound(n, alpha, c)?,
            };
            println!("{:.6}", radius.epsilon);
        }
        Command::TrainSvm {
            out,
            data,
            count,
            gap,
            seed,
            sigma,
            reg,
        } => {
            let (points, labels) = match &data {
                Some(p) => {
                    let d: Dataset =
                        serde_json::from_str(&read(p)?).map_err(|e| context(p, e.into()))?;
                    (d.points, d.labels)
                }
                None => synthetic_exp_dataset(count, gap, seed),
            };
            let fit = train_svm_detailed(&points, &labels, KernelSpec::gaussian(sigma)?, reg)?;
            let correct = points
                .iter()
                .zip(&labels)
                .filter(|(p, y)| svm_decision(&fit.model, p).map(|d| d * **y > 0.0).unwrap_or(false))
                .count();
            fit.model.save_json(&out)?;
            println!(
                "{}",
                json!({
                    "schema_version": SCHEMA_VERSION,
                    "model": out,
                    "support_vectors": fit.model.support_vectors.len(),
                    "training_accuracy": correct as f64 / points.len() as f64,
                    "rkhs_norm": svm_rkhs_norm(&fit.model),
                    "kkt_residual": fit.kkt_residual,
                    "iterations": fit.iterations,
                })
            );
        }
        Command::Selftest => {
            let checks = run_selftest();
            let mut ok = true;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                ok &= c.passed;
            }
            return Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) });
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn context(path: &Path, e: Error) -> Error {
    match e {
        Error::Json(j) => Error::Input(format!("{}: {j}", path.display())),
        Error::Io(io) => Error::Input(format!("{}: {io}", path.display())),
        other => other,
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| context(path, e.into()))
}

fn load_points(path: &Path) -> Result<Vec<Vec<f64>>> {
    serde_json::from_str(&read(path)?).map_err(|e| context(path, e.into()))
}

fn emit(result: &SweepResult, out: Option<&Path>, traces: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => {
            result.write_csv(p)?;
            let meta = json!({
                "schema_version": SCHEMA_VERSION,
                "columns": CSV_HEADER.split(',').collect::<Vec<_>>(),
                "satisfaction": "fraction of (run, step) pairs, steps 1..=sim_steps, at which every constraint holds for the realized state",
                "per_run_min": "fraction of runs without any violation",
                "infeasibility_rate": "fraction of MPC solves that needed the soft fallback",
                "row_order": "method, lambda, epsilon, n_s",
            });
            fs::write(meta_path(p), serde_json::to_string_pretty(&meta)? + "\n")?;
        }
        None => print!("{}", result.csv()),
    }
    if let Some(t) = traces {
        result.write_traces(t)?;
    }
    Ok(())
}

fn meta_path(p: &Path) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}
