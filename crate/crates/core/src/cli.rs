//! Command-line interface: closed-form verification, event-probability
//! estimation over epsilon grids, cascade statistics, annulus component
//! counts, assertion audits, and bit-exact replay of recorded trials.

use crate::experiments::{
    formula_suite_csv, replay_bundle, run_formula_suite, run_trials, EstimateResult, EventId,
    ExperimentConfig,
};
use crate::point::Point;
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "sausagelab",
    about = "Monte Carlo laboratory for vacant sets of Wiener sausages and Brownian \
             interlacements"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// ambient dimension (>= 3)
    #[arg(long, default_value_t = 3)]
    dim: usize,
    /// number of trials
    #[arg(long, default_value_t = 1000)]
    trials: u64,
    /// master RNG seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// output CSV path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrialArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// single probe radius
    #[arg(long)]
    eps: Option<f64>,
    /// comma-separated probe radii (overrides --eps)
    #[arg(long, value_delimiter = ',')]
    eps_grid: Vec<f64>,
    /// Brownian motions per trial
    #[arg(long, default_value_t = 1)]
    k_motions: usize,
    /// component-count grid spacing (default eps / 12)
    #[arg(long)]
    grid_spacing: Option<f64>,
    /// several-balls centers as semicolon-separated comma tuples, e.g.
    /// "0,0,0;7,0,0"
    #[arg(long)]
    centers: Option<String>,
    /// largest spatial step of the path simulation
    #[arg(long, default_value_t = 0.1)]
    step_max: f64,
    /// smallest spatial step (crossing resolution near watched spheres)
    #[arg(long, default_value_t = 1e-3)]
    step_min: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo checks of the closed-form hitting/escape probabilities and
    /// the entrance-angle laws
    VerifyFormulas {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Estimate an event probability over an epsilon grid and fit a log-log
    /// slope
    Estimate {
        #[command(flatten)]
        trial: TrialArgs,
        /// event id: e-and-f | e-and-f-cond | e-only | f-only | one-ball |
        /// several-balls | excursion-local
        #[arg(long)]
        event: String,
    },
    /// Run the cascade on sampled paths and audit the stopping-step and
    /// stopping-index lemmas
    CascadeStats {
        #[command(flatten)]
        trial: TrialArgs,
    },
    /// Mean count of vacant components crossing an annulus of an
    /// interlacement sample
    AnnulusCount {
        #[command(flatten)]
        common: CommonArgs,
        /// interlacement intensity
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// inner annulus radius
        #[arg(long, default_value_t = 1.0)]
        r_inner: f64,
        /// outer annulus radius
        #[arg(long, default_value_t = 23.0)]
        r_outer: f64,
        /// counting grid spacing
        #[arg(long, default_value_t = 0.5)]
        grid_spacing: f64,
    },
    /// Audit the hemiball implication on multi-component vacancy trials
    ImplicationAudit {
        #[command(flatten)]
        trial: TrialArgs,
    },
    /// Re-run a recorded counterexample bundle bit-exactly
    Replay {
        /// bundle file produced next to a run's CSV
        #[arg(long)]
        bundle: PathBuf,
    },
}

fn eps_grid_of(t: &TrialArgs) -> Vec<f64> {
    if !t.eps_grid.is_empty() {
        t.eps_grid.clone()
    } else {
        vec![t.eps.unwrap_or(0.1)]
    }
}

fn parse_centers(s: &str) -> Result<Vec<Point>, String> {
    s.split(';')
        .map(|tuple| {
            tuple
                .split(',')
                .map(|c| c.trim().parse::<f64>().map_err(|e| format!("bad center: {e}")))
                .collect::<Result<Vec<f64>, _>>()
                .map(|v| Point::from_slice(&v))
        })
        .collect()
}

fn config_from(t: &TrialArgs, event: EventId) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::new(t.common.dim, event);
    cfg.eps_grid = eps_grid_of(t);
    cfg.k_motions = t.k_motions;
    cfg.n_trials = t.common.trials;
    cfg.master_seed = t.common.seed;
    cfg.grid_spacing = t.grid_spacing;
    cfg.step_max = t.step_max;
    cfg.step_min = t.step_min;
    if let Some(c) = &t.centers {
        cfg.centers = parse_centers(c)?;
    }
    Ok(cfg)
}

fn write_output(out: &Option<PathBuf>, csv: &str) -> std::io::Result<()> {
    match out {
        Some(path) => std::fs::write(path, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn write_bundles(out: &Option<PathBuf>, res: &EstimateResult) -> std::io::Result<()> {
    if res.bundles.is_empty() {
        return Ok(());
    }
    let text = res.bundles.join("\n---\n") + "\n";
    match out {
        Some(path) => {
            let mut p = path.clone().into_os_string();
            p.push(".bundles.txt");
            std::fs::write(&p, &text)?;
            eprintln!("wrote counterexample bundles to {}", p.to_string_lossy());
            Ok(())
        }
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

/// Run an estimation-style command; returns the process exit code.
fn run_estimation(cfg: &ExperimentConfig, out: &Option<PathBuf>, campaign: bool) -> i32 {
    let res = match run_trials(cfg) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    };
    let csv = res.to_csv(cfg);
    if let Err(e) = write_output(out, &csv).and_then(|_| write_bundles(out, &res)) {
        eprintln!("I/O error: {e}");
        return 1;
    }
    let violations = res.total_violations();
    let slope = res
        .slope
        .map(|s| format!(" slope={:.3}+-{:.3}", s.slope, s.stderr))
        .unwrap_or_default();
    let first = res.rows.first();
    println!(
        "{}: {} grid points, {} trials each, p_hat[0]={}{}, violations={}",
        cfg.event.as_str(),
        res.rows.len(),
        cfg.n_trials,
        first.map(|r| r.p_hat).unwrap_or(0.0),
        slope,
        violations
    );
    if campaign && violations > 0 {
        1
    } else {
        0
    }
}

/// Entry point; returns the process exit code (0 success, 1 assertion or I/O
/// failure, 2 invalid flags).
pub fn cli_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap uses exit code 2 for usage errors, 0 for --help/--version.
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match cli.command {
        Command::VerifyFormulas { common } => {
            match run_formula_suite(common.dim, common.trials, common.seed) {
                Ok(checks) => {
                    let csv = formula_suite_csv(&checks);
                    if let Err(e) = write_output(&common.out, &csv) {
                        eprintln!("I/O error: {e}");
                        return 1;
                    }
                    let failed = checks.iter().filter(|c| !c.pass).count();
                    println!(
                        "verify-formulas: {}/{} checks passed",
                        checks.len() - failed,
                        checks.len()
                    );
                    if failed > 0 {
                        1
                    } else {
                        0
                    }
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    2
                }
            }
        }
        Command::Estimate { trial, event } => {
            let event = match EventId::parse(&event) {
                Ok(e) => e,
                Err(e) => {
                    eprintln!("error: {e}");
                    return 2;
                }
            };
            match config_from(&trial, event) {
                Ok(cfg) => run_estimation(&cfg, &trial.common.out, false),
                Err(e) => {
                    eprintln!("error: {e}");
                    2
                }
            }
        }
        Command::CascadeStats { trial } => match config_from(&trial, EventId::CascadeLemmas) {
            Ok(cfg) => run_estimation(&cfg, &trial.common.out, true),
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Command::ImplicationAudit { trial } => {
            match config_from(&trial, EventId::HemiballImplication) {
                Ok(cfg) => run_estimation(&cfg, &trial.common.out, true),
                Err(e) => {
                    eprintln!("error: {e}");
                    2
                }
            }
        }
        Command::AnnulusCount {
            common,
            alpha,
            r_inner,
            r_outer,
            grid_spacing,
        } => {
            let mut cfg = ExperimentConfig::new(common.dim, EventId::AnnulusCount);
            cfg.n_trials = common.trials;
            cfg.master_seed = common.seed;
            cfg.alpha = alpha;
            cfg.annulus_inner = r_inner;
            cfg.annulus_outer = r_outer;
            cfg.grid_spacing = Some(grid_spacing);
            run_estimation(&cfg, &common.out, false)
        }
        Command::Replay { bundle } => {
            let text = match std::fs::read_to_string(&bundle) {
                Ok(t) => t,
                Err(e) => {
                    eprintln!("cannot read bundle: {e}");
                    return 1;
                }
            };
            let mut code = 0;
            for (i, part) in text.split("\n---\n").enumerate() {
                if part.trim().is_empty() {
                    continue;
                }
                match replay_bundle(part) {
                    Ok(out) => {
                        println!(
                            "bundle {i}: success={} borderline={} violations={}",
                            out.success,
                            out.borderline,
                            out.violations.len()
                        );
                        if let Some(r) = &out.record {
                            println!("{r}");
                        }
                        // Verify bit-exact reproduction against the recorded
                        // trial when the bundle carries a record line.
                        if let Some(recorded) =
                            part.lines().nth(1).filter(|l| !l.starts_with("violation:"))
                        {
                            if out.record.as_deref() != Some(recorded) {
                                eprintln!("bundle {i}: replay does not match the record");
                                code = 1;
                            }
                        }
                    }
                    Err(e) => {
                        eprintln!("bundle {i}: replay failed: {e}");
                        code = 1;
                    }
                }
            }
            code
        }
    }
}
