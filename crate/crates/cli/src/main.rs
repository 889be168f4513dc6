use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use prognosticator::agents::AgentKind;
use prognosticator::basis::{BasisFamily, TimeBasisConfig};
use prognosticator::diagnostics;
use prognosticator::envs::EnvName;
use prognosticator::error::{Error, Result};
use prognosticator::estimators::forecast_weights;
use prognosticator::harness::{self, ExperimentConfig, SweepGrid, Trial};

#[derive(Parser)]
#[command(
    name = "prognosticator",
    version,
    about = "Policy optimization by forecasting future performance"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one agent and write its per-episode log as CSV.
    Run {
        #[arg(long)]
        env: Option<EnvName>,
        #[arg(long)]
        speed: Option<u32>,
        #[arg(long)]
        agent: AgentKind,
        /// Base seed of the trial.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        episodes: Option<usize>,
        /// Flat `key = value` configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output file; standard output if absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every (agent, speed, seed) trial of a configuration and write
    /// episodes.csv, regret.csv and meta.txt. `sweep.<key> = v1, v2` lines
    /// add a grid search written to sweep.csv.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        env: Option<EnvName>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the forecast weights ζ as CSV `episode_index,weight`.
    Weights {
        #[arg(long, default_value = "fourier")]
        basis: BasisFamily,
        #[arg(long, default_value_t = 5)]
        d: usize,
        #[arg(long, default_value_t = 99)]
        k: usize,
        #[arg(long, default_value_t = 1)]
        delta: usize,
        /// Print the comparison table of every basis plus an exponential
        /// reference instead.
        #[arg(long)]
        table: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient on random instances.
    CheckGrad {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        instances: usize,
    },
    /// Monte Carlo checks of the forecasters' statistical properties.
    CheckEstimators {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn write_output(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => {
            fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_pairs(config: Option<&Path>) -> Result<Vec<(String, String)>> {
    match config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            harness::parse_key_values(&text)
        }
        None => Ok(Vec::new()),
    }
}

/// Applies an `--env` flag on top of configuration pairs, refusing a
/// conflicting `env.name` line.
fn with_env(
    mut pairs: Vec<(String, String)>,
    env: Option<EnvName>,
) -> Result<Vec<(String, String)>> {
    if let Some(env) = env {
        if let Some((_, v)) = pairs.iter().find(|(k, _)| k == "env.name") {
            if v.parse::<EnvName>()? != env {
                return Err(Error::Config(format!(
                    "--env {env} conflicts with `env.name = {v}`"
                )));
            }
        }
        pairs.insert(0, ("env.name".into(), env.to_string()));
    }
    Ok(pairs)
}

#[allow(clippy::too_many_arguments)]
fn run(
    env: Option<EnvName>,
    speed: Option<u32>,
    agent: AgentKind,
    seed: Option<u64>,
    episodes: Option<usize>,
    config: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::from_pairs(&with_env(load_pairs(config)?, env)?)?;
    if let Some(n) = episodes {
        cfg.episodes = n;
    }
    let speed = speed.unwrap_or(cfg.speeds[0]);
    let trial = Trial {
        agent,
        speed,
        seed_index: 0,
        seed: seed.unwrap_or(cfg.base_seed),
    };
    cfg.validate()?;
    let log = harness::run_trial(&cfg, &trial)?;
    let mut s = String::from("episode,return,expected_return,entropy,min_action_prob\n");
    for r in &log.records {
        let expected = r.expected_return.map(|v| v.to_string()).unwrap_or_default();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.episode_index, r.observed_return, expected, r.entropy, r.min_action_prob
        );
    }
    write_output(out, &s)
}

fn sweep(config: Option<&Path>, env: Option<EnvName>, out: Option<&Path>) -> Result<()> {
    let (grid, pairs) = SweepGrid::split(&with_env(load_pairs(config)?, env)?)?;
    let mut cfg = ExperimentConfig::from_pairs(&pairs)?;
    if let Some(dir) = out {
        cfg.output_dir = dir.to_path_buf();
    }
    let output = harness::run_experiment(&cfg)?;
    eprintln!("wrote {}", output.episodes_path.display());
    eprintln!("wrote {}", output.regret_path.display());
    eprintln!("wrote {}", output.meta_path.display());
    print!("{}", output.regret.to_csv());
    if !grid.axes.is_empty() {
        let path = cfg.output_dir.join("sweep.csv");
        write_output(Some(&path), &harness::sweep(&cfg, &grid)?)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn weights(
    basis: BasisFamily,
    d: usize,
    k: usize,
    delta: usize,
    table: bool,
    out: Option<&Path>,
) -> Result<()> {
    let text = if table {
        let mut bases = vec![TimeBasisConfig::constant(), TimeBasisConfig::identity()];
        for family in [BasisFamily::Polynomial, BasisFamily::FourierCosine] {
            bases.push(TimeBasisConfig::new(family, d, 1)?);
        }
        harness::emit_weight_table(k, delta, &bases, 0.95)?
    } else {
        let zeta = forecast_weights(k, delta, &TimeBasisConfig::new(basis, d, 1)?)?;
        let mut s = String::from("episode_index,weight\n");
        for (i, w) in zeta.iter().enumerate() {
            let _ = writeln!(s, "{},{w}", i + 1);
        }
        s
    };
    write_output(out, &text)
}

const GRADIENT_TOLERANCE: f64 = 1e-4;

fn check_grad(seed: u64, instances: usize) -> Result<bool> {
    let mut ok = true;
    for c in diagnostics::gradient_checks(seed, instances, 1e-5)? {
        let pass = c.max_relative_error < GRADIENT_TOLERANCE && c.compared > 0;
        ok &= pass;
        println!(
            "{:<18} instances {:>3}  max relative error {:.3e}  compared {:>5}  skipped {:>3}  {}",
            c.name,
            c.instances,
            c.max_relative_error,
            c.compared,
            c.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn check_estimators(seed: u64) -> Result<bool> {
    let fourier3 = TimeBasisConfig::new(BasisFamily::FourierCosine, 3, 1)?;
    let constant = TimeBasisConfig::constant();
    let mut ok = true;
    let mut verdict = |name: &str, pass: bool, detail: String| {
        ok &= pass;
        println!("{name:<28} {detail}  {}", if pass { "ok" } else { "FAIL" });
    };

    let nis = diagnostics::nis_unbiasedness(seed, 5000, 20, 1, &fourier3)?;
    verdict(
        "nis unbiased (k=20)",
        nis.z_score() < 3.0,
        format!(
            "J = {:.5}  mean = {:.5} ± {:.5}  z = {:.2}",
            nis.truth,
            nis.mean,
            nis.standard_error,
            nis.z_score()
        ),
    );

    let (exact, truth) = diagnostics::exact_wis_mean_two_episodes();
    let small = diagnostics::nwis_monte_carlo(seed.wrapping_add(1), 20_000, 2, 1, &constant)?;
    let large = diagnostics::nwis_monte_carlo(seed.wrapping_add(2), 20_000, 20, 1, &constant)?;
    verdict(
        "nwis biased at n=2",
        small.z_score() > 3.0 && (small.mean - exact).abs() < 4.0 * small.standard_error,
        format!(
            "J = {truth:.5}  exact E = {exact:.5}  mean = {:.5} ± {:.5}",
            small.mean, small.standard_error
        ),
    );
    verdict(
        "nwis bias shrinks (n=20)",
        (large.mean - truth).abs() < (small.mean - truth).abs(),
        format!(
            "|bias| {:.5} -> {:.5}",
            (small.mean - truth).abs(),
            (large.mean - truth).abs()
        ),
    );

    let points = diagnostics::consistency(seed.wrapping_add(3), 50, &[100, 10_000], &fourier3)?;
    let (a, b) = (points[0], points[1]);
    verdict(
        "consistency (N=100 -> 10000)",
        b.nis_error < a.nis_error && b.nwis_error < a.nwis_error,
        format!(
            "nis {:.4} -> {:.4}  nwis {:.4} -> {:.4}",
            a.nis_error, b.nis_error, a.nwis_error, b.nwis_error
        ),
    );
    Ok(ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Run {
            env,
            speed,
            agent,
            seed,
            episodes,
            config,
            out,
        } => run(
            env,
            speed,
            agent,
            seed,
            episodes,
            config.as_deref(),
            out.as_deref(),
        )
        .map(|_| true),
        Command::Sweep { config, env, out } => {
            sweep(config.as_deref(), env, out.as_deref()).map(|_| true)
        }
        Command::Weights {
            basis,
            d,
            k,
            delta,
            table,
            out,
        } => weights(basis, d, k, delta, table, out.as_deref()).map(|_| true),
        Command::CheckGrad { seed, instances } => check_grad(seed, instances),
        Command::CheckEstimators { seed } => check_estimators(seed),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: some checks failed");
            ExitCode::FAILURE
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
