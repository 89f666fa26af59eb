use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use harl_cli::config::RunConfig;
use harl_cli::{repro, train};
use harl_core::suites::{run_suite, SUITES};
use harl_core::TabularJointPolicy;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "harl", version, about = "Heterogeneous-agent reinforcement learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train with an on-policy or off-policy engine and write curves, checkpoints and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the config's seed list.
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact sequential policy iteration on a tabular game.
    ExactIter {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reproduce a counterexample.
    Repro {
        case: ReproCase,
        /// Number of agents for `xor` (2, 4 and 6 when absent).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Best-response gaps of a tabular joint policy; fails when any gap reaches the tolerance.
    VerifyNe {
        /// Policy JSON, such as `policy.json` written by `train`.
        #[arg(long)]
        policy: PathBuf,
        /// Run config naming the environment.
        #[arg(long, conflicts_with = "game", required_unless_present = "game")]
        config: Option<PathBuf>,
        /// Game document written by `export-game`.
        #[arg(long)]
        game: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-6)]
        tolerance: f64,
    },
    /// Run property suites (`all` or one name) and print JSON verdicts.
    Props {
        suite: String,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seed: Vec<u64>,
    },
    /// Write the tabular game of a config as a JSON document.
    ExportGame {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReproCase {
    Example2,
    Xor,
    Diffgame,
}

/// Exit status 1 for failed checks and runtime errors, 2 for bad configuration or usage.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn usage(error: anyhow::Error) -> Failure {
    Failure { code: 2, error }
}

fn failed(error: anyhow::Error) -> Failure {
    Failure { code: 1, error }
}

fn load(path: &Path, seeds: Option<Vec<u64>>) -> Result<RunConfig, Failure> {
    let mut cfg = RunConfig::load(path).map_err(usage)?;
    if let Some(s) = seeds {
        cfg.seeds = s;
        cfg.validate().map_err(usage)?;
    }
    Ok(cfg)
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| failed(e.into()))?;
    println!("{text}");
    if let Some(path) = out {
        std::fs::write(path, &text).with_context(|| format!("writing {}", path.display())).map_err(failed)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool, Failure> {
    match cli.command {
        Command::Train { config, seed, out } => {
            let cfg = load(&config, seed)?;
            cfg.algorithm.context("config has no algorithm").map_err(usage)?;
            let out = out.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from("runs"));
            let summary = train::cmd_train(&cfg, &out).map_err(failed)?;
            emit(&summary, None)?;
            Ok(true)
        }
        Command::ExactIter { config, seed, out } => {
            let cfg = load(&config, seed)?;
            let game = cfg.env.tabular().map_err(usage)?;
            let out = out.or_else(|| cfg.out.clone());
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).map_err(|e| failed(e.into()))?;
            }
            #[derive(Serialize)]
            struct Line {
                seed: u64,
                initial_j: f64,
                final_j: f64,
                rounds: usize,
                final_gaps: Vec<f64>,
            }
            let mut lines = Vec::new();
            for &s in &cfg.seeds {
                let run = repro::exact_iter(&game, &cfg.exact, &cfg.trust_region, s).map_err(failed)?;
                if let Some(dir) = &out {
                    let path = dir.join(format!("exact_seed_{s}.json"));
                    std::fs::write(&path, run.to_json().map_err(|e| failed(e.into()))?).map_err(|e| failed(e.into()))?;
                }
                lines.push(Line {
                    seed: s,
                    initial_j: run.initial_j,
                    final_j: run.final_j(),
                    rounds: run.rounds.len(),
                    final_gaps: run.final_gaps.clone(),
                });
            }
            emit(&lines, None)?;
            Ok(true)
        }
        Command::Repro { case, n, out } => {
            match case {
                ReproCase::Example2 => emit(&repro::example2(0.7).map_err(failed)?, out.as_deref())?,
                ReproCase::Xor => {
                    let ns = n.map_or_else(|| vec![2, 4, 6], |n| vec![n]);
                    let reports = ns.into_iter().map(repro::xor).collect::<anyhow::Result<Vec<_>>>().map_err(usage)?;
                    emit(&reports, out.as_deref())?
                }
                ReproCase::Diffgame => emit(&repro::diffgame(), out.as_deref())?,
            }
            Ok(true)
        }
        Command::VerifyNe { policy, config, game, tolerance } => {
            let game = match (config, game) {
                (Some(c), _) => load(&c, None)?.env.tabular().map_err(usage)?,
                (None, Some(g)) => {
                    let text = std::fs::read_to_string(&g).with_context(|| format!("reading {}", g.display())).map_err(usage)?;
                    std::sync::Arc::new(harl_core::CooperativeMarkovGame::from_json(&text).map_err(|e| usage(e.into()))?)
                }
                (None, None) => unreachable!("clap requires one of --config and --game"),
            };
            let text = std::fs::read_to_string(&policy)
                .with_context(|| format!("reading {}", policy.display()))
                .map_err(usage)?;
            let pi = TabularJointPolicy::from_json(&text).map_err(|e| usage(e.into()))?;
            let (report, pass) = repro::verify_ne(&game, &pi, tolerance).map_err(usage)?;
            #[derive(Serialize)]
            struct Verdict {
                j: f64,
                gaps: Vec<f64>,
                tolerance: f64,
                passed: bool,
            }
            emit(&Verdict { j: report.j, gaps: report.gaps, tolerance, passed: pass }, None)?;
            Ok(pass)
        }
        Command::Props { suite, seed } => {
            let names: Vec<&str> = if suite == "all" {
                SUITES.to_vec()
            } else if SUITES.contains(&suite.as_str()) {
                vec![suite.as_str()]
            } else {
                return Err(usage(anyhow::anyhow!("unknown suite '{suite}' (expected all or one of {})", SUITES.join(", "))));
            };
            let mut verdicts = Vec::new();
            for &s in &seed {
                for name in &names {
                    verdicts.push(run_suite(name, s).map_err(|e| failed(e.into()))?);
                }
            }
            let pass = verdicts.iter().all(|v| v.passed);
            emit(&verdicts, None)?;
            Ok(pass)
        }
        Command::ExportGame { config, out } => {
            let game = load(&config, None)?.env.tabular().map_err(usage)?;
            let text = game.to_json().map_err(|e| failed(e.into()))?;
            match out {
                Some(path) => std::fs::write(&path, text).map_err(|e| failed(e.into()))?,
                None => println!("{text}"),
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
