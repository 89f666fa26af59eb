//! `train`: seeded runs with per-seed curves, checkpoints and a summary.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use harl_core::{CooperativeMarkovGame, TabularJointPolicy};
use harl_engines::offpolicy::{run_continuous, run_had3qn, OffPolicyAlgorithm};
use harl_engines::onpolicy::mean_std;
use harl_engines::run_training;
use harl_nn::Checkpoint;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{Algorithm, Env, Family, RunConfig};

#[derive(Clone, Debug, Serialize)]
pub struct SeedSummary {
    pub seed: u64,
    /// Exact return of the learned policy (stochastic for on-policy runs, greedy for HAD3QN, the
    /// deterministic policy's mean reward for continuous runs).
    pub final_return: f64,
    /// Exact return of the per-state argmax policy, tabular runs only.
    pub greedy_return: Option<f64>,
    pub env_steps: usize,
    pub rounds: usize,
    /// Mean wall-clock seconds of one update, per agent; empty for off-policy runs.
    pub agent_update_seconds: Vec<f64>,
    pub curve: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub algorithm: Algorithm,
    pub final_return_mean: f64,
    pub final_return_std: f64,
    pub runs: Vec<SeedSummary>,
}

#[derive(Serialize)]
struct TimingRow {
    round: usize,
    agent: usize,
    seconds: f64,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> anyhow::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_policy(path: &Path, pi: &TabularJointPolicy) -> anyhow::Result<()> {
    std::fs::write(path, pi.to_json()?)?;
    Ok(())
}

fn train_seed(cfg: &RunConfig, algorithm: Algorithm, env: &EnvHandle, seed: u64, dir: &Path) -> anyhow::Result<SeedSummary> {
    std::fs::create_dir_all(dir)?;
    let curve = dir.join("curve.csv");
    let checkpoint = dir.join("checkpoint.json");
    let mut ckpt = Checkpoint::new(seed);
    let summary = match (algorithm.family(), env) {
        (Family::OnPolicy(alg), EnvHandle::Tabular(game)) => {
            let run = run_training(game.clone(), &cfg.on_policy(alg), seed)?;
            write_csv(&curve, &run.rows, &harl_engines::onpolicy::CURVE_COLUMNS)?;
            let n = game.n_agents();
            let mut timing = Vec::new();
            let mut totals = vec![(0.0, 0usize); n];
            for (round, (order, secs)) in run.orders.iter().zip(&run.update_seconds).enumerate() {
                // a shared network logs one block covering every agent
                let blocks: Vec<(usize, f64)> = if run.actor.is_shared() {
                    (0..n).map(|a| (a, secs[0] / n as f64)).collect()
                } else {
                    order.iter().copied().zip(secs.iter().copied()).collect()
                };
                for (agent, seconds) in blocks {
                    totals[agent].0 += seconds;
                    totals[agent].1 += 1;
                    timing.push(TimingRow { round, agent, seconds });
                }
            }
            write_csv(&dir.join("timings.csv"), &timing, &["round", "agent", "seconds"])?;
            for (i, slot) in run.actor.slots().iter().enumerate() {
                ckpt.push_mlp(&format!("actor_{i}"), &slot.net);
            }
            ckpt.push_mlp("critic", &run.critic);
            let score = run.exact_score()?;
            write_policy(&dir.join("policy.json"), &run.actor.to_tabular(game, &run.features)?)?;
            SeedSummary {
                seed,
                final_return: score.stochastic,
                greedy_return: Some(score.greedy),
                env_steps: run.env_steps,
                rounds: run.orders.len(),
                agent_update_seconds: totals.iter().map(|&(s, k)| s / k.max(1) as f64).collect(),
                curve,
                checkpoint: checkpoint.clone(),
            }
        }
        (Family::OffPolicy(OffPolicyAlgorithm::Had3qn), EnvHandle::Tabular(game)) => {
            let run = run_had3qn(game.clone(), &cfg.off_policy(OffPolicyAlgorithm::Had3qn), seed)?;
            write_csv(&curve, &run.rows, &harl_engines::offpolicy::OFF_POLICY_COLUMNS)?;
            for (i, q) in run.locals.iter().enumerate() {
                ckpt.push_mlp(&format!("local_q_{i}"), &q.net);
            }
            ckpt.push_mlp("global_q", &run.global.net);
            let pi = run.greedy_policy();
            write_policy(&dir.join("policy.json"), &pi)?;
            let j = harl_core::evaluate(game, &pi)?.j;
            SeedSummary {
                seed,
                final_return: j,
                greedy_return: Some(j),
                env_steps: run.env_steps,
                rounds: run.rows.last().map_or(0, |r| r.round),
                agent_update_seconds: vec![],
                curve,
                checkpoint: checkpoint.clone(),
            }
        }
        (Family::OffPolicy(OffPolicyAlgorithm::Had3qn), _) => bail!("had3qn needs a tabular environment"),
        (Family::OffPolicy(alg), EnvHandle::TargetMatching(game)) => {
            let run = run_continuous(game.clone(), &cfg.off_policy(alg), seed)?;
            write_csv(&curve, &run.rows, &harl_engines::offpolicy::OFF_POLICY_COLUMNS)?;
            for (i, a) in run.actors.iter().enumerate() {
                ckpt.push_mlp(&format!("actor_{i}"), &a.net);
            }
            for (i, c) in run.critics.iter().enumerate() {
                ckpt.push_mlp(&format!("critic_{i}"), &c.net);
            }
            SeedSummary {
                seed,
                final_return: run.final_return,
                greedy_return: None,
                env_steps: run.env_steps,
                rounds: run.rows.last().map_or(0, |r| r.round),
                agent_update_seconds: vec![],
                curve,
                checkpoint: checkpoint.clone(),
            }
        }
        (Family::OnPolicy(_), _) => bail!("on-policy algorithms need a tabular environment"),
        (Family::OffPolicy(_), _) => bail!("deterministic-policy algorithms need the target_matching environment"),
    };
    ckpt.save(&checkpoint)?;
    Ok(summary)
}

enum EnvHandle {
    Tabular(Arc<CooperativeMarkovGame>),
    TargetMatching(harl_core::game::TargetMatchingGame),
}

pub fn cmd_train(cfg: &RunConfig, out: &Path) -> anyhow::Result<TrainSummary> {
    let algorithm = cfg.algorithm.context("config has no algorithm")?;
    let env = match cfg.env.build()? {
        Env::Tabular(g) => EnvHandle::Tabular(g),
        Env::TargetMatching(g) => EnvHandle::TargetMatching(g),
        Env::Differentiable(_) => bail!("the differentiable game is only available through `repro diffgame`"),
    };
    std::fs::create_dir_all(out)?;
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| train_seed(cfg, algorithm, &env, seed, &out.join(format!("seed_{seed}"))))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let finals: Vec<f64> = runs.iter().map(|r| r.final_return).collect();
    let (m, s) = mean_std(&finals);
    let summary = TrainSummary { algorithm, final_return_mean: m, final_return_std: s, runs };
    std::fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}
