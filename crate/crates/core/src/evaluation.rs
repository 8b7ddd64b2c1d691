//! Policy rollouts with evaluation noise, oracle-normalized scores, IQM
//! aggregation, and deterministic report emission.

use crate::backbone::{q_values_at_context, Backbone, LearnedWorldModel, TokenContext};
use crate::envs::mdp::{env_to_mdp, greedy_from_row, value_iteration};
use crate::envs::{env_step, initial_state, render_observation, EnvSpec};
use crate::error::{Result, WamError};
use crate::planner::{beam_search_plan, greedy_policy, PlanConfig};
use crate::rng::Rng64;
use crate::tokenizer::Tokenizer;
use serde::Serialize;
use std::path::Path;

/// Mean of the values strictly inside the interquartile band: drop
/// floor(n/4) entries from each end of the sorted list.
pub fn iqm(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(WamError::contract("iqm of an empty list"));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let drop = sorted.len() / 4;
    let kept = &sorted[drop..sorted.len() - drop];
    Ok(kept.iter().sum::<f64>() / kept.len() as f64)
}

/// Linear normalization (raw - random) / (oracle - random); may exceed 1 or
/// go negative.
pub fn normalized_score(raw: f64, random_ref: f64, oracle_ref: f64) -> Result<f64> {
    if (oracle_ref - random_ref).abs() < 1e-12 {
        return Err(WamError::contract(
            "reference scores must differ for normalization",
        ));
    }
    Ok((raw - random_ref) / (oracle_ref - random_ref))
}

/// Policy evaluated by `rollout_policy`.
pub enum EvalPolicy<'a> {
    /// Greedy (or planned) actions from a trained model.
    Learned {
        tokenizer: &'a Tokenizer,
        model: &'a Backbone,
        support: &'a [f64],
        /// Enable beam-search planning when horizon >= 1.
        plan: Option<PlanConfig>,
        /// Task-embedding row the model uses for this environment.
        task_id: usize,
    },
    /// Uniform random valid actions.
    Random,
    /// Greedy over a value-iteration Q* table.
    Oracle,
}

/// Roll out `episodes` episodes with epsilon-greedy exploration noise and
/// return the raw (undiscounted) returns.
pub fn rollout_policy(
    spec: &EnvSpec,
    policy: &EvalPolicy<'_>,
    episodes: usize,
    eps_eval: f64,
    gamma: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if episodes == 0 {
        return Err(WamError::contract("episodes must be >= 1"));
    }
    let oracle_q = match policy {
        EvalPolicy::Oracle => {
            let env_mdp = env_to_mdp(spec);
            Some((value_iteration(&env_mdp.mdp, gamma, 1e-8)?, env_mdp))
        }
        _ => None,
    };
    let valid = spec.task.valid_actions();
    let mut returns = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut rng = Rng64::stream(seed, 0x9e3 + ep as u64);
        let mut state = initial_state(spec);
        let mut total = 0.0;
        let mut ctx = match policy {
            EvalPolicy::Learned {
                tokenizer,
                model,
                task_id,
                ..
            } => {
                let mut ctx = TokenContext::new(
                    *task_id,
                    model.cfg.seq_timesteps,
                    model.cfg.tokens_per_frame,
                );
                ctx.push_frame(tokenizer.encode_observation(&render_observation(spec, &state))?)?;
                Some(ctx)
            }
            _ => None,
        };
        loop {
            let action = if eps_eval > 0.0 && rng.chance(eps_eval) {
                *rng.choose(valid)
            } else {
                match policy {
                    EvalPolicy::Random => *rng.choose(valid),
                    EvalPolicy::Oracle => {
                        let (q, env_mdp) = oracle_q.as_ref().unwrap();
                        match env_mdp.state_index(&state) {
                            Some(si) => valid[greedy_from_row(&q[si])],
                            None => *rng.choose(valid),
                        }
                    }
                    EvalPolicy::Learned {
                        model,
                        support,
                        plan,
                        ..
                    } => {
                        let ctx_ref = ctx.as_ref().unwrap();
                        match plan {
                            Some(cfg) if cfg.horizon >= 1 => {
                                let mut wm = LearnedWorldModel {
                                    model,
                                    support: support.to_vec(),
                                };
                                beam_search_plan(ctx_ref, cfg, &mut wm)?.0
                            }
                            _ => {
                                let q = q_values_at_context(model, ctx_ref, support)?;
                                greedy_policy(&q, &spec.task.valid_mask())?
                            }
                        }
                    }
                }
            };
            let (next, reward, done) = env_step(spec, &state, action, &mut rng)?;
            total += reward;
            state = next;
            if let Some(c) = ctx.as_mut() {
                c.push_action(action as u8)?;
                if !done {
                    if let EvalPolicy::Learned { tokenizer, .. } = policy {
                        c.push_frame(
                            tokenizer.encode_observation(&render_observation(spec, &state))?,
                        )?;
                    }
                }
            }
            if done {
                break;
            }
        }
        returns.push(total);
    }
    Ok(returns)
}

/// Measure the random and oracle reference returns for a task.
pub fn measure_reference_scores(
    spec: &EnvSpec,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<(f64, f64)> {
    let random = rollout_policy(spec, &EvalPolicy::Random, episodes, 0.0, gamma, seed)?;
    let oracle = rollout_policy(spec, &EvalPolicy::Oracle, episodes, 0.0, gamma, seed ^ 0xabc)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&random), mean(&oracle)))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreRow {
    pub task: String,
    pub raw_mean: f64,
    pub ref_random: f64,
    pub ref_oracle: f64,
    pub normalized: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScoreSummary {
    pub config_hash: String,
    pub seed: u64,
    pub mean_ons: f64,
    pub median_ons: f64,
    pub iqm_ons: f64,
}

pub fn summarize(rows: &[ScoreRow], config_hash: u64, seed: u64) -> Result<ScoreSummary> {
    if rows.is_empty() {
        return Err(WamError::contract("no score rows"));
    }
    let mut ons: Vec<f64> = rows.iter().map(|r| r.normalized).collect();
    ons.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = if ons.len() % 2 == 1 {
        ons[ons.len() / 2]
    } else {
        0.5 * (ons[ons.len() / 2 - 1] + ons[ons.len() / 2])
    };
    Ok(ScoreSummary {
        config_hash: format!("{:016x}", config_hash),
        seed,
        mean_ons: ons.iter().sum::<f64>() / ons.len() as f64,
        median_ons: median,
        iqm_ons: iqm(&ons)?,
    })
}

/// Write `scores.csv` and `summary.json` with deterministic field order and
/// byte-identical output for identical inputs.
pub fn emit_report(rows: &[ScoreRow], summary: &ScoreSummary, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut csv = String::from("task,raw_mean,ref_random,ref_oracle,normalized\n");
    for r in rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            r.task, r.raw_mean, r.ref_random, r.ref_oracle, r.normalized
        ));
    }
    std::fs::write(dir.join("scores.csv"), csv)?;
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(summary)?,
    )?;
    Ok(())
}
