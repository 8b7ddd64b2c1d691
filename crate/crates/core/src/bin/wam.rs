//! Command-line entry points: data generation, the two-stage training
//! pipeline, fine-tuning, evaluation, the planner benchmark and the error
//! bound checker. Exit codes: 0 success, 2 config error, 3 data-integrity
//! error, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::time::Instant;
use wam_core::config::Config;
use wam_core::dataset::{generate_offline_dataset, load_dataset, save_dataset, subsample};
use wam_core::envs::mdp::{env_to_mdp, value_iteration, ExactModelAdapter};
use wam_core::envs::{EnvSpec, Task};
use wam_core::error::{Result, WamError};
use wam_core::evaluation::{emit_report, measure_reference_scores, summarize};
use wam_core::pipeline::{default_beam_width, TrainLog, Trainer};
use wam_core::planner::{
    beam_search_plan, mcts_plan, run_bound_trials, MctsConfig, PlanConfig, WorldModel,
};
use wam_core::rng::Rng64;

#[derive(Parser)]
#[command(name = "wam", about = "world-action model: training, planning, evaluation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Path to a JSON config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override config keys, e.g. --set train.m1_steps=100
    #[arg(long = "set")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => Config::load(p)?,
            None => Config::default(),
        };
        for s in &self.set {
            cfg.apply_override(s)?;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate offline shards from mixed-quality behavior policies.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for shards + manifest.
        #[arg(long)]
        out: PathBuf,
        /// Restrict generation to one task.
        #[arg(long)]
        task: Option<String>,
        /// Transitions per task (overrides config).
        #[arg(long)]
        n: Option<usize>,
        /// Comma-separated epsilon mixture (overrides config).
        #[arg(long)]
        mix: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Use the expert-tier epsilon only.
        #[arg(long, default_value_t = false)]
        expert: bool,
        /// Keep only this fraction of transitions (uniform, per task).
        #[arg(long)]
        subsample: Option<f64>,
    },
    /// Train the tokenizer only.
    TokenizerTrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Two-stage pretraining (stage 1 + stage 2).
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Resume from the checkpoint if it exists.
        #[arg(long, default_value_t = false)]
        resume: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Fine-tune a pretrained checkpoint on a single-task dataset.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Register a fresh task-embedding row (default on).
        #[arg(long, default_value_t = true)]
        fresh_task: bool,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on named tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated task names.
        #[arg(long)]
        tasks: String,
        #[arg(long, default_value_t = 16)]
        episodes: usize,
        #[arg(long, default_value_t = 0.001)]
        eps: f64,
        /// Planning as "H,K", or just "H" to pick the per-task default
        /// width (2 when fewer than ten valid actions); omit for greedy.
        #[arg(long)]
        plan: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 123)]
        seed: u64,
    },
    /// Benchmark beam-search planning on exact tabular adapters.
    PlanBench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated beam widths.
        #[arg(long, default_value = "1,2,3")]
        widths: String,
        /// Comma-separated horizons.
        #[arg(long, default_value = "0,1,2,3")]
        horizons: String,
        #[arg(long, default_value_t = 8)]
        episodes: usize,
        #[arg(long, default_value_t = 11)]
        seed: u64,
        /// Search algorithm: "beam" or "mcts" (the ablation comparator).
        #[arg(long, default_value = "beam")]
        algo: String,
    },
    /// Verify the search error bound on random perturbed tabular MDPs.
    BoundCheck {
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 20260808)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<T>()
                .map_err(|_| WamError::config(format!("bad {} entry '{}'", what, x)))
        })
        .collect()
}

fn specs_for(cfg: &Config, only: Option<&str>) -> Result<Vec<EnvSpec>> {
    let names: Vec<String> = match only {
        Some(t) => vec![t.to_string()],
        None => cfg.data.tasks.clone(),
    };
    names
        .iter()
        .map(|n| Ok(EnvSpec::new(Task::from_name(n)?)))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenData {
            config,
            out,
            task,
            n,
            mix,
            seed,
            expert,
            subsample: frac,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = n {
                cfg.data.transitions_per_task = n;
            }
            if let Some(seed) = seed {
                cfg.data.seed = seed;
            }
            let mixture: Vec<f64> = if expert {
                vec![cfg.data.expert_eps]
            } else if let Some(m) = mix {
                parse_list(&m, "mix")?
            } else {
                cfg.data.mix.clone()
            };
            let mut specs = specs_for(&cfg, task.as_deref())?;
            for spec in specs.iter_mut() {
                let (r, o) =
                    measure_reference_scores(spec, 64, cfg.train.gamma, cfg.data.seed ^ 0xef5)?;
                spec.ref_random = Some(r);
                spec.ref_oracle = Some(o);
            }
            let mut data = generate_offline_dataset(
                &specs,
                &mixture,
                cfg.data.transitions_per_task,
                cfg.train.gamma,
                cfg.data.seed,
            )?;
            if let Some(f) = frac {
                data = subsample(&data, f, cfg.data.seed ^ 0x5b5)?;
            }
            let manifest = save_dataset(&data, &out)?;
            println!(
                "wrote {} tasks, {} transitions to {}",
                manifest.shards.len(),
                manifest.counts.iter().sum::<u64>(),
                out.display()
            );
            Ok(())
        }
        Cmd::TokenizerTrain {
            config,
            data,
            checkpoint,
            log,
        } => {
            let mut cfg = config.load()?;
            // Tokenizer-only run: zero out the world budget.
            cfg.train.m1_steps = 0;
            let dataset = load_dataset(&data)?;
            let mut trainer = Trainer::new(cfg)?;
            let mut log = TrainLog::new(log)?;
            trainer.run_stage1(&dataset, &mut log)?;
            trainer.save(&checkpoint)?;
            println!(
                "tokenizer trained for {} steps -> {}",
                trainer.counters.tokenizer_steps,
                checkpoint.display()
            );
            Ok(())
        }
        Cmd::Pretrain {
            config,
            data,
            checkpoint,
            resume,
            log,
        } => {
            let cfg = config.load()?;
            let dataset = load_dataset(&data)?;
            let mut trainer = if resume && checkpoint.exists() {
                Trainer::load(&checkpoint, Some(&cfg))?
            } else {
                Trainer::new(cfg)?
            };
            let mut log = TrainLog::new(log)?;
            trainer.run_stage1(&dataset, &mut log)?;
            trainer.save(&checkpoint)?;
            trainer.run_stage2(&dataset, &mut log)?;
            trainer.save(&checkpoint)?;
            println!(
                "pretrained: tokenizer {} + world {} + joint {} steps -> {}",
                trainer.counters.tokenizer_steps,
                trainer.counters.m1_steps,
                trainer.counters.m2_steps,
                checkpoint.display()
            );
            Ok(())
        }
        Cmd::Finetune {
            config,
            data,
            checkpoint,
            out,
            fresh_task,
            log,
        } => {
            let cfg = config.load()?;
            let dataset = load_dataset(&data)?;
            let mut trainer = Trainer::load(&checkpoint, None)?;
            // Adopt fine-tuning budgets from the provided config.
            trainer.cfg.train.finetune = cfg.train.finetune.clone();
            let mut log = TrainLog::new(log)?;
            let row = trainer.run_finetune(&dataset, fresh_task, &mut log)?;
            trainer.save(&out)?;
            println!(
                "fine-tuned task row {} for {} steps -> {}",
                row,
                trainer.counters.finetune_steps,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            tasks,
            episodes,
            eps,
            plan,
            out,
            seed,
        } => {
            let trainer = Trainer::load(&checkpoint, None)?;
            let plan: Option<(usize, Option<usize>)> = match plan {
                Some(p) => {
                    let hk: Vec<usize> = parse_list(&p, "plan")?;
                    match hk.len() {
                        1 => Some((hk[0], None)),
                        2 => Some((hk[0], Some(hk[1]))),
                        _ => return Err(WamError::config("--plan expects H or H,K")),
                    }
                }
                None => None,
            };
            let mut specs = Vec::new();
            for name in tasks.split(',') {
                let task = Task::from_name(name.trim())?;
                // Training tasks use their dataset row; a fine-tuned task
                // uses the last registered row.
                let row = trainer
                    .cfg
                    .data
                    .tasks
                    .iter()
                    .position(|t| t == name.trim())
                    .unwrap_or(trainer.cfg.model.num_tasks - 1);
                specs.push((EnvSpec::new(task), row));
            }
            let mut rows = Vec::new();
            for (spec, row) in &specs {
                let plan_hk = plan.map(|(h, k)| {
                    (h, k.unwrap_or_else(|| default_beam_width(spec)))
                });
                rows.extend(trainer.evaluate(
                    std::slice::from_ref(&(spec.clone(), *row)),
                    episodes,
                    eps,
                    plan_hk,
                    seed,
                )?);
            }
            let summary = summarize(&rows, trainer.cfg.hash(), seed)?;
            emit_report(&rows, &summary, &out)?;
            for r in &rows {
                println!(
                    "{}: raw {:.3} (random {:.3}, oracle {:.3}) -> ONS {:.3}",
                    r.task, r.raw_mean, r.ref_random, r.ref_oracle, r.normalized
                );
            }
            println!("IQM ONS {:.3} -> {}", summary.iqm_ons, out.display());
            Ok(())
        }
        Cmd::PlanBench {
            config,
            out,
            widths,
            horizons,
            episodes,
            seed,
            algo,
        } => {
            if algo != "beam" && algo != "mcts" {
                return Err(WamError::config("--algo must be beam or mcts"));
            }
            let cfg = config.load()?;
            let widths: Vec<usize> = parse_list(&widths, "widths")?;
            let horizons: Vec<usize> = parse_list(&horizons, "horizons")?;
            let mut csv = String::from("env,k,h,call_count,mean_return,wall_ms\n");
            for name in &cfg.data.tasks {
                let spec = EnvSpec::new(Task::from_name(name)?);
                let env_mdp = env_to_mdp(&spec);
                let q = value_iteration(&env_mdp.mdp, cfg.train.gamma, 1e-8)?;
                let n_actions = env_mdp.mdp.n_actions;
                for &k in widths.iter().filter(|&&k| k <= n_actions) {
                    for &h in &horizons {
                        let started = Instant::now();
                        let mut calls = 0usize;
                        let mut returns = Vec::new();
                        for ep in 0..episodes {
                            let mut model = TabularPlanModel {
                                adapter: ExactModelAdapter::exact(
                                    &env_mdp.mdp,
                                    &q,
                                    seed + ep as u64,
                                ),
                            };
                            let plan_cfg =
                                PlanConfig::new(h, k, cfg.train.gamma, vec![true; n_actions])?;
                            let mut rng = Rng64::stream(seed, 100 + ep as u64);
                            let mut state = wam_core::envs::initial_state(&spec);
                            let mut total = 0.0;
                            loop {
                                let si = env_mdp.state_index(&state).expect("enumerated");
                                let a_local = if algo == "mcts" {
                                    let mcfg = MctsConfig {
                                        iterations: 32 * k.max(1),
                                        temperature: 0.9,
                                        max_depth: h.max(1),
                                        gamma: cfg.train.gamma,
                                        c_puct: 1.25,
                                        valid: vec![true; n_actions],
                                    };
                                    mcts_plan(&si, &mcfg, &mut model)?
                                } else {
                                    let (a, diag) = beam_search_plan(&si, &plan_cfg, &mut model)?;
                                    calls += diag.model_calls;
                                    a
                                };
                                let action = spec.task.valid_actions()[a_local];
                                let (next, reward, done) =
                                    wam_core::envs::env_step(&spec, &state, action, &mut rng)?;
                                total += reward;
                                state = next;
                                if done {
                                    break;
                                }
                            }
                            returns.push(total);
                        }
                        let mean = returns.iter().sum::<f64>() / returns.len() as f64;
                        let wall = started.elapsed().as_secs_f64() * 1e3;
                        csv.push_str(&format!(
                            "{},{},{},{},{},{:.3}\n",
                            name, k, h, calls, mean, wall
                        ));
                    }
                }
            }
            std::fs::write(&out, csv)?;
            println!("plan bench -> {}", out.display());
            Ok(())
        }
        Cmd::BoundCheck { trials, seed, out } => {
            let rows = run_bound_trials(trials, seed)?;
            let mut csv = String::from("trial,eps_s,eps_r,eps_q,measured_gap,bound_rhs,holds\n");
            let mut violations = 0usize;
            for r in &rows {
                if !r.holds {
                    violations += 1;
                }
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{}\n",
                    r.trial, r.eps_s, r.eps_r, r.eps_q, r.measured_gap, r.bound, r.holds
                ));
            }
            std::fs::write(&out, csv)?;
            println!(
                "{} trials, {} violations -> {}",
                rows.len(),
                violations,
                out.display()
            );
            if violations > 0 {
                return Err(WamError::contract(format!(
                    "{} bound violations",
                    violations
                )));
            }
            Ok(())
        }
    }
}

/// Exact tabular world model used by the planner benchmark.
struct TabularPlanModel<'a> {
    adapter: ExactModelAdapter<'a>,
}

impl WorldModel for TabularPlanModel<'_> {
    type State = usize;
    fn q_values(&mut self, s: &usize) -> Vec<f64> {
        self.adapter.q_table[*s].clone()
    }
    fn imagine_step(&mut self, s: &usize, action: usize) -> (usize, f64, bool) {
        self.adapter.sample_step(*s, action)
    }
}

fn main() {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {}", e);
            std::process::exit(e.exit_code());
        }
    }
}
